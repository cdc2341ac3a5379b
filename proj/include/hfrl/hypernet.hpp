#pragma once

// Hypernetworks mapping the forcing parameter mu to the full weights of a
// small target MLP (actor or quantile critic).

#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "hfrl/autodiff.hpp"
#include "hfrl/nn.hpp"

namespace hfrl {

using ad::Index;
using ad::Matrix;
using ad::Tensor;

enum class EncoderKind { Mlp, Fourier, Kan };

std::string to_string(EncoderKind kind);
EncoderKind parse_encoder_kind(const std::string& name);  // mlp | fourier | kan

enum class Role { Actor, Critic };

struct LayerShape {
  Index in = 0;
  Index out = 0;
};

struct TargetTopology {
  Index state_dim = 64;
  Index action_dim = 8;
  Index hidden = 256;
  Index quantiles = 25;
  Index critic_heads = 2;

  std::vector<LayerShape> actor_layers() const;   // state -> hidden -> action
  std::vector<LayerShape> critic_layers() const;  // state + action -> hidden -> quantiles
  std::vector<LayerShape> layers(Role role) const;
};

// Flattened per-network output size: sum over layers of in*out + 2*out.
Index generated_size(const std::vector<LayerShape>& layers);

struct MuPreprocessor {
  double scale = 0.0225;  // mu_tilde = mu / scale
  double operator()(double mu) const { return mu / scale; }
};

struct EncoderConfig {
  EncoderKind kind = EncoderKind::Mlp;
  std::vector<Index> stage_widths{256, 512, 1024};
  std::size_t blocks_per_stage = 2;
  bool spectral_norm = true;
  Index fourier_mapping = 256;
  double fourier_sigma = 1.0;
  Index kan_basis = 16;
  double ln_eps = 1e-5;
  // Multiplier applied to the latent before the heads; <= 0 selects
  // 1/sqrt(latent width).
  double head_input_scale = -1.0;
  MuPreprocessor mu;

  Index latent() const { return stage_widths.back(); }
  double effective_head_scale() const;
  void validate() const;
};

// Encoder configurations at the published network scale.
EncoderConfig full_scale_encoder(EncoderKind kind);

struct ParameterCount {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
  std::size_t total() const { return trainable + frozen; }
};

// [mu, sin(2 pi sigma B mu), cos(2 pi sigma B mu)] for each row of mu (U x 1).
Tensor fourier_embed(const Tensor& mu_tilde, const Tensor& B, const Tensor& sigma);

// Closed-form mean and variance of sin(w x + phi) for x ~ N(0, 1).
double actnet_basis_mean(double omega, double phi);
double actnet_basis_variance(double omega, double phi);
inline constexpr double kActNetVarFloor = 1e-6;

// One ActNet layer: sum_k beta_k * (psi_hat_k(h) Lambda) [+ h W_lin] + b with
// psi_k(x) = sin(omega_k w0 x + phi_k), normalized by the closed forms above.
class ActNetLayer {
 public:
  ActNetLayer() = default;
  ActNetLayer(nn::Registry& reg, const std::string& name, Index in, Index out, Index basis, bool linear_branch,
              bool zero_beta, std::mt19937_64& rng);

  Tensor forward(const Tensor& h) const;
  Tensor bias() const { return bias_; }

 private:
  Index basis_ = 0;
  Tensor lambda_;
  Tensor beta_;
  Tensor omega_;
  Tensor phi_;
  Tensor w0_;
  Tensor w_lin_;
  Tensor bias_;
};

// Per-network generated parameters for a batch. Rows of `flat` hold the
// generated vector for each unique mu; `group` maps samples to rows.
struct GeneratedWeights {
  std::vector<LayerShape> layers;
  std::vector<double> unique_mu;
  std::vector<std::size_t> group;
  Tensor flat;  // unique x generated_size

  std::size_t batch() const { return group.size(); }
  Tensor weight(std::size_t row, std::size_t layer) const;  // in x out
  Tensor bias(std::size_t row, std::size_t layer) const;    // 1 x out
  Tensor scale(std::size_t row, std::size_t layer) const;   // 1 x out, s = 1 + head
  // Per-sample generated vectors (batch x generated_size).
  Tensor per_sample() const;
};

class HyperNetwork {
 public:
  HyperNetwork(const EncoderConfig& config, std::vector<LayerShape> target, const std::string& name,
               std::uint64_t seed);
  ~HyperNetwork();
  HyperNetwork(HyperNetwork&&) noexcept;
  HyperNetwork& operator=(HyperNetwork&&) noexcept;

  // Evaluates the encoder on the unique mu values only. `training` runs one
  // spectral-norm power iteration per backbone layer.
  GeneratedWeights generate(std::span<const double> mu, bool training = false);
  // Reference path: one encoder evaluation per sample, no sharing.
  GeneratedWeights generate_naive(std::span<const double> mu);

  // Latent for raw mu values (rows x latent).
  Tensor encode(std::span<const double> mu, bool training = false);

  nn::Registry& registry();
  const nn::Registry& registry() const;
  std::vector<Tensor> trainable() const { return registry().trainable(); }
  ParameterCount count() const;
  const EncoderConfig& config() const;
  const std::vector<LayerShape>& target_layers() const;

  // Rows evaluated by the encoder since construction.
  std::size_t encoder_evaluations() const;

  // Copies every tensor (trainable, frozen and buffers) from `other`.
  void copy_from(const HyperNetwork& other);
  // Copies buffers (power-iteration vectors) only.
  void copy_buffers_from(const HyperNetwork& other);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Target network forward with per-sample weights. obs is batch x in (the
// critic input is [state, action]). Actor output is softsign-bounded; critic
// output is the raw quantile atoms.
Tensor generated_forward(const Tensor& input, const GeneratedWeights& weights, Role role);

// Generated forward with the final pre-activation of the first layer exposed
// (tests of the per-neuron scale).
Tensor first_layer_preactivation(const Tensor& input, const GeneratedWeights& weights);

struct NetworkCensus {
  ParameterCount actor;
  ParameterCount critics;  // both critic hypernetworks
  ParameterCount total() const {
    return {actor.trainable + critics.trainable, actor.frozen + critics.frozen};
  }
};

// Builds one actor and `critic_heads` critic hypernetworks and counts them.
NetworkCensus count_parameters(const EncoderConfig& config, const TargetTopology& topology, std::uint64_t seed = 0);

}  // namespace hfrl
