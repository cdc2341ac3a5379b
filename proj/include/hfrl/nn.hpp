#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "hfrl/autodiff.hpp"

namespace hfrl::nn {

using ad::Matrix;
using ad::Tensor;

// A named tensor owned by some module. Trainable entries are optimized and
// Polyak-averaged; frozen entries are persisted but never trained. Buffers
// (power-iteration vectors) are persisted but excluded from parameter counts.
enum class Role { Trainable, Frozen, Buffer };

struct NamedTensor {
  std::string name;
  Tensor tensor;
  Role role = Role::Trainable;
};

class Registry {
 public:
  Tensor add(std::string name, Matrix value, Role role = Role::Trainable);
  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::vector<Tensor> trainable() const;
  std::size_t count(Role role) const;

 private:
  std::vector<NamedTensor> entries_;
};

// Persistent singular-vector estimates for one weight matrix.
struct SpectralNormState {
  Tensor u;  // rows x 1 buffer
  Tensor v;  // cols x 1 buffer
};

SpectralNormState make_spectral_state(Registry& reg, const std::string& name, ad::Index rows, ad::Index cols,
                                      std::mt19937_64& rng);

// One power iteration (when `update`), then W / sigma with sigma = u^T W v.
// Gradients treat u and v as constants. sigma is floored at 1e-12.
Tensor spectral_normalize(const Tensor& w, SpectralNormState& state, bool update);

// Largest singular value estimate from the current u, v (no iteration).
double spectral_sigma(const Matrix& w, const SpectralNormState& state);

Matrix uniform_matrix(ad::Index rows, ad::Index cols, double bound, std::mt19937_64& rng);
Matrix normal_matrix(ad::Index rows, ad::Index cols, double stddev, std::mt19937_64& rng);

// y = x W + b with W stored as (in x out). Optionally spectrally normalized.
class Linear {
 public:
  Linear() = default;
  Linear(Registry& reg, const std::string& name, ad::Index in, ad::Index out, bool spectral, std::mt19937_64& rng);

  Tensor forward(const Tensor& x, bool training);

  ad::Index in() const { return in_; }
  ad::Index out() const { return out_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }
  bool spectral() const { return spectral_; }
  const SpectralNormState& spectral_state() const { return sn_; }

 private:
  ad::Index in_ = 0;
  ad::Index out_ = 0;
  bool spectral_ = false;
  Tensor weight_;
  Tensor bias_;
  SpectralNormState sn_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(Registry& reg, const std::string& name, ad::Index width, bool affine = true, double eps = 1e-5);
  Tensor forward(const Tensor& x) const;

 private:
  Tensor gamma_;
  Tensor beta_;
  double eps_ = 1e-5;
};

}  // namespace hfrl::nn
