#include "hfrl/hypernet.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace hfrl {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

}  // namespace

std::string to_string(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::Mlp:
      return "mlp";
    case EncoderKind::Fourier:
      return "fourier";
    case EncoderKind::Kan:
      return "kan";
  }
  throw std::invalid_argument("unknown encoder kind");
}

EncoderKind parse_encoder_kind(const std::string& name) {
  if (name == "mlp") return EncoderKind::Mlp;
  if (name == "fourier") return EncoderKind::Fourier;
  if (name == "kan") return EncoderKind::Kan;
  throw std::invalid_argument("unknown encoder '" + name + "' (expected mlp|fourier|kan)");
}

std::vector<LayerShape> TargetTopology::actor_layers() const { return {{state_dim, hidden}, {hidden, action_dim}}; }

std::vector<LayerShape> TargetTopology::critic_layers() const {
  return {{state_dim + action_dim, hidden}, {hidden, quantiles}};
}

std::vector<LayerShape> TargetTopology::layers(Role role) const {
  return role == Role::Actor ? actor_layers() : critic_layers();
}

Index generated_size(const std::vector<LayerShape>& layers) {
  Index n = 0;
  for (const auto& l : layers) n += l.in * l.out + 2 * l.out;
  return n;
}

double EncoderConfig::effective_head_scale() const {
  return head_input_scale > 0.0 ? head_input_scale : 1.0 / std::sqrt(static_cast<double>(latent()));
}

void EncoderConfig::validate() const {
  if (stage_widths.empty()) throw std::invalid_argument("encoder: stage_widths must be non-empty");
  for (auto w : stage_widths) {
    if (w <= 0) throw std::invalid_argument("encoder: stage widths must be positive");
  }
  if (kind == EncoderKind::Fourier && fourier_mapping <= 0) throw std::invalid_argument("encoder: fourier_mapping must be positive");
  if (kind == EncoderKind::Kan && kan_basis <= 0) throw std::invalid_argument("encoder: kan_basis must be positive");
  if (!(mu.scale > 0.0)) throw std::invalid_argument("encoder: mu scale must be positive");
}

EncoderConfig full_scale_encoder(EncoderKind kind) {
  EncoderConfig cfg;
  cfg.kind = kind;
  cfg.stage_widths = {256, 512, 1024};
  cfg.blocks_per_stage = 2;
  cfg.fourier_mapping = 256;
  cfg.kan_basis = 64;
  return cfg;
}

Tensor fourier_embed(const Tensor& mu_tilde, const Tensor& B, const Tensor& sigma) {
  if (mu_tilde.cols() != 1) throw ad::ShapeError("fourier_embed: mu must be a column, got " + ad::shape_string(mu_tilde));
  if (B.cols() != 1) throw ad::ShapeError("fourier_embed: B must be mapping x 1");
  const Tensor arg = ad::mul(ad::scale(ad::matmul(mu_tilde, ad::transpose(B)), kTwoPi), sigma);
  return ad::concat_cols({mu_tilde, ad::sin(arg), ad::cos(arg)});
}

double actnet_basis_mean(double omega, double phi) { return std::exp(-0.5 * omega * omega) * std::sin(phi); }

double actnet_basis_variance(double omega, double phi) {
  const double e = actnet_basis_mean(omega, phi);
  return 0.5 - 0.5 * std::exp(-2.0 * omega * omega) * std::cos(2.0 * phi) - e * e;
}

ActNetLayer::ActNetLayer(nn::Registry& reg, const std::string& name, Index in, Index out, Index basis,
                         bool linear_branch, bool zero_beta, std::mt19937_64& rng)
    : basis_(basis) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  lambda_ = reg.add(name + ".lambda", nn::uniform_matrix(in, out, bound, rng));
  beta_ = reg.add(name + ".beta", zero_beta ? Matrix::Zero(basis, out)
                                             : nn::normal_matrix(basis, out, 1.0 / std::sqrt(static_cast<double>(basis)), rng));
  omega_ = reg.add(name + ".omega", nn::normal_matrix(1, basis, 1.0, rng));
  std::uniform_real_distribution<double> phase(0.0, kTwoPi);
  Matrix phi(1, basis);
  for (Index k = 0; k < basis; ++k) phi(0, k) = phase(rng);
  phi_ = reg.add(name + ".phi", std::move(phi));
  w0_ = reg.add(name + ".w0", Matrix::Ones(1, 1));
  if (linear_branch) w_lin_ = reg.add(name + ".w_lin", nn::uniform_matrix(in, out, bound, rng));
  bias_ = reg.add(name + ".bias", Matrix::Zero(1, out));
}

Tensor ActNetLayer::forward(const Tensor& h) const {
  const Index rows = h.rows();
  const Index in = lambda_.rows();
  const Index out = lambda_.cols();
  if (h.cols() != in) throw ad::ShapeError("actnet: input " + ad::shape_string(h) + " for width " + std::to_string(in));
  const Tensor omega_eff = ad::mul(omega_, w0_);  // 1 x K
  const Tensor w2 = ad::square(omega_eff);
  const Tensor mean = ad::mul(ad::exp(ad::scale(w2, -0.5)), ad::sin(phi_));
  const Tensor var = ad::sub(ad::sub(Tensor::constant(Matrix::Constant(1, 1, 0.5)),
                                     ad::scale(ad::mul(ad::exp(ad::scale(w2, -2.0)), ad::cos(ad::scale(phi_, 2.0))), 0.5)),
                             ad::square(mean));
  const Tensor denom = ad::sqrt(ad::add_scalar(ad::relu(var), kActNetVarFloor));

  // (rows*in) x K responses, then rows x (in*K) design matrix with column i*K + k.
  const Tensor arg = ad::add(ad::matmul(ad::reshape(h, rows * in, 1), omega_eff), phi_);
  const Tensor psi_hat = ad::div(ad::sub(ad::sin(arg), mean), denom);
  const Tensor design = ad::reshape(psi_hat, rows, in * basis_);

  std::vector<std::size_t> lambda_idx(static_cast<std::size_t>(in * basis_));
  std::vector<std::size_t> beta_idx(lambda_idx.size());
  for (Index i = 0; i < in; ++i) {
    for (Index k = 0; k < basis_; ++k) {
      lambda_idx[static_cast<std::size_t>(i * basis_ + k)] = static_cast<std::size_t>(i);
      beta_idx[static_cast<std::size_t>(i * basis_ + k)] = static_cast<std::size_t>(k);
    }
  }
  const Tensor mix = ad::mul(ad::gather_rows(lambda_, lambda_idx), ad::gather_rows(beta_, beta_idx));
  Tensor y = ad::matmul(design, mix);
  if (w_lin_.defined()) y = ad::add(y, ad::matmul(h, w_lin_));
  (void)out;
  return ad::add(y, bias_);
}

Tensor GeneratedWeights::weight(std::size_t row, std::size_t layer) const {
  Index offset = 0;
  for (std::size_t l = 0; l < layer; ++l) offset += layers[l].in * layers[l].out + 2 * layers[l].out;
  const auto& s = layers.at(layer);
  return ad::reshape(ad::slice_cols(ad::slice_rows(flat, static_cast<Index>(row), 1), offset, s.in * s.out), s.in, s.out);
}

Tensor GeneratedWeights::bias(std::size_t row, std::size_t layer) const {
  Index offset = 0;
  for (std::size_t l = 0; l < layer; ++l) offset += layers[l].in * layers[l].out + 2 * layers[l].out;
  const auto& s = layers.at(layer);
  return ad::slice_cols(ad::slice_rows(flat, static_cast<Index>(row), 1), offset + s.in * s.out, s.out);
}

Tensor GeneratedWeights::scale(std::size_t row, std::size_t layer) const {
  Index offset = 0;
  for (std::size_t l = 0; l < layer; ++l) offset += layers[l].in * layers[l].out + 2 * layers[l].out;
  const auto& s = layers.at(layer);
  return ad::add_scalar(ad::slice_cols(ad::slice_rows(flat, static_cast<Index>(row), 1), offset + s.in * s.out + s.out, s.out),
                        1.0);
}

Tensor GeneratedWeights::per_sample() const { return ad::gather_rows(flat, group); }

struct HyperNetwork::Impl {
  struct Block {
    nn::Linear first;
    nn::Linear second;
    nn::LayerNorm pre_norm;
    ActNetLayer actnet;
  };
  struct Stage {
    nn::Linear proj;
    std::vector<Block> blocks;
    nn::LayerNorm norm;
  };

  EncoderConfig cfg;
  std::vector<LayerShape> target;
  nn::Registry reg;
  Tensor fourier_b;
  Tensor fourier_sigma;
  std::vector<Stage> stages;
  Tensor head_a;
  Tensor head_c;
  ActNetLayer kan_head;
  std::size_t evaluations = 0;

  Impl(const EncoderConfig& config, std::vector<LayerShape> layers, const std::string& name, std::uint64_t seed)
      : cfg(config), target(std::move(layers)) {
    cfg.validate();
    if (target.empty()) throw std::invalid_argument("hypernetwork: empty target topology");
    std::mt19937_64 rng(seed);
    Index in = 1;
    if (cfg.kind == EncoderKind::Fourier) {
      fourier_b = reg.add(name + ".fourier.B", nn::normal_matrix(cfg.fourier_mapping, 1, 1.0, rng), nn::Role::Frozen);
      fourier_sigma = reg.add(name + ".fourier.sigma", Matrix::Constant(1, 1, cfg.fourier_sigma), nn::Role::Frozen);
      in = 1 + 2 * cfg.fourier_mapping;
    }
    const bool kan = cfg.kind == EncoderKind::Kan;
    for (std::size_t s = 0; s < cfg.stage_widths.size(); ++s) {
      const Index w = cfg.stage_widths[s];
      const std::string sname = name + ".stage" + std::to_string(s);
      Stage stage;
      stage.proj = nn::Linear(reg, sname + ".proj", in, w, cfg.spectral_norm, rng);
      for (std::size_t b = 0; b < cfg.blocks_per_stage; ++b) {
        const std::string bname = sname + ".block" + std::to_string(b);
        Block block;
        if (kan) {
          block.pre_norm = nn::LayerNorm(reg, bname + ".ln", w, false, cfg.ln_eps);
          block.actnet = ActNetLayer(reg, bname + ".actnet", w, w, cfg.kan_basis, true, false, rng);
        } else {
          block.first = nn::Linear(reg, bname + ".fc1", w, w, cfg.spectral_norm, rng);
          block.second = nn::Linear(reg, bname + ".fc2", w, w, cfg.spectral_norm, rng);
        }
        stage.blocks.push_back(std::move(block));
      }
      stage.norm = nn::LayerNorm(reg, sname + ".ln", w, true, cfg.ln_eps);
      stages.push_back(std::move(stage));
      in = w;
    }

    const Index p = generated_size(target);
    Matrix c = Matrix::Zero(1, p);
    Index offset = 0;
    for (const auto& l : target) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(l.in));
      c.block(0, offset, 1, l.in * l.out + l.out) = nn::uniform_matrix(1, l.in * l.out + l.out, bound, rng);
      offset += l.in * l.out + 2 * l.out;
    }
    if (kan) {
      kan_head = ActNetLayer(reg, name + ".head", cfg.latent(), p, cfg.kan_basis, false, true, rng);
      kan_head.bias().node().value = c;
    } else {
      head_a = reg.add(name + ".head.A", Matrix::Zero(cfg.latent(), p));
      head_c = reg.add(name + ".head.c", std::move(c));
    }
  }

  Tensor encode_tilde(const Tensor& mu_tilde, bool training) {
    Tensor h = cfg.kind == EncoderKind::Fourier ? fourier_embed(mu_tilde, fourier_b, fourier_sigma) : mu_tilde;
    for (auto& stage : stages) {
      h = ad::relu(stage.proj.forward(h, training));
      for (auto& block : stage.blocks) {
        if (cfg.kind == EncoderKind::Kan) {
          h = ad::add(h, block.actnet.forward(block.pre_norm.forward(h)));
        } else {
          h = ad::add(h, block.second.forward(ad::relu(block.first.forward(h, training)), training));
        }
      }
      h = stage.norm.forward(h);
    }
    evaluations += static_cast<std::size_t>(mu_tilde.rows());
    return h;
  }

  Tensor heads(const Tensor& z) const {
    if (cfg.kind == EncoderKind::Kan) return kan_head.forward(z);
    return ad::add(ad::matmul(ad::scale(z, cfg.effective_head_scale()), head_a), head_c);
  }

  Tensor mu_column(std::span<const double> mu) const {
    Matrix m(static_cast<Index>(mu.size()), 1);
    for (std::size_t i = 0; i < mu.size(); ++i) m(static_cast<Index>(i), 0) = cfg.mu(mu[i]);
    return Tensor::constant(std::move(m));
  }
};

HyperNetwork::HyperNetwork(const EncoderConfig& config, std::vector<LayerShape> target, const std::string& name,
                           std::uint64_t seed)
    : impl_(std::make_unique<Impl>(config, std::move(target), name, seed)) {}
HyperNetwork::~HyperNetwork() = default;
HyperNetwork::HyperNetwork(HyperNetwork&&) noexcept = default;
HyperNetwork& HyperNetwork::operator=(HyperNetwork&&) noexcept = default;

GeneratedWeights HyperNetwork::generate(std::span<const double> mu, bool training) {
  if (mu.empty()) throw std::invalid_argument("generate_weights: empty batch");
  std::map<double, std::size_t> index;
  for (double m : mu) index.emplace(m, 0);
  GeneratedWeights out;
  out.layers = impl_->target;
  for (auto& [value, row] : index) {
    row = out.unique_mu.size();
    out.unique_mu.push_back(value);
  }
  out.group.reserve(mu.size());
  for (double m : mu) out.group.push_back(index.at(m));
  out.flat = impl_->heads(impl_->encode_tilde(impl_->mu_column(out.unique_mu), training));
  return out;
}

GeneratedWeights HyperNetwork::generate_naive(std::span<const double> mu) {
  if (mu.empty()) throw std::invalid_argument("generate_weights: empty batch");
  GeneratedWeights out;
  out.layers = impl_->target;
  std::vector<Tensor> rows;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    rows.push_back(impl_->heads(impl_->encode_tilde(impl_->mu_column(mu.subspan(i, 1)), false)));
    out.unique_mu.push_back(mu[i]);
    out.group.push_back(i);
  }
  out.flat = rows.size() == 1 ? rows.front() : ad::concat_rows(rows);
  return out;
}

Tensor HyperNetwork::encode(std::span<const double> mu, bool training) {
  return impl_->encode_tilde(impl_->mu_column(mu), training);
}

nn::Registry& HyperNetwork::registry() { return impl_->reg; }
const nn::Registry& HyperNetwork::registry() const { return impl_->reg; }

ParameterCount HyperNetwork::count() const {
  return {impl_->reg.count(nn::Role::Trainable), impl_->reg.count(nn::Role::Frozen)};
}

const EncoderConfig& HyperNetwork::config() const { return impl_->cfg; }
const std::vector<LayerShape>& HyperNetwork::target_layers() const { return impl_->target; }
std::size_t HyperNetwork::encoder_evaluations() const { return impl_->evaluations; }

namespace {

void copy_entries(nn::Registry& dst, const nn::Registry& src, bool buffers_only) {
  const auto& a = dst.entries();
  const auto& b = src.entries();
  if (a.size() != b.size()) throw ad::ShapeError("hypernetwork copy: registry size mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (buffers_only && a[i].role != nn::Role::Buffer) continue;
    if (a[i].tensor.rows() != b[i].tensor.rows() || a[i].tensor.cols() != b[i].tensor.cols()) {
      throw ad::ShapeError("hypernetwork copy: shape mismatch at " + a[i].name);
    }
    Tensor t = a[i].tensor;
    t.mutable_value() = b[i].tensor.value();
  }
}

}  // namespace

void HyperNetwork::copy_from(const HyperNetwork& other) { copy_entries(impl_->reg, other.impl_->reg, false); }
void HyperNetwork::copy_buffers_from(const HyperNetwork& other) { copy_entries(impl_->reg, other.impl_->reg, true); }

namespace {

Tensor layer_preactivation(const Tensor& h, const GeneratedWeights& w, std::size_t row, std::size_t layer) {
  return ad::add(ad::mul(ad::matmul(h, w.weight(row, layer)), w.scale(row, layer)), w.bias(row, layer));
}

Tensor forward_group(Tensor h, const GeneratedWeights& w, std::size_t row, Role role) {
  const std::size_t depth = w.layers.size();
  for (std::size_t l = 0; l < depth; ++l) {
    const Tensor pre = layer_preactivation(h, w, row, l);
    if (l + 1 < depth) {
      h = ad::relu(pre);
    } else {
      h = role == Role::Actor ? ad::softsign(pre) : pre;
    }
  }
  return h;
}

template <typename Fn>
Tensor grouped(const Tensor& input, const GeneratedWeights& w, Fn&& fn) {
  const std::size_t batch = w.batch();
  if (static_cast<std::size_t>(input.rows()) != batch) {
    throw ad::ShapeError("generated_forward: input has " + std::to_string(input.rows()) + " rows for a batch of " +
                         std::to_string(batch));
  }
  if (input.cols() != w.layers.front().in) {
    throw ad::ShapeError("generated_forward: input " + ad::shape_string(input) + " for layer width " +
                         std::to_string(w.layers.front().in));
  }
  std::vector<std::size_t> order(batch);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w.group[a] < w.group[b]; });
  const bool identity = std::is_sorted(w.group.begin(), w.group.end());
  const Tensor x = identity ? input : ad::gather_rows(input, order);
  std::vector<Tensor> parts;
  std::size_t start = 0;
  while (start < batch) {
    const std::size_t row = w.group[order[start]];
    std::size_t end = start;
    while (end < batch && w.group[order[end]] == row) ++end;
    const Tensor slice = (start == 0 && end == batch) ? x : ad::slice_rows(x, static_cast<Index>(start), static_cast<Index>(end - start));
    parts.push_back(fn(slice, row));
    start = end;
  }
  Tensor y = parts.size() == 1 ? parts.front() : ad::concat_rows(parts);
  if (identity) return y;
  std::vector<std::size_t> inverse(batch);
  for (std::size_t i = 0; i < batch; ++i) inverse[order[i]] = i;
  return ad::gather_rows(y, inverse);
}

}  // namespace

Tensor generated_forward(const Tensor& input, const GeneratedWeights& weights, Role role) {
  return grouped(input, weights, [&](const Tensor& x, std::size_t row) { return forward_group(x, weights, row, role); });
}

Tensor first_layer_preactivation(const Tensor& input, const GeneratedWeights& weights) {
  return grouped(input, weights, [&](const Tensor& x, std::size_t row) { return layer_preactivation(x, weights, row, 0); });
}

NetworkCensus count_parameters(const EncoderConfig& config, const TargetTopology& topology, std::uint64_t seed) {
  NetworkCensus census;
  census.actor = HyperNetwork(config, topology.actor_layers(), "actor", seed).count();
  for (Index i = 0; i < topology.critic_heads; ++i) {
    const auto c = HyperNetwork(config, topology.critic_layers(), "critic" + std::to_string(i), seed + 1 + static_cast<std::uint64_t>(i)).count();
    census.critics.trainable += c.trainable;
    census.critics.frozen += c.frozen;
  }
  return census;
}

}  // namespace hfrl
