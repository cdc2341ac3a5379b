#include "hfrl/nn.hpp"

#include <algorithm>
#include <cmath>

namespace hfrl::nn {

Tensor Registry::add(std::string name, Matrix value, Role role) {
  Tensor t = role == Role::Trainable ? Tensor::parameter(std::move(value)) : Tensor::constant(std::move(value));
  entries_.push_back({std::move(name), t, role});
  return t;
}

std::vector<Tensor> Registry::trainable() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_) {
    if (e.role == Role::Trainable) out.push_back(e.tensor);
  }
  return out;
}

std::size_t Registry::count(Role role) const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.role == role) n += static_cast<std::size_t>(e.tensor.size());
  }
  return n;
}

Matrix uniform_matrix(ad::Index rows, ad::Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-bound, bound);
  Matrix m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

Matrix normal_matrix(ad::Index rows, ad::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, stddev);
  Matrix m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

SpectralNormState make_spectral_state(Registry& reg, const std::string& name, ad::Index rows, ad::Index cols,
                                      std::mt19937_64& rng) {
  Matrix u = normal_matrix(rows, 1, 1.0, rng);
  Matrix v = normal_matrix(cols, 1, 1.0, rng);
  u /= std::max(u.norm(), 1e-12);
  v /= std::max(v.norm(), 1e-12);
  return {reg.add(name + ".sn_u", std::move(u), Role::Buffer), reg.add(name + ".sn_v", std::move(v), Role::Buffer)};
}

namespace {
constexpr double kSigmaFloor = 1e-12;
}

double spectral_sigma(const Matrix& w, const SpectralNormState& state) {
  const double s = (state.u.value().transpose() * w * state.v.value())(0, 0);
  return std::max(s, kSigmaFloor);
}

Tensor spectral_normalize(const Tensor& w, SpectralNormState& state, bool update) {
  const Matrix& W = w.value();
  if (state.u.rows() != W.rows() || state.v.rows() != W.cols()) throw ad::ShapeError("spectral_normalize: state shape");
  if (update) {
    Matrix& u = state.u.mutable_value();
    Matrix& v = state.v.mutable_value();
    v = W.transpose() * u;
    v /= std::max(v.norm(), kSigmaFloor);
    u = W * v;
    u /= std::max(u.norm(), kSigmaFloor);
  }
  const Matrix u = state.u.value();
  const Matrix v = state.v.value();
  const double sigma = spectral_sigma(W, state);
  Matrix out = W / sigma;
  return Tensor::make(std::move(out), {w}, [u, v, sigma](ad::Node& self) {
    auto& p = *self.parents[0];
    const double inner = self.grad.cwiseProduct(p.value).sum();
    p.accumulate(self.grad / sigma - (inner / (sigma * sigma)) * (u * v.transpose()));
  });
}

Linear::Linear(Registry& reg, const std::string& name, ad::Index in, ad::Index out, bool spectral,
               std::mt19937_64& rng)
    : in_(in), out_(out), spectral_(spectral) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight_ = reg.add(name + ".weight", uniform_matrix(in, out, bound, rng));
  bias_ = reg.add(name + ".bias", uniform_matrix(1, out, bound, rng));
  if (spectral_) sn_ = make_spectral_state(reg, name, in, out, rng);
}

Tensor Linear::forward(const Tensor& x, bool training) {
  const Tensor w = spectral_ ? spectral_normalize(weight_, sn_, training) : weight_;
  return ad::add(ad::matmul(x, w), bias_);
}

LayerNorm::LayerNorm(Registry& reg, const std::string& name, ad::Index width, bool affine, double eps) : eps_(eps) {
  if (affine) {
    gamma_ = reg.add(name + ".gamma", Matrix::Ones(1, width));
    beta_ = reg.add(name + ".beta", Matrix::Zero(1, width));
  }
}

Tensor LayerNorm::forward(const Tensor& x) const { return ad::layer_norm(x, gamma_, beta_, eps_); }

}  // namespace hfrl::nn
