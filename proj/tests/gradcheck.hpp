#pragma once

#include <algorithm>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hfrl/autodiff.hpp"
#include "hfrl/hypernet.hpp"
#include "support.hpp"

namespace hfrl::test {

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

// Reduces a tensor to a scalar with fixed random weights so every output
// element contributes a distinct gradient.
inline Tensor weighted_sum(const Tensor& t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ad::sum(ad::mul(t, Tensor::constant(random_matrix(t.rows(), t.cols(), rng))));
}

inline std::vector<Matrix> one(std::mt19937_64& rng, ad::Index r, ad::Index c) { return {random_matrix(r, c, rng)}; }

inline Matrix away_from(Matrix m, double center, double margin) {
  for (ad::Index i = 0; i < m.size(); ++i) {
    double& v = m.data()[i];
    if (std::abs(v - center) < margin) v = center + (v >= center ? margin : -margin);
  }
  return m;
}

struct PrimitiveCase {
  std::string name;
  std::function<Tensor(const std::vector<Tensor>&)> op;
  std::function<std::vector<Matrix>(std::mt19937_64&)> make_inputs;
};

// Every differentiable primitive with input generators that avoid kinks.
inline std::vector<PrimitiveCase> primitive_cases() {
  using In = std::vector<Tensor>;
  std::vector<PrimitiveCase> cases;
  const auto add = [&](const char* name, std::function<Tensor(const In&)> op,
                       std::function<std::vector<Matrix>(std::mt19937_64&)> make) {
    cases.push_back({name, std::move(op), std::move(make)});
  };

  add("matmul", [](const In& x) { return ad::matmul(x[0], x[1]); },
                  [](auto& r) { return std::vector<Matrix>{random_matrix(3, 4, r), random_matrix(4, 5, r)}; });
  add("transpose", [](const In& x) { return ad::transpose(x[0]); }, [](auto& r) { return one(r, 3, 4); });
  add("add same", [](const In& x) { return ad::add(x[0], x[1]); },
                  [](auto& r) { return std::vector<Matrix>{random_matrix(3, 4, r), random_matrix(3, 4, r)}; });
  add("add row broadcast", [](const In& x) { return ad::add(x[0], x[1]); },
                  [](auto& r) { return std::vector<Matrix>{random_matrix(3, 4, r), random_matrix(1, 4, r)}; });
  add("add column broadcast", [](const In& x) { return ad::add(x[1], x[0]); },
                  [](auto& r) { return std::vector<Matrix>{random_matrix(3, 4, r), random_matrix(3, 1, r)}; });
  add("add scalar broadcast", [](const In& x) { return ad::add(x[0], x[1]); },
                  [](auto& r) { return std::vector<Matrix>{random_matrix(3, 4, r), random_matrix(1, 1, r)}; });
  add("add outer broadcast", [](const In& x) { return ad::add(x[0], x[1]); },
                  [](auto& r) { return std::vector<Matrix>{random_matrix(3, 1, r), random_matrix(1, 4, r)}; });
  add("sub", [](const In& x) { return ad::sub(x[0], x[1]); },
                  [](auto& r) { return std::vector<Matrix>{random_matrix(3, 4, r), random_matrix(1, 4, r)}; });
  add("sub reversed broadcast", [](const In& x) { return ad::sub(x[1], x[0]); },
                  [](auto& r) { return std::vector<Matrix>{random_matrix(3, 4, r), random_matrix(3, 1, r)}; });
  add("mul", [](const In& x) { return ad::mul(x[0], x[1]); },
                  [](auto& r) { return std::vector<Matrix>{random_matrix(3, 4, r), random_matrix(3, 4, r)}; });
  add("mul broadcast", [](const In& x) { return ad::mul(x[0], x[1]); },
                  [](auto& r) { return std::vector<Matrix>{random_matrix(3, 4, r), random_matrix(1, 4, r)}; });
  add("div", [](const In& x) { return ad::div(x[0], x[1]); },
                  [](auto& r) { return std::vector<Matrix>{random_matrix(3, 4, r), away_from(random_matrix(3, 4, r), 0.0, 0.5)}; });
  add("div broadcast", [](const In& x) { return ad::div(x[0], x[1]); },
                  [](auto& r) { return std::vector<Matrix>{random_matrix(3, 4, r), away_from(random_matrix(3, 1, r), 0.0, 0.5)}; });
  add("scale", [](const In& x) { return ad::scale(x[0], -2.5); }, [](auto& r) { return one(r, 2, 3); });
  add("add_scalar", [](const In& x) { return ad::add_scalar(x[0], 0.7); }, [](auto& r) { return one(r, 2, 3); });
  add("neg", [](const In& x) { return ad::neg(x[0]); }, [](auto& r) { return one(r, 2, 3); });
  add("relu", [](const In& x) { return ad::relu(x[0]); },
                  [](auto& r) { return std::vector<Matrix>{away_from(random_matrix(4, 4, r), 0.0, 1e-3)}; });
  add("softsign", [](const In& x) { return ad::softsign(x[0]); },
                  [](auto& r) { return std::vector<Matrix>{away_from(random_matrix(4, 4, r), 0.0, 1e-3)}; });
  add("sin", [](const In& x) { return ad::sin(x[0]); }, [](auto& r) { return one(r, 3, 3); });
  add("cos", [](const In& x) { return ad::cos(x[0]); }, [](auto& r) { return one(r, 3, 3); });
  add("exp", [](const In& x) { return ad::exp(x[0]); }, [](auto& r) { return one(r, 3, 3); });
  add("sqrt", [](const In& x) { return ad::sqrt(x[0]); },
                  [](auto& r) { return std::vector<Matrix>{random_matrix(3, 3, r).cwiseAbs().array() + 0.5}; });
  add("square", [](const In& x) { return ad::square(x[0]); }, [](auto& r) { return one(r, 3, 3); });
  add("clip", [](const In& x) { return ad::clip(x[0], -0.5, 0.5); }, [](auto& r) {
    return std::vector<Matrix>{away_from(away_from(random_matrix(4, 4, r), 0.5, 1e-3), -0.5, 1e-3)};
  });
  add("layer_norm", [](const In& x) { return ad::layer_norm(x[0]); }, [](auto& r) { return one(r, 3, 5); });
  add("layer_norm affine", [](const In& x) { return ad::layer_norm(x[0], x[1], x[2]); }, [](auto& r) {
    return std::vector<Matrix>{random_matrix(3, 5, r), random_matrix(1, 5, r), random_matrix(1, 5, r)};
  });
  add("sum", [](const In& x) { return ad::sum(x[0]); }, [](auto& r) { return one(r, 3, 4); });
  add("mean", [](const In& x) { return ad::mean(x[0]); }, [](auto& r) { return one(r, 3, 4); });
  add("sum_rows", [](const In& x) { return ad::sum_rows(x[0]); }, [](auto& r) { return one(r, 3, 4); });
  add("mean_cols", [](const In& x) { return ad::mean_cols(x[0]); }, [](auto& r) { return one(r, 3, 4); });
  add("sort_rows", [](const In& x) { return ad::sort_rows(x[0]); }, [](auto& r) { return one(r, 3, 6); });
  add("slice_rows", [](const In& x) { return ad::slice_rows(x[0], 1, 2); }, [](auto& r) { return one(r, 4, 3); });
  add("slice_cols", [](const In& x) { return ad::slice_cols(x[0], 2, 2); }, [](auto& r) { return one(r, 3, 5); });
  add("concat_rows", [](const In& x) { return ad::concat_rows({x[0], x[1]}); },
                  [](auto& r) { return std::vector<Matrix>{random_matrix(2, 3, r), random_matrix(1, 3, r)}; });
  add("concat_cols", [](const In& x) { return ad::concat_cols({x[0], x[1], x[0]}); },
                  [](auto& r) { return std::vector<Matrix>{random_matrix(2, 3, r), random_matrix(2, 1, r)}; });
  add("gather_rows", [](const In& x) {
    const std::vector<std::size_t> idx{2, 0, 2, 1};
    return ad::gather_rows(x[0], idx);
  }, [](auto& r) { return one(r, 3, 4); });
  add("reshape", [](const In& x) { return ad::reshape(x[0], 2, 6); }, [](auto& r) { return one(r, 3, 4); });
  add("composite", [](const In& x) {
    return ad::softsign(ad::add(ad::matmul(ad::relu(ad::layer_norm(x[0])), x[1]), x[2]));
  }, [](auto& r) { return std::vector<Matrix>{random_matrix(4, 6, r), random_matrix(6, 3, r), random_matrix(1, 3, r)}; });
  return cases;
}

// Worst norm-wise relative error of a primitive over random instances.
inline double primitive_gradient_error(const PrimitiveCase& c, int instances = 50) {
  std::mt19937_64 rng(std::hash<std::string>{}(c.name));
  double worst = 0.0;
  for (int i = 0; i < instances; ++i) {
    const auto seed = rng();
    const Fn f = [&](const std::vector<Tensor>& in) { return weighted_sum(c.op(in), seed); };
    worst = std::max(worst, gradient_error(f, c.make_inputs(rng)));
  }
  return worst;
}

// Moves every trainable tensor off its initialization so that heads depend on
// mu, then re-converges the power-iteration vectors.
inline void randomize(HyperNetwork& net, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  for (auto t : net.trainable()) t.mutable_value() += random_matrix(t.rows(), t.cols(), rng, scale);
  const std::vector<double> mu{0.0};
  for (int i = 0; i < 50; ++i) net.generate(mu, true);
}

inline EncoderConfig small_encoder(EncoderKind kind) {
  EncoderConfig cfg;
  cfg.kind = kind;
  cfg.stage_widths = {4, 8};
  cfg.blocks_per_stage = 1;
  cfg.fourier_mapping = 8;
  cfg.kan_basis = 3;
  return cfg;
}

inline TargetTopology toy_topology() {
  TargetTopology t;
  t.state_dim = 3;
  t.action_dim = 2;
  t.hidden = 8;
  t.quantiles = 2;
  return t;
}

// Relative error of d(weighted actor output)/d(hypernetwork parameters)
// against central differences, spectral updates off.
inline double composed_actor_gradient_error(EncoderKind kind, std::uint64_t seed = 51) {
  HyperNetwork net(small_encoder(kind), toy_topology().actor_layers(), "actor", seed);
  randomize(net, seed + 1);
  std::mt19937_64 rng(seed + 2);
  const std::vector<double> mu{0.1, -0.05, 0.1};
  const Matrix obs = random_matrix(3, 3, rng);
  const Matrix weights = random_matrix(3, 2, rng);
  const auto objective = [&] {
    const auto g = net.generate(mu, false);
    return ad::sum(ad::mul(generated_forward(Tensor::constant(obs), g, Role::Actor), Tensor::constant(weights)));
  };
  auto params = net.trainable();
  for (auto& p : params) p.zero_grad();
  ad::backward(objective());
  double diff = 0.0, norm_a = 0.0, norm_n = 0.0;
  constexpr double eps = 1e-6;
  for (auto& p : params) {
    const Matrix analytic = p.has_grad() ? p.grad() : Matrix::Zero(p.rows(), p.cols());
    for (ad::Index k = 0; k < p.value().size(); ++k) {
      double& x = p.mutable_value().data()[k];
      const double orig = x;
      double up, down;
      {
        ad::NoGradGuard guard;
        x = orig + eps;
        up = objective().item();
        x = orig - eps;
        down = objective().item();
      }
      x = orig;
      const double fd = (up - down) / (2 * eps);
      const double a = analytic.data()[k];
      diff += (a - fd) * (a - fd);
      norm_a += a * a;
      norm_n += fd * fd;
    }
  }
  return std::sqrt(diff) / (std::sqrt(norm_a) + std::sqrt(norm_n));
}

}  // namespace hfrl::test
