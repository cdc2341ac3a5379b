#include "hfrl/spectral.hpp"

#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <mutex>
#include <numbers>
#include <string>

namespace hfrl {

namespace {

// FFTW's planner is not re-entrant.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

template <typename Real>
struct Fftw;

template <>
struct Fftw<double> {
  using plan = fftw_plan;
  using complex = fftw_complex;
  static double* alloc_real(std::size_t n) { return fftw_alloc_real(n); }
  static complex* alloc_complex(std::size_t n) { return fftw_alloc_complex(n); }
  static void free(void* p) { fftw_free(p); }
  static plan r2c(int n, double* in, complex* out) { return fftw_plan_dft_r2c_1d(n, in, out, FFTW_ESTIMATE); }
  static plan c2r(int n, complex* in, double* out) { return fftw_plan_dft_c2r_1d(n, in, out, FFTW_ESTIMATE); }
  static void execute(plan p) { fftw_execute(p); }
  static void destroy(plan p) { fftw_destroy_plan(p); }
};

template <>
struct Fftw<float> {
  using plan = fftwf_plan;
  using complex = fftwf_complex;
  static float* alloc_real(std::size_t n) { return fftwf_alloc_real(n); }
  static complex* alloc_complex(std::size_t n) { return fftwf_alloc_complex(n); }
  static void free(void* p) { fftwf_free(p); }
  static plan r2c(int n, float* in, complex* out) { return fftwf_plan_dft_r2c_1d(n, in, out, FFTW_ESTIMATE); }
  static plan c2r(int n, complex* in, float* out) { return fftwf_plan_dft_c2r_1d(n, in, out, FFTW_ESTIMATE); }
  static void execute(plan p) { fftwf_execute(p); }
  static void destroy(plan p) { fftwf_destroy_plan(p); }
};

// A pair of real<->half-complex plans of one length sharing scratch buffers.
template <typename Real>
struct RealPlanPair {
  using F = Fftw<Real>;
  std::size_t n = 0;
  Real* real = nullptr;
  std::complex<Real>* half = nullptr;
  typename F::plan forward = nullptr;
  typename F::plan backward = nullptr;

  explicit RealPlanPair(std::size_t length) : n(length) {
    real = F::alloc_real(n);
    auto* c = F::alloc_complex(n / 2 + 1);
    half = reinterpret_cast<std::complex<Real>*>(c);
    std::lock_guard lock(planner_mutex());
    forward = F::r2c(static_cast<int>(n), real, c);
    backward = F::c2r(static_cast<int>(n), c, real);
  }
  ~RealPlanPair() {
    {
      std::lock_guard lock(planner_mutex());
      if (forward) F::destroy(forward);
      if (backward) F::destroy(backward);
    }
    F::free(real);
    F::free(half);
  }
  RealPlanPair(const RealPlanPair&) = delete;
  RealPlanPair& operator=(const RealPlanPair&) = delete;
};

template <typename Real>
bool finite_values(std::span<const std::complex<Real>> values) {
  return std::all_of(values.begin(), values.end(),
                     [](const std::complex<Real>& c) { return std::isfinite(c.real()) && std::isfinite(c.imag()); });
}

}  // namespace

void GridSpec::validate() const {
  if (!(length > 0.0) || !std::isfinite(length)) {
    throw std::invalid_argument("GridSpec: length must be positive and finite");
  }
  if (points < 4 || !std::has_single_bit(points)) {
    throw std::invalid_argument("GridSpec: points must be a power of two >= 4, got " + std::to_string(points));
  }
}

long GridSpec::mode_index(std::size_t m) const {
  const auto n = static_cast<long>(points);
  const auto mm = static_cast<long>(m);
  return mm < n / 2 ? mm : mm - n;
}

double GridSpec::wavenumber(std::size_t m) const {
  return 2.0 * std::numbers::pi * static_cast<double>(mode_index(m)) / length;
}

double zero_mode_target(const ZeroModePolicy& policy) {
  if (const auto* pin = std::get_if<PinTo>(&policy)) return pin->value;
  return 0.0;
}

bool all_finite(std::span<const std::complex<double>> values) { return finite_values(values); }
bool all_finite(std::span<const std::complex<float>> values) { return finite_values(values); }

std::vector<double> linear_operator(const GridSpec& grid) {
  grid.validate();
  std::vector<double> out(grid.points);
  for (std::size_t m = 0; m < grid.points; ++m) {
    const double k = grid.wavenumber(m);
    out[m] = k * k - k * k * k * k;
  }
  return out;
}

Etdrk4Coefficients precompute_etdrk4(const GridSpec& grid, double dt, std::size_t contour_points,
                                     double contour_radius) {
  grid.validate();
  if (!(dt > 0.0) || !std::isfinite(dt)) throw std::invalid_argument("precompute_etdrk4: dt must be positive");
  if (contour_points == 0) throw std::invalid_argument("precompute_etdrk4: need at least one contour point");

  using C = std::complex<double>;
  const auto lin = linear_operator(grid);
  const std::size_t n = grid.points;

  std::vector<C> roots(contour_points);
  for (std::size_t j = 0; j < contour_points; ++j) {
    const double theta = 2.0 * std::numbers::pi * (static_cast<double>(j) + 0.5) / static_cast<double>(contour_points);
    roots[j] = contour_radius * std::polar(1.0, theta);
  }

  Etdrk4Coefficients c;
  c.dt = dt;
  c.grid = grid;
  c.E.resize(n);
  c.E2.resize(n);
  c.Q.resize(n);
  c.f1.resize(n);
  c.f2.resize(n);
  c.f3.resize(n);

  const double inv = 1.0 / static_cast<double>(contour_points);
  for (std::size_t m = 0; m < n; ++m) {
    const double hl = dt * lin[m];
    c.E[m] = std::exp(hl);
    c.E2[m] = std::exp(hl / 2.0);
    C q{}, a{}, b{}, d{};
    for (const C& r : roots) {
      const C z = hl + r;
      const C ez = std::exp(z);
      const C z3 = z * z * z;
      q += (std::exp(z / 2.0) - 1.0) / z;
      a += (-4.0 - z + ez * (4.0 - 3.0 * z + z * z)) / z3;
      b += (2.0 + z + ez * (z - 2.0)) / z3;
      d += (-4.0 - 3.0 * z - z * z + ez * (4.0 - z)) / z3;
    }
    c.Q[m] = dt * (q * inv).real();
    c.f1[m] = dt * (a * inv).real();
    c.f2[m] = dt * (b * inv).real();
    c.f3[m] = dt * (d * inv).real();
    for (double v : {c.E[m], c.E2[m], c.Q[m], c.f1[m], c.f2[m], c.f3[m]}) {
      if (!std::isfinite(v)) {
        throw std::runtime_error("precompute_etdrk4: non-finite coefficient at mode " + std::to_string(m));
      }
    }
  }
  return c;
}

template <typename Real>
BasicEtdrk4Coefficients<Real> downcast(const Etdrk4Coefficients& coeffs) {
  auto conv = [](const std::vector<double>& v) { return std::vector<Real>(v.begin(), v.end()); };
  BasicEtdrk4Coefficients<Real> out;
  out.E = conv(coeffs.E);
  out.E2 = conv(coeffs.E2);
  out.Q = conv(coeffs.Q);
  out.f1 = conv(coeffs.f1);
  out.f2 = conv(coeffs.f2);
  out.f3 = conv(coeffs.f3);
  out.dt = coeffs.dt;
  out.grid = coeffs.grid;
  return out;
}

template <typename Real>
struct BasicSpectralTransform<Real>::Plans {
  RealPlanPair<Real> base;
  RealPlanPair<Real> padded;
  Plans(std::size_t n, std::size_t m) : base(n), padded(m) {}
};

template <typename Real>
BasicSpectralTransform<Real>::BasicSpectralTransform(GridSpec grid) : grid_(grid) {
  grid_.validate();
  const std::size_t n = grid_.points;
  plans_ = std::make_unique<Plans>(n, 3 * n / 2);
  ik_.resize(n);
  for (std::size_t m = 0; m < n; ++m) ik_[m] = static_cast<Real>(grid_.wavenumber(m));
  ik_[n / 2] = Real(0);
}

template <typename Real>
BasicSpectralTransform<Real>::~BasicSpectralTransform() = default;
template <typename Real>
BasicSpectralTransform<Real>::BasicSpectralTransform(BasicSpectralTransform&&) noexcept = default;
template <typename Real>
BasicSpectralTransform<Real>& BasicSpectralTransform<Real>::operator=(BasicSpectralTransform&&) noexcept = default;

template <typename Real>
BasicSpectralField<Real> BasicSpectralTransform<Real>::forward(std::span<const Real> physical) {
  const std::size_t n = grid_.points;
  if (physical.size() != n) throw std::invalid_argument("SpectralTransform::forward: size mismatch");
  auto& p = plans_->base;
  std::copy(physical.begin(), physical.end(), p.real);
  Fftw<Real>::execute(p.forward);
  BasicSpectralField<Real> out{std::vector<std::complex<Real>>(n), grid_};
  for (std::size_t m = 0; m <= n / 2; ++m) out.coeffs[m] = p.half[m];
  for (std::size_t m = n / 2 + 1; m < n; ++m) out.coeffs[m] = std::conj(p.half[n - m]);
  return out;
}

template <typename Real>
std::vector<Real> BasicSpectralTransform<Real>::inverse(const BasicSpectralField<Real>& field) {
  const std::size_t n = grid_.points;
  if (field.coeffs.size() != n) throw std::invalid_argument("SpectralTransform::inverse: size mismatch");
  auto& p = plans_->base;
  for (std::size_t m = 0; m <= n / 2; ++m) p.half[m] = field.coeffs[m];
  Fftw<Real>::execute(p.backward);
  std::vector<Real> out(n);
  const Real scale = Real(1) / static_cast<Real>(n);
  for (std::size_t j = 0; j < n; ++j) out[j] = p.real[j] * scale;
  return out;
}

namespace {

// Squares a band-limited field on a grid of `pair.n` points and returns the
// half spectrum of y^2 in the N-point normalization, truncated to N/2 modes.
template <typename Real>
void square_on_grid(RealPlanPair<Real>& pair, std::span<const std::complex<Real>> y_hat, std::size_t n,
                    std::vector<std::complex<Real>>& out_half) {
  const std::size_t m_pts = pair.n;
  const Real inv_n = Real(1) / static_cast<Real>(n);
  std::fill(pair.half, pair.half + m_pts / 2 + 1, std::complex<Real>{});
  // Nyquist mode of the N grid is dropped: its sign is ambiguous.
  for (std::size_t m = 0; m < n / 2; ++m) pair.half[m] = y_hat[m] * inv_n;
  Fftw<Real>::execute(pair.backward);
  for (std::size_t j = 0; j < m_pts; ++j) pair.real[j] *= pair.real[j];
  Fftw<Real>::execute(pair.forward);
  const Real rescale = static_cast<Real>(n) / static_cast<Real>(m_pts);
  out_half.resize(n / 2);
  for (std::size_t m = 0; m < n / 2; ++m) out_half[m] = pair.half[m] * rescale;
}

template <typename Real>
std::vector<std::complex<Real>> derivative_term(const std::vector<std::complex<Real>>& sq_half,
                                                const std::vector<Real>& ik, std::size_t n) {
  std::vector<std::complex<Real>> out(n);
  for (std::size_t m = 0; m < n / 2; ++m) {
    // -1/2 * i k * (y^2)_hat
    out[m] = std::complex<Real>(0, Real(-0.5) * ik[m]) * sq_half[m];
  }
  out[n / 2] = {};
  for (std::size_t m = n / 2 + 1; m < n; ++m) out[m] = std::conj(out[n - m]);
  return out;
}

}  // namespace

template <typename Real>
std::vector<std::complex<Real>> BasicSpectralTransform<Real>::nonlinear_term(std::span<const std::complex<Real>> y_hat) {
  const std::size_t n = grid_.points;
  if (y_hat.size() != n) throw std::invalid_argument("nonlinear_term: size mismatch");
  std::vector<std::complex<Real>> sq;
  square_on_grid(plans_->padded, y_hat, n, sq);
  return derivative_term(sq, ik_, n);
}

template <typename Real>
std::vector<std::complex<Real>> BasicSpectralTransform<Real>::nonlinear_term_unpadded(
    std::span<const std::complex<Real>> y_hat) {
  const std::size_t n = grid_.points;
  if (y_hat.size() != n) throw std::invalid_argument("nonlinear_term_unpadded: size mismatch");
  std::vector<std::complex<Real>> sq;
  square_on_grid(plans_->base, y_hat, n, sq);
  return derivative_term(sq, ik_, n);
}

template <typename Real>
void apply_zero_mode(BasicSpectralField<Real>& field, const ZeroModePolicy& policy) {
  const double target = zero_mode_target(policy);
  field.coeffs[0] = std::complex<Real>(static_cast<Real>(target * static_cast<double>(field.grid.points)), Real(0));
}

template <typename Real>
BasicSpectralField<Real> etdrk4_step(const BasicSpectralField<Real>& y_hat,
                                     std::span<const std::complex<Real>> forcing_hat,
                                     const BasicEtdrk4Coefficients<Real>& coeffs,
                                     const ZeroModePolicy& zero_mode, BasicSpectralTransform<Real>& transform,
                                     StepOptions<Real> options) {
  using C = std::complex<Real>;
  const std::size_t n = y_hat.grid.points;
  if (y_hat.coeffs.size() != n || forcing_hat.size() != n || coeffs.E.size() != n || !(coeffs.grid == y_hat.grid) ||
      !(transform.grid() == y_hat.grid)) {
    throw std::invalid_argument("etdrk4_step: grid mismatch between field, forcing, coefficients or transform");
  }

  auto rhs = [&](const std::vector<C>& v) {
    std::vector<C> out = options.nonlinear ? transform.nonlinear_term(v) : std::vector<C>(n);
    for (std::size_t m = 0; m < n; ++m) out[m] += forcing_hat[m];
    return out;
  };

  const auto& v = y_hat.coeffs;
  const auto Nv = rhs(v);
  std::vector<C> a(n), b(n), c(n);
  for (std::size_t m = 0; m < n; ++m) a[m] = coeffs.E2[m] * v[m] + coeffs.Q[m] * Nv[m];
  const auto Na = rhs(a);
  for (std::size_t m = 0; m < n; ++m) b[m] = coeffs.E2[m] * v[m] + coeffs.Q[m] * Na[m];
  const auto Nb = rhs(b);
  for (std::size_t m = 0; m < n; ++m) c[m] = coeffs.E2[m] * a[m] + coeffs.Q[m] * (Real(2) * Nb[m] - Nv[m]);
  const auto Nc = rhs(c);

  BasicSpectralField<Real> out{std::vector<C>(n), y_hat.grid};
  for (std::size_t m = 0; m < n; ++m) {
    out.coeffs[m] = coeffs.E[m] * v[m] + Nv[m] * coeffs.f1[m] + Real(2) * (Na[m] + Nb[m]) * coeffs.f2[m] +
                    Nc[m] * coeffs.f3[m];
  }
  apply_zero_mode(out, zero_mode);
  if (!all_finite(std::span<const C>(out.coeffs))) throw InstabilityError("etdrk4_step: non-finite field");
  return out;
}

template class BasicSpectralTransform<double>;
template class BasicSpectralTransform<float>;
template BasicEtdrk4Coefficients<double> downcast<double>(const Etdrk4Coefficients&);
template BasicEtdrk4Coefficients<float> downcast<float>(const Etdrk4Coefficients&);
template void apply_zero_mode<double>(BasicSpectralField<double>&, const ZeroModePolicy&);
template void apply_zero_mode<float>(BasicSpectralField<float>&, const ZeroModePolicy&);
template BasicSpectralField<double> etdrk4_step<double>(const BasicSpectralField<double>&,
                                                        std::span<const std::complex<double>>,
                                                        const BasicEtdrk4Coefficients<double>&, const ZeroModePolicy&,
                                                        BasicSpectralTransform<double>&, StepOptions<double>);
template BasicSpectralField<float> etdrk4_step<float>(const BasicSpectralField<float>&,
                                                      std::span<const std::complex<float>>,
                                                      const BasicEtdrk4Coefficients<float>&, const ZeroModePolicy&,
                                                      BasicSpectralTransform<float>&, StepOptions<float>);

}  // namespace hfrl
