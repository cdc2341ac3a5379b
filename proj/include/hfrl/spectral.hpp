#pragma once

// Fourier-spectral discretization of the forced Kuramoto-Sivashinsky
// equation on a periodic domain, with ETDRK4 time stepping.
//
// FFT convention used throughout: the forward transform is unnormalized,
// the inverse transform is scaled by 1/N. A physical field y_j therefore has
// spatial mean y_hat[0] / N.

#include <complex>
#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <variant>
#include <vector>

namespace hfrl {

class InstabilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GridSpec {
  double length = 22.0;
  std::size_t points = 64;

  // Throws std::invalid_argument unless points is an even power of two and
  // length is positive and finite.
  void validate() const;

  double dx() const { return length / static_cast<double>(points); }
  double x(std::size_t j) const { return static_cast<double>(j) * dx(); }

  // Signed mode index in standard FFT ordering: 0, 1, ..., N/2-1, -N/2, ..., -1.
  long mode_index(std::size_t m) const;
  double wavenumber(std::size_t m) const;

  bool operator==(const GridSpec&) const = default;
};

template <typename Real>
struct BasicSpectralField {
  std::vector<std::complex<Real>> coeffs;
  GridSpec grid;

  Real mean() const { return coeffs.empty() ? Real(0) : coeffs[0].real() / static_cast<Real>(grid.points); }
};

using SpectralField = BasicSpectralField<double>;

struct ZeroMean {};
struct PinTo {
  double value = 0.0;
};
using ZeroModePolicy = std::variant<ZeroMean, PinTo>;

double zero_mode_target(const ZeroModePolicy& policy);

// Coefficient tables are real because the linear operator is diagonal and real.
template <typename Real>
struct BasicEtdrk4Coefficients {
  std::vector<Real> E, E2, Q, f1, f2, f3;
  double dt = 0.0;
  GridSpec grid;
};

using Etdrk4Coefficients = BasicEtdrk4Coefficients<double>;

// k^2 - k^4 per wavenumber.
std::vector<double> linear_operator(const GridSpec& grid);

// Contour-integral construction: 32 equispaced points on a circle of radius
// `contour_radius` around dt*L(k). Always evaluated in double precision.
Etdrk4Coefficients precompute_etdrk4(const GridSpec& grid, double dt, std::size_t contour_points = 32,
                                     double contour_radius = 1.0);

template <typename Real>
BasicEtdrk4Coefficients<Real> downcast(const Etdrk4Coefficients& coeffs);

// Owns FFTW plans and scratch buffers for one grid. Not safe to share between
// threads; create one per worker.
template <typename Real>
class BasicSpectralTransform {
 public:
  explicit BasicSpectralTransform(GridSpec grid);
  ~BasicSpectralTransform();
  BasicSpectralTransform(const BasicSpectralTransform&) = delete;
  BasicSpectralTransform& operator=(const BasicSpectralTransform&) = delete;
  BasicSpectralTransform(BasicSpectralTransform&&) noexcept;
  BasicSpectralTransform& operator=(BasicSpectralTransform&&) noexcept;

  const GridSpec& grid() const { return grid_; }

  BasicSpectralField<Real> forward(std::span<const Real> physical);
  std::vector<Real> inverse(const BasicSpectralField<Real>& field);

  // De-aliased (3/2 rule) transform of -1/2 d/dx (y^2).
  std::vector<std::complex<Real>> nonlinear_term(std::span<const std::complex<Real>> y_hat);
  // Same product without padding; used as a reference for band-limited inputs.
  std::vector<std::complex<Real>> nonlinear_term_unpadded(std::span<const std::complex<Real>> y_hat);

 private:
  struct Plans;
  GridSpec grid_;
  std::unique_ptr<Plans> plans_;
  std::vector<Real> ik_;  // wavenumbers with the Nyquist entry zeroed (odd derivative)
};

using SpectralTransform = BasicSpectralTransform<double>;

template <typename Real>
struct StepOptions {
  bool nonlinear = true;  // disabling isolates the linear propagator in tests
};

// One ETDRK4 step of y_t = L y + N(y) + F, with F = forcing_hat held fixed over
// the step, followed by the zero-mode policy. Throws InstabilityError on
// non-finite output.
template <typename Real>
BasicSpectralField<Real> etdrk4_step(const BasicSpectralField<Real>& y_hat,
                                     std::span<const std::complex<Real>> forcing_hat,
                                     const BasicEtdrk4Coefficients<Real>& coeffs,
                                     const ZeroModePolicy& zero_mode, BasicSpectralTransform<Real>& transform,
                                     StepOptions<Real> options = {});

// Applies the zero-mode policy in place.
template <typename Real>
void apply_zero_mode(BasicSpectralField<Real>& field, const ZeroModePolicy& policy);

bool all_finite(std::span<const std::complex<double>> values);
bool all_finite(std::span<const std::complex<float>> values);

}  // namespace hfrl
