#pragma once

// DSP primitives for EEG preprocessing and speech-envelope extraction.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <mutex>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <fftw3.h>

#include "errors.hpp"

namespace corticospike::signal {

struct Waveform {
  std::vector<double> samples;
  double fs = 0.0;

  std::size_t size() const noexcept { return samples.size(); }
};

/// Linear-phase FIR bandpass. taps.size() == order + 1 and taps are
/// mirror-symmetric about the centre tap.
struct FirFilter {
  std::vector<double> taps;
  int order = 0;
  double fs = 0.0;
  double low_hz = 0.0;
  double high_hz = 0.0;
};

inline void check_waveform(const Waveform &x) {
  if (!(x.fs > 0.0))
    throw ParameterError("waveform sampling rate must be positive");
  for (double v : x.samples)
    if (!std::isfinite(v))
      throw DataError("waveform contains a non-finite sample");
}

/// |H(f)| of an FIR filter, evaluated directly from the DTFT sum.
inline double fir_magnitude(const std::vector<double> &taps, double f_hz,
                            double fs) {
  const double w = 2.0 * std::numbers::pi * f_hz / fs;
  std::complex<double> acc{0.0, 0.0};
  for (std::size_t n = 0; n < taps.size(); ++n)
    acc += taps[n] * std::polar(1.0, -w * static_cast<double>(n));
  return std::abs(acc);
}

namespace detail {
inline double sinc(double x) {
  if (x == 0.0)
    return 1.0;
  const double px = std::numbers::pi * x;
  return std::sin(px) / px;
}
} // namespace detail

/// Hamming-windowed sinc bandpass, scaled to unit gain at the band centre.
inline FirFilter design_fir_bandpass(int order, double low_hz, double high_hz,
                                     double fs) {
  if (order < 2 || order % 2 != 0)
    throw ParameterError("FIR order must be even and >= 2, got " +
                         std::to_string(order));
  if (!(fs > 0.0) || !(low_hz > 0.0) || !(low_hz < high_hz) ||
      !(high_hz < fs / 2.0))
    throw ParameterError("FIR band edges must satisfy 0 < low < high < fs/2");

  const double fl = low_hz / fs;
  const double fh = high_hz / fs;
  const double half = order / 2.0;
  std::vector<double> taps(static_cast<std::size_t>(order) + 1);
  for (int n = 0; n <= order; ++n) {
    const double m = n - half;
    const double ideal =
        2.0 * fh * detail::sinc(2.0 * fh * m) - 2.0 * fl * detail::sinc(2.0 * fl * m);
    const double window =
        0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * n / order);
    taps[static_cast<std::size_t>(n)] = ideal * window;
  }
  const double gain = fir_magnitude(taps, 0.5 * (low_hz + high_hz), fs);
  for (double &t : taps)
    t /= gain;
  // Force exact mirror symmetry; the cosine window is symmetric only up to
  // rounding.
  for (std::size_t n = 0, m = taps.size() - 1; n < m; ++n, --m)
    taps[m] = taps[n];
  return {std::move(taps), order, fs, low_hz, high_hz};
}

/// Direct-form convolution with the group delay (order/2 samples) removed.
/// Samples outside the input are taken as zero, so the first and last
/// order/2 outputs are degraded.
inline Waveform apply_fir(const FirFilter &filter, const Waveform &x) {
  check_waveform(x);
  if (filter.fs != x.fs)
    throw ParameterError("filter designed for " + std::to_string(filter.fs) +
                         " Hz applied to " + std::to_string(x.fs) + " Hz signal");
  if (filter.taps.size() != static_cast<std::size_t>(filter.order) + 1)
    throw ParameterError("filter tap count does not match order");
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  if (n <= filter.order)
    throw ParameterError("signal shorter than filter order");

  const auto delay = static_cast<std::ptrdiff_t>(filter.order / 2);
  const auto ntaps = static_cast<std::ptrdiff_t>(filter.taps.size());
  Waveform y{std::vector<double>(x.size(), 0.0), x.fs};
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::ptrdiff_t k = 0; k < ntaps; ++k) {
      const std::ptrdiff_t j = i + delay - k;
      if (j >= 0 && j < n)
        acc += filter.taps[static_cast<std::size_t>(k)] *
               x.samples[static_cast<std::size_t>(j)];
    }
    y.samples[static_cast<std::size_t>(i)] = acc;
  }
  return y;
}

/// Biquad notch coefficients (b0, b1, b2, a1, a2), normalised so a0 == 1.
struct Biquad {
  double b0, b1, b2, a1, a2;
};

inline Biquad notch_coefficients(double f0, double q, double fs) {
  const double w0 = 2.0 * std::numbers::pi * f0 / fs;
  const double alpha = std::sin(w0) / (2.0 * q);
  const double a0 = 1.0 + alpha;
  const double c = std::cos(w0);
  return {1.0 / a0, -2.0 * c / a0, 1.0 / a0, -2.0 * c / a0, (1.0 - alpha) / a0};
}

/// Second-order recursive 60 Hz notch (single causal pass, zero state).
inline Waveform notch_60(const Waveform &x, double q = 30.0) {
  check_waveform(x);
  if (!(x.fs > 120.0))
    throw ParameterError("notch_60 requires fs > 120 Hz");
  if (!(q > 0.0))
    throw ParameterError("notch quality factor must be positive");
  const Biquad c = notch_coefficients(60.0, q, x.fs);
  Waveform y{std::vector<double>(x.size()), x.fs};
  double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x.samples[i];
    const double y0 = c.b0 * x0 + c.b1 * x1 + c.b2 * x2 - c.a1 * y1 - c.a2 * y2;
    y.samples[i] = y0;
    x2 = x1;
    x1 = x0;
    y2 = y1;
    y1 = y0;
  }
  return y;
}

namespace detail {
// FFTW's planner is not re-entrant; execution of distinct plans is.
inline std::mutex &fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

class FftPlan {
public:
  FftPlan(std::size_t n, fftw_complex *in, fftw_complex *out, int sign) {
    std::lock_guard lock(fftw_planner_mutex());
    plan_ = fftw_plan_dft_1d(static_cast<int>(n), in, out, sign, FFTW_ESTIMATE);
  }
  ~FftPlan() {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(plan_);
  }
  FftPlan(const FftPlan &) = delete;
  FftPlan &operator=(const FftPlan &) = delete;
  void execute() const { fftw_execute(plan_); }

private:
  fftw_plan plan_;
};
} // namespace detail

/// Magnitude of the analytic signal, computed with a full-length DFT
/// (arbitrary lengths; no padding).
inline Waveform hilbert_envelope(const Waveform &x) {
  check_waveform(x);
  const std::size_t n = x.size();
  if (n < 8)
    throw ParameterError("hilbert_envelope needs at least 8 samples");

  std::vector<std::complex<double>> buf(n);
  for (std::size_t i = 0; i < n; ++i)
    buf[i] = {x.samples[i], 0.0};
  auto *data = reinterpret_cast<fftw_complex *>(buf.data());
  {
    detail::FftPlan forward(n, data, data, FFTW_FORWARD);
    forward.execute();
  }
  // Keep DC (and Nyquist for even n), double positive bins, zero the rest.
  const std::size_t positive_end = (n % 2 == 0) ? n / 2 : (n + 1) / 2;
  for (std::size_t k = 1; k < positive_end; ++k)
    buf[k] *= 2.0;
  for (std::size_t k = (n % 2 == 0) ? n / 2 + 1 : positive_end; k < n; ++k)
    buf[k] = 0.0;
  {
    detail::FftPlan inverse(n, data, data, FFTW_BACKWARD);
    inverse.execute();
  }
  Waveform env{std::vector<double>(n), x.fs};
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    env.samples[i] = std::abs(buf[i]) * inv_n;
  return env;
}

/// Scale to unit mean-square. Inputs already at unit power (to within
/// 1e-12) are returned unchanged, which makes the operation idempotent.
inline Waveform normalize_energy(const Waveform &x) {
  check_waveform(x);
  double ms = 0.0;
  for (double v : x.samples)
    ms += v * v;
  if (x.samples.empty() || ms == 0.0)
    throw DegenerateInputError("cannot normalise an all-zero signal");
  ms /= static_cast<double>(x.size());
  if (std::abs(ms - 1.0) <= 1e-12)
    return x;
  const double scale = 1.0 / std::sqrt(ms);
  Waveform y = x;
  for (double &v : y.samples)
    v *= scale;
  return y;
}

/// Linear interpolation onto a uniform grid at to_fs that stays within the
/// time span of the input.
inline Waveform resample_linear(const Waveform &x, double to_fs) {
  check_waveform(x);
  if (!(to_fs > 0.0))
    throw ParameterError("target sampling rate must be positive");
  if (x.samples.empty())
    return {{}, to_fs};
  const double span = static_cast<double>(x.size() - 1) / x.fs;
  // Small slack so that exact-ratio grids keep their final point.
  const auto n_out =
      static_cast<std::size_t>(std::floor(span * to_fs + 1e-9)) + 1;
  Waveform y{std::vector<double>(n_out), to_fs};
  const double ratio = x.fs / to_fs;
  for (std::size_t j = 0; j < n_out; ++j) {
    const double pos = static_cast<double>(j) * ratio;
    auto i0 = static_cast<std::size_t>(std::floor(pos));
    if (i0 >= x.size() - 1) {
      y.samples[j] = x.samples.back();
      continue;
    }
    const double frac = pos - static_cast<double>(i0);
    y.samples[j] = frac == 0.0 ? x.samples[i0]
                               : x.samples[i0] + frac * (x.samples[i0 + 1] -
                                                         x.samples[i0]);
  }
  return y;
}

} // namespace corticospike::signal
