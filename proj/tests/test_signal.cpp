#include <cmath>
#include <complex>
#include <numbers>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include <corticospike/signal.hpp>

using namespace corticospike;
using signal::Waveform;

namespace {

constexpr double kPi = std::numbers::pi;

Waveform sine(double f, double amp, double seconds, double fs, double phase = 0.0) {
  Waveform w{{}, fs};
  const auto n = static_cast<std::size_t>(seconds * fs);
  for (std::size_t i = 0; i < n; ++i)
    w.samples.push_back(amp * std::sin(2 * kPi * f * static_cast<double>(i) / fs + phase));
  return w;
}

double rms(const std::vector<double> &x, std::size_t from, std::size_t to) {
  double s = 0;
  for (std::size_t i = from; i < to; ++i)
    s += x[i] * x[i];
  return std::sqrt(s / static_cast<double>(to - from));
}

// Frequency response from the z-transform of the taps, evaluated in the test.
double response_db(const std::vector<double> &taps, double f, double fs) {
  std::complex<double> h = 0;
  for (std::size_t n = 0; n < taps.size(); ++n)
    h += taps[n] * std::exp(std::complex<double>(0, -2 * kPi * f / fs * static_cast<double>(n)));
  return 20 * std::log10(std::abs(h));
}

} // namespace

TEST(FirDesign, OrderAndSymmetry) {
  const auto f = signal::design_fir_bandpass(128, 0.5, 40, 256);
  ASSERT_EQ(f.taps.size(), 129u);
  for (std::size_t i = 0; i < f.taps.size(); ++i)
    EXPECT_EQ(f.taps[i], f.taps[f.taps.size() - 1 - i]);
}

TEST(FirDesign, PassbandCentreWithinHalfDecibel) {
  const auto f = signal::design_fir_bandpass(128, 0.5, 40, 256);
  EXPECT_NEAR(response_db(f.taps, 20.0, 256.0), 0.0, 0.5);
}

TEST(FirDesign, SixtyHertzRejected) {
  const auto f = signal::design_fir_bandpass(128, 0.5, 40, 256);
  EXPECT_LE(response_db(f.taps, 60.0, 256.0), -40.0);
}

TEST(FirDesign, MinimalOrderIsSymmetric) {
  const auto f = signal::design_fir_bandpass(2, 0.5, 40, 256);
  ASSERT_EQ(f.taps.size(), 3u);
  EXPECT_EQ(f.taps[0], f.taps[2]);
}

TEST(FirDesign, RejectsBadArguments) {
  EXPECT_THROW(signal::design_fir_bandpass(127, 0.5, 40, 256), ParameterError);
  EXPECT_THROW(signal::design_fir_bandpass(128, 40, 0.5, 256), ParameterError);
  EXPECT_THROW(signal::design_fir_bandpass(128, 0.0, 40, 256), ParameterError);
  EXPECT_THROW(signal::design_fir_bandpass(128, 0.5, 128, 256), ParameterError);
  EXPECT_THROW(signal::design_fir_bandpass(0, 0.5, 40, 256), ParameterError);
}

TEST(FirDesign, MagnitudeHelperAgreesWithOracle) {
  const auto f = signal::design_fir_bandpass(128, 0.5, 40, 256);
  for (double hz : {1.0, 10.0, 33.0, 50.0, 90.0})
    EXPECT_NEAR(20 * std::log10(signal::fir_magnitude(f.taps, hz, 256)),
                response_db(f.taps, hz, 256), 1e-9);
}

TEST(ApplyFir, IdentityKernel) {
  const signal::FirFilter id{{1.0}, 0, 256, 0.5, 40};
  Waveform x{{0.3, -1.0, 2.5, 4.0, 0.0, 7.0}, 256};
  EXPECT_EQ(signal::apply_fir(id, x).samples, x.samples);
}

TEST(ApplyFir, UnitDcGainKeepsConstantInterior) {
  const signal::FirFilter smooth{{0.25, 0.5, 0.25}, 2, 256, 0.5, 40};
  Waveform x{std::vector<double>(32, 2.0), 256};
  const auto y = signal::apply_fir(smooth, x);
  ASSERT_EQ(y.size(), x.size());
  for (std::size_t i = 1; i + 1 < y.size(); ++i)
    EXPECT_DOUBLE_EQ(y.samples[i], 2.0);
}

TEST(ApplyFir, PassbandSinePreservesRms) {
  const auto f = signal::design_fir_bandpass(128, 0.5, 40, 256);
  const auto x = sine(20, 1.0, 4.0, 256);
  const auto y = signal::apply_fir(f, x);
  const double in = rms(x.samples, 64, x.size() - 64);
  const double out = rms(y.samples, 64, y.size() - 64);
  EXPECT_NEAR(out / in, 1.0, 0.06);
}

TEST(ApplyFir, GroupDelayCompensatedAtBandCentre) {
  const auto f = signal::design_fir_bandpass(128, 0.5, 40, 256);
  const auto x = sine(20.25, 1.0, 4.0, 256, 0.3);
  const auto y = signal::apply_fir(f, x);
  int best_lag = 0;
  double best = -1e300;
  for (int lag = -6; lag <= 6; ++lag) {
    double c = 0;
    for (std::size_t i = 128; i + 128 < x.size(); ++i)
      c += x.samples[i] * y.samples[static_cast<std::size_t>(static_cast<int>(i) + lag)];
    if (c > best) {
      best = c;
      best_lag = lag;
    }
  }
  EXPECT_LE(std::abs(best_lag), 1);
}

TEST(ApplyFir, RateMismatchAndShortInputRejected) {
  const auto f = signal::design_fir_bandpass(128, 0.5, 40, 256);
  EXPECT_THROW(signal::apply_fir(f, sine(10, 1, 2, 512)), ParameterError);
  EXPECT_THROW(signal::apply_fir(f, Waveform{std::vector<double>(100, 1.0), 256}),
               ParameterError);
}

TEST(Notch, SixtyHertzAttenuated) {
  const auto x = sine(60, 1.0, 8.0, 256);
  const auto y = signal::notch_60(x, 30);
  EXPECT_LE(rms(y.samples, 1024, y.size()) / rms(x.samples, 1024, x.size()), 0.032);
}

TEST(Notch, ThirtyHertzPassed) {
  const auto x = sine(30, 1.0, 8.0, 256);
  const auto y = signal::notch_60(x, 30);
  EXPECT_GE(rms(y.samples, 1024, y.size()) / rms(x.samples, 1024, x.size()), 0.89);
}

TEST(Notch, ZeroInZeroOut) {
  const auto y = signal::notch_60(Waveform{std::vector<double>(300, 0.0), 256}, 30);
  for (double v : y.samples)
    EXPECT_EQ(v, 0.0);
}

TEST(Notch, BiquadResponseOracle) {
  const auto c = signal::notch_coefficients(60, 30, 256);
  auto mag = [&](double f) {
    const auto z = std::exp(std::complex<double>(0, -2 * kPi * f / 256));
    const auto num = c.b0 + c.b1 * z + c.b2 * z * z;
    const auto den = 1.0 + c.a1 * z + c.a2 * z * z;
    return 20 * std::log10(std::abs(num / den));
  };
  EXPECT_LE(mag(60), -30.0);
  EXPECT_GE(mag(30), -1.0);
}

TEST(Notch, LowRateRejected) {
  EXPECT_THROW(signal::notch_60(sine(10, 1, 1, 100), 30), ParameterError);
}

TEST(Hilbert, ZeroSignal) {
  const auto e = signal::hilbert_envelope(Waveform{std::vector<double>(64, 0.0), 256});
  for (double v : e.samples)
    EXPECT_EQ(v, 0.0);
}

TEST(Hilbert, PureToneAmplitude) {
  const auto e = signal::hilbert_envelope(sine(10, 0.7, 2.0, 256));
  ASSERT_EQ(e.size(), 512u);
  for (std::size_t i = 32; i < 480; ++i)
    EXPECT_NEAR(e.samples[i], 0.7, 0.7 * 0.02);
}

TEST(Hilbert, AmplitudeModulatedCarrier) {
  Waveform x{{}, 256};
  for (int i = 0; i < 512; ++i) {
    const double t = i / 256.0;
    x.samples.push_back(std::sin(2 * kPi * 5 * t) * std::sin(2 * kPi * 50 * t));
  }
  const auto e = signal::hilbert_envelope(x);
  for (std::size_t i = 32; i < 480; ++i)
    EXPECT_NEAR(e.samples[i], std::abs(std::sin(2 * kPi * 5 * static_cast<double>(i) / 256)),
                0.05);
}

TEST(Hilbert, OddLengthAndNonNegative) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  Waveform x{{}, 256};
  for (int i = 0; i < 777; ++i)
    x.samples.push_back(g(rng));
  const auto e = signal::hilbert_envelope(x);
  ASSERT_EQ(e.size(), 777u);
  for (double v : e.samples)
    EXPECT_GE(v, 0.0);
}

TEST(Hilbert, EnvelopeIndependentOfCarrier) {
  auto am = [](double carrier) {
    Waveform x{{}, 2048};
    for (int i = 0; i < 4096; ++i) {
      const double t = i / 2048.0;
      x.samples.push_back((1.5 + std::sin(2 * kPi * 3 * t)) * std::sin(2 * kPi * carrier * t));
    }
    return signal::hilbert_envelope(x);
  };
  const auto a = am(200), b = am(450);
  for (std::size_t i = 256; i < 3840; ++i)
    EXPECT_NEAR(a.samples[i], b.samples[i], 0.05 * b.samples[i]);
}

TEST(Hilbert, TooShortRejected) {
  EXPECT_THROW(signal::hilbert_envelope(Waveform{{1, 2, 3}, 256}), ParameterError);
}

TEST(NormalizeEnergy, Examples) {
  EXPECT_EQ(signal::normalize_energy(Waveform{{1, 1, 1, 1}, 256}).samples,
            (std::vector<double>{1, 1, 1, 1}));
  EXPECT_EQ(signal::normalize_energy(Waveform{{2, 0, 0, 0}, 256}).samples,
            (std::vector<double>{2, 0, 0, 0}));
  const auto y = signal::normalize_energy(Waveform{{3, 3, 3, 3}, 256});
  for (double v : y.samples)
    EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(NormalizeEnergy, Idempotent) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int trial = 0; trial < 50; ++trial) {
    Waveform x{{}, 256};
    for (int i = 0; i < 97; ++i)
      x.samples.push_back(u(rng));
    const auto once = signal::normalize_energy(x);
    EXPECT_EQ(signal::normalize_energy(once).samples, once.samples);
  }
}

TEST(NormalizeEnergy, AllZeroIsDegenerate) {
  EXPECT_THROW(signal::normalize_energy(Waveform{{0, 0, 0}, 256}), DegenerateInputError);
}

TEST(Resample, Constant) {
  const auto y = signal::resample_linear(Waveform{std::vector<double>(1024, 1.0), 1024}, 256);
  ASSERT_EQ(y.size(), 256u);
  for (double v : y.samples)
    EXPECT_EQ(v, 1.0);
}

TEST(Resample, RampIsExact) {
  Waveform x{{}, 512};
  for (int i = 0; i <= 512; ++i)
    x.samples.push_back(i / 512.0);
  const auto y = signal::resample_linear(x, 256);
  ASSERT_EQ(y.size(), 257u);
  for (std::size_t j = 0; j < y.size(); ++j)
    EXPECT_EQ(y.samples[j], static_cast<double>(j) / 256.0);
}

TEST(Resample, SineMatchesAnalytic) {
  const auto x = sine(4, 1.0, 2.0, 1024);
  const auto y = signal::resample_linear(x, 256);
  for (std::size_t j = 0; j < y.size(); ++j)
    EXPECT_NEAR(y.samples[j], std::sin(2 * kPi * 4 * static_cast<double>(j) / 256), 0.01);
}

TEST(Resample, NonPositiveRateRejected) {
  EXPECT_THROW(signal::resample_linear(Waveform{{1, 2}, 256}, 0), ParameterError);
}

TEST(Signal, PureFunctions) {
  const auto x = sine(7, 1.3, 2.0, 256);
  const auto f = signal::design_fir_bandpass(128, 0.5, 40, 256);
  EXPECT_EQ(signal::apply_fir(f, x).samples, signal::apply_fir(f, x).samples);
  EXPECT_EQ(signal::hilbert_envelope(x).samples, signal::hilbert_envelope(x).samples);
  EXPECT_EQ(signal::notch_60(x).samples, signal::notch_60(x).samples);
}
