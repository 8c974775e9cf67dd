#pragma once

// Trials, synthetic cocktail-party generation, input assembly, windowing
// and splits, plus manifest-based ingestion of TensorFile trials.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "matrix.hpp"
#include "signal.hpp"
#include "tensor_file.hpp"

namespace corticospike::dataset {

inline constexpr double kEegFs = 256.0;
/// Rate at which the synthetic speech carriers are generated before their
/// envelopes are brought down to the EEG rate.
inline constexpr double kAudioFs = 2048.0;

enum class Speaker : std::uint8_t { F = 0, M = 1 };
enum class SessionKind : std::uint8_t { calibration, online };

inline char speaker_char(Speaker s) { return s == Speaker::F ? 'F' : 'M'; }
inline Speaker parse_speaker(std::string_view s) {
  if (s == "F" || s == "f")
    return Speaker::F;
  if (s == "M" || s == "m")
    return Speaker::M;
  throw DataError("label must be F or M, got '" + std::string(s) + "'");
}
inline std::string session_name(SessionKind k) {
  return k == SessionKind::calibration ? "calibration" : "online";
}
inline SessionKind parse_session(std::string_view s) {
  if (s == "calibration")
    return SessionKind::calibration;
  if (s == "online")
    return SessionKind::online;
  throw DataError("session must be calibration or online, got '" +
                  std::string(s) + "'");
}

/// Full 16-electrode montage in recording order.
inline const std::vector<std::string> &montage16() {
  static const std::vector<std::string> names{
      "P1", "PZ", "P2",  "CP1", "CPZ", "CP2", "CZ", "C3",
      "C4", "T7", "T8", "FC3", "FC4", "F3",  "F4", "FZ"};
  return names;
}

/// Eight electrodes closest to the auditory cortex.
inline const std::vector<std::string> &auditory8() {
  static const std::vector<std::string> names{"C3",  "C4",  "CZ", "CPZ",
                                              "CP1", "CP2", "P1", "P2"};
  return names;
}

struct Trial {
  Matrix<double> eeg; ///< channels x samples, 256 Hz
  std::vector<double> env_f;
  std::vector<double> env_m;
  Speaker label = Speaker::F;
  std::vector<std::string> channel_names;
  std::string subject_id;
  SessionKind session = SessionKind::calibration;

  std::size_t samples() const noexcept { return eeg.cols(); }
};

inline void validate(const Trial &t) {
  if (t.channel_names.size() != t.eeg.rows())
    throw ShapeError("trial has " + std::to_string(t.eeg.rows()) +
                     " EEG rows but " + std::to_string(t.channel_names.size()) +
                     " channel names");
  if (t.env_f.size() != t.eeg.cols() || t.env_m.size() != t.eeg.cols())
    throw ShapeError("envelope length does not match EEG sample count");
}

struct SyntheticConfig {
  std::size_t n_channels = 16;
  double duration_s = 20.0;
  double attend_gain = 1.0;     ///< alpha
  double unattended_gain = 0.3; ///< rho
  double noise_sigma = 0.5;     ///< sigma
  double neural_delay_ms = 100.0;
  /// n_channels x 2 (column 0 weighs the female envelope, column 1 the
  /// male one). Empty means all ones.
  Matrix<double> spatial_weights;
  Speaker attended = Speaker::F;
  std::uint64_t seed = 0;
};

inline void validate(const SyntheticConfig &c) {
  if (c.n_channels == 0)
    throw ParameterError("n_channels must be positive");
  if (!(c.duration_s > 0.0))
    throw ParameterError("duration_s must be positive");
  if (!(c.attend_gain > 0.0))
    throw ParameterError("attend_gain must be > 0");
  if (!(c.unattended_gain >= 0.0 && c.unattended_gain < 1.0))
    throw ParameterError("unattended_gain must lie in [0, 1)");
  if (!(c.noise_sigma >= 0.0))
    throw ParameterError("noise_sigma must be >= 0");
  if (!(c.neural_delay_ms >= 0.0))
    throw ParameterError("neural_delay_ms must be >= 0");
  if (!c.spatial_weights.empty() &&
      (c.spatial_weights.rows() != c.n_channels || c.spatial_weights.cols() != 2))
    throw ShapeError("spatial_weights must be n_channels x 2");
}

inline std::vector<std::string> channel_names_for(std::size_t n) {
  if (n == montage16().size())
    return montage16();
  if (n == auditory8().size())
    return auditory8();
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n; ++i)
    names.push_back("E" + std::to_string(i + 1));
  return names;
}

/// splitmix64 finaliser; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Random per-subject topography: weights uniform in [0.5, 1.5], shared by
/// both speakers so that only envelope tracking distinguishes them.
inline Matrix<double> random_spatial_weights(std::size_t n_channels,
                                             std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0x5157));
  std::uniform_real_distribution<double> u(0.5, 1.5);
  Matrix<double> w(n_channels, 2);
  for (std::size_t c = 0; c < n_channels; ++c) {
    const double g = u(rng);
    w(c, 0) = g;
    w(c, 1) = g;
  }
  return w;
}

namespace detail {
/// Boxcar length (audio samples) used to smooth raw Hilbert envelopes; its
/// first spectral null sits at 16 Hz, keeping the slow speech-like
/// modulation and removing carrier-rate fluctuation before decimation.
inline constexpr std::size_t kEnvelopeSmoothing = 128;

inline signal::Waveform smooth(const signal::Waveform &x, std::size_t width) {
  signal::Waveform y{std::vector<double>(x.size()), x.fs};
  const std::size_t half = width / 2;
  std::vector<double> prefix(x.size() + 1, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i)
    prefix[i + 1] = prefix[i] + x.samples[i];
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(x.size(), i + half);
    y.samples[i] = (prefix[hi] - prefix[lo]) / static_cast<double>(hi - lo);
  }
  return y;
}

// Envelope of slowly amplitude-modulated Gaussian noise, at the EEG rate and
// unit power.
inline std::vector<double> synth_envelope(std::mt19937_64 &rng,
                                          double duration_s) {
  const auto n_eeg = static_cast<std::size_t>(std::llround(duration_s * kEegFs));
  const std::size_t ratio = static_cast<std::size_t>(kAudioFs / kEegFs);
  const std::size_t n_audio = n_eeg * ratio;

  std::uniform_real_distribution<double> freq(0.5, 8.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> amp(0.3, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  constexpr int kComponents = 6;
  double f[kComponents], p[kComponents], a[kComponents];
  for (int k = 0; k < kComponents; ++k) {
    f[k] = freq(rng);
    p[k] = phase(rng);
    a[k] = amp(rng);
  }
  std::vector<double> slow(n_audio);
  double peak = 0.0;
  for (std::size_t i = 0; i < n_audio; ++i) {
    const double t = static_cast<double>(i) / kAudioFs;
    double s = 0.0;
    for (int k = 0; k < kComponents; ++k)
      s += a[k] * std::sin(2.0 * std::numbers::pi * f[k] * t + p[k]);
    slow[i] = s;
    peak = std::max(peak, std::abs(s));
  }
  signal::Waveform carrier{std::vector<double>(n_audio), kAudioFs};
  for (std::size_t i = 0; i < n_audio; ++i)
    carrier.samples[i] = (1.0 + 0.9 * slow[i] / peak) * gauss(rng);

  auto env = signal::hilbert_envelope(carrier);
  env = detail::smooth(env, kEnvelopeSmoothing);
  env = signal::resample_linear(env, kEegFs);
  env.samples.resize(n_eeg);
  return signal::normalize_energy(env).samples;
}
} // namespace detail

/// Linear delayed-entrainment forward model:
///   eeg[c](t) = alpha*w[c,att]*env_att(t-d) + rho*w[c,un]*env_un(t-d) + sigma*n_c(t)
/// Deterministic given cfg.seed.
inline Trial synth_trial(const SyntheticConfig &cfg) {
  validate(cfg);
  std::mt19937_64 rng(mix_seed(cfg.seed));

  Trial trial;
  trial.env_f = detail::synth_envelope(rng, cfg.duration_s);
  trial.env_m = detail::synth_envelope(rng, cfg.duration_s);
  trial.label = cfg.attended;
  trial.channel_names = channel_names_for(cfg.n_channels);

  const std::size_t n = trial.env_f.size();
  const auto delay =
      static_cast<std::size_t>(std::llround(cfg.neural_delay_ms * kEegFs / 1000.0));
  const auto &att = cfg.attended == Speaker::F ? trial.env_f : trial.env_m;
  const auto &un = cfg.attended == Speaker::F ? trial.env_m : trial.env_f;
  const std::size_t att_col = cfg.attended == Speaker::F ? 0 : 1;

  std::normal_distribution<double> gauss(0.0, 1.0);
  trial.eeg = Matrix<double>(cfg.n_channels, n);
  for (std::size_t c = 0; c < cfg.n_channels; ++c) {
    const double w_att =
        cfg.spatial_weights.empty() ? 1.0 : cfg.spatial_weights(c, att_col);
    const double w_un =
        cfg.spatial_weights.empty() ? 1.0 : cfg.spatial_weights(c, 1 - att_col);
    auto row = trial.eeg.row(c);
    for (std::size_t t = 0; t < n; ++t) {
      double v = 0.0;
      if (t >= delay)
        v = cfg.attend_gain * w_att * att[t - delay] +
            cfg.unattended_gain * w_un * un[t - delay];
      if (cfg.noise_sigma > 0.0)
        v += cfg.noise_sigma * gauss(rng);
      row[t] = v;
    }
  }
  return trial;
}

/// One synthetic subject: `trials` trials with alternating attended speaker
/// (F first), the last `online_trials` of them tagged as the online session.
struct CohortConfig {
  SyntheticConfig trial;
  std::size_t trials = 60;
  std::size_t online_trials = 15;
  std::string subject = "S01";
  std::uint64_t seed = 0;
};

inline std::vector<Trial> synth_cohort(const CohortConfig &cfg) {
  if (cfg.trials == 0 || cfg.online_trials >= cfg.trials)
    throw ParameterError("cohort needs trials > online_trials");
  SyntheticConfig tc = cfg.trial;
  if (tc.spatial_weights.empty())
    tc.spatial_weights = random_spatial_weights(tc.n_channels, cfg.seed);
  validate(tc);
  std::vector<Trial> out;
  out.reserve(cfg.trials);
  for (std::size_t i = 0; i < cfg.trials; ++i) {
    tc.attended = i % 2 ? Speaker::M : Speaker::F;
    tc.seed = mix_seed(cfg.seed, 1000 + i);
    Trial t = synth_trial(tc);
    t.subject_id = cfg.subject;
    t.session = i + cfg.online_trials >= cfg.trials ? SessionKind::online
                                                    : SessionKind::calibration;
    out.push_back(std::move(t));
  }
  return out;
}

/// (calibration, online) in original order.
inline std::pair<std::vector<Trial>, std::vector<Trial>>
split_sessions(const std::vector<Trial> &trials) {
  std::pair<std::vector<Trial>, std::vector<Trial>> r;
  for (const auto &t : trials)
    (t.session == SessionKind::online ? r.second : r.first).push_back(t);
  return r;
}

/// Restrict to the named channels, in the order given.
inline Trial select_channels(const Trial &trial,
                             const std::vector<std::string> &names) {
  validate(trial);
  Trial out = trial;
  out.eeg = Matrix<double>(names.size(), trial.samples());
  out.channel_names = names;
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto it = std::find(trial.channel_names.begin(), trial.channel_names.end(),
                        names[i]);
    if (it == trial.channel_names.end())
      throw LookupError(names[i]);
    const auto src = trial.eeg.row(
        static_cast<std::size_t>(it - trial.channel_names.begin()));
    std::copy(src.begin(), src.end(), out.eeg.row(i).begin());
  }
  return out;
}

/// Stack envelopes around the EEG: row 0 = female envelope, rows 1..C =
/// EEG, row C+1 = male envelope.
template <typename Real = float>
Matrix<Real> build_input(const Trial &trial, std::size_t begin = 0,
                         std::size_t length = static_cast<std::size_t>(-1)) {
  validate(trial);
  if (length == static_cast<std::size_t>(-1))
    length = trial.samples() - begin;
  if (begin + length > trial.samples())
    throw ShapeError("window exceeds trial length");
  const std::size_t c = trial.eeg.rows();
  Matrix<Real> m(c + 2, length);
  for (std::size_t t = 0; t < length; ++t) {
    m(0, t) = static_cast<Real>(trial.env_f[begin + t]);
    m(c + 1, t) = static_cast<Real>(trial.env_m[begin + t]);
  }
  for (std::size_t r = 0; r < c; ++r) {
    const auto src = trial.eeg.row(r);
    for (std::size_t t = 0; t < length; ++t)
      m(r + 1, t) = static_cast<Real>(src[begin + t]);
  }
  return m;
}

/// Inverse of build_input for whole-trial matrices read back from disk.
inline Trial trial_from_input(const Matrix<double> &input,
                              std::vector<std::string> channel_names) {
  if (input.rows() < 3)
    throw ShapeError("trial matrix needs at least 3 rows");
  const std::size_t c = input.rows() - 2;
  if (channel_names.empty())
    channel_names = channel_names_for(c);
  Trial t;
  t.env_f.assign(input.row(0).begin(), input.row(0).end());
  t.env_m.assign(input.row(c + 1).begin(), input.row(c + 1).end());
  t.eeg = Matrix<double>(c, input.cols());
  for (std::size_t r = 0; r < c; ++r)
    std::copy(input.row(r + 1).begin(), input.row(r + 1).end(),
              t.eeg.row(r).begin());
  t.channel_names = std::move(channel_names);
  validate(t);
  return t;
}

struct Sample {
  Matrix<float> input; ///< (C+2) x T
  Speaker label = Speaker::F;
  double window_s = 0.0;
};

/// Non-overlapping consecutive windows; the remainder of each trial is
/// dropped.
inline std::vector<Sample> window_samples(const std::vector<Trial> &trials,
                                          double window_s) {
  const double exact = window_s * kEegFs;
  const auto len = static_cast<std::size_t>(std::llround(exact));
  if (!(window_s > 0.0) || std::abs(exact - static_cast<double>(len)) > 1e-9)
    throw ParameterError("window length must be a positive multiple of 1/256 s");
  std::vector<Sample> out;
  for (const auto &trial : trials) {
    if (len > trial.samples())
      throw ParameterError("window of " + std::to_string(window_s) +
                           " s exceeds trial length");
    for (std::size_t begin = 0; begin + len <= trial.samples(); begin += len)
      out.push_back({build_input<float>(trial, begin, len), trial.label, window_s});
  }
  return out;
}

/// Seeded shuffle, then a label-stratified split with floor(ratio*N)
/// training samples.
template <typename T>
std::pair<std::vector<T>, std::vector<T>>
split_train_val(const std::vector<T> &samples, double ratio, std::uint64_t seed) {
  if (samples.empty())
    throw DegenerateInputError("cannot split an empty sample list");
  if (!(ratio > 0.0 && ratio < 1.0))
    throw ParameterError("split ratio must lie in (0, 1)");

  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i)
    order[i] = i;
  std::mt19937_64 rng(mix_seed(seed, 0x5917));
  std::shuffle(order.begin(), order.end(), rng);

  const std::size_t n = samples.size();
  const auto n_train =
      static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n)));
  std::size_t n_f = 0;
  for (const auto &s : samples)
    n_f += s.label == Speaker::F;
  const std::size_t n_m = n - n_f;

  auto quota_f = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n_f)));
  quota_f = std::min({quota_f, n_f, n_train});
  std::size_t quota_m = n_train - quota_f;
  if (quota_m > n_m) {
    quota_m = n_m;
    quota_f = n_train - quota_m;
  }

  std::pair<std::vector<T>, std::vector<T>> split;
  std::size_t taken_f = 0, taken_m = 0;
  for (auto i : order) {
    const bool is_f = samples[i].label == Speaker::F;
    std::size_t &taken = is_f ? taken_f : taken_m;
    if (taken < (is_f ? quota_f : quota_m)) {
      ++taken;
      split.first.push_back(samples[i]);
    } else {
      split.second.push_back(samples[i]);
    }
  }
  return split;
}

/// Notch and/or FIR bandpass every EEG row; envelopes are left untouched.
inline Trial preprocess(const Trial &trial, bool bandpass, bool notch,
                        double notch_q = 30.0) {
  if (!bandpass && !notch)
    return trial;
  Trial out = trial;
  const auto fir = signal::design_fir_bandpass(128, 0.5, 40.0, kEegFs);
  for (std::size_t r = 0; r < out.eeg.rows(); ++r) {
    signal::Waveform w{{trial.eeg.row(r).begin(), trial.eeg.row(r).end()}, kEegFs};
    if (notch)
      w = signal::notch_60(w, notch_q);
    if (bandpass)
      w = signal::apply_fir(fir, w);
    std::copy(w.samples.begin(), w.samples.end(), out.eeg.row(r).begin());
  }
  return out;
}

// Manifest: JSON document {"fs", "channels", "trials": [{path, label,
// subject, session}, ...]}; paths are relative to the manifest directory.
// Each trial file holds the (C+2) x T build_input layout as float32.

struct ManifestRecord {
  std::string path;
  Speaker label = Speaker::F;
  std::string subject;
  SessionKind session = SessionKind::calibration;
};

struct Manifest {
  double fs = kEegFs;
  std::vector<std::string> channels;
  std::vector<ManifestRecord> trials;
};

inline nlohmann::ordered_json to_json(const Manifest &m) {
  nlohmann::ordered_json j;
  j["fs"] = m.fs;
  j["channels"] = m.channels;
  j["trials"] = nlohmann::ordered_json::array();
  for (const auto &r : m.trials)
    j["trials"].push_back({{"path", r.path},
                           {"label", std::string(1, speaker_char(r.label))},
                           {"subject", r.subject},
                           {"session", session_name(r.session)}});
  return j;
}

inline void write_manifest(const std::filesystem::path &path, const Manifest &m) {
  std::ofstream os(path, std::ios::trunc);
  if (!os)
    throw DataError("cannot open " + path.string() + " for writing");
  os << to_json(m).dump(2) << '\n';
}

inline Manifest read_manifest(const std::filesystem::path &path) {
  std::ifstream is(path);
  if (!is)
    throw DataError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
    Manifest m;
    m.fs = j.value("fs", kEegFs);
    m.channels = j.at("channels").get<std::vector<std::string>>();
    for (const auto &r : j.at("trials"))
      m.trials.push_back({r.at("path").get<std::string>(),
                          parse_speaker(r.at("label").get<std::string>()),
                          r.value("subject", std::string{}),
                          parse_session(r.value("session", std::string{"calibration"}))});
    if (m.fs != kEegFs)
      throw DataError("manifest sampling rate must be 256 Hz");
    return m;
  } catch (const nlohmann::json::exception &e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
}

/// Load every trial in a manifest, optionally keeping one subject only
/// (empty subject = pooled).
inline std::vector<Trial> load_trials(const std::filesystem::path &manifest_path,
                                      const std::string &subject = {}) {
  const Manifest m = read_manifest(manifest_path);
  const auto dir = manifest_path.parent_path();
  std::vector<Trial> trials;
  for (const auto &rec : m.trials) {
    if (!subject.empty() && rec.subject != subject)
      continue;
    auto input = io::read_matrix<double>(dir / rec.path);
    if (input.rows() != m.channels.size() + 2)
      throw ShapeError(rec.path + ": expected " +
                       std::to_string(m.channels.size() + 2) + " rows");
    Trial t = trial_from_input(input, m.channels);
    t.label = rec.label;
    t.subject_id = rec.subject;
    t.session = rec.session;
    trials.push_back(std::move(t));
  }
  return trials;
}

} // namespace corticospike::dataset
