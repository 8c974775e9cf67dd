#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include <corticospike/dataset.hpp>

using namespace corticospike;
using namespace corticospike::dataset;
namespace fs = std::filesystem;

namespace {

double pearson(const std::vector<double> &a, std::span<const double> b, std::size_t lag) {
  const std::size_t n = a.size() - lag;
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i + lag];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = a[i] - ma, db = b[i + lag] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  return sab / std::sqrt(saa * sbb);
}

constexpr std::size_t kLag = 26; // 100 ms at 256 Hz

SyntheticConfig noisy(std::uint64_t seed) {
  SyntheticConfig c;
  c.n_channels = 8;
  c.noise_sigma = 0.5;
  c.unattended_gain = 0.3;
  c.seed = seed;
  c.attended = seed % 2 ? Speaker::M : Speaker::F;
  return c;
}

Speaker matched_filter(const Trial &t) {
  double cf = 0, cm = 0;
  for (std::size_t r = 0; r < t.eeg.rows(); ++r) {
    cf += pearson(t.env_f, t.eeg.row(r), kLag);
    cm += pearson(t.env_m, t.eeg.row(r), kLag);
  }
  return cf >= cm ? Speaker::F : Speaker::M;
}

Trial small_trial(std::size_t channels, std::size_t samples, Speaker label) {
  Trial t;
  t.eeg = Matrix<double>(channels, samples);
  for (std::size_t r = 0; r < channels; ++r)
    for (std::size_t c = 0; c < samples; ++c)
      t.eeg(r, c) = static_cast<double>(r * 1000 + c);
  t.env_f.assign(samples, 0.0);
  t.env_m.assign(samples, 0.0);
  for (std::size_t c = 0; c < samples; ++c) {
    t.env_f[c] = -static_cast<double>(c);
    t.env_m[c] = 0.5 * static_cast<double>(c);
  }
  t.label = label;
  t.channel_names = channel_names_for(channels);
  return t;
}

std::vector<Sample> labelled(std::size_t n_f, std::size_t n_m) {
  std::vector<Sample> v;
  for (std::size_t i = 0; i < n_f + n_m; ++i)
    v.push_back({Matrix<float>(1, 1, static_cast<float>(i)), i < n_f ? Speaker::F : Speaker::M,
                 1.0});
  return v;
}

} // namespace

TEST(SynthTrial, NoiselessChannelsCopyAttendedEnvelope) {
  for (auto who : {Speaker::F, Speaker::M}) {
    SyntheticConfig c;
    c.n_channels = 16;
    c.noise_sigma = 0;
    c.unattended_gain = 0;
    c.attended = who;
    c.seed = 7;
    const auto t = synth_trial(c);
    const auto &att = who == Speaker::F ? t.env_f : t.env_m;
    for (std::size_t r = 0; r < 16; ++r)
      EXPECT_NEAR(pearson(att, t.eeg.row(r), kLag), 1.0, 1e-6);
    EXPECT_EQ(t.label, who);
  }
}

TEST(SynthTrial, Shapes) {
  SyntheticConfig c;
  c.n_channels = 8;
  const auto t = synth_trial(c);
  EXPECT_EQ(t.eeg.rows(), 8u);
  EXPECT_EQ(t.eeg.cols(), 5120u);
  EXPECT_EQ(t.env_f.size(), 5120u);
  EXPECT_EQ(t.env_m.size(), 5120u);
  EXPECT_EQ(t.channel_names, auditory8());
}

TEST(SynthTrial, EnvelopesUnitPowerAndNonNegative) {
  const auto t = synth_trial(SyntheticConfig{});
  for (const auto *e : {&t.env_f, &t.env_m}) {
    double ms = 0;
    for (double v : *e) {
      EXPECT_GE(v, 0.0);
      ms += v * v;
    }
    EXPECT_NEAR(ms / static_cast<double>(e->size()), 1.0, 1e-9);
  }
}

TEST(SynthTrial, Deterministic) {
  auto c = noisy(123);
  const auto a = synth_trial(c), b = synth_trial(c);
  EXPECT_EQ(a.eeg, b.eeg);
  EXPECT_EQ(a.env_f, b.env_f);
  EXPECT_EQ(a.env_m, b.env_m);
  c.seed = 124;
  EXPECT_NE(synth_trial(c).eeg, a.eeg);
}

TEST(SynthTrial, AttendedCorrelationDominatesUnderNoise) {
  int wins = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto c = noisy(s);
    const auto t = synth_trial(c);
    const auto &att = c.attended == Speaker::F ? t.env_f : t.env_m;
    const auto &un = c.attended == Speaker::F ? t.env_m : t.env_f;
    wins += pearson(att, t.eeg.row(0), kLag) > pearson(un, t.eeg.row(0), kLag);
  }
  EXPECT_GE(wins, 95);
}

TEST(SynthTrial, NoiselessMatchedFilterIsPerfect) {
  for (std::uint64_t s = 0; s < 40; ++s) {
    auto c = noisy(s);
    c.noise_sigma = 0;
    c.unattended_gain = 0;
    c.spatial_weights = random_spatial_weights(8, s);
    EXPECT_EQ(matched_filter(synth_trial(c)), c.attended) << "seed " << s;
  }
}

TEST(SynthTrial, InvalidConfigRejected) {
  SyntheticConfig c;
  c.noise_sigma = -1;
  EXPECT_THROW(synth_trial(c), ParameterError);
  c = {};
  c.unattended_gain = 1.0;
  EXPECT_THROW(synth_trial(c), ParameterError);
  c = {};
  c.attend_gain = 0;
  EXPECT_THROW(synth_trial(c), ParameterError);
  c = {};
  c.neural_delay_ms = -5;
  EXPECT_THROW(synth_trial(c), ParameterError);
}

TEST(SynthCohort, AlternatingLabelsAndSessions) {
  CohortConfig cc;
  cc.trial.n_channels = 8;
  cc.trial.duration_s = 2;
  cc.trials = 10;
  cc.online_trials = 3;
  const auto trials = synth_cohort(cc);
  ASSERT_EQ(trials.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(trials[i].label, i % 2 ? Speaker::M : Speaker::F);
    EXPECT_EQ(trials[i].session, i >= 7 ? SessionKind::online : SessionKind::calibration);
    EXPECT_EQ(trials[i].subject_id, "S01");
  }
  const auto [cal, online] = split_sessions(trials);
  EXPECT_EQ(cal.size(), 7u);
  EXPECT_EQ(online.size(), 3u);
  cc.online_trials = 10;
  EXPECT_THROW(synth_cohort(cc), ParameterError);
}

TEST(SelectChannels, PaperSubsetInGivenOrder) {
  SyntheticConfig c;
  c.n_channels = 16;
  const auto t = synth_trial(c);
  const auto s = select_channels(t, auditory8());
  ASSERT_EQ(s.eeg.rows(), 8u);
  EXPECT_EQ(s.channel_names, (std::vector<std::string>{"C3", "C4", "CZ", "CPZ", "CP1", "CP2", "P1", "P2"}));
  for (std::size_t i = 0; i < 8; ++i) {
    const auto src = static_cast<std::size_t>(
        std::find(montage16().begin(), montage16().end(), auditory8()[i]) - montage16().begin());
    for (std::size_t k = 0; k < t.samples(); k += 97)
      EXPECT_EQ(s.eeg(i, k), t.eeg(src, k));
  }
}

TEST(SelectChannels, FullListIsIdentity) {
  SyntheticConfig c;
  c.n_channels = 16;
  c.duration_s = 2;
  const auto t = synth_trial(c);
  const auto s = select_channels(t, montage16());
  EXPECT_EQ(s.eeg, t.eeg);
  EXPECT_EQ(s.channel_names, t.channel_names);
}

TEST(SelectChannels, UnknownNameReported) {
  const auto t = small_trial(16, 10, Speaker::F);
  try {
    select_channels(t, {"C3", "XX"});
    FAIL();
  } catch (const LookupError &e) {
    EXPECT_EQ(e.key(), "XX");
    EXPECT_NE(std::string(e.what()).find("XX"), std::string::npos);
  }
}

TEST(BuildInput, ShapesAndRowOrder) {
  const auto t8 = small_trial(8, 256, Speaker::F);
  const auto m = build_input<double>(t8);
  EXPECT_EQ(m.rows(), 10u);
  EXPECT_EQ(m.cols(), 256u);
  for (std::size_t c = 0; c < 256; ++c) {
    EXPECT_EQ(m(0, c), t8.env_f[c]);
    EXPECT_EQ(m(9, c), t8.env_m[c]);
    for (std::size_t r = 0; r < 8; ++r)
      EXPECT_EQ(m(r + 1, c), t8.eeg(r, c));
  }
  const auto m16 = build_input<float>(small_trial(16, 768, Speaker::M));
  EXPECT_EQ(m16.rows(), 18u);
  EXPECT_EQ(m16.cols(), 768u);
}

TEST(BuildInput, LengthMismatchIsShapeError) {
  auto t = small_trial(8, 256, Speaker::F);
  t.env_m.pop_back();
  EXPECT_THROW(build_input<float>(t), ShapeError);
}

TEST(BuildInput, TrialFromInputInverts) {
  const auto t = small_trial(8, 64, Speaker::F);
  const auto back = trial_from_input(build_input<double>(t), {});
  EXPECT_EQ(back.eeg, t.eeg);
  EXPECT_EQ(back.env_f, t.env_f);
  EXPECT_EQ(back.env_m, t.env_m);
  EXPECT_EQ(back.channel_names, auditory8());
}

TEST(WindowSamples, CountsAndLabels) {
  const std::vector<Trial> one{small_trial(8, 5120, Speaker::M)};
  const auto w1 = window_samples(one, 1.0);
  ASSERT_EQ(w1.size(), 20u);
  for (const auto &s : w1) {
    EXPECT_EQ(s.input.rows(), 10u);
    EXPECT_EQ(s.input.cols(), 256u);
    EXPECT_EQ(s.label, Speaker::M);
  }
  EXPECT_EQ(w1[3].input(1, 0), static_cast<float>(3 * 256));
  EXPECT_EQ(window_samples(one, 3.0).size(), 6u);
  EXPECT_THROW(window_samples(one, 25.0), ParameterError);
}

TEST(WindowSamples, LabelPreserving) {
  const std::vector<Trial> trials{small_trial(8, 1024, Speaker::F),
                                  small_trial(8, 1024, Speaker::M),
                                  small_trial(8, 1024, Speaker::F)};
  const auto w = window_samples(trials, 2.0);
  ASSERT_EQ(w.size(), 6u);
  for (std::size_t i = 0; i < w.size(); ++i)
    EXPECT_EQ(w[i].label, trials[i / 2].label);
}

TEST(SplitTrainVal, StratifiedEightyTwenty) {
  const auto [train, val] = split_train_val(labelled(50, 50), 0.8, 3);
  EXPECT_EQ(train.size(), 80u);
  EXPECT_EQ(val.size(), 20u);
  const auto f = std::count_if(train.begin(), train.end(),
                               [](const Sample &s) { return s.label == Speaker::F; });
  EXPECT_NEAR(static_cast<double>(f), 40.0, 1.0);
}

TEST(SplitTrainVal, SmallAndDeterministic) {
  const auto a = split_train_val(labelled(5, 5), 0.8, 9);
  EXPECT_EQ(a.first.size(), 8u);
  EXPECT_EQ(a.second.size(), 2u);
  const auto b = split_train_val(labelled(5, 5), 0.8, 9);
  for (std::size_t i = 0; i < 8; ++i)
    EXPECT_EQ(a.first[i].input, b.first[i].input);
}

TEST(SplitTrainVal, PartitionCoversEverySample) {
  const auto all = labelled(37, 23);
  const auto [tr, va] = split_train_val(all, 0.7, 5);
  std::vector<float> ids;
  for (const auto *part : {&tr, &va})
    for (const auto &s : *part)
      ids.push_back(s.input(0, 0));
  std::sort(ids.begin(), ids.end());
  ASSERT_EQ(ids.size(), 60u);
  for (std::size_t i = 0; i < 60; ++i)
    EXPECT_EQ(ids[i], static_cast<float>(i));
  EXPECT_EQ(tr.size(), 42u);
}

TEST(SplitTrainVal, Errors) {
  EXPECT_THROW(split_train_val(std::vector<Sample>{}, 0.8, 0), DegenerateInputError);
  EXPECT_THROW(split_train_val(labelled(2, 2), 1.0, 0), ParameterError);
}

TEST(Preprocess, EnvelopesUntouchedAndEegFiltered) {
  SyntheticConfig c;
  c.n_channels = 8;
  c.duration_s = 4;
  auto t = synth_trial(c);
  for (std::size_t k = 0; k < t.samples(); ++k)
    t.eeg(0, k) += 5.0 * std::sin(2 * std::numbers::pi * 60 * static_cast<double>(k) / 256);
  const auto p = preprocess(t, true, true);
  EXPECT_EQ(p.env_f, t.env_f);
  EXPECT_EQ(p.env_m, t.env_m);
  EXPECT_NE(p.eeg, t.eeg);
  EXPECT_EQ(preprocess(t, false, false).eeg, t.eeg);
}

TEST(Manifest, RoundTripAndLoad) {
  const auto dir = fs::temp_directory_path() / "corticospike_tests" / "manifest";
  fs::create_directories(dir);
  Manifest m;
  m.channels = auditory8();
  std::vector<Trial> trials{small_trial(8, 64, Speaker::F), small_trial(8, 64, Speaker::M)};
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const std::string name = "t" + std::to_string(i) + ".aadt";
    io::write_matrix(dir / name, build_input<float>(trials[i]));
    m.trials.push_back({name, trials[i].label, i ? "S02" : "S01",
                        i ? SessionKind::online : SessionKind::calibration});
  }
  write_manifest(dir / "manifest.json", m);
  const auto back = read_manifest(dir / "manifest.json");
  ASSERT_EQ(back.trials.size(), 2u);
  EXPECT_EQ(back.trials[1].label, Speaker::M);
  EXPECT_EQ(back.trials[1].session, SessionKind::online);
  const auto loaded = load_trials(dir / "manifest.json");
  ASSERT_EQ(loaded.size(), 2u);
  EXPECT_EQ(loaded[0].eeg, trials[0].eeg);
  EXPECT_EQ(loaded[1].label, Speaker::M);
  EXPECT_EQ(load_trials(dir / "manifest.json", "S02").size(), 1u);
}
