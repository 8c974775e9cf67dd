#include <algorithm>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include <corticospike/pipeline.hpp>

#include "oracles.hpp"
#include "synthetic.hpp"

using namespace corticospike;
using namespace corticospike::pipeline;

namespace {

ArchConfig arch8(std::size_t k = 40, double window_s = 1.0) {
  ArchConfig a;
  a.eeg_channels = 8;
  a.conv_out = k;
  a.window_s = window_s;
  return a;
}

TrainConfig quick(std::size_t epochs, std::uint64_t seed = 0) {
  TrainConfig t;
  t.epochs = epochs;
  t.seed = seed;
  return t;
}

const std::vector<std::string> kFrontEnd{"conv.weight", "conv.bias",        "bn.gamma",
                                         "bn.beta",     "bn.running_mean", "bn.running_var"};

// Small noiseless cohort with one phase-A model shared by the suite.
class SmallCohort : public ::testing::Test {
protected:
  static void SetUpTestSuite() {
    synth::CohortSpec s;
    s.trials = 12;
    s.online = 4;
    s.duration_s = 10.0;
    data_ = new synth::Splits(synth::make_splits(s));
    phase_a_ = new PhaseAModel<float>(train_phase_a<float>(arch8(), data_->train, data_->val,
                                                           quick(15)));
  }
  static void TearDownTestSuite() {
    delete phase_a_;
    delete data_;
  }
  static PhaseBConfig phase_b(std::size_t epochs) {
    PhaseBConfig p;
    p.snn.epochs = epochs;
    p.snn.seed = 7;
    p.snn.per_step_loss = true;
    return p;
  }
  static synth::Splits *data_;
  static PhaseAModel<float> *phase_a_;
};
synth::Splits *SmallCohort::data_ = nullptr;
PhaseAModel<float> *SmallCohort::phase_a_ = nullptr;

} // namespace

TEST(CountParams, ArchitectureTable) {
  EXPECT_EQ(count_params(arch8(40), ModelKind::hybrid), 32442u);
  EXPECT_EQ(count_params(arch8(40), ModelKind::reference), 27362u);
  EXPECT_EQ(count_params(arch8(30), ModelKind::hybrid), 23132u);
}

TEST(CountParams, MatchesStoredTensors) {
  for (std::size_t k : {10u, 30u, 40u}) {
    const auto a = arch8(k);
    EXPECT_EQ(stored_values(HybridModel<float>(a)), count_params(a, ModelKind::hybrid));
    EXPECT_EQ(stored_values(ReferenceCnn<float>(a, false)),
              count_params(a, ModelKind::reference));
  }
}

TEST(ArchConfig, Steps) {
  EXPECT_EQ(arch8(40, 1.0).steps(), 4u);
  EXPECT_EQ(arch8(40, 3.0).steps(), 12u);
  EXPECT_EQ(arch8(40, 5.0).steps(), 20u);
  auto bad = arch8();
  bad.window_s = 0.2;
  EXPECT_THROW(validate(bad), ParameterError);
  EXPECT_EQ(parse_kind("reference"), ModelKind::reference);
  EXPECT_THROW(parse_kind("snn"), ParameterError);
}

TEST(Footprint, ReductionArithmetic) {
  const auto cand = footprint_report(arch8(30), ModelKind::hybrid, 16);
  const auto base = footprint_report(arch8(40), ModelKind::reference, 32);
  EXPECT_EQ(cand.bytes, 46264u);
  EXPECT_EQ(base.bytes, 109448u);
  EXPECT_NEAR(reduction_percent(base.bytes, cand.bytes), 57.7, 0.1);
  EXPECT_NEAR(reduction_percent(base.parameters, cand.parameters), 15.46, 0.01);
  EXPECT_EQ(reduction_percent(base.bytes, base.bytes), 0.0);
  EXPECT_EQ(base.conv_macs_per_window, 102400u);
  EXPECT_FALSE(cand.event_sparsity.has_value());
  EXPECT_THROW(footprint_report(arch8(), ModelKind::hybrid, 12), ParameterError);
  EXPECT_THROW(reduction_percent(0.0, 1.0), ParameterError);
}

TEST(Quantize, HandExample) {
  const std::vector<double> w{-1.0, 0.5, 1.0};
  const auto q = quantize_tensor<double>(w, 16);
  EXPECT_DOUBLE_EQ(q.scale, 1.0 / 32767.0);
  EXPECT_EQ(q.values, (std::vector<std::int16_t>{-32767, 16384, 32767}));
  const auto back = dequantize<double>(q);
  for (std::size_t i = 0; i < w.size(); ++i)
    EXPECT_LE(std::abs(back[i] - w[i]), 1.6e-5);
}

TEST(Quantize, ZeroTensorUnchanged) {
  const std::vector<float> z(7, 0.0f);
  const auto q = quantize_tensor<float>(z, 16);
  EXPECT_EQ(q.scale, 1.0);
  EXPECT_EQ(dequantize<float>(q), z);
}

TEST(Quantize, ErrorWithinHalfStep) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> bits(2, 16);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> w(1 + rng() % 300);
    oracle::fill_normal(w, rng, 3.0);
    const int b = bits(rng);
    const auto q = quantize_tensor<double>(w, b);
    const auto back = dequantize<double>(q);
    double peak = 0.0;
    for (double v : w)
      peak = std::max(peak, std::abs(v));
    EXPECT_DOUBLE_EQ(q.scale, peak / (std::ldexp(1.0, b - 1) - 1.0));
    for (std::size_t i = 0; i < w.size(); ++i)
      ASSERT_LE(std::abs(back[i] - w[i]), q.scale / 2 * (1 + 1e-9)) << "bits " << b;
  }
  EXPECT_THROW(quantize_tensor<double>(std::vector<double>{1.0}, 1), ParameterError);
  EXPECT_THROW(quantize_tensor<double>(std::vector<double>{1.0}, 17), ParameterError);
}

TEST(Quantize, OnlyWeightTensorsChange) {
  HybridModel<float> h(arch8(8));
  std::mt19937_64 rng(2);
  h.conv.init(rng);
  h.snn.l1.init(rng, 0.3f);
  h.snn.l2.init(rng, 0.7f);
  h.conv.bias.assign(h.conv.bias.size(), 0.123456789f);
  const auto q = quantize_weights(h, 8);
  EXPECT_EQ(checksum(q, {"conv.bias", "bn.gamma", "snn.l1.bias", "snn.l2.bias"}),
            checksum(h, {"conv.bias", "bn.gamma", "snn.l1.bias", "snn.l2.bias"}));
  EXPECT_NE(checksum(q, {"conv.weight"}), checksum(h, {"conv.weight"}));
  EXPECT_EQ(checksum(quantize_weights(h, 32)), checksum(h));
}

TEST(Metrics, ConfusionExample) {
  std::vector<std::size_t> pred, truth;
  auto add = [&](std::size_t n, std::size_t p, std::size_t t) {
    pred.insert(pred.end(), n, p);
    truth.insert(truth.end(), n, t);
  };
  add(45, 0, 0);
  add(5, 0, 1);
  add(10, 1, 0);
  add(40, 1, 1);
  const auto o = oracle::confusion(pred, truth);
  EXPECT_NEAR(o.f1_class0, 0.8571, 5e-5);
  const auto m = evaluate_predictions(pred, truth);
  EXPECT_DOUBLE_EQ(m.accuracy, 0.85);
  EXPECT_NEAR(m.f1, 0.5 * (90.0 / 105.0 + 80.0 / 95.0), 1e-12);
}

TEST(Metrics, MatchesConfusionOracle) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng() % 1000;
    std::bernoulli_distribution skew(std::uniform_real_distribution<double>(0, 1)(rng));
    std::vector<std::size_t> pred(n), truth(n);
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = skew(rng);
      truth[i] = rng() % 2;
    }
    const auto o = oracle::confusion(pred, truth);
    const auto m = evaluate_predictions(pred, truth);
    ASSERT_NEAR(m.accuracy, o.accuracy, 1e-12);
    ASSERT_NEAR(m.f1, o.f1_macro, 1e-12);
  }
}

TEST(Metrics, Extremes) {
  const std::vector<std::size_t> truth{0, 1, 0, 1, 1, 0};
  const auto perfect = evaluate_predictions(truth, truth);
  EXPECT_EQ(perfect.accuracy, 1.0);
  EXPECT_EQ(perfect.f1, 1.0);
  const std::vector<std::size_t> all_f(6, 0);
  const auto flat = evaluate_predictions(all_f, truth);
  EXPECT_EQ(flat.accuracy, 0.5);
  EXPECT_NEAR(flat.f1, (2.0 / 3.0) / 2.0, 1e-12);
  EXPECT_THROW(evaluate_predictions({}, {}), ParameterError);
  EXPECT_THROW(evaluate_predictions(all_f, std::vector<std::size_t>{0}), ParameterError);
  EXPECT_THROW(evaluate(HybridModel<float>(arch8()), {}), ParameterError);
}

TEST(Infer, StepCountsAndTieRule) {
  for (auto [w, steps] : {std::pair{1.0, 4u}, std::pair{3.0, 12u}}) {
    const HybridModel<float> h(arch8(40, w));
    const auto r = infer(h, Matrix<float>(10, static_cast<std::size_t>(256 * w)));
    EXPECT_EQ(r.trace.size(), steps);
    EXPECT_EQ(r.frames.size(), steps);
    EXPECT_EQ(r.decision, 0u);
    EXPECT_EQ(r.synaptic_events, 0u);
  }
}

TEST(Infer, Errors) {
  HybridModel<float> h(arch8());
  EXPECT_THROW(infer(h, Matrix<float>(10, 32)), ShapeError);
  EXPECT_THROW(infer(h, Matrix<float>(9, 256)), ShapeError);
  h.mode = HybridMode::train_b;
  EXPECT_THROW(infer(h, Matrix<float>(10, 256)), ParameterError);
}

TEST(Infer, CausalOverSteps) {
  HybridModel<float> h(arch8(8, 2.0));
  std::mt19937_64 rng(5);
  h.conv.init(rng);
  h.snn.l1.init(rng, 0.9f);
  h.snn.l2.init(rng, 0.9f);
  h.adm.threshold = 0.3;
  auto x = oracle::random_matrix(10, 512, rng).cast<float>();
  const auto full = infer(h, x);
  ArchConfig shorter = h.arch;
  shorter.window_s = 1.0;
  auto hs = h;
  hs.arch = shorter;
  Matrix<float> head(10, 256);
  for (std::size_t r = 0; r < 10; ++r)
    for (std::size_t c = 0; c < 256; ++c)
      head(r, c) = x(r, c);
  const auto part = infer(hs, head);
  ASSERT_EQ(part.trace.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(part.trace[i].decision, full.trace[i].decision);
    EXPECT_EQ(part.trace[i].v0, full.trace[i].v0);
    EXPECT_EQ(part.trace[i].v1, full.trace[i].v1);
  }
}

TEST_F(SmallCohort, PhaseADeterministic) {
  const auto again = train_phase_a<float>(arch8(), data_->train, data_->val, quick(15));
  EXPECT_EQ(checksum(again), checksum(*phase_a_));
}

TEST_F(SmallCohort, PhaseBLeavesFrontEndUntouched) {
  const auto before = checksum(*phase_a_, kFrontEnd);
  const auto h = train_phase_b(*phase_a_, 0.45, data_->train, data_->val, phase_b(10));
  EXPECT_EQ(checksum(*phase_a_, kFrontEnd), before);
  EXPECT_EQ(checksum(h, kFrontEnd), before);
  EXPECT_EQ(h.mode, HybridMode::infer);
  EXPECT_EQ(h.bn.mode, nn::Mode::eval);
  EXPECT_EQ(h.adm.threshold, 0.45);
}

TEST_F(SmallCohort, PhaseBDeterministic) {
  const auto a = train_phase_b(*phase_a_, 0.45, data_->train, data_->val, phase_b(10));
  const auto b = train_phase_b(*phase_a_, 0.45, data_->train, data_->val, phase_b(10));
  EXPECT_EQ(checksum(a), checksum(b));
}

TEST_F(SmallCohort, HugeThresholdCarriesNoInformation) {
  const auto h = train_phase_b(*phase_a_, 100.0, data_->train, data_->val, phase_b(10));
  std::size_t events = 0;
  for (const auto &s : data_->test)
    for (const auto &f : infer(h, s.input).frames)
      events += f.event_count();
  EXPECT_EQ(events, 0u);
  EXPECT_EQ(evaluate(h, data_->test).accuracy, 0.5);
}

TEST_F(SmallCohort, MeasureEventsFillsOptionalFields) {
  const auto h = train_phase_b(*phase_a_, 0.45, data_->train, data_->val, phase_b(3));
  auto r = footprint_report(h.arch, ModelKind::hybrid, 32);
  measure_events(r, h, data_->test);
  ASSERT_TRUE(r.event_sparsity.has_value());
  EXPECT_GE(*r.event_sparsity, 0.0);
  EXPECT_LE(*r.event_sparsity, 1.0);
  EXPECT_GE(*r.synaptic_events_per_window, 0.0);
}

TEST_F(SmallCohort, ThresholdSearchReportsEveryCandidate) {
  auto cfg = phase_b(3);
  cfg.grid = {0.3, 0.6, 0.9};
  cfg.search_epochs = 2;
  const auto r = search_threshold(*phase_a_, data_->train, data_->val, cfg);
  ASSERT_EQ(r.report.size(), 3u);
  EXPECT_TRUE(std::count(cfg.grid.begin(), cfg.grid.end(), r.best_threshold));
  for (std::size_t i = 1; i < 3; ++i)
    EXPECT_LE(r.report[i].event_rate, r.report[i - 1].event_rate);
  cfg.proxy_objective = true;
  const auto p = search_threshold(*phase_a_, data_->train, data_->val, cfg);
  for (const auto &g : p.report)
    EXPECT_EQ(g.score, adm::proxy_score(g.event_rate));
}

TEST(Training, ShuffledLabelsStayNearChance) {
  synth::CohortSpec s;
  s.trials = 24;
  s.online = 4;
  s.duration_s = 10.0;
  auto d = synth::make_splits(s);
  std::mt19937_64 rng(99);
  for (auto *part : {&d.train, &d.val})
    for (auto &x : *part)
      x.label = rng() % 2 ? dataset::Speaker::M : dataset::Speaker::F;
  const auto a = train_phase_a<float>(arch8(), d.train, d.val, quick(15));
  // Fresh windows with fresh coin-flip labels.
  synth::CohortSpec h = s;
  h.seed = 1234;
  h.online = 20;
  auto held = synth::make_splits(h).test;
  for (auto &x : held)
    x.label = rng() % 2 ? dataset::Speaker::M : dataset::Speaker::F;
  EXPECT_NEAR(cnn_accuracy(a, held), 0.5, 0.1);
}

TEST(Training, LassoShrinksAndCollapses) {
  synth::CohortSpec s;
  s.trials = 12;
  s.online = 4;
  s.duration_s = 10.0;
  const auto d = synth::make_splits(s);
  double acc0 = 0, acc_huge = 0;
  const auto r0 = train_reference<float>(arch8(), 0.0, d.train, d.val, quick(10), {}, &acc0);
  const auto r1 = train_reference<float>(arch8(), 1e-3, d.train, d.val, quick(10));
  const auto rh = train_reference<float>(arch8(), 10.0, d.train, d.val, quick(10), {}, &acc_huge);
  EXPECT_LT(mean_abs_weight(r1), mean_abs_weight(r0));
  EXPECT_GT(acc0, 0.8);
  EXPECT_LE(acc_huge, 0.65);
  EXPECT_THROW(train_reference<float>(arch8(), -1.0, d.train, d.val, quick(1)), ParameterError);

  const auto sweep = select_lambda<float>(arch8(), d.train, d.val, quick(10), {1e-6, 10.0});
  ASSERT_EQ(sweep.final_train_accuracy.size(), 2u);
  EXPECT_EQ(sweep.lambda, 1e-6);
}

TEST(Training, RejectsMismatchedRows) {
  synth::CohortSpec s;
  s.trials = 4;
  s.online = 2;
  s.duration_s = 4.0;
  const auto d = synth::make_splits(s);
  auto wide = arch8();
  wide.eeg_channels = 16;
  EXPECT_THROW(train_phase_a<float>(wide, d.train, d.val, quick(1)), ShapeError);
  EXPECT_THROW(train_phase_a<float>(arch8(), {}, d.val, quick(1)), ParameterError);
}

TEST(ExperimentMatrix, Bookkeeping) {
  synth::CohortSpec s;
  s.trials = 6;
  s.online = 2;
  s.duration_s = 6.0;
  s.channels = 16;
  const auto [cal, onl] = dataset::split_sessions(synth::prepared_trials(s));
  ExperimentConfig cfg;
  cfg.windows = {1, 2};
  cfg.channel_counts = {8};
  cfg.kinds = {RunKind::reference, RunKind::reference_lasso};
  cfg.n_seeds = 3;
  cfg.conv_out = 6;
  cfg.train.epochs = 2;
  std::vector<RunResult> runs;
  const auto cells = run_experiment_matrix(cal, onl, cfg, &runs);
  ASSERT_EQ(runs.size(), 12u);
  ASSERT_EQ(cells.size(), 4u);
  for (std::size_t c = 0; c < 4; ++c) {
    double acc = 0, f1 = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      const auto &r = runs[3 * c + k];
      EXPECT_EQ(r.seed, k);
      EXPECT_EQ(r.window_s, cells[c].window_s);
      EXPECT_EQ(r.kind, cells[c].kind);
      acc += r.metrics.accuracy;
      f1 += r.metrics.f1;
    }
    EXPECT_NEAR(cells[c].mean_accuracy, acc / 3, 1e-12);
    EXPECT_NEAR(cells[c].mean_f1, f1 / 3, 1e-12);
    EXPECT_EQ(cells[c].n_seeds, 3u);
  }
  EXPECT_EQ(cells[0].window_s, 1.0);
  EXPECT_EQ(cells[2].window_s, 2.0);

  cfg.threads = 3;
  std::vector<RunResult> threaded;
  const auto cells_t = run_experiment_matrix(cal, onl, cfg, &threaded);
  for (std::size_t c = 0; c < 4; ++c)
    EXPECT_EQ(cells_t[c].mean_accuracy, cells[c].mean_accuracy);

  cfg.threads = 1;
  cfg.n_seeds = 1;
  cfg.windows = {1};
  std::vector<RunResult> single;
  const auto one = run_experiment_matrix(cal, onl, cfg, &single);
  ASSERT_EQ(one.size(), 2u);
  EXPECT_EQ(one[0].mean_accuracy, single[0].metrics.accuracy);
  EXPECT_EQ(one[1].mean_f1, single[1].metrics.f1);

  cfg.n_seeds = 0;
  EXPECT_THROW(run_experiment_matrix(cal, onl, cfg), ParameterError);
}
