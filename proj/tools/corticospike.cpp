// corticospike: synthesize data, train, benchmark and run the hybrid
// CNN-SNN attention decoder from the command line.
//
// Exit codes: 0 ok, 2 usage/config/data error, 3 training failure.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <corticospike/checkpoint.hpp>
#include <corticospike/config.hpp>
#include <corticospike/dataset.hpp>
#include <corticospike/pipeline.hpp>

namespace cs = corticospike;
namespace fs = std::filesystem;

namespace {

std::string fmt(const char *f, auto... args) {
  const int n = std::snprintf(nullptr, 0, f, args...);
  std::string s(static_cast<std::size_t>(n), '\0');
  std::snprintf(s.data(), s.size() + 1, f, args...);
  return s;
}

/// Deterministic run log, mirrored to stdout.
class MetricsLog {
public:
  explicit MetricsLog(const fs::path &path) : os_(path, std::ios::trunc) {
    if (!os_)
      throw cs::DataError("cannot open " + path.string());
  }
  void line(const std::string &s) {
    os_ << s << '\n';
    std::cout << s << '\n';
  }

private:
  std::ofstream os_;
};

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

cs::config::RunConfig load_config(const Options &o) {
  cs::config::RunConfig c = o.config.empty() ? cs::config::parse("") : cs::config::load(o.config);
  if (o.seed)
    c.train.seed = o.seed;
  return c;
}

const std::vector<std::string> &channel_set(std::size_t n) {
  return n == 8 ? cs::dataset::auditory8() : cs::dataset::montage16();
}

/// Filters every trial; with `channels` set, also restricts to that montage.
std::vector<cs::dataset::Trial> prepare(const std::vector<cs::dataset::Trial> &trials,
                                        const cs::config::RunConfig &c,
                                        std::optional<std::size_t> channels) {
  std::vector<cs::dataset::Trial> out;
  out.reserve(trials.size());
  for (const auto &t : trials) {
    auto p = cs::dataset::preprocess(t, c.data.bandpass, c.data.notch, c.data.notch_q);
    if (channels && p.channel_names != channel_set(*channels))
      p = cs::dataset::select_channels(p, channel_set(*channels));
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<cs::dataset::Trial> load_dataset(const cs::config::RunConfig &c) {
  if (c.data.manifest.empty())
    throw cs::ConfigError("data.manifest", "a dataset manifest is required");
  if (!fs::exists(c.data.manifest))
    throw cs::DataError("dataset manifest not found: " + c.data.manifest);
  auto trials = cs::dataset::load_trials(c.data.manifest, c.data.subject);
  if (trials.empty())
    throw cs::DataError("manifest selects no trials");
  return trials;
}

// ----------------------------------------------------------------- synth

int cmd_synth(const Options &o) {
  auto c = load_config(o);
  if (o.out.empty())
    throw cs::ConfigError("--out", "output directory required");
  const std::uint64_t seed = c.train.seed.value_or(0);
  const auto trials = cs::dataset::synth_cohort(cs::config::cohort(c, seed));
  fs::create_directories(o.out);
  cs::dataset::Manifest m;
  m.channels = trials.front().channel_names;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const auto name = fmt("trial_%03zu.aadt", i);
    cs::io::write_matrix(fs::path(o.out) / name, cs::dataset::build_input<float>(trials[i]));
    m.trials.push_back({name, trials[i].label, trials[i].subject_id, trials[i].session});
  }
  cs::dataset::write_manifest(fs::path(o.out) / "manifest.json", m);
  std::cout << "wrote " << trials.size() << " trials to " << o.out << '\n';
  return 0;
}

// ----------------------------------------------------------------- train

std::string epoch_line(const cs::pipeline::EpochRecord &e) {
  return fmt("%s epoch %zu loss %.6f train_acc %.4f val_acc %.4f", e.phase.c_str(), e.epoch,
             e.loss, e.train_accuracy, e.val_accuracy);
}

int train_matrix(const cs::config::RunConfig &c, std::uint64_t seed, const fs::path &out) {
  const auto [cal, onl] = cs::dataset::split_sessions(load_dataset(c));
  if (cal.empty() || onl.empty())
    throw cs::DataError("dataset needs both calibration and online trials");
  cs::pipeline::ExperimentConfig ec;
  ec.windows = c.train.windows;
  ec.channel_counts = c.train.matrix_channels;
  ec.n_seeds = c.train.n_seeds;
  ec.conv_out = c.arch.conv_out;
  ec.stride = c.arch.stride;
  ec.split_ratio = c.data.split;
  ec.lambda_l1 = c.train.lambda_l1 > 0.0 ? c.train.lambda_l1 : ec.lambda_l1;
  ec.train = cs::config::train_config(c, seed);
  ec.phase_b = cs::config::phase_b_config(c, seed);
  if (const char *env = std::getenv("CORTICOSPIKE_THREADS"))
    ec.threads = std::max(1, std::atoi(env));
  else
    ec.threads = std::max(1u, std::thread::hardware_concurrency());
  const auto pcal = prepare(cal, c, std::nullopt);
  const auto ponl = prepare(onl, c, std::nullopt);

  fs::create_directories(out);
  MetricsLog log(out / "metrics.log");
  log.line(fmt("matrix seeds %zu threads %zu", ec.n_seeds, ec.threads));
  std::vector<cs::pipeline::RunResult> runs;
  const auto cells = cs::pipeline::run_experiment_matrix(pcal, ponl, ec, &runs);
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  log.line("window_s channels model        accuracy  f1      n");
  for (const auto &cell : cells) {
    log.line(fmt("%-8.0f %-8zu %-13s %.4f    %.4f  %zu", cell.window_s, cell.channels,
                 cs::pipeline::run_kind_name(cell.kind).c_str(), cell.mean_accuracy,
                 cell.mean_f1, cell.n_seeds));
    j.push_back({{"window_s", cell.window_s},
                 {"channels", cell.channels},
                 {"model", cs::pipeline::run_kind_name(cell.kind)},
                 {"mean_accuracy", cell.mean_accuracy},
                 {"mean_f1", cell.mean_f1},
                 {"n_seeds", cell.n_seeds}});
  }
  std::ofstream(out / "results.json", std::ios::trunc) << j.dump(2) << '\n';
  return 0;
}

int cmd_train(const Options &o, bool matrix, bool lambda_sweep) {
  auto c = load_config(o);
  if (!c.train.seed)
    throw cs::ConfigError("train.seed", "a seed is required (config or --seed)");
  if (o.out.empty())
    throw cs::ConfigError("--out", "output directory required");
  const std::uint64_t seed = *c.train.seed;
  const fs::path out(o.out);
  if (matrix)
    return train_matrix(c, seed, out);

  const auto [cal_raw, onl_raw] = cs::dataset::split_sessions(load_dataset(c));
  if (cal_raw.empty() || onl_raw.empty())
    throw cs::DataError("dataset needs both calibration and online trials");
  const auto cal = prepare(cal_raw, c, c.data.channels);
  const auto onl = prepare(onl_raw, c, c.data.channels);
  const auto samples = cs::dataset::window_samples(cal, c.data.window_s);
  const auto test = cs::dataset::window_samples(onl, c.data.window_s);
  const auto [train, val] = cs::dataset::split_train_val(samples, c.data.split, seed);

  const auto arch = cs::config::arch(c);
  const auto tc = cs::config::train_config(c, seed);
  fs::create_directories(out);
  MetricsLog log(out / "metrics.log");
  log.line(fmt("model %s seed %llu channels %zu conv_out %zu window_s %.2f bits %d",
               cs::pipeline::kind_name(c.arch.model).c_str(),
               static_cast<unsigned long long>(seed), arch.eeg_channels, arch.conv_out,
               arch.window_s, c.quant.bits));
  log.line(fmt("samples train %zu val %zu test %zu", train.size(), val.size(), test.size()));
  const auto on_epoch = [&](const cs::pipeline::EpochRecord &e) { log.line(epoch_line(e)); };

  cs::checkpoint::BundleInfo info;
  info.channels = channel_set(c.data.channels);
  info.bits = c.quant.bits;
  info.bandpass = c.data.bandpass;
  info.notch = c.data.notch;
  info.notch_q = c.data.notch_q;

  cs::pipeline::Metrics m;
  if (c.arch.model == cs::pipeline::ModelKind::hybrid) {
    const auto a = cs::pipeline::train_phase_a<float>(arch, train, val, tc, on_epoch);
    const auto pb = cs::config::phase_b_config(c, seed);
    double threshold = c.adm.threshold;
    if (threshold <= 0.0) {
      const auto search = cs::pipeline::search_threshold(a, train, val, pb);
      for (const auto &p : search.report)
        log.line(fmt("adm_grid threshold %.2f score %.4f event_rate %.4f", p.threshold,
                     p.score, p.event_rate));
      threshold = search.best_threshold;
    }
    log.line(fmt("adm threshold %.2f", threshold));
    auto h = cs::pipeline::train_phase_b(a, threshold, train, val, pb, on_epoch);
    h = cs::pipeline::quantize_weights(h, c.quant.bits);
    m = cs::pipeline::evaluate(h, test);
    cs::checkpoint::save(out / "checkpoint", h, info);
  } else {
    double lambda = c.train.lambda_l1;
    if (lambda_sweep || c.train.lambda_sweep) {
      const auto sweep = cs::pipeline::select_lambda<float>(arch, train, val, tc);
      for (const auto &[l, acc] : sweep.final_train_accuracy)
        log.line(fmt("lambda_sweep lambda %.6g final_train_acc %.4f", l, acc));
      lambda = sweep.lambda;
      log.line(fmt("lambda_l1 %.6g", lambda));
    }
    auto r = cs::pipeline::train_reference<float>(arch, lambda, train, val, tc, on_epoch);
    r = cs::pipeline::quantize_weights(r, c.quant.bits);
    m = cs::pipeline::evaluate(r, test);
    cs::checkpoint::save(out / "checkpoint", r, info);
  }
  log.line(fmt("test_accuracy %.4f test_f1 %.4f", m.accuracy, m.f1));
  return 0;
}

// ----------------------------------------------------------------- bench

struct BenchOptions {
  std::string candidate_kind;
  std::size_t candidate_conv_out = 0;
  int candidate_bits = 0;
  std::string baseline_kind = "reference";
  std::size_t baseline_conv_out = 40;
  int baseline_bits = 32;
  std::string checkpoint;
};

void print_report(const std::string &label, const cs::pipeline::FootprintReport &r) {
  std::cout << fmt("%-9s %-9s params %zu bits %d bytes %zu conv_macs/window %zu\n",
                   label.c_str(), cs::pipeline::kind_name(r.kind).c_str(), r.parameters,
                   r.bits, r.bytes, r.conv_macs_per_window);
}

int cmd_bench(const Options &o, const BenchOptions &b) {
  auto c = load_config(o);
  auto cand_arch = cs::config::arch(c);
  if (b.candidate_conv_out)
    cand_arch.conv_out = b.candidate_conv_out;
  const auto cand_kind =
      b.candidate_kind.empty() ? c.arch.model : cs::pipeline::parse_kind(b.candidate_kind);
  const int cand_bits = b.candidate_bits ? b.candidate_bits : (c.quant.bits < 32 ? c.quant.bits : 32);
  auto base_arch = cs::config::arch(c);
  base_arch.conv_out = b.baseline_conv_out;

  auto cand = cs::pipeline::footprint_report(cand_arch, cand_kind, cand_bits);
  const auto base = cs::pipeline::footprint_report(
      base_arch, cs::pipeline::parse_kind(b.baseline_kind), b.baseline_bits);

  if (!b.checkpoint.empty()) {
    const auto info = cs::checkpoint::read_info(b.checkpoint);
    if (info.kind == cs::pipeline::ModelKind::hybrid) {
      const auto h = cs::checkpoint::load_hybrid(b.checkpoint);
      std::vector<cs::dataset::Trial> trials;
      if (!c.data.manifest.empty()) {
        trials = cs::dataset::split_sessions(load_dataset(c)).second;
      } else {
        auto k = cs::config::cohort(c, c.train.seed.value_or(0));
        k.trials = 4;
        k.online_trials = 2;
        trials = cs::dataset::split_sessions(cs::dataset::synth_cohort(k)).second;
      }
      const auto test = cs::dataset::window_samples(prepare(trials, c, info.arch.eeg_channels),
                                                    info.arch.window_s);
      cs::pipeline::measure_events(cand, h, test);
      const auto t0 = std::chrono::steady_clock::now();
      for (const auto &s : test)
        (void)cs::pipeline::infer(h, s.input);
      const double us = std::chrono::duration<double, std::micro>(
                            std::chrono::steady_clock::now() - t0)
                            .count() /
                        static_cast<double>(test.size());
      std::cout << fmt("latency: %.1f us per window (%zu windows)\n", us, test.size());
    }
  }

  print_report("candidate", cand);
  print_report("baseline", base);
  std::cout << fmt("parameter reduction: %.2f%%\n",
                   cs::pipeline::reduction_percent(static_cast<double>(base.parameters),
                                                   static_cast<double>(cand.parameters)));
  std::cout << fmt("memory footprint reduction: %.1f%%\n",
                   cs::pipeline::reduction_percent(static_cast<double>(base.bytes),
                                                   static_cast<double>(cand.bytes)));
  if (cand.kind == cs::pipeline::ModelKind::hybrid) {
    if (cand.event_sparsity)
      std::cout << fmt("event sparsity: %.4f (synaptic events/window %.1f)\n",
                       *cand.event_sparsity, *cand.synaptic_events_per_window);
    else
      std::cout << "event sparsity: n/a (pass --checkpoint to measure)\n";
  }
  return 0;
}

// ----------------------------------------------------------------- infer

struct InferOptions {
  std::string checkpoint;
  std::string input;
  std::string raster;
  bool preprocess = false;
  std::optional<std::size_t> window;
};

int cmd_infer(const InferOptions &o) {
  const auto info = cs::checkpoint::read_info(o.checkpoint);
  auto input = cs::io::read_matrix<float>(o.input);
  const bool reselect = input.rows() != info.arch.input_channels();
  if (o.preprocess || o.window || reselect) {
    // Rows are named by montage size, then narrowed to the model's channels.
    auto trial = cs::dataset::trial_from_input(input.cast<double>(), {});
    if (trial.channel_names != info.channels)
      trial = cs::dataset::select_channels(trial, info.channels);
    if (o.preprocess)
      trial = cs::dataset::preprocess(trial, info.bandpass, info.notch, info.notch_q);
    std::size_t begin = 0, len = trial.samples();
    if (o.window) {
      len = info.arch.window_samples();
      begin = *o.window * len;
      if (begin + len > trial.samples())
        throw cs::ParameterError(fmt("window %zu lies beyond the input", *o.window));
    }
    input = cs::dataset::build_input<float>(trial, begin, len);
  }

  if (info.kind == cs::pipeline::ModelKind::reference) {
    const auto r = cs::checkpoint::load_reference(o.checkpoint);
    std::cout << (cs::pipeline::cnn_predict(r, input) ? 'M' : 'F') << '\n';
    return 0;
  }
  const auto h = cs::checkpoint::load_hybrid(o.checkpoint);
  const auto res = cs::pipeline::infer(h, input);
  std::cout << (res.decision ? 'M' : 'F') << '\n';
  std::cout << "step class v0 v1\n";
  for (const auto &s : res.trace)
    std::cout << fmt("%zu %c %.6f %.6f\n", s.step, s.decision ? 'M' : 'F',
                     static_cast<double>(s.v0), static_cast<double>(s.v1));
  if (!o.raster.empty()) {
    cs::io::write_tensor(o.raster, cs::adm::raster_tensor(res.frames));
    std::cout << "raster written to " << o.raster << '\n';
  }
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Hybrid CNN-SNN auditory attention decoder"};
  app.require_subcommand(1);
  Options opt;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App *sub) {
    sub->add_option("--config", opt.config, "INI run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "seed (overrides train.seed)");
    sub->add_option("--out", opt.out, "output directory");
  };

  auto *synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth);

  auto *train = app.add_subcommand("train", "train a model and write a checkpoint");
  add_common(train);
  bool matrix = false, lambda_sweep = false;
  train->add_flag("--matrix", matrix, "run the window x channel x model experiment matrix");
  train->add_flag("--lambda-sweep", lambda_sweep, "choose the LASSO weight by sweep");

  auto *bench = app.add_subcommand("bench", "footprint and latency report");
  add_common(bench);
  BenchOptions bo;
  bench->add_option("--checkpoint", bo.checkpoint, "hybrid checkpoint for event statistics");
  bench->add_option("--candidate-kind", bo.candidate_kind, "hybrid or reference");
  bench->add_option("--candidate-conv-out", bo.candidate_conv_out, "candidate conv channels");
  bench->add_option("--candidate-bits", bo.candidate_bits, "candidate weight bits");
  bench->add_option("--baseline-kind", bo.baseline_kind, "hybrid or reference");
  bench->add_option("--baseline-conv-out", bo.baseline_conv_out, "baseline conv channels");
  bench->add_option("--baseline-bits", bo.baseline_bits, "baseline weight bits");

  auto *inf = app.add_subcommand("infer", "classify one sample");
  InferOptions io;
  inf->add_option("--checkpoint", io.checkpoint, "checkpoint directory")->required();
  inf->add_option("--input", io.input, "sample tensor file ((C+2) x T)")->required();
  inf->add_option("--raster", io.raster, "write the ADM event raster here");
  inf->add_flag("--preprocess", io.preprocess, "apply the checkpoint's filters first");
  std::size_t window = 0;
  auto *wopt = inf->add_option("--window", window, "classify this window of the input");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    return 2;
  }

  for (auto *sub : {synth, train, bench})
    if (sub->parsed() && sub->count("--seed"))
      opt.seed = seed;
  if (wopt->count())
    io.window = window;

  try {
    if (synth->parsed())
      return cmd_synth(opt);
    if (train->parsed())
      return cmd_train(opt, matrix, lambda_sweep);
    if (bench->parsed())
      return cmd_bench(opt, bo);
    return cmd_infer(io);
  } catch (const cs::TrainingError &e) {
    std::cerr << "training failed: " << e.what() << '\n';
    return 3;
  } catch (const cs::Error &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
