#pragma once

// INI run configuration for the command-line tool. Sections: [data],
// [arch], [train], [adm], [quant]. Every key has a default; unknown
// sections or keys are rejected.

#include <cstdint>
#include <filesystem>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "errors.hpp"
#include "pipeline.hpp"

namespace corticospike::config {

struct DataSection {
  std::string manifest;       ///< dataset manifest for train/bench
  std::string subject;        ///< empty = pooled
  std::size_t channels = 8;   ///< 8 (auditory subset) or 16
  double window_s = 1.0;
  bool bandpass = true;
  bool notch = false;
  double notch_q = 30.0;
  double split = 0.8;
  // synthesis
  std::size_t trials = 60;
  std::size_t online_trials = 15;
  std::size_t synth_channels = 16;
  double duration_s = 20.0;
  double attend_gain = 1.0;
  double unattended_gain = 0.3;
  double noise_sigma = 0.5;
  double delay_ms = 100.0;
};

struct ArchSection {
  pipeline::ModelKind model = pipeline::ModelKind::hybrid;
  std::size_t conv_out = 40;
  std::size_t stride = 64;
};

struct TrainSection {
  std::optional<std::uint64_t> seed;
  std::size_t epochs = 50;
  std::size_t snn_epochs = 100;
  std::size_t search_epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double lambda_l1 = 0.0;
  bool lambda_sweep = false;
  bool per_step_loss = true;
  std::size_t n_seeds = 20;
  std::vector<double> windows{1, 2, 3, 4, 5};
  std::vector<std::size_t> matrix_channels{8, 16};
};

struct AdmSection {
  double threshold = 0.0; ///< > 0 skips the grid search
  double grid_min = 0.10;
  double grid_max = 1.00;
  double grid_step = 0.05;
  bool proxy_objective = false;
};

struct QuantSection {
  int bits = 32;
};

struct RunConfig {
  DataSection data;
  ArchSection arch;
  TrainSection train;
  AdmSection adm;
  QuantSection quant;
};

namespace detail {

inline double to_double(const std::string &field, const std::string &v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size())
      throw std::invalid_argument(v);
    return d;
  } catch (const std::exception &) {
    throw ConfigError(field, "expected a number, got '" + v + "'");
  }
}

inline std::uint64_t to_uint(const std::string &field, const std::string &v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError(field, "expected a non-negative integer, got '" + v + "'");
  try {
    return std::stoull(v);
  } catch (const std::exception &) {
    throw ConfigError(field, "integer out of range: '" + v + "'");
  }
}

inline bool to_bool(const std::string &field, const std::string &v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on")
    return true;
  if (v == "false" || v == "0" || v == "no" || v == "off")
    return false;
  throw ConfigError(field, "expected a boolean, got '" + v + "'");
}

template <typename T, typename Parse>
std::vector<T> to_list(const std::string &field, const std::string &v, Parse parse) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos)
      throw ConfigError(field, "empty list element");
    out.push_back(static_cast<T>(parse(field, item.substr(b, e - b + 1))));
  }
  if (out.empty())
    throw ConfigError(field, "list is empty");
  return out;
}

} // namespace detail

/// Throws ConfigError naming the first invalid field.
inline void validate(const RunConfig &c) {
  const auto &d = c.data;
  if (d.channels != 8 && d.channels != 16)
    throw ConfigError("data.channels", "must be 8 or 16");
  if (!(d.window_s > 0.0))
    throw ConfigError("data.window_s", "must be > 0");
  if (!(d.notch_q > 0.0))
    throw ConfigError("data.notch_q", "must be > 0");
  if (!(d.split > 0.0 && d.split < 1.0))
    throw ConfigError("data.split", "must lie in (0, 1)");
  if (d.trials == 0)
    throw ConfigError("data.trials", "must be positive");
  if (d.online_trials >= d.trials)
    throw ConfigError("data.online_trials", "must be smaller than data.trials");
  if (d.synth_channels != 8 && d.synth_channels != 16)
    throw ConfigError("data.synth_channels", "must be 8 or 16");
  if (!(d.duration_s > 0.0))
    throw ConfigError("data.duration_s", "must be > 0");
  if (!(d.attend_gain > 0.0))
    throw ConfigError("data.attend_gain", "must be > 0");
  if (!(d.unattended_gain >= 0.0 && d.unattended_gain < 1.0))
    throw ConfigError("data.unattended_gain", "must lie in [0, 1)");
  if (!(d.noise_sigma >= 0.0))
    throw ConfigError("data.noise_sigma", "must be >= 0");
  if (!(d.delay_ms >= 0.0))
    throw ConfigError("data.delay_ms", "must be >= 0");

  if (c.arch.conv_out == 0)
    throw ConfigError("arch.conv_out", "must be positive");
  if (c.arch.stride == 0)
    throw ConfigError("arch.stride", "must be positive");
  if (d.window_s * dataset::kEegFs < 64.0)
    throw ConfigError("data.window_s", "window shorter than the 64-sample kernel");

  const auto &t = c.train;
  if (t.epochs == 0)
    throw ConfigError("train.epochs", "must be positive");
  if (t.snn_epochs == 0)
    throw ConfigError("train.snn_epochs", "must be positive");
  if (t.search_epochs == 0)
    throw ConfigError("train.search_epochs", "must be positive");
  if (t.batch_size == 0)
    throw ConfigError("train.batch_size", "must be positive");
  if (!(t.learning_rate > 0.0))
    throw ConfigError("train.learning_rate", "must be > 0");
  if (!(t.lambda_l1 >= 0.0))
    throw ConfigError("train.lambda_l1", "must be >= 0");
  if (t.n_seeds == 0)
    throw ConfigError("train.n_seeds", "must be positive");
  for (double w : t.windows)
    if (!(w * dataset::kEegFs >= 64.0))
      throw ConfigError("train.windows", "every window must cover the kernel");
  for (auto ch : t.matrix_channels)
    if (ch != 8 && ch != 16)
      throw ConfigError("train.matrix_channels", "entries must be 8 or 16");

  const auto &a = c.adm;
  if (!(a.threshold >= 0.0))
    throw ConfigError("adm.threshold", "must be >= 0 (0 runs the grid search)");
  if (!(a.grid_min > 0.0))
    throw ConfigError("adm.grid_min", "must be > 0");
  if (!(a.grid_max >= a.grid_min))
    throw ConfigError("adm.grid_max", "must be >= adm.grid_min");
  if (!(a.grid_step > 0.0))
    throw ConfigError("adm.grid_step", "must be > 0");

  if (c.quant.bits != 8 && c.quant.bits != 16 && c.quant.bits != 32)
    throw ConfigError("quant.bits", "must be 8, 16 or 32");
}

/// Parses INI text. Missing keys keep their defaults.
inline RunConfig parse(const std::string &text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error &e) {
    throw ConfigError("(syntax)", "line " + std::to_string(e.line()) + ": " + e.message());
  }

  RunConfig c;
  using Setter = std::function<void(const std::string &, const std::string &)>;
  using detail::to_bool;
  using detail::to_double;
  using detail::to_uint;
  const std::map<std::string, std::map<std::string, Setter>> schema{
      {"data",
       {{"manifest", [&](auto &, auto &v) { c.data.manifest = v; }},
        {"subject", [&](auto &, auto &v) { c.data.subject = v; }},
        {"channels", [&](auto &f, auto &v) { c.data.channels = to_uint(f, v); }},
        {"window_s", [&](auto &f, auto &v) { c.data.window_s = to_double(f, v); }},
        {"bandpass", [&](auto &f, auto &v) { c.data.bandpass = to_bool(f, v); }},
        {"notch", [&](auto &f, auto &v) { c.data.notch = to_bool(f, v); }},
        {"notch_q", [&](auto &f, auto &v) { c.data.notch_q = to_double(f, v); }},
        {"split", [&](auto &f, auto &v) { c.data.split = to_double(f, v); }},
        {"trials", [&](auto &f, auto &v) { c.data.trials = to_uint(f, v); }},
        {"online_trials", [&](auto &f, auto &v) { c.data.online_trials = to_uint(f, v); }},
        {"synth_channels", [&](auto &f, auto &v) { c.data.synth_channels = to_uint(f, v); }},
        {"duration_s", [&](auto &f, auto &v) { c.data.duration_s = to_double(f, v); }},
        {"attend_gain", [&](auto &f, auto &v) { c.data.attend_gain = to_double(f, v); }},
        {"unattended_gain",
         [&](auto &f, auto &v) { c.data.unattended_gain = to_double(f, v); }},
        {"noise_sigma", [&](auto &f, auto &v) { c.data.noise_sigma = to_double(f, v); }},
        {"delay_ms", [&](auto &f, auto &v) { c.data.delay_ms = to_double(f, v); }}}},
      {"arch",
       {{"model",
         [&](auto &f, auto &v) {
           try {
             c.arch.model = pipeline::parse_kind(v);
           } catch (const ParameterError &) {
             throw ConfigError(f, "must be hybrid or reference");
           }
         }},
        {"conv_out", [&](auto &f, auto &v) { c.arch.conv_out = to_uint(f, v); }},
        {"stride", [&](auto &f, auto &v) { c.arch.stride = to_uint(f, v); }}}},
      {"train",
       {{"seed", [&](auto &f, auto &v) { c.train.seed = to_uint(f, v); }},
        {"epochs", [&](auto &f, auto &v) { c.train.epochs = to_uint(f, v); }},
        {"snn_epochs", [&](auto &f, auto &v) { c.train.snn_epochs = to_uint(f, v); }},
        {"search_epochs", [&](auto &f, auto &v) { c.train.search_epochs = to_uint(f, v); }},
        {"batch_size", [&](auto &f, auto &v) { c.train.batch_size = to_uint(f, v); }},
        {"learning_rate",
         [&](auto &f, auto &v) { c.train.learning_rate = to_double(f, v); }},
        {"lambda_l1", [&](auto &f, auto &v) { c.train.lambda_l1 = to_double(f, v); }},
        {"lambda_sweep", [&](auto &f, auto &v) { c.train.lambda_sweep = to_bool(f, v); }},
        {"per_step_loss", [&](auto &f, auto &v) { c.train.per_step_loss = to_bool(f, v); }},
        {"n_seeds", [&](auto &f, auto &v) { c.train.n_seeds = to_uint(f, v); }},
        {"windows",
         [&](auto &f, auto &v) { c.train.windows = detail::to_list<double>(f, v, to_double); }},
        {"matrix_channels", [&](auto &f, auto &v) {
           c.train.matrix_channels = detail::to_list<std::size_t>(f, v, to_uint);
         }}}},
      {"adm",
       {{"threshold", [&](auto &f, auto &v) { c.adm.threshold = to_double(f, v); }},
        {"grid_min", [&](auto &f, auto &v) { c.adm.grid_min = to_double(f, v); }},
        {"grid_max", [&](auto &f, auto &v) { c.adm.grid_max = to_double(f, v); }},
        {"grid_step", [&](auto &f, auto &v) { c.adm.grid_step = to_double(f, v); }},
        {"objective",
         [&](auto &f, auto &v) {
           if (v == "validation")
             c.adm.proxy_objective = false;
           else if (v == "proxy")
             c.adm.proxy_objective = true;
           else
             throw ConfigError(f, "must be validation or proxy");
         }}}},
      {"quant",
       {{"bits", [&](auto &f, auto &v) {
          c.quant.bits = static_cast<int>(to_uint(f, v));
        }}}}};

  for (const auto &[section, body] : tree) {
    const auto s = schema.find(section);
    if (s == schema.end()) {
      if (body.empty())
        throw ConfigError(section, "key outside any section");
      throw ConfigError(section, "unknown section");
    }
    for (const auto &[key, value] : body) {
      const std::string field = section + "." + key;
      const auto k = s->second.find(key);
      if (k == s->second.end())
        throw ConfigError(field, "unknown key");
      k->second(field, value.get_value<std::string>());
    }
  }
  validate(c);
  return c;
}

inline RunConfig load(const std::filesystem::path &path) {
  std::ifstream is(path);
  if (!is)
    throw DataError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

inline std::vector<double> threshold_grid(const AdmSection &a) {
  std::vector<double> g;
  const auto n = static_cast<std::size_t>(std::floor((a.grid_max - a.grid_min) / a.grid_step + 1e-9));
  for (std::size_t i = 0; i <= n; ++i)
    g.push_back(std::round((a.grid_min + static_cast<double>(i) * a.grid_step) * 1e9) / 1e9);
  return g;
}

inline dataset::CohortConfig cohort(const RunConfig &c, std::uint64_t seed) {
  dataset::CohortConfig k;
  k.trial.n_channels = c.data.synth_channels;
  k.trial.duration_s = c.data.duration_s;
  k.trial.attend_gain = c.data.attend_gain;
  k.trial.unattended_gain = c.data.unattended_gain;
  k.trial.noise_sigma = c.data.noise_sigma;
  k.trial.neural_delay_ms = c.data.delay_ms;
  k.trials = c.data.trials;
  k.online_trials = c.data.online_trials;
  k.seed = seed;
  return k;
}

inline pipeline::ArchConfig arch(const RunConfig &c) {
  pipeline::ArchConfig a;
  a.eeg_channels = c.data.channels;
  a.conv_out = c.arch.conv_out;
  a.stride = c.arch.stride;
  a.window_s = c.data.window_s;
  return a;
}

inline pipeline::TrainConfig train_config(const RunConfig &c, std::uint64_t seed) {
  pipeline::TrainConfig t;
  t.epochs = c.train.epochs;
  t.batch_size = c.train.batch_size;
  t.adam.lr = c.train.learning_rate;
  t.seed = seed;
  return t;
}

inline pipeline::PhaseBConfig phase_b_config(const RunConfig &c, std::uint64_t seed) {
  pipeline::PhaseBConfig p;
  p.snn.epochs = c.train.snn_epochs;
  p.snn.batch_size = c.train.batch_size;
  p.snn.adam.lr = c.train.learning_rate;
  p.snn.per_step_loss = c.train.per_step_loss;
  p.snn.seed = dataset::mix_seed(seed, 4);
  p.search_epochs = c.train.search_epochs;
  p.proxy_objective = c.adm.proxy_objective;
  p.grid = threshold_grid(c.adm);
  return p;
}

} // namespace corticospike::config
