#pragma once

// Hybrid CNN-SNN and reference CNN assembly, the two-phase training
// procedure, post-training quantization, metrics and footprint accounting.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include "adm.hpp"
#include "dataset.hpp"
#include "errors.hpp"
#include "neuralcore.hpp"
#include "snn.hpp"

namespace corticospike::pipeline {

using dataset::Sample;
using dataset::Speaker;

enum class ModelKind { hybrid, reference };

inline std::string kind_name(ModelKind k) {
  return k == ModelKind::hybrid ? "hybrid" : "reference";
}
inline ModelKind parse_kind(const std::string &s) {
  if (s == "hybrid")
    return ModelKind::hybrid;
  if (s == "reference")
    return ModelKind::reference;
  throw ParameterError("model kind must be hybrid or reference, got '" + s + "'");
}

struct ArchConfig {
  std::size_t eeg_channels = 8;
  std::size_t conv_out = 40;
  std::size_t kernel = nn::kKernel;
  std::size_t stride = nn::kKernel;
  double window_s = 1.0;

  std::size_t input_channels() const { return eeg_channels + 2; }
  std::size_t snn_input() const { return 2 * conv_out; }
  std::size_t snn_hidden() const { return 2 * conv_out; }
  std::size_t window_samples() const {
    return static_cast<std::size_t>(std::llround(window_s * dataset::kEegFs));
  }
  std::size_t steps() const { return (window_samples() - kernel) / stride + 1; }
};

inline void validate(const ArchConfig &a) {
  if (a.eeg_channels == 0 || a.conv_out == 0)
    throw ParameterError("eeg_channels and conv_out must be positive");
  if (a.kernel == 0 || a.stride == 0)
    throw ParameterError("kernel and stride must be positive");
  if (!(a.window_s > 0.0) || a.window_samples() < a.kernel)
    throw ParameterError("window must cover at least one kernel");
}

/// Learnable/stored parameter count, batch norm contributing 4 per channel.
inline std::size_t count_params(const ArchConfig &a, ModelKind kind) {
  const std::size_t k = a.conv_out;
  const std::size_t conv = a.input_channels() * a.kernel * k + k;
  if (kind == ModelKind::hybrid) {
    const std::size_t bn = 4 * k;
    const std::size_t l1 = 2 * k * 2 * k + 2 * k;
    const std::size_t l2 = 2 * k * 2 + 2;
    return conv + bn + l1 + l2;
  }
  return conv + (k * k + k) + (k * 2 + 2);
}

// -------------------------------------------------------------- models

/// conv -> [batch norm] -> global average pool -> dense+ReLU -> dense+softmax.
/// With batch norm this is the phase-A network; without it, the reference
/// CNN.
template <typename Real> struct CnnClassifier {
  ArchConfig arch;
  nn::Conv1dLayer<Real> conv;
  bool use_bn = false;
  nn::BatchNorm1d<Real> bn;
  nn::DenseLayer<Real> fc1, fc2;
  nn::LossConfig loss;

  CnnClassifier() = default;
  CnnClassifier(const ArchConfig &a, bool with_bn)
      : arch(a), conv(a.input_channels(), a.conv_out, a.kernel, a.stride),
        use_bn(with_bn), bn(a.conv_out),
        fc1(a.conv_out, a.conv_out, nn::Activation::relu),
        fc2(a.conv_out, 2, nn::Activation::softmax) {}

  template <typename Rng> void init(Rng &rng) {
    conv.init(rng);
    fc1.init(rng);
    fc2.init(rng);
  }
};

template <typename Real> using ReferenceCnn = CnnClassifier<Real>;
template <typename Real> using PhaseAModel = CnnClassifier<Real>;

enum class HybridMode { train_a, train_b, infer };

template <typename Real> struct HybridModel {
  ArchConfig arch;
  nn::Conv1dLayer<Real> conv;
  nn::BatchNorm1d<Real> bn;
  adm::AdmConfig adm;
  snn::SnnModel<Real> snn;
  HybridMode mode = HybridMode::infer;

  HybridModel() = default;
  explicit HybridModel(const ArchConfig &a)
      : arch(a), conv(a.input_channels(), a.conv_out, a.kernel, a.stride),
        bn(a.conv_out) {
    snn.l1 = snn::SpikingDense<Real>(a.snn_input(), a.snn_hidden());
    snn.l2 = snn::SpikingDense<Real>(a.snn_hidden(), 2);
    snn.lif = snn::LifParams::for_stride(a.stride);
    bn.mode = nn::Mode::eval;
  }
};

/// Visits every stored tensor as (name, values, dims, is_weight). Weights
/// are the tensors that get quantized and L1-penalised.
template <typename Real, typename F>
void for_each_tensor(CnnClassifier<Real> &m, F &&f) {
  const auto k = static_cast<std::uint32_t>(m.arch.conv_out);
  const auto c = static_cast<std::uint32_t>(m.arch.input_channels());
  const auto kern = static_cast<std::uint32_t>(m.arch.kernel);
  f("conv.weight", m.conv.weights, std::vector<std::uint32_t>{k, c, kern}, true);
  f("conv.bias", m.conv.bias, std::vector<std::uint32_t>{k}, false);
  if (m.use_bn) {
    f("bn.gamma", m.bn.gamma, std::vector<std::uint32_t>{k}, false);
    f("bn.beta", m.bn.beta, std::vector<std::uint32_t>{k}, false);
    f("bn.running_mean", m.bn.running_mean, std::vector<std::uint32_t>{k}, false);
    f("bn.running_var", m.bn.running_var, std::vector<std::uint32_t>{k}, false);
  }
  f("fc1.weight", m.fc1.weights, std::vector<std::uint32_t>{k, k}, true);
  f("fc1.bias", m.fc1.bias, std::vector<std::uint32_t>{k}, false);
  f("fc2.weight", m.fc2.weights, std::vector<std::uint32_t>{2, k}, true);
  f("fc2.bias", m.fc2.bias, std::vector<std::uint32_t>{2}, false);
}

template <typename Real, typename F>
void for_each_tensor(HybridModel<Real> &m, F &&f) {
  const auto k = static_cast<std::uint32_t>(m.arch.conv_out);
  const auto c = static_cast<std::uint32_t>(m.arch.input_channels());
  const auto kern = static_cast<std::uint32_t>(m.arch.kernel);
  f("conv.weight", m.conv.weights, std::vector<std::uint32_t>{k, c, kern}, true);
  f("conv.bias", m.conv.bias, std::vector<std::uint32_t>{k}, false);
  f("bn.gamma", m.bn.gamma, std::vector<std::uint32_t>{k}, false);
  f("bn.beta", m.bn.beta, std::vector<std::uint32_t>{k}, false);
  f("bn.running_mean", m.bn.running_mean, std::vector<std::uint32_t>{k}, false);
  f("bn.running_var", m.bn.running_var, std::vector<std::uint32_t>{k}, false);
  f("snn.l1.weight", m.snn.l1.weights, std::vector<std::uint32_t>{2 * k, 2 * k}, true);
  f("snn.l1.bias", m.snn.l1.bias, std::vector<std::uint32_t>{2 * k}, false);
  f("snn.l2.weight", m.snn.l2.weights, std::vector<std::uint32_t>{2, 2 * k}, true);
  f("snn.l2.bias", m.snn.l2.bias, std::vector<std::uint32_t>{2}, false);
}

template <typename Model> std::size_t stored_values(const Model &model) {
  std::size_t n = 0;
  for_each_tensor(const_cast<Model &>(model),
                  [&](const std::string &, auto &v, const auto &, bool) { n += v.size(); });
  return n;
}

/// FNV-1a over the raw bytes of the named tensors (all when empty).
template <typename Model>
std::uint64_t checksum(const Model &model, const std::vector<std::string> &names = {}) {
  std::uint64_t h = 1469598103934665603ull;
  for_each_tensor(const_cast<Model &>(model), [&](const std::string &name, auto &v,
                                                  const auto &, bool) {
    if (!names.empty() && std::find(names.begin(), names.end(), name) == names.end())
      return;
    const auto *p = reinterpret_cast<const unsigned char *>(v.data());
    for (std::size_t i = 0; i < v.size() * sizeof(v[0]); ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  });
  return h;
}

// ------------------------------------------------------------ training

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  nn::AdamConfig adam;
  std::uint64_t seed = 0;
};

struct EpochRecord {
  std::string phase;
  std::size_t epoch;
  double loss;
  double train_accuracy;
  double val_accuracy;
};

using EpochCallback = std::function<void(const EpochRecord &)>;

inline std::size_t label_index(Speaker s) { return static_cast<std::size_t>(s); }

template <typename Real>
Matrix<Real> to_real(const Matrix<float> &m) {
  if constexpr (std::is_same_v<Real, float>)
    return m;
  else
    return m.template cast<Real>();
}

/// Class probabilities with batch norm (if any) in eval mode.
template <typename Real>
std::vector<Real> cnn_predict_proba(const CnnClassifier<Real> &m, const Matrix<Real> &x) {
  auto y = nn::conv1d_forward(m.conv, x);
  if (m.use_bn) {
    auto bn = m.bn;
    bn.mode = nn::Mode::eval;
    y = std::move(nn::batchnorm_forward<Real>(bn, {y}).front());
  }
  const auto h = nn::avgpool_global(y);
  const auto a = nn::dense_forward<Real>(m.fc1, h);
  return nn::dense_forward<Real>(m.fc2, a);
}

template <typename Real>
std::size_t cnn_predict(const CnnClassifier<Real> &m, const Matrix<float> &x) {
  const auto p = cnn_predict_proba(m, to_real<Real>(x));
  return p[1] > p[0] ? 1 : 0;
}

template <typename Real>
double cnn_accuracy(const CnnClassifier<Real> &m, const std::vector<Sample> &data) {
  if (data.empty())
    return 0.0;
  std::size_t ok = 0;
  for (const auto &s : data)
    ok += cnn_predict(m, s.input) == label_index(s.label);
  return static_cast<double>(ok) / static_cast<double>(data.size());
}

template <typename Real> struct CnnGrads {
  std::vector<Real> conv_w, conv_b, gamma, beta, fc1_w, fc1_b, fc2_w, fc2_b;

  explicit CnnGrads(const CnnClassifier<Real> &m)
      : conv_w(m.conv.weights.size()), conv_b(m.conv.bias.size()),
        gamma(m.bn.gamma.size()), beta(m.bn.beta.size()),
        fc1_w(m.fc1.weights.size()), fc1_b(m.fc1.bias.size()),
        fc2_w(m.fc2.weights.size()), fc2_b(m.fc2.bias.size()) {}
};

namespace detail {
template <typename Real>
void add_into(std::vector<Real> &acc, const std::vector<Real> &g) {
  for (std::size_t i = 0; i < acc.size(); ++i)
    acc[i] += g[i];
}
} // namespace detail

/// Forward + backward over one mini-batch in train mode. Returns the mean
/// cross entropy (without the L1 term); gradients are of the batch mean.
template <typename Real>
double cnn_batch_gradients(CnnClassifier<Real> &m, const std::vector<const Matrix<Real> *> &xs,
                           const std::vector<std::size_t> &labels, CnnGrads<Real> &g) {
  const std::size_t b = xs.size();
  std::vector<Matrix<Real>> conv_out;
  conv_out.reserve(b);
  for (const auto *x : xs)
    conv_out.push_back(nn::conv1d_forward(m.conv, *x));
  nn::BatchNormCache<Real> cache;
  std::vector<Matrix<Real>> normed;
  if (m.use_bn) {
    m.bn.mode = nn::Mode::train;
    normed = nn::batchnorm_forward(m.bn, conv_out, &cache);
  }
  const auto &feat = m.use_bn ? normed : conv_out;
  const std::size_t len = feat.front().cols();

  double loss = 0.0;
  const Real inv_b = Real(1) / static_cast<Real>(b);
  std::vector<Matrix<Real>> grad_feat;
  grad_feat.reserve(b);
  for (std::size_t i = 0; i < b; ++i) {
    const auto h = nn::avgpool_global(feat[i]);
    const auto u = nn::dense_affine<Real>(m.fc1, h);
    const auto a = nn::relu<Real>(u);
    const auto o = nn::dense_affine<Real>(m.fc2, a);
    const auto p = nn::softmax<Real>(o);
    loss += nn::cross_entropy<Real>(p, labels[i]);
    auto go = nn::softmax_cross_entropy_grad<Real>(p, labels[i]);
    for (auto &v : go)
      v *= inv_b;
    auto g2 = nn::dense_backward<Real>(m.fc2, a, go);
    detail::add_into(g.fc2_w, g2.weights);
    detail::add_into(g.fc2_b, g2.bias);
    const auto gu = nn::relu_backward<Real>(u, g2.input);
    auto g1 = nn::dense_backward<Real>(m.fc1, h, gu);
    detail::add_into(g.fc1_w, g1.weights);
    detail::add_into(g.fc1_b, g1.bias);
    grad_feat.push_back(nn::avgpool_global_backward<Real>(g1.input, len));
  }
  std::vector<Matrix<Real>> grad_conv_out;
  if (m.use_bn) {
    auto gb = nn::batchnorm_backward(m.bn, cache, grad_feat);
    detail::add_into(g.gamma, gb.gamma);
    detail::add_into(g.beta, gb.beta);
    grad_conv_out = std::move(gb.input);
  } else {
    grad_conv_out = std::move(grad_feat);
  }
  for (std::size_t i = 0; i < b; ++i) {
    auto gc = nn::conv1d_backward(m.conv, *xs[i], grad_conv_out[i], false);
    detail::add_into(g.conv_w, gc.weights);
    detail::add_into(g.conv_b, gc.bias);
  }
  return loss / static_cast<double>(b);
}

template <typename Real>
std::vector<std::span<const Real>> weight_tensors(const CnnClassifier<Real> &m) {
  return {m.conv.weights, m.fc1.weights, m.fc2.weights};
}

template <typename Real> double mean_abs_weight(const CnnClassifier<Real> &m) {
  double s = 0.0;
  std::size_t n = 0;
  for (auto w : weight_tensors(m))
    for (Real v : w) {
      s += std::abs(static_cast<double>(v));
      ++n;
    }
  return n ? s / static_cast<double>(n) : 0.0;
}

/// Per-row affine standardization fitted on the training windows.
struct InputScaler {
  std::vector<double> mean;
  std::vector<double> scale;
};

inline InputScaler fit_input_scaler(const std::vector<Sample> &data) {
  if (data.empty())
    throw ParameterError("cannot fit an input scaler on no samples");
  const std::size_t rows = data.front().input.rows();
  InputScaler sc{std::vector<double>(rows, 0.0), std::vector<double>(rows, 0.0)};
  std::size_t n = 0;
  for (const auto &s : data) {
    if (s.input.rows() != rows)
      throw ShapeError("samples disagree on row count");
    for (std::size_t r = 0; r < rows; ++r)
      for (float v : s.input.row(r))
        sc.mean[r] += v;
    n += s.input.cols();
  }
  for (auto &m : sc.mean)
    m /= static_cast<double>(n);
  for (const auto &s : data)
    for (std::size_t r = 0; r < rows; ++r)
      for (float v : s.input.row(r))
        sc.scale[r] += (v - sc.mean[r]) * (v - sc.mean[r]);
  for (auto &v : sc.scale) {
    v = std::sqrt(v / static_cast<double>(n));
    if (!(v > 1e-12))
      v = 1.0;
  }
  return sc;
}

inline std::vector<Sample> apply_input_scaler(const InputScaler &sc,
                                              std::vector<Sample> data) {
  for (auto &s : data) {
    if (s.input.rows() != sc.mean.size())
      throw ShapeError("sample rows do not match the input scaler");
    for (std::size_t r = 0; r < sc.mean.size(); ++r)
      for (float &v : s.input.row(r))
        v = static_cast<float>((v - sc.mean[r]) / sc.scale[r]);
  }
  return data;
}

/// Rewrites a conv trained on standardized input so it takes raw input:
/// w' = w / s, b' = b - sum w * m / s.
template <typename Real>
void fold_input_scaler(nn::Conv1dLayer<Real> &conv, const InputScaler &sc) {
  if (sc.mean.size() != conv.in_ch)
    throw ShapeError("input scaler does not match conv input channels");
  for (std::size_t o = 0; o < conv.out_ch; ++o) {
    double shift = 0.0;
    for (std::size_t i = 0; i < conv.in_ch; ++i)
      for (std::size_t k = 0; k < conv.kernel; ++k) {
        const double w = static_cast<double>(conv.w(o, i, k)) / sc.scale[i];
        conv.w(o, i, k) = static_cast<Real>(w);
        shift += w * sc.mean[i];
      }
    conv.bias[o] = static_cast<Real>(static_cast<double>(conv.bias[o]) - shift);
  }
}

/// ADAM / cross-entropy (+ lambda * sum|w| on weights) with per-epoch
/// validation; returns the best-validation epoch's weights (ties to the
/// earlier epoch).
template <typename Real>
CnnClassifier<Real> train_cnn(CnnClassifier<Real> model, const std::vector<Sample> &raw_train,
                              const std::vector<Sample> &raw_val, const TrainConfig &cfg,
                              const std::string &phase, const EpochCallback &on_epoch = {},
                              double *final_train_accuracy = nullptr) {
  if (raw_train.empty())
    throw ParameterError("training set is empty");
  for (const auto &s : raw_train)
    if (s.input.rows() != model.arch.input_channels())
      throw ShapeError("sample has " + std::to_string(s.input.rows()) +
                       " rows, model expects " +
                       std::to_string(model.arch.input_channels()));
  const InputScaler scaler = fit_input_scaler(raw_train);
  const auto train = apply_input_scaler(scaler, raw_train);
  const auto val = apply_input_scaler(scaler, raw_val);
  const double lambda = model.loss.lasso_lambda;
  if (lambda < 0.0)
    throw ParameterError("lasso lambda must be >= 0");

  std::vector<Matrix<Real>> inputs;
  inputs.reserve(train.size());
  for (const auto &s : train) {
    if (s.input.rows() != model.arch.input_channels())
      throw ShapeError("sample has " + std::to_string(s.input.rows()) +
                       " rows, model expects " +
                       std::to_string(model.arch.input_channels()));
    inputs.push_back(to_real<Real>(s.input));
  }

  nn::AdamState<Real> opt(cfg.adam);
  std::mt19937_64 rng(dataset::mix_seed(cfg.seed, 2));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  CnnClassifier<Real> best = model;
  double best_val = -1.0;
  const std::size_t batch = std::max<std::size_t>(1, cfg.batch_size);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
      const std::size_t b1 = std::min(order.size(), b0 + batch);
      std::vector<const Matrix<Real> *> xs;
      std::vector<std::size_t> ys;
      for (std::size_t i = b0; i < b1; ++i) {
        xs.push_back(&inputs[order[i]]);
        ys.push_back(label_index(train[order[i]].label));
      }
      CnnGrads<Real> g(model);
      double loss = cnn_batch_gradients(model, xs, ys, g);
      if (lambda > 0.0) {
        loss += nn::l1_penalty<Real>(weight_tensors(model), lambda);
        nn::add_l1_subgradient<Real>(model.conv.weights, g.conv_w, lambda);
        nn::add_l1_subgradient<Real>(model.fc1.weights, g.fc1_w, lambda);
        nn::add_l1_subgradient<Real>(model.fc2.weights, g.fc2_w, lambda);
      }
      if (!std::isfinite(loss))
        throw TrainingError(phase + ": non-finite loss at epoch " + std::to_string(epoch));
      std::vector<nn::ParamRef<Real>> params{
          {"conv.weight", model.conv.weights, g.conv_w, true},
          {"conv.bias", model.conv.bias, g.conv_b, false}};
      if (model.use_bn) {
        params.push_back({"bn.gamma", model.bn.gamma, g.gamma, false});
        params.push_back({"bn.beta", model.bn.beta, g.beta, false});
      }
      params.push_back({"fc1.weight", model.fc1.weights, g.fc1_w, true});
      params.push_back({"fc1.bias", model.fc1.bias, g.fc1_b, false});
      params.push_back({"fc2.weight", model.fc2.weights, g.fc2_w, true});
      params.push_back({"fc2.bias", model.fc2.bias, g.fc2_b, false});
      nn::adam_step<Real>(opt, params);
      loss_sum += loss;
      ++batches;
    }
    model.bn.mode = nn::Mode::eval;
    const double train_acc = cnn_accuracy(model, train);
    const double val_acc = val.empty() ? train_acc : cnn_accuracy(model, val);
    if (final_train_accuracy)
      *final_train_accuracy = train_acc;
    if (on_epoch)
      on_epoch({phase, epoch, loss_sum / static_cast<double>(batches), train_acc, val_acc});
    if (val_acc > best_val) {
      best_val = val_acc;
      best = model;
    }
  }
  best.bn.mode = nn::Mode::eval;
  fold_input_scaler(best.conv, scaler);
  return best;
}

/// Phase A: conv + batch norm with a pooled dense head. The head is only
/// scaffolding; extract_front_end drops it.
template <typename Real = float>
PhaseAModel<Real> train_phase_a(const ArchConfig &arch, const std::vector<Sample> &train,
                                const std::vector<Sample> &val, const TrainConfig &cfg,
                                const EpochCallback &on_epoch = {}) {
  validate(arch);
  PhaseAModel<Real> model(arch, true);
  std::mt19937_64 rng(dataset::mix_seed(cfg.seed, 1));
  model.init(rng);
  return train_cnn(std::move(model), train, val, cfg, "phase_a", on_epoch);
}

template <typename Real = float>
ReferenceCnn<Real> train_reference(const ArchConfig &arch, double lambda_l1,
                                   const std::vector<Sample> &train,
                                   const std::vector<Sample> &val, const TrainConfig &cfg,
                                   const EpochCallback &on_epoch = {},
                                   double *final_train_accuracy = nullptr) {
  validate(arch);
  if (lambda_l1 < 0.0)
    throw ParameterError("lasso lambda must be >= 0");
  ReferenceCnn<Real> model(arch, false);
  model.loss.lasso_lambda = lambda_l1;
  std::mt19937_64 rng(dataset::mix_seed(cfg.seed, 1));
  model.init(rng);
  return train_cnn(std::move(model), train, val, cfg, "reference", on_epoch,
                   final_train_accuracy);
}

/// Doubling sweep 1e-6, 2e-6, ... up to 1e-1.
inline std::vector<double> lambda_sweep_grid() {
  std::vector<double> g;
  for (double l = 1e-6; l <= 1e-1 * (1 + 1e-12); l *= 2.0)
    g.push_back(l);
  return g;
}

struct LambdaSweepResult {
  double lambda = 0.0; ///< 0 when no candidate kept training accuracy > 60%
  std::vector<std::pair<double, double>> final_train_accuracy;
};

/// Largest lambda whose final training accuracy still exceeds 60%.
template <typename Real = float>
LambdaSweepResult select_lambda(const ArchConfig &arch, const std::vector<Sample> &train,
                                const std::vector<Sample> &val, const TrainConfig &cfg,
                                const std::vector<double> &grid = lambda_sweep_grid()) {
  LambdaSweepResult r;
  for (double l : grid) {
    double acc = 0.0;
    train_reference<Real>(arch, l, train, val, cfg, {}, &acc);
    r.final_train_accuracy.emplace_back(l, acc);
    if (acc > 0.6)
      r.lambda = std::max(r.lambda, l);
  }
  return r;
}

// ------------------------------------------------------------- phase B

/// conv -> batch norm (eval) for one sample: conv_out x L.
template <typename Real>
Matrix<Real> front_end(const nn::Conv1dLayer<Real> &conv, const nn::BatchNorm1d<Real> &bn,
                       const Matrix<Real> &x) {
  auto y = nn::conv1d_forward(conv, x);
  auto b = bn;
  b.mode = nn::Mode::eval;
  return std::move(nn::batchnorm_forward<Real>(b, {y}).front());
}

template <typename Real>
std::vector<Matrix<Real>> front_end_all(const nn::Conv1dLayer<Real> &conv,
                                        const nn::BatchNorm1d<Real> &bn,
                                        const std::vector<Sample> &samples) {
  std::vector<Matrix<Real>> out;
  out.reserve(samples.size());
  for (const auto &s : samples)
    out.push_back(front_end(conv, bn, to_real<Real>(s.input)));
  return out;
}

template <typename Real>
std::vector<snn::EventSample> encode_events(const std::vector<Matrix<Real>> &features,
                                            const std::vector<Sample> &samples,
                                            double threshold) {
  std::vector<snn::EventSample> out;
  out.reserve(features.size());
  for (std::size_t i = 0; i < features.size(); ++i)
    out.push_back({adm::adm_encode(features[i], threshold), label_index(samples[i].label)});
  return out;
}

inline double mean_event_rate(const std::vector<snn::EventSample> &data) {
  if (data.empty())
    return 0.0;
  double s = 0.0;
  for (const auto &d : data)
    s += adm::event_rate(d.frames);
  return s / static_cast<double>(data.size());
}

struct PhaseBConfig {
  snn::SnnTrainConfig snn;
  std::size_t search_epochs = 20;
  bool proxy_objective = false;
  std::vector<double> grid = adm::default_grid();
};

template <typename Real>
snn::SnnModel<Real> init_snn(const ArchConfig &arch, std::uint64_t seed) {
  snn::SnnModel<Real> m;
  m.lif = snn::LifParams::for_stride(arch.stride);
  m.l1 = snn::SpikingDense<Real>(arch.snn_input(), arch.snn_hidden());
  m.l2 = snn::SpikingDense<Real>(arch.snn_hidden(), 2);
  std::mt19937_64 rng(dataset::mix_seed(seed, 3));
  m.l1.init(rng, static_cast<Real>(m.lif.v_threshold));
  m.l2.init(rng, static_cast<Real>(m.lif.v_threshold));
  return m;
}

template <typename Real>
HybridModel<Real> assemble(const PhaseAModel<Real> &a, double threshold,
                           const snn::SnnModel<Real> &s) {
  HybridModel<Real> h(a.arch);
  h.conv = a.conv;
  h.bn = a.bn;
  h.bn.mode = nn::Mode::eval;
  h.adm.threshold = threshold;
  h.snn = s;
  h.mode = HybridMode::infer;
  return h;
}

/// ADM threshold search: each candidate is scored by the validation
/// accuracy of a short phase-B run (or by the event-rate proxy).
template <typename Real>
adm::GridSearchResult search_threshold(const PhaseAModel<Real> &a,
                                       const std::vector<Sample> &train,
                                       const std::vector<Sample> &val,
                                       const PhaseBConfig &cfg) {
  const auto ftrain = front_end_all(a.conv, a.bn, train);
  const auto fval = front_end_all(a.conv, a.bn, val);
  return adm::grid_search_threshold(cfg.grid, [&](double t) {
    auto etrain = encode_events(ftrain, train, t);
    const double rate = mean_event_rate(etrain);
    if (cfg.proxy_objective)
      return adm::GridPoint{t, adm::proxy_score(rate), rate};
    auto eval = encode_events(fval, val, t);
    auto scfg = cfg.snn;
    scfg.epochs = cfg.search_epochs;
    auto model = snn::train_snn(init_snn<Real>(a.arch, cfg.snn.seed), etrain, eval, scfg);
    return adm::GridPoint{t, snn::snn_accuracy(model, eval.empty() ? etrain : eval), rate};
  });
}

/// Phase B: frozen conv + batch norm (eval), ADM events at `threshold`,
/// surrogate-gradient training of the two spiking layers.
template <typename Real = float>
HybridModel<Real> train_phase_b(const PhaseAModel<Real> &a, double threshold,
                                const std::vector<Sample> &train,
                                const std::vector<Sample> &val, const PhaseBConfig &cfg,
                                const EpochCallback &on_epoch = {}) {
  if (!(threshold > 0.0))
    throw ParameterError("ADM threshold must be > 0");
  const auto etrain = encode_events(front_end_all(a.conv, a.bn, train), train, threshold);
  const auto eval = encode_events(front_end_all(a.conv, a.bn, val), val, threshold);
  auto s = snn::train_snn(init_snn<Real>(a.arch, cfg.snn.seed), etrain, eval, cfg.snn,
                          [&](const snn::EpochLog &e) {
                            if (on_epoch)
                              on_epoch({"phase_b", e.epoch, e.loss, e.train_accuracy,
                                        e.val_accuracy});
                          });
  return assemble(a, threshold, s);
}

// ------------------------------------------------------------ inference

template <typename Real> struct InferenceResult {
  std::size_t decision = 0;
  std::vector<snn::StepTrace<Real>> trace;
  std::vector<adm::EventFrame> frames;
  std::size_t synaptic_events = 0;
};

template <typename Real>
InferenceResult<Real> infer(const HybridModel<Real> &m, const Matrix<float> &input) {
  if (m.mode != HybridMode::infer)
    throw ParameterError("model is not in inference mode");
  if (input.cols() < m.arch.kernel)
    throw ShapeError("sample of " + std::to_string(input.cols()) +
                     " samples is shorter than the kernel");
  const auto feat = front_end(m.conv, m.bn, to_real<Real>(input));
  InferenceResult<Real> r;
  r.frames = adm::adm_encode(feat, m.adm.threshold);
  auto seq = snn::snn_forward_sequence(m.snn, r.frames);
  r.decision = seq.decision;
  r.trace = std::move(seq.steps);
  r.synaptic_events = seq.synaptic_events;
  return r;
}

// ------------------------------------------------------------- metrics

struct Metrics {
  double accuracy = 0.0;
  double f1 = 0.0; ///< macro average over the two classes
};

inline Metrics evaluate_predictions(std::span<const std::size_t> predicted,
                                    std::span<const std::size_t> actual) {
  if (predicted.empty() || predicted.size() != actual.size())
    throw ParameterError("evaluation needs equally sized, nonempty label lists");
  std::size_t correct = 0;
  double f1_sum = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i)
    correct += predicted[i] == actual[i];
  for (std::size_t c = 0; c < 2; ++c) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
      tp += predicted[i] == c && actual[i] == c;
      fp += predicted[i] == c && actual[i] != c;
      fn += predicted[i] != c && actual[i] == c;
    }
    const double denom = static_cast<double>(2 * tp + fp + fn);
    f1_sum += denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
  }
  return {static_cast<double>(correct) / static_cast<double>(predicted.size()),
          f1_sum / 2.0};
}

template <typename Predict>
Metrics evaluate_with(const std::vector<Sample> &test, Predict &&predict) {
  if (test.empty())
    throw ParameterError("evaluation on an empty test set");
  std::vector<std::size_t> pred, actual;
  for (const auto &s : test) {
    pred.push_back(predict(s.input));
    actual.push_back(label_index(s.label));
  }
  return evaluate_predictions(pred, actual);
}

template <typename Real>
Metrics evaluate(const HybridModel<Real> &m, const std::vector<Sample> &test) {
  return evaluate_with(test, [&](const Matrix<float> &x) { return infer(m, x).decision; });
}

template <typename Real>
Metrics evaluate(const CnnClassifier<Real> &m, const std::vector<Sample> &test) {
  return evaluate_with(test, [&](const Matrix<float> &x) { return cnn_predict(m, x); });
}

// --------------------------------------------------------- quantization

struct QuantizedTensor {
  double scale = 1.0;
  std::vector<std::int16_t> values;
};

/// Symmetric per-tensor linear quantization to `bits` (2..16) bits:
/// scale = max|w| / (2^(bits-1) - 1), round to nearest. All-zero tensors
/// get scale 1.
template <typename Real>
QuantizedTensor quantize_tensor(std::span<const Real> w, int bits) {
  if (bits < 2 || bits > 16)
    throw ParameterError("quantization bits must lie in [2, 16]");
  const double qmax = std::ldexp(1.0, bits - 1) - 1.0;
  double peak = 0.0;
  for (Real v : w)
    peak = std::max(peak, std::abs(static_cast<double>(v)));
  QuantizedTensor q;
  q.scale = peak == 0.0 ? 1.0 : peak / qmax;
  q.values.resize(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double r = std::nearbyint(static_cast<double>(w[i]) / q.scale);
    q.values[i] = static_cast<std::int16_t>(std::clamp(r, -qmax, qmax));
  }
  return q;
}

template <typename Real> std::vector<Real> dequantize(const QuantizedTensor &q) {
  std::vector<Real> out(q.values.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<Real>(q.scale * q.values[i]);
  return out;
}

/// Post-training quantization of every weight tensor; biases and batch
/// norm statistics stay at working precision. The returned model holds the
/// dequantized values, so inference runs at working precision.
template <typename Model> Model quantize_weights(const Model &model, int bits = 16) {
  Model out = model;
  if (bits >= 32)
    return out;
  for_each_tensor(out, [&](const std::string &, auto &v, const auto &, bool is_weight) {
    if (!is_weight)
      return;
    using R = typename std::decay_t<decltype(v)>::value_type;
    v = dequantize<R>(quantize_tensor<R>(v, bits));
  });
  return out;
}

// ------------------------------------------------------------ footprint

struct FootprintReport {
  ModelKind kind = ModelKind::hybrid;
  std::size_t parameters = 0;
  int bits = 32;
  std::size_t bytes = 0;
  std::size_t conv_macs_per_window = 0;
  std::optional<double> synaptic_events_per_window;
  std::optional<double> event_sparsity; ///< fraction of ADM slots with an event
};

inline FootprintReport footprint_report(const ArchConfig &arch, ModelKind kind, int bits) {
  validate(arch);
  if (bits <= 0 || bits % 8 != 0)
    throw ParameterError("bit width must be a positive multiple of 8");
  FootprintReport r;
  r.kind = kind;
  r.parameters = count_params(arch, kind);
  r.bits = bits;
  r.bytes = r.parameters * static_cast<std::size_t>(bits) / 8;
  r.conv_macs_per_window = arch.input_channels() * arch.kernel * arch.conv_out * arch.steps();
  return r;
}

/// Fills the measured fields by running the hybrid model over a dataset.
template <typename Real>
void measure_events(FootprintReport &r, const HybridModel<Real> &m,
                    const std::vector<Sample> &data) {
  if (data.empty())
    return;
  double events = 0.0, sparsity = 0.0;
  for (const auto &s : data) {
    const auto res = infer(m, s.input);
    events += static_cast<double>(res.synaptic_events);
    sparsity += adm::event_rate(res.frames);
  }
  r.synaptic_events_per_window = events / static_cast<double>(data.size());
  r.event_sparsity = sparsity / static_cast<double>(data.size());
}

/// Relative reduction in percent, 100 * (1 - candidate / baseline).
inline double reduction_percent(double baseline, double candidate) {
  if (baseline <= 0.0)
    throw ParameterError("baseline must be positive");
  return 100.0 * (1.0 - candidate / baseline);
}

// ---------------------------------------------------- experiment matrix

enum class RunKind { hybrid, reference, reference_lasso };

inline std::string run_kind_name(RunKind k) {
  switch (k) {
  case RunKind::hybrid:
    return "hybrid";
  case RunKind::reference:
    return "reference";
  case RunKind::reference_lasso:
    return "reference_lasso";
  }
  return "?";
}

struct ExperimentConfig {
  std::vector<double> windows{1, 2, 3, 4, 5};
  std::vector<std::size_t> channel_counts{8, 16};
  std::vector<RunKind> kinds{RunKind::reference, RunKind::reference_lasso, RunKind::hybrid};
  std::size_t n_seeds = 20;
  std::size_t conv_out = 40;
  std::size_t stride = nn::kKernel;
  double split_ratio = 0.8;
  double lambda_l1 = 1e-4;
  TrainConfig train;
  PhaseBConfig phase_b;
  std::size_t threads = 1;
};

struct RunResult {
  double window_s;
  std::size_t channels;
  RunKind kind;
  std::uint64_t seed;
  Metrics metrics;
};

struct CellResult {
  double window_s;
  std::size_t channels;
  RunKind kind;
  std::size_t n_seeds;
  double mean_accuracy;
  double mean_f1;
};

/// One training + evaluation run. Calibration trials are windowed and split
/// into train/validation; online trials form the test set.
inline RunResult run_single(const std::vector<dataset::Trial> &calibration,
                            const std::vector<dataset::Trial> &online, double window_s,
                            std::size_t channels, RunKind kind, std::uint64_t seed,
                            const ExperimentConfig &cfg) {
  const auto &names = channels == 8 ? dataset::auditory8() : dataset::montage16();
  auto pick = [&](const std::vector<dataset::Trial> &ts) {
    std::vector<dataset::Trial> out;
    for (const auto &t : ts)
      out.push_back(t.channel_names == names ? t : dataset::select_channels(t, names));
    return out;
  };
  const auto cal = dataset::window_samples(pick(calibration), window_s);
  const auto test = dataset::window_samples(pick(online), window_s);
  auto [train, val] = dataset::split_train_val(cal, cfg.split_ratio, seed);

  ArchConfig arch;
  arch.eeg_channels = channels;
  arch.conv_out = cfg.conv_out;
  arch.stride = cfg.stride;
  arch.window_s = window_s;
  TrainConfig tc = cfg.train;
  tc.seed = seed;

  Metrics m;
  if (kind == RunKind::hybrid) {
    const auto a = train_phase_a<float>(arch, train, val, tc);
    PhaseBConfig pb = cfg.phase_b;
    pb.snn.seed = dataset::mix_seed(seed, 4);
    const auto search = search_threshold(a, train, val, pb);
    m = evaluate(train_phase_b(a, search.best_threshold, train, val, pb), test);
  } else {
    const double lambda = kind == RunKind::reference_lasso ? cfg.lambda_l1 : 0.0;
    m = evaluate(train_reference<float>(arch, lambda, train, val, tc), test);
  }
  return {window_s, channels, kind, seed, m};
}

/// Every (window, channel count, kind) cell trained with seeds 0..n-1 and
/// averaged. Runs may execute on worker threads; results are merged in
/// cell order regardless of completion order.
inline std::vector<CellResult>
run_experiment_matrix(const std::vector<dataset::Trial> &calibration,
                      const std::vector<dataset::Trial> &online, const ExperimentConfig &cfg,
                      std::vector<RunResult> *runs_out = nullptr) {
  if (cfg.n_seeds == 0)
    throw ParameterError("n_seeds must be positive");
  struct Job {
    double w;
    std::size_t ch;
    RunKind kind;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (double w : cfg.windows)
    for (auto ch : cfg.channel_counts)
      for (auto k : cfg.kinds)
        for (std::size_t s = 0; s < cfg.n_seeds; ++s)
          jobs.push_back({w, ch, k, s});

  std::vector<RunResult> runs(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        const auto &j = jobs[i];
        runs[i] = run_single(calibration, online, j.w, j.ch, j.kind, j.seed, cfg);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(cfg.threads, 1, jobs.size());
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n_threads; ++t)
      pool.emplace_back(worker);
  }
  for (auto &e : errors)
    if (e)
      std::rethrow_exception(e);

  std::vector<CellResult> cells;
  for (std::size_t i = 0; i < runs.size(); i += cfg.n_seeds) {
    CellResult c{runs[i].window_s, runs[i].channels, runs[i].kind, cfg.n_seeds, 0.0, 0.0};
    for (std::size_t s = 0; s < cfg.n_seeds; ++s) {
      c.mean_accuracy += runs[i + s].metrics.accuracy;
      c.mean_f1 += runs[i + s].metrics.f1;
    }
    c.mean_accuracy /= static_cast<double>(cfg.n_seeds);
    c.mean_f1 /= static_cast<double>(cfg.n_seeds);
    cells.push_back(c);
  }
  if (runs_out)
    *runs_out = std::move(runs);
  return cells;
}

} // namespace corticospike::pipeline
