#pragma once

// Layers, losses and the optimizer for the two fixed architectures. Every
// backward pass is derived by hand; there is no autodiff graph. Templated on
// the scalar type so gradient checks can run in double while training runs
// in float.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "matrix.hpp"

namespace corticospike::nn {

inline constexpr std::size_t kKernel = 64;

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
template <typename Real, typename Rng>
void glorot_uniform(std::span<Real> w, std::size_t fan_in, std::size_t fan_out,
                    Rng &rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  for (auto &x : w)
    x = static_cast<Real>(u(rng));
}

// ---------------------------------------------------------------- conv1d

template <typename Real> struct Conv1dLayer {
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  std::size_t kernel = kKernel;
  std::size_t stride = kKernel;
  std::vector<Real> weights; ///< out_ch x in_ch x kernel
  std::vector<Real> bias;    ///< out_ch

  Conv1dLayer() = default;
  Conv1dLayer(std::size_t in, std::size_t out, std::size_t k = kKernel,
              std::size_t s = kKernel)
      : in_ch(in), out_ch(out), kernel(k), stride(s), weights(out * in * k),
        bias(out) {
    if (k == 0 || s == 0)
      throw ParameterError("conv kernel and stride must be positive");
  }

  Real &w(std::size_t o, std::size_t i, std::size_t k) {
    return weights[(o * in_ch + i) * kernel + k];
  }
  Real w(std::size_t o, std::size_t i, std::size_t k) const {
    return weights[(o * in_ch + i) * kernel + k];
  }

  std::size_t output_length(std::size_t t) const {
    if (t < kernel)
      throw ShapeError("input length " + std::to_string(t) +
                       " shorter than kernel " + std::to_string(kernel));
    return (t - kernel) / stride + 1;
  }

  template <typename Rng> void init(Rng &rng) {
    glorot_uniform<Real>(weights, in_ch * kernel, out_ch * kernel, rng);
    std::fill(bias.begin(), bias.end(), Real{0});
  }
};

/// Valid cross-correlation plus bias, no activation. Each output sums over
/// input channels (outer) and kernel taps (inner) into one accumulator, then
/// adds the bias.
template <typename Real>
Matrix<Real> conv1d_forward(const Conv1dLayer<Real> &layer,
                            const Matrix<Real> &input) {
  if (input.rows() != layer.in_ch)
    throw ShapeError("conv input has " + std::to_string(input.rows()) +
                     " channels, layer expects " + std::to_string(layer.in_ch));
  const std::size_t len = layer.output_length(input.cols());
  Matrix<Real> out(layer.out_ch, len);
  for (std::size_t o = 0; o < layer.out_ch; ++o) {
    for (std::size_t p = 0; p < len; ++p) {
      const std::size_t start = p * layer.stride;
      Real acc = 0;
      for (std::size_t i = 0; i < layer.in_ch; ++i) {
        const Real *x = input.data().data() + i * input.cols() + start;
        const Real *w = layer.weights.data() + (o * layer.in_ch + i) * layer.kernel;
        for (std::size_t k = 0; k < layer.kernel; ++k)
          acc += w[k] * x[k];
      }
      out(o, p) = acc + layer.bias[o];
    }
  }
  return out;
}

template <typename Real> struct Conv1dGrads {
  Matrix<Real> input;
  std::vector<Real> weights;
  std::vector<Real> bias;
};

/// Exact gradients of conv1d_forward. The input gradient is skipped (left
/// empty) when need_input is false.
template <typename Real>
Conv1dGrads<Real> conv1d_backward(const Conv1dLayer<Real> &layer,
                                  const Matrix<Real> &input,
                                  const Matrix<Real> &grad_out,
                                  bool need_input = true) {
  if (input.rows() != layer.in_ch)
    throw ShapeError("conv backward: input channel mismatch");
  const std::size_t len = layer.output_length(input.cols());
  if (grad_out.rows() != layer.out_ch || grad_out.cols() != len)
    throw ShapeError("conv backward: grad_out must be " +
                     std::to_string(layer.out_ch) + "x" + std::to_string(len));
  Conv1dGrads<Real> g;
  g.weights.assign(layer.weights.size(), Real{0});
  g.bias.assign(layer.out_ch, Real{0});
  if (need_input)
    g.input = Matrix<Real>(input.rows(), input.cols());
  for (std::size_t o = 0; o < layer.out_ch; ++o) {
    for (std::size_t p = 0; p < len; ++p) {
      const Real go = grad_out(o, p);
      g.bias[o] += go;
      if (go == Real{0})
        continue;
      const std::size_t start = p * layer.stride;
      for (std::size_t i = 0; i < layer.in_ch; ++i) {
        const Real *x = input.data().data() + i * input.cols() + start;
        Real *gw = g.weights.data() + (o * layer.in_ch + i) * layer.kernel;
        for (std::size_t k = 0; k < layer.kernel; ++k)
          gw[k] += go * x[k];
        if (need_input) {
          const Real *w = layer.weights.data() + (o * layer.in_ch + i) * layer.kernel;
          Real *gx = g.input.data().data() + i * input.cols() + start;
          for (std::size_t k = 0; k < layer.kernel; ++k)
            gx[k] += go * w[k];
        }
      }
    }
  }
  return g;
}

// ------------------------------------------------------------ batch norm

enum class Mode { train, eval };

template <typename Real> struct BatchNorm1d {
  std::size_t channels = 0;
  std::vector<Real> gamma, beta;
  std::vector<Real> running_mean, running_var;
  Real eps = Real(1e-5);
  Real momentum = Real(0.1);
  Mode mode = Mode::train;

  BatchNorm1d() = default;
  explicit BatchNorm1d(std::size_t c)
      : channels(c), gamma(c, Real{1}), beta(c, Real{0}),
        running_mean(c, Real{0}), running_var(c, Real{1}) {}

  /// Stored per-channel values: gamma, beta, running mean, running var.
  std::size_t parameter_count() const { return 4 * channels; }
};

template <typename Real> struct BatchNormCache {
  std::vector<Matrix<Real>> normalized; ///< x-hat per batch element
  std::vector<Real> inv_std;
  Mode mode = Mode::train;
};

/// Normalises a batch of channels x L maps. Train mode uses the statistics
/// of the whole batch (over batch and time per channel) and updates the
/// running estimates; eval mode uses the running estimates.
template <typename Real>
std::vector<Matrix<Real>> batchnorm_forward(BatchNorm1d<Real> &bn,
                                            const std::vector<Matrix<Real>> &batch,
                                            BatchNormCache<Real> *cache = nullptr) {
  if (batch.empty())
    throw ShapeError("batch norm on empty batch");
  const std::size_t len = batch.front().cols();
  for (const auto &x : batch)
    if (x.rows() != bn.channels || x.cols() != len)
      throw ShapeError("batch norm input shape mismatch");
  const std::size_t count = batch.size() * len;

  std::vector<Real> mean(bn.channels), inv_std(bn.channels);
  if (bn.mode == Mode::train) {
    if (count < 2)
      throw ShapeError("batch norm in train mode needs batch*L >= 2");
    for (std::size_t c = 0; c < bn.channels; ++c) {
      double s = 0.0;
      for (const auto &x : batch)
        for (Real v : x.row(c))
          s += v;
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (const auto &x : batch)
        for (Real v : x.row(c))
          ss += (v - mu) * (v - mu);
      const double var = ss / static_cast<double>(count);
      mean[c] = static_cast<Real>(mu);
      inv_std[c] = static_cast<Real>(1.0 / std::sqrt(var + static_cast<double>(bn.eps)));
      const double unbiased = ss / static_cast<double>(count - 1);
      bn.running_mean[c] = static_cast<Real>((1.0 - bn.momentum) * bn.running_mean[c] +
                                             bn.momentum * mu);
      bn.running_var[c] = static_cast<Real>((1.0 - bn.momentum) * bn.running_var[c] +
                                            bn.momentum * unbiased);
    }
  } else {
    for (std::size_t c = 0; c < bn.channels; ++c) {
      mean[c] = bn.running_mean[c];
      inv_std[c] = static_cast<Real>(
          1.0 / std::sqrt(std::max<double>(bn.running_var[c], 0.0) + bn.eps));
    }
  }

  std::vector<Matrix<Real>> out;
  out.reserve(batch.size());
  if (cache) {
    cache->normalized.clear();
    cache->inv_std = inv_std;
    cache->mode = bn.mode;
  }
  for (const auto &x : batch) {
    Matrix<Real> xh(bn.channels, len), y(bn.channels, len);
    for (std::size_t c = 0; c < bn.channels; ++c)
      for (std::size_t t = 0; t < len; ++t) {
        xh(c, t) = (x(c, t) - mean[c]) * inv_std[c];
        y(c, t) = bn.gamma[c] * xh(c, t) + bn.beta[c];
      }
    if (cache)
      cache->normalized.push_back(std::move(xh));
    out.push_back(std::move(y));
  }
  return out;
}

template <typename Real> struct BatchNormGrads {
  std::vector<Matrix<Real>> input;
  std::vector<Real> gamma, beta;
};

template <typename Real>
BatchNormGrads<Real> batchnorm_backward(const BatchNorm1d<Real> &bn,
                                        const BatchNormCache<Real> &cache,
                                        const std::vector<Matrix<Real>> &grad_out) {
  if (grad_out.size() != cache.normalized.size())
    throw ShapeError("batch norm backward: batch size mismatch");
  const std::size_t len = grad_out.empty() ? 0 : grad_out.front().cols();
  const double count = static_cast<double>(grad_out.size() * len);
  BatchNormGrads<Real> g;
  g.gamma.assign(bn.channels, Real{0});
  g.beta.assign(bn.channels, Real{0});
  std::vector<double> sum_dxh(bn.channels, 0.0), sum_dxh_xh(bn.channels, 0.0);
  for (std::size_t b = 0; b < grad_out.size(); ++b)
    for (std::size_t c = 0; c < bn.channels; ++c)
      for (std::size_t t = 0; t < len; ++t) {
        const Real go = grad_out[b](c, t);
        const Real xh = cache.normalized[b](c, t);
        g.gamma[c] += go * xh;
        g.beta[c] += go;
        const double dxh = static_cast<double>(go) * bn.gamma[c];
        sum_dxh[c] += dxh;
        sum_dxh_xh[c] += dxh * xh;
      }
  g.input.reserve(grad_out.size());
  for (std::size_t b = 0; b < grad_out.size(); ++b) {
    Matrix<Real> gi(bn.channels, len);
    for (std::size_t c = 0; c < bn.channels; ++c)
      for (std::size_t t = 0; t < len; ++t) {
        const double dxh = static_cast<double>(grad_out[b](c, t)) * bn.gamma[c];
        if (cache.mode == Mode::eval) {
          gi(c, t) = static_cast<Real>(dxh * cache.inv_std[c]);
        } else {
          const double xh = cache.normalized[b](c, t);
          gi(c, t) = static_cast<Real>(cache.inv_std[c] / count *
                                       (count * dxh - sum_dxh[c] - xh * sum_dxh_xh[c]));
        }
      }
    g.input.push_back(std::move(gi));
  }
  return g;
}

// ---------------------------------------------------------------- pooling

/// Per-channel mean over all positions.
template <typename Real> std::vector<Real> avgpool_global(const Matrix<Real> &x) {
  if (x.cols() == 0)
    throw ShapeError("avgpool_global needs at least one position");
  std::vector<Real> out(x.rows());
  for (std::size_t c = 0; c < x.rows(); ++c) {
    Real s = 0;
    for (Real v : x.row(c))
      s += v;
    out[c] = s / static_cast<Real>(x.cols());
  }
  return out;
}

template <typename Real>
Matrix<Real> avgpool_global_backward(std::span<const Real> grad_out,
                                     std::size_t len) {
  Matrix<Real> g(grad_out.size(), len);
  for (std::size_t c = 0; c < grad_out.size(); ++c)
    for (std::size_t t = 0; t < len; ++t)
      g(c, t) = grad_out[c] / static_cast<Real>(len);
  return g;
}

// ------------------------------------------------------------------ dense

enum class Activation { none, relu, softmax };

template <typename Real> struct DenseLayer {
  std::size_t in = 0, out = 0;
  std::vector<Real> weights; ///< out x in
  std::vector<Real> bias;
  Activation activation = Activation::none;

  DenseLayer() = default;
  DenseLayer(std::size_t i, std::size_t o, Activation a = Activation::none)
      : in(i), out(o), weights(i * o), bias(o), activation(a) {}

  template <typename Rng> void init(Rng &rng) {
    glorot_uniform<Real>(weights, in, out, rng);
    std::fill(bias.begin(), bias.end(), Real{0});
  }
};

/// W x + b (pre-activation).
template <typename Real>
std::vector<Real> dense_affine(const DenseLayer<Real> &layer,
                               std::span<const Real> x) {
  if (x.size() != layer.in)
    throw ShapeError("dense input length " + std::to_string(x.size()) +
                     " != " + std::to_string(layer.in));
  std::vector<Real> z(layer.out);
  for (std::size_t o = 0; o < layer.out; ++o) {
    Real acc = 0;
    const Real *w = layer.weights.data() + o * layer.in;
    for (std::size_t i = 0; i < layer.in; ++i)
      acc += w[i] * x[i];
    z[o] = acc + layer.bias[o];
  }
  return z;
}

template <typename Real> std::vector<Real> relu(std::span<const Real> z) {
  std::vector<Real> a(z.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    a[i] = z[i] > Real{0} ? z[i] : Real{0};
  return a;
}

template <typename Real> Real relu(Real z) { return z > Real{0} ? z : Real{0}; }

template <typename Real> std::vector<Real> softmax(std::span<const Real> z) {
  if (z.empty())
    throw ShapeError("softmax of empty vector");
  const Real peak = *std::max_element(z.begin(), z.end());
  std::vector<Real> p(z.size());
  Real sum = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - peak);
    sum += p[i];
  }
  for (auto &v : p)
    v /= sum;
  return p;
}

/// Forward including the layer's activation.
template <typename Real>
std::vector<Real> dense_forward(const DenseLayer<Real> &layer,
                                std::span<const Real> x) {
  auto z = dense_affine(layer, x);
  switch (layer.activation) {
  case Activation::relu:
    return relu<Real>(z);
  case Activation::softmax:
    return softmax<Real>(z);
  case Activation::none:
    break;
  }
  return z;
}

template <typename Real> struct DenseGrads {
  std::vector<Real> input;
  std::vector<Real> weights;
  std::vector<Real> bias;
};

/// Gradients of the affine map given dL/dz (the pre-activation gradient).
template <typename Real>
DenseGrads<Real> dense_backward(const DenseLayer<Real> &layer,
                                std::span<const Real> x,
                                std::span<const Real> grad_z) {
  if (x.size() != layer.in || grad_z.size() != layer.out)
    throw ShapeError("dense backward shape mismatch");
  DenseGrads<Real> g{std::vector<Real>(layer.in, Real{0}),
                     std::vector<Real>(layer.weights.size()),
                     std::vector<Real>(grad_z.begin(), grad_z.end())};
  for (std::size_t o = 0; o < layer.out; ++o) {
    const Real *w = layer.weights.data() + o * layer.in;
    Real *gw = g.weights.data() + o * layer.in;
    for (std::size_t i = 0; i < layer.in; ++i) {
      gw[i] = grad_z[o] * x[i];
      g.input[i] += grad_z[o] * w[i];
    }
  }
  return g;
}

/// dL/dz for z -> relu(z) given dL/da.
template <typename Real>
std::vector<Real> relu_backward(std::span<const Real> z, std::span<const Real> grad_a) {
  std::vector<Real> g(z.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    g[i] = z[i] > Real{0} ? grad_a[i] : Real{0};
  return g;
}

// ----------------------------------------------------------------- losses

inline constexpr double kProbabilityFloor = 1e-12;

/// -ln p[target], with p[target] floored at 1e-12.
template <typename Real>
Real cross_entropy(std::span<const Real> probs, std::size_t target) {
  if (target >= probs.size())
    throw ShapeError("target class out of range");
  double sum = 0.0;
  for (Real p : probs)
    sum += p;
  if (std::abs(sum - 1.0) > 1e-5)
    throw ParameterError("probabilities must sum to 1");
  return static_cast<Real>(
      -std::log(std::max<double>(probs[target], kProbabilityFloor)));
}

/// Mean cross entropy over a batch.
template <typename Real>
Real cross_entropy_batch(const std::vector<std::vector<Real>> &probs,
                         std::span<const std::size_t> targets) {
  if (probs.size() != targets.size() || probs.empty())
    throw ShapeError("cross entropy batch size mismatch");
  double s = 0.0;
  for (std::size_t b = 0; b < probs.size(); ++b)
    s += cross_entropy<Real>(probs[b], targets[b]);
  return static_cast<Real>(s / static_cast<double>(probs.size()));
}

/// dL/dz of cross_entropy(softmax(z)) = p - onehot(target).
template <typename Real>
std::vector<Real> softmax_cross_entropy_grad(std::span<const Real> probs,
                                             std::size_t target) {
  std::vector<Real> g(probs.begin(), probs.end());
  g[target] -= Real{1};
  return g;
}

struct LossConfig {
  double lasso_lambda = 0.0;
};

/// lambda * sum |w| over every weight tensor (biases are not passed in).
template <typename Real>
double l1_penalty(const std::vector<std::span<const Real>> &weights,
                  double lambda) {
  if (lambda < 0.0)
    throw ParameterError("lasso lambda must be >= 0");
  if (lambda == 0.0)
    return 0.0;
  double s = 0.0;
  for (auto w : weights)
    for (Real v : w)
      s += std::abs(static_cast<double>(v));
  return lambda * s;
}

/// Adds lambda * sign(w) to the gradient (subgradient 0 at w == 0).
template <typename Real>
void add_l1_subgradient(std::span<const Real> w, std::span<Real> grad,
                        double lambda) {
  if (lambda == 0.0)
    return;
  const auto l = static_cast<Real>(lambda);
  for (std::size_t i = 0; i < w.size(); ++i)
    grad[i] += w[i] > Real{0} ? l : (w[i] < Real{0} ? -l : Real{0});
}

// -------------------------------------------------------------- optimizer

template <typename Real> struct ParamRef {
  std::string name;
  std::span<Real> value;
  std::span<Real> grad;
  bool is_weight = true; ///< false for biases and normalisation shifts
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Real> struct AdamState {
  AdamConfig cfg;
  std::vector<std::vector<Real>> m, v;
  std::uint64_t step = 0;

  AdamState() = default;
  explicit AdamState(AdamConfig c) : cfg(c) {}
};

/// One bias-corrected ADAM update over every parameter. Throws
/// TrainingError naming the first parameter with a non-finite gradient,
/// before anything is modified.
template <typename Real>
void adam_step(AdamState<Real> &state, const std::vector<ParamRef<Real>> &params) {
  for (const auto &p : params) {
    if (p.value.size() != p.grad.size())
      throw ShapeError("parameter " + p.name + " and its gradient differ in size");
    for (Real g : p.grad)
      if (!std::isfinite(g))
        throw TrainingError("non-finite gradient in parameter '" + p.name + "'");
  }
  if (state.m.empty()) {
    for (const auto &p : params) {
      state.m.emplace_back(p.value.size(), Real{0});
      state.v.emplace_back(p.value.size(), Real{0});
    }
  }
  if (state.m.size() != params.size())
    throw ShapeError("optimizer state does not match parameter list");
  ++state.step;
  const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto &m = state.m[k];
    auto &v = state.v[k];
    const auto &p = params[k];
    if (m.size() != p.value.size())
      throw ShapeError("optimizer moment shape mismatch for " + p.name);
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = p.grad[i];
      const double mi = b1 * m[i] + (1.0 - b1) * g;
      const double vi = b2 * v[i] + (1.0 - b2) * g * g;
      m[i] = static_cast<Real>(mi);
      v[i] = static_cast<Real>(vi);
      const double update = state.cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + state.cfg.eps);
      p.value[i] = static_cast<Real>(p.value[i] - update);
    }
  }
}

} // namespace corticospike::nn
