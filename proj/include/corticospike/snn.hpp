#pragma once

// Leaky integrate-and-fire layers driven by ADM event frames, and the
// soft-LIF rate surrogate used to train them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "adm.hpp"
#include "errors.hpp"
#include "neuralcore.hpp"

namespace corticospike::snn {

/// All times in seconds.
struct LifParams {
  double tau_rc = 0.020;
  double v_threshold = 1.0;
  double v_reset = 0.0;
  double t_ref = 0.002;
  double dt = 0.25; ///< conv stride / 256 for conv-rate steps

  static LifParams for_stride(std::size_t stride) {
    LifParams p;
    p.dt = static_cast<double>(stride) / 256.0;
    return p;
  }
};

inline void validate(const LifParams &p) {
  if (!(p.tau_rc > 0.0))
    throw ParameterError("tau_rc must be > 0");
  if (!(p.t_ref >= 0.0))
    throw ParameterError("t_ref must be >= 0");
  if (!(p.v_threshold > p.v_reset))
    throw ParameterError("v_threshold must exceed v_reset");
  if (!(p.dt > 0.0))
    throw ParameterError("dt must be > 0");
}

template <typename Real> struct LifLayerState {
  std::vector<Real> v;
  std::vector<double> refractory_remaining; ///< seconds

  LifLayerState() = default;
  explicit LifLayerState(std::size_t n, Real v0 = Real{0})
      : v(n, v0), refractory_remaining(n, 0.0) {}
};

template <typename Real> struct LifStepResult {
  std::vector<std::uint8_t> spikes;
  std::vector<Real> candidate; ///< pre-reset voltage of this step
};

/// One exponential-Euler step toward the input current:
///   v <- J + (v - J) * exp(-dt_eff / tau_rc)
/// where dt_eff is the part of the step not spent refractory. A neuron
/// whose remaining refractory time covers the whole step is held at reset.
template <typename Real>
LifStepResult<Real> lif_step(LifLayerState<Real> &state, std::span<const Real> current,
                             const LifParams &p) {
  if (current.size() != state.v.size())
    throw ShapeError("lif_step: current length does not match layer size");
  LifStepResult<Real> r{std::vector<std::uint8_t>(current.size(), 0),
                        std::vector<Real>(current.size())};
  for (std::size_t i = 0; i < current.size(); ++i) {
    const double j = current[i];
    if (!std::isfinite(j))
      throw DataError("lif_step: non-finite input current");
    double &ref = state.refractory_remaining[i];
    double v = state.v[i];
    if (ref >= p.dt) {
      ref -= p.dt;
      v = p.v_reset;
    } else {
      const double active = p.dt - std::max(ref, 0.0);
      ref = 0.0;
      v = j + (v - j) * std::exp(-active / p.tau_rc);
    }
    r.candidate[i] = static_cast<Real>(v);
    if (v > p.v_threshold) {
      r.spikes[i] = 1;
      v = p.v_reset;
      ref = p.t_ref;
    }
    state.v[i] = static_cast<Real>(v);
  }
  return r;
}

/// Closed-form firing rate (Hz) for a constant current.
inline double analytic_lif_rate(double j, const LifParams &p) {
  if (j <= p.v_threshold)
    return 0.0;
  return 1.0 / (p.t_ref + p.tau_rc * std::log(j / (j - p.v_threshold)));
}

struct SoftLifConfig {
  double gamma = 0.02;
  /// Rate-to-activation scale; 0 selects 1 / (max analytic rate) = t_ref.
  double amplitude = 0.0;
};

inline double activation_scale(const SoftLifConfig &c, const LifParams &p) {
  if (c.amplitude > 0.0)
    return c.amplitude;
  return p.t_ref > 0.0 ? p.t_ref : p.tau_rc;
}

struct SoftRate {
  double rate;       ///< Hz
  double derivative; ///< d rate / dJ
};

/// Smoothed LIF rate: the firing condition max(J - v_th, 0) is replaced
/// by softplus_gamma(J - v_th) = gamma * ln(1 + exp((J - v_th)/gamma)).
inline SoftRate soft_lif_rate(double j, const SoftLifConfig &cfg, const LifParams &p) {
  if (!(cfg.gamma > 0.0))
    throw ParameterError("soft-LIF gamma must be > 0");
  const double z = (j - p.v_threshold) / cfg.gamma;
  // Below this point 1 + exp(z) == 1 in double precision: the smoothed
  // firing condition is zero and the neuron is silent.
  if (std::exp(z) < std::numeric_limits<double>::epsilon())
    return {0.0, 0.0};
  // Numerically stable softplus and its derivative (the logistic).
  const double sp = z > 30.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
  const double rho = cfg.gamma * sp;
  if (!(rho > 0.0))
    return {0.0, 0.0};
  const double sig = z >= 0 ? 1.0 / (1.0 + std::exp(-z))
                            : std::exp(z) / (1.0 + std::exp(z));
  const double vth = p.v_threshold - p.v_reset;
  const double denom = p.t_ref + p.tau_rc * std::log1p(vth / rho);
  const double rate = 1.0 / denom;
  const double deriv = p.tau_rc * vth * sig / (denom * denom * rho * (rho + vth));
  if (!std::isfinite(rate) || !std::isfinite(deriv))
    return {0.0, 0.0};
  return {rate, deriv};
}

template <typename Real> struct SpikingDense {
  std::size_t in = 0, out = 0;
  std::vector<Real> weights; ///< out x in
  std::vector<Real> bias;

  SpikingDense() = default;
  SpikingDense(std::size_t i, std::size_t o) : in(i), out(o), weights(i * o), bias(o) {}

  /// Glorot weights; biases start at bias0 (the firing threshold by
  /// default, so that the surrogate gradient is alive at initialisation).
  template <typename Rng> void init(Rng &rng, Real bias0) {
    nn::glorot_uniform<Real>(weights, in, out, rng);
    std::fill(bias.begin(), bias.end(), bias0);
  }
};

/// J = W * events + bias, accumulating only the columns of active inputs in
/// ascending index order, then adding the bias.
template <typename Real>
std::vector<Real> spiking_dense_forward(const SpikingDense<Real> &layer,
                                        std::span<const Real> events) {
  if (events.size() != layer.in)
    throw ShapeError("spiking layer expects " + std::to_string(layer.in) +
                     " inputs, got " + std::to_string(events.size()));
  std::vector<Real> acc(layer.out, Real{0});
  for (std::size_t k = 0; k < layer.in; ++k) {
    if (events[k] == Real{0})
      continue;
    for (std::size_t o = 0; o < layer.out; ++o)
      acc[o] += layer.weights[o * layer.in + k];
  }
  for (std::size_t o = 0; o < layer.out; ++o)
    acc[o] += layer.bias[o];
  return acc;
}

template <typename Real> struct SnnModel {
  SpikingDense<Real> l1; ///< 2N -> hidden
  SpikingDense<Real> l2; ///< hidden -> 2
  LifParams lif;
};

template <typename Real> struct StepTrace {
  std::size_t step = 0;
  std::size_t decision = 0;
  Real v0 = 0, v1 = 0;
  std::vector<std::uint8_t> output_spikes;
  std::vector<std::uint8_t> hidden_spikes;
};

template <typename Real> struct SequenceResult {
  std::vector<StepTrace<Real>> steps;
  std::size_t decision = 0; ///< 0 = F, 1 = M; from the last step
  std::size_t synaptic_events = 0;
};

/// Class at one step: the single spiking output neuron, otherwise the
/// argmax of the pre-reset voltages (ties to index 0).
template <typename Real>
std::size_t step_decision(std::span<const std::uint8_t> spikes,
                          std::span<const Real> candidate) {
  const std::size_t n_spiking =
      static_cast<std::size_t>(std::count(spikes.begin(), spikes.end(), 1));
  if (n_spiking == 1)
    return static_cast<std::size_t>(std::find(spikes.begin(), spikes.end(), 1) -
                                    spikes.begin());
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidate.size(); ++i)
    if (candidate[i] > candidate[best])
      best = i;
  return best;
}

/// Runs the spiking network over a sequence from a reset state.
template <typename Real>
SequenceResult<Real> snn_forward_sequence(const SnnModel<Real> &model,
                                          const std::vector<adm::EventFrame> &frames) {
  if (frames.empty())
    throw ParameterError("snn_forward_sequence needs at least one frame");
  validate(model.lif);
  LifLayerState<Real> s1(model.l1.out, static_cast<Real>(model.lif.v_reset));
  LifLayerState<Real> s2(model.l2.out, static_cast<Real>(model.lif.v_reset));
  SequenceResult<Real> result;
  for (const auto &frame : frames) {
    const auto input = adm::concat_on_off<Real>(frame);
    result.synaptic_events += frame.event_count();
    const auto j1 = spiking_dense_forward<Real>(model.l1, input);
    auto r1 = lif_step<Real>(s1, j1, model.lif);
    std::vector<Real> hidden(r1.spikes.begin(), r1.spikes.end());
    result.synaptic_events +=
        static_cast<std::size_t>(std::count(r1.spikes.begin(), r1.spikes.end(), 1));
    const auto j2 = spiking_dense_forward<Real>(model.l2, hidden);
    auto r2 = lif_step<Real>(s2, j2, model.lif);

    StepTrace<Real> tr;
    tr.step = frame.step;
    tr.decision = step_decision<Real>(r2.spikes, r2.candidate);
    tr.v0 = r2.candidate.size() > 0 ? r2.candidate[0] : Real{0};
    tr.v1 = r2.candidate.size() > 1 ? r2.candidate[1] : Real{0};
    tr.output_spikes = std::move(r2.spikes);
    tr.hidden_spikes = std::move(r1.spikes);
    result.steps.push_back(std::move(tr));
  }
  result.decision = result.steps.back().decision;
  return result;
}

// ------------------------------------------------------ surrogate training

struct EventSample {
  std::vector<adm::EventFrame> frames;
  std::size_t label = 0;
};

struct SnnTrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  nn::AdamConfig adam;
  SoftLifConfig soft;
  bool per_step_loss = false; ///< average the loss over every step
  std::uint64_t seed = 0;
};

struct EpochLog {
  std::size_t epoch;
  double loss;
  double train_accuracy;
  double val_accuracy;
};

template <typename Real>
double snn_accuracy(const SnnModel<Real> &model, const std::vector<EventSample> &data) {
  if (data.empty())
    return 0.0;
  std::size_t correct = 0;
  for (const auto &s : data)
    correct += snn_forward_sequence(model, s.frames).decision == s.label;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

namespace detail {
// Rate-mode forward/backward through both layers for one frame; returns the
// loss and accumulates parameter gradients scaled by `weight`.
template <typename Real>
double rate_frame_step(const SnnModel<Real> &m, const adm::EventFrame &frame,
                       std::size_t label, const SoftLifConfig &soft, double weight,
                       std::vector<Real> &gw1, std::vector<Real> &gb1,
                       std::vector<Real> &gw2, std::vector<Real> &gb2) {
  const double amp = activation_scale(soft, m.lif);
  const auto e = adm::concat_on_off<Real>(frame);
  const auto j1 = spiking_dense_forward<Real>(m.l1, e);
  std::vector<Real> a1(j1.size());
  std::vector<double> d1(j1.size());
  for (std::size_t i = 0; i < j1.size(); ++i) {
    const auto s = soft_lif_rate(j1[i], soft, m.lif);
    a1[i] = static_cast<Real>(amp * s.rate);
    d1[i] = amp * s.derivative;
  }
  std::vector<Real> j2(m.l2.out);
  for (std::size_t o = 0; o < m.l2.out; ++o) {
    Real acc = 0;
    for (std::size_t i = 0; i < m.l2.in; ++i)
      acc += m.l2.weights[o * m.l2.in + i] * a1[i];
    j2[o] = acc + m.l2.bias[o];
  }
  std::vector<Real> a2(j2.size());
  std::vector<double> d2(j2.size());
  for (std::size_t o = 0; o < j2.size(); ++o) {
    const auto s = soft_lif_rate(j2[o], soft, m.lif);
    a2[o] = static_cast<Real>(amp * s.rate);
    d2[o] = amp * s.derivative;
  }
  const auto p = nn::softmax<Real>(a2);
  const double loss = nn::cross_entropy<Real>(p, label);
  auto g = nn::softmax_cross_entropy_grad<Real>(p, label);

  std::vector<Real> dj2(j2.size());
  for (std::size_t o = 0; o < j2.size(); ++o)
    dj2[o] = static_cast<Real>(weight * g[o] * d2[o]);
  std::vector<Real> da1(a1.size(), Real{0});
  for (std::size_t o = 0; o < m.l2.out; ++o) {
    gb2[o] += dj2[o];
    for (std::size_t i = 0; i < m.l2.in; ++i) {
      gw2[o * m.l2.in + i] += dj2[o] * a1[i];
      da1[i] += dj2[o] * m.l2.weights[o * m.l2.in + i];
    }
  }
  for (std::size_t i = 0; i < m.l1.out; ++i) {
    const Real dj1 = static_cast<Real>(da1[i] * d1[i]);
    if (dj1 == Real{0})
      continue;
    gb1[i] += dj1;
    for (std::size_t k = 0; k < m.l1.in; ++k)
      if (e[k] != Real{0})
        gw1[i * m.l1.in + k] += dj1;
  }
  return loss;
}
} // namespace detail

/// Surrogate-gradient training: soft-LIF rate units replace the spiking
/// neurons (state-free, one pass per step) and the loss is the cross
/// entropy of softmax(final-step output rates). Accuracy is always
/// measured with the spiking network. With a validation set the weights
/// of the best validation epoch are kept (ties to the earlier epoch).
template <typename Real>
SnnModel<Real> train_snn(SnnModel<Real> model, const std::vector<EventSample> &train,
                         const std::vector<EventSample> &val, const SnnTrainConfig &cfg,
                         const std::function<void(const EpochLog &)> &on_epoch = {}) {
  if (train.empty())
    throw ParameterError("train_snn needs training samples");
  validate(model.lif);
  nn::AdamState<Real> opt(cfg.adam);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  SnnModel<Real> best = model;
  double best_val = -1.0;
  std::vector<Real> gw1(model.l1.weights.size()), gb1(model.l1.out),
      gw2(model.l2.weights.size()), gb2(model.l2.out);
  const std::size_t batch = std::max<std::size_t>(1, cfg.batch_size);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
      const std::size_t b1 = std::min(order.size(), b0 + batch);
      std::fill(gw1.begin(), gw1.end(), Real{0});
      std::fill(gb1.begin(), gb1.end(), Real{0});
      std::fill(gw2.begin(), gw2.end(), Real{0});
      std::fill(gb2.begin(), gb2.end(), Real{0});
      const double per_sample = 1.0 / static_cast<double>(b1 - b0);
      for (std::size_t b = b0; b < b1; ++b) {
        const auto &s = train[order[b]];
        if (s.frames.empty())
          throw ParameterError("training sample without frames");
        if (cfg.per_step_loss) {
          const double w = per_sample / static_cast<double>(s.frames.size());
          for (const auto &f : s.frames)
            loss_sum += w / per_sample *
                        detail::rate_frame_step(model, f, s.label, cfg.soft, w, gw1,
                                                gb1, gw2, gb2);
        } else {
          loss_sum += detail::rate_frame_step(model, s.frames.back(), s.label,
                                              cfg.soft, per_sample, gw1, gb1, gw2, gb2);
        }
      }
      nn::adam_step<Real>(opt, {{"snn.l1.weight", model.l1.weights, gw1, true},
                                {"snn.l1.bias", model.l1.bias, gb1, false},
                                {"snn.l2.weight", model.l2.weights, gw2, true},
                                {"snn.l2.bias", model.l2.bias, gb2, false}});
    }
    const double loss = loss_sum / static_cast<double>(train.size());
    if (!std::isfinite(loss))
      throw TrainingError("non-finite loss in SNN training at epoch " +
                          std::to_string(epoch));
    const double train_acc = snn_accuracy(model, train);
    const double val_acc = val.empty() ? train_acc : snn_accuracy(model, val);
    if (on_epoch)
      on_epoch({epoch, loss, train_acc, val_acc});
    if (val_acc > best_val) {
      best_val = val_acc;
      best = model;
    }
  }
  return best;
}

} // namespace corticospike::snn
