#pragma once

// Asynchronous delta modulator: turns each channel of a real sequence into
// ON/OFF events from the step-to-step change, plus the threshold search.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "matrix.hpp"
#include "tensor_file.hpp"

namespace corticospike::adm {

struct AdmConfig {
  double threshold = 0.45;
};

struct EventFrame {
  std::vector<std::uint8_t> on;
  std::vector<std::uint8_t> off;
  std::size_t step = 0;

  std::size_t channels() const noexcept { return on.size(); }
  std::size_t event_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < on.size(); ++i)
      n += on[i] + off[i];
    return n;
  }
};

/// delta = x[t] - x[t-1] with x[-1] = 0; ON iff delta > T, OFF iff
/// delta < -T. No reference tracking: every step compares against the
/// previous sample, not the last event.
template <typename Real>
std::vector<EventFrame> adm_encode(const Matrix<Real> &x, double threshold) {
  if (!(threshold > 0.0))
    throw ParameterError("ADM threshold must be > 0");
  for (Real v : x.data())
    if (!std::isfinite(static_cast<double>(v)))
      throw DataError("ADM input contains a non-finite value");
  const std::size_t n = x.rows();
  std::vector<EventFrame> frames(x.cols());
  for (std::size_t t = 0; t < x.cols(); ++t) {
    auto &f = frames[t];
    f.on.assign(n, 0);
    f.off.assign(n, 0);
    f.step = t;
    for (std::size_t c = 0; c < n; ++c) {
      const double prev = t == 0 ? 0.0 : static_cast<double>(x(c, t - 1));
      const double delta = static_cast<double>(x(c, t)) - prev;
      if (delta > threshold)
        f.on[c] = 1;
      else if (delta < -threshold)
        f.off[c] = 1;
    }
  }
  return frames;
}

/// [on || off], length 2N.
template <typename Real = float>
std::vector<Real> concat_on_off(const EventFrame &frame) {
  if (frame.on.size() != frame.off.size())
    throw ShapeError("event frame ON/OFF lengths differ");
  std::vector<Real> v(2 * frame.on.size());
  for (std::size_t i = 0; i < frame.on.size(); ++i) {
    v[i] = static_cast<Real>(frame.on[i]);
    v[frame.on.size() + i] = static_cast<Real>(frame.off[i]);
  }
  return v;
}

/// Events emitted / event slots (2 * N * L).
inline double event_rate(const std::vector<EventFrame> &frames) {
  if (frames.empty())
    throw ParameterError("event_rate of an empty frame list");
  std::size_t events = 0, slots = 0;
  for (const auto &f : frames) {
    events += f.event_count();
    slots += 2 * f.channels();
  }
  return slots == 0 ? 0.0 : static_cast<double>(events) / static_cast<double>(slots);
}

/// 2N x L raster of {0,1}: rows 0..N-1 are ON, rows N..2N-1 are OFF.
inline io::Tensor raster_tensor(const std::vector<EventFrame> &frames) {
  const std::size_t n = frames.empty() ? 0 : frames.front().channels();
  std::vector<std::int16_t> v(2 * n * frames.size(), 0);
  for (std::size_t t = 0; t < frames.size(); ++t)
    for (std::size_t c = 0; c < n; ++c) {
      v[c * frames.size() + t] = frames[t].on[c];
      v[(n + c) * frames.size() + t] = frames[t].off[c];
    }
  return {{static_cast<std::uint32_t>(2 * n),
           static_cast<std::uint32_t>(frames.size())},
          std::move(v)};
}

struct GridPoint {
  double threshold;
  double score;
  double event_rate;
};

struct GridSearchResult {
  double best_threshold;
  std::vector<GridPoint> report;
};

/// Candidate grid 0.10, 0.15, ..., 1.00.
inline std::vector<double> default_grid() {
  std::vector<double> g;
  for (int i = 2; i <= 20; ++i)
    g.push_back(i * 0.05);
  return g;
}

/// Evaluates every candidate and returns the highest-scoring threshold;
/// ties go to the larger (sparser) threshold. The objective returns
/// {score, event_rate} for a threshold.
inline GridSearchResult
grid_search_threshold(const std::vector<double> &candidates,
                      const std::function<GridPoint(double)> &objective) {
  if (candidates.empty())
    throw ParameterError("grid search needs at least one candidate");
  GridSearchResult r{candidates.front(), {}};
  bool have = false;
  double best_score = 0.0;
  for (double t : candidates) {
    GridPoint p = objective(t);
    p.threshold = t;
    r.report.push_back(p);
    if (!have || p.score > best_score ||
        (p.score == best_score && t > r.best_threshold)) {
      have = true;
      best_score = p.score;
      r.best_threshold = t;
    }
  }
  return r;
}

/// Smoke-test objective: 1 when the event rate lies in [0.02, 0.25], else
/// minus the distance to that band.
inline double proxy_score(double rate) {
  if (rate < 0.02)
    return rate - 0.02;
  if (rate > 0.25)
    return 0.25 - rate;
  return 1.0;
}

} // namespace corticospike::adm
