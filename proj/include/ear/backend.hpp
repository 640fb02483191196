#pragma once

// "Blob world": the synthetic differentiable generation backend. Each
// prompt token owns four latent slots (center-x, center-y, log-scale,
// amplitude-logit) and renders to a Gaussian blob on the attention grid.
// Maps sharpen as the timestep decreases, and a step nudges amplitude
// logits toward their sign so presence decisions commit over the rollout.

#include "ear/attention.hpp"
#include "ear/losses.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace ear {

struct Latent {
  std::vector<double> values;

  static constexpr int kSlotsPerToken = 4;

  int token_count() const {
    return static_cast<int>(values.size()) / kSlotsPerToken;
  }
  double& slot(int token, int s) { return values[token * kSlotsPerToken + s]; }
  double slot(int token, int s) const {
    return values[token * kSlotsPerToken + s];
  }

  bool finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

struct StepResult {
  Latent next_latent;
  AttentionStack attention;
};

// Cotangent of a scalar w.r.t. a StepResult. Either part may be empty.
struct StepCotangent {
  std::vector<double> d_next_latent;
  StackGrad d_attention;
};

struct BlobTruth {
  double center_x = 0, center_y = 0;
  double scale = 1.0;       // base scale, before the timestep factor
  double amplitude = 0.5;   // in (0,1)
};

struct SceneTruth {
  std::vector<BlobTruth> blobs;
};

// When gradients flow through a step, max-min normalization uses
// log-sum-exp smoothing so the derivative is defined at ties.
enum class StepMode { Exact, Smooth };

class BlobBackend {
 public:
  explicit BlobBackend(int grid = 16, int total_steps = 50,
                       double smooth_temperature = 0.01)
      : grid_(grid), total_steps_(total_steps), temp_(smooth_temperature) {}

  int grid() const { return grid_; }
  int total_steps() const { return total_steps_; }

  // Deterministic pseudo-random latent; same seed gives the same bits.
  Latent init_latent(uint64_t seed, int token_count) const {
    if (token_count < 1)
      throw std::invalid_argument("init_latent: token_count must be >= 1");
    std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull);
    auto uniform = [&](double lo, double hi) {
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      return lo + u * (hi - lo);
    };
    Latent z;
    z.values.reserve(static_cast<size_t>(token_count) * Latent::kSlotsPerToken);
    for (int i = 0; i < token_count; ++i) {
      z.values.push_back(uniform(2.0, grid_ - 3.0));          // center-x
      z.values.push_back(uniform(2.0, grid_ - 3.0));          // center-y
      z.values.push_back(uniform(std::log(1.2), std::log(2.2)));  // log-scale
      z.values.push_back(uniform(-2.0, 2.0));                 // amplitude logit
    }
    return z;
  }

  double blob_sigma(double log_scale, int t) const {
    return std::exp(log_scale) *
           (0.5 + 0.5 * static_cast<double>(t) / total_steps_);
  }

  StepResult step(const Latent& z, int t, StepMode mode = StepMode::Exact) const {
    check(z, t);
    StepResult out;
    out.attention.timestep = t;
    out.attention.maps = raw_maps(z, t);
    normalize_stack(out.attention.maps, mode);
    out.next_latent = advance(z);
    return out;
  }

  // Exact reverse-mode derivative of step() in Smooth mode, contracted
  // with the cotangent.
  Latent vjp(const Latent& z, int t, const StepCotangent& cot) const {
    check(z, t);
    Latent g;
    g.values.assign(z.values.size(), 0.0);

    if (!cot.d_next_latent.empty()) {
      if (cot.d_next_latent.size() != z.values.size())
        throw std::invalid_argument("vjp: next-latent cotangent size mismatch");
      for (size_t i = 0; i < z.values.size(); ++i) {
        const bool logit_slot = i % Latent::kSlotsPerToken == 3;
        g.values[i] += cot.d_next_latent[i] * (logit_slot ? 0.98 : 1.0);
      }
    }

    if (!cot.d_attention.empty()) {
      const int n = z.token_count();
      if (static_cast<int>(cot.d_attention.size()) != n)
        throw std::invalid_argument("vjp: attention cotangent size mismatch");

      std::vector<AttentionMap> raw = raw_maps(z, t);
      // adjoint of joint smooth max-min normalization over the whole stack
      const auto nb = norm_bounds(raw, StepMode::Smooth);
      const double range = nb.hi - nb.lo;
      if (range <= 0) return g;

      double cot_sum = 0, cot_dot_y = 0;
      for (int i = 0; i < n; ++i)
        for (size_t p = 0; p < raw[i].size(); ++p) {
          const double c = cot.d_attention[i][p];
          cot_sum += c;
          cot_dot_y += c * (raw[i][p] - nb.lo) / (range * range);
        }

      for (int i = 0; i < n; ++i) {
        const double cx = z.slot(i, 0), cy = z.slot(i, 1);
        const double ls = z.slot(i, 2), logit = z.slot(i, 3);
        const double amp = sigmoid(logit);
        const double s = blob_sigma(ls, t);
        const double inv_s2 = 1.0 / (s * s);
        for (int r = 0; r < grid_; ++r)
          for (int c = 0; c < grid_; ++c) {
            const size_t p = static_cast<size_t>(r) * grid_ + c;
            const double x = raw[i][p];
            // d loss / d raw pixel through the normalization
            const double wmax = nb.wmax[i][p];
            const double wmin = nb.wmin[i][p];
            const double dx = cot.d_attention[i][p] / range -
                              cot_sum * wmin / range -
                              cot_dot_y * (wmax - wmin);
            if (dx == 0.0 || x == 0.0) continue;
            const double ddx = c - cx, ddy = r - cy;
            const double r2 = ddx * ddx + ddy * ddy;
            g.slot(i, 0) += dx * x * ddx * inv_s2;
            g.slot(i, 1) += dx * x * ddy * inv_s2;
            g.slot(i, 2) += dx * x * r2 * inv_s2;
            g.slot(i, 3) += dx * x * (1.0 - amp);
          }
      }
    }
    return g;
  }

  SceneTruth ground_truth(const Latent& z) const {
    if (z.values.size() % Latent::kSlotsPerToken != 0 || z.values.empty())
      throw std::invalid_argument("ground_truth: latent of wrong length");
    SceneTruth truth;
    for (int i = 0; i < z.token_count(); ++i) {
      BlobTruth b;
      b.center_x = z.slot(i, 0);
      b.center_y = z.slot(i, 1);
      b.scale = std::exp(z.slot(i, 2));
      b.amplitude = sigmoid(z.slot(i, 3));
      truth.blobs.push_back(b);
    }
    return truth;
  }

  Latent encode(const SceneTruth& truth) const {
    Latent z;
    for (const auto& b : truth.blobs) {
      z.values.push_back(b.center_x);
      z.values.push_back(b.center_y);
      z.values.push_back(std::log(b.scale));
      z.values.push_back(std::log(b.amplitude / (1.0 - b.amplitude)));
    }
    return z;
  }

  // Composite grayscale scene: per-pixel max over the unnormalized token
  // maps at t = 1 (the sharpest rendering), clamped to [0,1].
  AttentionMap render(const Latent& z, int upscale = 4) const {
    if (!z.finite()) throw std::invalid_argument("render: non-finite latent");
    std::vector<AttentionMap> raw = raw_maps(z, 1);
    AttentionMap composite(grid_, grid_);
    for (const auto& m : raw)
      for (size_t p = 0; p < m.size(); ++p)
        composite[p] = std::max(composite[p], std::min(m[p], 1.0));
    return detail::upscale_nearest(composite, std::max(1, upscale));
  }

 private:
  void check(const Latent& z, int t) const {
    if (!z.finite()) throw std::invalid_argument("backend: non-finite latent");
    if (z.values.empty() || z.values.size() % Latent::kSlotsPerToken != 0)
      throw std::invalid_argument("backend: latent of wrong length");
    if (t < 0 || t > total_steps_)
      throw std::invalid_argument("backend: timestep out of range");
  }

  std::vector<AttentionMap> raw_maps(const Latent& z, int t) const {
    std::vector<AttentionMap> maps;
    const int n = z.token_count();
    maps.reserve(n);
    for (int i = 0; i < n; ++i) {
      const double cx = z.slot(i, 0), cy = z.slot(i, 1);
      const double amp = sigmoid(z.slot(i, 3));
      const double s = blob_sigma(z.slot(i, 2), t);
      const double inv = 1.0 / (2.0 * s * s);
      AttentionMap m(grid_, grid_);
      for (int r = 0; r < grid_; ++r)
        for (int c = 0; c < grid_; ++c) {
          const double dx = c - cx, dy = r - cy;
          m.at(r, c) = amp * std::exp(-(dx * dx + dy * dy) * inv);
        }
      maps.push_back(std::move(m));
    }
    return maps;
  }

  struct NormBounds {
    double lo = 0, hi = 0;
    StackGrad wmax, wmin;  // softmax / softmin weights (smooth mode only)
  };

  // Joint max-min bounds over every pixel of every token map. Normalizing
  // the stack against shared bounds keeps relative amplitudes observable,
  // which the missing loss and the amplitude failure mode depend on.
  NormBounds norm_bounds(const std::vector<AttentionMap>& raw,
                         StepMode mode) const {
    NormBounds nb;
    double hard_lo = raw[0][0], hard_hi = raw[0][0];
    for (const auto& m : raw)
      for (size_t p = 0; p < m.size(); ++p) {
        hard_lo = std::min(hard_lo, m[p]);
        hard_hi = std::max(hard_hi, m[p]);
      }
    nb.lo = hard_lo;
    if (mode == StepMode::Exact) {
      nb.hi = hard_hi;
      return nb;
    }
    // Smooth the max side with log-sum-exp so the derivative is defined
    // when two pixels tie for the peak. The min of a blob stack is the
    // flat near-zero background; smoothing it would lift a pedestal under
    // every map, so the exact min with a subgradient at the first argmin
    // is used instead.
    double sum_hi = 0;
    for (const auto& m : raw)
      for (size_t p = 0; p < m.size(); ++p)
        sum_hi += std::exp((m[p] - hard_hi) / temp_);
    nb.hi = hard_hi + temp_ * std::log(sum_hi);
    nb.wmax.resize(raw.size());
    nb.wmin.resize(raw.size());
    bool min_found = false;
    for (size_t i = 0; i < raw.size(); ++i) {
      nb.wmax[i].assign(raw[i].size(), 0.0);
      nb.wmin[i].assign(raw[i].size(), 0.0);
      for (size_t p = 0; p < raw[i].size(); ++p) {
        nb.wmax[i][p] = std::exp((raw[i][p] - hard_hi) / temp_) / sum_hi;
        if (!min_found && raw[i][p] == hard_lo) {
          nb.wmin[i][p] = 1.0;
          min_found = true;
        }
      }
    }
    return nb;
  }

  void normalize_stack(std::vector<AttentionMap>& maps, StepMode mode) const {
    const auto nb = norm_bounds(maps, mode);
    const double range = nb.hi - nb.lo;
    for (auto& m : maps)
      for (size_t p = 0; p < m.size(); ++p)
        m[p] = range > 0 ? (m[p] - nb.lo) / range : 0.0;
  }

  Latent advance(const Latent& z) const {
    Latent next = z;
    for (int i = 0; i < z.token_count(); ++i) {
      double& l = next.slot(i, 3);
      const double sign = l > 0 ? 1.0 : (l < 0 ? -1.0 : 0.0);
      l = 0.98 * l + 0.02 * sign;
    }
    return next;
  }

  int grid_;
  int total_steps_;
  double temp_;
};

}  // namespace ear
