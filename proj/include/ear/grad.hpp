#pragma once

// End-to-end gradients of a configured loss through the backend, plus the
// independent central-difference check used to validate them.

#include "ear/backend.hpp"
#include "ear/losses.hpp"

#include <json.hpp>

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

namespace ear {

// Which losses to evaluate on a step's attention, with what weights.
struct LossSpec {
  const ConstraintSet* constraints = nullptr;
  LossWeights weights;
  MissingReducer reducer = MissingReducer::SumPositivePart;
};

// A scalar objective on an attention stack that can emit its stack
// gradient; the glue between the loss layer and the backend vjp.
using StackObjective =
    std::function<double(const AttentionStack&, StackGrad*)>;

inline StackObjective make_ear_objective(const LossSpec& spec) {
  return [spec](const AttentionStack& stack, StackGrad* grad) {
    return ear_loss(stack, *spec.constraints, spec.weights, spec.reducer, grad)
        .total;
  };
}

// Loss value at step(z, t) plus its gradient w.r.t. z. The forward pass
// runs the backend in smooth mode so value and gradient describe the same
// function.
inline std::pair<double, Latent> loss_grad(const BlobBackend& backend,
                                           const Latent& z, int t,
                                           const StackObjective& objective) {
  StepResult res = backend.step(z, t, StepMode::Smooth);
  StackGrad dstack = zero_grad(res.attention);
  const double value = objective(res.attention, &dstack);
  StepCotangent cot;
  cot.d_attention = std::move(dstack);
  return {value, backend.vjp(z, t, cot)};
}

inline std::pair<double, Latent> loss_grad(const BlobBackend& backend,
                                           const Latent& z, int t,
                                           const LossSpec& spec) {
  return loss_grad(backend, z, t, make_ear_objective(spec));
}

struct GradCheckReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<double> rel_error;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;

  nlohmann::json to_json() const {
    return nlohmann::json{{"analytic", analytic},
                          {"numeric", numeric},
                          {"rel_error", rel_error},
                          {"max_rel_error", max_rel_error},
                          {"tolerance", tolerance},
                          {"pass", pass}};
  }
};

// Central differences of the smooth-mode forward against the analytic
// gradient; relative error |a-d| / max(|a|, |d|, 1e-6). The 1e-6 floor
// keeps near-zero coordinates (where both sides agree to ~1e-10 absolute
// but the shared magnitude is ~1e-8) from dominating the relative metric.
inline GradCheckReport finite_diff_check(const BlobBackend& backend,
                                         const Latent& z, int t,
                                         const StackObjective& objective,
                                         double h = 1e-4, double tol = 1e-4) {
  if (h <= 0) throw std::invalid_argument("finite_diff_check: h must be > 0");
  GradCheckReport rep;
  rep.tolerance = tol;

  auto [value, grad] = loss_grad(backend, z, t, objective);
  (void)value;
  rep.analytic = grad.values;

  auto eval = [&](const Latent& zz) {
    StepResult res = backend.step(zz, t, StepMode::Smooth);
    return objective(res.attention, nullptr);
  };

  rep.numeric.resize(z.values.size());
  rep.rel_error.resize(z.values.size());
  for (size_t i = 0; i < z.values.size(); ++i) {
    Latent zp = z, zm = z;
    zp.values[i] += h;
    zm.values[i] -= h;
    rep.numeric[i] = (eval(zp) - eval(zm)) / (2.0 * h);
    const double a = rep.analytic[i], d = rep.numeric[i];
    rep.rel_error[i] =
        std::fabs(a - d) / std::max({std::fabs(a), std::fabs(d), 1e-6});
    rep.max_rel_error = std::max(rep.max_rel_error, rep.rel_error[i]);
  }
  rep.pass = rep.max_rel_error <= tol;
  return rep;
}

inline GradCheckReport finite_diff_check(const BlobBackend& backend,
                                         const Latent& z, int t,
                                         const LossSpec& spec, double h = 1e-4,
                                         double tol = 1e-4) {
  return finite_diff_check(backend, z, t, make_ear_objective(spec), h, tol);
}

}  // namespace ear
