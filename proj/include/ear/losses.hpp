#pragma once

// Scalar objectives over attention stacks: entity mixing and missing,
// attribute binding, spatial relation, their unified sum, and the
// correction / preservation / refinement objectives used for initial-noise
// repair. Every loss can also emit its analytic gradient with respect to
// the stack values.

#include "ear/attention.hpp"
#include "ear/constraints.hpp"
#include "ear/verifier_report.hpp"

#include <cmath>
#include <optional>
#include <vector>

namespace ear {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

enum class MissingReducer { SumPositivePart, MaxPositivePart };

inline const char* to_string(MissingReducer r) {
  return r == MissingReducer::SumPositivePart ? "sum-positive-part"
                                              : "max-positive-part";
}

struct LossWeights {
  double mixing = 1.0;
  double missing = 1.0;
  double attr = 1.0;
  double spatial = 1.0;
  double correction = 1.0;
  double preservation = 1.0;
};

struct LossBreakdown {
  double mixing = 0.0;
  double missing = 0.0;
  double attr = 0.0;
  double spatial = 0.0;
  double total = 0.0;
};

// Gradient w.r.t. every pixel of every token map, same shape as the stack.
using StackGrad = std::vector<std::vector<double>>;

inline StackGrad zero_grad(const AttentionStack& stack) {
  StackGrad g(stack.maps.size());
  for (size_t i = 0; i < g.size(); ++i)
    g[i].assign(stack.maps[i].size(), 0.0);
  return g;
}

// Pixelwise mean of an entity's token maps.
inline AttentionMap entity_map(const AttentionStack& stack,
                               const std::vector<int>& tokens) {
  if (tokens.empty()) throw std::invalid_argument("entity_map: no tokens");
  AttentionMap out = stack.map(tokens.front());
  for (size_t k = 1; k < tokens.size(); ++k) {
    const AttentionMap& m = stack.map(tokens[k]);
    for (size_t i = 0; i < out.size(); ++i) out[i] += m[i];
  }
  const double inv = 1.0 / static_cast<double>(tokens.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= inv;
  return out;
}

namespace detail {

// Scatter a gradient on a mean-aggregated map back onto its token maps.
inline void scatter(const std::vector<int>& tokens,
                    const std::vector<double>& dmap, StackGrad& g) {
  const double inv = 1.0 / static_cast<double>(tokens.size());
  for (int tok : tokens)
    for (size_t i = 0; i < dmap.size(); ++i) g[tok][i] += dmap[i] * inv;
}

// iou value plus d(iou)/da and d(iou)/db, scaled by `scale`, accumulated
// into da/db when non-null.
inline double iou_with_grad(const AttentionMap& a, const AttentionMap& b,
                            double scale, std::vector<double>* da,
                            std::vector<double>* db) {
  double num = 0, den = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    num += a[i] * b[i];
    den += a[i] + b[i];
  }
  if (den <= 0) return 0.0;
  const double value = num / den;
  if (da)
    for (size_t i = 0; i < a.size(); ++i)
      (*da)[i] += scale * (b[i] - value) / den;
  if (db)
    for (size_t i = 0; i < b.size(); ++i)
      (*db)[i] += scale * (a[i] - value) / den;
  return value;
}

struct CenterInfo {
  double center = 0.0;
  double mass = 0.0;
};

inline CenterInfo center_info(const AttentionMap& m, Axis axis) {
  CenterInfo ci;
  double moment = 0;
  for (int r = 0; r < m.height(); ++r)
    for (int c = 0; c < m.width(); ++c) {
      const double v = m.at(r, c);
      ci.mass += v;
      moment += v * (axis == Axis::X ? c : r);
    }
  if (ci.mass <= 0) throw empty_map_error("spatial loss: empty entity map");
  ci.center = moment / ci.mass;
  return ci;
}

inline bool involves(int focus, int e1, int e2) {
  return focus < 0 || e1 == focus || e2 == focus;
}

}  // namespace detail

// Eq-style entity mixing: sum of pairwise soft IoU over unordered entity
// pairs. `focus` >= 0 restricts to pairs containing that entity.
inline double mixing_loss(const AttentionStack& stack, const ConstraintSet& cs,
                          StackGrad* grad = nullptr, double scale = 1.0,
                          int focus = -1) {
  const int n = cs.entity_count();
  if (n < 2) return 0.0;
  std::vector<AttentionMap> maps;
  maps.reserve(n);
  for (const auto& e : cs.entities) maps.push_back(entity_map(stack, e.indices));

  double loss = 0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      if (!detail::involves(focus, i, j)) continue;
      if (!grad) {
        loss += iou(maps[i], maps[j]);
      } else {
        std::vector<double> di(maps[i].size(), 0.0), dj(maps[j].size(), 0.0);
        loss += detail::iou_with_grad(maps[i], maps[j], scale, &di, &dj);
        detail::scatter(cs.entities[i].indices, di, *grad);
        detail::scatter(cs.entities[j].indices, dj, *grad);
      }
    }
  return loss;
}

// Exclusive-space objective: the positive part of A_e1 - A_e2, reduced over
// pixels, summed over ordered pairs, divided by n-1 and negated. A single
// entity falls back to the negated mean of its map.
// With focus >= 0 the sum keeps pairs containing that entity; subject_only
// further narrows it to the pairs where focus is the e1 (subject) side —
// the entity's own exclusive-space terms, without the terms that reward
// other entities for exceeding it.
inline double missing_loss(const AttentionStack& stack, const ConstraintSet& cs,
                           MissingReducer reducer = MissingReducer::SumPositivePart,
                           StackGrad* grad = nullptr, double scale = 1.0,
                           int focus = -1, bool subject_only = false) {
  const int n = cs.entity_count();
  if (n == 0) return 0.0;

  std::vector<AttentionMap> maps;
  maps.reserve(n);
  for (const auto& e : cs.entities) maps.push_back(entity_map(stack, e.indices));

  if (n == 1) {
    if (focus >= 0 && focus != 0) return 0.0;
    const AttentionMap& m = maps[0];
    const double inv = 1.0 / static_cast<double>(m.size());
    if (grad) {
      std::vector<double> dm(m.size(), -scale * inv);
      detail::scatter(cs.entities[0].indices, dm, *grad);
    }
    return -m.sum() * inv;
  }

  const double inv = 1.0 / static_cast<double>(n - 1);
  double loss = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      if (focus >= 0 &&
          (subject_only ? i != focus : !detail::involves(focus, i, j)))
        continue;
      const AttentionMap& a = maps[i];
      const AttentionMap& b = maps[j];
      if (reducer == MissingReducer::SumPositivePart) {
        double excl = 0;
        std::vector<double> da, db;
        if (grad) {
          da.assign(a.size(), 0.0);
          db.assign(b.size(), 0.0);
        }
        for (size_t p = 0; p < a.size(); ++p) {
          const double d = a[p] - b[p];
          if (d > 0) {
            excl += d;
            if (grad) {
              da[p] -= scale * inv;
              db[p] += scale * inv;
            }
          }
        }
        loss -= excl * inv;
        if (grad) {
          detail::scatter(cs.entities[i].indices, da, *grad);
          detail::scatter(cs.entities[j].indices, db, *grad);
        }
      } else {
        // max over pixels of the positive part; subgradient at the first
        // argmax, zero when nothing is positive
        double best = 0;
        size_t best_p = a.size();
        for (size_t p = 0; p < a.size(); ++p) {
          const double d = a[p] - b[p];
          if (d > best) {
            best = d;
            best_p = p;
          }
        }
        loss -= best * inv;
        if (grad && best_p < a.size()) {
          std::vector<double> da(a.size(), 0.0), db(b.size(), 0.0);
          da[best_p] = -scale * inv;
          db[best_p] = scale * inv;
          detail::scatter(cs.entities[i].indices, da, *grad);
          detail::scatter(cs.entities[j].indices, db, *grad);
        }
      }
    }
  return loss;
}

// Attribute binding: negated soft IoU between each entity map and its
// attribute map.
inline double attribute_loss(const AttentionStack& stack,
                             const ConstraintSet& cs, StackGrad* grad = nullptr,
                             double scale = 1.0, int focus = -1) {
  double loss = 0;
  for (const auto& ab : cs.attributes) {
    if (focus >= 0 && ab.entity != focus) continue;
    AttentionMap ent = entity_map(stack, cs.entities[ab.entity].indices);
    AttentionMap attr = entity_map(stack, ab.indices);
    if (!grad) {
      loss -= iou(ent, attr);
    } else {
      std::vector<double> de(ent.size(), 0.0), da(attr.size(), 0.0);
      loss -= detail::iou_with_grad(ent, attr, -scale, &de, &da);
      detail::scatter(cs.entities[ab.entity].indices, de, *grad);
      detail::scatter(ab.indices, da, *grad);
    }
  }
  return loss;
}

// Spatial relation: sigmoid of the signed center-of-mass gap along the
// relation's axis. Non-axis relations contribute nothing.
inline double spatial_loss(const AttentionStack& stack, const ConstraintSet& cs,
                           StackGrad* grad = nullptr, double scale = 1.0,
                           int focus = -1) {
  double loss = 0;
  for (const auto& rel : cs.relations) {
    if (!detail::involves(focus, rel.e1, rel.e2)) continue;
    const AxisFlags fl = axis_flags(rel.kind);
    if (fl.x == 0 && fl.y == 0) continue;
    const Axis axis = fl.x ? Axis::X : Axis::Y;
    const int dir = direction(rel.kind);

    AttentionMap m1 = entity_map(stack, cs.entities[rel.e1].indices);
    AttentionMap m2 = entity_map(stack, cs.entities[rel.e2].indices);
    const auto c1 = detail::center_info(m1, axis);
    const auto c2 = detail::center_info(m2, axis);
    const double s = dir * (c2.center - c1.center);
    const double term = sigmoid(s);
    loss += term;

    if (grad) {
      const double ds = term * (1.0 - term);  // sigmoid'
      std::vector<double> d1(m1.size(), 0.0), d2(m2.size(), 0.0);
      const int w = m1.width();
      for (size_t p = 0; p < m1.size(); ++p) {
        const int coord = axis == Axis::X ? static_cast<int>(p) % w
                                          : static_cast<int>(p) / w;
        d2[p] = scale * ds * dir * (coord - c2.center) / c2.mass;
        d1[p] = -scale * ds * dir * (coord - c1.center) / c1.mass;
      }
      detail::scatter(cs.entities[rel.e1].indices, d1, *grad);
      detail::scatter(cs.entities[rel.e2].indices, d2, *grad);
    }
  }
  return loss;
}

// Unified objective: weighted sum of the four terms (missing + mixing form
// the entity group).
inline LossBreakdown ear_loss(const AttentionStack& stack,
                              const ConstraintSet& cs,
                              const LossWeights& w = {},
                              MissingReducer reducer = MissingReducer::SumPositivePart,
                              StackGrad* grad = nullptr, int focus = -1) {
  LossBreakdown b;
  b.mixing = mixing_loss(stack, cs, grad, w.mixing, focus);
  b.missing = missing_loss(stack, cs, reducer, grad, w.missing, focus);
  b.attr = attribute_loss(stack, cs, grad, w.attr, focus);
  b.spatial = spatial_loss(stack, cs, grad, w.spatial, focus);
  b.total = w.mixing * b.mixing + w.missing * b.missing + w.attr * b.attr +
            w.spatial * b.spatial;
  return b;
}

// Selective repair objective for one faulty entity: each loss group is
// restricted to the terms involving f and gated by the matching mistake
// score reaching lambda (inclusive).
inline double correction_loss(const AttentionStack& stack,
                              const ConstraintSet& cs,
                              const VerifierReport& report, int f,
                              double lambda, const LossWeights& w = {},
                              MissingReducer reducer = MissingReducer::SumPositivePart,
                              StackGrad* grad = nullptr,
                              bool subject_only = false) {
  if (f < 0 || f >= cs.entity_count())
    throw std::invalid_argument("correction_loss: entity out of range");
  const EntityScores& s = report.at(f);

  double loss = 0;
  if (s.missing >= lambda) {
    loss += w.mixing * mixing_loss(stack, cs, grad, w.mixing, f);
    loss += w.missing *
            missing_loss(stack, cs, reducer, grad, w.missing, f, subject_only);
  }
  if (s.attribute >= lambda)
    loss += w.attr * attribute_loss(stack, cs, grad, w.attr, f);
  if (s.spatial >= lambda)
    loss += w.spatial * spatial_loss(stack, cs, grad, w.spatial, f);
  return loss;
}

// Keeps proper entities close to their reference maps: negated IoU between
// the current initial-step map and the reference. Gradient flows into the
// init stack only.
inline double preservation_loss(const AttentionStack& init,
                                const AttentionStack& ref,
                                const ConstraintSet& cs,
                                const std::vector<int>& proper,
                                StackGrad* grad = nullptr, double scale = 1.0) {
  double loss = 0;
  for (int ent : proper) {
    AttentionMap a = entity_map(init, cs.entities[ent].indices);
    AttentionMap b = entity_map(ref, cs.entities[ent].indices);
    if (!grad) {
      loss -= iou(a, b);
    } else {
      std::vector<double> da(a.size(), 0.0);
      loss -= detail::iou_with_grad(a, b, -scale, &da, nullptr);
      detail::scatter(cs.entities[ent].indices, da, *grad);
    }
  }
  return loss;
}

inline double refinement_loss(double correction, double preservation,
                              const LossWeights& w = {}) {
  return w.correction * correction + w.preservation * preservation;
}

}  // namespace ear
