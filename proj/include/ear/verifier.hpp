#pragma once

// Oracle verifier over synthetic scene truth: per-entity mistake scores in
// the three failure categories, matching the faulty/proper split consumed
// by the refinement loop.

#include "ear/backend.hpp"
#include "ear/constraints.hpp"
#include "ear/losses.hpp"
#include "ear/verifier_report.hpp"

#include <algorithm>
#include <cmath>

namespace ear {

// missing  = 1 - blob amplitude
// attribute = 1 - 2*iou(entity map, attribute map), averaged
// spatial  = 2*max(sigma(dir * center gap) - 1/2, 0), averaged
inline VerifierReport oracle_verify(const SceneTruth& truth,
                                    const AttentionStack& stack,
                                    const ConstraintSet& cs) {
  VerifierReport report;
  for (int e = 0; e < cs.entity_count(); ++e) {
    const Entity& ent = cs.entities[e];
    EntityScores s;

    double amp = 0;
    for (int tok : ent.indices) {
      if (tok < 0 || tok >= static_cast<int>(truth.blobs.size()))
        throw std::runtime_error("oracle_verify: no truth entry for token " +
                                 std::to_string(tok));
      amp += truth.blobs[tok].amplitude;
    }
    amp /= static_cast<double>(ent.indices.size());
    s.missing = std::clamp(1.0 - amp, 0.0, 1.0);

    int attr_count = 0;
    double attr_sum = 0;
    AttentionMap emap = entity_map(stack, ent.indices);
    for (const auto& ab : cs.attributes) {
      if (ab.entity != e) continue;
      attr_sum += std::clamp(1.0 - 2.0 * iou(emap, entity_map(stack, ab.indices)),
                             0.0, 1.0);
      ++attr_count;
    }
    if (attr_count) s.attribute = attr_sum / attr_count;

    int rel_count = 0;
    double rel_sum = 0;
    for (const auto& rel : cs.relations) {
      if (rel.e1 != e && rel.e2 != e) continue;
      const AxisFlags fl = axis_flags(rel.kind);
      if (fl.x == 0 && fl.y == 0) continue;
      const Axis axis = fl.x ? Axis::X : Axis::Y;
      const double e1c = center_of_mass(
          entity_map(stack, cs.entities[rel.e1].indices), axis);
      const double e2c = center_of_mass(
          entity_map(stack, cs.entities[rel.e2].indices), axis);
      const double term = sigmoid(direction(rel.kind) * (e2c - e1c));
      rel_sum += 2.0 * std::max(term - 0.5, 0.0);
      ++rel_count;
    }
    if (rel_count) s.spatial = rel_sum / rel_count;

    report.scores[e] = s;
  }
  return report;
}

}  // namespace ear
