#pragma once

// Per-entity, per-failure-mode mistake scores and the faulty/proper split
// they induce. Scores are mistake severities in [0,1], 1 = fully wrong.

#include <algorithm>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace ear {

struct EntityScores {
  double missing = 0.0;
  double attribute = 0.0;
  double spatial = 0.0;

  double max_score() const {
    return std::max({missing, attribute, spatial});
  }
};

struct VerifierReport {
  // keyed by entity index into the ConstraintSet
  std::map<int, EntityScores> scores;
  std::string notes;

  const EntityScores& at(int entity) const {
    auto it = scores.find(entity);
    if (it == scores.end())
      throw std::runtime_error("verifier report: no scores for entity " +
                               std::to_string(entity));
    return it->second;
  }
};

struct FaultyEntity {
  int entity = 0;
  bool missing = false;
  bool attribute = false;
  bool spatial = false;
};

struct FaultClassification {
  std::vector<FaultyEntity> faulty;  // descending max score, then token index
  std::vector<int> proper;
};

// An entity is faulty iff any of its three scores reaches lambda
// (inclusive). Faulty entities are ordered worst-first so the refinement
// loop pops the most severe problem first.
inline FaultClassification classify(const VerifierReport& report,
                                    double lambda) {
  FaultClassification out;
  for (const auto& [entity, s] : report.scores) {
    FaultyEntity f;
    f.entity = entity;
    f.missing = s.missing >= lambda;
    f.attribute = s.attribute >= lambda;
    f.spatial = s.spatial >= lambda;
    if (f.missing || f.attribute || f.spatial)
      out.faulty.push_back(f);
    else
      out.proper.push_back(entity);
  }
  std::stable_sort(out.faulty.begin(), out.faulty.end(),
                   [&](const FaultyEntity& a, const FaultyEntity& b) {
                     const double sa = report.at(a.entity).max_score();
                     const double sb = report.at(b.entity).max_score();
                     if (sa != sb) return sa > sb;
                     return a.entity < b.entity;
                   });
  return out;
}

}  // namespace ear
