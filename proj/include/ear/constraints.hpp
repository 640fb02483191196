#pragma once

// Structured textual constraints: entities, (entity, attribute) pairs and
// (e1, relation, e2) triples, plus the axis/direction semantics of relations.
//
// Constraint file schema (JSON):
//   {
//     "prompt": "a bird on the left of a clock",
//     "prompt_len": 9,
//     "entities": [{"surface": "bird", "indices": [2]}, ...],
//     "attributes": [["cat", "black", [1]], ...],
//     "relations": [["bird", "left", "clock"], ...]
//   }
// Attribute rows are [entity_surface, attribute_surface, attribute_indices].

#include <json.hpp>

#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace ear {

struct constraint_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Token {
  int index = 0;
  std::string surface;
};

// Spatial vocabulary. {left, right} act along x; {above, below, top-of,
// bottom-of} along y; everything else is non-spatial and inert in the
// spatial loss.
struct RelationKind {
  enum Kind { Left, Right, Above, Below, TopOf, BottomOf, Near, In, On, Other };

  Kind kind = Other;
  std::string word;  // original word, kept for "other" kinds

  static RelationKind from_word(const std::string& w) {
    RelationKind r;
    r.word = w;
    if (w == "left") r.kind = Left;
    else if (w == "right") r.kind = Right;
    else if (w == "above") r.kind = Above;
    else if (w == "below") r.kind = Below;
    else if (w == "top-of") r.kind = TopOf;
    else if (w == "bottom-of") r.kind = BottomOf;
    else if (w == "near") r.kind = Near;
    else if (w == "in") r.kind = In;
    else if (w == "on") r.kind = On;
    else r.kind = Other;
    return r;
  }

  const std::string& name() const { return word; }
};

struct AxisFlags {
  int x = 0;
  int y = 0;
};

inline AxisFlags axis_flags(const RelationKind& r) {
  switch (r.kind) {
    case RelationKind::Left:
    case RelationKind::Right:
      return {1, 0};
    case RelationKind::Above:
    case RelationKind::Below:
    case RelationKind::TopOf:
    case RelationKind::BottomOf:
      return {0, 1};
    default:
      return {0, 0};
  }
}

// Sign of the relation along its axis. Columns grow rightward, rows grow
// downward, so "below" is the positive y direction.
inline int direction(const RelationKind& r) {
  switch (r.kind) {
    case RelationKind::Right:
    case RelationKind::Below:
    case RelationKind::BottomOf:
      return +1;
    case RelationKind::Left:
    case RelationKind::Above:
    case RelationKind::TopOf:
      return -1;
    default:
      return 0;
  }
}

// An entity may span several prompt tokens; its attention map is the
// pixelwise mean of its token maps.
struct Entity {
  std::string surface;
  std::vector<int> indices;
};

struct AttributeBinding {
  int entity = 0;  // index into ConstraintSet::entities
  std::string surface;
  std::vector<int> indices;
};

struct Relation {
  int e1 = 0;  // indices into ConstraintSet::entities
  RelationKind kind;
  int e2 = 0;
};

class ConstraintSet {
 public:
  std::string prompt;
  int prompt_len = 0;
  std::vector<Entity> entities;
  std::vector<AttributeBinding> attributes;
  std::vector<Relation> relations;

  int entity_count() const { return static_cast<int>(entities.size()); }

  std::optional<int> find_entity(const std::string& surface) const {
    for (size_t i = 0; i < entities.size(); ++i)
      if (entities[i].surface == surface) return static_cast<int>(i);
    return std::nullopt;
  }
};

// Report-only invariant check; empty result iff the set is valid.
inline std::vector<std::string> validate(const ConstraintSet& cs) {
  std::vector<std::string> out;
  std::set<int> seen;
  for (const auto& e : cs.entities) {
    if (e.indices.empty())
      out.push_back("entity '" + e.surface + "' has no token indices");
    for (int ix : e.indices) {
      if (ix < 0 || ix >= cs.prompt_len)
        out.push_back("entity '" + e.surface + "' token index " +
                      std::to_string(ix) + " outside prompt of length " +
                      std::to_string(cs.prompt_len));
      if (!seen.insert(ix).second)
        out.push_back("duplicate entity token index " + std::to_string(ix));
    }
  }
  for (const auto& a : cs.attributes) {
    if (a.entity < 0 || a.entity >= cs.entity_count())
      out.push_back("attribute '" + a.surface +
                    "' references a missing entity");
    for (int ix : a.indices)
      if (ix < 0 || ix >= cs.prompt_len)
        out.push_back("attribute '" + a.surface + "' token index " +
                      std::to_string(ix) + " outside prompt of length " +
                      std::to_string(cs.prompt_len));
  }
  for (const auto& r : cs.relations) {
    if (r.e1 < 0 || r.e1 >= cs.entity_count() || r.e2 < 0 ||
        r.e2 >= cs.entity_count())
      out.push_back("relation '" + r.kind.name() +
                    "' endpoint is not a declared entity");
  }
  if (cs.entities.empty() && !cs.relations.empty())
    out.push_back("relations present but entity list is empty");
  return out;
}

inline ConstraintSet parse_constraints(const std::string& document) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(document);
  } catch (const nlohmann::json::parse_error& e) {
    throw constraint_error(std::string("constraint file: ") + e.what());
  }

  auto require = [&](const char* field) -> const nlohmann::json& {
    if (!j.contains(field))
      throw constraint_error(std::string("constraint file: missing field '") +
                             field + "'");
    return j.at(field);
  };

  ConstraintSet cs;
  try {
    cs.prompt = require("prompt").get<std::string>();
    cs.prompt_len = require("prompt_len").get<int>();
    for (const auto& e : require("entities")) {
      Entity ent;
      ent.surface = e.at("surface").get<std::string>();
      ent.indices = e.at("indices").get<std::vector<int>>();
      cs.entities.push_back(std::move(ent));
    }
    if (j.contains("attributes"))
      for (const auto& a : j.at("attributes")) {
        AttributeBinding ab;
        const std::string ent_surface = a.at(0).get<std::string>();
        auto ent = cs.find_entity(ent_surface);
        if (!ent)
          throw constraint_error("constraint file: attribute references "
                                 "unknown entity '" + ent_surface + "'");
        ab.entity = *ent;
        ab.surface = a.at(1).get<std::string>();
        ab.indices = a.at(2).get<std::vector<int>>();
        cs.attributes.push_back(std::move(ab));
      }
    if (j.contains("relations"))
      for (const auto& r : j.at("relations")) {
        Relation rel;
        const std::string s1 = r.at(0).get<std::string>();
        const std::string s2 = r.at(2).get<std::string>();
        auto e1 = cs.find_entity(s1);
        auto e2 = cs.find_entity(s2);
        if (!e1 || !e2)
          throw constraint_error("constraint file: relation endpoint '" +
                                 (e1 ? s2 : s1) + "' is not a declared entity");
        rel.e1 = *e1;
        rel.kind = RelationKind::from_word(r.at(1).get<std::string>());
        rel.e2 = *e2;
        cs.relations.push_back(std::move(rel));
      }
  } catch (const nlohmann::json::exception& e) {
    throw constraint_error(std::string("constraint file: ") + e.what());
  }

  auto report = validate(cs);
  if (!report.empty())
    throw constraint_error("constraint file: " + report.front());
  return cs;
}

inline std::string serialize_constraints(const ConstraintSet& cs) {
  nlohmann::json j;
  j["prompt"] = cs.prompt;
  j["prompt_len"] = cs.prompt_len;
  j["entities"] = nlohmann::json::array();
  for (const auto& e : cs.entities)
    j["entities"].push_back({{"surface", e.surface}, {"indices", e.indices}});
  j["attributes"] = nlohmann::json::array();
  for (const auto& a : cs.attributes)
    j["attributes"].push_back(nlohmann::json::array(
        {cs.entities[a.entity].surface, a.surface, a.indices}));
  j["relations"] = nlohmann::json::array();
  for (const auto& r : cs.relations)
    j["relations"].push_back(nlohmann::json::array(
        {cs.entities[r.e1].surface, r.kind.name(), cs.entities[r.e2].surface}));
  return j.dump(2);
}

}  // namespace ear
