#pragma once

// Generation and refinement drivers: the guided denoising rollout with
// per-step latent updates, the two-stage feedback-driven initial-noise
// refinement loop, and the seeded batch runner behind the benchmark
// metrics.

#include "ear/backend.hpp"
#include "ear/constraints.hpp"
#include "ear/grad.hpp"
#include "ear/losses.hpp"
#include "ear/verifier.hpp"
#include "ear/verifier_report.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ear {

struct pipeline_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PipelineConfig {
  int total_steps = 50;        // T
  int update_steps = 25;       // leading steps that receive latent updates
  double alpha_start = 20.0;   // step-size schedule endpoints
  double alpha_end = 10.0;
  double alpha_noise = 10.0;   // initial-noise step size
  int inner_steps = 1;         // gradient steps per faulty entity
  double lambda = 0.5;         // fault threshold
  uint64_t seed = 0;
  int grid = 16;
  int max_rounds = 1;          // detection -> refinement cycles
  double grad_clip = 0.02;     // per-loss-term geometry gradient cap, 0 disables
  double amp_clip = 0.05;      // per-loss-term amplitude-logit gradient cap
  bool project = true;         // clamp updated latents to the blob box
  LossWeights weights;
  MissingReducer reducer = MissingReducer::SumPositivePart;

  void validate() const {
    if (total_steps < 1) throw pipeline_error("config: total_steps must be >= 1");
    if (update_steps < 0 || update_steps > total_steps)
      throw pipeline_error("config: update_steps must be in [0, total_steps]");
    if (!(alpha_start >= alpha_end) || !(alpha_end > 0))
      throw pipeline_error("config: need alpha_start >= alpha_end > 0");
    if (lambda < 0 || lambda > 1)
      throw pipeline_error("config: lambda must be in [0,1]");
    if (inner_steps < 1) throw pipeline_error("config: inner_steps must be >= 1");
    if (max_rounds < 1) throw pipeline_error("config: max_rounds must be >= 1");
    if (grad_clip < 0) throw pipeline_error("config: grad_clip must be >= 0");
    if (amp_clip < 0) throw pipeline_error("config: amp_clip must be >= 0");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{
        {"total_steps", total_steps},
        {"update_steps", update_steps},
        {"alpha_start", alpha_start},
        {"alpha_end", alpha_end},
        {"alpha_noise", alpha_noise},
        {"inner_steps", inner_steps},
        {"lambda", lambda},
        {"seed", seed},
        {"grid", grid},
        {"max_rounds", max_rounds},
        {"grad_clip", grad_clip},
        {"amp_clip", amp_clip},
        {"project", project},
        {"weights",
         {{"mixing", weights.mixing},
          {"missing", weights.missing},
          {"attr", weights.attr},
          {"spatial", weights.spatial},
          {"correction", weights.correction},
          {"preservation", weights.preservation}}},
        {"missing_reducer", to_string(reducer)}};
  }

  static PipelineConfig from_json(const nlohmann::json& j) {
    PipelineConfig c;
    c.total_steps = j.value("total_steps", c.total_steps);
    c.update_steps = j.value("update_steps", c.update_steps);
    c.alpha_start = j.value("alpha_start", c.alpha_start);
    c.alpha_end = j.value("alpha_end", c.alpha_end);
    c.alpha_noise = j.value("alpha_noise", c.alpha_noise);
    c.inner_steps = j.value("inner_steps", c.inner_steps);
    c.lambda = j.value("lambda", c.lambda);
    c.seed = j.value("seed", c.seed);
    c.grid = j.value("grid", c.grid);
    c.max_rounds = j.value("max_rounds", c.max_rounds);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.amp_clip = j.value("amp_clip", c.amp_clip);
    c.project = j.value("project", c.project);
    if (j.contains("weights")) {
      const auto& w = j.at("weights");
      c.weights.mixing = w.value("mixing", c.weights.mixing);
      c.weights.missing = w.value("missing", c.weights.missing);
      c.weights.attr = w.value("attr", c.weights.attr);
      c.weights.spatial = w.value("spatial", c.weights.spatial);
      c.weights.correction = w.value("correction", c.weights.correction);
      c.weights.preservation = w.value("preservation", c.weights.preservation);
    }
    if (j.contains("missing_reducer")) {
      const std::string r = j.at("missing_reducer").get<std::string>();
      if (r == "sum-positive-part")
        c.reducer = MissingReducer::SumPositivePart;
      else if (r == "max-positive-part")
        c.reducer = MissingReducer::MaxPositivePart;
      else
        throw pipeline_error("config: unknown missing_reducer '" + r + "'");
    }
    c.validate();
    return c;
  }
};

// Linear step-size schedule over the update window: alpha_start on the
// first update step (t = T), alpha_end on the last.
inline double alpha_schedule(int t, const PipelineConfig& cfg) {
  const int u = cfg.total_steps - t;  // 0-based update index
  if (u < 0 || u >= cfg.update_steps)
    throw pipeline_error("alpha_schedule: step outside the update window");
  if (cfg.update_steps <= 1) return cfg.alpha_start;
  return cfg.alpha_start + (cfg.alpha_end - cfg.alpha_start) *
                               static_cast<double>(u) /
                               static_cast<double>(cfg.update_steps - 1);
}

namespace detail {

inline double norm_of(const Latent& g) {
  double n2 = 0;
  for (double v : g.values) n2 += v * v;
  return std::sqrt(n2);
}

// The loss terms live on wildly different scales (the missing term sums
// over every pixel), so each term's latent gradient is clipped to
// cfg.grad_clip before weighting; otherwise the largest term monopolizes
// the whole update. Geometry slots (center/scale) and amplitude-logit
// slots are clipped as separate blocks: the geometry part of a term is
// orders of magnitude larger, and a single norm would starve amplitude
// guidance entirely.
inline void accumulate_clipped(Latent& acc, const Latent& g, double weight,
                               const PipelineConfig& cfg) {
  if (weight == 0.0) return;
  double geo2 = 0, amp2 = 0;
  for (size_t i = 0; i < g.values.size(); ++i)
    (i % Latent::kSlotsPerToken == 3 ? amp2 : geo2) +=
        g.values[i] * g.values[i];
  const double geo = std::sqrt(geo2), amp = std::sqrt(amp2);
  double geo_scale = weight, amp_scale = weight;
  if (cfg.grad_clip > 0 && geo > cfg.grad_clip)
    geo_scale *= cfg.grad_clip / geo;
  if (cfg.amp_clip > 0 && amp > cfg.amp_clip) amp_scale *= cfg.amp_clip / amp;
  for (size_t i = 0; i < acc.values.size(); ++i)
    acc.values[i] +=
        (i % Latent::kSlotsPerToken == 3 ? amp_scale : geo_scale) *
        g.values[i];
}

// The guidance terms are relative objectives: under joint normalization
// they can be satisfied by suppressing the weakest entity's amplitude
// (winner-take-all) instead of arranging the scene. Guidance exists to
// make entities present, so amplitude-lowering components are dropped
// from guidance and correction directions; the backend's sign-commitment
// nudge remains the only downward force on amplitudes.
inline void strip_amp_lowering(Latent& g) {
  for (int i = 0; i < g.token_count(); ++i)
    if (g.slot(i, 3) > 0) g.slot(i, 3) = 0;  // descent would lower the logit
}

// Descend along `dir` and project each token back into the blob
// parameter box. Returns the direction norm for trace records.
inline double apply_update(Latent& z, const Latent& dir, double alpha,
                           const PipelineConfig& cfg, int grid) {
  const double norm = norm_of(dir);
  for (size_t i = 0; i < z.values.size(); ++i)
    z.values[i] -= alpha * dir.values[i];
  if (cfg.project) {
    for (int i = 0; i < z.token_count(); ++i) {
      auto box = [&](int slot, double lo, double hi) {
        z.slot(i, slot) = std::clamp(z.slot(i, slot), lo, hi);
      };
      box(0, 1.0, grid - 2.0);
      box(1, 1.0, grid - 2.0);
      box(2, std::log(0.8), std::log(2.5));
      box(3, -4.0, 4.0);
    }
  }
  return norm;
}

}  // namespace detail

struct GuidedGrad {
  LossBreakdown loss;
  Latent direction;  // per-term-clipped, weighted descent direction
};

// Loss breakdown at step(z, t) plus the update direction assembled from
// per-term clipped gradients.
inline GuidedGrad guided_grad(const BlobBackend& backend, const Latent& z,
                              int t, const ConstraintSet& cs,
                              const PipelineConfig& cfg) {
  StepResult res = backend.step(z, t, StepMode::Smooth);
  GuidedGrad out;
  out.direction.values.assign(z.values.size(), 0.0);

  auto term_grad = [&](auto&& eval, double weight, double& value) {
    if (weight == 0.0) return;
    StackGrad g = zero_grad(res.attention);
    value = eval(&g);
    StepCotangent cot;
    cot.d_attention = std::move(g);
    Latent term = backend.vjp(z, t, cot);
    detail::strip_amp_lowering(term);
    detail::accumulate_clipped(out.direction, term, weight, cfg);
  };

  const LossWeights& w = cfg.weights;
  term_grad([&](StackGrad* g) { return mixing_loss(res.attention, cs, g); },
            w.mixing, out.loss.mixing);
  term_grad(
      [&](StackGrad* g) {
        return missing_loss(res.attention, cs, cfg.reducer, g);
      },
      w.missing, out.loss.missing);
  term_grad([&](StackGrad* g) { return attribute_loss(res.attention, cs, g); },
            w.attr, out.loss.attr);
  term_grad([&](StackGrad* g) { return spatial_loss(res.attention, cs, g); },
            w.spatial, out.loss.spatial);
  out.loss.total = w.mixing * out.loss.mixing + w.missing * out.loss.missing +
                   w.attr * out.loss.attr + w.spatial * out.loss.spatial;
  return out;
}

inline uint64_t latent_hash(const Latent& z) {
  uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (double v : z.values) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xff;
      h *= 1099511628211ull;
    }
  }
  return h;
}

struct StepRecord {
  int t = 0;
  LossBreakdown loss;
  double grad_norm = 0.0;
  uint64_t latent_hash = 0;
};

struct GenerationTrace {
  std::vector<StepRecord> steps;
  AttentionStack final_attention;
  Latent final_latent;
};

// Guided rollout: each step denoises, and within the update window the
// proposed latent takes a gradient step against the unified loss evaluated
// on the attention it will produce next.
inline GenerationTrace ear_generate(const BlobBackend& backend,
                                    const ConstraintSet& cs,
                                    const PipelineConfig& cfg,
                                    const Latent& initial) {
  cfg.validate();

  GenerationTrace trace;
  Latent z = initial;
  for (int t = cfg.total_steps; t >= 1; --t) {
    StepResult res = backend.step(z, t);
    StepRecord rec;
    rec.t = t;
    rec.loss = ear_loss(res.attention, cs, cfg.weights, cfg.reducer);

    const bool update = cfg.total_steps - t < cfg.update_steps;
    if (update) {
      const double alpha = alpha_schedule(t, cfg);
      GuidedGrad gg =
          guided_grad(backend, res.next_latent, std::max(t - 1, 0), cs, cfg);
      rec.grad_norm = detail::apply_update(res.next_latent, gg.direction,
                                           alpha, cfg, backend.grid());
      if (!res.next_latent.finite() || !std::isfinite(rec.grad_norm))
        throw pipeline_error("ear_generate: non-finite update at t=" +
                             std::to_string(t));
    }
    z = std::move(res.next_latent);
    rec.latent_hash = latent_hash(z);
    trace.steps.push_back(rec);
    if (t == 1) trace.final_attention = std::move(res.attention);
  }
  trace.final_latent = std::move(z);
  return trace;
}

using VerifierFn = std::function<VerifierReport(
    const Latent& final_latent, const AttentionStack& final_attention,
    const ConstraintSet& cs)>;

inline VerifierFn oracle_verifier(const BlobBackend& backend) {
  return [&backend](const Latent& z, const AttentionStack& stack,
                    const ConstraintSet& cs) {
    return oracle_verify(backend.ground_truth(z), stack, cs);
  };
}

struct RefinementRecord {
  int round = 0;
  int iteration = 0;   // outer while-loop index within the round
  int entity = 0;      // the popped faulty entity
  double correction = 0.0;
  double preservation = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
  int n_faulty = 0;    // after moving the entity to proper
  int n_proper = 0;
  uint64_t latent_hash = 0;
};

struct RefineResult {
  GenerationTrace stage1;
  GenerationTrace stage2;  // valid iff stage2_ran
  bool stage2_ran = false;
  std::vector<VerifierReport> reports;
  std::vector<FaultClassification> classifications;
  std::vector<RefinementRecord> refinement_log;

  const GenerationTrace& final_trace() const {
    return stage2_ran ? stage2 : stage1;
  }
  const Latent& final_latent() const { return final_trace().final_latent; }
  const AttentionStack& final_attention() const {
    return final_trace().final_attention;
  }
};

// Two-stage refinement: generate and verify, then repair the initial noise
// entity by entity (worst first) against correction + preservation, then
// regenerate. `preservation_enabled` exists for the ablation study.
inline RefineResult refine(const BlobBackend& backend, const ConstraintSet& cs,
                           const PipelineConfig& cfg, const Latent& initial,
                           const VerifierFn& verifier,
                           bool preservation_enabled = true) {
  cfg.validate();
  RefineResult out;
  Latent noise = initial;
  out.stage1 = ear_generate(backend, cs, cfg, noise);
  const GenerationTrace* current = &out.stage1;

  for (int round = 0; round < cfg.max_rounds; ++round) {
    VerifierReport report =
        verifier(current->final_latent, current->final_attention, cs);
    FaultClassification cls = classify(report, cfg.lambda);
    out.reports.push_back(report);
    out.classifications.push_back(cls);
    if (cls.faulty.empty()) break;

    // reference maps are the round-entry initial-step attention: a proper
    // entity is preserved when its noise-level map stays where it was, so
    // the regeneration reproduces the previous stage's behavior for it.
    // Repaired entities swap in their corrected initial-step map below.
    AttentionStack init_attention = backend.step(noise, cfg.total_steps).attention;
    AttentionStack reference = init_attention;
    std::vector<int> proper = cls.proper;
    std::vector<FaultyEntity> faulty = cls.faulty;

    int iteration = 0;
    while (!faulty.empty()) {
      const FaultyEntity f = faulty.front();
      faulty.erase(faulty.begin());

      for (int k = 0; k < cfg.inner_steps; ++k) {
        StepResult res = backend.step(noise, cfg.total_steps, StepMode::Smooth);
        StackGrad g_corr = zero_grad(res.attention);
        // subject-only restriction: the object-role missing terms reward
        // other entities for exceeding f, i.e. crushing the entity being
        // repaired; they are excluded from the correction direction
        const double corr =
            correction_loss(res.attention, cs, report, f.entity, cfg.lambda,
                            cfg.weights, cfg.reducer, &g_corr,
                            /*subject_only=*/true);
        StackGrad g_pres = zero_grad(res.attention);
        double pres = 0;
        if (preservation_enabled) {
          pres = preservation_loss(res.attention, reference, cs, proper);
          // Soft IoU has a nonzero gradient even at a perfect match (it
          // keeps inflating the map), so the restoring gradient only
          // engages for entities whose map has actually drifted.
          for (int e : proper) {
            const auto& idx = cs.entities[e].indices;
            const double self = iou(entity_map(reference, idx),
                                    entity_map(reference, idx));
            const double now = iou(entity_map(res.attention, idx),
                                   entity_map(reference, idx));
            if (now < 0.9 * self)
              preservation_loss(res.attention, reference, cs, {e}, &g_pres);
          }
        }

        Latent dir;
        dir.values.assign(noise.values.size(), 0.0);
        StepCotangent cot_corr, cot_pres;
        cot_corr.d_attention = std::move(g_corr);
        Latent corr_grad = backend.vjp(noise, cfg.total_steps, cot_corr);
        detail::strip_amp_lowering(corr_grad);
        // correction repairs entity f; its amplitude budget must not be
        // spent boosting the entities that are already fine
        for (int tok = 0; tok < corr_grad.token_count(); ++tok) {
          const auto& own = cs.entities[f.entity].indices;
          if (std::find(own.begin(), own.end(), tok) == own.end())
            corr_grad.slot(tok, 3) = 0.0;
        }
        detail::accumulate_clipped(dir, corr_grad, cfg.weights.correction, cfg);
        if (preservation_enabled) {
          cot_pres.d_attention = std::move(g_pres);
          detail::accumulate_clipped(
              dir, backend.vjp(noise, cfg.total_steps, cot_pres),
              cfg.weights.preservation, cfg);
        }
        const double gnorm = detail::apply_update(noise, dir, cfg.alpha_noise,
                                                  cfg, backend.grid());
        if (!noise.finite())
          throw pipeline_error("refine: non-finite noise update");

        RefinementRecord rec;
        rec.round = round;
        rec.iteration = iteration;
        rec.entity = f.entity;
        rec.correction = corr;
        rec.preservation = pres;
        rec.total = refinement_loss(corr, pres, cfg.weights);
        rec.grad_norm = gnorm;
        rec.n_faulty = static_cast<int>(faulty.size());
        rec.n_proper = static_cast<int>(proper.size());
        rec.latent_hash = latent_hash(noise);
        out.refinement_log.push_back(rec);

        // preservation always measures the current noise
        init_attention = backend.step(noise, cfg.total_steps).attention;
      }

      // the repaired entity's reference becomes its corrected map
      for (int tok : cs.entities[f.entity].indices)
        reference.maps[tok] = init_attention.maps[tok];
      proper.push_back(f.entity);
      if (!out.refinement_log.empty()) {
        out.refinement_log.back().n_proper = static_cast<int>(proper.size());
      }
      ++iteration;
    }

    out.stage2 = ear_generate(backend, cs, cfg, noise);
    out.stage2_ran = true;
    current = &out.stage2;
  }
  return out;
}

// --- batch runner -----------------------------------------------------

struct Scenario {
  std::string name;
  ConstraintSet cs;
  uint64_t seed = 0;
  std::map<int, double> amplitude_override;  // entity index -> amplitude
  // entity index -> initial center; pairs a fault with a chosen location
  // (e.g. on top of another entity) for refinement fixtures
  std::map<int, std::pair<double, double>> center_override;
};

struct SceneMetrics {
  int entities = 0, entities_present = 0;
  int attributes = 0, attributes_bound = 0;
  int relations = 0, relations_satisfied = 0;
  bool failed = false;
  std::string error;

  double presence_rate() const {
    return entities ? static_cast<double>(entities_present) / entities : 1.0;
  }
  double attribute_rate() const {
    return attributes ? static_cast<double>(attributes_bound) / attributes
                      : 1.0;
  }
  double spatial_rate() const {
    return relations ? static_cast<double>(relations_satisfied) / relations
                     : 1.0;
  }
  // mean over the categories the scene actually has
  double aggregate() const {
    double sum = 0;
    int n = 0;
    if (entities) sum += presence_rate(), ++n;
    if (attributes) sum += attribute_rate(), ++n;
    if (relations) sum += spatial_rate(), ++n;
    return n ? sum / n : 1.0;
  }
};

// Satisfaction checks on a finished run: entity presence from the final
// scene truth (amplitude >= 0.5), attribute binding via IoU >= threshold,
// spatial ordering via signed center-of-mass gaps.
inline SceneMetrics evaluate_scene(const BlobBackend& backend,
                                   const ConstraintSet& cs,
                                   const Latent& final_latent,
                                   const AttentionStack& final_attention,
                                   double attr_iou_threshold = 0.2) {
  SceneMetrics m;
  const SceneTruth truth = backend.ground_truth(final_latent);
  for (const auto& ent : cs.entities) {
    ++m.entities;
    double amp = 0;
    for (int tok : ent.indices) amp += truth.blobs.at(tok).amplitude;
    if (amp / ent.indices.size() >= 0.5) ++m.entities_present;
  }
  for (const auto& ab : cs.attributes) {
    ++m.attributes;
    const double v = iou(entity_map(final_attention, cs.entities[ab.entity].indices),
                         entity_map(final_attention, ab.indices));
    if (v >= attr_iou_threshold) ++m.attributes_bound;
  }
  for (const auto& rel : cs.relations) {
    const AxisFlags fl = axis_flags(rel.kind);
    if (fl.x == 0 && fl.y == 0) continue;
    ++m.relations;
    const Axis axis = fl.x ? Axis::X : Axis::Y;
    const double c1 = center_of_mass(
        entity_map(final_attention, cs.entities[rel.e1].indices), axis);
    const double c2 = center_of_mass(
        entity_map(final_attention, cs.entities[rel.e2].indices), axis);
    if (direction(rel.kind) * (c2 - c1) < 0) ++m.relations_satisfied;
  }
  return m;
}

inline Latent scenario_latent(const BlobBackend& backend, const Scenario& sc) {
  Latent z = backend.init_latent(sc.seed, sc.cs.prompt_len);
  for (const auto& [entity, amplitude] : sc.amplitude_override) {
    for (int tok : sc.cs.entities.at(entity).indices)
      z.slot(tok, 3) = std::log(amplitude / (1.0 - amplitude));
  }
  for (const auto& [entity, center] : sc.center_override) {
    for (int tok : sc.cs.entities.at(entity).indices) {
      z.slot(tok, 0) = center.first;
      z.slot(tok, 1) = center.second;
    }
  }
  return z;
}

struct BatchResult {
  std::vector<SceneMetrics> per_scene;  // scenario order
  SceneMetrics totals;                  // summed counts
};

// Runs every scenario (generation only, or full refinement) on a bounded
// worker pool; aggregation is by scenario order, independent of scheduling.
inline BatchResult batch_run(const BlobBackend& backend,
                             const std::vector<Scenario>& scenarios,
                             const PipelineConfig& cfg, bool use_refine = false,
                             int jobs = 0) {
  BatchResult out;
  out.per_scene.resize(scenarios.size());
  if (jobs <= 0) jobs = static_cast<int>(std::thread::hardware_concurrency());
  if (jobs < 1) jobs = 1;

  std::atomic<size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= scenarios.size()) return;
      const Scenario& sc = scenarios[i];
      PipelineConfig run_cfg = cfg;
      run_cfg.seed = sc.seed;
      try {
        const Latent z0 = scenario_latent(backend, sc);
        if (use_refine) {
          RefineResult r = refine(backend, sc.cs, run_cfg, z0,
                                  oracle_verifier(backend));
          out.per_scene[i] = evaluate_scene(backend, sc.cs, r.final_latent(),
                                            r.final_attention());
        } else {
          GenerationTrace t = ear_generate(backend, sc.cs, run_cfg, z0);
          out.per_scene[i] = evaluate_scene(backend, sc.cs, t.final_latent,
                                            t.final_attention);
        }
      } catch (const std::exception& e) {
        out.per_scene[i].failed = true;
        out.per_scene[i].error = e.what();
      }
    }
  };

  std::vector<std::thread> pool;
  for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
  for (auto& th : pool) th.join();

  for (const auto& m : out.per_scene) {
    out.totals.entities += m.entities;
    out.totals.entities_present += m.entities_present;
    out.totals.attributes += m.attributes;
    out.totals.attributes_bound += m.attributes_bound;
    out.totals.relations += m.relations;
    out.totals.relations_satisfied += m.relations_satisfied;
    if (m.failed) out.totals.failed = true;
  }
  return out;
}

}  // namespace ear
