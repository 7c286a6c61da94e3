#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "pmqve/autograd.hpp"
#include "pmqve/error.hpp"
#include "pmqve/fakequant.hpp"
#include "pmqve/rng.hpp"
#include "pmqve/search.hpp"
#include "pmqve/tensor.hpp"
#include "pmqve/toyzoo.hpp"

namespace pmqve {

/// Warm-up coefficient min(1, t / t_warmup).
inline double alpha(std::size_t t, std::size_t t_warmup) {
  if (t_warmup < 1) throw Error("t_warmup must be at least 1");
  return std::min(1.0, static_cast<double>(t) / static_cast<double>(t_warmup));
}

/// (l_int + alpha * l_fp) / (1 + alpha).
inline double pmtd_objective(double l_int, double l_fp, double a) { return (l_int + a * l_fp) / (1.0 + a); }

struct DistillConfig {
  double lambda = 5.0;
  /// Zero selects steps / 4 (at least 1).
  std::size_t t_warmup = 0;
  /// Intermediate teacher bit-widths for a single stage, strictly decreasing.
  /// progressive_pipeline fills this in per stage.
  std::vector<int> teacher_bits;
  std::size_t steps = 200;
  double lr = 0.02;
  std::uint64_t seed = 0;
  std::vector<std::string> tap_points = default_tap_points();
  std::size_t batch_size = 16;
  /// Fine-tune weights along with the bounds.
  bool train_weights = false;
  /// Restrict a stage to the nearest (lowest-bit) intermediate teacher.
  bool nearest_teacher_only = false;
  bool per_frame = true;
  /// Bit-width of the per-tensor weight sites; 0 uses the student bit-width.
  int weight_bits = 8;
  BoundGradient bound_gradient = BoundGradient::clipped;
  /// Full-training-set objective is evaluated every this many steps (0 =
  /// steps / 8, at least 1); the best evaluated state is returned.
  std::size_t checkpoint_every = 0;
  SearchConfig search;
  /// Samples used to calibrate each stage's initial bounds (0 = all).
  std::size_t calibration_samples = 512;

  std::size_t checkpoint_interval() const {
    return checkpoint_every ? checkpoint_every : std::max<std::size_t>(1, steps / 8);
  }

  std::size_t warmup_steps() const { return t_warmup ? t_warmup : std::max<std::size_t>(1, steps / 4); }

  void validate(int student_bits) const {
    if (!(lambda >= 0.0)) throw Error("lambda: must be non-negative");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw Error("lr: must be positive and finite");
    if (batch_size < 1) throw Error("batch_size: must be at least 1");
    for (std::size_t i = 0; i < teacher_bits.size(); ++i) {
      if (teacher_bits[i] <= student_bits) throw Error("teacher_bits: every teacher must exceed the student bit-width");
      if (i && teacher_bits[i] >= teacher_bits[i - 1]) throw Error("teacher_bits: must be strictly decreasing");
    }
    for (const auto& tap : tap_points) {
      const auto& known = default_tap_points();
      if (std::find(known.begin(), known.end(), tap) == known.end()) {
        throw Error("tap_points: unknown tap '" + tap + "'");
      }
    }
    if (weight_bits < 0 || weight_bits > kMaxBits) throw Error("weight_bits: out of range");
    search.validate();
  }

  int weight_bits_for(int student_bits) const { return weight_bits ? weight_bits : student_bits; }
};

struct LossReport {
  std::size_t step = 0;
  double alpha = 0.0;
  double l_int = 0.0;
  double l_fp = 0.0;
  /// One entry per teacher: intermediate teachers first, full precision last.
  std::vector<std::string> teachers;
  std::vector<double> l_rec;
  std::vector<double> l_feat;
  double l_pmtd = 0.0;
};

/// A frozen teacher: weights plus schemes, or no schemes for full precision.
struct TeacherBundle {
  std::string label;
  int bits = 0;  // 0 marks the full-precision teacher
  FrameMixerModel model;
  std::optional<SchemeSet> schemes;

  bool full_precision() const { return !schemes.has_value(); }
};

/// Teacher output and features for one sample.
struct TeacherSignal {
  Tensor output;
  std::vector<Tensor> features;  // aligned with DistillConfig::tap_points
};

/// Student nodes for one sample, features aligned with the tap list.
struct StudentView {
  NodeId output;
  std::vector<NodeId> features;
};

struct PmtdLoss {
  NodeId loss;
  LossReport report;
};

/// Assembles the distillation objective over a batch.
///
/// Per teacher: l_rec is the output MSE and l_feat the tap-averaged feature
/// MSE, both averaged over the batch; the teacher term is l_rec + lambda *
/// l_feat. l_int sums the intermediate teachers, l_fp is the full-precision
/// term, and the total is (l_int + a * l_fp) / (1 + a).
///
/// `intermediate[k][s]` is teacher k's signal for batch sample s.
inline PmtdLoss pmtd_loss(Graph& g, const std::vector<StudentView>& student,
                          const std::vector<std::vector<TeacherSignal>>& intermediate,
                          const std::vector<TeacherSignal>& fp, double lambda, double a,
                          const std::vector<std::string>& teacher_labels = {}, std::size_t step = 0) {
  if (student.empty()) throw Error("pmtd_loss: empty batch");
  if (intermediate.empty() && a == 0.0) throw Error("no supervision signal");
  const std::size_t batch = student.size();
  const std::size_t taps = student.front().features.size();

  const auto teacher_terms = [&](const std::vector<TeacherSignal>& signals) {
    if (signals.size() != batch) throw Error("pmtd_loss: teacher batch size mismatch");
    std::vector<NodeId> rec;
    std::vector<NodeId> feat;
    for (std::size_t s = 0; s < batch; ++s) {
      if (student[s].features.size() != taps || signals[s].features.size() != taps) {
        throw Error("pmtd_loss: tap mismatch between student and teacher");
      }
      rec.push_back(g.mse_loss(student[s].output, g.constant(signals[s].output)));
      for (std::size_t f = 0; f < taps; ++f) {
        feat.push_back(g.mse_loss(student[s].features[f], g.constant(signals[s].features[f])));
      }
    }
    const NodeId rec_node = g.scalar_combine(rec, std::vector<double>(rec.size(), 1.0 / static_cast<double>(batch)));
    std::optional<NodeId> feat_node;
    if (!feat.empty()) {
      feat_node = g.scalar_combine(feat, std::vector<double>(feat.size(), 1.0 / static_cast<double>(feat.size())));
    }
    const NodeId term = feat_node ? g.scalar_combine({rec_node, *feat_node}, {1.0, lambda})
                                  : g.scalar_combine({rec_node}, {1.0});
    return std::tuple{term, g.scalar(rec_node), feat_node ? g.scalar(*feat_node) : 0.0};
  };

  PmtdLoss out;
  LossReport& r = out.report;
  r.step = step;
  r.alpha = a;
  std::vector<NodeId> int_terms;
  for (const auto& signals : intermediate) {
    const auto [term, rec, feat] = teacher_terms(signals);
    int_terms.push_back(term);
    r.l_rec.push_back(rec);
    r.l_feat.push_back(feat);
  }
  const auto [fp_term, fp_rec, fp_feat] = teacher_terms(fp);
  r.l_rec.push_back(fp_rec);
  r.l_feat.push_back(fp_feat);
  r.l_fp = g.scalar(fp_term);

  if (int_terms.empty()) {
    out.loss = g.scalar_combine({fp_term}, {a / (1.0 + a)});
  } else {
    const NodeId l_int = g.scalar_combine(int_terms, std::vector<double>(int_terms.size(), 1.0));
    r.l_int = g.scalar(l_int);
    out.loss = g.scalar_combine({l_int, fp_term}, {1.0 / (1.0 + a), a / (1.0 + a)});
  }
  r.l_pmtd = g.scalar(out.loss);

  if (teacher_labels.empty()) {
    for (std::size_t k = 0; k < intermediate.size(); ++k) r.teachers.push_back("int" + std::to_string(k));
    r.teachers.push_back("fp");
  } else {
    if (teacher_labels.size() != intermediate.size() + 1) throw Error("pmtd_loss: label count mismatch");
    r.teachers = teacher_labels;
  }
  return out;
}

/// FNV-1a over weights and scheme bounds; used to prove teachers unchanged.
inline std::uint64_t checksum(const FrameMixerModel& m, const SchemeSet* schemes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto mix_bytes = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  const auto mix_double = [&](double v) { mix_bytes(&v, sizeof v); };
  for (double v : m.w1.values()) mix_double(v);
  for (double v : m.w2.values()) mix_double(v);
  if (schemes) {
    for (const auto& [name, s] : *schemes) {
      mix_bytes(name.data(), name.size());
      for (const auto& p : s.params()) {
        mix_double(p.lb());
        mix_double(p.ub());
        const int bits = p.bits();
        mix_bytes(&bits, sizeof bits);
      }
    }
  }
  return h;
}

inline std::uint64_t checksum(const TeacherBundle& t) {
  return checksum(t.model, t.schemes ? &*t.schemes : nullptr);
}

struct StageResult {
  int bits = 0;
  std::vector<std::string> teacher_labels;
  SchemeSet initial;
  SchemeSet refined;
  FrameMixerModel model;
  std::vector<LossReport> log;
  /// Objective over the whole training set at the final alpha, for the
  /// initial and the returned state.
  double initial_objective = 0.0;
  double final_objective = 0.0;
  /// Steps taken by the returned state; 0 when the initial state was kept.
  std::size_t best_step = 0;
};

namespace detail {

/// Trainable state of a student: weights and one bound pair per site.
struct StudentParams {
  ParamSet params;
  TrainableParam* w1 = nullptr;
  TrainableParam* w2 = nullptr;
  std::map<std::string, std::size_t> bounds;

  StudentParams(const FrameMixerModel& m, const SchemeSet& schemes, bool train_weights) {
    w1 = &params.add_weight("w1", m.w1);
    w2 = &params.add_weight("w2", m.w2);
    w1->frozen = w2->frozen = !train_weights;
    for (const auto& [site, scheme] : schemes) {
      std::vector<double> lb;
      std::vector<double> ub;
      for (const auto& p : scheme.params()) {
        lb.push_back(p.lb());
        ub.push_back(p.ub());
      }
      const Shape shape{lb.size()};
      bounds.emplace(site, params.add_bounds(site, Tensor(shape, lb), Tensor(shape, ub)));
    }
  }

  SchemeSet schemes(const SchemeSet& like) const {
    SchemeSet out;
    for (const auto& [site, scheme] : like) {
      const auto& lb = params.lb(bounds.at(site)).value;
      const auto& ub = params.ub(bounds.at(site)).value;
      std::vector<QuantParams> ps;
      for (std::size_t i = 0; i < lb.size(); ++i) ps.emplace_back(lb[i], ub[i], scheme.bits());
      out.emplace(site, FrameQuantScheme(site, scheme.per_frame(), std::move(ps)));
    }
    return out;
  }

  FrameMixerModel model(const FrameMixerModel& like) const {
    FrameMixerModel m = like;
    m.w1 = w1->value;
    m.w2 = w2->value;
    return m;
  }
};

inline TeacherSignal teacher_signal(const TeacherBundle& t, const Tensor& x, const std::vector<std::string>& taps) {
  auto r = forward_with_taps(t.model, x, t.schemes ? &*t.schemes : nullptr);
  TeacherSignal sig{std::move(r.output), {}};
  for (const auto& tap : taps) sig.features.push_back(std::move(r.features.at(tap)));
  return sig;
}

inline StudentView student_view(const StudentNodes& n, const std::vector<std::string>& taps) {
  StudentView v{n.output, {}};
  for (const auto& tap : taps) v.features.push_back(n.features.at(tap));
  return v;
}

}  // namespace detail

/// Fine-stage refinement of a student's bounds under teacher supervision.
///
/// `teachers` holds the intermediate-bit teachers (any order) and exactly one
/// full-precision teacher. With no intermediate teacher alpha is pinned to 1
/// so the full-precision term supervises from the first step.
inline StageResult distill_stage(const FrameMixerModel& student_model, int student_bits,
                                 const std::vector<TeacherBundle>& teachers, const SchemeSet& init_scheme,
                                 const Dataset& train, const DistillConfig& cfg) {
  cfg.validate(student_bits);
  detail::check_scheme_coverage(init_scheme);
  for (const auto& site : activation_sites()) {
    if (init_scheme.at(site).bits() != student_bits) {
      throw Error("initial scheme for '" + site + "' does not use the student bit-width");
    }
  }

  const TeacherBundle* fp = nullptr;
  std::vector<const TeacherBundle*> ints;
  for (const auto& t : teachers) {
    if (t.full_precision()) {
      if (fp) throw Error("more than one full-precision teacher");
      fp = &t;
    } else {
      if (t.bits <= student_bits) throw Error("teacher '" + t.label + "' does not exceed the student bit-width");
      ints.push_back(&t);
    }
  }
  if (!fp) throw Error("missing teacher: a full-precision teacher is required");
  std::sort(ints.begin(), ints.end(), [](auto* a, auto* b) { return a->bits > b->bits; });

  StageResult result;
  result.bits = student_bits;
  result.initial = init_scheme;
  for (auto* t : ints) result.teacher_labels.push_back(t->label);
  result.teacher_labels.push_back(fp->label);

  const auto& taps = cfg.tap_points;
  const std::size_t n = train.samples();
  // Teachers are frozen, so their signals are computed once.
  std::vector<std::vector<TeacherSignal>> int_signals(ints.size());
  std::vector<TeacherSignal> fp_signals;
  fp_signals.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    const Tensor x = train.input(s);
    for (std::size_t k = 0; k < ints.size(); ++k) int_signals[k].push_back(detail::teacher_signal(*ints[k], x, taps));
    fp_signals.push_back(detail::teacher_signal(*fp, x, taps));
  }

  const std::size_t warmup = cfg.warmup_steps();
  const auto alpha_at = [&](std::size_t t) { return ints.empty() ? 1.0 : alpha(t, warmup); };

  detail::StudentParams state(student_model, init_scheme, cfg.train_weights);

  // Builds the student graph over `indices` and returns the assembled loss.
  const auto build = [&](Graph& g, const std::vector<std::size_t>& indices, double a, std::size_t step) {
    ModelParamNodes pn =
        add_model_params(g, student_model, *state.w1, *state.w2, &state.params, &state.bounds, init_scheme);
    pn.bound_gradient = cfg.bound_gradient;
    std::vector<StudentView> views;
    std::vector<std::vector<TeacherSignal>> batch_int(ints.size());
    std::vector<TeacherSignal> batch_fp;
    for (std::size_t s : indices) {
      views.push_back(detail::student_view(add_student_forward(g, pn, train.input(s)), taps));
      for (std::size_t k = 0; k < ints.size(); ++k) batch_int[k].push_back(int_signals[k][s]);
      batch_fp.push_back(fp_signals[s]);
    }
    return pmtd_loss(g, views, batch_int, batch_fp, cfg.lambda, a, result.teacher_labels, step);
  };

  const auto full_objective = [&](double a) {
    std::vector<std::size_t> all(n);
    for (std::size_t s = 0; s < n; ++s) all[s] = s;
    Graph g;
    return build(g, all, a, 0).report.l_pmtd;
  };

  const double final_alpha = alpha_at(cfg.steps);
  result.initial_objective = full_objective(final_alpha);
  result.final_objective = result.initial_objective;
  result.refined = init_scheme;
  result.model = student_model;

  SplitMix64 rng(cfg.seed);
  std::vector<std::size_t> indices(cfg.batch_size);
  const std::size_t every = cfg.checkpoint_interval();
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    for (auto& i : indices) i = static_cast<std::size_t>(rng.below(n));
    Graph g;
    PmtdLoss l = build(g, indices, alpha_at(t), t);
    if (!std::isfinite(l.report.l_pmtd)) {
      throw Error("distillation diverged at step " + std::to_string(t) + " (" + std::to_string(student_bits) +
                  "-bit student): loss is not finite");
    }
    state.params.zero_grad();
    g.backward(l.loss);
    sgd_step(state.params, cfg.lr);
    result.log.push_back(std::move(l.report));

    if ((t + 1) % every == 0 || t + 1 == cfg.steps) {
      const double obj = full_objective(final_alpha);
      if (!std::isfinite(obj)) {
        throw Error("distillation diverged after step " + std::to_string(t) + " (" +
                    std::to_string(student_bits) + "-bit student): objective is not finite");
      }
      if (obj < result.final_objective) {
        result.final_objective = obj;
        result.refined = state.schemes(init_scheme);
        result.model = state.model(student_model);
        result.best_step = t + 1;
      }
    }
  }
  return result;
}

/// Bounds for every model site calibrated on full-precision activations.
/// Weight sites use `weight_bits` (0 = `bits`) and are always per tensor.
inline SchemeSet calibrate_model(const FrameMixerModel& m, const Tensor& inputs, int bits, int weight_bits,
                                 bool per_frame, BoundMethod method, const SearchConfig& search,
                                 std::size_t sample_limit = 0) {
  const auto acts = collect_site_activations(m, inputs, sample_limit);
  SchemeSet out;
  for (const auto& [site, x] : acts) {
    CalibrationOptions opt;
    opt.bits = x.frame_axis() ? bits : (weight_bits ? weight_bits : bits);
    opt.per_frame = per_frame && x.frame_axis().has_value();
    opt.method = method;
    opt.search = search;
    out.emplace(site, calibrate_site(x, site, opt).scheme);
  }
  return out;
}

inline const std::vector<int>& teacher_ladder() {
  static const std::vector<int> ladder{8, 4, 2};
  return ladder;
}

struct PipelineResult {
  std::vector<StageResult> stages;
  /// Teacher checksums taken before and after each stage, per stage.
  std::vector<std::vector<std::pair<std::uint64_t, std::uint64_t>>> teacher_checksums;
};

/// Trains the ladder 8 -> 4 -> 2 bits down to `target_bits`. Stage b uses
/// the full-precision model and every earlier stage as teachers (only the
/// nearest one with nearest_teacher_only). Each stage starts from
/// backtracking-search bounds at its bit-width.
inline PipelineResult progressive_pipeline(const FrameMixerModel& fp_model, int target_bits, const Dataset& train,
                                           const DistillConfig& cfg) {
  const auto& ladder = teacher_ladder();
  if (std::find(ladder.begin(), ladder.end(), target_bits) == ladder.end()) {
    throw Error("target bits must be one of 8, 4, 2");
  }
  PipelineResult out;
  std::vector<TeacherBundle> earlier;
  const TeacherBundle fp_teacher{"fp", 0, fp_model, std::nullopt};

  for (int bits : ladder) {
    if (bits < target_bits) break;
    try {
      std::vector<TeacherBundle> teachers;
      std::vector<int> int_bits;
      if (cfg.nearest_teacher_only && !earlier.empty()) {
        teachers.push_back(earlier.back());
      } else {
        teachers = earlier;
      }
      for (const auto& t : teachers) int_bits.push_back(t.bits);
      teachers.push_back(fp_teacher);

      DistillConfig stage_cfg = cfg;
      stage_cfg.teacher_bits = int_bits;
      stage_cfg.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(bits));

      std::vector<std::uint64_t> before;
      for (const auto& t : teachers) before.push_back(checksum(t));

      const SchemeSet init = calibrate_model(fp_model, train.inputs, bits, cfg.weight_bits, cfg.per_frame, BoundMethod::btbi,
                                             cfg.search, cfg.calibration_samples);
      StageResult stage = distill_stage(fp_model, bits, teachers, init, train, stage_cfg);

      std::vector<std::pair<std::uint64_t, std::uint64_t>> sums;
      for (std::size_t i = 0; i < teachers.size(); ++i) sums.emplace_back(before[i], checksum(teachers[i]));
      out.teacher_checksums.push_back(std::move(sums));

      earlier.push_back(TeacherBundle{std::to_string(bits) + "bit", bits, stage.model, stage.refined});
      out.stages.push_back(std::move(stage));
    } catch (const Error& e) {
      throw Error(std::to_string(bits) + "-bit stage: " + e.what());
    }
  }
  return out;
}

}  // namespace pmqve
