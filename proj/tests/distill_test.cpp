#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "pmqve/distill.hpp"
#include "pmqve/rng.hpp"

using namespace pmqve;

namespace {

Tensor noise(Shape shape, SplitMix64& rng) {
  std::vector<double> v(shape_product(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

struct LossCase {
  std::vector<Tensor> student_out;
  std::vector<std::vector<Tensor>> student_feat;
  std::vector<std::vector<TeacherSignal>> ints;
  std::vector<TeacherSignal> fp;
};

LossCase random_case(SplitMix64& rng, std::size_t batch, std::size_t taps, std::size_t k) {
  LossCase c;
  const auto signal = [&] {
    TeacherSignal s{noise({2, 3}, rng), {}};
    for (std::size_t f = 0; f < taps; ++f) s.features.push_back(noise({2, 4}, rng));
    return s;
  };
  for (std::size_t s = 0; s < batch; ++s) {
    c.student_out.push_back(noise({2, 3}, rng));
    c.student_feat.emplace_back();
    for (std::size_t f = 0; f < taps; ++f) c.student_feat.back().push_back(noise({2, 4}, rng));
  }
  c.ints.resize(k);
  for (auto& t : c.ints) {
    for (std::size_t s = 0; s < batch; ++s) t.push_back(signal());
  }
  for (std::size_t s = 0; s < batch; ++s) c.fp.push_back(signal());
  return c;
}

PmtdLoss build(Graph& g, const LossCase& c, double lambda, double a) {
  std::vector<StudentView> views;
  for (std::size_t s = 0; s < c.student_out.size(); ++s) {
    StudentView v{g.input(c.student_out[s]), {}};
    for (const auto& f : c.student_feat[s]) v.features.push_back(g.input(f));
    views.push_back(v);
  }
  return pmtd_loss(g, views, c.ints, c.fp, lambda, a);
}

// Direct evaluation of the per-teacher term without the graph.
double teacher_term(const LossCase& c, const std::vector<TeacherSignal>& t, double lambda) {
  double rec = 0, feat = 0;
  const std::size_t batch = c.student_out.size();
  std::size_t nf = 0;
  for (std::size_t s = 0; s < batch; ++s) {
    rec += mse(c.student_out[s], t[s].output);
    for (std::size_t f = 0; f < t[s].features.size(); ++f, ++nf) feat += mse(c.student_feat[s][f], t[s].features[f]);
  }
  return rec / static_cast<double>(batch) + (nf ? lambda * feat / static_cast<double>(nf) : 0.0);
}

struct Toy {
  Dataset train;
  FrameMixerModel model;
};

const Toy& toy() {
  static const Toy t = [] {
    SyntheticDatasetConfig dc;
    dc.samples = 64;
    dc.seed = 21;
    Toy out{gen_frames(dc), init_model(3, 16, 32, 5)};
    FitConfig fc;
    fc.steps = 60;
    fit_fp_model(out.model, out.train, fc);
    return out;
  }();
  return t;
}

DistillConfig small_cfg() {
  DistillConfig c;
  c.steps = 12;
  c.batch_size = 4;
  c.calibration_samples = 32;
  c.seed = 3;
  return c;
}

SchemeSet init_at(int bits) {
  return calibrate_model(toy().model, toy().train.inputs, bits, 8, true, BoundMethod::btbi, {}, 32);
}

}  // namespace

TEST(Alpha, Examples) {
  EXPECT_EQ(alpha(0, 10), 0.0);
  EXPECT_EQ(alpha(5, 10), 0.5);
  EXPECT_EQ(alpha(10, 10), 1.0);
  EXPECT_EQ(alpha(1000, 10), 1.0);
  EXPECT_THROW(alpha(1, 0), Error);
}

TEST(Alpha, MonotoneAndBounded) {
  double prev = 0;
  for (std::size_t t = 0; t < 100; ++t) {
    const double a = alpha(t, 37);
    EXPECT_GE(a, prev);
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
    prev = a;
  }
}

TEST(PmtdObjective, Examples) {
  EXPECT_EQ(pmtd_objective(3.0, 7.0, 0.0), 3.0);
  EXPECT_EQ(pmtd_objective(3.0, 7.0, 1.0), 5.0);
}

TEST(PmtdLoss, MatchesDirectEvaluation) {
  SplitMix64 rng(99);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t k = static_cast<std::size_t>(trial % 3);
    const std::size_t taps = static_cast<std::size_t>(trial % 2 + 1);
    const LossCase c = random_case(rng, 3, taps, k);
    const double lambda = rng.uniform(0, 6);
    const double a = k ? rng.uniform(0, 1) : rng.uniform(0.1, 1);
    Graph g;
    const PmtdLoss l = build(g, c, lambda, a);
    double l_int = 0;
    for (const auto& t : c.ints) l_int += teacher_term(c, t, lambda);
    const double l_fp = teacher_term(c, c.fp, lambda);
    EXPECT_NEAR(l.report.l_fp, l_fp, 1e-12 * std::max(1.0, l_fp));
    EXPECT_NEAR(l.report.l_int, l_int, 1e-12 * std::max(1.0, l_int));
    EXPECT_NEAR(g.scalar(l.loss), pmtd_objective(l_int, l_fp, a), 1e-12);
    EXPECT_EQ(l.report.l_pmtd, g.scalar(l.loss));
    EXPECT_EQ(l.report.teachers.size(), k + 1);
    EXPECT_EQ(l.report.teachers.back(), "fp");
  }
}

TEST(PmtdLoss, PerfectMatchIsZero) {
  SplitMix64 rng(5);
  LossCase c = random_case(rng, 2, 2, 2);
  for (auto* teacher : {&c.ints[0], &c.ints[1], &c.fp}) {
    for (std::size_t s = 0; s < 2; ++s) {
      (*teacher)[s].output = c.student_out[s];
      (*teacher)[s].features = c.student_feat[s];
    }
  }
  Graph g;
  EXPECT_EQ(g.scalar(build(g, c, 5.0, 0.7).loss), 0.0);
}

TEST(PmtdLoss, AlphaZeroUsesOnlyIntermediateTeachers) {
  SplitMix64 rng(6);
  const LossCase c = random_case(rng, 2, 1, 1);
  Graph g;
  const PmtdLoss l = build(g, c, 5.0, 0.0);
  EXPECT_EQ(g.scalar(l.loss), l.report.l_int);
}

TEST(PmtdLoss, AlphaOneAveragesTheTwoTerms) {
  SplitMix64 rng(7);
  const LossCase c = random_case(rng, 2, 1, 1);
  Graph g;
  const PmtdLoss l = build(g, c, 5.0, 1.0);
  EXPECT_NEAR(g.scalar(l.loss), (l.report.l_int + l.report.l_fp) / 2, 1e-14);
}

TEST(PmtdLoss, NoSupervisionSignal) {
  SplitMix64 rng(8);
  const LossCase c = random_case(rng, 2, 1, 0);
  Graph g;
  try {
    build(g, c, 5.0, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "no supervision signal");
  }
}

TEST(DistillStage, ZeroStepsKeepsInitialScheme) {
  auto cfg = small_cfg();
  cfg.steps = 0;
  const SchemeSet init = init_at(4);
  const std::vector<TeacherBundle> teachers{{"fp", 0, toy().model, std::nullopt}};
  const StageResult r = distill_stage(toy().model, 4, teachers, init, toy().train, cfg);
  EXPECT_EQ(r.refined, init);
  EXPECT_EQ(r.best_step, 0u);
  EXPECT_TRUE(r.log.empty());
  EXPECT_EQ(r.final_objective, r.initial_objective);
}

TEST(DistillStage, NeverWorseThanInitialObjective) {
  for (int bits : {4, 2}) {
    const SchemeSet init = init_at(bits);
    std::vector<TeacherBundle> teachers{{"8bit", 8, toy().model, init_at(8)}, {"fp", 0, toy().model, std::nullopt}};
    const StageResult r = distill_stage(toy().model, bits, teachers, init, toy().train, small_cfg());
    EXPECT_LE(r.final_objective, r.initial_objective);
    EXPECT_EQ(r.log.size(), 12u);
    EXPECT_EQ(r.teacher_labels, (std::vector<std::string>{"8bit", "fp"}));
    for (const auto& [site, s] : r.refined) {
      for (const auto& p : s.params()) EXPECT_GT(p.ub(), p.lb()) << site;
    }
  }
}

TEST(DistillStage, AlphaFollowsWarmup) {
  auto cfg = small_cfg();
  cfg.t_warmup = 4;
  std::vector<TeacherBundle> teachers{{"8bit", 8, toy().model, init_at(8)}, {"fp", 0, toy().model, std::nullopt}};
  const StageResult r = distill_stage(toy().model, 4, teachers, init_at(4), toy().train, cfg);
  for (const auto& rep : r.log) EXPECT_EQ(rep.alpha, alpha(rep.step, 4));
}

TEST(DistillStage, NoIntermediateTeacherPinsAlpha) {
  const std::vector<TeacherBundle> teachers{{"fp", 0, toy().model, std::nullopt}};
  const StageResult r = distill_stage(toy().model, 8, teachers, init_at(8), toy().train, small_cfg());
  for (const auto& rep : r.log) EXPECT_EQ(rep.alpha, 1.0);
}

TEST(DistillStage, TeacherValidation) {
  const SchemeSet init = init_at(4);
  const auto run = [&](const std::vector<TeacherBundle>& t) {
    return distill_stage(toy().model, 4, t, init, toy().train, small_cfg());
  };
  try {
    run({{"8bit", 8, toy().model, init_at(8)}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("missing teacher"), std::string::npos);
  }
  EXPECT_THROW(run({{"2bit", 2, toy().model, init_at(2)}, {"fp", 0, toy().model, std::nullopt}}), Error);
  EXPECT_THROW(run({{"fp", 0, toy().model, std::nullopt}, {"fp2", 0, toy().model, std::nullopt}}), Error);
  EXPECT_THROW(distill_stage(toy().model, 2, {{"fp", 0, toy().model, std::nullopt}}, init, toy().train, small_cfg()),
               Error);
}

TEST(DistillConfig, Validation) {
  DistillConfig c;
  c.teacher_bits = {4, 8};
  EXPECT_THROW(c.validate(2), Error);
  c.teacher_bits = {8, 2};
  EXPECT_THROW(c.validate(2), Error);
  c = DistillConfig{};
  c.lr = -1;
  EXPECT_THROW(c.validate(2), Error);
  c = DistillConfig{};
  c.tap_points = {"nowhere"};
  EXPECT_THROW(c.validate(2), Error);
  EXPECT_EQ(DistillConfig{}.warmup_steps(), 50u);
  EXPECT_EQ(DistillConfig{}.checkpoint_interval(), 25u);
}

TEST(Pipeline, TeacherSetsPerStage) {
  const PipelineResult r = progressive_pipeline(toy().model, 2, toy().train, small_cfg());
  ASSERT_EQ(r.stages.size(), 3u);
  EXPECT_EQ(r.stages[0].teacher_labels, (std::vector<std::string>{"fp"}));
  EXPECT_EQ(r.stages[1].teacher_labels, (std::vector<std::string>{"8bit", "fp"}));
  EXPECT_EQ(r.stages[2].teacher_labels, (std::vector<std::string>{"8bit", "4bit", "fp"}));
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r.stages[i].bits, teacher_ladder()[i]);
    for (const auto& [before, after] : r.teacher_checksums[i]) EXPECT_EQ(before, after);
  }
}

TEST(Pipeline, NearestTeacherOnly) {
  auto cfg = small_cfg();
  cfg.nearest_teacher_only = true;
  const PipelineResult r = progressive_pipeline(toy().model, 2, toy().train, cfg);
  EXPECT_EQ(r.stages[2].teacher_labels, (std::vector<std::string>{"4bit", "fp"}));
}

TEST(Pipeline, TargetSelectsStages) {
  EXPECT_EQ(progressive_pipeline(toy().model, 8, toy().train, small_cfg()).stages.size(), 1u);
  EXPECT_THROW(progressive_pipeline(toy().model, 3, toy().train, small_cfg()), Error);
}

TEST(Pipeline, RerunsAreBitIdentical) {
  const PipelineResult a = progressive_pipeline(toy().model, 4, toy().train, small_cfg());
  const PipelineResult b = progressive_pipeline(toy().model, 4, toy().train, small_cfg());
  ASSERT_EQ(a.stages.size(), b.stages.size());
  for (std::size_t i = 0; i < a.stages.size(); ++i) {
    EXPECT_EQ(a.stages[i].refined, b.stages[i].refined);
    EXPECT_EQ(a.stages[i].final_objective, b.stages[i].final_objective);
    ASSERT_EQ(a.stages[i].log.size(), b.stages[i].log.size());
    for (std::size_t t = 0; t < a.stages[i].log.size(); ++t) {
      EXPECT_EQ(a.stages[i].log[t].l_pmtd, b.stages[i].log[t].l_pmtd);
    }
  }
}

TEST(Checksum, SensitiveToWeightsAndBounds) {
  const SchemeSet s = init_at(4);
  const std::uint64_t base = checksum(toy().model, &s);
  EXPECT_EQ(base, checksum(toy().model, &s));
  EXPECT_NE(base, checksum(toy().model, nullptr));
  FrameMixerModel m = toy().model;
  m.w1.mutable_values()[0] += 1e-9;
  EXPECT_NE(base, checksum(m, &s));
}
