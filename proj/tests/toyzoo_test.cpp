#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "pmqve/distill.hpp"
#include "pmqve/toyzoo.hpp"

using namespace pmqve;

namespace {

SyntheticDatasetConfig small_config(std::uint64_t seed, std::size_t samples = 128) {
  SyntheticDatasetConfig c;
  c.seed = seed;
  c.samples = samples;
  return c;
}

struct Fitted {
  Dataset data;
  FrameMixerModel model;
};

const Fitted& fitted() {
  static const Fitted f = [] {
    Fitted out{gen_frames(small_config(5, 256)), init_model(3, 16, 32, 11)};
    FitConfig fc;
    fc.steps = 100;
    fit_fp_model(out.model, out.data, fc);
    return out;
  }();
  return f;
}

std::vector<double> frame_values(const Tensor& t, std::size_t frame) {
  std::vector<double> out;
  const std::size_t f = t.extent(1);
  const std::size_t inner = t.size() / (t.extent(0) * f);
  for (std::size_t s = 0; s < t.extent(0); ++s) {
    for (std::size_t k = 0; k < inner; ++k) out.push_back(t[(s * f + frame) * inner + k]);
  }
  return out;
}

}  // namespace

TEST(GenFrames, ShapesAndDeterminism) {
  const Dataset a = gen_frames(small_config(3));
  const Dataset b = gen_frames(small_config(3));
  const Dataset c = gen_frames(small_config(4));
  EXPECT_EQ(a.inputs.shape(), (Shape{128, 3, 16}));
  EXPECT_EQ(a.targets.shape(), (Shape{128, 3, 16}));
  EXPECT_EQ(a.inputs.frame_axis(), 1u);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_EQ(a.targets, b.targets);
  EXPECT_FALSE(a.inputs == c.inputs);
}

TEST(GenFrames, FrameMeansAndTails) {
  const Dataset d = gen_frames(small_config(8, 6250));
  const std::vector<double> mu{0, 2, 4};
  for (std::size_t f = 0; f < 3; ++f) {
    const auto v = frame_values(d.inputs, f);
    ASSERT_EQ(v.size(), 100000u);
    double sum = 0;
    for (double x : v) sum += x;
    EXPECT_NEAR(sum / static_cast<double>(v.size()), mu[f], 0.05);
    const Tensor t({v.size()}, v);
    EXPECT_LT(std::abs(percentile(t, 0.1) - mu[f]), 4.0);
    EXPECT_LT(std::abs(percentile(t, 99.9) - mu[f]), 4.0);
  }
}

TEST(GenFrames, InjectsOutliers) {
  auto c = small_config(9, 2000);
  c.outlier_rate = 0.01;
  c.outlier_magnitude = 50;
  const Dataset d = gen_frames(c);
  std::size_t count = 0;
  for (double v : d.inputs.values()) count += std::abs(v) > 30 ? 1 : 0;
  const double rate = static_cast<double>(count) / static_cast<double>(d.inputs.size());
  EXPECT_NEAR(rate, 0.01, 0.002);
}

TEST(GenFrames, Validation) {
  auto c = small_config(1);
  c.means = {0, 1};
  EXPECT_THROW(gen_frames(c), Error);
  c = small_config(1);
  c.scales = {1, 0, 1};
  EXPECT_THROW(gen_frames(c), Error);
  c = small_config(1);
  c.outlier_rate = 0.02;
  EXPECT_THROW(gen_frames(c), Error);
}

TEST(Model, FullPrecisionPathMatchesPlainForward) {
  const auto& f = fitted();
  for (std::size_t s = 0; s < 10; ++s) {
    const Tensor x = f.data.input(s);
    const auto r = forward_with_taps(f.model, x, nullptr);
    EXPECT_EQ(r.output, forward(f.model, x));
    EXPECT_EQ(r.output.shape(), x.shape());
  }
}

TEST(Model, RejectsWrongInputShape) {
  const auto& f = fitted();
  EXPECT_THROW(forward_with_taps(f.model, Tensor::zeros({2, 16}), nullptr), Error);
}

TEST(Model, SiteNamesMustMatch) {
  const auto& f = fitted();
  SchemeSet s = calibrate_model(f.model, f.data.inputs, 4, 4, true, BoundMethod::percentile, {}, 64);
  EXPECT_EQ(s.size(), all_sites().size());
  SchemeSet missing = s;
  missing.erase(kSiteQk);
  try {
    forward_with_taps(f.model, f.data.input(0), &missing);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("site-name mismatch"), std::string::npos);
  }
  SchemeSet extra = s;
  extra.emplace("block9.linear", FrameQuantScheme("block9.linear", false, {QuantParams(0, 1, 4)}));
  EXPECT_THROW(forward_with_taps(f.model, f.data.input(0), &extra), Error);
}

TEST(Model, TapShapesAgreeAcrossPrecisions) {
  const auto& f = fitted();
  const SchemeSet s = calibrate_model(f.model, f.data.inputs, 2, 8, true, BoundMethod::btbi, {}, 64);
  const Tensor x = f.data.input(3);
  const auto fp = forward_with_taps(f.model, x, nullptr);
  const auto q = forward_with_taps(f.model, x, &s);
  ASSERT_EQ(fp.features.size(), q.features.size());
  for (const auto& [name, t] : fp.features) EXPECT_EQ(t.shape(), q.features.at(name).shape());
  for (const auto& tap : default_tap_points()) EXPECT_TRUE(fp.features.count(tap));
}

TEST(Model, MoreBitsGiveHigherPsnr) {
  const auto& f = fitted();
  const SchemeSet s8 = calibrate_model(f.model, f.data.inputs, 8, 8, true, BoundMethod::btbi, {}, 128);
  const SchemeSet s2 = calibrate_model(f.model, f.data.inputs, 2, 2, true, BoundMethod::btbi, {}, 128);
  EXPECT_GT(eval_model(f.model, &s8, f.data).psnr_vs_fp, eval_model(f.model, &s2, f.data).psnr_vs_fp);
}

TEST(Model, PerFrameBeatsPerTensorAtFourBits) {
  const auto& f = fitted();
  const SchemeSet pf = calibrate_model(f.model, f.data.inputs, 4, 8, true, BoundMethod::btbi, {}, 128);
  const SchemeSet pt = calibrate_model(f.model, f.data.inputs, 4, 8, false, BoundMethod::btbi, {}, 128);
  EXPECT_LT(eval_model(f.model, &pf, f.data).mse_vs_fp, eval_model(f.model, &pt, f.data).mse_vs_fp);
}

TEST(Model, FirstLinearInputShowsPerFrameRanges) {
  const auto& f = fitted();
  const auto acts = collect_site_activations(f.model, f.data.inputs, 64);
  const Tensor& x = acts.at(kSiteInput);
  EXPECT_EQ(x.frame_axis(), 1u);
  std::vector<double> mins, maxs;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto v = frame_values(x, i);
    mins.push_back(*std::min_element(v.begin(), v.end()));
    maxs.push_back(*std::max_element(v.begin(), v.end()));
  }
  for (std::size_t i = 1; i < 3; ++i) {
    EXPECT_GE(mins[i] - mins[i - 1], 1.0);
    EXPECT_GE(maxs[i] - maxs[i - 1], 1.0);
  }
  EXPECT_EQ(acts.at(kSiteInputWeight), f.model.w1);
}

TEST(Eval, FullPrecisionAgainstItself) {
  const auto& f = fitted();
  const EvalReport r = eval_model(f.model, nullptr, f.data);
  EXPECT_EQ(r.mse_vs_fp, 0.0);
  EXPECT_TRUE(std::isinf(r.psnr_vs_fp));
  EXPECT_GT(r.mse_vs_target, 0.0);
}

TEST(Eval, QuantizedMseIsPositive) {
  const auto& f = fitted();
  const SchemeSet s = calibrate_model(f.model, f.data.inputs, 4, 4, true, BoundMethod::minmax, {}, 64);
  EXPECT_GT(eval_model(f.model, &s, f.data).mse_vs_fp, 0.0);
}

TEST(Eval, PinnedFourBitRegression) {
  SyntheticDatasetConfig dc;
  dc.samples = 256;
  dc.seed = 42;
  const Dataset d = gen_frames(dc);
  FrameMixerModel m = init_model(3, 16, 32, 42);
  FitConfig fc;
  fc.steps = 100;
  fit_fp_model(m, d, fc);
  const SchemeSet s = calibrate_model(m, d.inputs, 4, 4, true, BoundMethod::btbi, SearchConfig{}, 0);
  const EvalReport r = eval_model(m, &s, d);
  EXPECT_NEAR(r.mse_vs_fp, 0.012489066587416659, 1e-12);
  EXPECT_NEAR(r.psnr_vs_fp, 40.608526893428191, 1e-9);
  EXPECT_NEAR(r.mse_vs_target, 0.23224821967880838, 1e-12);
  EXPECT_NEAR(r.psnr_vs_target, 27.914302769124724, 1e-9);
}

TEST(Fit, ReducesTrainingError) {
  const Dataset d = gen_frames(small_config(12, 256));
  FrameMixerModel m = init_model(3, 16, 32, 3);
  const double before = mse(forward_dataset(m, d.inputs, nullptr), d.targets);
  FitConfig fc;
  fc.steps = 100;
  fit_fp_model(m, d, fc);
  const double after = mse(forward_dataset(m, d.inputs, nullptr), d.targets);
  EXPECT_LT(after, 0.5 * before);
}
