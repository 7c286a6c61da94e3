#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pmqve/autograd.hpp"
#include "pmqve/error.hpp"
#include "pmqve/fakequant.hpp"
#include "pmqve/rng.hpp"
#include "pmqve/tensor.hpp"

namespace pmqve {

// Quantized sites of the frame-mixer block. Activation sites carry one
// interval per frame; weight sites are quantized per tensor.
inline constexpr const char* kSiteInput = "block0.linear";
inline constexpr const char* kSiteQk = "block0.qk_matmul";
inline constexpr const char* kSiteSoftmax = "block0.softmax_in";
inline constexpr const char* kSiteAv = "block0.av_matmul";
inline constexpr const char* kSiteOutput = "block1.linear";
inline constexpr const char* kSiteInputWeight = "block0.linear.weight";
inline constexpr const char* kSiteOutputWeight = "block1.linear.weight";

inline const std::vector<std::string>& activation_sites() {
  static const std::vector<std::string> sites{kSiteInput, kSiteQk, kSiteSoftmax, kSiteAv, kSiteOutput};
  return sites;
}

inline const std::vector<std::string>& weight_sites() {
  static const std::vector<std::string> sites{kSiteInputWeight, kSiteOutputWeight};
  return sites;
}

inline std::vector<std::string> all_sites() {
  auto sites = activation_sites();
  sites.insert(sites.end(), weight_sites().begin(), weight_sites().end());
  return sites;
}

// Feature taps: the outputs of the two quantized blocks.
inline constexpr const char* kTapHidden = "block0.hidden";
inline constexpr const char* kTapAttention = "block0.attn";

inline const std::vector<std::string>& default_tap_points() {
  static const std::vector<std::string> taps{kTapHidden, kTapAttention};
  return taps;
}

struct SyntheticDatasetConfig {
  std::size_t num_frames = 3;
  std::size_t dim = 16;
  std::size_t samples = 2048;
  std::vector<double> means{0.0, 2.0, 4.0};
  std::vector<double> scales{1.0, 1.0, 1.0};
  double outlier_rate = 0.0;
  /// Outlier offset from the frame mean, in units of that frame's scale.
  double outlier_magnitude = 10.0;
  std::uint64_t seed = 42;

  void validate() const {
    if (num_frames == 0 || dim == 0 || samples == 0) throw Error("num_frames, dim and samples must be positive");
    if (means.size() != num_frames) throw Error("means: expected one entry per frame");
    if (scales.size() != num_frames) throw Error("scales: expected one entry per frame");
    for (double s : scales) {
      if (!(s > 0.0)) throw Error("scales: every entry must be positive");
    }
    if (!(outlier_rate >= 0.0 && outlier_rate <= 0.01)) throw Error("outlier_rate must lie in [0, 0.01]");
  }
};

/// Inputs and targets, both [samples, frames, dim] with frame axis 1.
struct Dataset {
  Tensor inputs;
  Tensor targets;

  std::size_t samples() const { return inputs.extent(0); }
  std::size_t frames() const { return inputs.extent(1); }
  std::size_t dim() const { return inputs.extent(2); }

  Tensor input(std::size_t s) const { return row_block(inputs, s); }
  Tensor target(std::size_t s) const { return row_block(targets, s); }

  /// Sample s as a [frames, dim] matrix whose rows are frames.
  static Tensor row_block(const Tensor& t, std::size_t s) {
    const std::size_t f = t.extent(1);
    const std::size_t d = t.extent(2);
    const auto v = t.values();
    std::vector<double> out(v.begin() + static_cast<std::ptrdiff_t>(s * f * d),
                            v.begin() + static_cast<std::ptrdiff_t>((s + 1) * f * d));
    return Tensor({f, d}, std::move(out), 0);
  }
};

namespace detail {

inline Tensor random_matrix(SplitMix64& rng, std::size_t rows, std::size_t cols, double scale) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = scale * rng.normal();
  return Tensor({rows, cols}, std::move(v));
}

/// Stacks per-sample [F, X] matrices into [S, F, X] with frame axis 1.
inline Tensor stack_samples(const std::vector<Tensor>& samples) {
  const Shape& s = samples.front().shape();
  std::vector<double> out;
  out.reserve(samples.size() * samples.front().size());
  for (const auto& t : samples) out.insert(out.end(), t.values().begin(), t.values().end());
  return Tensor({samples.size(), s[0], s[1]}, std::move(out), 1);
}

}  // namespace detail

/// Seeded multi-frame data. Frame i is Gaussian(means[i], scales[i]) with
/// optional outliers; targets are a fixed nonlinear cross-frame mixing.
inline Dataset gen_frames(const SyntheticDatasetConfig& cfg) {
  cfg.validate();
  const std::size_t f = cfg.num_frames;
  const std::size_t d = cfg.dim;
  SplitMix64 rng(cfg.seed);
  std::vector<double> x(cfg.samples * f * d);
  for (std::size_t s = 0; s < cfg.samples; ++s) {
    for (std::size_t i = 0; i < f; ++i) {
      for (std::size_t k = 0; k < d; ++k) {
        double v = rng.normal(cfg.means[i], cfg.scales[i]);
        const double u = rng.uniform();
        if (u < cfg.outlier_rate) {
          const double sign = u < 0.5 * cfg.outlier_rate ? -1.0 : 1.0;
          v = cfg.means[i] + sign * cfg.outlier_magnitude * cfg.scales[i];
        }
        x[(s * f + i) * d + k] = v;
      }
    }
  }

  // Ground-truth map: frame mixing M (identity-dominated) and a feature
  // projection P, both drawn from a stream independent of the data.
  SplitMix64 map_rng(derive_seed(cfg.seed, 0x6d6170));
  std::vector<double> mix(f * f);
  for (std::size_t i = 0; i < f; ++i) {
    for (std::size_t j = 0; j < f; ++j) mix[i * f + j] = (i == j ? 0.6 : 0.0) + 0.3 * map_rng.normal();
  }
  const Tensor proj = detail::random_matrix(map_rng, d, d, 1.0 / std::sqrt(static_cast<double>(d)));

  std::vector<double> y(x.size());
  std::vector<double> squashed(f * d);
  for (std::size_t s = 0; s < cfg.samples; ++s) {
    const double* xs = &x[s * f * d];
    for (std::size_t j = 0; j < f * d; ++j) squashed[j] = std::tanh(0.5 * xs[j]);
    for (std::size_t i = 0; i < f; ++i) {
      for (std::size_t k = 0; k < d; ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < f; ++j) {
          double mixed = 0.0;
          for (std::size_t p = 0; p < d; ++p) mixed += squashed[j * d + p] * proj.at(p, k);
          acc += mix[i * f + j] * mixed;
        }
        y[(s * f + i) * d + k] = xs[i * d + k] + acc;
      }
    }
  }
  return {Tensor({cfg.samples, f, d}, std::move(x), 1), Tensor({cfg.samples, f, d}, std::move(y), 1)};
}

/// Shared per-frame linear, relu, cross-frame softmax attention, output
/// linear, residual. Input and output are [frames, dim] per sample.
struct FrameMixerModel {
  std::size_t frames = 3;
  std::size_t dim = 16;
  std::size_t hidden = 32;
  Tensor w1;  // [dim, hidden]
  Tensor w2;  // [hidden, dim]

  double score_scale() const { return 1.0 / std::sqrt(static_cast<double>(hidden)); }
};

inline FrameMixerModel init_model(std::size_t frames, std::size_t dim, std::size_t hidden, std::uint64_t seed) {
  SplitMix64 rng(seed);
  FrameMixerModel m{frames, dim, hidden, Tensor(), Tensor()};
  m.w1 = detail::random_matrix(rng, dim, hidden, 1.0 / std::sqrt(static_cast<double>(dim)));
  m.w2 = detail::random_matrix(rng, hidden, dim, 0.5 / std::sqrt(static_cast<double>(hidden)));
  return m;
}

/// Output of one sample plus its feature taps.
struct TappedOutput {
  Tensor output;
  std::map<std::string, Tensor> features;
  /// Activation entering each quantized site (before quantization).
  std::map<std::string, Tensor> site_inputs;
};

namespace detail {

/// Fake-quantizes a matrix with a scheme whose entries map onto row groups.
inline Tensor quantize_rows(const Tensor& x, const FrameQuantScheme& scheme) {
  if (scheme.per_frame() && scheme.size() != x.extent(0)) {
    throw Error("site '" + scheme.site_name() + "': scheme has " + std::to_string(scheme.size()) +
                " frames, activation has " + std::to_string(x.extent(0)));
  }
  std::vector<double> lb;
  std::vector<double> ub;
  for (const auto& p : scheme.params()) {
    lb.push_back(p.lb());
    ub.push_back(p.ub());
  }
  // Same arithmetic as the graph's ste_fakequant node.
  const std::size_t group = kernels::rows_per_group(x.extent(0), lb.size());
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t g = 0; g < lb.size(); ++g) {
    const QuantParams& p = scheme.params()[g];
    for (std::size_t r = g * group; r < (g + 1) * group; ++r) {
      for (std::size_t c = 0; c < x.extent(1); ++c) out.at(r, c) = fake_quantize(x.at(r, c), p);
    }
  }
  return out;
}

inline void check_scheme_coverage(const SchemeSet& schemes) {
  const auto sites = all_sites();
  for (const auto& s : sites) {
    if (!schemes.count(s)) throw Error("site-name mismatch: no scheme for '" + s + "'");
  }
  for (const auto& [name, _] : schemes) {
    if (std::find(sites.begin(), sites.end(), name) == sites.end()) {
      throw Error("site-name mismatch: unknown site '" + name + "'");
    }
  }
}

}  // namespace detail

/// Eager forward of one [frames, dim] sample. With `schemes` unset the
/// full-precision path runs with no quantization at all.
inline TappedOutput forward_with_taps(const FrameMixerModel& m, const Tensor& x, const SchemeSet* schemes) {
  if (x.rank() != 2 || x.extent(0) != m.frames || x.extent(1) != m.dim) {
    throw Error("model input must be [" + std::to_string(m.frames) + "," + std::to_string(m.dim) + "], got " +
                shape_to_string(x.shape()));
  }
  if (schemes) detail::check_scheme_coverage(*schemes);
  TappedOutput r;
  const auto q = [&](const char* site, const Tensor& t) {
    r.site_inputs.emplace(site, t);
    return schemes ? detail::quantize_rows(t, schemes->at(site)) : t;
  };
  const Tensor xin = x.with_frame_axis(std::nullopt);
  const Tensor xq = q(kSiteInput, xin);
  const Tensor w1q = q(kSiteInputWeight, m.w1);
  const Tensor h = kernels::relu(kernels::matmul(xq, w1q));
  const Tensor hq = q(kSiteQk, h);
  const Tensor scores = kernels::mul(kernels::matmul(hq, hq, true),
                                     Tensor::filled({m.frames, m.frames}, m.score_scale()));
  const Tensor a = kernels::softmax(scores);
  const Tensor aq = q(kSiteSoftmax, a);
  const Tensor vq = q(kSiteAv, h);
  const Tensor z = kernels::matmul(aq, vq);
  const Tensor zq = q(kSiteOutput, z);
  const Tensor w2q = q(kSiteOutputWeight, m.w2);
  r.output = kernels::add(xin, kernels::matmul(zq, w2q));
  r.features.emplace(kTapHidden, h);
  r.features.emplace(kTapAttention, z);
  return r;
}

/// Unquantized reference forward without taps or quantization hooks.
inline Tensor forward(const FrameMixerModel& m, const Tensor& x) {
  const Tensor xin = x.with_frame_axis(std::nullopt);
  const Tensor h = kernels::relu(kernels::matmul(xin, m.w1));
  const Tensor scores = kernels::mul(kernels::matmul(h, h, true),
                                     Tensor::filled({m.frames, m.frames}, m.score_scale()));
  const Tensor z = kernels::matmul(kernels::softmax(scores), h);
  return kernels::add(xin, kernels::matmul(z, m.w2));
}

/// Model outputs for every sample, [samples, frames, dim].
inline Tensor forward_dataset(const FrameMixerModel& m, const Tensor& inputs, const SchemeSet* schemes) {
  std::vector<Tensor> outs;
  outs.reserve(inputs.extent(0));
  for (std::size_t s = 0; s < inputs.extent(0); ++s) {
    outs.push_back(forward_with_taps(m, Dataset::row_block(inputs, s), schemes).output);
  }
  return detail::stack_samples(outs);
}

/// Full-precision activations entering every site, gathered over the first
/// `limit` samples. Activation sites are [samples, frames, width] with frame
/// axis 1; weight sites are the weight matrices themselves.
inline std::map<std::string, Tensor> collect_site_activations(const FrameMixerModel& m, const Tensor& inputs,
                                                              std::size_t limit = 0) {
  const std::size_t n = limit == 0 ? inputs.extent(0) : std::min(limit, inputs.extent(0));
  std::map<std::string, std::vector<Tensor>> per_site;
  for (std::size_t s = 0; s < n; ++s) {
    auto r = forward_with_taps(m, Dataset::row_block(inputs, s), nullptr);
    for (const auto& site : activation_sites()) per_site[site].push_back(std::move(r.site_inputs.at(site)));
  }
  std::map<std::string, Tensor> out;
  for (auto& [site, list] : per_site) out.emplace(site, detail::stack_samples(list));
  out.emplace(kSiteInputWeight, m.w1);
  out.emplace(kSiteOutputWeight, m.w2);
  return out;
}

struct EvalReport {
  double mse_vs_fp = 0.0;
  double psnr_vs_fp = 0.0;
  double mse_vs_target = 0.0;
  double psnr_vs_target = 0.0;
};

/// Metrics of `student` (quantized by `schemes` when given) against the
/// full-precision output of `reference` and against the targets. PSNR uses
/// the target value range as peak.
inline EvalReport eval_model(const FrameMixerModel& reference, const FrameMixerModel& student,
                             const SchemeSet* schemes, const Dataset& data) {
  const Tensor fp = forward_dataset(reference, data.inputs, nullptr);
  const Tensor out = forward_dataset(student, data.inputs, schemes);
  const double peak = data.targets.max() - data.targets.min();
  EvalReport r;
  r.mse_vs_fp = mse(out, fp);
  r.psnr_vs_fp = psnr_from_mse(r.mse_vs_fp, peak);
  r.mse_vs_target = mse(out, data.targets);
  r.psnr_vs_target = psnr_from_mse(r.mse_vs_target, peak);
  return r;
}

inline EvalReport eval_model(const FrameMixerModel& m, const SchemeSet* schemes, const Dataset& data) {
  return eval_model(m, m, schemes, data);
}

/// Graph nodes of one student forward.
struct StudentNodes {
  NodeId output;
  std::map<std::string, NodeId> features;
};

/// Parameter-node handles shared by every sample in one graph.
struct ModelParamNodes {
  NodeId w1;
  NodeId w2;
  /// (lb, ub) nodes per site; empty for a full-precision graph.
  std::map<std::string, std::pair<NodeId, NodeId>> bounds;
  std::map<std::string, int> bits;
  NodeId score_scale;
  BoundGradient bound_gradient = BoundGradient::clipped;
};

/// Adds parameter nodes for the weights and, when `bounds` is given, the
/// per-site bound pairs (indexed by site name into `params`).
inline ModelParamNodes add_model_params(Graph& g, const FrameMixerModel& m, TrainableParam& w1, TrainableParam& w2,
                                        ParamSet* params, const std::map<std::string, std::size_t>* bounds,
                                        const SchemeSet& schemes) {
  ModelParamNodes n{g.param(w1), g.param(w2), {}, {},
                    g.constant(Tensor::filled({m.frames, m.frames}, m.score_scale()))};
  if (bounds) {
    for (const auto& [site, pair] : *bounds) {
      n.bounds.emplace(site, std::pair{g.param(params->lb(pair)), g.param(params->ub(pair))});
      n.bits.emplace(site, schemes.at(site).bits());
    }
  }
  return n;
}

/// Student forward of one sample inside a graph; mirrors forward_with_taps.
inline StudentNodes add_student_forward(Graph& g, const ModelParamNodes& p, const Tensor& x) {
  const auto q = [&](const char* site, NodeId t) {
    if (p.bounds.empty()) return t;
    const auto& [lb, ub] = p.bounds.at(site);
    return g.ste_fakequant(t, lb, ub, p.bits.at(site), p.bound_gradient);
  };
  const NodeId xin = g.input(x.with_frame_axis(std::nullopt));
  const NodeId h = g.relu(g.matmul(q(kSiteInput, xin), q(kSiteInputWeight, p.w1)));
  const NodeId hq = q(kSiteQk, h);
  const NodeId a = g.softmax(g.mul(g.matmul(hq, hq, true), p.score_scale));
  const NodeId z = g.matmul(q(kSiteSoftmax, a), q(kSiteAv, h));
  const NodeId y = g.matmul(q(kSiteOutput, z), q(kSiteOutputWeight, p.w2));
  return {g.add(xin, y), {{kTapHidden, h}, {kTapAttention, z}}};
}

struct FitConfig {
  std::size_t steps = 300;
  std::size_t batch_size = 32;
  double lr = 0.05;
  std::uint64_t seed = 7;
};

/// Fits the full-precision weights to the targets with SGD; returns the
/// final mean training MSE.
inline double fit_fp_model(FrameMixerModel& m, const Dataset& data, const FitConfig& cfg) {
  ParamSet params;
  TrainableParam& w1 = params.add_weight("w1", m.w1);
  TrainableParam& w2 = params.add_weight("w2", m.w2);
  SplitMix64 rng(cfg.seed);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Graph g;
    const ModelParamNodes pn = add_model_params(g, m, w1, w2, nullptr, nullptr, SchemeSet{});
    std::vector<NodeId> losses;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const std::size_t s = rng.below(data.samples());
      const StudentNodes sn = add_student_forward(g, pn, data.input(s));
      losses.push_back(g.mse_loss(sn.output, g.constant(data.target(s).with_frame_axis(std::nullopt))));
    }
    const NodeId loss =
        g.scalar_combine(losses, std::vector<double>(losses.size(), 1.0 / static_cast<double>(losses.size())));
    params.zero_grad();
    g.backward(loss);
    sgd_step(params, cfg.lr);
  }
  m.w1 = w1.value;
  m.w2 = w2.value;
  return mse(forward_dataset(m, data.inputs, nullptr), data.targets);
}

}  // namespace pmqve
