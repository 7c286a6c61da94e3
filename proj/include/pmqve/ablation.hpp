#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pmqve/distill.hpp"
#include "pmqve/parallel.hpp"
#include "pmqve/toyzoo.hpp"

namespace pmqve {

/// Everything needed to reproduce one toy run from a seed.
struct ToyRunConfig {
  SyntheticDatasetConfig data;  // seed and samples are set per run
  std::size_t train_samples = 1024;
  std::size_t eval_samples = 512;
  std::size_t hidden = 32;
  FitConfig fit;
  DistillConfig distill;
  int bits = 2;
};

struct ToySetup {
  Dataset train;
  Dataset eval;
  FrameMixerModel model;  // fitted full-precision model
};

inline ToySetup prepare_toy(const ToyRunConfig& cfg, std::uint64_t seed) {
  SyntheticDatasetConfig dc = cfg.data;
  dc.seed = seed;
  dc.samples = cfg.train_samples;
  Dataset train = gen_frames(dc);
  dc.seed = seed + 1000;
  dc.samples = cfg.eval_samples;
  Dataset eval = gen_frames(dc);
  FrameMixerModel m = init_model(dc.num_frames, dc.dim, cfg.hidden, seed * 7 + 1);
  fit_fp_model(m, train, cfg.fit);
  return {std::move(train), std::move(eval), std::move(m)};
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- progressive vs full-precision-only supervision ----

struct SupervisionComparison {
  std::uint64_t seed = 0;
  EvalReport progressive;
  EvalReport fp_only;
};

/// Final 2-bit stage of the ladder against a student trained from the same
/// initial bounds, for the same number of steps, with the full-precision
/// teacher alone.
inline SupervisionComparison compare_supervision(const ToyRunConfig& cfg, std::uint64_t seed) {
  const ToySetup toy = prepare_toy(cfg, seed);
  DistillConfig dcfg = cfg.distill;
  dcfg.seed = seed;
  const PipelineResult pipe = progressive_pipeline(toy.model, cfg.bits, toy.train, dcfg);
  const StageResult& last = pipe.stages.back();

  DistillConfig base_cfg = dcfg;
  base_cfg.teacher_bits.clear();
  base_cfg.seed = derive_seed(dcfg.seed, static_cast<std::uint64_t>(cfg.bits));
  const TeacherBundle fp{"fp", 0, toy.model, std::nullopt};
  const StageResult base = distill_stage(toy.model, cfg.bits, {fp}, last.initial, toy.train, base_cfg);

  SupervisionComparison out;
  out.seed = seed;
  out.progressive = eval_model(toy.model, last.model, &last.refined, toy.eval);
  out.fp_only = eval_model(toy.model, base.model, &base.refined, toy.eval);
  return out;
}

// ---- component ablation ----

inline constexpr std::array<const char*, 4> kAblationRows{"none", "+per-frame", "+per-frame+bmfq", "full"};

struct AblationSeed {
  std::uint64_t seed = 0;
  std::array<EvalReport, 4> rows;
};

struct AblationTable {
  std::vector<AblationSeed> seeds;
  std::array<double, 4> median_mse{};
  std::array<double, 4> median_psnr{};

  /// True when no added component raises the median eval MSE.
  bool ordered() const {
    for (std::size_t i = 1; i < median_mse.size(); ++i) {
      if (median_mse[i] > median_mse[i - 1]) return false;
    }
    return true;
  }
};

/// Rows: per-tensor percentile bounds; per-frame percentile bounds;
/// per-frame backtracking-search bounds; the full progressive pipeline.
/// Metrics are against the full-precision model on held-out data.
inline AblationSeed ablate_seed(const ToyRunConfig& cfg, std::uint64_t seed) {
  const ToySetup toy = prepare_toy(cfg, seed);
  DistillConfig dcfg = cfg.distill;
  dcfg.seed = seed;
  const int wbits = dcfg.weight_bits_for(cfg.bits);

  AblationSeed out;
  out.seed = seed;
  const auto percentile_scheme = [&](bool per_frame) {
    return calibrate_model(toy.model, toy.train.inputs, cfg.bits, wbits, per_frame, BoundMethod::percentile,
                           dcfg.search, dcfg.calibration_samples);
  };
  const SchemeSet none = percentile_scheme(false);
  const SchemeSet pf = percentile_scheme(true);
  out.rows[0] = eval_model(toy.model, &none, toy.eval);
  out.rows[1] = eval_model(toy.model, &pf, toy.eval);

  const PipelineResult pipe = progressive_pipeline(toy.model, cfg.bits, toy.train, dcfg);
  const StageResult& last = pipe.stages.back();
  out.rows[2] = eval_model(toy.model, &last.initial, toy.eval);
  out.rows[3] = eval_model(toy.model, last.model, &last.refined, toy.eval);
  return out;
}

inline AblationTable run_ablation(const std::vector<std::uint64_t>& seeds, const ToyRunConfig& cfg) {
  if (seeds.empty()) throw Error("seed list is empty");
  AblationTable table;
  table.seeds.resize(seeds.size());
  parallel_for(seeds.size(), [&](std::size_t i) { table.seeds[i] = ablate_seed(cfg, seeds[i]); });
  for (std::size_t r = 0; r < kAblationRows.size(); ++r) {
    std::vector<double> mses;
    std::vector<double> psnrs;
    for (const auto& s : table.seeds) {
      mses.push_back(s.rows[r].mse_vs_fp);
      psnrs.push_back(s.rows[r].psnr_vs_fp);
    }
    table.median_mse[r] = median(mses);
    table.median_psnr[r] = median(psnrs);
  }
  return table;
}

}  // namespace pmqve
