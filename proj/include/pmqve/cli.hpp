#pragma once

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "pmqve/ablation.hpp"
#include "pmqve/config.hpp"
#include "pmqve/error.hpp"
#include "pmqve/io.hpp"
#include "pmqve/search.hpp"

namespace pmqve {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 1;
inline constexpr int kExitAssertion = 2;

namespace cli {

inline std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

inline std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

inline std::string psnr_text(double v) { return std::isinf(v) ? std::string("inf") : fmt("%.4f", v); }

inline Tensor with_axis(Tensor t, const std::optional<std::size_t>& axis, const std::string& path) {
  if (!axis) return t;
  if (*axis >= t.rank()) {
    throw Error(path + ": frame axis " + std::to_string(*axis) + " out of range for shape " +
                shape_to_string(t.shape()));
  }
  return t.with_frame_axis(axis);
}

inline nlohmann::json read_json_file(const std::string& path) {
  const std::string text = detail::read_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(path + ": not valid JSON: " + e.what());
  }
}

struct CalibrateArgs {
  std::string input;
  std::string out;
  std::string site = "input";
  int bits = 8;
  bool per_frame = false;
  std::optional<std::size_t> frame_axis;
  std::size_t grid = 32;
  double epsilon_rel = 0.01;
  std::size_t subsample = 0;
  std::string method = "btbi";
};

inline int calibrate(const CalibrateArgs& a, std::ostream& out) {
  CalibrationOptions opt;
  opt.bits = a.bits;
  opt.per_frame = a.per_frame;
  opt.search.grid_points = a.grid;
  opt.search.epsilon_rel = a.epsilon_rel;
  opt.search.subsample = a.subsample;
  opt.method = a.method == "minmax" ? BoundMethod::minmax
               : a.method == "percentile" ? BoundMethod::percentile
                                          : BoundMethod::btbi;
  if (a.per_frame && !a.frame_axis) throw Error("--per-frame needs --frame-axis");
  const Tensor x = with_axis(read_tensor(a.input), a.frame_axis, a.input);

  const SiteCalibration cal = calibrate_site(x, a.site, opt);
  for (const auto& w : cal.warnings) out << "warning: " << w << "\n";
  for (std::size_t i = 0; i < cal.frames.size(); ++i) {
    const auto& f = cal.frames[i];
    const auto& p = cal.scheme.params()[i];
    out << "frame " << i << ": lb=" << fmt("%.9g", p.lb()) << " ub=" << fmt("%.9g", p.ub())
        << " error " << fmt("%.6g", f.initial_error) << " -> " << fmt("%.6g", f.final_error)
        << " states=" << f.states_visited << "\n";
  }
  write_bounds(a.out, SchemeSet{{a.site, cal.scheme}});
  out << "wrote " << a.out << "\n";
  return kExitOk;
}

struct QuantizeArgs {
  std::string tensor;
  std::string bounds;
  std::string out;
  std::string site;
  std::optional<std::size_t> frame_axis;
};

inline int quantize(const QuantizeArgs& a, std::ostream& out) {
  const SchemeSet schemes = read_bounds(a.bounds);
  std::string site = a.site;
  if (site.empty()) {
    if (schemes.size() != 1) throw Error(a.bounds + ": holds several sites; choose one with --site");
    site = schemes.begin()->first;
  }
  const auto it = schemes.find(site);
  if (it == schemes.end()) throw Error(a.bounds + ": no site named '" + site + "'");
  const FrameQuantScheme& scheme = it->second;

  std::optional<std::size_t> axis = a.frame_axis;
  if (scheme.per_frame() && !axis) axis = 0;
  const Tensor x = with_axis(read_tensor(a.tensor), axis, a.tensor);
  const Tensor q = quantize_per_frame(x, scheme);
  write_tensor(a.out, q);

  const double e = mse(x, q);
  const double range = x.max() - x.min();
  out << "mse=" << fmt("%.9g", e);
  if (range > 0.0) out << " psnr=" << psnr_text(psnr_from_mse(e, range)) << " dB";
  out << "\nwrote " << a.out << "\n";
  return kExitOk;
}

struct DistillArgs {
  std::string config;
  std::string out_dir;
  int target_bits = 2;
};

inline int distill(const DistillArgs& a, std::ostream& out) {
  const ToyRunConfig cfg = parse_run_config(read_json_file(a.config));
  try {
    cfg.distill.validate(a.target_bits);
  } catch (const Error& e) {
    throw Error(std::string("config: ") + e.what());
  }
  const ToySetup toy = prepare_toy(cfg, cfg.distill.seed);
  const PipelineResult pipe = progressive_pipeline(toy.model, a.target_bits, toy.train, cfg.distill);

  namespace fs = std::filesystem;
  fs::create_directories(a.out_dir);
  nlohmann::json summary = nlohmann::json::array();
  for (std::size_t i = 0; i < pipe.stages.size(); ++i) {
    const StageResult& st = pipe.stages[i];
    const fs::path dir = fs::path(a.out_dir) / ("stage_" + std::to_string(st.bits) + "bit");
    fs::create_directories(dir);
    write_bounds(dir / "bounds.json", st.refined);
    write_bounds(dir / "initial_bounds.json", st.initial);
    write_log(dir / "log.jsonl", st.log);

    nlohmann::json teachers = nlohmann::json::array();
    for (std::size_t k = 0; k < st.teacher_labels.size(); ++k) {
      const auto& [before, after] = pipe.teacher_checksums[i][k];
      teachers.push_back({{"label", st.teacher_labels[k]},
                          {"checksum_before", hex64(before)},
                          {"checksum_after", hex64(after)}});
    }
    write_file_atomic(dir / "teachers.json", nlohmann::json{{"teachers", teachers}}.dump(2) + "\n");

    const EvalReport init = eval_model(toy.model, &st.initial, toy.eval);
    const EvalReport fin = eval_model(toy.model, st.model, &st.refined, toy.eval);
    summary.push_back({{"bits", st.bits},
                       {"teachers", st.teacher_labels},
                       {"initial_objective", st.initial_objective},
                       {"final_objective", st.final_objective},
                       {"eval_mse_initial", init.mse_vs_fp},
                       {"eval_mse_final", fin.mse_vs_fp}});
    out << st.bits << "-bit stage: teachers {";
    for (std::size_t k = 0; k < st.teacher_labels.size(); ++k) out << (k ? ", " : "") << st.teacher_labels[k];
    out << "} objective " << fmt("%.6g", st.initial_objective) << " -> " << fmt("%.6g", st.final_objective)
        << ", eval mse " << fmt("%.6g", init.mse_vs_fp) << " -> " << fmt("%.6g", fin.mse_vs_fp) << "\n";
  }
  write_file_atomic(fs::path(a.out_dir) / "summary.json", summary.dump(2) + "\n");
  return kExitOk;
}

struct AblateArgs {
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::string config;
};

inline std::string ablation_table_text(const AblationTable& t) {
  std::string s = "config              median_mse     median_psnr_db\n";
  for (std::size_t r = 0; r < kAblationRows.size(); ++r) {
    char line[128];
    std::snprintf(line, sizeof line, "%-18s  %-13.6g  %s\n", kAblationRows[r], t.median_mse[r],
                  psnr_text(t.median_psnr[r]).c_str());
    s += line;
  }
  return s;
}

inline int ablate(const AblateArgs& a, std::ostream& out, std::ostream& err) {
  if (a.seeds.empty()) throw Error("usage: --seeds needs at least one seed");
  const ToyRunConfig cfg = a.config.empty() ? ToyRunConfig{} : parse_run_config(read_json_file(a.config));
  const AblationTable t = run_ablation(a.seeds, cfg);
  out << ablation_table_text(t);

  if (!a.out.empty()) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t r = 0; r < kAblationRows.size(); ++r) {
      nlohmann::json per_seed = nlohmann::json::array();
      for (const auto& s : t.seeds) per_seed.push_back({{"seed", s.seed}, {"mse", s.rows[r].mse_vs_fp}});
      rows.push_back({{"config", kAblationRows[r]},
                      {"median_mse", t.median_mse[r]},
                      {"median_psnr_db", t.median_psnr[r]},
                      {"seeds", per_seed}});
    }
    write_file_atomic(a.out, nlohmann::json{{"bits", cfg.bits}, {"rows", rows}}.dump(2) + "\n");
  }
  if (a.seeds.size() > 1 && !t.ordered()) {
    err << "assertion failed: ablation medians are not monotone in the row order\n";
    return kExitAssertion;
  }
  return kExitOk;
}

inline int report(const std::string& path, std::ostream& out) {
  const auto log = read_log(path);
  if (log.empty()) throw Error(path + ": log is empty");
  double best = log.front().l_pmtd;
  std::size_t best_step = log.front().step;
  for (const auto& r : log) {
    if (r.l_pmtd < best) {
      best = r.l_pmtd;
      best_step = r.step;
    }
  }
  const auto& first = log.front();
  const auto& last = log.back();
  out << "steps: " << log.size() << "\n"
      << "l_pmtd: first " << fmt("%.6g", first.l_pmtd) << ", last " << fmt("%.6g", last.l_pmtd) << ", best "
      << fmt("%.6g", best) << " at step " << best_step << "\n"
      << "alpha: " << fmt("%.4g", first.alpha) << " -> " << fmt("%.4g", last.alpha) << "\n";
  for (std::size_t k = 0; k < last.teachers.size(); ++k) {
    out << "teacher " << last.teachers[k] << ": l_rec " << fmt("%.6g", last.l_rec[k]) << ", l_feat "
        << fmt("%.6g", last.l_feat[k]) << "\n";
  }
  return kExitOk;
}

struct GenArgs {
  std::string out_inputs;
  std::string out_targets;
  std::string config;
  std::uint64_t seed = 42;
  std::size_t samples = 256;
};

inline int gen(const GenArgs& a, std::ostream& out) {
  SyntheticDatasetConfig dc = a.config.empty() ? SyntheticDatasetConfig{}
                                               : parse_run_config(read_json_file(a.config)).data;
  dc.seed = a.seed;
  dc.samples = a.samples;
  const Dataset d = gen_frames(dc);
  write_tensor(a.out_inputs, d.inputs);
  out << "wrote " << a.out_inputs << " " << shape_to_string(d.inputs.shape()) << "\n";
  if (!a.out_targets.empty()) {
    write_tensor(a.out_targets, d.targets);
    out << "wrote " << a.out_targets << "\n";
  }
  return kExitOk;
}

}  // namespace cli

/// Entry point of the command-line tool. Exit codes: 0 success, 1 input or
/// configuration error, 2 failed internal assertion.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-frame quantization calibration and distillation toolkit", "pmqve"};
  app.require_subcommand(1);

  cli::CalibrateArgs cal;
  auto* c = app.add_subcommand("calibrate", "Search clipping bounds for one tensor");
  c->add_option("input", cal.input, "Input tensor file")->required();
  c->add_option("--out", cal.out, "Bounds file to write")->required();
  c->add_option("--bits", cal.bits, "Bit-width")->check(CLI::Range(1, kMaxBits));
  c->add_flag("--per-frame", cal.per_frame, "One bound pair per frame");
  c->add_option("--frame-axis", cal.frame_axis, "Frame axis of the tensor");
  c->add_option("--grid", cal.grid, "Grid points per bound axis");
  c->add_option("--epsilon-rel", cal.epsilon_rel, "Pruning slack relative to the start error");
  c->add_option("--site", cal.site, "Site name recorded in the bounds file");
  c->add_option("--subsample", cal.subsample, "Search on at most this many values per frame (0 = all)");
  c->add_option("--method", cal.method, "Bound method")->check(CLI::IsMember({"btbi", "percentile", "minmax"}));

  cli::QuantizeArgs qa;
  auto* q = app.add_subcommand("quantize", "Fake-quantize a tensor with stored bounds");
  q->add_option("tensor", qa.tensor, "Input tensor file")->required();
  q->add_option("bounds", qa.bounds, "Bounds file")->required();
  q->add_option("--out", qa.out, "Output tensor file")->required();
  q->add_option("--site", qa.site, "Site to apply (default: the only site)");
  q->add_option("--frame-axis", qa.frame_axis, "Frame axis of the tensor (default 0)");

  cli::DistillArgs da;
  auto* d = app.add_subcommand("distill", "Run the progressive distillation ladder on the toy model");
  d->add_option("config", da.config, "JSON configuration")->required();
  d->add_option("--target-bits", da.target_bits, "Final bit-width")->check(CLI::IsMember({8, 4, 2}));
  d->add_option("--out-dir", da.out_dir, "Output directory")->required();

  cli::AblateArgs aa;
  auto* ab = app.add_subcommand("ablate", "Component ablation on the toy model at 2 bits");
  ab->add_option("--seeds", aa.seeds, "Seeds, e.g. --seeds 1 2 3 or --seeds 1,2,3")->delimiter(',');
  ab->add_option("--out", aa.out, "JSON table to write");
  ab->add_option("--config", aa.config, "JSON configuration");

  std::string log_path;
  auto* rp = app.add_subcommand("report", "Summarize a loss log");
  rp->add_option("log", log_path, "log.jsonl file")->required();

  cli::GenArgs ga;
  auto* g = app.add_subcommand("gen", "Export a synthetic multi-frame dataset");
  g->add_option("--out", ga.out_inputs, "Input tensor file")->required();
  g->add_option("--targets", ga.out_targets, "Target tensor file");
  g->add_option("--seed", ga.seed, "Dataset seed");
  g->add_option("--samples", ga.samples, "Number of samples")->check(CLI::PositiveNumber);
  g->add_option("--config", ga.config, "JSON configuration (its data section is used)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Error& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitInput;
  }

  try {
    if (c->parsed()) return cli::calibrate(cal, out);
    if (q->parsed()) return cli::quantize(qa, out);
    if (d->parsed()) return cli::distill(da, out);
    if (ab->parsed()) return cli::ablate(aa, out, err);
    if (rp->parsed()) return cli::report(log_path, out);
    if (g->parsed()) return cli::gen(ga, out);
  } catch (const AssertionFailure& e) {
    err << "assertion failed: " << e.what() << "\n";
    return kExitAssertion;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return kExitInput;
}

}  // namespace pmqve
