#pragma once

#include <set>
#include <string>
#include <utility>

#include "json.hpp"

#include "pmqve/ablation.hpp"
#include "pmqve/error.hpp"

namespace pmqve {

namespace detail {

/// Reads optional object members, naming the offending field on any error
/// and rejecting members nobody asked for.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {
    if (!obj_.is_object()) throw Error(where("") + "must be an object");
  }

  template <typename T>
  void get(const std::string& key, T& dst) {
    seen_.insert(key);
    const auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      dst = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw Error(where(key) + "has the wrong type");
    }
  }

  const nlohmann::json* child(const std::string& key) {
    seen_.insert(key);
    const auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.count(key)) throw Error(where(key) + "unknown field");
    }
  }

  std::string where(const std::string& key) const {
    std::string path = prefix_.empty() ? key : (key.empty() ? prefix_ : prefix_ + "." + key);
    return path.empty() ? "config: " : path + ": ";
  }

 private:
  const nlohmann::json& obj_;
  std::string prefix_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline BoundGradient parse_bound_gradient(const std::string& s) {
  if (s == "clipped") return BoundGradient::clipped;
  if (s == "rounding_aware") return BoundGradient::rounding_aware;
  throw Error("bound_gradient: expected 'clipped' or 'rounding_aware', got '" + s + "'");
}

inline const char* to_string(BoundGradient g) {
  return g == BoundGradient::clipped ? "clipped" : "rounding_aware";
}

/// Toy run configuration from JSON. Distillation fields sit at the top
/// level; "data" and "fit" hold the dataset and full-precision fit.
inline ToyRunConfig parse_run_config(const nlohmann::json& j) {
  ToyRunConfig cfg;
  detail::FieldReader r(j, "");
  DistillConfig& d = cfg.distill;
  r.get("lambda", d.lambda);
  r.get("t_warmup", d.t_warmup);
  r.get("teacher_bits", d.teacher_bits);
  r.get("steps", d.steps);
  r.get("lr", d.lr);
  r.get("seed", d.seed);
  r.get("tap_points", d.tap_points);
  r.get("batch_size", d.batch_size);
  r.get("train_weights", d.train_weights);
  r.get("nearest_teacher_only", d.nearest_teacher_only);
  r.get("per_frame", d.per_frame);
  r.get("weight_bits", d.weight_bits);
  r.get("calibration_samples", d.calibration_samples);
  r.get("checkpoint_every", d.checkpoint_every);
  std::string grad = to_string(d.bound_gradient);
  r.get("bound_gradient", grad);
  d.bound_gradient = parse_bound_gradient(grad);
  r.get("grid_points", d.search.grid_points);
  r.get("epsilon_rel", d.search.epsilon_rel);
  r.get("train_samples", cfg.train_samples);
  r.get("eval_samples", cfg.eval_samples);
  r.get("hidden", cfg.hidden);

  if (const auto* data = r.child("data")) {
    detail::FieldReader dr(*data, "data");
    auto& dc = cfg.data;
    dr.get("num_frames", dc.num_frames);
    dr.get("dim", dc.dim);
    dr.get("means", dc.means);
    dr.get("scales", dc.scales);
    dr.get("outlier_rate", dc.outlier_rate);
    dr.get("outlier_magnitude", dc.outlier_magnitude);
    dr.finish();
  }
  if (const auto* fit = r.child("fit")) {
    detail::FieldReader fr(*fit, "fit");
    fr.get("steps", cfg.fit.steps);
    fr.get("batch_size", cfg.fit.batch_size);
    fr.get("lr", cfg.fit.lr);
    fr.get("seed", cfg.fit.seed);
    fr.finish();
  }
  r.finish();

  if (cfg.train_samples == 0) throw Error("train_samples: must be positive");
  if (cfg.eval_samples == 0) throw Error("eval_samples: must be positive");
  if (cfg.hidden == 0) throw Error("hidden: must be positive");
  if (cfg.fit.batch_size == 0) throw Error("fit.batch_size: must be positive");
  if (!(cfg.fit.lr > 0.0)) throw Error("fit.lr: must be positive");
  SyntheticDatasetConfig dc = cfg.data;
  dc.samples = cfg.train_samples;
  try {
    dc.validate();
  } catch (const Error& e) {
    throw Error(std::string("data.") + e.what());
  }
  return cfg;
}

}  // namespace pmqve
