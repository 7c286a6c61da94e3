#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pmqve/error.hpp"
#include "pmqve/tensor.hpp"

namespace pmqve {

inline constexpr int kMaxBits = 24;

/// One clipping interval [lb, ub] with a uniform grid of 2^bits levels.
class QuantParams {
 public:
  QuantParams(double lb, double ub, int bits) : lb_(lb), ub_(ub), bits_(bits) {
    if (bits < 1 || bits > kMaxBits) {
      throw Error("bit-width must lie in [1, " + std::to_string(kMaxBits) + "], got " +
                  std::to_string(bits));
    }
    if (!std::isfinite(lb) || !std::isfinite(ub)) throw Error("bounds must be finite");
    if (!(ub > lb)) {
      throw Error("upper bound must exceed lower bound (lb=" + std::to_string(lb) +
                  ", ub=" + std::to_string(ub) + ")");
    }
    delta_ = (ub - lb) / max_level();
    if (!(delta_ > 0.0)) throw Error("quantization step underflows to zero");
  }

  double lb() const noexcept { return lb_; }
  double ub() const noexcept { return ub_; }
  int bits() const noexcept { return bits_; }
  double delta() const noexcept { return delta_; }
  /// Largest integer level, 2^bits - 1.
  double max_level() const noexcept { return std::ldexp(1.0, bits_) - 1.0; }

  friend bool operator==(const QuantParams& a, const QuantParams& b) {
    return a.lb_ == b.lb_ && a.ub_ == b.ub_ && a.bits_ == b.bits_;
  }

 private:
  double lb_;
  double ub_;
  int bits_;
  double delta_ = 0.0;
};

/// Clipping parameters for one quantized site: a single interval, or one
/// interval per frame.
class FrameQuantScheme {
 public:
  FrameQuantScheme(std::string site_name, bool per_frame, std::vector<QuantParams> params)
      : site_name_(std::move(site_name)), per_frame_(per_frame), params_(std::move(params)) {
    if (params_.empty()) throw Error("scheme '" + site_name_ + "' has no parameters");
    if (!per_frame_ && params_.size() != 1) {
      throw Error("per-tensor scheme '" + site_name_ + "' must have exactly one entry");
    }
    for (const auto& p : params_) {
      if (p.bits() != params_.front().bits()) {
        throw Error("scheme '" + site_name_ + "' mixes bit-widths");
      }
    }
  }

  const std::string& site_name() const noexcept { return site_name_; }
  bool per_frame() const noexcept { return per_frame_; }
  int bits() const noexcept { return params_.front().bits(); }
  const std::vector<QuantParams>& params() const noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }

  friend bool operator==(const FrameQuantScheme&, const FrameQuantScheme&) = default;

 private:
  std::string site_name_;
  bool per_frame_;
  std::vector<QuantParams> params_;
};

/// Schemes keyed by site name; ordered so iteration is deterministic.
using SchemeSet = std::map<std::string, FrameQuantScheme>;

inline double clamp(double x, double lb, double ub) { return std::min(std::max(x, lb), ub); }

/// Quantize-dequantize one value. Rounding is half away from zero.
inline double fake_quantize(double x, const QuantParams& p) {
  const double clipped = clamp(x, p.lb(), p.ub());
  double level = std::round((clipped - p.lb()) / p.delta());
  level = std::clamp(level, 0.0, p.max_level());
  return level * p.delta() + p.lb();
}

inline Tensor fake_quantize(const Tensor& x, const QuantParams& p) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (auto& v : out) v = fake_quantize(v, p);
  return Tensor(x.shape(), std::move(out), x.frame_axis());
}

/// Applies params[i] to frame i, or params[0] everywhere for per-tensor schemes.
inline Tensor quantize_per_frame(const Tensor& x, const FrameQuantScheme& scheme) {
  if (!scheme.per_frame()) return fake_quantize(x, scheme.params().front());
  if (!x.frame_axis()) {
    throw Error("per-frame scheme '" + scheme.site_name() + "' needs a tensor with a frame axis");
  }
  const std::size_t axis = *x.frame_axis();
  const std::size_t frames = x.shape()[axis];
  if (frames != scheme.size()) {
    throw Error("frame-count mismatch for '" + scheme.site_name() + "': tensor has " +
                std::to_string(frames) + " frames, scheme has " +
                std::to_string(scheme.size()));
  }
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.shape()[a];

  std::vector<double> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = fake_quantize(out[i], scheme.params()[(i / inner) % frames]);
  }
  return Tensor(x.shape(), std::move(out), x.frame_axis());
}

/// Mean squared quantization error of `x` under `p`.
inline double quant_error(std::span<const double> x, const QuantParams& p) {
  if (x.empty()) throw Error("empty input");
  double acc = 0.0;
  for (double v : x) {
    const double d = v - fake_quantize(v, p);
    acc += d * d;
  }
  return acc / static_cast<double>(x.size());
}

inline double quant_error(const Tensor& x, const QuantParams& p) {
  return quant_error(x.values(), p);
}

}  // namespace pmqve
