#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pmqve/error.hpp"

namespace pmqve {

using Shape = std::vector<std::size_t>;

inline std::string shape_to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline std::size_t shape_product(const Shape& shape) {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

/// Dense row-major tensor of doubles with an optional frame axis.
///
/// A default-constructed tensor is the empty tensor (no shape, no data).
/// Every other tensor has strictly positive extents and finite values.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data,
         std::optional<std::size_t> frame_axis = std::nullopt)
      : shape_(std::move(shape)), data_(std::move(data)), frame_axis_(frame_axis) {
    for (auto e : shape_) {
      if (e == 0) throw Error("tensor extents must be positive, got " + shape_to_string(shape_));
    }
    if (shape_product(shape_) != data_.size()) {
      throw Error("shape " + shape_to_string(shape_) + " does not match " +
                  std::to_string(data_.size()) + " values");
    }
    if (frame_axis_ && *frame_axis_ >= shape_.size()) {
      throw Error("frame axis " + std::to_string(*frame_axis_) + " out of range for rank " +
                  std::to_string(shape_.size()));
    }
    for (double v : data_) {
      if (!std::isfinite(v)) throw Error("tensor values must be finite");
    }
  }

  static Tensor filled(Shape shape, double value,
                       std::optional<std::size_t> frame_axis = std::nullopt) {
    std::vector<double> data(shape_product(shape), value);
    return Tensor(std::move(shape), std::move(data), frame_axis);
  }

  static Tensor zeros(Shape shape, std::optional<std::size_t> frame_axis = std::nullopt) {
    return filled(std::move(shape), 0.0, frame_axis);
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  std::span<const double> values() const noexcept { return data_; }
  /// Writable access for kernels that fill a freshly shaped tensor. Callers
  /// are responsible for keeping values finite.
  std::span<double> mutable_values() noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  /// 2-D element access (row, col); no bounds checks beyond rank.
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }

  std::optional<std::size_t> frame_axis() const noexcept { return frame_axis_; }

  Tensor with_frame_axis(std::optional<std::size_t> axis) const {
    return Tensor(shape_, data_, axis);
  }

  std::size_t num_frames() const {
    if (!frame_axis_) throw Error("tensor has no frame axis");
    return shape_[*frame_axis_];
  }

  double min() const {
    if (empty()) throw Error("empty input");
    return *std::min_element(data_.begin(), data_.end());
  }
  double max() const {
    if (empty()) throw Error("empty input");
    return *std::max_element(data_.begin(), data_.end());
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  std::optional<std::size_t> frame_axis_;
};

/// Ascending copy of the values, suitable for repeated percentile queries.
inline std::vector<double> sorted_values(std::span<const double> values) {
  std::vector<double> sorted(values.begin(), values.end());
  // Equal values are interchangeable, so an unstable sort still yields a
  // bit-reproducible sequence.
  std::sort(sorted.begin(), sorted.end());
  return sorted;
}

/// Linearly interpolated k-th percentile of an already sorted sequence.
inline double percentile_sorted(std::span<const double> sorted, double k) {
  if (sorted.empty()) throw Error("empty input");
  if (!(k >= 0.0 && k <= 100.0)) throw Error("percentile must lie in [0, 100]");
  const double pos = k / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(lo);
  if (lo + 1 >= sorted.size() || frac == 0.0) return sorted[lo];
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inline double percentile(const Tensor& t, double k) {
  if (t.empty()) throw Error("empty input");
  return percentile_sorted(sorted_values(t.values()), k);
}

/// Frame `index` along the tensor's frame axis, with that axis removed.
inline Tensor frame_slice(const Tensor& t, std::size_t index) {
  if (!t.frame_axis()) throw Error("tensor has no frame axis");
  const std::size_t axis = *t.frame_axis();
  const auto& shape = t.shape();
  if (index >= shape[axis]) {
    throw Error("frame index " + std::to_string(index) + " out of range for " +
                std::to_string(shape[axis]) + " frames");
  }
  std::size_t outer = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= shape[a];
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < shape.size(); ++a) inner *= shape[a];

  Shape sub;
  for (std::size_t a = 0; a < shape.size(); ++a) {
    if (a != axis) sub.push_back(shape[a]);
  }
  if (sub.empty()) sub.push_back(1);

  std::vector<double> out;
  out.reserve(outer * inner);
  const auto values = t.values();
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = (o * shape[axis] + index) * inner;
    out.insert(out.end(), values.begin() + static_cast<std::ptrdiff_t>(base),
               values.begin() + static_cast<std::ptrdiff_t>(base + inner));
  }
  return Tensor(std::move(sub), std::move(out));
}

/// Inverse of frame_slice: stacks equally shaped frames along `axis`.
inline Tensor stack_frames(std::span<const Tensor> frames, std::size_t axis) {
  if (frames.empty()) throw Error("no frames to stack");
  const Shape& sub = frames.front().shape();
  for (const auto& f : frames) {
    if (f.shape() != sub) throw Error("frames have mismatched shapes");
  }
  // A rank-1 frame of extent 1 may stand for a rank-0 slice.
  Shape shape = sub;
  if (axis > shape.size()) throw Error("stack axis out of range");
  shape.insert(shape.begin() + static_cast<std::ptrdiff_t>(axis), frames.size());

  std::size_t outer = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= sub[a];
  const std::size_t inner = frames.front().size() / outer;

  std::vector<double> out;
  out.reserve(frames.size() * frames.front().size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (const auto& f : frames) {
      const auto v = f.values();
      out.insert(out.end(), v.begin() + static_cast<std::ptrdiff_t>(o * inner),
                 v.begin() + static_cast<std::ptrdiff_t>((o + 1) * inner));
    }
  }
  return Tensor(std::move(shape), std::move(out), axis);
}

inline double mse(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("mse: size mismatch");
  if (a.empty()) throw Error("empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

inline double mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw Error("mse: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                shape_to_string(b.shape()));
  }
  return mse(a.values(), b.values());
}

/// Peak signal-to-noise ratio in dB for a given mean squared error.
inline double psnr_from_mse(double mse_value, double peak) {
  if (!(peak > 0.0)) throw Error("psnr: peak must be positive");
  if (mse_value == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse_value);
}

inline double psnr(const Tensor& a, const Tensor& b, double peak) {
  return psnr_from_mse(mse(a, b), peak);
}

}  // namespace pmqve
