#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pmqve/error.hpp"
#include "pmqve/fakequant.hpp"
#include "pmqve/parallel.hpp"
#include "pmqve/rng.hpp"
#include "pmqve/tensor.hpp"

namespace pmqve {

// Percentile window of the bound search space.
inline constexpr double kLowerSpaceMin = 0.1;
inline constexpr double kLowerSpaceMax = 10.0;
inline constexpr double kUpperSpaceMin = 90.0;
inline constexpr double kUpperSpaceMax = 99.9;
// Starting point of the backtracking search, snapped to the grid.
inline constexpr double kStartLower = 1.0;
inline constexpr double kStartUpper = 99.0;

struct SearchConfig {
  std::size_t grid_points = 32;
  /// Pruning slack relative to the starting error: eps = epsilon_rel * err(lb0, ub0).
  double epsilon_rel = 0.01;
  /// Cap on evaluated states; unset means grid_points^2.
  std::optional<std::size_t> max_states;
  /// When non-zero, frames larger than this are reduced to a fixed-seed
  /// random subset before the search.
  std::size_t subsample = 0;
  std::uint64_t subsample_seed = 0;
  bool record_trace = false;

  void validate() const {
    if (grid_points < 2) throw Error("grid_points must be at least 2");
    if (!(epsilon_rel >= 0.0)) throw Error("epsilon_rel must be non-negative");
    if (max_states && *max_states < 1) throw Error("max_states must be at least 1");
  }

  std::size_t state_cap() const { return max_states.value_or(grid_points * grid_points); }
};

/// Candidate grids for the lower and upper bound of one frame.
struct SearchSpace {
  std::vector<double> lb_grid;
  std::vector<double> ub_grid;
  double delta_l = 0.0;
  double delta_u = 0.0;
  /// Grid indices nearest to the starting percentiles.
  std::size_t start_lb = 0;
  std::size_t start_ub = 0;

  void validate() const {
    if (lb_grid.size() < 2 || ub_grid.size() < 2) throw Error("search grids need at least 2 points");
    if (!(lb_grid.back() < ub_grid.front())) {
      throw SearchSpaceCollapsed("lower-bound grid overlaps upper-bound grid");
    }
    if (start_lb >= lb_grid.size() || start_ub >= ub_grid.size()) {
      throw Error("search start lies outside the grid");
    }
  }
};

struct SearchStep {
  double lb;
  double ub;
  double error;
};

struct SearchResult {
  double lb_star = 0.0;
  double ub_star = 0.0;
  double error_min = std::numeric_limits<double>::infinity();
  std::size_t states_visited = 0;
  /// Error at the starting point (lb0, ub0); NaN for the exhaustive search.
  double error_start = std::numeric_limits<double>::quiet_NaN();
  std::vector<SearchStep> trace;
};

namespace detail {

inline std::vector<double> uniform_grid(double lo, double hi, std::size_t points) {
  std::vector<double> grid(points);
  const double step = (hi - lo) / static_cast<double>(points - 1);
  for (std::size_t i = 0; i < points; ++i) grid[i] = lo + step * static_cast<double>(i);
  grid.back() = hi;
  return grid;
}

inline std::size_t nearest_index(const std::vector<double>& grid, double value) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (std::abs(grid[i] - value) < std::abs(grid[best] - value)) best = i;
  }
  return best;
}

/// Ordering used to break exact error ties: smaller ub first, then larger lb.
inline bool tie_preferred(std::size_t lb_idx, std::size_t ub_idx, std::size_t best_lb,
                          std::size_t best_ub) {
  return ub_idx < best_ub || (ub_idx == best_ub && lb_idx > best_lb);
}

inline std::vector<double> subsample(std::span<const double> values, std::size_t count,
                                     std::uint64_t seed) {
  std::vector<double> pool(values.begin(), values.end());
  if (count == 0 || count >= pool.size()) return pool;
  SplitMix64 rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

}  // namespace detail

/// Percentile-constrained grids: lb over [p0.1, p10], ub over [p90, p99.9].
inline SearchSpace build_search_space(std::span<const double> frame, const SearchConfig& cfg) {
  cfg.validate();
  if (frame.empty()) throw Error("empty input");
  const auto sorted = sorted_values(frame);
  const double lo_min = percentile_sorted(sorted, kLowerSpaceMin);
  const double lo_max = percentile_sorted(sorted, kLowerSpaceMax);
  const double hi_min = percentile_sorted(sorted, kUpperSpaceMin);
  const double hi_max = percentile_sorted(sorted, kUpperSpaceMax);
  if (lo_min == hi_max) throw Error("degenerate distribution");
  if (!(lo_max < hi_min)) {
    throw SearchSpaceCollapsed("lower-bound grid overlaps upper-bound grid (p10 >= p90)");
  }

  SearchSpace space;
  const std::size_t g = cfg.grid_points;
  space.lb_grid = detail::uniform_grid(lo_min, lo_max, g);
  space.ub_grid = detail::uniform_grid(hi_min, hi_max, g);
  space.delta_l = (lo_max - lo_min) / static_cast<double>(g - 1);
  space.delta_u = (hi_max - hi_min) / static_cast<double>(g - 1);
  space.start_lb = detail::nearest_index(space.lb_grid, percentile_sorted(sorted, kStartLower));
  space.start_ub = detail::nearest_index(space.ub_grid, percentile_sorted(sorted, kStartUpper));
  return space;
}

inline SearchSpace build_search_space(const Tensor& frame, const SearchConfig& cfg) {
  return build_search_space(frame.values(), cfg);
}

/// Backtracking bound search over the grid.
///
/// Depth-first exploration from (lb0, ub0) with an explicit stack. Each
/// state is evaluated at most once; a state whose error exceeds
/// error_min + eps is not expanded. Neighbours are the four axis moves,
/// expanded in the order +lb, -lb, +ub, -ub. The search stops when the
/// stack empties or the state cap is reached.
inline SearchResult btbi_search(std::span<const double> frame, const SearchSpace& space,
                                const SearchConfig& cfg, int bits) {
  cfg.validate();
  space.validate();
  if (bits < 1) throw Error("bit-width must be at least 1");
  if (frame.empty()) throw Error("empty input");

  const std::size_t nl = space.lb_grid.size();
  const std::size_t nu = space.ub_grid.size();
  const std::size_t cap = cfg.state_cap();
  std::vector<char> visited(nl * nu, 0);

  SearchResult result;
  std::size_t best_lb = 0;
  std::size_t best_ub = 0;
  double epsilon = 0.0;

  struct State {
    std::size_t lb;
    std::size_t ub;
  };
  std::vector<State> stack{{space.start_lb, space.start_ub}};

  while (!stack.empty() && result.states_visited < cap) {
    const State s = stack.back();
    stack.pop_back();
    auto& seen = visited[s.lb * nu + s.ub];
    if (seen) continue;
    seen = 1;
    ++result.states_visited;

    const double lb = space.lb_grid[s.lb];
    const double ub = space.ub_grid[s.ub];
    const double err = quant_error(frame, QuantParams(lb, ub, bits));
    if (cfg.record_trace) result.trace.push_back({lb, ub, err});

    if (result.states_visited == 1) {
      result.error_start = err;
      epsilon = std::isinf(cfg.epsilon_rel) ? cfg.epsilon_rel : cfg.epsilon_rel * err;
    } else if (err > result.error_min + epsilon) {
      continue;
    }
    if (err < result.error_min ||
        (err == result.error_min && detail::tie_preferred(s.lb, s.ub, best_lb, best_ub))) {
      result.error_min = err;
      best_lb = s.lb;
      best_ub = s.ub;
    }

    // Pushed in reverse so that +lb is explored first.
    if (s.ub > 0) stack.push_back({s.lb, s.ub - 1});
    if (s.ub + 1 < nu) stack.push_back({s.lb, s.ub + 1});
    if (s.lb > 0) stack.push_back({s.lb - 1, s.ub});
    if (s.lb + 1 < nl) stack.push_back({s.lb + 1, s.ub});
  }

  result.lb_star = space.lb_grid[best_lb];
  result.ub_star = space.ub_grid[best_ub];
  return result;
}

inline SearchResult btbi_search(const Tensor& frame, const SearchSpace& space,
                                const SearchConfig& cfg, int bits) {
  return btbi_search(frame.values(), space, cfg, bits);
}

/// Evaluates every grid pair; ties go to the smallest ub, then the largest lb.
inline SearchResult exhaustive_search(std::span<const double> frame, const SearchSpace& space,
                                      int bits) {
  space.validate();
  if (bits < 1) throw Error("bit-width must be at least 1");
  SearchResult result;
  std::size_t best_lb = 0;
  std::size_t best_ub = 0;
  for (std::size_t u = 0; u < space.ub_grid.size(); ++u) {
    for (std::size_t l = 0; l < space.lb_grid.size(); ++l) {
      const double err = quant_error(frame, QuantParams(space.lb_grid[l], space.ub_grid[u], bits));
      ++result.states_visited;
      if (err < result.error_min ||
          (err == result.error_min && detail::tie_preferred(l, u, best_lb, best_ub))) {
        result.error_min = err;
        best_lb = l;
        best_ub = u;
      }
    }
  }
  result.lb_star = space.lb_grid[best_lb];
  result.ub_star = space.ub_grid[best_ub];
  return result;
}

inline SearchResult exhaustive_search(const Tensor& frame, const SearchSpace& space, int bits) {
  return exhaustive_search(frame.values(), space, bits);
}

inline QuantParams minmax_bounds(std::span<const double> frame, int bits) {
  if (frame.empty()) throw Error("empty input");
  const auto [lo, hi] = std::minmax_element(frame.begin(), frame.end());
  if (*lo == *hi) throw Error("degenerate distribution");
  return QuantParams(*lo, *hi, bits);
}

inline QuantParams minmax_bounds(const Tensor& frame, int bits) {
  return minmax_bounds(frame.values(), bits);
}

inline QuantParams percentile_bounds(std::span<const double> frame, double k_low, double k_high,
                                     int bits) {
  if (frame.empty()) throw Error("empty input");
  const auto sorted = sorted_values(frame);
  const double lo = percentile_sorted(sorted, k_low);
  const double hi = percentile_sorted(sorted, k_high);
  if (!(hi > lo)) throw Error("degenerate distribution");
  return QuantParams(lo, hi, bits);
}

inline QuantParams percentile_bounds(const Tensor& frame, double k_low, double k_high, int bits) {
  return percentile_bounds(frame.values(), k_low, k_high, bits);
}

/// Bounds for a constant frame: the value widened by a few ulps on each side.
inline QuantParams widened_bounds(double value, int bits) {
  const double w = 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(value));
  return QuantParams(value - w, value + w, bits);
}

enum class BoundMethod { minmax, percentile, btbi };

struct CalibrationOptions {
  int bits = 8;
  bool per_frame = true;
  BoundMethod method = BoundMethod::btbi;
  SearchConfig search;
  double percentile_low = kLowerSpaceMin;
  double percentile_high = kUpperSpaceMax;
};

enum class Fallback { none, minmax, widened };

struct FrameCalibration {
  double initial_error = 0.0;
  double final_error = 0.0;
  std::size_t states_visited = 0;
  Fallback fallback = Fallback::none;
};

struct SiteCalibration {
  FrameQuantScheme scheme;
  std::vector<FrameCalibration> frames;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::pair<QuantParams, FrameCalibration> calibrate_frame(std::span<const double> values,
                                                                const CalibrationOptions& opt,
                                                                std::uint64_t seed) {
  FrameCalibration info;
  const auto minmax_fallback = [&](Fallback kind) {
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const QuantParams p = *lo == *hi ? widened_bounds(*lo, opt.bits) : QuantParams(*lo, *hi, opt.bits);
    info.fallback = *lo == *hi ? Fallback::widened : kind;
    info.initial_error = info.final_error = quant_error(values, p);
    return std::pair{p, info};
  };
  if (values.empty()) throw Error("empty input");

  switch (opt.method) {
    case BoundMethod::minmax:
      return minmax_fallback(Fallback::none);
    case BoundMethod::percentile: {
      const auto sorted = sorted_values(values);
      const double lo = percentile_sorted(sorted, opt.percentile_low);
      const double hi = percentile_sorted(sorted, opt.percentile_high);
      if (!(hi > lo)) return minmax_fallback(Fallback::minmax);
      const QuantParams p(lo, hi, opt.bits);
      info.initial_error = info.final_error = quant_error(values, p);
      return {p, info};
    }
    case BoundMethod::btbi:
      break;
  }

  const auto sample = detail::subsample(values, opt.search.subsample, seed);
  SearchSpace space;
  try {
    space = build_search_space(sample, opt.search);
  } catch (const SearchSpaceCollapsed&) {
    return minmax_fallback(Fallback::minmax);
  } catch (const Error& e) {
    if (std::string(e.what()) != "degenerate distribution") throw;
    return minmax_fallback(Fallback::minmax);
  }
  const SearchResult r = btbi_search(sample, space, opt.search, opt.bits);
  info.initial_error = r.error_start;
  info.final_error = r.error_min;
  info.states_visited = r.states_visited;
  return {QuantParams(r.lb_star, r.ub_star, opt.bits), info};
}

}  // namespace detail

/// Calibrates one site: an independent bound search per frame (or a single
/// search over the whole tensor). Frames may run concurrently; the result
/// does not depend on scheduling.
inline SiteCalibration calibrate_site(const Tensor& x, const std::string& site,
                                      const CalibrationOptions& opt) {
  opt.search.validate();
  if (x.empty()) throw Error("site '" + site + "': empty input");

  std::vector<Tensor> frames;
  if (opt.per_frame) {
    if (!x.frame_axis()) throw Error("site '" + site + "': per-frame calibration needs a frame axis");
    for (std::size_t i = 0; i < x.num_frames(); ++i) frames.push_back(frame_slice(x, i));
  } else {
    frames.push_back(x.with_frame_axis(std::nullopt));
  }

  std::vector<std::optional<std::pair<QuantParams, FrameCalibration>>> slots(frames.size());
  parallel_for(frames.size(), [&](std::size_t i) {
    try {
      slots[i] = detail::calibrate_frame(frames[i].values(), opt,
                                         derive_seed(opt.search.subsample_seed, i));
    } catch (const Error& e) {
      throw Error("site '" + site + "', frame " + std::to_string(i) + ": " + e.what());
    }
  });

  std::vector<QuantParams> params;
  std::vector<FrameCalibration> infos;
  std::vector<std::string> warnings;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    params.push_back(slots[i]->first);
    infos.push_back(slots[i]->second);
    if (infos.back().fallback == Fallback::minmax) {
      warnings.push_back("site '" + site + "', frame " + std::to_string(i) +
                         ": search space collapsed, using min/max bounds");
    } else if (infos.back().fallback == Fallback::widened) {
      warnings.push_back("site '" + site + "', frame " + std::to_string(i) +
                         ": constant values, bounds widened");
    }
  }
  return {FrameQuantScheme(site, opt.per_frame, std::move(params)), std::move(infos),
          std::move(warnings)};
}

inline FrameQuantScheme calibrate_site(const Tensor& x, bool per_frame, const SearchConfig& cfg,
                                       int bits, const std::string& site = "input") {
  CalibrationOptions opt;
  opt.bits = bits;
  opt.per_frame = per_frame;
  opt.search = cfg;
  return calibrate_site(x, site, opt).scheme;
}

}  // namespace pmqve
