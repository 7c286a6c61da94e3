#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "pmqve/error.hpp"
#include "pmqve/fakequant.hpp"
#include "pmqve/tensor.hpp"

namespace pmqve {

// Dense kernels shared by the graph nodes and the eager model forward, so
// that both paths produce bit-identical values.
namespace kernels {

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw Error(std::string(what) + ": expected a matrix, got " + shape_to_string(t.shape()));
}

/// a @ b, or a @ b^T when transpose_b is set.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.extent(0);
  const std::size_t k = a.extent(1);
  const std::size_t kb = transpose_b ? b.extent(1) : b.extent(0);
  const std::size_t n = transpose_b ? b.extent(0) : b.extent(1);
  if (k != kb) {
    throw Error("matmul: inner dimensions differ (" + shape_to_string(a.shape()) + " x " +
                shape_to_string(b.shape()) + (transpose_b ? "^T)" : ")"));
  }
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        acc += a.at(i, p) * (transpose_b ? b.at(j, p) : b.at(p, j));
      }
      out.at(i, j) = acc;
    }
  }
  return out;
}

inline Tensor relu(const Tensor& x) {
  Tensor out = x.with_frame_axis(std::nullopt);
  for (auto& v : out.mutable_values()) v = std::max(v, 0.0);
  return out;
}

/// Row-wise softmax over the last axis of a matrix.
inline Tensor softmax(const Tensor& x) {
  require_matrix(x, "softmax");
  Tensor out = Tensor::zeros(x.shape());
  const std::size_t rows = x.extent(0);
  const std::size_t cols = x.extent(1);
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = x.at(r, 0);
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x.at(r, c));
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      out.at(r, c) = std::exp(x.at(r, c) - mx);
      sum += out.at(r, c);
    }
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) /= sum;
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw Error("add: shape mismatch");
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw Error("mul: shape mismatch");
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

/// Number of leading rows that share one clipping interval, given the row
/// count of a matrix and the number of intervals (1 or one per row group).
inline std::size_t rows_per_group(std::size_t rows, std::size_t groups) {
  if (groups == 0 || rows % groups != 0) throw Error("ste_fakequant: bound count does not divide rows");
  return rows / groups;
}

}  // namespace kernels

enum class ParamRole { weight, bound_lb, bound_ub };

/// Learnable tensor. Gradients accumulate into `grad` during backward.
struct TrainableParam {
  std::string name;
  Tensor value;
  Tensor grad;
  ParamRole role = ParamRole::weight;
  bool frozen = false;

  TrainableParam(std::string n, Tensor v, ParamRole r)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape())), role(r) {}

  void zero_grad() { grad = Tensor::zeros(value.shape()); }
};

/// Owns trainable parameters and records which lb/ub pairs belong together.
class ParamSet {
 public:
  TrainableParam& add_weight(std::string name, Tensor value) {
    params_.emplace_back(std::move(name), std::move(value), ParamRole::weight);
    return params_.back();
  }

  /// Adds a (lb, ub) pair of equal shape; returns the index of the pair.
  std::size_t add_bounds(const std::string& site, Tensor lb, Tensor ub) {
    if (lb.shape() != ub.shape()) throw Error("bounds for '" + site + "' have mismatched shapes");
    for (std::size_t i = 0; i < lb.size(); ++i) {
      if (!(ub[i] > lb[i])) throw Error("bounds for '" + site + "' must satisfy ub > lb");
    }
    params_.emplace_back(site + ".lb", std::move(lb), ParamRole::bound_lb);
    TrainableParam* l = &params_.back();
    params_.emplace_back(site + ".ub", std::move(ub), ParamRole::bound_ub);
    pairs_.push_back({l, &params_.back()});
    return pairs_.size() - 1;
  }

  TrainableParam& lb(std::size_t pair) { return *pairs_.at(pair).first; }
  TrainableParam& ub(std::size_t pair) { return *pairs_.at(pair).second; }
  const TrainableParam& lb(std::size_t pair) const { return *pairs_.at(pair).first; }
  const TrainableParam& ub(std::size_t pair) const { return *pairs_.at(pair).second; }
  std::size_t pair_count() const noexcept { return pairs_.size(); }

  std::deque<TrainableParam>& all() noexcept { return params_; }
  const std::deque<TrainableParam>& all() const noexcept { return params_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  // deque keeps element addresses stable as parameters are added.
  std::deque<TrainableParam> params_;
  std::vector<std::pair<TrainableParam*, TrainableParam*>> pairs_;
};

/// Minimum gap kept between paired bounds after an update.
inline double min_bound_separation(double lb, double ub) {
  return 10.0 * std::numeric_limits<double>::epsilon() * std::max({std::abs(ub), std::abs(lb), 1.0});
}

/// Plain SGD on every non-frozen parameter, then projects each bound pair
/// so that ub - lb stays at least the minimum separation.
inline void sgd_step(ParamSet& params, double lr) {
  for (auto& p : params.all()) {
    if (p.frozen) continue;
    auto v = p.value.mutable_values();
    const auto g = p.grad.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
  }
  for (std::size_t k = 0; k < params.pair_count(); ++k) {
    auto lb = params.lb(k).value.mutable_values();
    auto ub = params.ub(k).value.mutable_values();
    for (std::size_t i = 0; i < lb.size(); ++i) {
      const double sep = min_bound_separation(lb[i], ub[i]);
      if (ub[i] - lb[i] < sep) {
        const double mid = 0.5 * (lb[i] + ub[i]);
        lb[i] = mid - 0.5 * sep;
        ub[i] = mid + 0.5 * sep;
        if (!(ub[i] > lb[i])) ub[i] = std::nextafter(lb[i], std::numeric_limits<double>::infinity());
      }
    }
  }
}

enum class OpKind {
  input,
  constant,
  param,
  add,
  mul,
  matmul,
  relu,
  softmax,
  ste_fakequant,
  mse_loss,
  scalar_combine,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::input: return "input";
    case OpKind::constant: return "constant";
    case OpKind::param: return "param";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::matmul: return "matmul";
    case OpKind::relu: return "relu";
    case OpKind::softmax: return "softmax";
    case OpKind::ste_fakequant: return "ste_fakequant";
    case OpKind::mse_loss: return "mse_loss";
    case OpKind::scalar_combine: return "scalar_combine";
  }
  return "?";
}

/// Gradient rule for the clipping bounds of an ste_fakequant node.
///
/// clipped: d/dub sums the upstream adjoint over x >= ub, d/dlb over
/// x <= lb; in-range elements contribute nothing.
/// rounding_aware: additionally, an in-range element with scaled position
/// v = (x - lb) / delta and level q = round(v) contributes (q - v) / L to
/// d/dub and -(q - v) / L to d/dlb, where L = 2^bits - 1. This is the
/// derivative of lb + delta * q with round's value kept and its slope
/// taken as one.
enum class BoundGradient { clipped, rounding_aware };

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

struct Node {
  OpKind kind;
  std::vector<NodeId> operands;
  Tensor value;
  Tensor adjoint;
  TrainableParam* param = nullptr;
  bool transpose_b = false;
  int bits = 0;
  BoundGradient bound_gradient = BoundGradient::clipped;
  std::vector<double> coeffs;
};

/// Define-by-run reverse-mode graph.
///
/// Nodes are evaluated as they are added, in insertion order, which is a
/// topological order because operands must already exist. forward()
/// re-evaluates every node from the current inputs and parameter values.
class Graph {
 public:
  NodeId input(Tensor value) { return push({OpKind::input, {}, std::move(value)}); }
  NodeId constant(Tensor value) { return push({OpKind::constant, {}, std::move(value)}); }

  NodeId param(TrainableParam& p) {
    Node n{OpKind::param, {}, Tensor()};
    n.param = &p;
    return push(std::move(n));
  }

  NodeId add(NodeId a, NodeId b) { return push({OpKind::add, {a, b}, Tensor()}); }
  NodeId mul(NodeId a, NodeId b) { return push({OpKind::mul, {a, b}, Tensor()}); }

  NodeId matmul(NodeId a, NodeId b, bool transpose_b = false) {
    Node n{OpKind::matmul, {a, b}, Tensor()};
    n.transpose_b = transpose_b;
    return push(std::move(n));
  }

  NodeId relu(NodeId x) { return push({OpKind::relu, {x}, Tensor()}); }
  NodeId softmax(NodeId x) { return push({OpKind::softmax, {x}, Tensor()}); }

  /// Fake quantization of a matrix with straight-through gradients. `lb`
  /// and `ub` hold one entry per row group (one group per frame) or a
  /// single entry for the whole matrix.
  NodeId ste_fakequant(NodeId x, NodeId lb, NodeId ub, int bits,
                       BoundGradient rule = BoundGradient::clipped) {
    Node n{OpKind::ste_fakequant, {x, lb, ub}, Tensor()};
    n.bits = bits;
    n.bound_gradient = rule;
    return push(std::move(n));
  }

  /// Mean squared difference, as a [1] tensor.
  NodeId mse_loss(NodeId a, NodeId b) { return push({OpKind::mse_loss, {a, b}, Tensor()}); }

  /// sum_i coeffs[i] * operand_i over scalar operands.
  NodeId scalar_combine(std::vector<NodeId> operands, std::vector<double> coeffs) {
    if (operands.size() != coeffs.size()) throw Error("scalar_combine: operand/coefficient count mismatch");
    Node n{OpKind::scalar_combine, std::move(operands), Tensor()};
    n.coeffs = std::move(coeffs);
    return push(std::move(n));
  }

  void set_input(NodeId id, Tensor value) {
    Node& n = node(id);
    if (n.kind != OpKind::input) throw Error("node " + std::to_string(id.index) + " is not an input");
    n.value = std::move(value);
  }

  const Tensor& value(NodeId id) const { return node(id).value; }
  const Tensor& adjoint(NodeId id) const { return node(id).adjoint; }
  const Node& node(NodeId id) const { return nodes_.at(id.index); }
  std::size_t size() const noexcept { return nodes_.size(); }

  double scalar(NodeId id) const {
    const Tensor& v = value(id);
    if (v.size() != 1) throw Error("node " + std::to_string(id.index) + " is not scalar");
    return v[0];
  }

  void forward() {
    for (std::size_t i = 0; i < nodes_.size(); ++i) evaluate(i);
    evaluated_ = true;
  }

  /// Reverse sweep from a scalar loss. Adds d(scale * loss)/d(param) into
  /// each reachable parameter's grad.
  void backward(NodeId loss, double scale = 1.0) {
    if (!evaluated_) throw Error("backward: graph has not been evaluated");
    if (value(loss).size() != 1) throw Error("backward: loss must be scalar");
    for (auto& n : nodes_) n.adjoint = Tensor();
    nodes_[loss.index].adjoint = Tensor::filled(value(loss).shape(), scale);
    for (std::size_t i = loss.index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.adjoint.empty()) continue;
      propagate(n);
    }
  }

  /// True when `target` depends on `source` through a path containing an
  /// ste_fakequant node.
  bool path_has_ste(NodeId source, NodeId target) const {
    std::vector<char> reach(nodes_.size(), 0);  // 1: depends on source, 2: via STE
    reach[source.index] = 1;
    for (std::size_t i = source.index + 1; i <= target.index; ++i) {
      const Node& n = nodes_[i];
      for (auto op : n.operands) {
        if (reach[op.index]) {
          const char r = (n.kind == OpKind::ste_fakequant || reach[op.index] == 2) ? 2 : 1;
          reach[i] = std::max(reach[i], r);
        }
      }
    }
    return reach[target.index] == 2;
  }

  /// Finds the node bound to `p`, if any.
  std::optional<NodeId> find_param(const TrainableParam& p) const {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].param == &p) return NodeId{i};
    }
    return std::nullopt;
  }

 private:
  Node& node(NodeId id) { return nodes_.at(id.index); }

  NodeId push(Node n) {
    for (auto op : n.operands) {
      if (op.index >= nodes_.size()) throw Error("operand refers to a node that does not exist");
    }
    nodes_.push_back(std::move(n));
    try {
      evaluate(nodes_.size() - 1);
    } catch (const Error& e) {
      const auto kind = nodes_.back().kind;
      nodes_.pop_back();
      throw Error(std::string(op_name(kind)) + " node " + std::to_string(nodes_.size()) + ": " + e.what());
    }
    evaluated_ = true;
    return NodeId{nodes_.size() - 1};
  }

  const Tensor& operand(const Node& n, std::size_t i) const { return nodes_[n.operands[i].index].value; }

  void evaluate(std::size_t i) {
    Node& n = nodes_[i];
    switch (n.kind) {
      case OpKind::input:
      case OpKind::constant:
        break;
      case OpKind::param:
        n.value = n.param->value;
        break;
      case OpKind::add:
        n.value = kernels::add(operand(n, 0), operand(n, 1));
        break;
      case OpKind::mul:
        n.value = kernels::mul(operand(n, 0), operand(n, 1));
        break;
      case OpKind::matmul:
        n.value = kernels::matmul(operand(n, 0), operand(n, 1), n.transpose_b);
        break;
      case OpKind::relu:
        n.value = kernels::relu(operand(n, 0));
        break;
      case OpKind::softmax:
        n.value = kernels::softmax(operand(n, 0));
        break;
      case OpKind::ste_fakequant: {
        const Tensor& x = operand(n, 0);
        const Tensor& lb = operand(n, 1);
        const Tensor& ub = operand(n, 2);
        kernels::require_matrix(x, "ste_fakequant");
        if (lb.shape() != ub.shape()) throw Error("ste_fakequant: bound shapes differ");
        const std::size_t group = kernels::rows_per_group(x.extent(0), lb.size());
        const std::size_t cols = x.extent(1);
        Tensor out = Tensor::zeros(x.shape());
        for (std::size_t g = 0; g < lb.size(); ++g) {
          const QuantParams p(lb[g], ub[g], n.bits);
          for (std::size_t r = g * group; r < (g + 1) * group; ++r) {
            for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = fake_quantize(x.at(r, c), p);
          }
        }
        n.value = std::move(out);
        break;
      }
      case OpKind::mse_loss:
        n.value = Tensor::scalar(mse(operand(n, 0), operand(n, 1)));
        break;
      case OpKind::scalar_combine: {
        double acc = 0.0;
        for (std::size_t k = 0; k < n.operands.size(); ++k) {
          const Tensor& v = operand(n, k);
          if (v.size() != 1) throw Error("scalar_combine: operand is not scalar");
          acc += n.coeffs[k] * v[0];
        }
        n.value = Tensor::scalar(acc);
        break;
      }
    }
  }

  void accumulate(NodeId id, const Tensor& delta) {
    Node& target = nodes_[id.index];
    if (target.adjoint.empty()) {
      target.adjoint = delta;
      return;
    }
    auto dst = target.adjoint.mutable_values();
    const auto src = delta.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  void propagate(Node& n) {
    const Tensor& up = n.adjoint;
    switch (n.kind) {
      case OpKind::input:
      case OpKind::constant:
        break;
      case OpKind::param: {
        auto g = n.param->grad.mutable_values();
        const auto u = up.values();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += u[i];
        break;
      }
      case OpKind::add:
        accumulate(n.operands[0], up);
        accumulate(n.operands[1], up);
        break;
      case OpKind::mul:
        accumulate(n.operands[0], kernels::mul(up, operand(n, 1)));
        accumulate(n.operands[1], kernels::mul(up, operand(n, 0)));
        break;
      case OpKind::matmul: {
        const Tensor& a = operand(n, 0);
        const Tensor& b = operand(n, 1);
        const std::size_t m = a.extent(0);
        const std::size_t k = a.extent(1);
        const std::size_t cols = up.extent(1);
        Tensor ga = Tensor::zeros(a.shape());
        Tensor gb = Tensor::zeros(b.shape());
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < cols; ++j) {
            const double u = up.at(i, j);
            if (u == 0.0) continue;
            for (std::size_t p = 0; p < k; ++p) {
              if (n.transpose_b) {
                ga.at(i, p) += u * b.at(j, p);
                gb.at(j, p) += u * a.at(i, p);
              } else {
                ga.at(i, p) += u * b.at(p, j);
                gb.at(p, j) += u * a.at(i, p);
              }
            }
          }
        }
        accumulate(n.operands[0], ga);
        accumulate(n.operands[1], gb);
        break;
      }
      case OpKind::relu: {
        const Tensor& x = operand(n, 0);
        Tensor g = Tensor::zeros(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > 0.0 ? up[i] : 0.0;
        accumulate(n.operands[0], g);
        break;
      }
      case OpKind::softmax: {
        // dx = y * (dy - sum(dy * y)) per row.
        const Tensor& y = n.value;
        Tensor g = Tensor::zeros(y.shape());
        for (std::size_t r = 0; r < y.extent(0); ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < y.extent(1); ++c) dot += up.at(r, c) * y.at(r, c);
          for (std::size_t c = 0; c < y.extent(1); ++c) g.at(r, c) = y.at(r, c) * (up.at(r, c) - dot);
        }
        accumulate(n.operands[0], g);
        break;
      }
      case OpKind::ste_fakequant: {
        const Tensor& x = operand(n, 0);
        const Tensor& lb = operand(n, 1);
        const Tensor& ub = operand(n, 2);
        const std::size_t group = kernels::rows_per_group(x.extent(0), lb.size());
        const std::size_t cols = x.extent(1);
        Tensor gx = Tensor::zeros(x.shape());
        Tensor glb = Tensor::zeros(lb.shape());
        Tensor gub = Tensor::zeros(ub.shape());
        const bool rounding = n.bound_gradient == BoundGradient::rounding_aware;
        for (std::size_t g = 0; g < lb.size(); ++g) {
          const QuantParams p(lb[g], ub[g], n.bits);
          for (std::size_t r = g * group; r < (g + 1) * group; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
              const double v = x.at(r, c);
              const double u = up.at(r, c);
              if (v <= lb[g]) {
                glb[g] += u;
              } else if (v >= ub[g]) {
                gub[g] += u;
              } else {
                gx.at(r, c) = u;
                if (rounding) {
                  const double pos = (v - p.lb()) / p.delta();
                  const double level = std::clamp(std::round(pos), 0.0, p.max_level());
                  const double slope = (level - pos) / p.max_level();
                  gub[g] += u * slope;
                  glb[g] -= u * slope;
                }
              }
            }
          }
        }
        accumulate(n.operands[0], gx);
        accumulate(n.operands[1], glb);
        accumulate(n.operands[2], gub);
        break;
      }
      case OpKind::mse_loss: {
        const Tensor& a = operand(n, 0);
        const Tensor& b = operand(n, 1);
        const double s = 2.0 * up[0] / static_cast<double>(a.size());
        Tensor ga = Tensor::zeros(a.shape());
        Tensor gb = Tensor::zeros(b.shape());
        for (std::size_t i = 0; i < a.size(); ++i) {
          ga[i] = s * (a[i] - b[i]);
          gb[i] = -ga[i];
        }
        accumulate(n.operands[0], ga);
        accumulate(n.operands[1], gb);
        break;
      }
      case OpKind::scalar_combine:
        for (std::size_t k = 0; k < n.operands.size(); ++k) {
          accumulate(n.operands[k], Tensor::scalar(n.coeffs[k] * up[0]));
        }
        break;
    }
  }

  std::vector<Node> nodes_;
  bool evaluated_ = false;
};

enum class GradcheckStatus { pass, fail, not_checkable };

struct GradcheckReport {
  GradcheckStatus status = GradcheckStatus::pass;
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string message;
};

/// Compares the analytic gradient of `loss` w.r.t. `p` with central
/// differences. Parameters reaching the loss through an STE node are
/// reported as not checkable: the true function is piecewise constant.
inline GradcheckReport gradcheck(Graph& graph, NodeId loss, TrainableParam& p, double h, double tol) {
  GradcheckReport report;
  const auto pid = graph.find_param(p);
  if (!pid) {
    report.status = GradcheckStatus::fail;
    report.message = "parameter '" + p.name + "' is not part of the graph";
    return report;
  }
  if (graph.path_has_ste(*pid, loss)) {
    report.status = GradcheckStatus::not_checkable;
    report.message = "not checkable: STE surrogate on the path from '" + p.name + "'";
    return report;
  }

  graph.forward();
  const Tensor saved_grad = p.grad;
  p.zero_grad();
  graph.backward(loss);
  const Tensor analytic = p.grad;
  p.grad = saved_grad;

  auto values = p.value.mutable_values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + h;
    graph.forward();
    const double plus = graph.scalar(loss);
    values[i] = orig - h;
    graph.forward();
    const double minus = graph.scalar(loss);
    values[i] = orig;
    const double numeric = (plus - minus) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
    report.max_rel_error = std::max(report.max_rel_error, std::abs(analytic[i] - numeric) / denom);
    ++report.coordinates;
  }
  graph.forward();
  report.status = report.max_rel_error <= tol ? GradcheckStatus::pass : GradcheckStatus::fail;
  return report;
}

}  // namespace pmqve
