#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mssdf/error.hpp"

namespace mssdf {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool decay = true;  // participates in decoupled weight decay
};

/// Ordered, name-indexed set of trainable tensors. Layout (names, order,
/// shapes) is fixed by the module that built it.
class ParameterStore {
 public:
  std::size_t add(std::string name, Matrix init, bool decay = true) {
    require(!index_.contains(name), "duplicate parameter name '", name, "'");
    const std::size_t id = params_.size();
    index_.emplace(name, id);
    Matrix grad = Matrix::Zero(init.rows(), init.cols());
    params_.push_back(Parameter{std::move(name), std::move(init), std::move(grad), decay});
    return id;
  }

  [[nodiscard]] std::size_t size() const noexcept { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }

  [[nodiscard]] bool contains(const std::string& name) const { return index_.contains(name); }
  [[nodiscard]] std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "unknown parameter '", name, "'");
    return it->second;
  }

  auto begin() noexcept { return params_.begin(); }
  auto end() noexcept { return params_.end(); }
  [[nodiscard]] auto begin() const noexcept { return params_.begin(); }
  [[nodiscard]] auto end() const noexcept { return params_.end(); }

  [[nodiscard]] std::size_t numel() const noexcept {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

  [[nodiscard]] std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(numel());
    for (const auto& p : params_) out.insert(out.end(), p.value.data(), p.value.data() + p.value.size());
    return out;
  }

  [[nodiscard]] std::vector<double> flatten_grad() const {
    std::vector<double> out;
    out.reserve(numel());
    for (const auto& p : params_) out.insert(out.end(), p.grad.data(), p.grad.data() + p.grad.size());
    return out;
  }

  void unflatten(std::span<const double> flat) {
    require(flat.size() == numel(), "flat parameter vector has ", flat.size(), " entries, expected ", numel());
    std::size_t off = 0;
    for (auto& p : params_) {
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), p.value.size(), p.value.data());
      off += static_cast<std::size_t>(p.value.size());
    }
  }

  /// True when both stores hold identically named and shaped tensors in the same order.
  [[nodiscard]] bool same_layout(const ParameterStore& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      const auto& a = params_[i];
      const auto& b = other.params_[i];
      if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols()) return false;
    }
    return true;
  }

  /// FNV-1a over the raw parameter bytes.
  [[nodiscard]] std::uint64_t checksum() const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& p : params_) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data());
      for (std::size_t i = 0; i < static_cast<std::size_t>(p.value.size()) * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 0x100000001B3ULL;
      }
    }
    return h;
  }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

/// Handle to a node on a Graph.
class Var {
 public:
  Var() = default;
  [[nodiscard]] int id() const noexcept { return id_; }
  [[nodiscard]] bool valid() const noexcept { return id_ >= 0; }

 private:
  friend class Graph;
  explicit Var(int id) : id_(id) {}
  int id_ = -1;
};

/// Reverse-mode tape over row-major fp64 matrices. A graph built with
/// record == false evaluates values only and never touches parameter grads.
class Graph {
 public:
  explicit Graph(bool record = true) : record_(record) {}

  [[nodiscard]] bool recording() const noexcept { return record_; }

  [[nodiscard]] const Matrix& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id())).value; }
  [[nodiscard]] const Matrix& grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id())).grad; }
  [[nodiscard]] double scalar(Var v) const {
    const auto& m = value(v);
    require(m.rows() == 1 && m.cols() == 1, "node is not a scalar");
    return m(0, 0);
  }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Matrix m) { return push(std::move(m), false, {}); }

  /// A leaf that reads a store parameter; gradients flow back into store[index].grad.
  Var param(ParameterStore& store, std::size_t index) {
    const auto key = std::make_pair(&store, index);
    if (auto it = param_cache_.find(key); it != param_cache_.end()) return Var(it->second);
    Var v = push(store[index].value, record_, {});
    nodes_.back().store = &store;
    nodes_.back().param_index = index;
    param_cache_.emplace(key, v.id());
    return v;
  }

  /// Accumulates d(root)/d(node) into every recorded node and parameter store.
  void backward(Var root, double seed = 1.0) {
    require(record_, "backward on a non-recording graph");
    auto& r = node(root);
    require(r.value.rows() == 1 && r.value.cols() == 1, "backward root must be a scalar");
    if (!r.needs_grad) return;
    accumulate(root.id(), Matrix::Constant(1, 1, seed));
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(n.grad);
      if (n.store != nullptr) (*n.store)[n.param_index].grad += n.grad;
    }
  }

  // ---- elementwise / linear algebra ----

  Var matmul(Var a, Var b) {
    const Matrix& A = value(a);
    const Matrix& B = value(b);
    require(A.cols() == B.rows(), "matmul shape mismatch ", A.rows(), "x", A.cols(), " * ", B.rows(), "x",
            B.cols());
    Matrix out = A * B;
    return push(std::move(out), needs(a) || needs(b), [this, a, b](const Matrix& g) {
      if (needs(a)) accumulate(a.id(), g * value(b).transpose());
      if (needs(b)) accumulate(b.id(), value(a).transpose() * g);
    });
  }

  /// a * b^T
  Var matmul_nt(Var a, Var b) {
    const Matrix& A = value(a);
    const Matrix& B = value(b);
    require(A.cols() == B.cols(), "matmul_nt shape mismatch");
    Matrix out = A * B.transpose();
    return push(std::move(out), needs(a) || needs(b), [this, a, b](const Matrix& g) {
      if (needs(a)) accumulate(a.id(), g * value(b));
      if (needs(b)) accumulate(b.id(), g.transpose() * value(a));
    });
  }

  /// c * a for a constant left factor.
  Var left_multiply(const Matrix& c, Var a) {
    require(c.cols() == value(a).rows(), "left_multiply shape mismatch");
    Matrix out = c * value(a);
    return push(std::move(out), needs(a), [this, c, a](const Matrix& g) { accumulate(a.id(), c.transpose() * g); });
  }

  Var add(Var a, Var b) {
    require_same_shape(a, b, "add");
    Matrix out = value(a) + value(b);
    return push(std::move(out), needs(a) || needs(b), [this, a, b](const Matrix& g) {
      if (needs(a)) accumulate(a.id(), g);
      if (needs(b)) accumulate(b.id(), g);
    });
  }

  Var sub(Var a, Var b) {
    require_same_shape(a, b, "sub");
    Matrix out = value(a) - value(b);
    return push(std::move(out), needs(a) || needs(b), [this, a, b](const Matrix& g) {
      if (needs(a)) accumulate(a.id(), g);
      if (needs(b)) accumulate(b.id(), -g);
    });
  }

  /// a + 1 * row, broadcasting a 1xD row over every row of a.
  Var add_row(Var a, Var row) {
    const Matrix& A = value(a);
    const Matrix& R = value(row);
    require(R.rows() == 1 && R.cols() == A.cols(), "add_row expects a 1x", A.cols(), " row");
    Matrix out = A.rowwise() + R.row(0);
    return push(std::move(out), needs(a) || needs(row), [this, a, row](const Matrix& g) {
      if (needs(a)) accumulate(a.id(), g);
      if (needs(row)) accumulate(row.id(), g.colwise().sum());
    });
  }

  Var scale(Var a, double s) {
    Matrix out = value(a) * s;
    return push(std::move(out), needs(a), [this, a, s](const Matrix& g) { accumulate(a.id(), g * s); });
  }

  /// Elementwise product with a constant (dropout masks).
  Var mul_const(Var a, const Matrix& c) {
    require(c.rows() == value(a).rows() && c.cols() == value(a).cols(), "mul_const shape mismatch");
    Matrix out = value(a).cwiseProduct(c);
    return push(std::move(out), needs(a), [this, a, c](const Matrix& g) { accumulate(a.id(), g.cwiseProduct(c)); });
  }

  /// Weighted sum of scalar nodes.
  Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
    require(terms.size() == weights.size(), "weighted_sum arity mismatch");
    Matrix out = Matrix::Zero(1, 1);
    bool ng = false;
    for (std::size_t i = 0; i < terms.size(); ++i) {
      require(value(terms[i]).size() == 1, "weighted_sum expects scalars");
      out(0, 0) += weights[i] * value(terms[i])(0, 0);
      ng = ng || needs(terms[i]);
    }
    std::vector<Var> t(terms.begin(), terms.end());
    std::vector<double> w(weights.begin(), weights.end());
    return push(std::move(out), ng, [this, t, w](const Matrix& g) {
      for (std::size_t i = 0; i < t.size(); ++i)
        if (needs(t[i])) accumulate(t[i].id(), g * w[i]);
    });
  }

  /// Exact (erf) GELU.
  Var gelu(Var a) {
    const Matrix& X = value(a);
    Matrix out = X.unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); });
    return push(std::move(out), needs(a), [this, a](const Matrix& g) {
      const Matrix& X = value(a);
      Matrix d = X.unaryExpr([](double x) {
        const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + x * pdf;
      });
      accumulate(a.id(), g.cwiseProduct(d));
    });
  }

  /// Row-wise layer normalization with affine gain/bias (1xD each).
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6) {
    const Matrix& X = value(x);
    const Matrix& G = value(gamma);
    const Matrix& B = value(beta);
    const Eigen::Index d = X.cols();
    require(G.rows() == 1 && G.cols() == d && B.rows() == 1 && B.cols() == d, "layer_norm affine shape mismatch");
    Matrix xhat(X.rows(), d);
    Eigen::VectorXd inv_std(X.rows());
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      const double mean = X.row(r).mean();
      const double var = (X.row(r).array() - mean).square().mean();
      inv_std(r) = 1.0 / std::sqrt(var + eps);
      xhat.row(r) = (X.row(r).array() - mean) * inv_std(r);
    }
    Matrix out = (xhat.array().rowwise() * G.row(0).array()).rowwise() + B.row(0).array();
    return push(std::move(out), needs(x) || needs(gamma) || needs(beta),
                [this, x, gamma, beta, xhat, inv_std](const Matrix& g) {
                  const Matrix& G = value(gamma);
                  if (needs(gamma)) accumulate(gamma.id(), g.cwiseProduct(xhat).colwise().sum());
                  if (needs(beta)) accumulate(beta.id(), g.colwise().sum());
                  if (needs(x)) {
                    Matrix dxhat = g.array().rowwise() * G.row(0).array();
                    Matrix dx(g.rows(), g.cols());
                    for (Eigen::Index r = 0; r < g.rows(); ++r) {
                      const double m1 = dxhat.row(r).mean();
                      const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                      dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
                    }
                    accumulate(x.id(), dx);
                  }
                });
  }

  Var softmax_rows(Var a) {
    const Matrix& X = value(a);
    Matrix out(X.rows(), X.cols());
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      const double m = X.row(r).maxCoeff();
      out.row(r) = (X.row(r).array() - m).exp();
      out.row(r) /= out.row(r).sum();
    }
    return push(std::move(out), needs(a), [this, a, self = static_cast<int>(nodes_.size())](const Matrix& g) {
      const Matrix& Y = nodes_[static_cast<std::size_t>(self)].value;
      Matrix dx(g.rows(), g.cols());
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const double dot = g.row(r).dot(Y.row(r));
        dx.row(r) = Y.row(r).array() * (g.row(r).array() - dot);
      }
      accumulate(a.id(), dx);
    });
  }

  // ---- shape ops ----

  Var slice_cols(Var a, Eigen::Index start, Eigen::Index n) {
    const Matrix& X = value(a);
    require(start >= 0 && start + n <= X.cols(), "slice_cols out of range");
    Matrix out = X.middleCols(start, n);
    return push(std::move(out), needs(a), [this, a, start, n](const Matrix& g) {
      const Matrix& X = value(a);
      Matrix full = Matrix::Zero(X.rows(), X.cols());
      full.middleCols(start, n) = g;
      accumulate(a.id(), full);
    });
  }

  Var concat_cols(std::span<const Var> parts) {
    require(!parts.empty(), "concat_cols of nothing");
    const Eigen::Index rows = value(parts[0]).rows();
    Eigen::Index cols = 0;
    bool ng = false;
    for (auto p : parts) {
      require(value(p).rows() == rows, "concat_cols row mismatch");
      cols += value(p).cols();
      ng = ng || needs(p);
    }
    Matrix out(rows, cols);
    Eigen::Index off = 0;
    for (auto p : parts) {
      out.middleCols(off, value(p).cols()) = value(p);
      off += value(p).cols();
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return push(std::move(out), ng, [this, ps](const Matrix& g) {
      Eigen::Index off = 0;
      for (auto p : ps) {
        const Eigen::Index c = value(p).cols();
        if (needs(p)) accumulate(p.id(), g.middleCols(off, c));
        off += c;
      }
    });
  }

  Var concat_rows(std::span<const Var> parts) {
    require(!parts.empty(), "concat_rows of nothing");
    const Eigen::Index cols = value(parts[0]).cols();
    Eigen::Index rows = 0;
    bool ng = false;
    for (auto p : parts) {
      require(value(p).cols() == cols, "concat_rows column mismatch");
      rows += value(p).rows();
      ng = ng || needs(p);
    }
    Matrix out(rows, cols);
    Eigen::Index off = 0;
    for (auto p : parts) {
      out.middleRows(off, value(p).rows()) = value(p);
      off += value(p).rows();
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return push(std::move(out), ng, [this, ps](const Matrix& g) {
      Eigen::Index off = 0;
      for (auto p : ps) {
        const Eigen::Index r = value(p).rows();
        if (needs(p)) accumulate(p.id(), g.middleRows(off, r));
        off += r;
      }
    });
  }

  /// Rows of a selected by index (duplicates allowed).
  Var gather_rows(Var a, std::span<const int> rows) {
    const Matrix& X = value(a);
    Matrix out(static_cast<Eigen::Index>(rows.size()), X.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require(rows[i] >= 0 && rows[i] < X.rows(), "gather_rows index ", rows[i], " out of range");
      out.row(static_cast<Eigen::Index>(i)) = X.row(rows[i]);
    }
    std::vector<int> idx(rows.begin(), rows.end());
    return push(std::move(out), needs(a), [this, a, idx](const Matrix& g) {
      Matrix full = Matrix::Zero(value(a).rows(), value(a).cols());
      for (std::size_t i = 0; i < idx.size(); ++i) full.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
      accumulate(a.id(), full);
    });
  }

  /// 1xD mean over rows.
  Var mean_rows(Var a) {
    const Matrix& X = value(a);
    require(X.rows() > 0, "mean_rows of an empty matrix");
    Matrix out = X.colwise().mean();
    return push(std::move(out), needs(a), [this, a](const Matrix& g) {
      const auto n = value(a).rows();
      Matrix full = g.replicate(n, 1) / static_cast<double>(n);
      accumulate(a.id(), full);
    });
  }

  /// Node with a caller-supplied value and vector-Jacobian product. The
  /// callback maps the output gradient to one gradient per input.
  Var custom(std::vector<Var> inputs, Matrix out,
             std::function<std::vector<Matrix>(const Matrix& out_grad)> vjp) {
    bool ng = false;
    for (auto v : inputs) ng = ng || needs(v);
    return push(std::move(out), ng, [this, inputs, vjp = std::move(vjp)](const Matrix& g) {
      auto grads = vjp(g);
      require(grads.size() == inputs.size(), "custom node returned the wrong number of gradients");
      for (std::size_t i = 0; i < inputs.size(); ++i)
        if (needs(inputs[i]) && grads[i].size() > 0) accumulate(inputs[i].id(), grads[i]);
    });
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(const Matrix&)> backward;
    ParameterStore* store = nullptr;
    std::size_t param_index = 0;
    bool needs_grad = false;
  };

  Node& node(Var v) { return nodes_.at(static_cast<std::size_t>(v.id())); }
  [[nodiscard]] bool needs(Var v) const { return nodes_[static_cast<std::size_t>(v.id())].needs_grad; }

  void require_same_shape(Var a, Var b, const char* op) const {
    require(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), op, ": shape mismatch ",
            value(a).rows(), "x", value(a).cols(), " vs ", value(b).rows(), "x", value(b).cols());
  }

  Var push(Matrix value, bool needs_grad, std::function<void(const Matrix&)> backward) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = record_ && needs_grad;
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(static_cast<int>(nodes_.size()) - 1);
  }

  void accumulate(int id, const Matrix& g) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  bool record_;
  std::vector<Node> nodes_;
  std::map<std::pair<ParameterStore*, std::size_t>, int> param_cache_;
};

}  // namespace mssdf
