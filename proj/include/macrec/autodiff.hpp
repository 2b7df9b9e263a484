#pragma once

// Tape-based reverse-mode automatic differentiation over dense tensors.
//
// Ops are evaluated eagerly as they are recorded, so the tape is always in
// topological order: every input id is smaller than its consumer's id.
// backward() walks the tape in reverse and accumulates gradients; leaves that
// wrap a Parameter push their gradient into Parameter::grad at the end.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "macrec/error.hpp"
#include "macrec/tensor.hpp"

namespace macrec {

template <class Real>
struct BasicParameter {
  std::string name;
  BasicTensor<Real> value;
  BasicTensor<Real> grad;

  BasicParameter(std::string n, BasicTensor<Real> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), Real(0)); }
};

using Parameter = BasicParameter<float>;

// Owns parameters with stable addresses, in registration order.
template <class Real>
class BasicParamStore {
 public:
  BasicParameter<Real>& add(std::string name, BasicTensor<Real> value) {
    for (const auto& p : params_)
      if (p->name == name) throw Error("duplicate parameter name '" + name + "'");
    params_.push_back(std::make_unique<BasicParameter<Real>>(std::move(name), std::move(value)));
    return *params_.back();
  }

  BasicParameter<Real>* find(const std::string& name) {
    for (auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  std::size_t size() const { return params_.size(); }
  BasicParameter<Real>& operator[](std::size_t i) { return *params_[i]; }
  const BasicParameter<Real>& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  // Deep copy of all values (used for best-epoch snapshots).
  std::vector<BasicTensor<Real>> snapshot() const {
    std::vector<BasicTensor<Real>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p->value);
    return out;
  }
  void restore(const std::vector<BasicTensor<Real>>& snap) {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i]->value = snap.at(i);
  }

 private:
  std::vector<std::unique_ptr<BasicParameter<Real>>> params_;
};

using ParamStore = BasicParamStore<float>;

struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const noexcept { return id != UINT32_MAX; }
};

// One attention group: query rows [q_begin, q_end) attend to key/value rows
// [k_begin, k_end). Several groups may share the same key range.
struct AttnSegment {
  std::uint32_t q_begin, q_end, k_begin, k_end;
};

// Contiguous row range, used by segment mean pooling.
struct RowRange {
  std::uint32_t begin, end;
};

template <class Real>
class BasicTape {
 public:
  using T = BasicTensor<Real>;
  using Param = BasicParameter<Real>;

  explicit BasicTape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // ---- leaves ----------------------------------------------------------

  Var constant(T v) { return push("constant", std::move(v), false, nullptr); }

  // Differentiable leaf that is not a Parameter (gradient read via grad()).
  Var leaf(T v) { return push("leaf", std::move(v), grad_enabled_, nullptr); }

  Var param(Param& p) { return push("param", p.value, grad_enabled_, &p); }

  const T& value(Var v) const { return nodes_.at(v.id).value; }
  const char* op_name(Var v) const { return nodes_.at(v.id).op; }

  // Gradient of the last backward() with respect to v. Zero tensor when v was
  // not reached.
  T grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.size() == n.value.size() && !n.grad.data.empty()) return n.grad;
    return T(n.value.shape);
  }

  void backward(Var loss) {
    Node& root = nodes_.at(loss.id);
    if (root.value.size() != 1)
      throw ShapeError(root.op, "backward() needs a scalar loss, got shape " + shape_str(root.value.shape));
    for (auto& n : nodes_) n.grad = T();
    if (!root.requires_grad) return;
    root.grad = T(root.value.shape, Real(1));
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.data.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) {
        auto& pg = n.param->grad.data;
        for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += n.grad.data[j];
      }
    }
  }

  // ---- elementwise -----------------------------------------------------

  Var add(Var a, Var b) {
    same_shape("add", a, b);
    T out = value(a);
    const auto& bv = value(b).data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv[i];
    return record("add", std::move(out), {a, b}, [](BasicTape& t, std::size_t self) {
      const T& g = t.nodes_[self].grad;
      t.accumulate(t.in(self, 0), g.data, Real(1));
      t.accumulate(t.in(self, 1), g.data, Real(1));
    });
  }

  Var sub(Var a, Var b) {
    same_shape("sub", a, b);
    T out = value(a);
    const auto& bv = value(b).data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= bv[i];
    return record("sub", std::move(out), {a, b}, [](BasicTape& t, std::size_t self) {
      const T& g = t.nodes_[self].grad;
      t.accumulate(t.in(self, 0), g.data, Real(1));
      t.accumulate(t.in(self, 1), g.data, Real(-1));
    });
  }

  Var mul(Var a, Var b) {
    same_shape("mul", a, b);
    T out = value(a);
    const auto& bv = value(b).data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv[i];
    return record("mul", std::move(out), {a, b}, [](BasicTape& t, std::size_t self) {
      const T& g = t.nodes_[self].grad;
      const Var a = t.in(self, 0), b = t.in(self, 1);
      if (t.needs(a)) {
        auto& ga = t.grad_ref(a).data;
        const auto& bv = t.value(b).data;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g.data[i] * bv[i];
      }
      if (t.needs(b)) {
        auto& gb = t.grad_ref(b).data;
        const auto& av = t.value(a).data;
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g.data[i] * av[i];
      }
    });
  }

  Var scale(Var a, Real s) {
    T out = value(a);
    for (auto& v : out.data) v *= s;
    return record("scale", std::move(out), {a}, [s](BasicTape& t, std::size_t self) {
      t.accumulate(t.in(self, 0), t.nodes_[self].grad.data, s);
    });
  }

  Var relu(Var a) {
    T out = value(a);
    for (auto& v : out.data) v = v > Real(0) ? v : Real(0);
    return record("relu", std::move(out), {a}, [](BasicTape& t, std::size_t self) {
      const Var a = t.in(self, 0);
      if (!t.needs(a)) return;
      const auto& g = t.nodes_[self].grad.data;
      const auto& x = t.value(a).data;
      auto& ga = t.grad_ref(a).data;
      for (std::size_t i = 0; i < ga.size(); ++i)
        if (x[i] > Real(0)) ga[i] += g[i];
    });
  }

  // Value passes through; gradient is blocked.
  Var stop_gradient(Var a) { return push("stop_gradient", value(a), false, nullptr); }

  // a (m x n) + b (n) broadcast over rows.
  Var add_row(Var a, Var b) {
    const T& av = value(a);
    const T& bv = value(b);
    if (bv.size() != av.cols())
      throw ShapeError("add_row", "bias length " + std::to_string(bv.size()) + " != cols " +
                                      std::to_string(av.cols()));
    T out = av;
    const std::size_t n = av.cols();
    for (std::size_t r = 0; r < av.rows(); ++r)
      for (std::size_t j = 0; j < n; ++j) out.data[r * n + j] += bv.data[j];
    return record("add_row", std::move(out), {a, b}, [](BasicTape& t, std::size_t self) {
      const T& g = t.nodes_[self].grad;
      t.accumulate(t.in(self, 0), g.data, Real(1));
      const Var b = t.in(self, 1);
      if (t.needs(b)) {
        auto& gb = t.grad_ref(b).data;
        const std::size_t n = gb.size();
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g.data[r * n + j];
      }
    });
  }

  // ---- linear algebra --------------------------------------------------

  // a (m x k) * b (k x n).
  Var matmul(Var a, Var b) {
    const T& av = value(a);
    const T& bv = value(b);
    require_matrix("matmul", av);
    require_matrix("matmul", bv);
    if (av.cols() != bv.rows())
      throw ShapeError("matmul", "inner dims " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    T out = T::matrix(m, n);
    kernels::gemm_acc(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
    return record("matmul", std::move(out), {a, b}, [m, k, n](BasicTape& t, std::size_t self) {
      const T& g = t.nodes_[self].grad;
      const Var a = t.in(self, 0), b = t.in(self, 1);
      if (t.needs(a))
        kernels::gemm_nt_acc(g.data.data(), t.value(b).data.data(), t.grad_ref(a).data.data(), m, n, k);
      if (t.needs(b))
        kernels::gemm_tn_acc(t.value(a).data.data(), g.data.data(), t.grad_ref(b).data.data(), m, k, n);
    });
  }

  // Inner-product matrix: a (m x k) * b^T with b (n x k).
  Var matmul_nt(Var a, Var b) {
    const T& av = value(a);
    const T& bv = value(b);
    require_matrix("matmul_nt", av);
    require_matrix("matmul_nt", bv);
    if (av.cols() != bv.cols())
      throw ShapeError("matmul_nt", "feature dims " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
    const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
    T out = T::matrix(m, n);
    kernels::gemm_nt_acc(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
    return record("matmul_nt", std::move(out), {a, b}, [m, k, n](BasicTape& t, std::size_t self) {
      const T& g = t.nodes_[self].grad;
      const Var a = t.in(self, 0), b = t.in(self, 1);
      if (t.needs(a))
        kernels::gemm_acc(g.data.data(), t.value(b).data.data(), t.grad_ref(a).data.data(), m, n, k);
      if (t.needs(b))
        kernels::gemm_tn_acc(g.data.data(), t.value(a).data.data(), t.grad_ref(b).data.data(), m, n, k);
    });
  }

  // Per-row inner product of two equally shaped matrices -> (m).
  Var row_dot(Var a, Var b) {
    same_shape("row_dot", a, b);
    const T& av = value(a);
    const T& bv = value(b);
    const std::size_t m = av.rows(), n = av.cols();
    T out(Shape{m});
    for (std::size_t r = 0; r < m; ++r) out.data[r] = kernels::dot(&av.data[r * n], &bv.data[r * n], n);
    return record("row_dot", std::move(out), {a, b}, [m, n](BasicTape& t, std::size_t self) {
      const auto& g = t.nodes_[self].grad.data;
      const Var a = t.in(self, 0), b = t.in(self, 1);
      if (t.needs(a)) {
        auto& ga = t.grad_ref(a).data;
        const auto& bv = t.value(b).data;
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[r] * bv[r * n + j];
      }
      if (t.needs(b)) {
        auto& gb = t.grad_ref(b).data;
        const auto& av = t.value(a).data;
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < n; ++j) gb[r * n + j] += g[r] * av[r * n + j];
      }
    });
  }

  // ---- reductions ------------------------------------------------------

  Var sum(Var a) {
    Real s = 0;
    for (Real v : value(a).data) s += v;
    return record("sum", T::scalar(s), {a}, [](BasicTape& t, std::size_t self) {
      const Var a = t.in(self, 0);
      if (!t.needs(a)) return;
      const Real g = t.nodes_[self].grad.data[0];
      for (auto& v : t.grad_ref(a).data) v += g;
    });
  }

  Var mean(Var a) {
    const std::size_t n = value(a).size();
    if (n == 0) throw ShapeError("mean", "empty tensor");
    return scale(sum(a), Real(1) / static_cast<Real>(n));
  }

  // Sum of squares of all entries (scalar).
  Var sq_norm(Var a) {
    Real s = 0;
    for (Real v : value(a).data) s += v * v;
    return record("sq_norm", T::scalar(s), {a}, [](BasicTape& t, std::size_t self) {
      const Var a = t.in(self, 0);
      if (!t.needs(a)) return;
      const Real g = t.nodes_[self].grad.data[0];
      const auto& x = t.value(a).data;
      auto& ga = t.grad_ref(a).data;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += Real(2) * g * x[i];
    });
  }

  // Squared L2 norm of each row -> (m).
  Var row_sq_norm(Var a) {
    const T& av = value(a);
    const std::size_t m = av.rows(), n = av.cols();
    T out(Shape{m});
    for (std::size_t r = 0; r < m; ++r) out.data[r] = kernels::dot(&av.data[r * n], &av.data[r * n], n);
    return record("row_sq_norm", std::move(out), {a}, [m, n](BasicTape& t, std::size_t self) {
      const Var a = t.in(self, 0);
      if (!t.needs(a)) return;
      const auto& g = t.nodes_[self].grad.data;
      const auto& x = t.value(a).data;
      auto& ga = t.grad_ref(a).data;
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += Real(2) * g[r] * x[r * n + j];
    });
  }

  // Mean of the rows in each range: x (T x d) -> (S x d). Empty ranges throw.
  Var segment_mean(Var x, std::vector<RowRange> ranges) {
    const T& xv = value(x);
    const std::size_t d = xv.cols();
    T out = T::matrix(ranges.size(), d);
    for (std::size_t s = 0; s < ranges.size(); ++s) {
      const auto [b, e] = ranges[s];
      if (e <= b || e > xv.rows()) throw ShapeError("segment_mean", "bad row range");
      const Real inv = Real(1) / static_cast<Real>(e - b);
      for (std::uint32_t r = b; r < e; ++r)
        for (std::size_t j = 0; j < d; ++j) out.data[s * d + j] += xv.data[r * d + j] * inv;
    }
    return record("segment_mean", std::move(out), {x}, [ranges = std::move(ranges), d](BasicTape& t, std::size_t self) {
      const Var x = t.in(self, 0);
      if (!t.needs(x)) return;
      const auto& g = t.nodes_[self].grad.data;
      auto& gx = t.grad_ref(x).data;
      for (std::size_t s = 0; s < ranges.size(); ++s) {
        const auto [b, e] = ranges[s];
        const Real inv = Real(1) / static_cast<Real>(e - b);
        for (std::uint32_t r = b; r < e; ++r)
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[s * d + j] * inv;
      }
    });
  }

  // Selects x[rows[i], cols[i]] -> (k).
  Var pick(Var x, std::vector<std::uint32_t> rows, std::vector<std::uint32_t> cols) {
    const T& xv = value(x);
    if (rows.size() != cols.size()) throw ShapeError("pick", "rows/cols length differ");
    const std::size_t n = xv.cols();
    T out(Shape{rows.size()});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] >= xv.rows() || cols[i] >= n) throw ShapeError("pick", "index out of range");
      out.data[i] = xv.data[rows[i] * n + cols[i]];
    }
    return record("pick", std::move(out), {x},
                  [rows = std::move(rows), cols = std::move(cols), n](BasicTape& t, std::size_t self) {
                    const Var x = t.in(self, 0);
                    if (!t.needs(x)) return;
                    const auto& g = t.nodes_[self].grad.data;
                    auto& gx = t.grad_ref(x).data;
                    for (std::size_t i = 0; i < rows.size(); ++i) gx[rows[i] * n + cols[i]] += g[i];
                  });
  }

  // ---- indexing and layout --------------------------------------------

  // Rows of table (V x d) selected by ids -> (len x d). Embedding lookup.
  Var gather_rows(Var table, std::vector<std::uint32_t> ids) {
    const T& tv = value(table);
    require_matrix("gather_rows", tv);
    const std::size_t d = tv.cols();
    T out = T::matrix(ids.size(), d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] >= tv.rows())
        throw ShapeError("gather_rows", "row id " + std::to_string(ids[i]) + " >= " + std::to_string(tv.rows()));
      std::copy_n(&tv.data[ids[i] * d], d, &out.data[i * d]);
    }
    return record("gather_rows", std::move(out), {table}, [ids = std::move(ids), d](BasicTape& t, std::size_t self) {
      const Var table = t.in(self, 0);
      if (!t.needs(table)) return;
      const auto& g = t.nodes_[self].grad.data;
      auto& gt = t.grad_ref(table).data;
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gt[ids[i] * d + j] += g[i * d + j];
    });
  }

  Var embedding(Var table, std::vector<std::uint32_t> ids) { return gather_rows(table, std::move(ids)); }

  // Stacks matrices with equal column count.
  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows", "no inputs");
    const std::size_t d = value(parts[0]).cols();
    std::size_t rows = 0;
    for (Var p : parts) {
      if (value(p).cols() != d) throw ShapeError("concat_rows", "column counts differ");
      rows += value(p).rows();
    }
    T out = T::matrix(rows, d);
    std::size_t off = 0;
    for (Var p : parts) {
      const auto& pv = value(p).data;
      std::copy(pv.begin(), pv.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
      off += pv.size();
    }
    return record("concat_rows", std::move(out), parts, [](BasicTape& t, std::size_t self) {
      const auto& g = t.nodes_[self].grad.data;
      std::size_t off = 0;
      for (Var p : t.nodes_[self].inputs) {
        const std::size_t sz = t.value(p).size();
        if (t.needs(p)) {
          auto& gp = t.grad_ref(p).data;
          for (std::size_t i = 0; i < sz; ++i) gp[i] += g[off + i];
        }
        off += sz;
      }
    });
  }

  // Side-by-side concatenation of matrices with equal row count.
  Var concat_cols(Var a, Var b) {
    const T& av = value(a);
    const T& bv = value(b);
    if (av.rows() != bv.rows()) throw ShapeError("concat_cols", "row counts differ");
    const std::size_t m = av.rows(), na = av.cols(), nb = bv.cols();
    T out = T::matrix(m, na + nb);
    for (std::size_t r = 0; r < m; ++r) {
      std::copy_n(&av.data[r * na], na, &out.data[r * (na + nb)]);
      std::copy_n(&bv.data[r * nb], nb, &out.data[r * (na + nb) + na]);
    }
    return record("concat_cols", std::move(out), {a, b}, [m, na, nb](BasicTape& t, std::size_t self) {
      const auto& g = t.nodes_[self].grad.data;
      const Var a = t.in(self, 0), b = t.in(self, 1);
      if (t.needs(a)) {
        auto& ga = t.grad_ref(a).data;
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < na; ++j) ga[r * na + j] += g[r * (na + nb) + j];
      }
      if (t.needs(b)) {
        auto& gb = t.grad_ref(b).data;
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < nb; ++j) gb[r * nb + j] += g[r * (na + nb) + na + j];
      }
    });
  }

  // ---- normalization and softmax --------------------------------------

  Var softmax(Var a) {
    T out = value(a);
    const std::size_t n = out.cols();
    for (std::size_t r = 0; r < out.rows(); ++r) {
      auto row = out.row(r);
      kernels::log_softmax_row(row);
      for (auto& v : row) v = std::exp(v);
    }
    return record("softmax", std::move(out), {a}, [n](BasicTape& t, std::size_t self) {
      const Var a = t.in(self, 0);
      if (!t.needs(a)) return;
      const T& y = t.nodes_[self].value;
      const auto& g = t.nodes_[self].grad.data;
      auto& ga = t.grad_ref(a).data;
      for (std::size_t r = 0; r < y.rows(); ++r) {
        Real s = 0;
        for (std::size_t j = 0; j < n; ++j) s += g[r * n + j] * y.data[r * n + j];
        for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += y.data[r * n + j] * (g[r * n + j] - s);
      }
    });
  }

  Var log_softmax(Var a) {
    T out = value(a);
    const std::size_t n = out.cols();
    for (std::size_t r = 0; r < out.rows(); ++r) kernels::log_softmax_row(out.row(r));
    return record("log_softmax", std::move(out), {a}, [n](BasicTape& t, std::size_t self) {
      const Var a = t.in(self, 0);
      if (!t.needs(a)) return;
      const T& y = t.nodes_[self].value;
      const auto& g = t.nodes_[self].grad.data;
      auto& ga = t.grad_ref(a).data;
      for (std::size_t r = 0; r < y.rows(); ++r) {
        Real s = 0;
        for (std::size_t j = 0; j < n; ++j) s += g[r * n + j];
        for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[r * n + j] - std::exp(y.data[r * n + j]) * s;
      }
    });
  }

  // Row-wise layer normalization with affine gain and bias (both length n).
  Var layer_norm(Var x, Var gain, Var bias, Real eps = Real(1e-5)) {
    const T& xv = value(x);
    const std::size_t m = xv.rows(), n = xv.cols();
    if (value(gain).size() != n || value(bias).size() != n)
      throw ShapeError("layer_norm", "gain/bias length != " + std::to_string(n));
    T out = xv;
    auto xhat = std::make_shared<std::vector<Real>>(m * n);
    auto inv_std = std::make_shared<std::vector<Real>>(m);
    const auto& gv = value(gain).data;
    const auto& bv = value(bias).data;
    for (std::size_t r = 0; r < m; ++r) {
      Real mu = 0;
      for (std::size_t j = 0; j < n; ++j) mu += xv.data[r * n + j];
      mu /= static_cast<Real>(n);
      Real var = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const Real d = xv.data[r * n + j] - mu;
        var += d * d;
      }
      var /= static_cast<Real>(n);
      const Real is = Real(1) / std::sqrt(var + eps);
      (*inv_std)[r] = is;
      for (std::size_t j = 0; j < n; ++j) {
        const Real h = (xv.data[r * n + j] - mu) * is;
        (*xhat)[r * n + j] = h;
        out.data[r * n + j] = h * gv[j] + bv[j];
      }
    }
    return record("layer_norm", std::move(out), {x, gain, bias}, [m, n, xhat, inv_std](BasicTape& t, std::size_t self) {
      const auto& g = t.nodes_[self].grad.data;
      const Var x = t.in(self, 0), gain = t.in(self, 1), bias = t.in(self, 2);
      const auto& gv = t.value(gain).data;
      if (t.needs(gain)) {
        auto& gg = t.grad_ref(gain).data;
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * (*xhat)[r * n + j];
      }
      if (t.needs(bias)) {
        auto& gb = t.grad_ref(bias).data;
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
      }
      if (t.needs(x)) {
        auto& gx = t.grad_ref(x).data;
        std::vector<Real> dh(n);
        for (std::size_t r = 0; r < m; ++r) {
          Real mean_dh = 0, mean_dh_h = 0;
          for (std::size_t j = 0; j < n; ++j) {
            dh[j] = g[r * n + j] * gv[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * (*xhat)[r * n + j];
          }
          mean_dh /= static_cast<Real>(n);
          mean_dh_h /= static_cast<Real>(n);
          for (std::size_t j = 0; j < n; ++j)
            gx[r * n + j] += (*inv_std)[r] * (dh[j] - mean_dh - (*xhat)[r * n + j] * mean_dh_h);
        }
      }
    });
  }

  // ---- attention -------------------------------------------------------

  // Multi-head scaled dot-product attention over packed sequences. q, k, v
  // hold already-projected rows of width heads * head_dim. Each segment maps
  // a block of query rows onto a block of key rows; with causal set, query
  // offset i sees key offsets 0..i only.
  Var attention(Var q, Var k, Var v, std::vector<AttnSegment> segs, std::size_t heads, bool causal) {
    const T& qv = value(q);
    const T& kv = value(k);
    const T& vv = value(v);
    const std::size_t d = qv.cols();
    if (kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows())
      throw ShapeError("attention", "q/k/v widths differ: " + shape_str(qv.shape) + " " + shape_str(kv.shape) +
                                        " " + shape_str(vv.shape));
    if (heads == 0 || d % heads != 0) throw ShapeError("attention", "width not divisible by heads");
    const std::size_t hd = d / heads;
    const Real sc = Real(1) / std::sqrt(static_cast<Real>(hd));
    T out = T::matrix(qv.rows(), d);
    // Attention probabilities per segment, laid out [head][qi][kj].
    auto probs = std::make_shared<std::vector<std::vector<Real>>>(segs.size());
    for (std::size_t s = 0; s < segs.size(); ++s) {
      const auto& sg = segs[s];
      if (sg.q_end < sg.q_begin || sg.k_end <= sg.k_begin || sg.q_end > qv.rows() || sg.k_end > kv.rows())
        throw ShapeError("attention", "bad segment");
      const std::size_t nq = sg.q_end - sg.q_begin, nk = sg.k_end - sg.k_begin;
      if (causal && nq > nk) throw ShapeError("attention", "causal segment with more queries than keys");
      auto& p = (*probs)[s];
      p.assign(heads * nq * nk, Real(0));
      std::vector<Real> row(nk);
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < nq; ++i) {
          const Real* qi = &qv.data[(sg.q_begin + i) * d + h * hd];
          const std::size_t visible = causal ? i + 1 : nk;
          for (std::size_t j = 0; j < visible; ++j)
            row[j] = sc * kernels::dot(qi, &kv.data[(sg.k_begin + j) * d + h * hd], hd);
          kernels::log_softmax_row(std::span<Real>(row.data(), visible));
          Real* prow = &p[(h * nq + i) * nk];
          for (std::size_t j = 0; j < visible; ++j) prow[j] = std::exp(row[j]);
          Real* o = &out.data[(sg.q_begin + i) * d + h * hd];
          for (std::size_t j = 0; j < visible; ++j) {
            const Real* vj = &vv.data[(sg.k_begin + j) * d + h * hd];
            for (std::size_t c = 0; c < hd; ++c) o[c] += prow[j] * vj[c];
          }
        }
      }
    }
    return record("attention", std::move(out), {q, k, v},
                  [segs = std::move(segs), probs, heads, hd, d, sc](BasicTape& t, std::size_t self) {
                    const auto& g = t.nodes_[self].grad.data;
                    const Var q = t.in(self, 0), k = t.in(self, 1), v = t.in(self, 2);
                    const auto& qv = t.value(q).data;
                    const auto& kv = t.value(k).data;
                    const auto& vv = t.value(v).data;
                    Real* gq = t.needs(q) ? t.grad_ref(q).data.data() : nullptr;
                    Real* gk = t.needs(k) ? t.grad_ref(k).data.data() : nullptr;
                    Real* gv = t.needs(v) ? t.grad_ref(v).data.data() : nullptr;
                    for (std::size_t s = 0; s < segs.size(); ++s) {
                      const auto& sg = segs[s];
                      const std::size_t nq = sg.q_end - sg.q_begin, nk = sg.k_end - sg.k_begin;
                      const auto& p = (*probs)[s];
                      std::vector<Real> dp(nk);
                      for (std::size_t h = 0; h < heads; ++h) {
                        for (std::size_t i = 0; i < nq; ++i) {
                          const Real* prow = &p[(h * nq + i) * nk];
                          const Real* go = &g[(sg.q_begin + i) * d + h * hd];
                          Real dot_pdp = 0;
                          for (std::size_t j = 0; j < nk; ++j) {
                            if (prow[j] == Real(0)) {
                              dp[j] = 0;
                              continue;
                            }
                            const std::size_t kr = (sg.k_begin + j) * d + h * hd;
                            dp[j] = kernels::dot(go, &vv[kr], hd);
                            dot_pdp += dp[j] * prow[j];
                            if (gv)
                              for (std::size_t c = 0; c < hd; ++c) gv[kr + c] += prow[j] * go[c];
                          }
                          const std::size_t qr = (sg.q_begin + i) * d + h * hd;
                          for (std::size_t j = 0; j < nk; ++j) {
                            if (prow[j] == Real(0)) continue;
                            const Real ds = prow[j] * (dp[j] - dot_pdp) * sc;
                            const std::size_t kr = (sg.k_begin + j) * d + h * hd;
                            if (gq)
                              for (std::size_t c = 0; c < hd; ++c) gq[qr + c] += ds * kv[kr + c];
                            if (gk)
                              for (std::size_t c = 0; c < hd; ++c) gk[kr + c] += ds * qv[qr + c];
                          }
                        }
                      }
                    }
                  });
  }

 private:
  struct Node {
    const char* op;
    T value;
    T grad;
    bool requires_grad;
    Param* param;
    std::vector<Var> inputs;
    std::function<void(BasicTape&, std::size_t)> backward;
  };

  Var push(const char* op, T value, bool requires_grad, Param* p) {
    nodes_.push_back(Node{op, std::move(value), T(), requires_grad, p, {}, {}});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  template <class Fn>
  Var record(const char* op, T value, std::vector<Var> inputs, Fn&& backward) {
    bool rg = false;
    if (grad_enabled_)
      for (Var v : inputs) rg = rg || nodes_.at(v.id).requires_grad;
    Var out = push(op, std::move(value), rg, nullptr);
    if (rg) {
      Node& n = nodes_.back();
      n.inputs = std::move(inputs);
      n.backward = std::forward<Fn>(backward);
    }
    return out;
  }

  Var in(std::size_t self, std::size_t i) const { return nodes_[self].inputs[i]; }
  bool needs(Var v) const { return nodes_[v.id].requires_grad; }

  T& grad_ref(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.data.empty()) n.grad = T(n.value.shape);
    return n.grad;
  }

  void accumulate(Var v, const std::vector<Real>& g, Real s) {
    if (!needs(v)) return;
    auto& gv = grad_ref(v).data;
    for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += s * g[i];
  }

  void same_shape(const char* op, Var a, Var b) const {
    if (value(a).shape != value(b).shape)
      throw ShapeError(op, "expected " + shape_str(value(a).shape) + ", got " + shape_str(value(b).shape));
  }

  static void require_matrix(const char* op, const T& t) {
    if (t.rank() != 2) throw ShapeError(op, "expected a matrix, got shape " + shape_str(t.shape));
  }

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

using Tape = BasicTape<float>;

}  // namespace macrec
