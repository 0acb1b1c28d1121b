#include "schedlab/autodiff/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace schedlab::ad::ops {
namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<Mat<T>>;
template <typename T>
using CMapM = Eigen::Map<const Mat<T>>;

template <typename T>
CMapM<T> cmap(const Tensor<T>& t) {
  return CMapM<T>(t.data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
CMapM<T> cmap(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return CMapM<T>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
MapM<T> gmap(detail::Node<T>* n, std::size_t rows, std::size_t cols) {
  n->ensure_grad();
  return MapM<T>(n->grad.data(), static_cast<Eigen::Index>(rows),
                 static_cast<Eigen::Index>(cols));
}

template <typename T>
CMapM<T> outgrad(detail::Node<T>* n, std::size_t rows, std::size_t cols) {
  return CMapM<T>(n->grad.data(), static_cast<Eigen::Index>(rows),
                  static_cast<Eigen::Index>(cols));
}

template <typename T>
Tensor<T> make(Shape shape, std::vector<T> values, bool requires_grad, const char* op) {
  auto t = Tensor<T>::from(std::move(shape), std::move(values), requires_grad);
  check_finite(t, op);
  return t;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  require(t.rank() == 2, std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

}  // namespace

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.values()) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string(op) + ": non-finite value produced");
  }
}

// --- elementwise and structural --------------------------------------------

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const bool rg = tape.tracks({&a, &b});
  auto y = make(a.shape(), std::move(out), rg, "add");
  if (rg) {
    auto *an = a.node(), *bn = b.node(), *yn = y.node();
    tape.record("add", {&a, &b}, y, [an, bn, yn] {
      for (auto* n : {an, bn}) {
        if (!n->requires_grad) continue;
        n->ensure_grad();
        for (std::size_t i = 0; i < yn->grad.size(); ++i) n->grad[i] += yn->grad[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const bool rg = tape.tracks({&a, &b});
  auto y = make(a.shape(), std::move(out), rg, "sub");
  if (rg) {
    auto *an = a.node(), *bn = b.node(), *yn = y.node();
    tape.record("sub", {&a, &b}, y, [an, bn, yn] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < yn->grad.size(); ++i) bn->grad[i] -= yn->grad[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const bool rg = tape.tracks({&a, &b});
  auto y = make(a.shape(), std::move(out), rg, "mul");
  if (rg) {
    auto *an = a.node(), *bn = b.node(), *yn = y.node();
    tape.record("mul", {&a, &b}, y, [an, bn, yn] {
      const auto& g = yn->grad;
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * (*bn->value)[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * (*an->value)[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  const bool rg = tape.tracks({&a});
  auto y = make(a.shape(), std::move(out), rg, "scale");
  if (rg) {
    auto *an = a.node(), *yn = y.node();
    tape.record("scale", {&a}, y, [an, yn, factor] {
      an->ensure_grad();
      for (std::size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i] * factor;
    });
  }
  return y;
}

template <typename T>
Tensor<T> add_row(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
  require_matrix(x, "add_row");
  const std::size_t n = x.rows(), m = x.cols();
  require(bias.size() == m, "add_row: bias length " + std::to_string(bias.size()) +
                                " does not match " + std::to_string(m) + " columns");
  std::vector<T> out(x.values().begin(), x.values().end());
  auto bv = bias.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += bv[j];
  const bool rg = tape.tracks({&x, &bias});
  auto y = make(x.shape(), std::move(out), rg, "add_row");
  if (rg) {
    auto *xn = x.node(), *bn = bias.node(), *yn = y.node();
    tape.record("add_row", {&x, &bias}, y, [xn, bn, yn, n, m] {
      const auto& g = yn->grad;
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) bn->grad[j] += g[i * m + j];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  require(shape_size(shape) == x.size(),
          "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = x.node_ptr()->value;
  const bool rg = tape.tracks({&x});
  node->requires_grad = rg;
  Tensor<T> y(std::move(node));
  if (rg) {
    auto *xn = x.node(), *yn = y.node();
    tape.record("reshape", {&x}, y, [xn, yn] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < yn->grad.size(); ++i) xn->grad[i] += yn->grad[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& x) {
  require_matrix(x, "transpose");
  const std::size_t n = x.rows(), m = x.cols();
  std::vector<T> out(x.size());
  MapM<T>(out.data(), m, n) = cmap(x).transpose();
  const bool rg = tape.tracks({&x});
  auto y = make({m, n}, std::move(out), rg, "transpose");
  if (rg) {
    auto *xn = x.node(), *yn = y.node();
    tape.record("transpose", {&x}, y, [xn, yn, n, m] {
      gmap(xn, n, m) += outgrad(yn, m, n).transpose();
    });
  }
  return y;
}

template <typename T>
Tensor<T> slice_rows(Tape<T>& tape, const Tensor<T>& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_rows");
  const std::size_t m = x.cols();
  require(begin + count <= x.rows() && count > 0, "slice_rows: range out of bounds");
  std::vector<T> out(x.values().begin() + begin * m, x.values().begin() + (begin + count) * m);
  const bool rg = tape.tracks({&x});
  auto y = make({count, m}, std::move(out), rg, "slice_rows");
  if (rg) {
    auto *xn = x.node(), *yn = y.node();
    tape.record("slice_rows", {&x}, y, [xn, yn, begin, m] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < yn->grad.size(); ++i) xn->grad[begin * m + i] += yn->grad[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> slice_cols(Tape<T>& tape, const Tensor<T>& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_cols");
  const std::size_t n = x.rows(), m = x.cols();
  require(begin + count <= m && count > 0, "slice_cols: range out of bounds");
  std::vector<T> out(n * count);
  MapM<T>(out.data(), n, count) = cmap(x).middleCols(begin, count);
  const bool rg = tape.tracks({&x});
  auto y = make({n, count}, std::move(out), rg, "slice_cols");
  if (rg) {
    auto *xn = x.node(), *yn = y.node();
    tape.record("slice_cols", {&x}, y, [xn, yn, n, m, begin, count] {
      gmap(xn, n, m).middleCols(begin, count) += outgrad(yn, n, count);
    });
  }
  return y;
}

template <typename T>
Tensor<T> concat_rows(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t m = parts.front().cols();
  std::size_t n = 0;
  for (const auto& p : parts) {
    require(p.cols() == m, "concat_rows: column mismatch");
    n += p.rows();
  }
  std::vector<T> out;
  out.reserve(n * m);
  bool rg = false;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    rg = rg || p.requires_grad();
  }
  rg = rg && tape.enabled();
  auto y = make({n, m}, std::move(out), rg, "concat_rows");
  if (rg) {
    std::vector<detail::Node<T>*> ns;
    for (const auto& p : parts) ns.push_back(p.node());
    auto* yn = y.node();
    tape.record("concat_rows", parts, y, [ns, yn] {
      std::size_t off = 0;
      for (auto* n : ns) {
        const std::size_t len = n->value->size();
        if (n->requires_grad) {
          n->ensure_grad();
          for (std::size_t i = 0; i < len; ++i) n->grad[i] += yn->grad[off + i];
        }
        off += len;
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> concat_cols(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t n = parts.front().rows();
  std::size_t m = 0;
  bool rg = false;
  for (const auto& p : parts) {
    require(p.rank() == 2 && p.rows() == n, "concat_cols: row mismatch");
    m += p.cols();
    rg = rg || p.requires_grad();
  }
  rg = rg && tape.enabled();
  std::vector<T> out(n * m);
  MapM<T> om(out.data(), n, m);
  std::size_t off = 0;
  for (const auto& p : parts) {
    om.middleCols(off, p.cols()) = cmap(p);
    off += p.cols();
  }
  auto y = make({n, m}, std::move(out), rg, "concat_cols");
  if (rg) {
    std::vector<detail::Node<T>*> ns;
    for (const auto& p : parts) ns.push_back(p.node());
    auto* yn = y.node();
    tape.record("concat_cols", parts, y, [ns, yn, n, m] {
      std::size_t off = 0;
      for (auto* p : ns) {
        const std::size_t c = p->shape.back();
        if (p->requires_grad) gmap(p, n, c) += outgrad(yn, n, m).middleCols(off, c);
        off += c;
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& table, std::span<const std::size_t> index) {
  require_matrix(table, "gather_rows");
  require(!index.empty(), "gather_rows: empty index");
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<T> out(index.size() * d);
  auto tv = table.values();
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < v, "gather_rows: index out of range");
    std::copy_n(tv.begin() + index[i] * d, d, out.begin() + i * d);
  }
  const bool rg = tape.tracks({&table});
  auto y = make({index.size(), d}, std::move(out), rg, "gather_rows");
  if (rg) {
    auto *tn = table.node(), *yn = y.node();
    std::vector<std::size_t> idx(index.begin(), index.end());
    tape.record("gather_rows", {&table}, y, [tn, yn, idx = std::move(idx), d] {
      tn->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) tn->grad[idx[i] * d + j] += yn->grad[i * d + j];
    });
  }
  return y;
}

template <typename T>
Tensor<T> gather_per_row(Tape<T>& tape, const Tensor<T>& x, std::span<const std::size_t> index,
                         std::size_t k) {
  require_matrix(x, "gather_per_row");
  const std::size_t n = x.rows(), m = x.cols();
  require(k > 0 && index.size() == n * k, "gather_per_row: index must be [rows, k]");
  std::vector<T> out(n * k);
  auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      require(index[i * k + j] < m, "gather_per_row: index out of range");
      out[i * k + j] = xv[i * m + index[i * k + j]];
    }
  const bool rg = tape.tracks({&x});
  auto y = make({n, k}, std::move(out), rg, "gather_per_row");
  if (rg) {
    auto *xn = x.node(), *yn = y.node();
    std::vector<std::size_t> idx(index.begin(), index.end());
    tape.record("gather_per_row", {&x}, y, [xn, yn, idx = std::move(idx), n, m, k] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) xn->grad[i * m + idx[i * k + j]] += yn->grad[i * k + j];
    });
  }
  return y;
}

template <typename T>
Tensor<T> replace_rows(Tape<T>& tape, const Tensor<T>& x, std::span<const std::size_t> rows,
                       const Tensor<T>& fill) {
  require_matrix(x, "replace_rows");
  const std::size_t n = x.rows(), d = x.cols();
  require(fill.size() == d, "replace_rows: fill length mismatch");
  std::vector<std::uint8_t> hit(n, 0);
  for (auto r : rows) {
    require(r < n, "replace_rows: row out of range");
    hit[r] = 1;
  }
  std::vector<T> out(x.values().begin(), x.values().end());
  auto fv = fill.values();
  for (std::size_t i = 0; i < n; ++i)
    if (hit[i]) std::copy(fv.begin(), fv.end(), out.begin() + i * d);
  const bool rg = tape.tracks({&x, &fill});
  auto y = make(x.shape(), std::move(out), rg, "replace_rows");
  if (rg) {
    auto *xn = x.node(), *fn = fill.node(), *yn = y.node();
    tape.record("replace_rows", {&x, &fill}, y, [xn, fn, yn, hit = std::move(hit), n, d] {
      if (xn->requires_grad) xn->ensure_grad();
      if (fn->requires_grad) fn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          const T g = yn->grad[i * d + j];
          if (hit[i]) {
            if (fn->requires_grad) fn->grad[j] += g;
          } else if (xn->requires_grad) {
            xn->grad[i * d + j] += g;
          }
        }
      }
    });
  }
  return y;
}

// --- reductions ------------------------------------------------------------

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.values()) s += v;
  const bool rg = tape.tracks({&x});
  auto y = make<T>({}, {s}, rg, "sum");
  if (rg) {
    auto *xn = x.node(), *yn = y.node();
    tape.record("sum", {&x}, y, [xn, yn] {
      xn->ensure_grad();
      for (auto& g : xn->grad) g += yn->grad[0];
    });
  }
  return y;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x) {
  require(x.size() > 0, "mean: empty tensor");
  T s = T(0);
  for (T v : x.values()) s += v;
  const T inv = T(1) / static_cast<T>(x.size());
  const bool rg = tape.tracks({&x});
  auto y = make<T>({}, {s * inv}, rg, "mean");
  if (rg) {
    auto *xn = x.node(), *yn = y.node();
    tape.record("mean", {&x}, y, [xn, yn, inv] {
      xn->ensure_grad();
      for (auto& g : xn->grad) g += yn->grad[0] * inv;
    });
  }
  return y;
}

template <typename T>
Tensor<T> sum_rows(Tape<T>& tape, const Tensor<T>& x) {
  require_matrix(x, "sum_rows");
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<T> out(d, T(0));
  auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += xv[i * d + j];
  const bool rg = tape.tracks({&x});
  auto y = make({d}, std::move(out), rg, "sum_rows");
  if (rg) {
    auto *xn = x.node(), *yn = y.node();
    tape.record("sum_rows", {&x}, y, [xn, yn, n, d] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) xn->grad[i * d + j] += yn->grad[j];
    });
  }
  return y;
}

template <typename T>
Tensor<T> mean_rows(Tape<T>& tape, const Tensor<T>& x) {
  require_matrix(x, "mean_rows");
  return scale(tape, sum_rows(tape, x), T(1) / static_cast<T>(x.rows()));
}

// --- nonlinearities --------------------------------------------------------

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  std::vector<T> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  const bool rg = tape.tracks({&x});
  auto y = make(x.shape(), std::move(out), rg, "relu");
  if (rg) {
    auto *xn = x.node(), *yn = y.node();
    tape.record("relu", {&x}, y, [xn, yn] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < yn->grad.size(); ++i)
        if ((*xn->value)[i] > T(0)) xn->grad[i] += yn->grad[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  std::vector<T> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
  const bool rg = tape.tracks({&x});
  auto y = make(x.shape(), std::move(out), rg, "gelu");
  if (rg) {
    auto *xn = x.node(), *yn = y.node();
    tape.record("gelu", {&x}, y, [xn, yn, inv_sqrt2] {
      const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
      xn->ensure_grad();
      for (std::size_t i = 0; i < yn->grad.size(); ++i) {
        const T v = (*xn->value)[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        xn->grad[i] += yn->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> exp(Tape<T>& tape, const Tensor<T>& x) {
  std::vector<T> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xv[i]);
  const bool rg = tape.tracks({&x});
  auto y = make(x.shape(), std::move(out), rg, "exp");
  if (rg) {
    auto *xn = x.node(), *yn = y.node();
    tape.record("exp", {&x}, y, [xn, yn] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < yn->grad.size(); ++i)
        xn->grad[i] += yn->grad[i] * (*yn->value)[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> log(Tape<T>& tape, const Tensor<T>& x) {
  std::vector<T> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    require(xv[i] > T(0), "log: non-positive input");
    out[i] = std::log(xv[i]);
  }
  const bool rg = tape.tracks({&x});
  auto y = make(x.shape(), std::move(out), rg, "log");
  if (rg) {
    auto *xn = x.node(), *yn = y.node();
    tape.record("log", {&x}, y, [xn, yn] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < yn->grad.size(); ++i)
        xn->grad[i] += yn->grad[i] / (*xn->value)[i];
    });
  }
  return y;
}

namespace {

template <typename T>
void softmax_inplace(T* row, std::size_t m) {
  T mx = *std::max_element(row, row + m);
  T s = T(0);
  for (std::size_t j = 0; j < m; ++j) {
    row[j] = std::exp(row[j] - mx);
    s += row[j];
  }
  for (std::size_t j = 0; j < m; ++j) row[j] /= s;
}

// grad_in += y * (g - <g, y>) over one row of length m, scaled.
template <typename T>
void softmax_backward_row(const T* y, const T* g, T* gx, std::size_t m, T factor) {
  T dot = T(0);
  for (std::size_t j = 0; j < m; ++j) dot += g[j] * y[j];
  for (std::size_t j = 0; j < m; ++j) gx[j] += factor * y[j] * (g[j] - dot);
}

}  // namespace

template <typename T>
Tensor<T> softmax_rows(Tape<T>& tape, const Tensor<T>& x) {
  const std::size_t n = x.rows(), m = x.cols();
  std::vector<T> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < n; ++i) softmax_inplace(out.data() + i * m, m);
  const bool rg = tape.tracks({&x});
  auto y = make(x.shape(), std::move(out), rg, "softmax_rows");
  if (rg) {
    auto *xn = x.node(), *yn = y.node();
    tape.record("softmax_rows", {&x}, y, [xn, yn, n, m] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        softmax_backward_row(yn->value->data() + i * m, yn->grad.data() + i * m,
                             xn->grad.data() + i * m, m, T(1));
    });
  }
  return y;
}

template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
  const std::size_t n = x.rows(), d = x.cols();
  require(gamma.size() == d && beta.size() == d, "layer_norm: affine size mismatch");
  std::vector<T> xhat(x.size()), rstd(n), out(x.size());
  auto xv = x.values();
  auto gv = gamma.values(), bv = beta.values();
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = xv.data() + i * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    rstd[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mu) * rstd[i];
      out[i * d + j] = xhat[i * d + j] * gv[j] + bv[j];
    }
  }
  const bool rg = tape.tracks({&x, &gamma, &beta});
  auto y = make(x.shape(), std::move(out), rg, "layer_norm");
  if (rg) {
    auto *xn = x.node(), *gn = gamma.node(), *bn = beta.node(), *yn = y.node();
    tape.record("layer_norm", {&x, &gamma, &beta}, y,
                [xn, gn, bn, yn, xhat = std::move(xhat), rstd = std::move(rstd), n, d] {
                  const auto& g = yn->grad;
                  if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < d; ++j) gn->grad[j] += g[i * d + j] * xhat[i * d + j];
                  }
                  if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < d; ++j) bn->grad[j] += g[i * d + j];
                  }
                  if (xn->requires_grad) {
                    xn->ensure_grad();
                    const auto& gam = *gn->value;
                    for (std::size_t i = 0; i < n; ++i) {
                      T m1 = T(0), m2 = T(0);
                      for (std::size_t j = 0; j < d; ++j) {
                        const T dxh = g[i * d + j] * gam[j];
                        m1 += dxh;
                        m2 += dxh * xhat[i * d + j];
                      }
                      m1 /= static_cast<T>(d);
                      m2 /= static_cast<T>(d);
                      for (std::size_t j = 0; j < d; ++j) {
                        const T dxh = g[i * d + j] * gam[j];
                        xn->grad[i * d + j] += rstd[i] * (dxh - m1 - xhat[i * d + j] * m2);
                      }
                    }
                  }
                });
  }
  return y;
}

template <typename T>
Tensor<T> l2_normalize_rows(Tape<T>& tape, const Tensor<T>& x, T eps) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<T> out(x.size()), norms(n);
  auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    T s = T(0);
    for (std::size_t j = 0; j < d; ++j) s += xv[i * d + j] * xv[i * d + j];
    norms[i] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] / norms[i];
  }
  const bool rg = tape.tracks({&x});
  auto y = make(x.shape(), std::move(out), rg, "l2_normalize_rows");
  if (rg) {
    auto *xn = x.node(), *yn = y.node();
    tape.record("l2_normalize_rows", {&x}, y, [xn, yn, norms = std::move(norms), n, d] {
      xn->ensure_grad();
      const auto& yv = *yn->value;
      for (std::size_t i = 0; i < n; ++i) {
        T dot = T(0);
        for (std::size_t j = 0; j < d; ++j) dot += yn->grad[i * d + j] * yv[i * d + j];
        for (std::size_t j = 0; j < d; ++j)
          xn->grad[i * d + j] += (yn->grad[i * d + j] - yv[i * d + j] * dot) / norms[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> cosine_similarity(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, T eps) {
  require(a.cols() == b.cols(), "cosine_similarity: dimension mismatch");
  const std::size_t n = a.rows(), m = b.rows(), d = a.cols();
  auto normalize = [d, eps](const Tensor<T>& t, std::vector<T>& unit, std::vector<T>& norms) {
    const std::size_t r = t.rows();
    unit.resize(r * d);
    norms.resize(r);
    auto v = t.values();
    for (std::size_t i = 0; i < r; ++i) {
      T s = T(0);
      for (std::size_t j = 0; j < d; ++j) s += v[i * d + j] * v[i * d + j];
      norms[i] = std::max(std::sqrt(s), eps);
      for (std::size_t j = 0; j < d; ++j) unit[i * d + j] = v[i * d + j] / norms[i];
    }
  };
  std::vector<T> au, an, bu, bnorm;
  normalize(a, au, an);
  normalize(b, bu, bnorm);
  std::vector<T> out(n * m);
  MapM<T>(out.data(), n, m) = CMapM<T>(au.data(), n, d) * CMapM<T>(bu.data(), m, d).transpose();
  const bool rg = tape.tracks({&a, &b});
  auto y = make({n, m}, std::move(out), rg, "cosine_similarity");
  if (rg) {
    auto *xa = a.node(), *xb = b.node(), *yn = y.node();
    tape.record("cosine_similarity", {&a, &b}, y,
                [xa, xb, yn, au = std::move(au), an = std::move(an), bu = std::move(bu),
                 bnorm = std::move(bnorm), n, m, d] {
                  auto g = outgrad(yn, n, m);
                  CMapM<T> A(au.data(), n, d), B(bu.data(), m, d);
                  auto back = [d](detail::Node<T>* node, const Mat<T>& du, const CMapM<T>& u,
                                  const std::vector<T>& norms) {
                    const std::size_t r = norms.size();
                    auto gx = gmap(node, r, d);
                    for (std::size_t i = 0; i < r; ++i) {
                      const T dot = du.row(i).dot(u.row(i));
                      gx.row(i) += (du.row(i) - dot * u.row(i)) / norms[i];
                    }
                  };
                  if (xa->requires_grad) back(xa, Mat<T>(g * B), A, an);
                  if (xb->requires_grad) back(xb, Mat<T>(g.transpose() * A), B, bnorm);
                });
  }
  return y;
}

template <typename T>
Tensor<T> entropy_rows(Tape<T>& tape, const Tensor<T>& p) {
  const std::size_t n = p.rows(), m = p.cols();
  std::vector<T> out(n, T(0));
  auto pv = p.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const T v = pv[i * m + j];
      require(v >= T(0), "entropy_rows: negative probability");
      if (v > T(0)) out[i] -= v * std::log(v);
    }
  const bool rg = tape.tracks({&p});
  auto y = make({n}, std::move(out), rg, "entropy_rows");
  if (rg) {
    auto *pn = p.node(), *yn = y.node();
    tape.record("entropy_rows", {&p}, y, [pn, yn, n, m] {
      pn->ensure_grad();
      const T floor = std::numeric_limits<T>::min();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const T v = std::max((*pn->value)[i * m + j], floor);
          pn->grad[i * m + j] -= yn->grad[i] * (std::log(v) + T(1));
        }
    });
  }
  return y;
}

template <typename T>
Tensor<T> cross_entropy_rows(Tape<T>& tape, const Tensor<T>& logits,
                             std::span<const std::size_t> target,
                             std::span<const std::uint8_t> keep) {
  require_matrix(logits, "cross_entropy_rows");
  const std::size_t n = logits.rows(), m = logits.cols();
  require(n > 0, "cross_entropy_rows: no rows");
  require(target.size() == n, "cross_entropy_rows: one target per row required");
  require(keep.empty() || keep.size() == n * m, "cross_entropy_rows: keep mask must be [rows, cols]");
  std::vector<std::uint8_t> kept(n * m, 1);
  if (!keep.empty()) std::copy(keep.begin(), keep.end(), kept.begin());
  auto xv = logits.values();
  std::vector<T> prob(n * m, T(0));
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    require(target[i] < m, "cross_entropy_rows: target out of range");
    kept[i * m + target[i]] = 1;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < m; ++j)
      if (kept[i * m + j]) mx = std::max(mx, xv[i * m + j]);
    T s = T(0);
    for (std::size_t j = 0; j < m; ++j)
      if (kept[i * m + j]) {
        prob[i * m + j] = std::exp(xv[i * m + j] - mx);
        s += prob[i * m + j];
      }
    for (std::size_t j = 0; j < m; ++j) prob[i * m + j] /= s;
    total += (mx + std::log(s)) - xv[i * m + target[i]];
  }
  const T inv = T(1) / static_cast<T>(n);
  const bool rg = tape.tracks({&logits});
  auto y = make<T>({}, {total * inv}, rg, "cross_entropy_rows");
  if (rg) {
    auto *xn = logits.node(), *yn = y.node();
    std::vector<std::size_t> tgt(target.begin(), target.end());
    tape.record("cross_entropy_rows", {&logits}, y,
                [xn, yn, prob = std::move(prob), tgt = std::move(tgt), n, m, inv] {
                  xn->ensure_grad();
                  const T g = yn->grad[0] * inv;
                  for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < m; ++j) xn->grad[i * m + j] += g * prob[i * m + j];
                    xn->grad[i * m + tgt[i]] -= g;
                  }
                });
  }
  return y;
}

template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double rate, Rng& rng) {
  require(rate >= 0.0 && rate < 1.0, "dropout: rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  const T keep_scale = T(1.0 / (1.0 - rate));
  std::vector<T> mask(x.size());
  for (auto& v : mask) v = rng.bernoulli(rate) ? T(0) : keep_scale;
  std::vector<T> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  const bool rg = tape.tracks({&x});
  auto y = make(x.shape(), std::move(out), rg, "dropout");
  if (rg) {
    auto *xn = x.node(), *yn = y.node();
    tape.record("dropout", {&x}, y, [xn, yn, mask = std::move(mask)] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < mask.size(); ++i) xn->grad[i] += yn->grad[i] * mask[i];
    });
  }
  return y;
}

// --- linear algebra --------------------------------------------------------

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  require(b.rows() == k, "matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  std::vector<T> out(n * m);
  MapM<T>(out.data(), n, m).noalias() = cmap(a) * cmap(b);
  const bool rg = tape.tracks({&a, &b});
  auto y = make({n, m}, std::move(out), rg, "matmul");
  if (rg) {
    auto *an = a.node(), *bn = b.node(), *yn = y.node();
    tape.record("matmul", {&a, &b}, y, [an, bn, yn, n, k, m] {
      auto g = outgrad(yn, n, m);
      if (an->requires_grad)
        gmap(an, n, k).noalias() += g * CMapM<T>(bn->value->data(), k, m).transpose();
      if (bn->requires_grad)
        gmap(bn, k, m).noalias() += CMapM<T>(an->value->data(), n, k).transpose() * g;
    });
  }
  return y;
}

template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_matrix(x, "linear");
  require_matrix(w, "linear");
  const std::size_t n = x.rows(), in = x.cols(), out_dim = w.cols();
  require(w.rows() == in, "linear: input width " + std::to_string(in) + " vs weight " +
                              shape_str(w.shape()));
  require(b.size() == out_dim, "linear: bias size mismatch");
  std::vector<T> out(n * out_dim);
  MapM<T> om(out.data(), n, out_dim);
  om.noalias() = cmap(x) * cmap(w);
  om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.data(), out_dim);
  const bool rg = tape.tracks({&x, &w, &b});
  auto y = make({n, out_dim}, std::move(out), rg, "linear");
  if (rg) {
    auto *xn = x.node(), *wn = w.node(), *bn = b.node(), *yn = y.node();
    tape.record("linear", {&x, &w, &b}, y, [xn, wn, bn, yn, n, in, out_dim] {
      auto g = outgrad(yn, n, out_dim);
      if (xn->requires_grad)
        gmap(xn, n, in).noalias() += g * CMapM<T>(wn->value->data(), in, out_dim).transpose();
      if (wn->requires_grad)
        gmap(wn, in, out_dim).noalias() += CMapM<T>(xn->value->data(), n, in).transpose() * g;
      if (bn->requires_grad) gmap(bn, 1, out_dim) += g.colwise().sum();
    });
  }
  return y;
}

Conv1dGeometry Conv1dGeometry::same(std::size_t in_len, std::size_t kernel, std::size_t stride) {
  Conv1dGeometry g;
  g.kernel = kernel;
  g.stride = stride;
  g.out_len = (in_len + stride - 1) / stride;
  const std::size_t needed = (g.out_len - 1) * stride + kernel;
  const std::size_t pad = needed > in_len ? needed - in_len : 0;
  g.pad_left = pad / 2;
  return g;
}

template <typename T>
Tensor<T> conv1d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 const Conv1dGeometry& geom) {
  require_matrix(x, "conv1d");
  require(w.rank() == 3, "conv1d: weight must be [c_out, c_in, k]");
  const std::size_t c_in = x.rows(), t_in = x.cols();
  const std::size_t c_out = w.dim(0), k = w.dim(2), t_out = geom.out_len;
  require(w.dim(1) == c_in && k == geom.kernel, "conv1d: weight shape " + shape_str(w.shape()) +
                                                    " incompatible with input " +
                                                    shape_str(x.shape()));
  require(b.size() == c_out, "conv1d: bias size mismatch");
  require(geom.stride > 0 && t_out > 0, "conv1d: empty output");
  const std::size_t ck = c_in * k;
  // im2col: [t_out, c_in * k]
  std::vector<T> cols(t_out * ck, T(0));
  auto xv = x.values();
  for (std::size_t t = 0; t < t_out; ++t)
    for (std::size_t c = 0; c < c_in; ++c)
      for (std::size_t j = 0; j < k; ++j) {
        const auto src = static_cast<std::ptrdiff_t>(t * geom.stride + j) -
                         static_cast<std::ptrdiff_t>(geom.pad_left);
        if (src >= 0 && src < static_cast<std::ptrdiff_t>(t_in))
          cols[t * ck + c * k + j] = xv[c * t_in + static_cast<std::size_t>(src)];
      }
  std::vector<T> out(c_out * t_out);
  MapM<T> om(out.data(), c_out, t_out);
  om.noalias() = cmap(w, c_out, ck) * CMapM<T>(cols.data(), t_out, ck).transpose();
  om.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(b.data(), c_out);
  const bool rg = tape.tracks({&x, &w, &b});
  auto y = make({c_out, t_out}, std::move(out), rg, "conv1d");
  if (rg) {
    auto *xn = x.node(), *wn = w.node(), *bn = b.node(), *yn = y.node();
    tape.record("conv1d", {&x, &w, &b}, y,
                [xn, wn, bn, yn, cols = std::move(cols), geom, c_in, t_in, c_out, k, t_out, ck] {
                  auto g = outgrad(yn, c_out, t_out);
                  CMapM<T> cm(cols.data(), t_out, ck);
                  if (wn->requires_grad) gmap(wn, c_out, ck).noalias() += g * cm;
                  if (bn->requires_grad) gmap(bn, c_out, 1) += g.rowwise().sum();
                  if (xn->requires_grad) {
                    Mat<T> gcols = g.transpose() * CMapM<T>(wn->value->data(), c_out, ck);
                    xn->ensure_grad();
                    for (std::size_t t = 0; t < t_out; ++t)
                      for (std::size_t c = 0; c < c_in; ++c)
                        for (std::size_t j = 0; j < k; ++j) {
                          const auto src = static_cast<std::ptrdiff_t>(t * geom.stride + j) -
                                           static_cast<std::ptrdiff_t>(geom.pad_left);
                          if (src >= 0 && src < static_cast<std::ptrdiff_t>(t_in))
                            xn->grad[c * t_in + static_cast<std::size_t>(src)] +=
                                gcols(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(c * k + j));
                        }
                  }
                });
  }
  return y;
}

template <typename T>
Tensor<T> avg_pool1d(Tape<T>& tape, const Tensor<T>& x, std::size_t window) {
  require_matrix(x, "avg_pool1d");
  require(window > 0, "avg_pool1d: window must be positive");
  const std::size_t c = x.rows(), t_in = x.cols(), t_out = (t_in + window - 1) / window;
  std::vector<T> out(c * t_out, T(0));
  auto xv = x.values();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t t = 0; t < t_out; ++t) {
      const std::size_t lo = t * window, hi = std::min(t_in, lo + window);
      T s = T(0);
      for (std::size_t i = lo; i < hi; ++i) s += xv[ch * t_in + i];
      out[ch * t_out + t] = s / static_cast<T>(hi - lo);
    }
  const bool rg = tape.tracks({&x});
  auto y = make({c, t_out}, std::move(out), rg, "avg_pool1d");
  if (rg) {
    auto *xn = x.node(), *yn = y.node();
    tape.record("avg_pool1d", {&x}, y, [xn, yn, c, t_in, t_out, window] {
      xn->ensure_grad();
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t t = 0; t < t_out; ++t) {
          const std::size_t lo = t * window, hi = std::min(t_in, lo + window);
          const T g = yn->grad[ch * t_out + t] / static_cast<T>(hi - lo);
          for (std::size_t i = lo; i < hi; ++i) xn->grad[ch * t_in + i] += g;
        }
    });
  }
  return y;
}

template <typename T>
Tensor<T> multi_head_attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k,
                               const Tensor<T>& v, std::size_t heads) {
  require_matrix(q, "multi_head_attention");
  const std::size_t tq = q.rows(), ts = k.rows(), d = q.cols();
  require(k.cols() == d && v.cols() == d && v.rows() == ts,
          "multi_head_attention: q/k/v shape mismatch");
  require(heads > 0 && d % heads == 0, "multi_head_attention: width not divisible by heads");
  const std::size_t dh = d / heads;
  const T scl = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> probs(heads * tq * ts);
  std::vector<T> out(tq * d);
  MapM<T> om(out.data(), tq, d);
  auto Q = cmap(q), K = cmap(k), V = cmap(v);
  for (std::size_t h = 0; h < heads; ++h) {
    MapM<T> P(probs.data() + h * tq * ts, tq, ts);
    P.noalias() = scl * (Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose());
    for (std::size_t i = 0; i < tq; ++i) softmax_inplace(P.data() + i * ts, ts);
    om.middleCols(h * dh, dh).noalias() = P * V.middleCols(h * dh, dh);
  }
  const bool rg = tape.tracks({&q, &k, &v});
  auto y = make({tq, d}, std::move(out), rg, "multi_head_attention");
  if (rg) {
    auto *qn = q.node(), *kn = k.node(), *vn = v.node(), *yn = y.node();
    tape.record("multi_head_attention", {&q, &k, &v}, y,
                [qn, kn, vn, yn, probs = std::move(probs), heads, tq, ts, d, dh, scl] {
                  auto G = outgrad(yn, tq, d);
                  CMapM<T> Qm(qn->value->data(), tq, d), Km(kn->value->data(), ts, d),
                      Vm(vn->value->data(), ts, d);
                  Mat<T> dS(tq, ts);
                  for (std::size_t h = 0; h < heads; ++h) {
                    CMapM<T> P(probs.data() + h * tq * ts, tq, ts);
                    auto Gh = G.middleCols(h * dh, dh);
                    if (vn->requires_grad)
                      gmap(vn, ts, d).middleCols(h * dh, dh).noalias() += P.transpose() * Gh;
                    if (!qn->requires_grad && !kn->requires_grad) continue;
                    Mat<T> dP = Gh * Vm.middleCols(h * dh, dh).transpose();
                    for (std::size_t i = 0; i < tq; ++i) {
                      const auto ii = static_cast<Eigen::Index>(i);
                      const T dot = dP.row(ii).dot(P.row(ii));
                      dS.row(ii) = P.row(ii).cwiseProduct((dP.row(ii).array() - dot).matrix());
                    }
                    if (qn->requires_grad)
                      gmap(qn, tq, d).middleCols(h * dh, dh).noalias() +=
                          scl * (dS * Km.middleCols(h * dh, dh));
                    if (kn->requires_grad)
                      gmap(kn, ts, d).middleCols(h * dh, dh).noalias() +=
                          scl * (dS.transpose() * Qm.middleCols(h * dh, dh));
                  }
                });
  }
  return y;
}

// --- quantization ----------------------------------------------------------

template <typename T>
GumbelOutput<T> gumbel_softmax_st(Tape<T>& tape, const Tensor<T>& logits, std::size_t groups,
                                  std::size_t entries, double temperature, Rng* rng, bool hard) {
  require(temperature > 0.0, "gumbel_softmax_st: temperature must be positive");
  require_matrix(logits, "gumbel_softmax_st");
  require(groups > 0 && entries > 0 && logits.cols() == groups * entries,
          "gumbel_softmax_st: logits must be [n, groups * entries]");
  const std::size_t n = logits.rows(), m = logits.cols();
  const T inv_tau = T(1.0 / temperature);
  std::vector<T> soft(logits.values().begin(), logits.values().end());
  for (auto& s : soft) {
    if (rng) s -= static_cast<T>(std::log(-std::log(rng->uniform_open())));
    s *= inv_tau;
  }
  GumbelOutput<T> out;
  out.choice.resize(n * groups);
  std::vector<T> codes(n * m, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t g = 0; g < groups; ++g) {
      T* row = soft.data() + i * m + g * entries;
      softmax_inplace(row, entries);
      const auto best = static_cast<std::size_t>(std::max_element(row, row + entries) - row);
      out.choice[i * groups + g] = best;
      if (hard) {
        codes[i * m + g * entries + best] = T(1);
      } else {
        std::copy(row, row + entries, codes.begin() + static_cast<std::ptrdiff_t>(i * m + g * entries));
      }
    }
  const bool rg = tape.tracks({&logits});
  out.codes = make({n, m}, std::move(codes), rg, "gumbel_softmax_st");
  out.soft = make({n, m}, std::move(soft), rg, "gumbel_softmax_st");
  if (rg) {
    auto* ln = logits.node();
    // Both outputs differentiate through the tempered softmax of the noised logits.
    auto* sn = out.soft.node();
    for (auto* yn : {out.codes.node(), out.soft.node()}) {
      tape.record("gumbel_softmax_st", {&logits}, yn == sn ? out.soft : out.codes,
                  [ln, sn, yn, n, m, groups, entries, inv_tau] {
                    ln->ensure_grad();
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t g = 0; g < groups; ++g) {
                        const std::size_t off = i * m + g * entries;
                        softmax_backward_row(sn->value->data() + off, yn->grad.data() + off,
                                             ln->grad.data() + off, entries, inv_tau);
                      }
                  });
    }
  }
  return out;
}

#define SCHEDLAB_INSTANTIATE_OPS(T)                                                               \
  template void check_finite<T>(const Tensor<T>&, const char*);                                   \
  template Tensor<T> add<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> sub<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> mul<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> scale<T>(Tape<T>&, const Tensor<T>&, T);                                      \
  template Tensor<T> add_row<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> reshape<T>(Tape<T>&, const Tensor<T>&, Shape);                                \
  template Tensor<T> transpose<T>(Tape<T>&, const Tensor<T>&);                                     \
  template Tensor<T> slice_rows<T>(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t);          \
  template Tensor<T> slice_cols<T>(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t);          \
  template Tensor<T> concat_rows<T>(Tape<T>&, const std::vector<Tensor<T>>&);                      \
  template Tensor<T> concat_cols<T>(Tape<T>&, const std::vector<Tensor<T>>&);                      \
  template Tensor<T> gather_rows<T>(Tape<T>&, const Tensor<T>&, std::span<const std::size_t>);     \
  template Tensor<T> gather_per_row<T>(Tape<T>&, const Tensor<T>&, std::span<const std::size_t>,  \
                                       std::size_t);                                              \
  template Tensor<T> replace_rows<T>(Tape<T>&, const Tensor<T>&, std::span<const std::size_t>,    \
                                     const Tensor<T>&);                                           \
  template Tensor<T> sum<T>(Tape<T>&, const Tensor<T>&);                                           \
  template Tensor<T> mean<T>(Tape<T>&, const Tensor<T>&);                                          \
  template Tensor<T> sum_rows<T>(Tape<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mean_rows<T>(Tape<T>&, const Tensor<T>&);                                     \
  template Tensor<T> relu<T>(Tape<T>&, const Tensor<T>&);                                          \
  template Tensor<T> gelu<T>(Tape<T>&, const Tensor<T>&);                                          \
  template Tensor<T> exp<T>(Tape<T>&, const Tensor<T>&);                                           \
  template Tensor<T> log<T>(Tape<T>&, const Tensor<T>&);                                           \
  template Tensor<T> softmax_rows<T>(Tape<T>&, const Tensor<T>&);                                  \
  template Tensor<T> layer_norm<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                   T);                                                            \
  template Tensor<T> l2_normalize_rows<T>(Tape<T>&, const Tensor<T>&, T);                          \
  template Tensor<T> cosine_similarity<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&, T);        \
  template Tensor<T> entropy_rows<T>(Tape<T>&, const Tensor<T>&);                                  \
  template Tensor<T> cross_entropy_rows<T>(Tape<T>&, const Tensor<T>&,                             \
                                           std::span<const std::size_t>,                          \
                                           std::span<const std::uint8_t>);                        \
  template Tensor<T> dropout<T>(Tape<T>&, const Tensor<T>&, double, Rng&);                         \
  template Tensor<T> matmul<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> linear<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);    \
  template Tensor<T> conv1d<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                               const Conv1dGeometry&);                                            \
  template Tensor<T> avg_pool1d<T>(Tape<T>&, const Tensor<T>&, std::size_t);                       \
  template Tensor<T> multi_head_attention<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                             const Tensor<T>&, std::size_t);                      \
  template GumbelOutput<T> gumbel_softmax_st<T>(Tape<T>&, const Tensor<T>&, std::size_t,           \
                                                std::size_t, double, Rng*, bool);

SCHEDLAB_INSTANTIATE_OPS(float)
SCHEDLAB_INSTANTIATE_OPS(double)

#undef SCHEDLAB_INSTANTIATE_OPS

}  // namespace schedlab::ad::ops
