#include "spotkit/diffcore/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace spotkit::diff {

namespace {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MatMap = Eigen::Map<RowMat<Real>>;
template <typename Real>
using ConstMatMap = Eigen::Map<const RowMat<Real>>;

[[noreturn]] void shape_fail(const char* op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

template <typename Real>
Tape<Real>& tape_of(const Var<Real>& v, const char* op) {
  if (!v.valid()) shape_fail(op, "input is not attached to a tape");
  return *v.tape();
}

// Strides of `in` expanded to the rank of `out`; broadcast dims get stride 0.
Shape broadcast_strides(const Shape& in, const Shape& out) {
  Shape strides(out.size(), 0);
  std::size_t stride = 1;
  const std::size_t offset = out.size() - in.size();
  for (std::size_t k = in.size(); k-- > 0;) {
    strides[k + offset] = in[k] == 1 ? 0 : stride;
    stride *= in[k];
  }
  return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t da = k + a.size() >= r ? a[k + a.size() - r] : 1;
    const std::size_t db = k + b.size() >= r ? b[k + b.size() - r] : 1;
    if (da != db && da != 1 && db != 1) {
      shape_fail(op, "cannot broadcast " + to_string(a) + " with " + to_string(b) + " at axis " +
                         std::to_string(k));
    }
    out[k] = std::max(da, db);
  }
  return out;
}

struct BroadcastPlan {
  Shape out;
  Shape sa;
  Shape sb;
  bool same = false;
  bool b_scalar = false;
  std::size_t b_row = 0;  // b is one row repeated over a's leading dims
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan p;
  p.out = broadcast_shape(a, b, op);
  p.same = a == b;
  p.b_scalar = numel(b) == 1 && numel(a) == numel(p.out);
  if (!p.same && !p.b_scalar && a == p.out && !a.empty() && numel(b) == a.back()) p.b_row = a.back();
  p.sa = broadcast_strides(a, p.out);
  p.sb = broadcast_strides(b, p.out);
  return p;
}

// Calls f(i_out, i_a, i_b) for every output element.
template <typename F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::size_t n = numel(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  if (p.b_scalar) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, std::size_t{0});
    return;
  }
  if (p.b_row) {
    const std::size_t c = p.b_row;
    for (std::size_t r = 0; r < n; r += c)
      for (std::size_t j = 0; j < c; ++j) f(r + j, r + j, j);
    return;
  }
  const std::size_t r = p.out.size();
  std::vector<std::size_t> coord(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t k = r; k-- > 0;) {
      ++coord[k];
      ia += p.sa[k];
      ib += p.sb[k];
      if (coord[k] < p.out[k]) break;
      ia -= p.sa[k] * p.out[k];
      ib -= p.sb[k] * p.out[k];
      coord[k] = 0;
    }
  }
}

enum class BinOp { add, sub, mul };

template <typename Real>
Var<Real> binary(const Var<Real>& a, const Var<Real>& b, BinOp kind, const char* name) {
  auto& tape = tape_of(a, name);
  const auto& av = a.value();
  const auto& bv = b.value();
  auto plan = plan_broadcast(av.shape(), bv.shape(), name);
  Tensor<Real> out(plan.out);
  {
    const Real* pa = av.data();
    const Real* pb = bv.data();
    Real* po = out.data();
    switch (kind) {
      case BinOp::add:
        for_each_broadcast(plan, [&](std::size_t i, std::size_t x, std::size_t y) { po[i] = pa[x] + pb[y]; });
        break;
      case BinOp::sub:
        for_each_broadcast(plan, [&](std::size_t i, std::size_t x, std::size_t y) { po[i] = pa[x] - pb[y]; });
        break;
      case BinOp::mul:
        for_each_broadcast(plan, [&](std::size_t i, std::size_t x, std::size_t y) { po[i] = pa[x] * pb[y]; });
        break;
    }
  }
  const std::size_t ida = a.id(), idb = b.id();
  return tape.record(name, std::move(out), {a, b}, [ida, idb, kind, plan](Tape<Real>& t, std::size_t self) {
    const Real* g = t.grad(self).data();
    const bool ga_on = t.needs_grad(ida), gb_on = t.needs_grad(idb);
    Real* ga = ga_on ? t.grad(ida).data() : nullptr;
    Real* gb = gb_on ? t.grad(idb).data() : nullptr;
    const Real* va = t.value(ida).data();
    const Real* vb = t.value(idb).data();
    switch (kind) {
      case BinOp::add:
        if (ga) for_each_broadcast(plan, [&](std::size_t i, std::size_t x, std::size_t) { ga[x] += g[i]; });
        if (gb) for_each_broadcast(plan, [&](std::size_t i, std::size_t, std::size_t y) { gb[y] += g[i]; });
        break;
      case BinOp::sub:
        if (ga) for_each_broadcast(plan, [&](std::size_t i, std::size_t x, std::size_t) { ga[x] += g[i]; });
        if (gb) for_each_broadcast(plan, [&](std::size_t i, std::size_t, std::size_t y) { gb[y] -= g[i]; });
        break;
      case BinOp::mul:
        if (ga) for_each_broadcast(plan, [&](std::size_t i, std::size_t x, std::size_t y) { ga[x] += g[i] * vb[y]; });
        if (gb) for_each_broadcast(plan, [&](std::size_t i, std::size_t x, std::size_t y) { gb[y] += g[i] * va[x]; });
        break;
    }
  });
}

// Elementwise unary op with derivative expressed through input x and output y.
template <typename Real, typename Fwd, typename Deriv>
Var<Real> unary(const Var<Real>& x, const char* name, Fwd fwd, Deriv deriv) {
  auto& tape = tape_of(x, name);
  const auto& xv = x.value();
  Tensor<Real> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const std::size_t idx = x.id();
  return tape.record(name, std::move(out), {x}, [idx, deriv](Tape<Real>& t, std::size_t self) {
    auto g = t.grad(self);
    auto gx = t.grad(idx);
    const auto& xv = t.value(idx);
    const auto& yv = t.value(self);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i], yv[i]);
  });
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

Shape drop_last(const Shape& s) {
  if (s.empty()) return {};
  return Shape(s.begin(), s.end() - 1);
}

}  // namespace

// ---------------------------------------------------------------------------
// DenseMap

template <typename Real>
DenseMap<Real>::DenseMap(Tensor<Real> matrix, Real scale) : a_(std::move(matrix)), scale_(scale) {
  if (a_.rank() != 2) throw ShapeError("DenseMap: matrix must be rank 2, got " + to_string(a_.shape()));
}

template <typename Real>
void DenseMap<Real>::apply(std::size_t, std::span<const Real> x, std::span<Real> y) const {
  for (std::size_t r = 0; r < a_.rows(); ++r) {
    Real acc = 0;
    for (std::size_t c = 0; c < a_.cols(); ++c) acc += a_(r, c) * x[c];
    y[r] = scale_ * acc;
  }
}

template <typename Real>
void DenseMap<Real>::apply_transpose(std::size_t, std::span<const Real> g,
                                     std::span<Real> x_grad) const {
  for (std::size_t c = 0; c < a_.cols(); ++c) {
    Real acc = 0;
    for (std::size_t r = 0; r < a_.rows(); ++r) acc += a_(r, c) * g[r];
    x_grad[c] += scale_ * acc;
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Real>
Var<Real> matmul(const Var<Real>& a, const Var<Real>& b) {
  auto& tape = tape_of(a, "matmul");
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2) {
    shape_fail("matmul", "operands must be rank 2, got " + to_string(av.shape()) + " and " +
                             to_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    shape_fail("matmul", "inner dimensions differ: " + to_string(av.shape()) + " x " +
                             to_string(bv.shape()));
  }
  Tensor<Real> out(Shape{m, n});
  MatMap<Real>(out.data(), m, n).noalias() =
      ConstMatMap<Real>(av.data(), m, k) * ConstMatMap<Real>(bv.data(), k, n);
  const std::size_t ida = a.id(), idb = b.id();
  return tape.record("matmul", std::move(out), {a, b}, [=](Tape<Real>& t, std::size_t self) {
    ConstMatMap<Real> g(t.grad(self).data(), m, n);
    if (t.needs_grad(ida)) {
      MatMap<Real>(t.grad(ida).data(), m, k).noalias() +=
          g * ConstMatMap<Real>(t.value(idb).data(), k, n).transpose();
    }
    if (t.needs_grad(idb)) {
      MatMap<Real>(t.grad(idb).data(), k, n).noalias() +=
          ConstMatMap<Real>(t.value(ida).data(), m, k).transpose() * g;
    }
  });
}

template <typename Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) {
  return binary(a, b, BinOp::add, "add");
}
template <typename Real>
Var<Real> sub(const Var<Real>& a, const Var<Real>& b) {
  return binary(a, b, BinOp::sub, "sub");
}
template <typename Real>
Var<Real> mul(const Var<Real>& a, const Var<Real>& b) {
  return binary(a, b, BinOp::mul, "mul");
}

template <typename Real>
Var<Real> scale(const Var<Real>& x, Real c) {
  return unary(
      x, "scale", [c](Real v) { return v * c; }, [c](Real, Real) { return c; });
}

template <typename Real>
Var<Real> transpose(const Var<Real>& x) {
  auto& tape = tape_of(x, "transpose");
  const auto& xv = x.value();
  if (xv.rank() != 2) shape_fail("transpose", "expected rank 2, got " + to_string(xv.shape()));
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor<Real> out(Shape{c, r});
  MatMap<Real>(out.data(), c, r) = ConstMatMap<Real>(xv.data(), r, c).transpose();
  const std::size_t idx = x.id();
  return tape.record("transpose", std::move(out), {x}, [=](Tape<Real>& t, std::size_t self) {
    MatMap<Real>(t.grad(idx).data(), r, c) += ConstMatMap<Real>(t.grad(self).data(), c, r).transpose();
  });
}

template <typename Real>
Var<Real> reshape(const Var<Real>& x, Shape shape) {
  auto& tape = tape_of(x, "reshape");
  const auto& xv = x.value();
  if (numel(shape) != xv.size()) {
    shape_fail("reshape", "cannot reshape " + to_string(xv.shape()) + " to " + to_string(shape));
  }
  Tensor<Real> out(std::move(shape), std::vector<Real>(xv.values().begin(), xv.values().end()));
  const std::size_t idx = x.id();
  return tape.record("reshape", std::move(out), {x}, [idx](Tape<Real>& t, std::size_t self) {
    auto g = t.grad(self);
    auto gx = t.grad(idx);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Indexing

template <typename Real>
Var<Real> gather_rows(const Var<Real>& x, std::span<const std::int64_t> index) {
  auto& tape = tape_of(x, "gather_rows");
  const auto& xv = x.value();
  if (xv.rank() == 0) shape_fail("gather_rows", "input must have a leading axis");
  if (index.empty()) shape_fail("gather_rows", "empty index list");
  const std::size_t m = xv.dim(0);
  const std::size_t width = xv.size() / m;
  for (auto i : index) {
    if (i < -1 || i >= static_cast<std::int64_t>(m)) {
      shape_fail("gather_rows", "index " + std::to_string(i) + " out of range for " +
                                    std::to_string(m) + " rows");
    }
  }
  Shape shape = xv.shape();
  shape[0] = index.size();
  Tensor<Real> out(shape);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0) continue;
    std::copy_n(xv.data() + index[r] * width, width, out.data() + r * width);
  }
  std::vector<std::int64_t> idx(index.begin(), index.end());
  const std::size_t id = x.id();
  return tape.record("gather_rows", std::move(out), {x},
                     [id, width, idx = std::move(idx)](Tape<Real>& t, std::size_t self) {
                       const Real* g = t.grad(self).data();
                       Real* gx = t.grad(id).data();
                       for (std::size_t r = 0; r < idx.size(); ++r) {
                         if (idx[r] < 0) continue;
                         Real* dst = gx + idx[r] * width;
                         const Real* src = g + r * width;
                         for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
                       }
                     });
}

template <typename Real>
Var<Real> scatter_rows(const Var<Real>& x, std::span<const std::int64_t> index,
                       std::size_t out_rows) {
  auto& tape = tape_of(x, "scatter_rows");
  const auto& xv = x.value();
  if (xv.rank() == 0 || xv.dim(0) != index.size()) {
    shape_fail("scatter_rows", "index length " + std::to_string(index.size()) +
                                   " does not match leading axis of " + to_string(xv.shape()));
  }
  if (out_rows == 0) shape_fail("scatter_rows", "output needs at least one row");
  for (auto i : index) {
    if (i < -1 || i >= static_cast<std::int64_t>(out_rows)) {
      shape_fail("scatter_rows", "index " + std::to_string(i) + " out of range for " +
                                     std::to_string(out_rows) + " rows");
    }
  }
  const std::size_t width = xv.size() / xv.dim(0);
  Shape shape = xv.shape();
  shape[0] = out_rows;
  Tensor<Real> out(shape);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0) continue;
    Real* dst = out.data() + index[r] * width;
    const Real* src = xv.data() + r * width;
    for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
  }
  std::vector<std::int64_t> idx(index.begin(), index.end());
  const std::size_t id = x.id();
  return tape.record("scatter_rows", std::move(out), {x},
                     [id, width, idx = std::move(idx)](Tape<Real>& t, std::size_t self) {
                       const Real* g = t.grad(self).data();
                       Real* gx = t.grad(id).data();
                       for (std::size_t r = 0; r < idx.size(); ++r) {
                         if (idx[r] < 0) continue;
                         const Real* src = g + idx[r] * width;
                         Real* dst = gx + r * width;
                         for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
                       }
                     });
}

// ---------------------------------------------------------------------------
// Normalization and activations

template <typename Real>
Var<Real> softmax(const Var<Real>& x) {
  auto& tape = tape_of(x, "softmax");
  const auto& xv = x.value();
  const std::size_t c = last_dim(xv.shape());
  const std::size_t rows = xv.size() / c;
  Tensor<Real> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = xv.data() + r * c;
    Real* o = out.data() + r * c;
    Real mx = *std::max_element(in, in + c);
    Real total = 0;
    for (std::size_t j = 0; j < c; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < c; ++j) o[j] /= total;
  }
  const std::size_t id = x.id();
  return tape.record("softmax", std::move(out), {x}, [=](Tape<Real>& t, std::size_t self) {
    const Real* g = t.grad(self).data();
    const Real* y = t.value(self).data();
    Real* gx = t.grad(id).data();
    for (std::size_t r = 0; r < rows; ++r) {
      Real dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
    }
  });
}

template <typename Real>
Var<Real> layer_norm(const Var<Real>& x, Real eps) {
  auto& tape = tape_of(x, "layer_norm");
  const auto& xv = x.value();
  const std::size_t c = last_dim(xv.shape());
  const std::size_t rows = xv.size() / c;
  Tensor<Real> out(xv.shape());
  std::vector<Real> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = xv.data() + r * c;
    Real mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += in[j];
    mu /= static_cast<Real>(c);
    Real var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<Real>(c);
    const Real inv = Real(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = (in[j] - mu) * inv;
  }
  const std::size_t id = x.id();
  return tape.record("layer_norm", std::move(out), {x},
                     [=, inv_std = std::move(inv_std)](Tape<Real>& t, std::size_t self) {
                       const Real* g = t.grad(self).data();
                       const Real* y = t.value(self).data();
                       Real* gx = t.grad(id).data();
                       const Real n = static_cast<Real>(c);
                       for (std::size_t r = 0; r < rows; ++r) {
                         Real mg = 0, mgy = 0;
                         for (std::size_t j = 0; j < c; ++j) {
                           mg += g[r * c + j];
                           mgy += g[r * c + j] * y[r * c + j];
                         }
                         mg /= n;
                         mgy /= n;
                         for (std::size_t j = 0; j < c; ++j) {
                           gx[r * c + j] += inv_std[r] * (g[r * c + j] - mg - y[r * c + j] * mgy);
                         }
                       }
                     });
}

template <typename Real>
Var<Real> gelu(const Var<Real>& x) {
  using Arr = Eigen::Array<Real, Eigen::Dynamic, 1>;
  using CArrMap = Eigen::Map<const Arr>;
  static constexpr Real k = static_cast<Real>(0.7978845608028654);  // sqrt(2/pi)
  static constexpr Real a = static_cast<Real>(0.044715);
  auto& tape = tape_of(x, "gelu");
  const auto& xv = x.value();
  const auto n = static_cast<Eigen::Index>(xv.size());
  Tensor<Real> out(xv.shape());
  {
    CArrMap v(xv.data(), n);
    const Arr th = (k * (v + a * v.cube())).tanh();
    Eigen::Map<Arr>(out.data(), n) = Real(0.5) * v * (Real(1) + th);
  }
  const std::size_t idx = x.id();
  return tape.record("gelu", std::move(out), {x}, [idx, n](Tape<Real>& t, std::size_t self) {
    CArrMap v(t.value(idx).data(), n);
    CArrMap g(t.grad(self).data(), n);
    const Arr th = (k * (v + a * v.cube())).tanh();
    Eigen::Map<Arr>(t.grad(idx).data(), n) +=
        g * (Real(0.5) * (Real(1) + th) + Real(0.5) * v * (Real(1) - th.square()) * k * (Real(1) + Real(3) * a * v.square()));
  });
}

template <typename Real>
Var<Real> tanh(const Var<Real>& x) {
  using Arr = Eigen::Array<Real, Eigen::Dynamic, 1>;
  auto& tape = tape_of(x, "tanh");
  const auto& xv = x.value();
  const auto n = static_cast<Eigen::Index>(xv.size());
  Tensor<Real> out(xv.shape());
  Eigen::Map<Arr>(out.data(), n) = Eigen::Map<const Arr>(xv.data(), n).tanh();
  const std::size_t idx = x.id();
  return tape.record("tanh", std::move(out), {x}, [idx, n](Tape<Real>& t, std::size_t self) {
    Eigen::Map<const Arr> y(t.value(self).data(), n);
    Eigen::Map<Arr>(t.grad(idx).data(), n) += Eigen::Map<const Arr>(t.grad(self).data(), n) * (Real(1) - y.square());
  });
}

template <typename Real>
Var<Real> sigmoid(const Var<Real>& x) {
  // 1 / (1 + e^-v) written through tanh, which Eigen vectorizes.
  using Arr = Eigen::Array<Real, Eigen::Dynamic, 1>;
  auto& tape = tape_of(x, "sigmoid");
  const auto& xv = x.value();
  const auto n = static_cast<Eigen::Index>(xv.size());
  Tensor<Real> out(xv.shape());
  Eigen::Map<Arr>(out.data(), n) = Real(0.5) * ((Real(0.5) * Eigen::Map<const Arr>(xv.data(), n)).tanh() + Real(1));
  const std::size_t idx = x.id();
  return tape.record("sigmoid", std::move(out), {x}, [idx, n](Tape<Real>& t, std::size_t self) {
    Eigen::Map<const Arr> y(t.value(self).data(), n);
    Eigen::Map<Arr>(t.grad(idx).data(), n) += Eigen::Map<const Arr>(t.grad(self).data(), n) * y * (Real(1) - y);
  });
}

template <typename Real>
Var<Real> abs(const Var<Real>& x) {
  return unary(
      x, "abs", [](Real v) { return std::abs(v); },
      [](Real v, Real) { return v > 0 ? Real(1) : (v < 0 ? Real(-1) : Real(0)); });
}

// ---------------------------------------------------------------------------
// Convolutions

template <typename Real>
Var<Real> depthwise_conv1d(const Var<Real>& x, const Var<Real>& weight, std::size_t dilation) {
  auto& tape = tape_of(x, "depthwise_conv1d");
  const auto& xv = x.value();
  const auto& wv = weight.value();
  if (xv.rank() != 2 || wv.rank() != 2 || wv.dim(1) != xv.dim(1)) {
    shape_fail("depthwise_conv1d", "expected x (T,C) and weight (K,C), got " + to_string(xv.shape()) +
                                       " and " + to_string(wv.shape()));
  }
  if (wv.dim(0) % 2 == 0) shape_fail("depthwise_conv1d", "kernel size must be odd");
  if (dilation == 0) shape_fail("depthwise_conv1d", "dilation must be positive");
  const std::size_t T = xv.dim(0), C = xv.dim(1), K = wv.dim(0);
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(K / 2);
  const std::ptrdiff_t dil = static_cast<std::ptrdiff_t>(dilation);
  Tensor<Real> out(Shape{T, C});
  for (std::size_t k = 0; k < K; ++k) {
    const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(k) - half) * dil;
    for (std::size_t t = 0; t < T; ++t) {
      const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t) + off;
      if (s < 0 || s >= static_cast<std::ptrdiff_t>(T)) continue;
      const Real* xr = xv.data() + s * C;
      const Real* wr = wv.data() + k * C;
      Real* o = out.data() + t * C;
      for (std::size_t c = 0; c < C; ++c) o[c] += wr[c] * xr[c];
    }
  }
  const std::size_t idx = x.id(), idw = weight.id();
  return tape.record("depthwise_conv1d", std::move(out), {x, weight}, [=](Tape<Real>& t, std::size_t self) {
    const Real* g = t.grad(self).data();
    const Real* xd = t.value(idx).data();
    const Real* wd = t.value(idw).data();
    Real* gx = t.needs_grad(idx) ? t.grad(idx).data() : nullptr;
    Real* gw = t.needs_grad(idw) ? t.grad(idw).data() : nullptr;
    for (std::size_t k = 0; k < K; ++k) {
      const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(k) - half) * dil;
      for (std::size_t tt = 0; tt < T; ++tt) {
        const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(tt) + off;
        if (s < 0 || s >= static_cast<std::ptrdiff_t>(T)) continue;
        const Real* gr = g + tt * C;
        for (std::size_t c = 0; c < C; ++c) {
          if (gx) gx[s * C + c] += wd[k * C + c] * gr[c];
          if (gw) gw[k * C + c] += xd[s * C + c] * gr[c];
        }
      }
    }
  });
}

template <typename Real>
Var<Real> pointwise_conv1d(const Var<Real>& x, const Var<Real>& weight) {
  return matmul(x, weight);
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Real>
Var<Real> sum(const Var<Real>& x) {
  auto& tape = tape_of(x, "sum");
  Real total = 0;
  for (auto v : x.value().values()) total += v;
  const std::size_t id = x.id();
  return tape.record("sum", Tensor<Real>::scalar(total), {x}, [id](Tape<Real>& t, std::size_t self) {
    const Real g = t.grad(self)[0];
    for (auto& v : t.grad(id)) v += g;
  });
}

template <typename Real>
Var<Real> mean(const Var<Real>& x) {
  const Real n = static_cast<Real>(x.value().size());
  auto& tape = tape_of(x, "mean");
  Real total = 0;
  for (auto v : x.value().values()) total += v;
  const std::size_t id = x.id();
  return tape.record("mean", Tensor<Real>::scalar(total / n), {x}, [id, n](Tape<Real>& t, std::size_t self) {
    const Real g = t.grad(self)[0] / n;
    for (auto& v : t.grad(id)) v += g;
  });
}

namespace {

template <typename Real>
Var<Real> reduce_axis(const Var<Real>& x, std::size_t axis, bool average, const char* name) {
  auto& tape = tape_of(x, name);
  const auto& xv = x.value();
  if (axis >= xv.rank()) {
    shape_fail(name, "axis " + std::to_string(axis) + " out of range for " + to_string(xv.shape()));
  }
  const Shape& s = xv.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t k = 0; k < axis; ++k) outer *= s[k];
  for (std::size_t k = axis + 1; k < s.size(); ++k) inner *= s[k];
  const std::size_t n = s[axis];
  Shape oshape;
  for (std::size_t k = 0; k < s.size(); ++k)
    if (k != axis) oshape.push_back(s[k]);
  Tensor<Real> out(oshape);
  const Real f = average ? Real(1) / static_cast<Real>(n) : Real(1);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * n + j) * inner + i];
  for (auto& v : out.values()) v *= f;
  const std::size_t id = x.id();
  return tape.record(name, std::move(out), {x}, [=](Tape<Real>& t, std::size_t self) {
    const Real* g = t.grad(self).data();
    Real* gx = t.grad(id).data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < inner; ++i) gx[(o * n + j) * inner + i] += f * g[o * inner + i];
  });
}

}  // namespace

template <typename Real>
Var<Real> sum_axis(const Var<Real>& x, std::size_t axis) {
  return reduce_axis(x, axis, false, "sum_axis");
}

template <typename Real>
Var<Real> mean_axis(const Var<Real>& x, std::size_t axis) {
  return reduce_axis(x, axis, true, "mean_axis");
}

template <typename Real>
Var<Real> l2_norm(const Var<Real>& x) {
  auto& tape = tape_of(x, "l2_norm");
  const auto& xv = x.value();
  const std::size_t c = last_dim(xv.shape());
  const std::size_t rows = xv.size() / c;
  Tensor<Real> out(drop_last(xv.shape()));
  for (std::size_t r = 0; r < rows; ++r) {
    Real ss = 0;
    for (std::size_t j = 0; j < c; ++j) ss += xv[r * c + j] * xv[r * c + j];
    out[r] = std::sqrt(ss);
  }
  const std::size_t id = x.id();
  return tape.record("l2_norm", std::move(out), {x}, [=](Tape<Real>& t, std::size_t self) {
    const Real* g = t.grad(self).data();
    const Real* y = t.value(self).data();
    const Real* xd = t.value(id).data();
    Real* gx = t.grad(id).data();
    for (std::size_t r = 0; r < rows; ++r) {
      if (y[r] == Real(0)) continue;
      const Real f = g[r] / y[r];
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += f * xd[r * c + j];
    }
  });
}

template <typename Real>
Var<Real> cosine_similarity(const Var<Real>& a, const Var<Real>& b, Real eps) {
  auto& tape = tape_of(a, "cosine_similarity");
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() != bv.shape()) {
    shape_fail("cosine_similarity", "shapes differ: " + to_string(av.shape()) + " vs " +
                                        to_string(bv.shape()));
  }
  const std::size_t c = last_dim(av.shape());
  const std::size_t rows = av.size() / c;
  Tensor<Real> out(drop_last(av.shape()));
  for (std::size_t r = 0; r < rows; ++r) {
    Real dot = 0, na = 0, nb = 0;
    for (std::size_t j = 0; j < c; ++j) {
      dot += av[r * c + j] * bv[r * c + j];
      na += av[r * c + j] * av[r * c + j];
      nb += bv[r * c + j] * bv[r * c + j];
    }
    out[r] = dot / (std::max(std::sqrt(na), eps) * std::max(std::sqrt(nb), eps));
  }
  const std::size_t ida = a.id(), idb = b.id();
  return tape.record("cosine_similarity", std::move(out), {a, b}, [=](Tape<Real>& t, std::size_t self) {
    const Real* g = t.grad(self).data();
    const Real* cs = t.value(self).data();
    const Real* ad = t.value(ida).data();
    const Real* bd = t.value(idb).data();
    Real* ga = t.needs_grad(ida) ? t.grad(ida).data() : nullptr;
    Real* gb = t.needs_grad(idb) ? t.grad(idb).data() : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      Real na = 0, nb = 0;
      for (std::size_t j = 0; j < c; ++j) {
        na += ad[r * c + j] * ad[r * c + j];
        nb += bd[r * c + j] * bd[r * c + j];
      }
      na = std::sqrt(na);
      nb = std::sqrt(nb);
      const Real da = std::max(na, eps), db = std::max(nb, eps);
      const Real inv = Real(1) / (da * db);
      const Real ca = na > eps ? cs[r] / (na * na) : Real(0);
      const Real cb = nb > eps ? cs[r] / (nb * nb) : Real(0);
      for (std::size_t j = 0; j < c; ++j) {
        if (ga) ga[r * c + j] += g[r] * (bd[r * c + j] * inv - ca * ad[r * c + j]);
        if (gb) gb[r * c + j] += g[r] * (ad[r * c + j] * inv - cb * bd[r * c + j]);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Stop-gradient linear maps

template <typename Real>
Var<Real> detached_linear(const Var<Real>& x, std::shared_ptr<const DetachedMap<Real>> map) {
  auto& tape = tape_of(x, "detached_linear");
  const auto& xv = x.value();
  const std::size_t din = map->in_dim(), dout = map->out_dim();
  if (last_dim(xv.shape()) != din) {
    shape_fail("detached_linear", "map expects " + std::to_string(din) + " input features, x has shape " +
                                      to_string(xv.shape()));
  }
  const std::size_t rows = xv.size() / din;
  if (map->rows() != 0 && map->rows() != rows) {
    shape_fail("detached_linear", "map has " + std::to_string(map->rows()) + " rows, x has " +
                                      std::to_string(rows));
  }
  Shape oshape = xv.rank() == 0 ? Shape{dout} : xv.shape();
  oshape.back() = dout;
  Tensor<Real> out(oshape);
  for (std::size_t r = 0; r < rows; ++r) {
    map->apply(r, xv.values().subspan(r * din, din), out.values().subspan(r * dout, dout));
  }
  const std::size_t id = x.id();
  return tape.record("detached_linear", std::move(out), {x},
                     [id, din, dout, rows, map](Tape<Real>& t, std::size_t self) {
                       auto g = t.grad(self);
                       auto gx = t.grad(id);
                       for (std::size_t r = 0; r < rows; ++r) {
                         map->apply_transpose(r, std::span<const Real>(g.subspan(r * dout, dout)),
                                              gx.subspan(r * din, din));
                       }
                     });
}

template <typename Real>
Var<Real> detached_linear(const Var<Real>& x, const Tensor<Real>& a, Real scale) {
  return detached_linear(x, std::shared_ptr<const DetachedMap<Real>>(std::make_shared<DenseMap<Real>>(a, scale)));
}

template <typename Real>
Var<Real> stop_gradient(const Var<Real>& x) {
  return tape_of(x, "stop_gradient").constant(x.value());
}

// ---------------------------------------------------------------------------
// Name dispatch

const std::vector<std::string>& op_catalog() {
  static const std::vector<std::string> names = {
      "matmul",    "add",         "sub",        "mul",          "transpose",        "reshape",
      "gather_rows", "scatter_rows", "softmax", "layer_norm",   "gelu",             "tanh",
      "sigmoid",   "abs",         "depthwise_conv1d", "pointwise_conv1d", "sum",   "mean",
      "sum_axis",  "mean_axis",   "l2_norm",    "cosine_similarity", "detached_linear", "scale"};
  return names;
}

template <typename Real>
Var<Real> forward_op(const std::string& name, const std::vector<Var<Real>>& in,
                     const nlohmann::json& attrs) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw std::invalid_argument(name + ": expected " + std::to_string(n) + " inputs, got " +
                                  std::to_string(in.size()));
    }
  };
  auto index_attr = [&]() {
    if (!attrs.contains("index")) throw std::invalid_argument(name + ": missing 'index' attribute");
    return attrs.at("index").get<std::vector<std::int64_t>>();
  };
  if (name == "matmul") { need(2); return matmul(in[0], in[1]); }
  if (name == "add") { need(2); return add(in[0], in[1]); }
  if (name == "sub") { need(2); return sub(in[0], in[1]); }
  if (name == "mul") { need(2); return mul(in[0], in[1]); }
  if (name == "transpose") { need(1); return transpose(in[0]); }
  if (name == "reshape") { need(1); return reshape(in[0], attrs.at("shape").get<Shape>()); }
  if (name == "gather_rows") { need(1); auto idx = index_attr(); return gather_rows<Real>(in[0], idx); }
  if (name == "scatter_rows") {
    need(1);
    auto idx = index_attr();
    return scatter_rows<Real>(in[0], idx, attrs.at("rows").get<std::size_t>());
  }
  if (name == "softmax") { need(1); return softmax(in[0]); }
  if (name == "layer_norm") { need(1); return layer_norm(in[0], Real(attrs.value("eps", 1e-5))); }
  if (name == "gelu") { need(1); return gelu(in[0]); }
  if (name == "tanh") { need(1); return tanh(in[0]); }
  if (name == "sigmoid") { need(1); return sigmoid(in[0]); }
  if (name == "abs") { need(1); return abs(in[0]); }
  if (name == "depthwise_conv1d") {
    need(2);
    return depthwise_conv1d(in[0], in[1], attrs.value("dilation", std::size_t{1}));
  }
  if (name == "pointwise_conv1d") { need(2); return pointwise_conv1d(in[0], in[1]); }
  if (name == "sum") { need(1); return sum(in[0]); }
  if (name == "mean") { need(1); return mean(in[0]); }
  if (name == "sum_axis") { need(1); return sum_axis(in[0], attrs.at("axis").get<std::size_t>()); }
  if (name == "mean_axis") { need(1); return mean_axis(in[0], attrs.at("axis").get<std::size_t>()); }
  if (name == "l2_norm") { need(1); return l2_norm(in[0]); }
  if (name == "cosine_similarity") {
    need(2);
    return cosine_similarity(in[0], in[1], Real(attrs.value("eps", 1e-8)));
  }
  if (name == "detached_linear") {
    // Second input supplies the matrix value; it never receives a gradient.
    need(2);
    return detached_linear(in[0], in[1].value(), Real(attrs.value("scale", 1.0)));
  }
  if (name == "scale") { need(1); return scale(in[0], Real(attrs.at("scale").get<double>())); }
  throw std::invalid_argument("unknown op '" + name + "'");
}

#define SPOTKIT_INSTANTIATE_OPS(R)                                                              \
  template class DenseMap<R>;                                                                   \
  template Var<R> matmul(const Var<R>&, const Var<R>&);                                         \
  template Var<R> add(const Var<R>&, const Var<R>&);                                            \
  template Var<R> sub(const Var<R>&, const Var<R>&);                                            \
  template Var<R> mul(const Var<R>&, const Var<R>&);                                            \
  template Var<R> scale(const Var<R>&, R);                                                      \
  template Var<R> transpose(const Var<R>&);                                                     \
  template Var<R> reshape(const Var<R>&, Shape);                                                \
  template Var<R> gather_rows(const Var<R>&, std::span<const std::int64_t>);                    \
  template Var<R> scatter_rows(const Var<R>&, std::span<const std::int64_t>, std::size_t);      \
  template Var<R> softmax(const Var<R>&);                                                       \
  template Var<R> layer_norm(const Var<R>&, R);                                                 \
  template Var<R> gelu(const Var<R>&);                                                          \
  template Var<R> tanh(const Var<R>&);                                                          \
  template Var<R> sigmoid(const Var<R>&);                                                       \
  template Var<R> abs(const Var<R>&);                                                           \
  template Var<R> depthwise_conv1d(const Var<R>&, const Var<R>&, std::size_t);                  \
  template Var<R> pointwise_conv1d(const Var<R>&, const Var<R>&);                               \
  template Var<R> sum(const Var<R>&);                                                           \
  template Var<R> mean(const Var<R>&);                                                          \
  template Var<R> sum_axis(const Var<R>&, std::size_t);                                         \
  template Var<R> mean_axis(const Var<R>&, std::size_t);                                        \
  template Var<R> l2_norm(const Var<R>&);                                                       \
  template Var<R> cosine_similarity(const Var<R>&, const Var<R>&, R);                           \
  template Var<R> detached_linear(const Var<R>&, std::shared_ptr<const DetachedMap<R>>);        \
  template Var<R> detached_linear(const Var<R>&, const Tensor<R>&, R);                          \
  template Var<R> stop_gradient(const Var<R>&);                                                 \
  template Var<R> forward_op(const std::string&, const std::vector<Var<R>>&, const nlohmann::json&);

SPOTKIT_INSTANTIATE_OPS(float)
SPOTKIT_INSTANTIATE_OPS(double)

}  // namespace spotkit::diff
