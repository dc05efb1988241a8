#include "spotkit/quantizer/rvq.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include <Eigen/Core>

namespace spotkit::quant {

namespace {

template <typename A, typename B>
double dot(const A* a, const B* b, std::size_t n) {
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

}  // namespace

std::vector<double> rotation_matrix(std::span<const double> e, std::span<const double> q) {
  if (e.size() != q.size() || e.empty()) throw std::invalid_argument("rotation_matrix: dimension mismatch");
  const std::size_t d = e.size();
  const double ne = std::sqrt(dot(e.data(), e.data(), d)), nq = std::sqrt(dot(q.data(), q.data(), d));
  if (ne <= kNormEps || nq <= kNormEps) throw std::invalid_argument("rotation_matrix: input norm below 1e-8");
  std::vector<double> eh(d), qh(d), lam(d);
  for (std::size_t i = 0; i < d; ++i) {
    eh[i] = e[i] / ne;
    qh[i] = q[i] / nq;
    lam[i] = eh[i] + qh[i];
  }
  const double nl = std::sqrt(dot(lam.data(), lam.data(), d));
  if (nl < kAntiparallelEps) throw AntiparallelCase("rotation_matrix: e and q are antiparallel");
  for (auto& v : lam) v /= nl;
  std::vector<double> r(d * d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      r[i * d + j] = (i == j ? 1.0 : 0.0) - 2 * lam[i] * lam[j] + 2 * qh[i] * eh[j];
  return r;
}

template <typename Real>
RotationMap<Real>::RotationMap(std::size_t rows, std::size_t dim, std::span<const Real> e, std::span<const Real> q)
    : rows_(rows),
      dim_(dim),
      e_hat_(rows * dim),
      q_hat_(rows * dim),
      lambda_(rows * dim),
      scale_(rows, 1.0),
      fallback_(rows, 0) {
  if (e.size() != rows * dim || q.size() != rows * dim) throw diff::ShapeError("RotationMap: size mismatch");
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* er = e.data() + r * dim;
    const Real* qr = q.data() + r * dim;
    const double ne = std::sqrt(dot(er, er, dim)), nq = std::sqrt(dot(qr, qr, dim));
    if (ne <= kNormEps || nq <= kNormEps) {
      fallback_[r] = 1;
      continue;
    }
    double* eh = e_hat_.data() + r * dim;
    double* qh = q_hat_.data() + r * dim;
    double* lam = lambda_.data() + r * dim;
    for (std::size_t i = 0; i < dim; ++i) {
      eh[i] = er[i] / ne;
      qh[i] = qr[i] / nq;
      lam[i] = eh[i] + qh[i];
    }
    const double nl = std::sqrt(dot(lam, lam, dim));
    if (nl < kAntiparallelEps) {
      fallback_[r] = 1;
      continue;
    }
    for (std::size_t i = 0; i < dim; ++i) lam[i] /= nl;
    scale_[r] = nq / ne;
  }
}

template <typename Real>
void RotationMap<Real>::apply(std::size_t row, std::span<const Real> x, std::span<Real> y) const {
  if (fallback_[row]) {
    std::copy(x.begin(), x.end(), y.begin());
    return;
  }
  const double* eh = e_hat_.data() + row * dim_;
  const double* qh = q_hat_.data() + row * dim_;
  const double* lam = lambda_.data() + row * dim_;
  const double a = 2 * dot(lam, x.data(), dim_), b = 2 * dot(eh, x.data(), dim_);
  const double s = scale_[row];
  for (std::size_t i = 0; i < dim_; ++i) y[i] = static_cast<Real>(s * (x[i] - a * lam[i] + b * qh[i]));
}

template <typename Real>
void RotationMap<Real>::apply_transpose(std::size_t row, std::span<const Real> g, std::span<Real> x_grad) const {
  if (fallback_[row]) {
    for (std::size_t i = 0; i < dim_; ++i) x_grad[i] += g[i];
    return;
  }
  const double* eh = e_hat_.data() + row * dim_;
  const double* qh = q_hat_.data() + row * dim_;
  const double* lam = lambda_.data() + row * dim_;
  const double a = 2 * dot(lam, g.data(), dim_), b = 2 * dot(qh, g.data(), dim_);
  const double s = scale_[row];
  for (std::size_t i = 0; i < dim_; ++i) x_grad[i] += static_cast<Real>(s * (g[i] - a * lam[i] + b * eh[i]));
}

template <typename Real>
std::size_t RotationMap<Real>::fallback_count() const {
  return static_cast<std::size_t>(std::count(fallback_.begin(), fallback_.end(), 1));
}

template <typename Real>
Var<Real> rt_forward(const Var<Real>& e, const Tensor<Real>& q, RtOutput* info) {
  const auto& ev = e.value();
  if (ev.shape() != q.shape() || ev.rank() != 2)
    throw diff::ShapeError("rt_forward: e " + diff::to_string(ev.shape()) + " vs q " + diff::to_string(q.shape()));
  const std::size_t rows = ev.rows(), dim = ev.cols();
  auto map = std::make_shared<RotationMap<Real>>(rows, dim, std::span<const Real>(ev.values()),
                                                 std::span<const Real>(q.values()));
  // Straight-through rows: identity map plus a constant offset to q. Built
  // before recording, since recording may move the tape's storage.
  const std::size_t nf = map->fallback_count();
  Tensor<Real> offset;
  if (nf > 0) {
    offset = Tensor<Real>(ev.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      if (!map->fallback(r)) continue;
      for (std::size_t i = 0; i < dim; ++i) offset(r, i) = q(r, i) - ev(r, i);
    }
  }
  Var<Real> y = diff::detached_linear(e, std::shared_ptr<const diff::DetachedMap<Real>>(map));
  if (nf > 0) y = diff::add(y, e.tape()->constant(std::move(offset)));
  if (info) info->fallbacks = nf;
  return y;
}

template <typename Real>
Codebook<Real>::Codebook(std::size_t depth_, std::size_t size_, std::size_t dim_)
    : depth(depth_),
      size(size_),
      dim(dim_),
      codes(depth_ * size_ * dim_, Real(0)),
      ema_counts(depth_ * size_, Real(0)),
      ema_sums(depth_ * size_ * dim_, Real(0)),
      revived(depth_ * size_, 0) {
  if (depth == 0 || size == 0 || dim == 0) throw std::invalid_argument("Codebook: sizes must be positive");
}

template <typename Real>
std::size_t Codebook<Real>::nearest(std::size_t d, std::span<const Real> x) const {
  using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Row = Eigen::Matrix<Real, 1, Eigen::Dynamic>;
  Eigen::Map<const Mat> c(code(d, 0), static_cast<Eigen::Index>(size), static_cast<Eigen::Index>(dim));
  Eigen::Map<const Row> xv(x.data(), static_cast<Eigen::Index>(dim));
  std::size_t best = 0;
  Real best_dist = std::numeric_limits<Real>::infinity();
  for (std::size_t k = 0; k < size; ++k) {
    const Real s = (c.row(static_cast<Eigen::Index>(k)) - xv).squaredNorm();
    if (s < best_dist) {
      best_dist = s;
      best = k;
    }
  }
  return best;
}

template <typename Real>
bool Codebook<Real>::all_finite() const {
  auto fin = [](Real v) { return std::isfinite(static_cast<double>(v)); };
  return std::all_of(codes.begin(), codes.end(), fin) && std::all_of(ema_sums.begin(), ema_sums.end(), fin) &&
         std::all_of(ema_counts.begin(), ema_counts.end(), [](Real c) { return c >= 0; });
}

template <typename Real>
void Codebook<Real>::write_to(diff::ParamStore<Real>& store) const {
  for (std::size_t d = 0; d < depth; ++d) {
    const std::string base = "rvq.depth" + std::to_string(d);
    auto put = [&](const std::string& name, diff::Shape shape, const Real* src) {
      Tensor<Real> t(shape);
      std::copy(src, src + t.size(), t.values().begin());
      if (store.contains(name)) {
        auto& dst = store.at(name);
        if (dst.shape() != t.shape()) throw diff::ShapeError("Codebook::write_to: shape mismatch for " + name);
        std::copy(t.values().begin(), t.values().end(), dst.values().begin());
      } else {
        store.add(name, std::move(t), false);
      }
    };
    put(base + ".codes", {size, dim}, codes.data() + d * size * dim);
    put(base + ".ema_counts", {size}, ema_counts.data() + d * size);
    put(base + ".ema_sums", {size, dim}, ema_sums.data() + d * size * dim);
  }
}

template <typename Real>
void Codebook<Real>::read_from(const diff::ParamStore<Real>& store) {
  for (std::size_t d = 0; d < depth; ++d) {
    const std::string base = "rvq.depth" + std::to_string(d);
    auto get = [&](const std::string& name, std::size_t n, Real* dst) {
      const auto& t = store.at(name);
      if (t.size() != n) throw diff::ShapeError("Codebook::read_from: size mismatch for " + name);
      std::copy(t.values().begin(), t.values().end(), dst);
    };
    get(base + ".codes", size * dim, codes.data() + d * size * dim);
    get(base + ".ema_counts", size, ema_counts.data() + d * size);
    get(base + ".ema_sums", size * dim, ema_sums.data() + d * size * dim);
  }
  initialized = true;
}

template <typename Real>
QuantizeResult<Real> rvq_encode(const Var<Real>& frames, const Codebook<Real>& cb, const RvqOptions& opts) {
  if (!frames.valid() || frames.size() == 0) throw std::invalid_argument("rvq_encode: no voiced frames");
  if (!cb.initialized) throw std::invalid_argument("rvq_encode: codebook is not initialized");
  if (frames.value().rank() != 2 || frames.cols() != cb.dim) {
    throw diff::ShapeError("rvq_encode: frames " + diff::to_string(frames.shape()) + " vs codebook dim " +
                           std::to_string(cb.dim));
  }
  Tape<Real>& tape = *frames.tape();
  const std::size_t T = frames.rows(), dim = cb.dim;
  QuantizeResult<Real> res;
  res.codes.assign(T * cb.depth, 0);

  Var<Real> r = frames;
  Var<Real> loss;
  for (std::size_t d = 0; d < cb.depth; ++d) {
    const Tensor<Real> rv = r.value();
    Tensor<Real> q(rv.shape());
    for (std::size_t t = 0; t < T; ++t) {
      const auto k = cb.nearest(d, rv.row(t));
      res.codes[t * cb.depth + d] = static_cast<std::int32_t>(k);
      std::copy(cb.code(d, k), cb.code(d, k) + dim, q.values().begin() + static_cast<std::ptrdiff_t>(t * dim));
    }

    Var<Real> out;
    if (opts.mode == QuantMode::rotation_trick) {
      RtOutput info;
      out = rt_forward(r, q, &info);
      res.fallbacks += info.fallbacks;
    } else {
      Tensor<Real> offset(rv.shape());
      for (std::size_t i = 0; i < offset.size(); ++i) offset[i] = q[i] - rv[i];
      out = diff::add(r, tape.constant(std::move(offset)));
    }
    res.quantized = d == 0 ? out : diff::add(res.quantized, out);

    Var<Real> next = diff::sub(r, tape.constant(q));
    if (opts.per_depth_commitment || d + 1 == cb.depth) {
      Var<Real> sq = diff::mul(next, next);
      Var<Real> term = opts.reduction == CommitmentReduction::frame_sq_norm
                           ? diff::scale(diff::sum(sq), Real(1.0 / static_cast<double>(T)))
                           : diff::mean(sq);
      loss = loss.valid() ? diff::add(loss, term) : term;
    }

    double norm_sum = 0, energy_sum = 0;
    const auto& nv = next.value();
    for (std::size_t t = 0; t < T; ++t) {
      const auto row = nv.row(t);
      const double e2 = dot(row.data(), row.data(), dim);
      energy_sum += e2;
      norm_sum += std::sqrt(e2);
    }
    res.residual_norms.push_back(norm_sum / static_cast<double>(T));
    res.residual_energy.push_back(energy_sum / static_cast<double>(T));
    res.residual_inputs.push_back(rv);
    r = next;
  }
  res.loss_rvq = loss;
  return res;
}

template <typename Real>
void ema_update(Codebook<Real>& cb, std::span<const std::int32_t> codes, const std::vector<Tensor<Real>>& residuals,
                const EmaOptions& opts, std::mt19937_64& rng) {
  std::fill(cb.revived.begin(), cb.revived.end(), 0);
  if (codes.empty()) return;
  if (!(opts.decay > 0 && opts.decay < 1)) throw std::invalid_argument("ema_update: decay must lie in (0, 1)");
  if (residuals.size() != cb.depth) throw std::invalid_argument("ema_update: one residual batch per depth required");
  const std::size_t T = codes.size() / cb.depth, dim = cb.dim;
  std::vector<double> n(cb.size), s(cb.size * dim);
  for (std::size_t d = 0; d < cb.depth; ++d) {
    const auto& rd = residuals[d];
    if (rd.rows() != T || rd.cols() != dim) throw diff::ShapeError("ema_update: residual shape mismatch");
    std::fill(n.begin(), n.end(), 0.0);
    std::fill(s.begin(), s.end(), 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      const auto k = static_cast<std::size_t>(codes[t * cb.depth + d]);
      if (k >= cb.size) throw std::out_of_range("ema_update: code index out of range");
      n[k] += 1;
      for (std::size_t i = 0; i < dim; ++i) s[k * dim + i] += rd(t, i);
    }
    std::uniform_int_distribution<std::size_t> pick(0, T - 1);
    for (std::size_t k = 0; k < cb.size; ++k) {
      Real& count = cb.ema_counts[d * cb.size + k];
      Real* sums = cb.ema_sums.data() + (d * cb.size + k) * dim;
      Real* code = cb.code(d, k);
      count = static_cast<Real>(opts.decay * count + (1 - opts.decay) * n[k]);
      for (std::size_t i = 0; i < dim; ++i) sums[i] = static_cast<Real>(opts.decay * sums[i] + (1 - opts.decay) * s[k * dim + i]);
      if (count < opts.revive_threshold) {
        const auto src = rd.row(pick(rng));
        count = Real(1);
        std::copy(src.begin(), src.end(), sums);
        cb.revived[d * cb.size + k] = 1;
      }
      for (std::size_t i = 0; i < dim; ++i) code[i] = static_cast<Real>(sums[i] / (count + opts.eps));
    }
  }
}

template <typename Real>
void kmeanspp_init(Codebook<Real>& cb, const Tensor<Real>& frames, std::mt19937_64& rng) {
  if (frames.rank() != 2 || frames.cols() != cb.dim) throw diff::ShapeError("kmeanspp_init: frame dim mismatch");
  const std::size_t N = frames.rows(), dim = cb.dim;
  std::vector<double> pts(frames.values().begin(), frames.values().end());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> d2(N);
  std::vector<double> centre(dim);
  for (std::size_t d = 0; d < cb.depth; ++d) {
    double rms = 0;
    for (double v : pts) rms += v * v;
    rms = std::sqrt(rms / static_cast<double>(pts.size()));
    std::fill(d2.begin(), d2.end(), std::numeric_limits<double>::infinity());
    for (std::size_t k = 0; k < cb.size; ++k) {
      double total = 0;
      for (double v : d2) total += std::isinf(v) ? 0.0 : v;
      std::size_t chosen = 0;
      bool jitter = false;
      if (k == 0 || total <= 0) {
        chosen = std::uniform_int_distribution<std::size_t>(0, N - 1)(rng);
        jitter = k > 0;  // every point already a centre: perturb a copy
      } else {
        double u = unit(rng) * total;
        for (chosen = 0; chosen + 1 < N; ++chosen) {
          u -= d2[chosen];
          if (u <= 0) break;
        }
      }
      for (std::size_t i = 0; i < dim; ++i) {
        centre[i] = pts[chosen * dim + i] + (jitter ? 1e-3 * std::max(rms, 1e-3) * gauss(rng) : 0.0);
        cb.code(d, k)[i] = static_cast<Real>(centre[i]);
        cb.ema_sums[(d * cb.size + k) * dim + i] = static_cast<Real>(centre[i]);
      }
      cb.ema_counts[d * cb.size + k] = Real(1);
      for (std::size_t p = 0; p < N; ++p) {
        double s = 0;
        for (std::size_t i = 0; i < dim; ++i) {
          const double diff = pts[p * dim + i] - centre[i];
          s += diff * diff;
        }
        d2[p] = std::min(d2[p], s);
      }
    }
    // Residuals for the next depth.
    std::vector<Real> row(dim);
    for (std::size_t p = 0; p < N; ++p) {
      for (std::size_t i = 0; i < dim; ++i) row[i] = static_cast<Real>(pts[p * dim + i]);
      const auto k = cb.nearest(d, row);
      for (std::size_t i = 0; i < dim; ++i) pts[p * dim + i] -= static_cast<double>(cb.code(d, k)[i]);
    }
  }
  std::fill(cb.revived.begin(), cb.revived.end(), 0);
  cb.initialized = true;
}

#define SPOTKIT_INSTANTIATE(R)                                                                                  \
  template class RotationMap<R>;                                                                                \
  template Var<R> rt_forward(const Var<R>&, const Tensor<R>&, RtOutput*);                                       \
  template struct Codebook<R>;                                                                                  \
  template QuantizeResult<R> rvq_encode(const Var<R>&, const Codebook<R>&, const RvqOptions&);                  \
  template void ema_update(Codebook<R>&, std::span<const std::int32_t>, const std::vector<Tensor<R>>&,          \
                           const EmaOptions&, std::mt19937_64&);                                                \
  template void kmeanspp_init(Codebook<R>&, const Tensor<R>&, std::mt19937_64&);

SPOTKIT_INSTANTIATE(float)
SPOTKIT_INSTANTIATE(double)

}  // namespace spotkit::quant
