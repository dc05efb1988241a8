#pragma once

// Differentiable op catalog. Every op takes and returns tape handles; outputs
// are recorded on the inputs' tape.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "spotkit/diffcore/tape.hpp"
#include "spotkit/diffcore/tensor.hpp"

namespace spotkit::diff {

/// Row-wise linear map excluded from differentiation: y_r = M_r x_r.
///
/// Implementations may use a different map per row (rows() > 0) or a single
/// map for every row (rows() == 0).
template <typename Real>
class DetachedMap {
 public:
  virtual ~DetachedMap() = default;
  virtual std::size_t in_dim() const = 0;
  virtual std::size_t out_dim() const = 0;
  virtual std::size_t rows() const { return 0; }
  virtual void apply(std::size_t row, std::span<const Real> x, std::span<Real> y) const = 0;
  virtual void apply_transpose(std::size_t row, std::span<const Real> g,
                               std::span<Real> x_grad) const = 0;
};

/// scale * A, the same for every row.
template <typename Real>
class DenseMap final : public DetachedMap<Real> {
 public:
  DenseMap(Tensor<Real> matrix, Real scale);
  std::size_t in_dim() const override { return a_.cols(); }
  std::size_t out_dim() const override { return a_.rows(); }
  void apply(std::size_t row, std::span<const Real> x, std::span<Real> y) const override;
  void apply_transpose(std::size_t row, std::span<const Real> g,
                       std::span<Real> x_grad) const override;

 private:
  Tensor<Real> a_;
  Real scale_;
};

template <typename Real>
Var<Real> matmul(const Var<Real>& a, const Var<Real>& b);

// Elementwise with numpy-style broadcasting.
template <typename Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b);
template <typename Real>
Var<Real> sub(const Var<Real>& a, const Var<Real>& b);
template <typename Real>
Var<Real> mul(const Var<Real>& a, const Var<Real>& b);

/// x * c for a constant c.
template <typename Real>
Var<Real> scale(const Var<Real>& x, Real c);

template <typename Real>
Var<Real> transpose(const Var<Real>& x);
template <typename Real>
Var<Real> reshape(const Var<Real>& x, Shape shape);

/// out[i] = x[index[i]] over the leading axis; index -1 yields a zero row.
template <typename Real>
Var<Real> gather_rows(const Var<Real>& x, std::span<const std::int64_t> index);
/// out[index[i]] += x[i] over the leading axis into `out_rows` rows; index -1 drops the row.
template <typename Real>
Var<Real> scatter_rows(const Var<Real>& x, std::span<const std::int64_t> index,
                       std::size_t out_rows);

template <typename Real>
Var<Real> softmax(const Var<Real>& x);
/// Normalizes the last axis to zero mean, unit variance (no affine part).
template <typename Real>
Var<Real> layer_norm(const Var<Real>& x, Real eps = Real(1e-5));
/// Tanh approximation.
template <typename Real>
Var<Real> gelu(const Var<Real>& x);
template <typename Real>
Var<Real> tanh(const Var<Real>& x);
template <typename Real>
Var<Real> sigmoid(const Var<Real>& x);
template <typename Real>
Var<Real> abs(const Var<Real>& x);

/// x: T x C, weight: K x C (K odd), zero "same" padding.
template <typename Real>
Var<Real> depthwise_conv1d(const Var<Real>& x, const Var<Real>& weight, std::size_t dilation = 1);
/// x: T x Cin, weight: Cin x Cout.
template <typename Real>
Var<Real> pointwise_conv1d(const Var<Real>& x, const Var<Real>& weight);

template <typename Real>
Var<Real> sum(const Var<Real>& x);
template <typename Real>
Var<Real> mean(const Var<Real>& x);
/// Reduces one axis (removed from the output shape).
template <typename Real>
Var<Real> sum_axis(const Var<Real>& x, std::size_t axis);
template <typename Real>
Var<Real> mean_axis(const Var<Real>& x, std::size_t axis);

/// Euclidean norm over the last axis.
template <typename Real>
Var<Real> l2_norm(const Var<Real>& x);
/// Row-wise cosine over the last axis; a.b / (max(|a|,eps) * max(|b|,eps)).
template <typename Real>
Var<Real> cosine_similarity(const Var<Real>& a, const Var<Real>& b, Real eps = Real(1e-8));

/// y_r = M_r x_r with M excluded from gradient flow; x receives M_r^T g_r.
template <typename Real>
Var<Real> detached_linear(const Var<Real>& x, std::shared_ptr<const DetachedMap<Real>> map);
/// Dense form: y = scale * A x for every row of x.
template <typename Real>
Var<Real> detached_linear(const Var<Real>& x, const Tensor<Real>& a, Real scale);

/// Same value as x, no gradient.
template <typename Real>
Var<Real> stop_gradient(const Var<Real>& x);

/// Name-dispatched entry point over the catalog. Attributes are op specific:
/// `axis`, `shape`, `index`, `rows`, `dilation`, `scale`, `eps`.
template <typename Real>
Var<Real> forward_op(const std::string& name, const std::vector<Var<Real>>& inputs,
                     const nlohmann::json& attrs = nlohmann::json::object());

/// Names accepted by forward_op.
const std::vector<std::string>& op_catalog();

}  // namespace spotkit::diff
