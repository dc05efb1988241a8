#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "spotkit/diffcore/ops.hpp"
#include "spotkit/diffcore/param_store.hpp"

namespace spotkit::quant {

using diff::Tape;
using diff::Tensor;
using diff::Var;

/// Raised when e and q point in opposite directions and no rotation aligns them.
class AntiparallelCase : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline constexpr double kNormEps = 1e-8;
inline constexpr double kAntiparallelEps = 1e-6;

/// Dense R = I - 2 l l^T + 2 q^ e^T (row-major d x d). For tests and diagnostics.
std::vector<double> rotation_matrix(std::span<const double> e, std::span<const double> q);

/// Per-row frozen maps x -> (|q|/|e|) R x, applied as rank-1 updates. Rows
/// flagged as fallback (antiparallel or vanishing input) use the identity.
template <typename Real>
class RotationMap final : public diff::DetachedMap<Real> {
 public:
  /// e, q: rows x d, row-major.
  RotationMap(std::size_t rows, std::size_t dim, std::span<const Real> e, std::span<const Real> q);

  std::size_t in_dim() const override { return dim_; }
  std::size_t out_dim() const override { return dim_; }
  std::size_t rows() const override { return rows_; }
  void apply(std::size_t row, std::span<const Real> x, std::span<Real> y) const override;
  void apply_transpose(std::size_t row, std::span<const Real> g, std::span<Real> x_grad) const override;

  bool fallback(std::size_t row) const { return fallback_[row] != 0; }
  std::size_t fallback_count() const;

 private:
  std::size_t rows_, dim_;
  std::vector<double> e_hat_, q_hat_, lambda_, scale_;
  std::vector<char> fallback_;
};

struct RtOutput {
  std::size_t fallbacks = 0;
};

/// Rotation-trick quantizer output per row: forward equals q, backward maps
/// the upstream gradient through (|q|/|e|) R^T. Rows without a rotation use
/// straight-through. q receives no gradient.
template <typename Real>
Var<Real> rt_forward(const Var<Real>& e, const Tensor<Real>& q, RtOutput* info = nullptr);

enum class QuantMode { rotation_trick, straight_through };
enum class CommitmentReduction { frame_sq_norm, element_mean };

template <typename Real>
struct Codebook {
  std::size_t depth = 4, size = 64, dim = 256;
  std::vector<Real> codes;       // depth x size x dim
  std::vector<Real> ema_counts;  // depth x size
  std::vector<Real> ema_sums;    // depth x size x dim
  std::vector<char> revived;     // set by the last ema_update
  bool initialized = false;

  Codebook() = default;
  Codebook(std::size_t depth, std::size_t size, std::size_t dim);

  Real* code(std::size_t d, std::size_t k) { return codes.data() + (d * size + k) * dim; }
  const Real* code(std::size_t d, std::size_t k) const { return codes.data() + (d * size + k) * dim; }

  /// Index of the nearest code at depth d (ties to the lowest index).
  std::size_t nearest(std::size_t d, std::span<const Real> x) const;
  bool all_finite() const;

  /// Non-trainable store entries rvq.depth{i}.codes / .ema_counts / .ema_sums.
  void write_to(diff::ParamStore<Real>& store) const;
  void read_from(const diff::ParamStore<Real>& store);
};

struct RvqOptions {
  QuantMode mode = QuantMode::rotation_trick;
  CommitmentReduction reduction = CommitmentReduction::frame_sq_norm;
  bool per_depth_commitment = true;  // false: only the final residual
};

template <typename Real>
struct QuantizeResult {
  Var<Real> quantized;                         // T_v x d
  Var<Real> loss_rvq;                          // scalar
  std::vector<std::int32_t> codes;             // T_v x depth
  std::vector<Tensor<Real>> residual_inputs;   // per depth, T_v x d
  std::vector<double> residual_norms;          // per depth: mean |r_d - q_d|
  std::vector<double> residual_energy;         // per depth: mean |r_d - q_d|^2
  std::size_t fallbacks = 0;
};

/// Residual quantization of the rows of `frames`.
template <typename Real>
QuantizeResult<Real> rvq_encode(const Var<Real>& frames, const Codebook<Real>& cb, const RvqOptions& opts = {});

struct EmaOptions {
  double decay = 0.99;
  double eps = 1e-5;
  double revive_threshold = 0.05;
};

/// EMA codebook update from one batch: counts and sums decay toward the batch
/// assignment statistics, codes become sums / (counts + eps). Codes whose count
/// drops under the threshold are reseeded from random batch residuals.
template <typename Real>
void ema_update(Codebook<Real>& cb, std::span<const std::int32_t> codes, const std::vector<Tensor<Real>>& residuals,
                const EmaOptions& opts, std::mt19937_64& rng);

/// k-means++ seeding per depth on the residual chain of `frames` (rows x dim).
template <typename Real>
void kmeanspp_init(Codebook<Real>& cb, const Tensor<Real>& frames, std::mt19937_64& rng);

}  // namespace spotkit::quant
