#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "spotkit/nn/layers.hpp"

namespace spotkit::obj {

using diff::ParamStore;
using diff::Tape;
using diff::Tensor;
using diff::Var;
using nn::Rng;

struct SdOptions {
  bool normalize = true;       // divide by n^2
  bool row_normalize = false;  // unit-length rows before the product
};

/// ||sg(E_c) E_s^T||_F^2, optionally / n^2. Only E_s receives a gradient.
template <typename Real>
Var<Real> style_disentanglement_loss(const Var<Real>& content, const Var<Real>& style, const SdOptions& opts = {});

/// Two MLP branches mapping low mel bins and style frames to a shared 32-d space.
template <typename Real>
struct ProsodyProjector {
  nn::Mlp<Real> mel;
  nn::Mlp<Real> style;

  static constexpr std::size_t kMelBins = 20;
  static constexpr std::size_t kOutDim = 32;

  static ProsodyProjector make(ParamStore<Real>& store, const std::string& name, std::size_t style_dim, Rng& rng);
};

enum class SpReduction { sum, mean };

/// -sum_i cos(mlp_mel(mel_low_i), mlp_style(style_i)).
template <typename Real>
Var<Real> style_preserving_loss(Tape<Real>& tape, const Var<Real>& mel_low, const Var<Real>& style,
                                const ProsodyProjector<Real>& proj, SpReduction reduction = SpReduction::sum);

/// The cosine part on already-projected rows.
template <typename Real>
Var<Real> negative_cosine_sum(const Var<Real>& p, const Var<Real>& s, SpReduction reduction = SpReduction::sum);

struct Fs2Options {
  /// Weight of the periodicity regression term; 0 gives mel L1 + voiced log-F0 MSE only.
  double periodicity_weight = 1.0;
};

template <typename Real>
struct Fs2Terms {
  Var<Real> mel_l1;
  Var<Real> pitch_mse;        // constant 0 when nothing is voiced
  Var<Real> periodicity_mse;  // invalid when not requested
  Var<Real> total;
  bool pitch_skipped = false;
};

/// mel: T x C each; logf0_pred: T x 1 (or T); vuv_gt marks frames whose log-F0
/// enters the MSE. periodicity_pred/gt are optional (T x 1 / T values).
template <typename Real>
Fs2Terms<Real> fs2_losses(Tape<Real>& tape, const Var<Real>& mel_pred, const Tensor<Real>& mel_gt,
                          const Var<Real>& logf0_pred, const std::vector<Real>& logf0_gt,
                          const std::vector<bool>& vuv_gt, const Var<Real>& periodicity_pred = {},
                          const std::vector<Real>& periodicity_gt = {}, const Fs2Options& opts = {});

struct LossWeights {
  double rvq = 1.0;
  double adv = 0.05;
  double sd = 0.02;
  double sp = 0.02;

  void validate() const;
};

struct LossBundle {
  double l_fs2 = 0, l_rvq = 0, l_adv = 0, l_sd = 0, l_sp = 0;
  double total = 0;
};

/// total = l_fs2 + w.rvq l_rvq + w.adv l_adv + w.sd l_sd + w.sp l_sp, in that order.
/// Throws naming the first non-finite component.
LossBundle total_loss(double l_fs2, double l_rvq, double l_adv, double l_sd, double l_sp, const LossWeights& w);

/// Graph terms; invalid handles count as zero.
template <typename Real>
struct LossTerms {
  Var<Real> l_fs2, l_rvq, l_adv, l_sd, l_sp;
};

template <typename Real>
struct WeightedLoss {
  Var<Real> total;
  LossBundle bundle;
};

template <typename Real>
WeightedLoss<Real> total_loss(Tape<Real>& tape, const LossTerms<Real>& terms, const LossWeights& w);

/// Adversarial hook: given predicted and target mel, returns the generator-side
/// loss. Nothing is registered by default, which keeps l_adv at zero.
template <typename Real>
using AdversarialHook = std::function<Var<Real>(Tape<Real>&, const Var<Real>& mel_pred, const Tensor<Real>& mel_gt)>;

/// Appends `step,l_fs2,l_rvq,l_adv,l_sd,l_sp,total` rows.
class LossCsv {
 public:
  static constexpr const char* kHeader = "step,l_fs2,l_rvq,l_adv,l_sd,l_sp,total";

  /// append=false truncates and writes the header; append=true keeps rows up to
  /// (and excluding) `first_step`, so a resumed run continues the same file.
  LossCsv(const std::filesystem::path& path, bool append = false, long first_step = 0);
  void write(long step, const LossBundle& b);
  const std::filesystem::path& path() const { return path_; }

  struct Row {
    long step;
    LossBundle bundle;
  };
  static std::vector<Row> read(const std::filesystem::path& path);

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

}  // namespace spotkit::obj
