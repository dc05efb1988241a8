#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spotkit/nn/layers.hpp"
#include "spotkit/quantizer/rvq.hpp"

namespace spotkit::style {

using diff::ParamStore;
using diff::Tape;
using diff::Tensor;
using diff::Var;
using nn::Rng;

/// Partition of [0, T) into voiced and unvoiced frame positions.
struct VoicedIndex {
  std::vector<std::int64_t> voiced;
  std::vector<std::int64_t> unvoiced;
  std::size_t total = 0;

  static VoicedIndex from_flags(const std::vector<bool>& vuv);
  /// Every frame voiced (used when voiced extraction is disabled).
  static VoicedIndex all_voiced(std::size_t T);
  void validate() const;
};

struct StyleConfig {
  std::size_t mel_dim = 80;
  std::size_t dim = 256;
  std::vector<std::size_t> wavenet_dilations = {1, 2, 4};
  std::size_t prenet_blocks = 4;
  std::size_t uf_blocks = 3;
  std::size_t heads = 1;
  std::size_t convnext_kernel = 7;
  double beta_mask = 0.02;
  bool renormalize = false;  // softmax(s + log beta) instead of A * beta
  double mask_code_range = 0.1;
};

template <typename Real>
struct WaveNetLayer {
  nn::Conv1d<Real> filter, gate;
  nn::Linear<Real> residual, skip;
};

/// Linear lift, gated dilated WaveNet stack (sum of skips), then conv-residual blocks.
template <typename Real>
struct PreNet {
  nn::Linear<Real> input;
  std::vector<WaveNetLayer<Real>> wavenet;
  std::vector<nn::ConvResBlock<Real>> blocks;

  static PreNet make(ParamStore<Real>& store, const std::string& name, const StyleConfig& cfg, Rng& rng);
  Var<Real> operator()(Tape<Real>& tape, const Var<Real>& mel) const;
};

template <typename Real>
Var<Real> voiced_gather(const Var<Real>& features, const VoicedIndex& idx);

/// Quantized rows back at voiced positions, the shared mask code everywhere else.
template <typename Real>
Var<Real> insert_mask_codes(Tape<Real>& tape, const Var<Real>& q_voiced, const VoicedIndex& idx,
                            const Var<Real>& mask_code);

/// Per-key-column reweighting vector: beta_mask at unvoiced positions, 1 at voiced ones.
template <typename Real>
std::vector<Real> key_weights(const VoicedIndex& idx, double beta_mask);

template <typename Real>
struct AttentionTrace {
  Var<Real> weights;  // softmax(q k^T / sqrt(dh)), last head
  Var<Real> biased;   // weights reweighted by beta, last head
  Var<Real> values;   // value rows, last head
};

/// Self-attention with heads; each head projects to d/heads and is mapped
/// back to d by its slice of the output projection, summed over heads.
template <typename Real>
struct Attention {
  std::vector<nn::Linear<Real>> q, k, v, out;

  static Attention make(ParamStore<Real>& store, const std::string& name, std::size_t dim, std::size_t heads,
                        Rng& rng);
  /// beta empty: plain attention. Queries come from `x`, keys and values from `kv`.
  Var<Real> operator()(Tape<Real>& tape, const Var<Real>& x, const Var<Real>& kv, const std::vector<Real>& beta,
                       bool renormalize, AttentionTrace<Real>* trace = nullptr) const;
};

template <typename Real>
Var<Real> biased_self_attention(Tape<Real>& tape, const Attention<Real>& attn, const Var<Real>& x,
                                const VoicedIndex& idx, double beta_mask, bool renormalize = false,
                                AttentionTrace<Real>* trace = nullptr);

/// Depthwise conv -> layer norm -> pointwise x4 -> GELU -> pointwise -> residual.
template <typename Real>
struct ConvNeXtBlock {
  Tensor<Real>* dw_weight = nullptr;  // K x d
  Tensor<Real>* dw_bias = nullptr;
  nn::LayerNormAffine<Real> norm;
  nn::Linear<Real> expand, project;

  static ConvNeXtBlock make(ParamStore<Real>& store, const std::string& name, std::size_t dim, std::size_t kernel,
                            Rng& rng, bool zero_project = false);
  Var<Real> operator()(Tape<Real>& tape, const Var<Real>& x) const;
};

/// ConvNeXt block followed by x + attention(LN(x)) with key reweighting.
template <typename Real>
struct UfBlock {
  ConvNeXtBlock<Real> convnext;
  nn::LayerNormAffine<Real> norm;
  Attention<Real> attention;
};

template <typename Real>
struct UfModule {
  std::vector<UfBlock<Real>> blocks;

  static UfModule make(ParamStore<Real>& store, const std::string& name, const StyleConfig& cfg, Rng& rng);
  Var<Real> operator()(Tape<Real>& tape, const Var<Real>& x, const VoicedIndex& idx, double beta_mask,
                       bool renormalize) const;
};

/// Cross-attention from content queries to style keys/values; plain softmax.
template <typename Real>
struct StyleAligner {
  nn::Linear<Real> q, k, v;

  static StyleAligner make(ParamStore<Real>& store, const std::string& name, std::size_t dim, Rng& rng);
  Var<Real> operator()(Tape<Real>& tape, const Var<Real>& content, const Var<Real>& style) const;
};

template <typename Real>
Var<Real> align_style(Tape<Real>& tape, const StyleAligner<Real>& aligner, const Var<Real>& content,
                      const Var<Real>& style);

struct EncodeOptions {
  quant::RvqOptions rvq;
  bool use_uf = true;
  double beta_mask = 0.02;
  bool renormalize = false;
};

template <typename Real>
struct StyleEmbedding {
  Var<Real> frames;        // T x d, after UF
  Var<Real> prenet;        // T x d, before quantization
  quant::QuantizeResult<Real> quant;
  VoicedIndex index;
};

/// Everything under `stylenc.*`: pre-net, mask code, UF module, alignment and
/// the global style projection.
template <typename Real>
struct StyleEncoder {
  StyleConfig cfg;
  PreNet<Real> prenet;
  Tensor<Real>* mask_code = nullptr;  // 1 x d
  UfModule<Real> uf;
  StyleAligner<Real> aligner;
  nn::Linear<Real> global;

  static StyleEncoder make(ParamStore<Real>& store, const StyleConfig& cfg, Rng& rng);

  /// pre-net -> voiced gather -> RVQ -> mask codes -> positions -> UF.
  StyleEmbedding<Real> encode(Tape<Real>& tape, const Var<Real>& mel, const VoicedIndex& idx,
                              const quant::Codebook<Real>& codebook, const EncodeOptions& opts) const;
  /// Linear projection of the time-averaged mel, 1 x d.
  Var<Real> global_style(Tape<Real>& tape, const Var<Real>& mel) const;
};

}  // namespace spotkit::style
