#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "spotkit/corpus/corpus.hpp"
#include "spotkit/objectives/losses.hpp"
#include "spotkit/stylenc/style_encoder.hpp"

namespace spotkit::backbone {

using diff::ParamStore;
using diff::Tape;
using diff::Tensor;
using diff::Var;
using nn::Rng;

struct ModelConfig {
  std::size_t n_symbols = 12;
  std::size_t mel_dim = 80;
  std::size_t dim = 256;
  std::size_t content_blocks = 2;
  std::size_t decoder_blocks = 4;
  std::size_t kernel = 3;
  std::size_t codebook_size = 64;
  std::size_t rvq_depth = 4;
  style::StyleConfig style;  // mel_dim and dim are overridden by the fields above

  style::StyleConfig style_config() const;
  void validate() const;
};

/// Ablation switches. Every flag only bypasses computation; the parameter set
/// is the same for all combinations.
struct AblationFlags {
  bool use_rt = true;  // false: straight-through quantizer gradient
  bool use_uf = true;  // false: mask-coded sequence goes straight to alignment
  bool use_ve = true;  // false: every frame is treated as voiced
  bool use_sd = true;
  bool use_sp = true;
  double beta_mask = 0.02;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const AblationFlags& f);
void from_json(const nlohmann::json& j, AblationFlags& f);

/// One utterance prepared for training or evaluation.
struct Sample {
  std::string id;
  std::string split;
  int style_id = 0;
  int sentence_id = 0;
  Tensor<float> mel;               // T x mel_dim, log mel
  std::vector<int> content;        // T symbol ids
  signal::PitchTrack pitch;        // renderer ground truth
  std::vector<bool> style_voicing; // frontend estimate, drives the style path

  std::size_t length() const { return content.size(); }
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// Loads every manifest entry and runs the pitch frontend on its waveform.
Dataset load_dataset(const corpus::Manifest& manifest);
Sample make_sample(const corpus::SynthUtterance& utt, const signal::PitchConfig& pitch_cfg, std::string id = {},
                   int sentence_id = 0);

/// Per-bin mel and log-F0 statistics of the training split.
struct NormStats {
  std::vector<double> mel_mean, mel_std;
  double logf0_mean = 0.0, logf0_std = 1.0;

  static NormStats fit(const std::vector<Sample>& samples, std::size_t mel_dim);
};

template <typename Real>
struct ContentEncoder {
  Tensor<Real>* table = nullptr;  // n_symbols x d
  std::vector<nn::ConvResBlock<Real>> blocks;

  static ContentEncoder make(ParamStore<Real>& store, const ModelConfig& cfg, Rng& rng);
  Var<Real> operator()(Tape<Real>& tape, const std::vector<int>& symbols) const;
};

/// Pitch predictor (conv, GELU, norm, conv to [normalized log-F0, periodicity logit])
/// and the projection of the pitch features back to d.
template <typename Real>
struct VarianceAdaptor {
  nn::Conv1d<Real> conv1, conv2;
  nn::LayerNormAffine<Real> norm;
  nn::Linear<Real> pitch_embed;  // [z * v, v] -> d

  static VarianceAdaptor make(ParamStore<Real>& store, const ModelConfig& cfg, Rng& rng);
  /// T x 2 raw predictor output.
  Var<Real> predict(Tape<Real>& tape, const Var<Real>& x) const;
};

template <typename Real>
struct Decoder {
  std::vector<nn::ConvResBlock<Real>> blocks;
  nn::LayerNormAffine<Real> norm;
  nn::Linear<Real> out;  // zero-initialized

  static Decoder make(ParamStore<Real>& store, const ModelConfig& cfg, Rng& rng);
  Var<Real> operator()(Tape<Real>& tape, const Var<Real>& x) const;
};

/// Teacher-forced pitch features: normalized log-F0 and voicing per frame.
struct PitchTarget {
  std::vector<double> z;
  std::vector<bool> voiced;
};

struct ForwardInput {
  const std::vector<int>* content = nullptr;
  const Tensor<float>* style_mel = nullptr;  // raw log mel of the reference
  const std::vector<bool>* style_voicing = nullptr;
  const PitchTarget* teacher = nullptr;  // null: use the model's own prediction
};

template <typename Real>
struct ForwardOutput {
  Var<Real> mel;             // T x mel_dim, log mel
  Var<Real> logf0_z;         // T x 1, normalized log-F0
  Var<Real> periodicity;     // T x 1 in (0, 1)
  Var<Real> content;         // E_c
  Var<Real> aligned;         // E_s after alignment, n x d
  Var<Real> global;          // 1 x d
  Var<Real> style_mel_norm;  // normalized reference mel
  style::StyleEmbedding<Real> style;
};

template <typename Real>
struct Model {
  ModelConfig cfg;
  ContentEncoder<Real> content;
  style::StyleEncoder<Real> style;
  VarianceAdaptor<Real> adaptor;
  Decoder<Real> decoder;
  obj::ProsodyProjector<Real> projector;
  quant::Codebook<Real> codebook;
  Tensor<Real>* mel_mean = nullptr;  // non-trainable statistics
  Tensor<Real>* mel_std = nullptr;
  Tensor<Real>* logf0_stats = nullptr;  // [mean, std]

  static Model make(ParamStore<Real>& store, const ModelConfig& cfg, Rng& rng);

  void set_stats(const NormStats& stats);
  /// Writes the codebook into its store entries (before saving).
  void sync_to(ParamStore<Real>& store) const;
  /// Reads the codebook back from the store (after loading).
  void sync_from(const ParamStore<Real>& store);

  ForwardOutput<Real> forward(Tape<Real>& tape, const ForwardInput& in, const AblationFlags& flags,
                              const quant::RvqOptions& rvq) const;

  Tensor<Real> normalize_mel(const Tensor<float>& mel) const;
  PitchTarget pitch_target(const signal::PitchTrack& track) const;
  /// Hz track from predicted z and periodicity (voiced iff periodicity >= 0.5).
  signal::PitchTrack pitch_track(const ForwardOutput<Real>& out) const;
};

quant::RvqOptions rvq_options(const AblationFlags& flags, quant::CommitmentReduction reduction);

/// Voiced index for the style path under the ablation flags.
style::VoicedIndex style_index(const std::vector<bool>& voicing, const AblationFlags& flags);

}  // namespace spotkit::backbone
