#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "spotkit/backbone/model.hpp"

namespace spotkit::backbone {

struct OptimConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.01;  // decoupled; matrices only
  std::size_t warmup_steps = 200;
  double grad_clip = 1.0;      // global norm, 0 disables
};

struct TrainerConfig {
  ModelConfig model;
  OptimConfig optim;
  AblationFlags flags;
  obj::LossWeights weights;
  obj::SdOptions sd;
  obj::SpReduction sp_reduction = obj::SpReduction::sum;
  quant::CommitmentReduction commitment = quant::CommitmentReduction::frame_sq_norm;
  double periodicity_weight = 1.0;
  std::size_t max_steps = 2000;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 500;
  std::size_t kmeans_utterances = 32;  // codebook seeding sample
  std::size_t keep_checkpoints = 2;

  void validate() const;
};

void to_json(nlohmann::json& j, const OptimConfig& c);
void from_json(const nlohmann::json& j, OptimConfig& c);
void to_json(nlohmann::json& j, const TrainerConfig& c);
void from_json(const nlohmann::json& j, TrainerConfig& c);

/// Reads a JSON config; missing keys keep their defaults.
TrainerConfig load_config(const std::filesystem::path& path);

/// AdamW with moments kept as non-trainable entries of their own store.
class AdamW {
 public:
  AdamW() = default;
  AdamW(ParamStore<float>& params, const OptimConfig& cfg);

  double learning_rate(std::size_t step) const;
  /// Applies one update from the grads currently held in the parameter store.
  /// Returns the global gradient norm before clipping.
  double step(ParamStore<float>& params);
  std::size_t steps_taken() const { return t_; }
  void set_steps_taken(std::size_t t) { t_ = t; }
  ParamStore<float>& moments() { return moments_; }

 private:
  OptimConfig cfg_;
  ParamStore<float> moments_;
  std::vector<std::pair<Tensor<float>*, std::pair<Tensor<float>*, Tensor<float>*>>> slots_;
  std::size_t t_ = 0;
};

/// Per-utterance loss graph and the batch aggregate.
struct UtteranceLoss {
  obj::LossTerms<float> terms;
  quant::QuantizeResult<float> quant;
};

UtteranceLoss utterance_loss(Tape<float>& tape, const Model<float>& model, const Sample& s,
                             const TrainerConfig& cfg, const obj::AdversarialHook<float>* adv = nullptr);

/// Loss weights in effect: the configured ones with disabled terms zeroed.
obj::LossWeights effective_weights(const TrainerConfig& cfg);

struct StepReport {
  obj::LossBundle bundle;
  double grad_norm = 0.0;
  double lr = 0.0;
  std::size_t fallbacks = 0;
};

/// Owns model, optimizer, codebook statistics and the data order.
class Trainer {
 public:
  Trainer(TrainerConfig cfg, std::shared_ptr<const Dataset> data);
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  /// Seeds the codebook (k-means++ on pre-net features of a fixed sample).
  void initialize();
  StepReport train_step();
  /// Indices (into data().train) of the batch the next train_step will use.
  std::vector<std::size_t> next_batch() const;
  /// Loss of a batch without updating anything.
  obj::LossBundle evaluate(const std::vector<std::size_t>& batch);

  void save(const std::filesystem::path& dir);
  void load(const std::filesystem::path& dir);

  /// Runs until max_steps, writing out_dir/loss.csv and checkpointing to
  /// out_dir/checkpoints/step_NNNNNN; the last checkpoint is also written to
  /// out_dir/final. With `resume_from`, training continues from that checkpoint.
  void run(const std::filesystem::path& out_dir,
           const std::optional<std::filesystem::path>& resume_from = std::nullopt);

  const TrainerConfig& config() const { return cfg_; }
  std::size_t step() const { return step_; }
  Model<float>& model() { return model_; }
  const Model<float>& model() const { return model_; }
  ParamStore<float>& params() { return params_; }
  const Dataset& data() const { return *data_; }
  void set_adversarial_hook(obj::AdversarialHook<float> hook) { adv_hook_ = std::move(hook); }
  void set_progress(std::function<void(std::size_t, const StepReport&)> fn) { progress_ = std::move(fn); }

 private:
  std::vector<std::size_t> take_batch();
  obj::LossBundle batch_loss(const std::vector<std::size_t>& batch, bool update, StepReport* report);

  TrainerConfig cfg_;
  std::shared_ptr<const Dataset> data_;
  ParamStore<float> params_;
  Model<float> model_;
  AdamW optim_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t step_ = 0;
  obj::AdversarialHook<float> adv_hook_;
  std::function<void(std::size_t, const StepReport&)> progress_;
};

/// A trained model loaded for inference.
struct LoadedModel {
  TrainerConfig cfg;
  std::unique_ptr<ParamStore<float>> store;
  Model<float> model;
  std::size_t step = 0;
};

LoadedModel load_checkpoint(const std::filesystem::path& dir);

struct Prediction {
  Tensor<float> mel;
  signal::PitchTrack pitch;
  Tensor<float> aligned_style;  // n x d
};

/// Synthesizes features for `content` in the style of the reference. Throws
/// if the reference has no voiced frame (unless voiced extraction is ablated).
Prediction infer(const Model<float>& model, const AblationFlags& flags, const std::vector<int>& content,
                 const Tensor<float>& reference_mel, const std::vector<bool>& reference_voicing);
/// Reference given as audio; voicing comes from the pitch frontend.
Prediction infer(const Model<float>& model, const AblationFlags& flags, const std::vector<int>& content,
                 const signal::Waveform& reference, const signal::MelConfig& mel_cfg,
                 const signal::PitchConfig& pitch_cfg);

}  // namespace spotkit::backbone
