#include "spotkit/backbone/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace spotkit::backbone {

namespace fs = std::filesystem;
using diff::Shape;

namespace {

const char* to_string(obj::SpReduction r) { return r == obj::SpReduction::mean ? "mean" : "sum"; }
const char* to_string(quant::CommitmentReduction r) {
  return r == quant::CommitmentReduction::element_mean ? "element_mean" : "frame_sq_norm";
}

obj::SpReduction sp_reduction_from(const std::string& s) {
  if (s == "sum") return obj::SpReduction::sum;
  if (s == "mean") return obj::SpReduction::mean;
  throw std::invalid_argument("config: sp_reduction must be \"sum\" or \"mean\", got \"" + s + "\"");
}

quant::CommitmentReduction commitment_from(const std::string& s) {
  if (s == "frame_sq_norm") return quant::CommitmentReduction::frame_sq_norm;
  if (s == "element_mean") return quant::CommitmentReduction::element_mean;
  throw std::invalid_argument("config: commitment must be \"frame_sq_norm\" or \"element_mean\", got \"" + s + "\"");
}

std::string step_name(std::size_t step) {
  std::ostringstream os;
  os << "step_" << std::setw(6) << std::setfill('0') << step;
  return os.str();
}

double parameter_norm(const ParamStore<float>& store) {
  double ss = 0;
  for (const auto& e : store)
    if (e.tensor.requires_grad())
      for (float v : e.tensor.values()) ss += double(v) * v;
  return std::sqrt(ss);
}

// Model state except the optimizer must agree for a resume to be meaningful.
nlohmann::json resume_key(const TrainerConfig& c) {
  nlohmann::json j = c;
  j.erase("max_steps");
  j.erase("checkpoint_every");
  j.erase("keep_checkpoints");
  return j;
}

}  // namespace

void TrainerConfig::validate() const {
  model.validate();
  weights.validate();
  if (batch_size == 0) throw std::invalid_argument("config: batch_size must be positive");
  if (!(optim.lr > 0) || !(optim.beta1 >= 0 && optim.beta1 < 1) || !(optim.beta2 >= 0 && optim.beta2 < 1)) {
    throw std::invalid_argument("config: invalid optimizer hyperparameters");
  }
  if (!(flags.beta_mask >= 0.0 && flags.beta_mask <= 1.0)) {
    throw std::invalid_argument("config: beta_mask must lie in [0, 1]");
  }
  if (periodicity_weight < 0) throw std::invalid_argument("config: periodicity_weight must be non-negative");
}

void to_json(nlohmann::json& j, const OptimConfig& c) {
  j = {{"lr", c.lr},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"weight_decay", c.weight_decay},
       {"warmup_steps", c.warmup_steps},
       {"grad_clip", c.grad_clip}};
}

void from_json(const nlohmann::json& j, OptimConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
}

void to_json(nlohmann::json& j, const TrainerConfig& c) {
  j = {{"model", c.model},
       {"optim", c.optim},
       {"flags", c.flags},
       {"weights", {{"rvq", c.weights.rvq}, {"adv", c.weights.adv}, {"sd", c.weights.sd}, {"sp", c.weights.sp}}},
       {"sd_normalize", c.sd.normalize},
       {"sd_row_normalize", c.sd.row_normalize},
       {"sp_reduction", to_string(c.sp_reduction)},
       {"commitment", to_string(c.commitment)},
       {"periodicity_weight", c.periodicity_weight},
       {"max_steps", c.max_steps},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every},
       {"kmeans_utterances", c.kmeans_utterances},
       {"keep_checkpoints", c.keep_checkpoints}};
}

void from_json(const nlohmann::json& j, TrainerConfig& c) {
  if (j.contains("model")) j.at("model").get_to(c.model);
  if (j.contains("optim")) j.at("optim").get_to(c.optim);
  if (j.contains("flags")) j.at("flags").get_to(c.flags);
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    c.weights.rvq = w.value("rvq", c.weights.rvq);
    c.weights.adv = w.value("adv", c.weights.adv);
    c.weights.sd = w.value("sd", c.weights.sd);
    c.weights.sp = w.value("sp", c.weights.sp);
  }
  c.sd.normalize = j.value("sd_normalize", c.sd.normalize);
  c.sd.row_normalize = j.value("sd_row_normalize", c.sd.row_normalize);
  if (j.contains("sp_reduction")) c.sp_reduction = sp_reduction_from(j.at("sp_reduction").get<std::string>());
  if (j.contains("commitment")) c.commitment = commitment_from(j.at("commitment").get<std::string>());
  c.periodicity_weight = j.value("periodicity_weight", c.periodicity_weight);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.kmeans_utterances = j.value("kmeans_utterances", c.kmeans_utterances);
  c.keep_checkpoints = j.value("keep_checkpoints", c.keep_checkpoints);
}

TrainerConfig load_config(const fs::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".toml") throw std::invalid_argument(path.string() + ": TOML configs are not supported, use JSON");
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  TrainerConfig c = j.get<TrainerConfig>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

AdamW::AdamW(ParamStore<float>& params, const OptimConfig& cfg) : cfg_(cfg) {
  for (auto& e : params) {
    if (!e.tensor.requires_grad()) continue;
    auto& m = moments_.add("m." + e.name, Tensor<float>(e.tensor.shape()), false);
    auto& v = moments_.add("v." + e.name, Tensor<float>(e.tensor.shape()), false);
    slots_.push_back({&e.tensor, {&m, &v}});
  }
}

double AdamW::learning_rate(std::size_t step) const {
  if (cfg_.warmup_steps == 0) return cfg_.lr;
  return cfg_.lr * std::min(1.0, double(step + 1) / double(cfg_.warmup_steps));
}

double AdamW::step(ParamStore<float>&) {
  double ss = 0;
  for (auto& [p, mv] : slots_)
    for (float g : p->grad()) ss += double(g) * g;
  const double norm = std::sqrt(ss);
  const double clip = (cfg_.grad_clip > 0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;

  const double lr = learning_rate(t_);
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, double(t_));
  const double c2 = 1.0 - std::pow(b2, double(t_));
  for (auto& [p, mv] : slots_) {
    auto w = p->values();
    auto g = p->grad();
    auto m = mv.first->values();
    auto v = mv.second->values();
    const bool decay = p->rank() >= 2 && cfg_.weight_decay > 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : double(g[i]) * clip;
      m[i] = static_cast<float>(b1 * m[i] + (1 - b1) * gi);
      v[i] = static_cast<float>(b2 * v[i] + (1 - b2) * gi * gi);
      double upd = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      if (decay) upd += cfg_.weight_decay * w[i];
      w[i] = static_cast<float>(w[i] - lr * upd);
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------

obj::LossWeights effective_weights(const TrainerConfig& cfg) {
  auto w = cfg.weights;
  if (!cfg.flags.use_sd) w.sd = 0;
  if (!cfg.flags.use_sp) w.sp = 0;
  return w;
}

UtteranceLoss utterance_loss(Tape<float>& tape, const Model<float>& model, const Sample& s, const TrainerConfig& cfg,
                             const obj::AdversarialHook<float>* adv) {
  const auto teacher = model.pitch_target(s.pitch);
  ForwardInput in{&s.content, &s.mel, &s.style_voicing, &teacher};
  auto out = model.forward(tape, in, cfg.flags, rvq_options(cfg.flags, cfg.commitment));

  UtteranceLoss ul;
  const std::vector<float> z(teacher.z.begin(), teacher.z.end());
  const std::vector<float> per(s.pitch.periodicity.begin(), s.pitch.periodicity.end());
  obj::Fs2Options fo;
  fo.periodicity_weight = cfg.periodicity_weight;
  auto fs2 = obj::fs2_losses(tape, out.mel, s.mel, out.logf0_z, z, teacher.voiced, out.periodicity, per, fo);
  ul.terms.l_fs2 = fs2.total;
  ul.terms.l_rvq = out.style.quant.loss_rvq;
  ul.terms.l_sd = obj::style_disentanglement_loss(out.content, out.aligned, cfg.sd);

  const std::size_t bins = obj::ProsodyProjector<float>::kMelBins;
  const auto& mn = out.style_mel_norm.value();
  Tensor<float> low(Shape{mn.rows(), bins});
  for (std::size_t t = 0; t < mn.rows(); ++t)
    for (std::size_t c = 0; c < bins; ++c) low(t, c) = mn(t, c);
  ul.terms.l_sp =
      obj::style_preserving_loss(tape, tape.constant(std::move(low)), out.style.frames, model.projector, cfg.sp_reduction);
  if (adv && *adv) ul.terms.l_adv = (*adv)(tape, out.mel, s.mel);
  ul.quant = std::move(out.style.quant);
  return ul;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(TrainerConfig cfg, std::shared_ptr<const Dataset> data) : cfg_(std::move(cfg)), data_(std::move(data)) {
  cfg_.validate();
  if (!data_ || data_->train.empty()) throw std::invalid_argument("trainer: empty training set");
  std::seed_seq init_seq{std::uint32_t(cfg_.seed), std::uint32_t(cfg_.seed >> 32), 0u};
  Rng init(init_seq);
  model_ = Model<float>::make(params_, cfg_.model, init);
  model_.set_stats(NormStats::fit(data_->train, cfg_.model.mel_dim));
  optim_ = AdamW(params_, cfg_.optim);
  std::seed_seq data_seq{std::uint32_t(cfg_.seed), std::uint32_t(cfg_.seed >> 32), 1u};
  rng_.seed(data_seq);
}

void Trainer::initialize() {
  const auto& train = data_->train;
  std::vector<std::size_t> pick(train.size());
  for (std::size_t i = 0; i < pick.size(); ++i) pick[i] = i;
  std::shuffle(pick.begin(), pick.end(), rng_);
  pick.resize(std::min(pick.size(), std::max<std::size_t>(1, cfg_.kmeans_utterances)));

  std::vector<float> rows;
  for (auto i : pick) {
    const auto& s = train[i];
    Tape<float> tape;
    auto feats = model_.style.prenet(tape, tape.constant(model_.normalize_mel(s.mel)));
    const auto idx = style_index(s.style_voicing, cfg_.flags);
    const auto& v = style::voiced_gather(feats, idx).value().values();
    rows.insert(rows.end(), v.begin(), v.end());
  }
  const std::size_t d = cfg_.model.dim;
  const std::size_t n = rows.size() / d;
  Tensor<float> frames(Shape{n, d}, std::move(rows));
  quant::kmeanspp_init(model_.codebook, frames, rng_);
  model_.sync_to(params_);

  order_.resize(train.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
  step_ = 0;
}

std::vector<std::size_t> Trainer::next_batch() const {
  auto order = order_;
  auto cursor = cursor_;
  auto rng = rng_;
  const std::size_t B = std::min(cfg_.batch_size, order.size());
  if (cursor + B > order.size()) {
    std::shuffle(order.begin(), order.end(), rng);
    cursor = 0;
  }
  return {order.begin() + static_cast<std::ptrdiff_t>(cursor), order.begin() + static_cast<std::ptrdiff_t>(cursor + B)};
}

std::vector<std::size_t> Trainer::take_batch() {
  const std::size_t B = std::min(cfg_.batch_size, order_.size());
  if (cursor_ + B > order_.size()) {
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }
  std::vector<std::size_t> batch(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + B));
  cursor_ += B;
  return batch;
}

obj::LossBundle Trainer::batch_loss(const std::vector<std::size_t>& batch, bool update, StepReport* report) {
  if (!model_.codebook.initialized) throw std::logic_error("trainer: initialize() or load() must run first");
  const auto w = effective_weights(cfg_);
  Tape<float> tape;
  Var<float> total;
  double sums[5] = {0, 0, 0, 0, 0};
  std::vector<std::int32_t> codes;
  std::vector<std::vector<float>> residuals(cfg_.model.rvq_depth);
  std::size_t fallbacks = 0;
  const auto* hook = adv_hook_ ? &adv_hook_ : nullptr;

  for (auto i : batch) {
    auto ul = utterance_loss(tape, model_, data_->train.at(i), cfg_, hook);
    obj::WeightedLoss<float> wl;
    try {
      wl = obj::total_loss(tape, ul.terms, w);
    } catch (const std::domain_error& e) {
      std::ostringstream os;
      os << "step " << step_ + 1 << ", utterance " << data_->train[i].id << ": " << e.what()
         << " (parameter norm " << parameter_norm(params_) << ")";
      throw std::runtime_error(os.str());
    }
    const double parts[5] = {wl.bundle.l_fs2, wl.bundle.l_rvq, wl.bundle.l_adv, wl.bundle.l_sd, wl.bundle.l_sp};
    for (int k = 0; k < 5; ++k) sums[k] += parts[k];
    total = total.valid() ? diff::add(total, wl.total) : wl.total;
    codes.insert(codes.end(), ul.quant.codes.begin(), ul.quant.codes.end());
    for (std::size_t d = 0; d < residuals.size(); ++d) {
      const auto v = ul.quant.residual_inputs[d].values();
      residuals[d].insert(residuals[d].end(), v.begin(), v.end());
    }
    fallbacks += ul.quant.fallbacks;
  }
  const double nb = static_cast<double>(batch.size());
  const auto bundle = obj::total_loss(sums[0] / nb, sums[1] / nb, sums[2] / nb, sums[3] / nb, sums[4] / nb, w);
  if (!update) return bundle;

  total = diff::scale(total, 1.0f / static_cast<float>(batch.size()));
  params_.zero_grad();
  tape.backward(total);
  const double lr = optim_.learning_rate(optim_.steps_taken());
  const double gnorm = optim_.step(params_);
  if (!std::isfinite(gnorm)) {
    std::ostringstream os;
    os << "step " << step_ + 1 << ": non-finite gradient norm (parameter norm " << parameter_norm(params_) << ")";
    throw std::runtime_error(os.str());
  }

  const std::size_t d = cfg_.model.dim;
  std::vector<Tensor<float>> res;
  for (auto& r : residuals) {
    const std::size_t n = r.size() / d;
    res.emplace_back(Shape{n, d}, std::move(r));
  }
  quant::ema_update(model_.codebook, codes, res, quant::EmaOptions{}, rng_);
  if (!model_.codebook.all_finite()) {
    throw std::runtime_error("step " + std::to_string(step_ + 1) + ": codebook became non-finite");
  }
  if (report) {
    report->bundle = bundle;
    report->grad_norm = gnorm;
    report->lr = lr;
    report->fallbacks = fallbacks;
  }
  return bundle;
}

StepReport Trainer::train_step() {
  StepReport r;
  const auto batch = take_batch();
  batch_loss(batch, true, &r);
  ++step_;
  return r;
}

obj::LossBundle Trainer::evaluate(const std::vector<std::size_t>& batch) { return batch_loss(batch, false, nullptr); }

void Trainer::save(const fs::path& dir) {
  fs::create_directories(dir);
  model_.sync_to(params_);
  params_.save(dir / "model.spk");
  optim_.moments().save(dir / "optim.spk");
  std::ostringstream rng;
  rng << rng_;
  nlohmann::json state = {{"format", "spotkit-checkpoint-1"},
                          {"config", cfg_},
                          {"step", step_},
                          {"adam_steps", optim_.steps_taken()},
                          {"rng", rng.str()},
                          {"order", order_},
                          {"cursor", cursor_}};
  const auto tmp = dir / "state.json.tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << state.dump(2) << '\n';
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, dir / "state.json");
}

void Trainer::load(const fs::path& dir) {
  std::ifstream in(dir / "state.json");
  if (!in) throw std::runtime_error("cannot read checkpoint state " + (dir / "state.json").string());
  nlohmann::json state;
  in >> state;
  const auto saved = state.at("config").get<TrainerConfig>();
  if (resume_key(saved) != resume_key(cfg_)) {
    throw std::invalid_argument("checkpoint " + dir.string() + " was written with a different configuration");
  }
  params_.load_values(dir / "model.spk");
  model_.sync_from(params_);
  optim_.moments().load_values(dir / "optim.spk");
  optim_.set_steps_taken(state.at("adam_steps").get<std::size_t>());
  step_ = state.at("step").get<std::size_t>();
  std::istringstream rng(state.at("rng").get<std::string>());
  rng >> rng_;
  order_ = state.at("order").get<std::vector<std::size_t>>();
  cursor_ = state.at("cursor").get<std::size_t>();
  if (order_.size() != data_->train.size()) {
    throw std::invalid_argument("checkpoint " + dir.string() + " was written for a different training set");
  }
}

void Trainer::run(const fs::path& out_dir, const std::optional<fs::path>& resume_from) {
  fs::create_directories(out_dir / "checkpoints");
  if (resume_from) {
    load(*resume_from);
  } else {
    initialize();
  }
  obj::LossCsv log(out_dir / "loss.csv", resume_from.has_value(), static_cast<long>(step_) + 1);
  std::vector<fs::path> kept;
  auto checkpoint = [&]() {
    const auto dir = out_dir / "checkpoints" / step_name(step_);
    save(dir);
    kept.push_back(dir);
    while (cfg_.keep_checkpoints > 0 && kept.size() > cfg_.keep_checkpoints) {
      fs::remove_all(kept.front());
      kept.erase(kept.begin());
    }
  };
  if (!resume_from) checkpoint();
  while (step_ < cfg_.max_steps) {
    const auto r = train_step();
    log.write(static_cast<long>(step_), r.bundle);
    if (progress_) progress_(step_, r);
    if ((cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0) || step_ == cfg_.max_steps) checkpoint();
  }
  save(out_dir / "final");
}

// ---------------------------------------------------------------------------

LoadedModel load_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "state.json");
  if (!in) throw std::runtime_error("cannot read checkpoint state " + (dir / "state.json").string());
  nlohmann::json state;
  in >> state;
  LoadedModel m;
  m.cfg = state.at("config").get<TrainerConfig>();
  m.step = state.at("step").get<std::size_t>();
  m.store = std::make_unique<ParamStore<float>>();
  Rng rng(0);
  m.model = Model<float>::make(*m.store, m.cfg.model, rng);
  m.store->load_values(dir / "model.spk");
  m.model.sync_from(*m.store);
  return m;
}

Prediction infer(const Model<float>& model, const AblationFlags& flags, const std::vector<int>& content,
                 const Tensor<float>& reference_mel, const std::vector<bool>& reference_voicing) {
  Tape<float> tape;
  ForwardInput in{&content, &reference_mel, &reference_voicing, nullptr};
  auto out = model.forward(tape, in, flags, rvq_options(flags, quant::CommitmentReduction::frame_sq_norm));
  Prediction p;
  p.mel = out.mel.value();
  p.pitch = model.pitch_track(out);
  p.aligned_style = out.aligned.value();
  return p;
}

Prediction infer(const Model<float>& model, const AblationFlags& flags, const std::vector<int>& content,
                 const signal::Waveform& reference, const signal::MelConfig& mel_cfg,
                 const signal::PitchConfig& pitch_cfg) {
  const auto mel = signal::mel_spectrogram(reference, mel_cfg);
  Tensor<float> m(Shape{mel.frames.frames, mel.frames.cols}, mel.frames.data);
  const auto voicing = signal::estimate_f0_vuv(reference, pitch_cfg).vuv;
  if (voicing.size() != m.rows()) throw std::runtime_error("infer: pitch frontend and mel disagree on frame count");
  return infer(model, flags, content, m, voicing);
}

}  // namespace spotkit::backbone
