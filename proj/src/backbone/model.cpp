#include "spotkit/backbone/model.hpp"

#include <cmath>
#include <stdexcept>

namespace spotkit::style {

void to_json(nlohmann::json& j, const StyleConfig& c) {
  j = {{"wavenet_dilations", c.wavenet_dilations},
       {"prenet_blocks", c.prenet_blocks},
       {"uf_blocks", c.uf_blocks},
       {"heads", c.heads},
       {"convnext_kernel", c.convnext_kernel},
       {"renormalize", c.renormalize},
       {"mask_code_range", c.mask_code_range}};
}

void from_json(const nlohmann::json& j, StyleConfig& c) {
  c.wavenet_dilations = j.value("wavenet_dilations", c.wavenet_dilations);
  c.prenet_blocks = j.value("prenet_blocks", c.prenet_blocks);
  c.uf_blocks = j.value("uf_blocks", c.uf_blocks);
  c.heads = j.value("heads", c.heads);
  c.convnext_kernel = j.value("convnext_kernel", c.convnext_kernel);
  c.renormalize = j.value("renormalize", c.renormalize);
  c.mask_code_range = j.value("mask_code_range", c.mask_code_range);
}

}  // namespace spotkit::style

namespace spotkit::backbone {

using diff::Shape;

style::StyleConfig ModelConfig::style_config() const {
  auto s = style;
  s.mel_dim = mel_dim;
  s.dim = dim;
  return s;
}

void ModelConfig::validate() const {
  if (dim == 0 || mel_dim == 0 || n_symbols == 0) throw std::invalid_argument("model config: zero dimension");
  if (kernel % 2 == 0) throw std::invalid_argument("model config: kernel must be odd");
  if (codebook_size < 2 || rvq_depth == 0) throw std::invalid_argument("model config: codebook too small");
  if (mel_dim < obj::ProsodyProjector<float>::kMelBins) {
    throw std::invalid_argument("model config: need at least 20 mel bins for the prosody branch");
  }
  if (style.heads == 0 || dim % style.heads != 0) throw std::invalid_argument("model config: heads must divide dim");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_symbols", c.n_symbols},         {"mel_dim", c.mel_dim},
       {"dim", c.dim},                     {"content_blocks", c.content_blocks},
       {"decoder_blocks", c.decoder_blocks}, {"kernel", c.kernel},
       {"codebook_size", c.codebook_size}, {"rvq_depth", c.rvq_depth},
       {"style", c.style}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.n_symbols = j.value("n_symbols", c.n_symbols);
  c.mel_dim = j.value("mel_dim", c.mel_dim);
  c.dim = j.value("dim", c.dim);
  c.content_blocks = j.value("content_blocks", c.content_blocks);
  c.decoder_blocks = j.value("decoder_blocks", c.decoder_blocks);
  c.kernel = j.value("kernel", c.kernel);
  c.codebook_size = j.value("codebook_size", c.codebook_size);
  c.rvq_depth = j.value("rvq_depth", c.rvq_depth);
  if (j.contains("style")) j.at("style").get_to(c.style);
}

void to_json(nlohmann::json& j, const AblationFlags& f) {
  j = {{"use_rt", f.use_rt}, {"use_uf", f.use_uf}, {"use_ve", f.use_ve},
       {"use_sd", f.use_sd}, {"use_sp", f.use_sp}, {"beta_mask", f.beta_mask}};
}

void from_json(const nlohmann::json& j, AblationFlags& f) {
  f.use_rt = j.value("use_rt", f.use_rt);
  f.use_uf = j.value("use_uf", f.use_uf);
  f.use_ve = j.value("use_ve", f.use_ve);
  f.use_sd = j.value("use_sd", f.use_sd);
  f.use_sp = j.value("use_sp", f.use_sp);
  f.beta_mask = j.value("beta_mask", f.beta_mask);
}

Sample make_sample(const corpus::SynthUtterance& utt, const signal::PitchConfig& pitch_cfg, std::string id,
                   int sentence_id) {
  Sample s;
  s.id = std::move(id);
  s.style_id = utt.style_id;
  s.sentence_id = sentence_id;
  const auto& fm = utt.mel.frames;
  s.mel = Tensor<float>(Shape{fm.frames, fm.cols}, fm.data);
  s.content = utt.content_frames;
  s.pitch = utt.pitch;
  s.style_voicing = signal::estimate_f0_vuv(utt.waveform, pitch_cfg).vuv;
  if (s.content.size() != fm.frames || s.pitch.size() != fm.frames || s.style_voicing.size() != fm.frames) {
    throw std::runtime_error("utterance " + s.id + ": mel, pitch and content lengths disagree");
  }
  return s;
}

Dataset load_dataset(const corpus::Manifest& manifest) {
  Dataset ds;
  for (const auto& e : manifest.entries) {
    auto s = make_sample(corpus::load_utterance(manifest, e), manifest.config.pitch, e.id, e.sentence_id);
    s.split = e.split;
    (e.split == "test" ? ds.test : ds.train).push_back(std::move(s));
  }
  if (ds.train.empty()) throw std::runtime_error("dataset: manifest has no training utterances");
  return ds;
}

NormStats NormStats::fit(const std::vector<Sample>& samples, std::size_t mel_dim) {
  NormStats st;
  st.mel_mean.assign(mel_dim, 0.0);
  st.mel_std.assign(mel_dim, 0.0);
  std::size_t frames = 0;
  double lsum = 0, lsq = 0;
  std::size_t voiced = 0;
  for (const auto& s : samples) {
    if (s.mel.cols() != mel_dim) throw std::invalid_argument("NormStats: mel width mismatch in " + s.id);
    for (std::size_t t = 0; t < s.mel.rows(); ++t)
      for (std::size_t c = 0; c < mel_dim; ++c) {
        const double v = s.mel(t, c);
        st.mel_mean[c] += v;
        st.mel_std[c] += v * v;
      }
    frames += s.mel.rows();
    for (std::size_t t = 0; t < s.pitch.size(); ++t) {
      if (!s.pitch.vuv[t] || s.pitch.f0_hz[t] <= 0) continue;
      const double l = std::log(s.pitch.f0_hz[t]);
      lsum += l;
      lsq += l * l;
      ++voiced;
    }
  }
  if (frames == 0) throw std::invalid_argument("NormStats: no frames");
  for (std::size_t c = 0; c < mel_dim; ++c) {
    st.mel_mean[c] /= static_cast<double>(frames);
    const double var = st.mel_std[c] / static_cast<double>(frames) - st.mel_mean[c] * st.mel_mean[c];
    st.mel_std[c] = std::max(std::sqrt(std::max(var, 0.0)), 1e-3);
  }
  if (voiced > 0) {
    st.logf0_mean = lsum / static_cast<double>(voiced);
    const double var = lsq / static_cast<double>(voiced) - st.logf0_mean * st.logf0_mean;
    st.logf0_std = std::max(std::sqrt(std::max(var, 0.0)), 1e-3);
  }
  return st;
}

template <typename Real>
ContentEncoder<Real> ContentEncoder<Real>::make(ParamStore<Real>& store, const ModelConfig& cfg, Rng& rng) {
  ContentEncoder e;
  e.table = &store.add("content.table", nn::uniform_tensor<Real>(Shape{cfg.n_symbols, cfg.dim}, 1.0, rng));
  for (std::size_t i = 0; i < cfg.content_blocks; ++i) {
    e.blocks.push_back(
        nn::ConvResBlock<Real>::make(store, "content.block" + std::to_string(i), cfg.dim, cfg.kernel, 1, rng));
  }
  return e;
}

template <typename Real>
Var<Real> ContentEncoder<Real>::operator()(Tape<Real>& tape, const std::vector<int>& symbols) const {
  std::vector<std::int64_t> idx(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (symbols[i] < 0 || static_cast<std::size_t>(symbols[i]) >= table->rows()) {
      throw std::out_of_range("content encoder: symbol " + std::to_string(symbols[i]) + " outside the table");
    }
    idx[i] = symbols[i];
  }
  auto h = diff::gather_rows<Real>(tape.parameter(*table), idx);
  h = diff::add(h, tape.constant(nn::sinusoidal_positions<Real>(symbols.size(), table->cols())));
  for (const auto& b : blocks) h = b(tape, h);
  return h;
}

template <typename Real>
VarianceAdaptor<Real> VarianceAdaptor<Real>::make(ParamStore<Real>& store, const ModelConfig& cfg, Rng& rng) {
  VarianceAdaptor a;
  a.conv1 = nn::Conv1d<Real>::make(store, "adaptor.pitch.conv1", cfg.dim, cfg.dim, cfg.kernel, 1, rng);
  a.norm = nn::LayerNormAffine<Real>::make(store, "adaptor.pitch.norm", cfg.dim);
  a.conv2 = nn::Conv1d<Real>::make(store, "adaptor.pitch.conv2", cfg.dim, 2, cfg.kernel, 1, rng);
  a.pitch_embed = nn::Linear<Real>::make(store, "adaptor.pitch_embed", 2, cfg.dim, rng);
  return a;
}

template <typename Real>
Var<Real> VarianceAdaptor<Real>::predict(Tape<Real>& tape, const Var<Real>& x) const {
  return conv2(tape, norm(tape, diff::gelu(conv1(tape, x))));
}

template <typename Real>
Decoder<Real> Decoder<Real>::make(ParamStore<Real>& store, const ModelConfig& cfg, Rng& rng) {
  Decoder d;
  for (std::size_t i = 0; i < cfg.decoder_blocks; ++i) {
    d.blocks.push_back(
        nn::ConvResBlock<Real>::make(store, "decoder.block" + std::to_string(i), cfg.dim, cfg.kernel, 1, rng));
  }
  d.norm = nn::LayerNormAffine<Real>::make(store, "decoder.norm", cfg.dim);
  d.out = nn::Linear<Real>::make(store, "decoder.out", cfg.dim, cfg.mel_dim, rng, true);
  return d;
}

template <typename Real>
Var<Real> Decoder<Real>::operator()(Tape<Real>& tape, const Var<Real>& x) const {
  auto h = x;
  for (const auto& b : blocks) h = b(tape, h);
  return out(tape, norm(tape, h));
}

template <typename Real>
Model<Real> Model<Real>::make(ParamStore<Real>& store, const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  m.content = ContentEncoder<Real>::make(store, cfg, rng);
  m.style = style::StyleEncoder<Real>::make(store, cfg.style_config(), rng);
  m.adaptor = VarianceAdaptor<Real>::make(store, cfg, rng);
  m.decoder = Decoder<Real>::make(store, cfg, rng);
  m.projector = obj::ProsodyProjector<Real>::make(store, "objectives.prosody", cfg.dim, rng);
  m.codebook = quant::Codebook<Real>(cfg.rvq_depth, cfg.codebook_size, cfg.dim);
  m.codebook.write_to(store);
  m.mel_mean = &store.add("stats.mel_mean", Tensor<Real>(Shape{1, cfg.mel_dim}, Real(0)), false);
  m.mel_std = &store.add("stats.mel_std", Tensor<Real>(Shape{1, cfg.mel_dim}, Real(1)), false);
  m.logf0_stats = &store.add("stats.logf0", Tensor<Real>(Shape{2}, std::vector<Real>{Real(0), Real(1)}), false);
  return m;
}

template <typename Real>
void Model<Real>::set_stats(const NormStats& st) {
  if (st.mel_mean.size() != cfg.mel_dim) throw std::invalid_argument("set_stats: mel width mismatch");
  for (std::size_t c = 0; c < cfg.mel_dim; ++c) {
    (*mel_mean)[c] = static_cast<Real>(st.mel_mean[c]);
    (*mel_std)[c] = static_cast<Real>(st.mel_std[c]);
  }
  (*logf0_stats)[0] = static_cast<Real>(st.logf0_mean);
  (*logf0_stats)[1] = static_cast<Real>(st.logf0_std);
}

template <typename Real>
void Model<Real>::sync_to(ParamStore<Real>& store) const {
  codebook.write_to(store);
}

template <typename Real>
void Model<Real>::sync_from(const ParamStore<Real>& store) {
  codebook.read_from(store);
}

template <typename Real>
Tensor<Real> Model<Real>::normalize_mel(const Tensor<float>& mel) const {
  if (mel.rank() != 2 || mel.cols() != cfg.mel_dim) {
    throw diff::ShapeError("model: reference mel must be T x " + std::to_string(cfg.mel_dim) + ", got " +
                           diff::to_string(mel.shape()));
  }
  Tensor<Real> out(mel.shape());
  for (std::size_t t = 0; t < mel.rows(); ++t)
    for (std::size_t c = 0; c < mel.cols(); ++c) out(t, c) = (Real(mel(t, c)) - (*mel_mean)[c]) / (*mel_std)[c];
  return out;
}

template <typename Real>
PitchTarget Model<Real>::pitch_target(const signal::PitchTrack& track) const {
  PitchTarget p;
  p.z.assign(track.size(), 0.0);
  p.voiced = track.vuv;
  const double mu = (*logf0_stats)[0], sd = (*logf0_stats)[1];
  for (std::size_t t = 0; t < track.size(); ++t) {
    if (track.vuv[t] && track.f0_hz[t] > 0) p.z[t] = (std::log(track.f0_hz[t]) - mu) / sd;
  }
  return p;
}

template <typename Real>
signal::PitchTrack Model<Real>::pitch_track(const ForwardOutput<Real>& out) const {
  const std::size_t T = out.logf0_z.size();
  const double mu = (*logf0_stats)[0], sd = (*logf0_stats)[1];
  signal::PitchTrack tr;
  tr.f0_hz.assign(T, 0.0);
  tr.vuv.assign(T, false);
  tr.periodicity.assign(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const double p = out.periodicity.value()[t];
    tr.periodicity[t] = p;
    if (p >= 0.5) {
      tr.vuv[t] = true;
      tr.f0_hz[t] = std::exp(out.logf0_z.value()[t] * sd + mu);
    }
  }
  return tr;
}

quant::RvqOptions rvq_options(const AblationFlags& flags, quant::CommitmentReduction reduction) {
  quant::RvqOptions o;
  o.mode = flags.use_rt ? quant::QuantMode::rotation_trick : quant::QuantMode::straight_through;
  o.reduction = reduction;
  return o;
}

style::VoicedIndex style_index(const std::vector<bool>& voicing, const AblationFlags& flags) {
  if (!flags.use_ve) return style::VoicedIndex::all_voiced(voicing.size());
  auto idx = style::VoicedIndex::from_flags(voicing);
  if (idx.voiced.empty()) throw std::invalid_argument("style reference has no voiced frames");
  return idx;
}

template <typename Real>
ForwardOutput<Real> Model<Real>::forward(Tape<Real>& tape, const ForwardInput& in, const AblationFlags& flags,
                                         const quant::RvqOptions& rvq) const {
  if (!in.content || !in.style_mel || !in.style_voicing) throw std::invalid_argument("forward: missing input");
  if (in.style_voicing->size() != in.style_mel->rows()) {
    throw diff::ShapeError("forward: voicing flags do not match the reference mel length");
  }
  ForwardOutput<Real> out;
  const std::size_t n = in.content->size();
  out.content = content(tape, *in.content);
  out.style_mel_norm = tape.constant(normalize_mel(*in.style_mel));

  style::EncodeOptions eo;
  eo.rvq = rvq;
  eo.use_uf = flags.use_uf;
  eo.beta_mask = flags.beta_mask;
  eo.renormalize = cfg.style.renormalize;
  out.style = style.encode(tape, out.style_mel_norm, style_index(*in.style_voicing, flags), codebook, eo);
  // The alignment query reads a detached copy so that no style-side loss reaches the content encoder.
  out.aligned = style::align_style(tape, style.aligner, diff::stop_gradient(out.content), out.style.frames);
  out.global = style.global_style(tape, out.style_mel_norm);

  auto h = diff::add(out.content, out.aligned);
  auto raw = adaptor.predict(tape, h);
  out.logf0_z = diff::matmul(raw, tape.constant(Tensor<Real>(Shape{2, 1}, std::vector<Real>{1, 0})));
  out.periodicity =
      diff::sigmoid(diff::matmul(raw, tape.constant(Tensor<Real>(Shape{2, 1}, std::vector<Real>{0, 1}))));

  Tensor<Real> feat(Shape{n, 2});
  if (in.teacher) {
    if (in.teacher->z.size() != n) throw diff::ShapeError("forward: teacher pitch length mismatch");
    for (std::size_t t = 0; t < n; ++t) {
      const Real v = in.teacher->voiced[t] ? Real(1) : Real(0);
      feat(t, 0) = static_cast<Real>(in.teacher->z[t]) * v;
      feat(t, 1) = v;
    }
  } else {
    for (std::size_t t = 0; t < n; ++t) {
      const Real v = out.periodicity.value()[t] >= Real(0.5) ? Real(1) : Real(0);
      feat(t, 0) = out.logf0_z.value()[t] * v;
      feat(t, 1) = v;
    }
  }
  auto a = diff::add(diff::add(h, adaptor.pitch_embed(tape, tape.constant(std::move(feat)))), out.global);
  auto dec = decoder(tape, a);
  out.mel = diff::add(diff::mul(dec, tape.constant(*mel_std)), tape.constant(*mel_mean));
  return out;
}

template struct ContentEncoder<float>;
template struct ContentEncoder<double>;
template struct VarianceAdaptor<float>;
template struct VarianceAdaptor<double>;
template struct Decoder<float>;
template struct Decoder<double>;
template struct Model<float>;
template struct Model<double>;

}  // namespace spotkit::backbone
