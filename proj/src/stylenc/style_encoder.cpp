#include "spotkit/stylenc/style_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace spotkit::style {

VoicedIndex VoicedIndex::from_flags(const std::vector<bool>& vuv) {
  VoicedIndex idx;
  idx.total = vuv.size();
  for (std::size_t t = 0; t < vuv.size(); ++t) (vuv[t] ? idx.voiced : idx.unvoiced).push_back(static_cast<std::int64_t>(t));
  return idx;
}

VoicedIndex VoicedIndex::all_voiced(std::size_t T) {
  return from_flags(std::vector<bool>(T, true));
}

void VoicedIndex::validate() const {
  if (voiced.size() + unvoiced.size() != total) throw std::invalid_argument("VoicedIndex: lists do not partition [0, T)");
  std::vector<char> seen(total, 0);
  for (const auto* list : {&voiced, &unvoiced}) {
    for (std::size_t i = 0; i < list->size(); ++i) {
      const auto p = (*list)[i];
      if (p < 0 || static_cast<std::size_t>(p) >= total || seen[static_cast<std::size_t>(p)])
        throw std::invalid_argument("VoicedIndex: position out of range or repeated");
      if (i > 0 && (*list)[i - 1] >= p) throw std::invalid_argument("VoicedIndex: positions must be sorted");
      seen[static_cast<std::size_t>(p)] = 1;
    }
  }
}

template <typename Real>
PreNet<Real> PreNet<Real>::make(ParamStore<Real>& store, const std::string& name, const StyleConfig& cfg, Rng& rng) {
  PreNet p;
  const std::size_t d = cfg.dim;
  p.input = nn::Linear<Real>::make(store, name + ".input", cfg.mel_dim, d, rng);
  for (std::size_t i = 0; i < cfg.wavenet_dilations.size(); ++i) {
    const std::string base = name + ".wavenet" + std::to_string(i);
    const std::size_t dil = cfg.wavenet_dilations[i];
    WaveNetLayer<Real> l;
    l.filter = nn::Conv1d<Real>::make(store, base + ".filter", d, d, 3, dil, rng);
    l.gate = nn::Conv1d<Real>::make(store, base + ".gate", d, d, 3, dil, rng);
    l.residual = nn::Linear<Real>::make(store, base + ".residual", d, d, rng);
    l.skip = nn::Linear<Real>::make(store, base + ".skip", d, d, rng);
    p.wavenet.push_back(l);
  }
  for (std::size_t i = 0; i < cfg.prenet_blocks; ++i)
    p.blocks.push_back(nn::ConvResBlock<Real>::make(store, name + ".block" + std::to_string(i), d, 3, 1, rng));
  return p;
}

template <typename Real>
Var<Real> PreNet<Real>::operator()(Tape<Real>& tape, const Var<Real>& mel) const {
  if (mel.value().rank() != 2 || mel.rows() < 4)
    throw diff::ShapeError("pre_net: need at least 4 frames, got shape " + diff::to_string(mel.shape()));
  Var<Real> x = input(tape, mel);
  Var<Real> skips;
  for (const auto& l : wavenet) {
    auto z = diff::mul(diff::tanh(l.filter(tape, x)), diff::sigmoid(l.gate(tape, x)));
    x = diff::add(x, l.residual(tape, z));
    auto s = l.skip(tape, z);
    skips = skips.valid() ? diff::add(skips, s) : s;
  }
  if (skips.valid()) x = skips;
  for (const auto& b : blocks) x = b(tape, x);
  return x;
}

template <typename Real>
Var<Real> voiced_gather(const Var<Real>& features, const VoicedIndex& idx) {
  if (idx.total != features.rows())
    throw diff::ShapeError("voiced_gather: index covers " + std::to_string(idx.total) + " frames, features have " +
                           std::to_string(features.rows()));
  if (idx.voiced.empty()) throw std::invalid_argument("voiced_gather: no voiced frames");
  return diff::gather_rows<Real>(features, idx.voiced);
}

template <typename Real>
Var<Real> insert_mask_codes(Tape<Real>& tape, const Var<Real>& q_voiced, const VoicedIndex& idx,
                            const Var<Real>& mask_code) {
  (void)tape;
  if (q_voiced.rows() != idx.voiced.size())
    throw diff::ShapeError("insert_mask_codes: " + std::to_string(q_voiced.rows()) + " quantized rows for " +
                           std::to_string(idx.voiced.size()) + " voiced positions");
  if (mask_code.size() != q_voiced.cols()) throw diff::ShapeError("insert_mask_codes: mask code width mismatch");
  Var<Real> placed = diff::scatter_rows<Real>(q_voiced, idx.voiced, idx.total);
  if (idx.unvoiced.empty()) return placed;
  // Row 0 of the (1 x d) code at unvoiced positions, zero rows elsewhere.
  std::vector<std::int64_t> pick(idx.total, -1);
  for (auto p : idx.unvoiced) pick[static_cast<std::size_t>(p)] = 0;
  auto code = diff::reshape(mask_code, diff::Shape{1, mask_code.size()});
  return diff::add(placed, diff::gather_rows<Real>(code, pick));
}

template <typename Real>
std::vector<Real> key_weights(const VoicedIndex& idx, double beta_mask) {
  if (!(beta_mask >= 0 && beta_mask <= 1)) throw std::invalid_argument("beta_mask must lie in [0, 1]");
  std::vector<Real> beta(idx.total, Real(1));
  for (auto p : idx.unvoiced) beta[static_cast<std::size_t>(p)] = static_cast<Real>(beta_mask);
  return beta;
}

template <typename Real>
Attention<Real> Attention<Real>::make(ParamStore<Real>& store, const std::string& name, std::size_t dim,
                                      std::size_t heads, Rng& rng) {
  if (heads == 0 || dim % heads != 0) throw std::invalid_argument("Attention: dim must divide into heads");
  Attention a;
  const std::size_t dh = dim / heads;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::string base = heads == 1 ? name : name + ".head" + std::to_string(h);
    a.q.push_back(nn::Linear<Real>::make(store, base + ".q", dim, dh, rng, false, false));
    a.k.push_back(nn::Linear<Real>::make(store, base + ".k", dim, dh, rng, false, false));
    a.v.push_back(nn::Linear<Real>::make(store, base + ".v", dim, dh, rng, false, false));
    a.out.push_back(nn::Linear<Real>::make(store, base + ".out", dh, dim, rng, false, h == 0));
  }
  return a;
}

template <typename Real>
Var<Real> Attention<Real>::operator()(Tape<Real>& tape, const Var<Real>& x, const Var<Real>& kv,
                                      const std::vector<Real>& beta, bool renormalize,
                                      AttentionTrace<Real>* trace) const {
  const std::size_t Tk = kv.rows();
  if (!beta.empty() && beta.size() != Tk) throw diff::ShapeError("attention: beta length differs from key count");
  Var<Real> beta_row, log_beta;
  if (!beta.empty()) {
    if (renormalize) {
      // log(0) is replaced by a large negative constant so exp underflows to 0.
      Tensor<Real> lb(diff::Shape{1, Tk});
      for (std::size_t j = 0; j < Tk; ++j)
        lb[j] = beta[j] > 0 ? static_cast<Real>(std::log(static_cast<double>(beta[j]))) : Real(-1e9);
      log_beta = tape.constant(std::move(lb));
    } else {
      beta_row = tape.constant(Tensor<Real>(diff::Shape{1, Tk}, beta));
    }
  }
  Var<Real> y;
  for (std::size_t h = 0; h < q.size(); ++h) {
    const auto qh = q[h](tape, x), kh = k[h](tape, kv), vh = v[h](tape, kv);
    const Real inv = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(qh.cols())));
    auto scores = diff::scale(diff::matmul(qh, diff::transpose(kh)), inv);
    if (log_beta.valid()) scores = diff::add(scores, log_beta);
    auto weights = diff::softmax(scores);
    auto biased = beta_row.valid() ? diff::mul(weights, beta_row) : weights;
    if (trace) {
      trace->weights = weights;
      trace->biased = biased;
      trace->values = vh;
    }
    auto head = out[h](tape, diff::matmul(biased, vh));
    y = y.valid() ? diff::add(y, head) : head;
  }
  return y;
}

template <typename Real>
Var<Real> biased_self_attention(Tape<Real>& tape, const Attention<Real>& attn, const Var<Real>& x,
                                const VoicedIndex& idx, double beta_mask, bool renormalize,
                                AttentionTrace<Real>* trace) {
  if (idx.total != x.rows()) throw diff::ShapeError("biased_self_attention: index length differs from T");
  return attn(tape, x, x, key_weights<Real>(idx, beta_mask), renormalize, trace);
}

template <typename Real>
ConvNeXtBlock<Real> ConvNeXtBlock<Real>::make(ParamStore<Real>& store, const std::string& name, std::size_t dim,
                                              std::size_t kernel, Rng& rng, bool zero_project) {
  ConvNeXtBlock b;
  b.dw_weight = &store.add(name + ".dw.weight", nn::uniform_tensor<Real>({kernel, dim}, 1.0 / std::sqrt(kernel), rng));
  b.dw_bias = &store.add(name + ".dw.bias", Tensor<Real>(diff::Shape{dim}));
  b.norm = nn::LayerNormAffine<Real>::make(store, name + ".norm", dim);
  b.expand = nn::Linear<Real>::make(store, name + ".expand", dim, 4 * dim, rng);
  b.project = nn::Linear<Real>::make(store, name + ".project", 4 * dim, dim, rng, zero_project);
  return b;
}

template <typename Real>
Var<Real> ConvNeXtBlock<Real>::operator()(Tape<Real>& tape, const Var<Real>& x) const {
  auto h = diff::add(diff::depthwise_conv1d(x, tape.parameter(*dw_weight)), tape.parameter(*dw_bias));
  h = project(tape, diff::gelu(expand(tape, norm(tape, h))));
  return diff::add(x, h);
}

template <typename Real>
UfModule<Real> UfModule<Real>::make(ParamStore<Real>& store, const std::string& name, const StyleConfig& cfg,
                                    Rng& rng) {
  UfModule m;
  for (std::size_t i = 0; i < cfg.uf_blocks; ++i) {
    const std::string base = name + std::to_string(i);
    UfBlock<Real> b;
    b.convnext = ConvNeXtBlock<Real>::make(store, base + ".convnext", cfg.dim, cfg.convnext_kernel, rng);
    b.norm = nn::LayerNormAffine<Real>::make(store, base + ".attn_norm", cfg.dim);
    b.attention = Attention<Real>::make(store, base + ".attn", cfg.dim, cfg.heads, rng);
    m.blocks.push_back(b);
  }
  return m;
}

template <typename Real>
Var<Real> UfModule<Real>::operator()(Tape<Real>& tape, const Var<Real>& x, const VoicedIndex& idx, double beta_mask,
                                     bool renormalize) const {
  Var<Real> h = x;
  for (const auto& b : blocks) {
    h = b.convnext(tape, h);
    h = diff::add(h, biased_self_attention(tape, b.attention, b.norm(tape, h), idx, beta_mask, renormalize));
  }
  return h;
}

template <typename Real>
StyleAligner<Real> StyleAligner<Real>::make(ParamStore<Real>& store, const std::string& name, std::size_t dim,
                                            Rng& rng) {
  StyleAligner a;
  a.q = nn::Linear<Real>::make(store, name + ".q", dim, dim, rng, false, false);
  a.k = nn::Linear<Real>::make(store, name + ".k", dim, dim, rng, false, false);
  a.v = nn::Linear<Real>::make(store, name + ".v", dim, dim, rng, false, false);
  return a;
}

template <typename Real>
Var<Real> StyleAligner<Real>::operator()(Tape<Real>& tape, const Var<Real>& content, const Var<Real>& style) const {
  const auto qc = q(tape, content), ks = k(tape, style), vs = v(tape, style);
  const Real inv = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(qc.cols())));
  auto weights = diff::softmax(diff::scale(diff::matmul(qc, diff::transpose(ks)), inv));
  return diff::matmul(weights, vs);
}

template <typename Real>
Var<Real> align_style(Tape<Real>& tape, const StyleAligner<Real>& aligner, const Var<Real>& content,
                      const Var<Real>& style) {
  if (content.cols() != style.cols()) throw diff::ShapeError("align_style: content and style widths differ");
  return aligner(tape, content, style);
}

template <typename Real>
StyleEncoder<Real> StyleEncoder<Real>::make(ParamStore<Real>& store, const StyleConfig& cfg, Rng& rng) {
  StyleEncoder e;
  e.cfg = cfg;
  e.prenet = PreNet<Real>::make(store, "stylenc.prenet", cfg, rng);
  e.mask_code = &store.add("stylenc.mask_code", nn::uniform_tensor<Real>({1, cfg.dim}, cfg.mask_code_range, rng));
  e.uf = UfModule<Real>::make(store, "stylenc.uf", cfg, rng);
  e.aligner = StyleAligner<Real>::make(store, "stylenc.align", cfg.dim, rng);
  e.global = nn::Linear<Real>::make(store, "stylenc.global", cfg.mel_dim, cfg.dim, rng);
  return e;
}

template <typename Real>
StyleEmbedding<Real> StyleEncoder<Real>::encode(Tape<Real>& tape, const Var<Real>& mel, const VoicedIndex& idx,
                                                const quant::Codebook<Real>& codebook,
                                                const EncodeOptions& opts) const {
  idx.validate();
  if (idx.total != mel.rows()) throw diff::ShapeError("StyleEncoder: voicing flags do not match the mel length");
  StyleEmbedding<Real> out;
  out.index = idx;
  out.prenet = prenet(tape, mel);
  const auto gathered = voiced_gather(out.prenet, idx);
  out.quant = quant::rvq_encode(gathered, codebook, opts.rvq);
  auto full = insert_mask_codes(tape, out.quant.quantized, idx, tape.parameter(*mask_code));
  full = diff::add(full, tape.constant(nn::sinusoidal_positions<Real>(idx.total, cfg.dim)));
  out.frames = opts.use_uf ? uf(tape, full, idx, opts.beta_mask, opts.renormalize) : full;
  return out;
}

template <typename Real>
Var<Real> StyleEncoder<Real>::global_style(Tape<Real>& tape, const Var<Real>& mel) const {
  auto pooled = diff::reshape(diff::mean_axis(mel, 0), diff::Shape{1, mel.cols()});
  return global(tape, pooled);
}

#define SPOTKIT_INSTANTIATE_STYLE(R)                                                                        \
  template struct PreNet<R>;                                                                                \
  template Var<R> voiced_gather(const Var<R>&, const VoicedIndex&);                                         \
  template Var<R> insert_mask_codes(Tape<R>&, const Var<R>&, const VoicedIndex&, const Var<R>&);            \
  template std::vector<R> key_weights<R>(const VoicedIndex&, double);                                       \
  template struct Attention<R>;                                                                             \
  template Var<R> biased_self_attention(Tape<R>&, const Attention<R>&, const Var<R>&, const VoicedIndex&,   \
                                        double, bool, AttentionTrace<R>*);                                  \
  template struct ConvNeXtBlock<R>;                                                                         \
  template struct UfModule<R>;                                                                              \
  template struct StyleAligner<R>;                                                                          \
  template Var<R> align_style(Tape<R>&, const StyleAligner<R>&, const Var<R>&, const Var<R>&);              \
  template struct StyleEncoder<R>;

SPOTKIT_INSTANTIATE_STYLE(float)
SPOTKIT_INSTANTIATE_STYLE(double)

}  // namespace spotkit::style
