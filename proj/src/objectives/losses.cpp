#include "spotkit/objectives/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace spotkit::obj {

using diff::Shape;

namespace {

template <typename Real>
Var<Real> as_column(const Var<Real>& x) {
  if (x.value().rank() == 2 && x.cols() == 1) return x;
  return diff::reshape(x, Shape{x.size(), 1});
}

// x / max(|x|, eps) per row.
template <typename Real>
Var<Real> unit_rows(const Var<Real>& x) {
  const auto& xv = x.value();
  const std::size_t rows = x.rows(), c = x.cols();
  Tensor<Real> out(xv.shape());
  std::vector<Real> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    Real ss = 0;
    for (std::size_t j = 0; j < c; ++j) ss += xv(r, j) * xv(r, j);
    norms[r] = std::max(std::sqrt(ss), Real(1e-8));
    for (std::size_t j = 0; j < c; ++j) out(r, j) = xv(r, j) / norms[r];
  }
  const std::size_t id = x.id();
  return x.tape()->record("unit_rows", std::move(out), {x}, [=](Tape<Real>& t, std::size_t self) {
    const Real* g = t.grad(self).data();
    const Real* y = t.value(self).data();
    Real* gx = t.grad(id).data();
    for (std::size_t r = 0; r < rows; ++r) {
      Real yg = 0;
      for (std::size_t j = 0; j < c; ++j) yg += y[r * c + j] * g[r * c + j];
      const bool clamped = norms[r] <= Real(1e-8);
      for (std::size_t j = 0; j < c; ++j) {
        const Real gj = clamped ? g[r * c + j] : g[r * c + j] - y[r * c + j] * yg;
        gx[r * c + j] += gj / norms[r];
      }
    }
  });
}

}  // namespace

template <typename Real>
Var<Real> style_disentanglement_loss(const Var<Real>& content, const Var<Real>& style, const SdOptions& opts) {
  if (content.rows() != style.rows() || content.cols() != style.cols()) {
    throw diff::ShapeError("style_disentanglement_loss: content " + diff::to_string(content.shape()) + " vs style " +
                           diff::to_string(style.shape()));
  }
  auto c = diff::stop_gradient(content);
  auto s = style;
  if (opts.row_normalize) {
    c = unit_rows(c);
    s = unit_rows(s);
  }
  auto prod = diff::matmul(c, diff::transpose(s));
  auto l = diff::sum(diff::mul(prod, prod));
  if (opts.normalize) {
    const auto n = static_cast<Real>(content.rows());
    l = diff::scale(l, Real(1) / (n * n));
  }
  return l;
}

template <typename Real>
ProsodyProjector<Real> ProsodyProjector<Real>::make(ParamStore<Real>& store, const std::string& name,
                                                    std::size_t style_dim, Rng& rng) {
  ProsodyProjector p;
  p.mel = nn::Mlp<Real>::make(store, name + ".mel", kMelBins, kOutDim, kOutDim, rng);
  p.style = nn::Mlp<Real>::make(store, name + ".style", style_dim, kOutDim, kOutDim, rng);
  return p;
}

template <typename Real>
Var<Real> negative_cosine_sum(const Var<Real>& p, const Var<Real>& s, SpReduction reduction) {
  if (p.rows() != s.rows()) {
    throw diff::ShapeError("style_preserving_loss: " + std::to_string(p.rows()) + " mel frames vs " +
                           std::to_string(s.rows()) + " style frames");
  }
  auto cos = diff::cosine_similarity(p, s, Real(1e-8));
  auto total = reduction == SpReduction::mean ? diff::mean(cos) : diff::sum(cos);
  return diff::scale(total, Real(-1));
}

template <typename Real>
Var<Real> style_preserving_loss(Tape<Real>& tape, const Var<Real>& mel_low, const Var<Real>& style,
                                const ProsodyProjector<Real>& proj, SpReduction reduction) {
  if (mel_low.rows() != style.rows()) {
    throw diff::ShapeError("style_preserving_loss: " + std::to_string(mel_low.rows()) + " mel frames vs " +
                           std::to_string(style.rows()) + " style frames");
  }
  return negative_cosine_sum(proj.mel(tape, mel_low), proj.style(tape, style), reduction);
}

template <typename Real>
Fs2Terms<Real> fs2_losses(Tape<Real>& tape, const Var<Real>& mel_pred, const Tensor<Real>& mel_gt,
                          const Var<Real>& logf0_pred, const std::vector<Real>& logf0_gt,
                          const std::vector<bool>& vuv_gt, const Var<Real>& periodicity_pred,
                          const std::vector<Real>& periodicity_gt, const Fs2Options& opts) {
  if (mel_pred.shape() != mel_gt.shape()) {
    throw diff::ShapeError("fs2_losses: mel " + diff::to_string(mel_pred.shape()) + " vs target " +
                           diff::to_string(mel_gt.shape()));
  }
  const std::size_t T = mel_gt.rows();
  if (logf0_pred.size() != T || logf0_gt.size() != T || vuv_gt.size() != T) {
    throw diff::ShapeError("fs2_losses: pitch tracks must have " + std::to_string(T) + " frames");
  }
  Fs2Terms<Real> out;
  out.mel_l1 = diff::mean(diff::abs(diff::sub(mel_pred, tape.constant(mel_gt))));

  std::vector<std::int64_t> voiced;
  for (std::size_t t = 0; t < T; ++t)
    if (vuv_gt[t]) voiced.push_back(static_cast<std::int64_t>(t));
  if (voiced.empty()) {
    std::clog << "warning: fs2_losses: no voiced frames, pitch term is 0\n";
    out.pitch_skipped = true;
    out.pitch_mse = tape.constant(Tensor<Real>::scalar(0));
  } else {
    Tensor<Real> target(Shape{voiced.size(), 1});
    for (std::size_t i = 0; i < voiced.size(); ++i) target[i] = logf0_gt[static_cast<std::size_t>(voiced[i])];
    auto d = diff::sub(diff::gather_rows<Real>(as_column(logf0_pred), voiced), tape.constant(target));
    out.pitch_mse = diff::mean(diff::mul(d, d));
  }
  out.total = diff::add(out.mel_l1, out.pitch_mse);

  if (periodicity_pred.valid() && opts.periodicity_weight > 0) {
    if (periodicity_pred.size() != T || periodicity_gt.size() != T) {
      throw diff::ShapeError("fs2_losses: periodicity tracks must have " + std::to_string(T) + " frames");
    }
    Tensor<Real> target(Shape{T, 1}, std::vector<Real>(periodicity_gt.begin(), periodicity_gt.end()));
    auto d = diff::sub(as_column(periodicity_pred), tape.constant(target));
    out.periodicity_mse = diff::mean(diff::mul(d, d));
    out.total = diff::add(out.total, diff::scale(out.periodicity_mse, static_cast<Real>(opts.periodicity_weight)));
  }
  return out;
}

void LossWeights::validate() const {
  const std::pair<const char*, double> ws[] = {{"rvq", rvq}, {"adv", adv}, {"sd", sd}, {"sp", sp}};
  for (const auto& [name, v] : ws) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument(std::string("loss weight ") + name + " must be finite and non-negative");
    }
  }
}

LossBundle total_loss(double l_fs2, double l_rvq, double l_adv, double l_sd, double l_sp, const LossWeights& w) {
  w.validate();
  const std::pair<const char*, double> parts[] = {
      {"l_fs2", l_fs2}, {"l_rvq", l_rvq}, {"l_adv", l_adv}, {"l_sd", l_sd}, {"l_sp", l_sp}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) throw std::domain_error(std::string("total_loss: component ") + name + " is not finite");
  }
  LossBundle b{l_fs2, l_rvq, l_adv, l_sd, l_sp, 0.0};
  b.total = l_fs2 + w.rvq * l_rvq + w.adv * l_adv + w.sd * l_sd + w.sp * l_sp;
  return b;
}

template <typename Real>
WeightedLoss<Real> total_loss(Tape<Real>& tape, const LossTerms<Real>& terms, const LossWeights& w) {
  auto value = [](const Var<Real>& v) { return v.valid() ? static_cast<double>(v.value().item()) : 0.0; };
  WeightedLoss<Real> out;
  out.bundle = total_loss(value(terms.l_fs2), value(terms.l_rvq), value(terms.l_adv), value(terms.l_sd),
                          value(terms.l_sp), w);

  Var<Real> total = terms.l_fs2.valid() ? terms.l_fs2 : tape.constant(Tensor<Real>::scalar(0));
  const std::pair<const Var<Real>*, double> rest[] = {
      {&terms.l_rvq, w.rvq}, {&terms.l_adv, w.adv}, {&terms.l_sd, w.sd}, {&terms.l_sp, w.sp}};
  for (const auto& [v, weight] : rest) {
    if (!v->valid() || weight == 0.0) continue;
    total = diff::add(total, diff::scale(*v, static_cast<Real>(weight)));
  }
  out.total = total;
  return out;
}

LossCsv::LossCsv(const std::filesystem::path& path, bool append, long first_step) : path_(path) {
  std::vector<std::string> keep;
  if (append && std::filesystem::exists(path)) {
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stol(line.substr(0, line.find(','))) >= first_step) break;
      keep.push_back(line);
    }
  }
  out_.open(path, std::ios::trunc);
  if (!out_) throw std::runtime_error("cannot write loss log " + path.string());
  out_ << kHeader << '\n';
  for (const auto& l : keep) out_ << l << '\n';
  out_.flush();
}

void LossCsv::write(long step, const LossBundle& b) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%ld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", step, b.l_fs2, b.l_rvq, b.l_adv, b.l_sd,
                b.l_sp, b.total);
  out_ << buf;
  out_.flush();
  if (!out_) throw std::runtime_error("write failed on loss log " + path_.string());
}

std::vector<LossCsv::Row> LossCsv::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read loss log " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kHeader) throw std::runtime_error("unexpected loss log header in " + path.string());
  std::vector<Row> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    Row r{};
    char c;
    ss >> r.step >> c >> r.bundle.l_fs2 >> c >> r.bundle.l_rvq >> c >> r.bundle.l_adv >> c >> r.bundle.l_sd >> c >>
        r.bundle.l_sp >> c >> r.bundle.total;
    if (!ss) throw std::runtime_error("malformed loss log row in " + path.string() + ": " + line);
    rows.push_back(r);
  }
  return rows;
}

#define SPOTKIT_OBJ_INSTANTIATE(R)                                                                                  \
  template Var<R> style_disentanglement_loss<R>(const Var<R>&, const Var<R>&, const SdOptions&);                   \
  template struct ProsodyProjector<R>;                                                                              \
  template Var<R> negative_cosine_sum<R>(const Var<R>&, const Var<R>&, SpReduction);                               \
  template Var<R> style_preserving_loss<R>(Tape<R>&, const Var<R>&, const Var<R>&, const ProsodyProjector<R>&,     \
                                           SpReduction);                                                            \
  template Fs2Terms<R> fs2_losses<R>(Tape<R>&, const Var<R>&, const Tensor<R>&, const Var<R>&,                     \
                                     const std::vector<R>&, const std::vector<bool>&, const Var<R>&,                \
                                     const std::vector<R>&, const Fs2Options&);                                     \
  template WeightedLoss<R> total_loss<R>(Tape<R>&, const LossTerms<R>&, const LossWeights&);

SPOTKIT_OBJ_INSTANTIATE(float)
SPOTKIT_OBJ_INSTANTIATE(double)

}  // namespace spotkit::obj
