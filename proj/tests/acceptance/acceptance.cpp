// Acceptance run: one PASS/FAIL line per criterion, details indented above it.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <set>

#include <Eigen/Dense>

#include "spotkit/backbone/trainer.hpp"
#include "spotkit/eval/experiment.hpp"
#include "spotkit/eval/gradcheck_suite.hpp"
#include "spotkit/eval/metrics.hpp"
#include "spotkit/eval/probe.hpp"

namespace fs = std::filesystem;
using namespace spotkit;
using diff::Shape;
using diff::Tape;
using diff::Tensor;
using diff::Var;
using clk = std::chrono::steady_clock;

namespace {

double seconds_since(clk::time_point t) { return std::chrono::duration<double>(clk::now() - t).count(); }

struct Verdict {
  int id;
  bool pass;
  std::string summary;
};

std::vector<Verdict> verdicts;

struct Finished {};

void detail(const char* fmt, auto... args) {
  std::printf("    ");
  std::printf(fmt, args...);
  std::printf("\n");
  std::fflush(stdout);
}

void report(int id, bool pass, const std::string& summary) {
  std::printf("criterion %2d: %s  %s\n", id, pass ? "PASS" : "FAIL", summary.c_str());
  std::fflush(stdout);
  verdicts.push_back({id, pass, summary});
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// 1-2: rotation trick

struct Pair {
  std::vector<double> e, q;
};

std::vector<Pair> random_pairs(std::size_t dim, std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0, 1);
  std::uniform_real_distribution<double> scale(0.1, 10.0);
  std::vector<Pair> out(n);
  for (auto& p : out) {
    p.e.resize(dim);
    p.q.resize(dim);
    const double se = scale(rng), sq = scale(rng);
    for (auto& v : p.e) v = se * g(rng);
    for (auto& v : p.q) v = sq * g(rng);
  }
  return out;
}

template <typename Real>
double rt_forward_error(const std::vector<Pair>& pairs, std::size_t dim) {
  const std::size_t n = pairs.size();
  Tensor<Real> e(Shape{n, dim}), q(Shape{n, dim});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < dim; ++k) {
      e(i, k) = static_cast<Real>(pairs[i].e[k]);
      q(i, k) = static_cast<Real>(pairs[i].q[k]);
    }
  Tape<Real> tape;
  const auto y = quant::rt_forward(tape.variable(e), q).value();
  double worst = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double num = 0, den = 0;
    for (std::size_t k = 0; k < dim; ++k) {
      num += std::pow(double(y(i, k)) - double(q(i, k)), 2);
      den += std::pow(double(q(i, k)), 2);
    }
    worst = std::max(worst, std::sqrt(num / den));
  }
  return worst;
}

void criteria_1_2(std::uint64_t seed) {
  const std::size_t dims[] = {2, 8, 64, 256};
  const std::size_t per_dim = 2500;  // 10k pairs in total
  std::mt19937_64 rng(seed);
  std::vector<std::vector<Pair>> sets;
  for (auto d : dims) sets.push_back(random_pairs(d, per_dim, rng));

  const auto t0 = clk::now();
  double e32 = 0, e64 = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const double a = rt_forward_error<float>(sets[i], dims[i]);
    const double b = rt_forward_error<double>(sets[i], dims[i]);
    detail("d=%zu: max rel error %.3e (32-bit), %.3e (64-bit)", dims[i], a, b);
    e32 = std::max(e32, a);
    e64 = std::max(e64, b);
  }
  const double t1 = seconds_since(t0);
  report(1, e32 <= 1e-5 && e64 <= 1e-10 && t1 < 10.0,
         fmt("rotation-trick forward == q: max rel err %.2e (32-bit, tol 1e-5), %.2e (64-bit, tol 1e-10), %.2fs", e32, e64, t1));

  double align = 0, ortho = 0, ident = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto d = static_cast<Eigen::Index>(dims[i]);
    for (const auto& p : sets[i]) {
      const auto r = quant::rotation_matrix(p.e, p.q);
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> R(r.data(), d, d);
      Eigen::Map<const Eigen::VectorXd> e(p.e.data(), d), q(p.q.data(), d);
      align = std::max(align, (R * e.normalized() - q.normalized()).norm());
      ortho = std::max(ortho, (R.transpose() * R - Eigen::MatrixXd::Identity(d, d)).norm());
    }
    for (std::size_t k = 0; k < 50; ++k) {
      const auto& e = sets[i][k].e;
      const auto r = quant::rotation_matrix(e, e);
      for (Eigen::Index a = 0; a < d; ++a)
        for (Eigen::Index b = 0; b < d; ++b) ident = std::max(ident, std::abs(r[std::size_t(a * d + b)] - (a == b ? 1.0 : 0.0)));
    }
  }
  detail("max ||R e^ - q^|| = %.3e, max ||R^T R - I||_F = %.3e, e == q: max |R - I| = %.3e", align, ortho, ident);
  report(2, align <= 1e-8 && ortho <= 1e-8 && ident <= 1e-12,
         fmt("rotation properties: align %.2e, orthogonality %.2e (tol 1e-8), identity %.2e (tol 1e-12)", align, ortho, ident));
}

// ---------------------------------------------------------------------------
// 3: gradient suite

void criterion_3(std::uint64_t seed) {
  eval::FdSuiteOptions o;
  o.bits = 64;
  o.seed = seed;
  const auto t0 = clk::now();
  const auto results = eval::run_fd_suite(o);
  const double t = seconds_since(t0);
  bool ok = true;
  std::string worst_name;
  double worst_ratio = 0;
  for (const auto& r : results) {
    detail("%-30s %.3e (tol %.0e)", r.name.c_str(), r.max_rel_error, r.tolerance);
    ok = ok && r.passed();
    if (r.max_rel_error / r.tolerance > worst_ratio) {
      worst_ratio = r.max_rel_error / r.tolerance;
      worst_name = r.name;
    }
  }
  report(3, ok && t < 120.0,
         fmt("finite differences: %zu entries, worst %s at %.1e of tolerance, %.1fs", results.size(), worst_name.c_str(),
             worst_ratio, t));
}

// ---------------------------------------------------------------------------
// 4: detachment

void criterion_4(const backbone::Model<float>& model, const diff::ParamStore<float>& store_in,
                 const backbone::TrainerConfig& cfg, const backbone::Dataset& data) {
  auto& store = const_cast<diff::ParamStore<float>&>(store_in);
  std::size_t params = 0, nonzero = 0;
  double style_grad = 0;
  for (std::size_t u = 0; u < 8; ++u) {
    const auto& s = data.train[u * 7 % data.train.size()];
    Tape<float> tape;
    backbone::ForwardInput in{&s.content, &s.mel, &s.style_voicing, nullptr};
    auto out = model.forward(tape, in, cfg.flags, backbone::rvq_options(cfg.flags, cfg.commitment));
    store.zero_grad();
    tape.backward(obj::style_disentanglement_loss(out.content, out.aligned, cfg.sd));
    for (auto& e : store) {
      if (!e.tensor.requires_grad()) continue;
      const bool content = e.name.rfind("content.", 0) == 0;
      for (float g : e.tensor.grad()) {
        if (content) {
          ++params;
          nonzero += g != 0.0f;
        } else {
          style_grad += std::abs(g);
        }
      }
    }
  }
  store.zero_grad();
  detail("%zu content-encoder gradient entries over 8 utterances, %zu nonzero; style-side |grad| sum %.3e", params,
         nonzero, style_grad);
  report(4, params > 0 && nonzero == 0 && style_grad > 0,
         fmt("L_sd leaves content encoder untouched: %zu of %zu gradient entries nonzero", nonzero, params));
}

// ---------------------------------------------------------------------------
// 5: biased attention

// Plain single-head attention straight from the layer weights.
std::vector<double> reference_attention(const style::Attention<double>& a, const Tensor<double>& x,
                                        std::vector<double>* weights) {
  const std::size_t T = x.rows(), d = x.cols();
  const auto &Wq = *a.q[0].weight, &Wk = *a.k[0].weight, &Wv = *a.v[0].weight, &Wo = *a.out[0].weight;
  const Tensor<double>*bq = a.q[0].bias, *bk = a.k[0].bias, *bv = a.v[0].bias, *bo = a.out[0].bias;
  const std::size_t dh = Wq.cols();
  auto proj = [&](const Tensor<double>& W, const Tensor<double>* b) {
    std::vector<double> p(T * dh);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < dh; ++j) {
        double s = b ? (*b)[j] : 0.0;
        for (std::size_t i = 0; i < d; ++i) s += x(t, i) * W(i, j);
        p[t * dh + j] = s;
      }
    return p;
  };
  const auto q = proj(Wq, bq), k = proj(Wk, bk), v = proj(Wv, bv);
  std::vector<double> out(T * d), A(T * T);
  for (std::size_t t = 0; t < T; ++t) {
    double mx = -1e300, z = 0;
    for (std::size_t s = 0; s < T; ++s) {
      double dot = 0;
      for (std::size_t j = 0; j < dh; ++j) dot += q[t * dh + j] * k[s * dh + j];
      A[t * T + s] = dot / std::sqrt(double(dh));
      mx = std::max(mx, A[t * T + s]);
    }
    for (std::size_t s = 0; s < T; ++s) z += (A[t * T + s] = std::exp(A[t * T + s] - mx));
    for (std::size_t s = 0; s < T; ++s) A[t * T + s] /= z;
    for (std::size_t c = 0; c < d; ++c) {
      double o = bo ? (*bo)[c] : 0.0;
      for (std::size_t j = 0; j < dh; ++j) {
        double m = 0;
        for (std::size_t s = 0; s < T; ++s) m += A[t * T + s] * v[s * dh + j];
        o += m * Wo(j, c);
      }
      out[t * d + c] = o;
    }
  }
  if (weights) *weights = A;
  return out;
}

void criterion_5(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, 1);
  double ratio_err = 0, plain_err = 0, jac = 0;
  std::size_t masked_entries = 0, jac_entries = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t T = 6 + trial % 9, d = 8;
    diff::ParamStore<double> store;
    nn::Rng r(seed + trial);
    auto attn = style::Attention<double>::make(store, "attn", d, 1, r);
    Tensor<double> x(Shape{T, d});
    for (auto& v : x.values()) v = g(rng);
    std::vector<bool> vuv(T);
    for (std::size_t t = 0; t < T; ++t) vuv[t] = std::bernoulli_distribution(0.6)(rng);
    vuv[0] = true;
    vuv[1] = false;
    const auto idx = style::VoicedIndex::from_flags(vuv);

    std::vector<double> A;
    const auto ref = reference_attention(attn, x, &A);
    {
      Tape<double> tape;
      style::AttentionTrace<double> tr;
      style::biased_self_attention(tape, attn, tape.constant(x), idx, 0.02, false, &tr);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t s = 0; s < T; ++s)
          if (!vuv[s]) {
            ratio_err = std::max(ratio_err, std::abs(tr.biased.value()(t, s) - 0.02 * A[t * T + s]));
            ++masked_entries;
          }
    }
    for (double beta : {1.0, 0.02}) {
      // beta = 1: plain attention; all-voiced: every coefficient is 1 regardless of beta_mask
      Tape<double> tape;
      const auto index = beta == 1.0 ? idx : style::VoicedIndex::all_voiced(T);
      const auto y = style::biased_self_attention(tape, attn, tape.constant(x), index, beta).value();
      for (std::size_t i = 0; i < ref.size(); ++i) plain_err = std::max(plain_err, std::abs(y[i] - ref[i]));
    }
    // beta = 0: full Jacobian of every output element with respect to the masked value rows.
    for (std::size_t o = 0; o < T * d; ++o) {
      Tape<double> tape;
      style::AttentionTrace<double> tr;
      auto y = style::biased_self_attention(tape, attn, tape.variable(x), idx, 0.0, false, &tr);
      Tensor<double> sel(Shape{T, d});
      sel[o] = 1.0;
      tape.backward(diff::sum(diff::mul(y, tape.constant(sel))));
      const auto gv = tape.gradient(tr.values);
      for (auto p : idx.unvoiced)
        for (std::size_t c = 0; c < gv.cols(); ++c) {
          jac = std::max(jac, std::abs(gv(std::size_t(p), c)));
          ++jac_entries;
        }
    }
  }
  detail("masked entries checked %zu: max |biased - 0.02 unbiased| = %.3e", masked_entries, ratio_err);
  detail("beta = 1 vs loop reference: max abs diff %.3e", plain_err);
  detail("beta = 0: %zu Jacobian entries into masked value rows, max |J| = %.3e", jac_entries, jac);
  report(5, ratio_err <= 1e-9 && plain_err <= 1e-7 && jac == 0.0,
         fmt("biased attention: 0.02 reweighting %.1e (tol 1e-9), plain %.1e (tol 1e-7), masked Jacobian %.1e (exact 0)",
             ratio_err, plain_err, jac));
}

// ---------------------------------------------------------------------------
// 6: total loss

void criterion_6() {
  const obj::LossWeights w;
  const auto b = obj::total_loss(1.0, 1.0, 0.0, 1.0, 1.0, w);
  detail("weights rvq %.2f adv %.2f sd %.2f sp %.2f; total %.17g", w.rvq, w.adv, w.sd, w.sp, b.total);
  report(6, b.total == 2.04, fmt("unit components give total %.17g (expected 2.04 exactly)", b.total));
}

// ---------------------------------------------------------------------------
// 7: RVQ residuals and EMA

void criterion_7(const backbone::Model<float>& model, const backbone::TrainerConfig& cfg, const backbone::Dataset& data,
                 std::uint64_t seed) {
  std::size_t batches = 0, monotone = 0;
  std::vector<double> mean_norm(cfg.model.rvq_depth, 0.0);
  for (const auto* split : {&data.train, &data.test})
    for (const auto& s : *split) {
      Tape<float> tape;
      auto feats = model.style.prenet(tape, tape.constant(model.normalize_mel(s.mel)));
      auto voiced = style::voiced_gather(feats, backbone::style_index(s.style_voicing, cfg.flags));
      const auto res = quant::rvq_encode(voiced, model.codebook, backbone::rvq_options(cfg.flags, cfg.commitment));
      bool ok = true;
      for (std::size_t d = 0; d + 1 < res.residual_norms.size(); ++d) ok = ok && res.residual_norms[d + 1] <= res.residual_norms[d];
      for (std::size_t d = 0; d < res.residual_norms.size(); ++d) mean_norm[d] += res.residual_norms[d];
      ++batches;
      monotone += ok;
    }
  std::string norms;
  for (auto v : mean_norm) norms += fmt(" %.4f", v / double(batches));
  detail("trained codebook, %zu utterance batches: mean residual norm per depth%s", batches, norms.c_str());
  const double frac = double(monotone) / double(batches);

  // Two well separated clusters: EMA codes against brute-force assignment means.
  std::mt19937_64 rng(seed);
  const std::size_t n = 200;
  Tensor<double> pts(Shape{2 * n, 4});
  std::normal_distribution<double> g(0.0, 0.05);
  const double centers[2][4] = {{-1, 0.5, 0.2, 0}, {1, -0.5, 0, 0.3}};
  for (std::size_t i = 0; i < 2 * n; ++i)
    for (std::size_t c = 0; c < 4; ++c) pts(i, c) = centers[i % 2][c] + g(rng);
  quant::Codebook<double> cb(1, 2, 4);
  quant::kmeanspp_init(cb, pts, rng);
  for (int step = 0; step < 300; ++step) {
    Tape<double> tape;
    auto res = quant::rvq_encode(tape.variable(pts), cb);
    quant::ema_update(cb, res.codes, res.residual_inputs, quant::EmaOptions{}, rng);
  }
  double sums[2][4] = {}, counts[2] = {};
  for (std::size_t i = 0; i < 2 * n; ++i) {
    double best = 1e300;
    std::size_t k_best = 0;
    for (std::size_t k = 0; k < 2; ++k) {
      double dd = 0;
      for (std::size_t c = 0; c < 4; ++c) dd += std::pow(pts(i, c) - cb.code(0, k)[c], 2);
      if (dd < best) best = dd, k_best = k;
    }
    counts[k_best] += 1;
    for (std::size_t c = 0; c < 4; ++c) sums[k_best][c] += pts(i, c);
  }
  double ema_err = 0;
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t c = 0; c < 4; ++c)
      ema_err = std::max(ema_err, counts[k] ? std::abs(cb.code(0, k)[c] - sums[k][c] / counts[k]) : 1e9);
  detail("two-cluster EMA: cluster sizes %.0f/%.0f, max |code - mean| = %.3e", counts[0], counts[1], ema_err);
  report(7, frac >= 0.99 && ema_err <= 1e-3,
         fmt("residual norms non-increasing on %.1f%% of batches (need 99%%); EMA vs cluster means %.1e (tol 1e-3)",
             100 * frac, ema_err));
}

// ---------------------------------------------------------------------------
// 8: frontend

void criterion_8(const corpus::Manifest& m) {
  std::vector<eval::TrackPair> pairs;
  std::vector<signal::Waveform> waves;
  std::vector<signal::PitchTrack> gts;
  for (const auto& e : m.entries) {
    auto u = corpus::load_utterance(m, e);
    waves.push_back(std::move(u.waveform));
    gts.push_back(std::move(u.pitch));
  }
  const auto t0 = clk::now();
  for (std::size_t i = 0; i < waves.size(); ++i)
    pairs.push_back({m.entries[i].id, signal::estimate_f0_vuv(waves[i], m.config.pitch), gts[i]});
  const double t = seconds_since(t0);
  const auto r = eval::evaluate(pairs);
  detail("%zu utterances, %zu frames: F1 %.4f, RMSE_f0 %.3f Hz, %.1fs", pairs.size(), r.n_frames_total, r.f1_vuv,
         r.rmse_f0_hz, t);
  report(8, r.f1_vuv >= 0.95 && r.rmse_f0_hz <= 5.0 && t < 60.0,
         fmt("pitch frontend: F1_vuv %.4f (>= 0.95), RMSE_f0 %.2f Hz (<= 5), %zu utterances in %.1fs", r.f1_vuv,
             r.rmse_f0_hz, pairs.size(), t));
}

// ---------------------------------------------------------------------------
// 12: metric oracles

void criterion_12(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> hz(60, 400), u(0, 1);
  auto track = [&](std::size_t n) {
    signal::PitchTrack t;
    for (std::size_t i = 0; i < n; ++i) {
      const bool v = u(rng) < 0.6;
      t.vuv.push_back(v);
      t.f0_hz.push_back(v ? hz(rng) : 0.0);
      t.periodicity.push_back(u(rng));
    }
    return t;
  };
  double worst = 0;
  std::size_t n_f0 = 0, n_f1 = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto p = track(20), g = track(20);
    std::vector<std::size_t> both;
    double sp = 0, tp = 0, pp = 0, gp = 0;
    for (std::size_t t = 0; t < 20; ++t) {
      if (p.vuv[t] && g.vuv[t]) both.push_back(t);
      sp += std::pow(p.periodicity[t] - g.periodicity[t], 2);
      tp += p.vuv[t] && g.vuv[t];
      pp += p.vuv[t];
      gp += g.vuv[t];
    }
    worst = std::max(worst, std::abs(eval::rmse_periodicity(p, g) - std::sqrt(sp / 20)));
    if (!both.empty()) {
      double s = 0;
      for (auto t : both) s += std::pow(p.f0_hz[t] - g.f0_hz[t], 2);
      const double ref = std::sqrt(s / double(both.size()));
      worst = std::max(worst, std::abs(eval::rmse_f0(p, g) - ref) / std::max(1.0, ref));
      ++n_f0;
    }
    if (gp > 0) {
      const double ref = tp == 0 ? 0.0 : 2 * (tp / pp) * (tp / gp) / (tp / pp + tp / gp);
      worst = std::max(worst, std::abs(eval::f1_vuv(p, g) - ref));
      ++n_f1;
    }
  }
  detail("1000 random 20-frame track pairs: %zu with shared voicing, %zu with voiced ground truth", n_f0, n_f1);
  report(12, worst <= 1e-12, fmt("metric oracles: max deviation %.2e (tol 1e-12)", worst));
}

// ---------------------------------------------------------------------------
// 9-11: training

struct Run {
  fs::path dir;
  std::vector<obj::LossCsv::Row> losses;
  double seconds = 0;
};

Run train_run(const fs::path& dir, const backbone::TrainerConfig& cfg, std::shared_ptr<const backbone::Dataset> data,
              const std::optional<fs::path>& resume = std::nullopt) {
  Run r;
  r.dir = dir;
  if (!resume) fs::remove_all(dir);
  const auto t0 = clk::now();
  backbone::Trainer tr(cfg, data);
  tr.run(dir, resume);
  r.seconds = seconds_since(t0);
  r.losses = obj::LossCsv::read(dir / "loss.csv");
  return r;
}

double moving_average(const std::vector<obj::LossCsv::Row>& rows, std::size_t end, std::size_t window) {
  const std::size_t begin = end > window ? end - window : 0;
  double s = 0;
  for (std::size_t i = begin; i < end; ++i) s += rows[i].bundle.total;
  return s / double(end - begin);
}

bool same_rows(const std::vector<obj::LossCsv::Row>& a, std::size_t a_from, const std::vector<obj::LossCsv::Row>& b,
               std::size_t b_from, std::size_t n) {
  if (a.size() < a_from + n || b.size() < b_from + n) return false;
  for (std::size_t i = 0; i < n; ++i) {
    const auto &x = a[a_from + i], &y = b[b_from + i];
    if (x.step != y.step || x.bundle.l_fs2 != y.bundle.l_fs2 || x.bundle.l_rvq != y.bundle.l_rvq ||
        x.bundle.l_sd != y.bundle.l_sd || x.bundle.l_sp != y.bundle.l_sp || x.bundle.total != y.bundle.total)
      return false;
  }
  return true;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spotkit acceptance run"};
  fs::path work = fs::temp_directory_path() / "spotkit_acceptance";
  std::uint64_t seed = 1, corpus_seed = 7;
  std::size_t steps = 2000, ablation_steps = 2000, ablation_dim = 64;
  app.add_option("--work", work, "Working directory for corpus and runs")->capture_default_str();
  app.add_option("--seed", seed, "Training and sampling seed")->capture_default_str();
  app.add_option("--corpus-seed", corpus_seed, "Corpus seed")->capture_default_str();
  app.add_option("--steps", steps, "Training steps for the main runs")->capture_default_str();
  app.add_option("--ablation-steps", ablation_steps, "Training steps per ablation run")->capture_default_str();
  app.add_option("--ablation-dim", ablation_dim, "Model width of the ablation runs")->capture_default_str();
  std::vector<int> only_list;
  app.add_option("--only", only_list, "Run only these criteria")->check(CLI::Range(1, 12));
  CLI11_PARSE(app, argc, argv);

  try {
    std::printf("spotkit acceptance (seed %llu, corpus seed %llu, work %s)\n", (unsigned long long)seed,
                (unsigned long long)corpus_seed, work.string().c_str());
    const std::set<int> only(only_list.begin(), only_list.end());
    auto want = [&](std::initializer_list<int> ids) {
      if (only.empty()) return true;
      for (int i : ids)
        if (only.count(i)) return true;
      return false;
    };
    if (want({1, 2})) criteria_1_2(seed);
    if (want({3})) criterion_3(seed);
    if (want({5})) criterion_5(seed);
    if (want({6})) criterion_6();
    if (want({12})) criterion_12(seed);
    if (!want({4, 7, 8, 9, 10, 11})) throw Finished{};

    const auto t_corpus = clk::now();
    fs::remove_all(work / "corpus");
    const auto manifest = corpus::generate_corpus({}, corpus_seed, work / "corpus");
    auto data = std::make_shared<const backbone::Dataset>(backbone::load_dataset(manifest));
    detail("corpus: %zu train / %zu test utterances, prepared in %.1fs", data->train.size(), data->test.size(),
           seconds_since(t_corpus));
    if (want({8})) criterion_8(manifest);
    // 11: ablation directions at reduced width, averaged over 3 seeds.
    if (want({11})) {
      struct Variant {
        const char* name;
        std::function<void(backbone::AblationFlags&)> set;
      };
      const std::vector<Variant> variants = {{"full", [](auto&) {}},
                                             {"no_ve", [](auto& f) { f.use_ve = false; }},
                                             {"beta1", [](auto& f) { f.beta_mask = 1.0; }}};
      std::vector<double> mean(variants.size(), 0.0);
      for (std::size_t v = 0; v < variants.size(); ++v) {
        for (std::uint64_t s = 0; s < 3; ++s) {
          backbone::TrainerConfig c;
          c.model.dim = ablation_dim;
          c.max_steps = ablation_steps;
          c.checkpoint_every = 0;
          c.keep_checkpoints = 1;
          c.seed = seed + s;
          variants[v].set(c.flags);
          const auto dir = work / "ablation" / fmt("%s_seed%llu", variants[v].name, (unsigned long long)c.seed);
          const auto r = train_run(dir, c, data);
          const auto m = backbone::load_checkpoint(dir / "final");
          const auto rep = eval::evaluate(eval::predict_tracks(m.model, m.cfg.flags, data->test));
          detail("%-6s seed %llu: held-out RMSE_f0 %.3f Hz, F1 %.3f, RMSE_p %.3f (%.0fs)", variants[v].name,
                 (unsigned long long)c.seed, rep.rmse_f0_hz, rep.f1_vuv, rep.rmse_periodicity, r.seconds);
          mean[v] += rep.rmse_f0_hz / 3.0;
        }
      }
      report(11, mean[1] > mean[0] && mean[2] > mean[0],
             fmt("ablations (width %zu, %zu steps, 3 seeds): RMSE_f0 full %.3f, -VE %.3f, beta=1 %.3f (both must exceed full)",
                 ablation_dim, ablation_steps, mean[0], mean[1], mean[2]));
    }

    if (!want({4, 7, 9, 10})) throw Finished{};

    // Main run, trained once and shared by criteria 4, 7, 9 and 10.
    backbone::TrainerConfig cfg;
    cfg.seed = seed;
    cfg.max_steps = steps;
    cfg.checkpoint_every = 100;
    cfg.keep_checkpoints = 2;
    detail("training main run: %zu steps, width %zu, batch %zu", steps, cfg.model.dim, cfg.batch_size);
    const auto main_run = train_run(work / "main", cfg, data);
    detail("main run finished in %.1fs", main_run.seconds);
    const auto trained = backbone::load_checkpoint(work / "main" / "final");

    if (want({4})) criterion_4(trained.model, *trained.store, trained.cfg, *data);
    if (want({7})) criterion_7(trained.model, trained.cfg, *data, seed);

    // 9: loss reduction, wall clock, reproducibility and resume.
    if (want({9})) {
      const auto& L = main_run.losses;
      const std::size_t window = 50;
      const bool have = L.size() == steps && steps >= window;
      const double at50 = have ? moving_average(L, window, window) : NAN;
      const double final_ma = have ? moving_average(L, L.size(), window) : NAN;
      auto part = [&](std::size_t from, std::size_t to) {
        double s = 0;
        for (std::size_t i = from; i < to; ++i) s += L[i].bundle.l_fs2 + L[i].bundle.l_rvq;
        return s / double(to - from);
      };
      if (have) {
        detail("total loss moving average (50 steps): %.4f at step 50, %.4f at step %zu", at50, final_ma, steps);
        detail("fs2 + rvq part alone: %.4f -> %.4f", part(0, window), part(L.size() - window, L.size()));
        detail("last step: fs2 %.4f rvq %.4f sd %.4f sp %.4f total %.4f", L.back().bundle.l_fs2, L.back().bundle.l_rvq,
               L.back().bundle.l_sd, L.back().bundle.l_sp, L.back().bundle.total);
      }
      const std::size_t prefix = std::min<std::size_t>(100, steps);
      auto cfg_b = cfg;
      cfg_b.max_steps = prefix;
      const auto rerun = train_run(work / "rerun", cfg_b, data);
      const bool repro = same_rows(L, 0, rerun.losses, 0, prefix);
      detail("fresh run from the same seed: first %zu loss rows %s", prefix, repro ? "bit-identical" : "DIFFER");

      bool resumed = false;
      const std::size_t from = steps >= 200 ? steps - 100 : 0;
      const auto ckpt = work / "main" / "checkpoints" / fmt("step_%06zu", from);
      if (from > 0 && fs::exists(ckpt)) {
        fs::remove_all(work / "resume");
        fs::create_directories(work / "resume");
        fs::copy_file(work / "main" / "loss.csv", work / "resume" / "loss.csv");
        const auto res = train_run(work / "resume", cfg, data, ckpt);
        resumed = same_rows(L, 0, res.losses, 0, steps) &&
                  slurp(work / "resume" / "final" / "model.spk") == slurp(work / "main" / "final" / "model.spk");
        detail("resume from step %zu: losses and final parameters %s", from, resumed ? "bit-identical" : "DIFFER");
      }
      const bool fast = main_run.seconds <= 1800.0;
      report(9, have && final_ma <= 0.5 * at50 && fast && repro && resumed,
             fmt("training: %zu steps in %.0fs (<= 1800), smoothed total %.3f vs %.3f at step 50 (ratio %.3f, need <= 0.5), "
                 "reproducible %s, resume %s",
                 steps, main_run.seconds, final_ma, at50, final_ma / at50, repro ? "yes" : "no", resumed ? "yes" : "no"));
    }

    // 10: style and content probes, SD on vs off.
    if (want({10})) {
      const auto probe_on = eval::style_probe(eval::probe_examples(trained.model, trained.cfg.flags, *data));
      auto cfg_off = cfg;
      cfg_off.flags.use_sd = false;
      detail("training SD-off run: %zu steps", steps);
      const auto off_run = train_run(work / "no_sd", cfg_off, data);
      const auto off = backbone::load_checkpoint(work / "no_sd" / "final");
      const auto probe_off = eval::style_probe(eval::probe_examples(off.model, off.cfg.flags, *data));
      auto confusion = [](const eval::ClassifierReport& r) {
        std::string s;
        for (const auto& row : r.confusion) {
          s += " [";
          for (auto v : row) s += fmt("%zu ", v);
          s.back() = ']';
        }
        return s;
      };
      detail("SD on : style acc %.3f, content acc %.3f (chance %.2f), style confusion%s", probe_on.style.accuracy,
             probe_on.content.accuracy, probe_on.content.chance, confusion(probe_on.style).c_str());
      detail("SD off: style acc %.3f, content acc %.3f, trained in %.0fs", probe_off.style.accuracy,
             probe_off.content.accuracy, off_run.seconds);
      const double limit = probe_on.content.chance + 0.15;
      report(10,
             probe_on.style.accuracy >= 0.80 && probe_on.content.accuracy <= limit + 1e-12 &&
                 probe_off.content.accuracy > probe_on.content.accuracy,
             fmt("probes: style %.3f (>= 0.80), content %.3f with SD (<= %.2f), %.3f without SD (must be higher)",
                 probe_on.style.accuracy, probe_on.content.accuracy, limit, probe_off.content.accuracy));
    }

  } catch (const Finished&) {
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
  }

  std::set<int> passed;
  for (const auto& v : verdicts)
    if (v.pass) passed.insert(v.id);
  std::printf("\nsummary: %zu of %zu criteria run passed\n", passed.size(), verdicts.size());
  for (int i = 1; i <= 12; ++i) {
    auto it = std::find_if(verdicts.begin(), verdicts.end(), [&](const Verdict& v) { return v.id == i; });
    std::printf("  %2d %s\n", i, it == verdicts.end() ? "NOT RUN" : (it->pass ? "PASS" : "FAIL"));
  }
  const bool complete = only_list.empty() ? verdicts.size() == 12 : true;
  return complete && passed.size() == verdicts.size() ? 0 : 1;
}
