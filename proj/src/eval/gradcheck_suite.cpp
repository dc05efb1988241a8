#include "spotkit/eval/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <memory>
#include <random>

#include "spotkit/diffcore/gradcheck.hpp"
#include "spotkit/diffcore/ops.hpp"
#include "spotkit/objectives/losses.hpp"
#include "spotkit/quantizer/rvq.hpp"
#include "spotkit/stylenc/style_encoder.hpp"

namespace spotkit::eval {

namespace {

using diff::ParamStore;
using diff::Shape;
using diff::Tape;
using diff::Tensor;
using diff::Var;
using Engine = std::mt19937_64;

template <typename Real>
using Fn = std::function<Var<Real>(Tape<Real>&, const Var<Real>&)>;

Tensor<double> uniform(Shape s, Engine& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.values()) v = d(rng);
  return t;
}

// sum(w * y) with fixed weights so symmetric outputs do not cancel.
template <typename Real>
Var<Real> weighted_sum(Tape<Real>& t, const Var<Real>& y, std::uint64_t seed) {
  Engine rng(seed);
  return diff::sum(diff::mul(y, t.constant(uniform(y.shape(), rng).template cast<Real>())));
}

template <typename Real>
std::vector<double> analytic(const Fn<Real>& f, const Tensor<double>& x) {
  Tape<Real> t;
  auto v = t.variable(x.template cast<Real>());
  t.backward(f(t, v));
  const auto g = t.gradient(v);
  return {g.values().begin(), g.values().end()};
}

double value_at(const Fn<double>& f, const Tensor<double>& x) {
  Tape<double> t;
  return f(t, t.constant(x)).value().item();
}

// Copies values of a double store into a float store with the same layout.
void mirror(const ParamStore<double>& from, ParamStore<float>& to) {
  for (auto& e : to) {
    const auto src = from.at(e.name).values();
    auto dst = e.tensor.values();
    std::transform(src.begin(), src.end(), dst.begin(), [](double v) { return static_cast<float>(v); });
  }
}

std::vector<std::string> trainable(const ParamStore<double>& s) {
  std::vector<std::string> out;
  for (const auto& e : s)
    if (e.tensor.requires_grad()) out.push_back(e.name);
  return out;
}

bool has_gelu(const std::string& name) {
  return name == "gelu" || name.rfind("convnext_block", 0) == 0 || name.rfind("l_sp", 0) == 0;
}

class Runner {
 public:
  explicit Runner(const FdSuiteOptions& o) : opts_(o), rng_(o.seed) {}

  // Analytic gradient of `f64`/`f32` against central differences of `numeric`.
  void check(const std::string& name, Tensor<double> x, const Fn<double>& numeric, const Fn<double>& f64,
             const Fn<float>& f32) {
    const auto a = opts_.bits == 64 ? analytic<double>(f64, x) : analytic<float>(f32, x);
    std::vector<std::size_t> idx(x.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opts_.max_elements && idx.size() > opts_.max_elements) {
      std::shuffle(idx.begin(), idx.end(), rng_);
      idx.resize(opts_.max_elements);
    }
    const double eps = 1e-6;
    double worst = 0;
    for (auto i : idx) {
      const double orig = x[i];
      x[i] = orig + eps;
      const double fp = value_at(numeric, x);
      x[i] = orig - eps;
      const double fm = value_at(numeric, x);
      x[i] = orig;
      worst = std::max(worst, diff::relative_error(a[i], (fp - fm) / (2 * eps), 1e-3));
    }
    note(name, worst);
  }

  void check(const std::string& name, const Tensor<double>& x, const Fn<double>& f64, const Fn<float>& f32) {
    check(name, x, f64, f64, f32);
  }

  void note(const std::string& name, double err) {
    auto& r = results_[name];
    r.name = name;
    r.max_rel_error = std::max(r.max_rel_error, err);
    r.tolerance = fd_tolerance(name, opts_.bits);
    ++r.checks;
  }

  std::vector<FdResult> results() const {
    std::vector<FdResult> out;
    for (const auto& [k, v] : results_) out.push_back(v);
    return out;
  }

  const FdSuiteOptions& opts() const { return opts_; }
  Engine& rng() { return rng_; }

 private:
  FdSuiteOptions opts_;
  Engine rng_;
  std::map<std::string, FdResult> results_;
};

void catalog(Runner& run) {
  auto& rng = run.rng();
  std::uniform_int_distribution<std::size_t> dim(2, 12);
  const auto& names = diff::op_catalog();
  for (std::size_t trial = 0; trial < run.opts().trials_per_op * names.size(); ++trial) {
    const std::string& op = names[trial % names.size()];
    const std::size_t m = dim(rng), n = dim(rng), k = dim(rng);
    std::vector<Tensor<double>> inputs;
    nlohmann::json attrs = nlohmann::json::object();
    if (op == "matmul" || op == "pointwise_conv1d") {
      inputs = {uniform({m, k}, rng), uniform({k, n}, rng)};
    } else if (op == "add" || op == "sub" || op == "mul") {
      const auto mode = trial % 3;
      const Shape sb = mode == 0 ? Shape{m, n} : (mode == 1 ? Shape{n} : Shape{m, 1});
      inputs = {uniform({m, n}, rng), uniform(sb, rng)};
    } else if (op == "reshape") {
      inputs = {uniform({m, n}, rng)};
      attrs["shape"] = Shape{n, m};
    } else if (op == "gather_rows" || op == "scatter_rows") {
      std::uniform_int_distribution<std::int64_t> pick(-1, static_cast<std::int64_t>(m) - 1);
      std::vector<std::int64_t> index(k);
      for (auto& i : index) i = pick(rng);
      inputs = {op == "gather_rows" ? uniform({m, n}, rng) : uniform({k, n}, rng)};
      if (op == "scatter_rows") attrs["rows"] = m;
      attrs["index"] = index;
    } else if (op == "depthwise_conv1d") {
      inputs = {uniform({m, n}, rng), uniform({2 * (k % 4) + 1, n}, rng)};
      attrs["dilation"] = 1 + trial % 3;
    } else if (op == "sum_axis" || op == "mean_axis") {
      inputs = {uniform({m, n, 2}, rng)};
      attrs["axis"] = trial % 3;
    } else if (op == "cosine_similarity") {
      inputs = {uniform({m, n}, rng), uniform({m, n}, rng)};
    } else if (op == "detached_linear") {
      inputs = {uniform({m, n}, rng), uniform({k, n}, rng)};
      attrs["scale"] = 1.7;
    } else if (op == "scale") {
      inputs = {uniform({m, n}, rng)};
      attrs["scale"] = -0.6;
    } else {
      inputs = {uniform({m, n}, rng, -2.0, 2.0)};
    }
    const std::uint64_t wseed = 1000 + trial;
    // detached_linear's matrix input is not differentiated
    const std::size_t n_checked = op == "detached_linear" ? 1 : inputs.size();
    for (std::size_t which = 0; which < n_checked; ++which) {
      auto make = [&]<typename Real>(Real) -> Fn<Real> {
        return [&, which](Tape<Real>& t, const Var<Real>& v) {
          std::vector<Var<Real>> in;
          for (std::size_t i = 0; i < inputs.size(); ++i)
            in.push_back(i == which ? v : t.constant(inputs[i].template cast<Real>()));
          return weighted_sum(t, diff::forward_op<Real>(op, in, attrs), wseed);
        };
      };
      run.check(op, inputs[which], make(0.0), make(0.0f));
    }
  }
}

void rotation_trick(Runner& run) {
  auto& rng = run.rng();
  for (std::size_t trial = 0; trial < run.opts().trials_per_op; ++trial) {
    const std::size_t rows = 1 + trial % 4, d = 2 + trial % 7;
    const auto e0 = uniform({rows, d}, rng), q = uniform({rows, d}, rng, -2, 2);
    const auto w = uniform({rows, d}, rng);
    auto map = std::make_shared<const quant::RotationMap<double>>(rows, d, std::span<const double>(e0.values()),
                                                                  std::span<const double>(q.values()));
    // The rotation is a constant of the backward pass, so the reference is the frozen linear map.
    Fn<double> frozen = [&](Tape<double>& t, const Var<double>& x) {
      return diff::sum(diff::mul(diff::detached_linear(x, std::shared_ptr<const diff::DetachedMap<double>>(map)),
                                 t.constant(w)));
    };
    Fn<double> f64 = [&](Tape<double>& t, const Var<double>& x) {
      return diff::sum(diff::mul(quant::rt_forward(x, q), t.constant(w)));
    };
    const auto q32 = q.cast<float>();
    Fn<float> f32 = [&](Tape<float>& t, const Var<float>& x) {
      return diff::sum(diff::mul(quant::rt_forward(x, q32), t.constant(w.cast<float>())));
    };
    run.check("rt_forward", e0, frozen, f64, f32);
  }
}

void style_blocks(Runner& run) {
  auto& rng = run.rng();
  const double betas[] = {0.02, 0.0, 1.0};
  for (std::size_t trial = 0; trial < run.opts().trials_per_op; ++trial) {
    const std::size_t T = 5 + trial % 6, d = 4, heads = 1 + trial % 2;
    std::vector<bool> vuv(T);
    for (std::size_t t = 0; t < T; ++t) vuv[t] = std::bernoulli_distribution(0.6)(rng);
    vuv[0] = true;
    const auto idx = style::VoicedIndex::from_flags(vuv);
    const double beta = betas[trial % 3];
    const auto x0 = uniform({T, d}, rng), w = uniform({T, d}, rng);

    ParamStore<double> s64;
    ParamStore<float> s32;
    nn::Rng r64(trial), r32(trial);
    auto attn = style::Attention<double>::make(s64, "attn", d, heads, r64);
    auto block = style::ConvNeXtBlock<double>::make(s64, "cnx", d, 7, r64);
    auto attn32 = style::Attention<float>::make(s32, "attn", d, heads, r32);
    auto block32 = style::ConvNeXtBlock<float>::make(s32, "cnx", d, 7, r32);
    mirror(s64, s32);

    run.check(
        "biased_self_attention", x0,
        [&](Tape<double>& t, const Var<double>& x) {
          return diff::sum(diff::mul(style::biased_self_attention(t, attn, x, idx, beta), t.constant(w)));
        },
        [&](Tape<float>& t, const Var<float>& x) {
          return diff::sum(diff::mul(style::biased_self_attention(t, attn32, x, idx, beta), t.constant(w.cast<float>())));
        });
    run.check(
        "convnext_block", x0,
        [&](Tape<double>& t, const Var<double>& x) { return diff::sum(diff::mul(block(t, x), t.constant(w))); },
        [&](Tape<float>& t, const Var<float>& x) {
          return diff::sum(diff::mul(block32(t, x), t.constant(w.cast<float>())));
        });

    if (run.opts().bits == 64) {
      diff::CheckOptions co;
      co.max_elements = run.opts().max_elements;
      co.seed = trial;
      std::vector<std::string> names;
      for (const auto& n : trainable(s64))
        if (n.rfind("attn.", 0) == 0) names.push_back(n);
      auto rep = diff::grad_check_params(
          [&](Tape<double>& t) {
            return diff::sum(diff::mul(style::biased_self_attention(t, attn, t.constant(x0), idx, beta), t.constant(w)));
          },
          s64, names, co);
      run.note("biased_self_attention.weights", rep.max_rel_error);
      names.clear();
      for (const auto& n : trainable(s64))
        if (n.rfind("cnx.", 0) == 0) names.push_back(n);
      rep = diff::grad_check_params(
          [&](Tape<double>& t) { return diff::sum(diff::mul(block(t, t.constant(x0)), t.constant(w))); }, s64, names, co);
      run.note("convnext_block.weights", rep.max_rel_error);
    }
  }
}

void style_losses(Runner& run) {
  auto& rng = run.rng();
  for (std::size_t trial = 0; trial < run.opts().trials_per_op; ++trial) {
    const std::size_t T = 3 + trial % 6, d = 4 + trial % 5;
    const auto content = uniform({T, d}, rng), style0 = uniform({T, d}, rng);
    const obj::SdOptions sd{true, trial % 2 == 1};
    run.check(
        "l_sd", style0,
        [&](Tape<double>& t, const Var<double>& x) { return obj::style_disentanglement_loss(t.constant(content), x, sd); },
        [&](Tape<float>& t, const Var<float>& x) {
          return obj::style_disentanglement_loss(t.constant(content.cast<float>()), x, sd);
        });

    ParamStore<double> s64;
    ParamStore<float> s32;
    nn::Rng r64(trial), r32(trial);
    auto proj = obj::ProsodyProjector<double>::make(s64, "sp", d, r64);
    auto proj32 = obj::ProsodyProjector<float>::make(s32, "sp", d, r32);
    mirror(s64, s32);
    const auto mel = uniform({T, obj::ProsodyProjector<double>::kMelBins}, rng, -2, 2);
    const auto red = trial % 2 ? obj::SpReduction::mean : obj::SpReduction::sum;
    run.check(
        "l_sp", style0,
        [&](Tape<double>& t, const Var<double>& x) { return obj::style_preserving_loss(t, t.constant(mel), x, proj, red); },
        [&](Tape<float>& t, const Var<float>& x) {
          return obj::style_preserving_loss(t, t.constant(mel.cast<float>()), x, proj32, red);
        });
    if (run.opts().bits == 64) {
      diff::CheckOptions co;
      co.max_elements = run.opts().max_elements;
      co.seed = trial;
      const auto rep = diff::grad_check_params(
          [&](Tape<double>& t) { return obj::style_preserving_loss(t, t.constant(mel), t.constant(style0), proj, red); },
          s64, trainable(s64), co);
      run.note("l_sp.projector", rep.max_rel_error);
    }
  }
}

}  // namespace

double fd_tolerance(const std::string& name, int bits) {
  if (bits == 32) return 1e-2;
  return has_gelu(name) ? 1e-3 : 1e-4;
}

std::vector<FdResult> run_fd_suite(const FdSuiteOptions& opts) {
  if (opts.bits != 32 && opts.bits != 64) throw std::invalid_argument("gradcheck: bits must be 32 or 64");
  Runner run(opts);
  catalog(run);
  rotation_trick(run);
  style_blocks(run);
  style_losses(run);
  return run.results();
}

}  // namespace spotkit::eval
