#include "spotkit/diffcore/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace spotkit::diff {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

std::vector<std::size_t> pick_coordinates(std::size_t n, const CheckOptions& opts) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (opts.max_elements == 0 || opts.max_elements >= n) return idx;
  std::mt19937_64 rng(opts.seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(opts.max_elements);
  std::sort(idx.begin(), idx.end());
  return idx;
}

double evaluate(const ClosedFn& f) {
  Tape<double> tape;
  auto y = f(tape);
  tape.check_finite();
  if (y.size() != 1) throw ShapeError("grad_check: function must return a scalar");
  return y.value()[0];
}

void finish(CheckReport& r, double floor) {
  r.rel_errors.resize(r.analytic.size());
  for (std::size_t i = 0; i < r.analytic.size(); ++i) {
    r.rel_errors[i] = relative_error(r.analytic[i], r.numeric[i], floor);
    const double abs_err = std::abs(r.analytic[i] - r.numeric[i]);
    r.max_abs_error = std::max(r.max_abs_error, abs_err);
    if (r.rel_errors[i] > r.max_rel_error) {
      r.max_rel_error = r.rel_errors[i];
      r.worst_index = i;
    }
  }
}

}  // namespace

CheckReport grad_check(const ScalarFn& f, const Tensor<double>& x, const CheckOptions& opts) {
  if (!(opts.eps > 0)) throw std::invalid_argument("grad_check: eps must be positive");
  if (!x.all_finite()) throw std::invalid_argument("grad_check: x is not finite");

  Tensor<double> analytic_grad;
  {
    Tape<double> tape;
    auto xv = tape.variable(x);
    auto y = f(tape, xv);
    tape.check_finite();
    tape.backward(y);
    analytic_grad = tape.gradient(xv);
  }

  CheckReport report;
  Tensor<double> probe = x;
  for (auto i : pick_coordinates(x.size(), opts)) {
    const double orig = probe[i];
    probe[i] = orig + opts.eps;
    const double fp = evaluate([&](Tape<double>& t) { return f(t, t.constant(probe)); });
    probe[i] = orig - opts.eps;
    const double fm = evaluate([&](Tape<double>& t) { return f(t, t.constant(probe)); });
    probe[i] = orig;
    report.analytic.push_back(analytic_grad[i]);
    report.numeric.push_back((fp - fm) / (2 * opts.eps));
  }
  finish(report, opts.floor);
  return report;
}

CheckReport grad_check_params(const ClosedFn& f, ParamStore<double>& store,
                              const std::vector<std::string>& names, const CheckOptions& opts) {
  if (!(opts.eps > 0)) throw std::invalid_argument("grad_check: eps must be positive");
  store.zero_grad();
  {
    Tape<double> tape;
    auto y = f(tape);
    tape.check_finite();
    tape.backward(y);
  }
  CheckReport report;
  std::uint64_t salt = 0;
  for (const auto& name : names) {
    auto& p = store.at(name);
    p.ensure_grad();
    const std::vector<double> g(p.grad().begin(), p.grad().end());
    CheckOptions sub = opts;
    sub.seed = opts.seed + 7919 * ++salt;
    for (auto i : pick_coordinates(p.size(), sub)) {
      const double orig = p[i];
      p[i] = orig + opts.eps;
      const double fp = evaluate(f);
      p[i] = orig - opts.eps;
      const double fm = evaluate(f);
      p[i] = orig;
      report.analytic.push_back(g[i]);
      report.numeric.push_back((fp - fm) / (2 * opts.eps));
    }
  }
  store.zero_grad();
  finish(report, opts.floor);
  return report;
}

}  // namespace spotkit::diff
