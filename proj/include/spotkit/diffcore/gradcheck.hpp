#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "spotkit/diffcore/param_store.hpp"
#include "spotkit/diffcore/tape.hpp"

namespace spotkit::diff {

struct CheckReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<double> rel_errors;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;

  bool passes(double tol) const { return max_rel_error <= tol; }
};

struct CheckOptions {
  double eps = 1e-6;
  /// Denominator floor: rel = |a - n| / max(|a|, |n|, floor).
  double floor = 1e-3;
  /// Check at most this many coordinates (0 = all), sampled with `seed`.
  std::size_t max_elements = 0;
  std::uint64_t seed = 1;
};

using ScalarFn = std::function<Var<double>(Tape<double>&, const Var<double>&)>;
using ClosedFn = std::function<Var<double>(Tape<double>&)>;

double relative_error(double analytic, double numeric, double floor);

/// Central finite differences of f around x compared with reverse mode.
/// Throws if f produces a non-finite intermediate, naming the op.
CheckReport grad_check(const ScalarFn& f, const Tensor<double>& x, const CheckOptions& opts = {});

/// Same check with respect to the named entries of a parameter store; `f`
/// must bind those entries through Tape::parameter. Values are restored.
CheckReport grad_check_params(const ClosedFn& f, ParamStore<double>& store,
                              const std::vector<std::string>& names, const CheckOptions& opts = {});

}  // namespace spotkit::diff
