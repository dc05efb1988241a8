#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace spotkit::eval {

struct FdResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t checks = 0;

  bool passed() const { return max_rel_error <= tolerance; }
};

struct FdSuiteOptions {
  int bits = 64;  // 64: double tape; 32: float tape against double differences
  std::uint64_t seed = 1;
  std::size_t trials_per_op = 20;
  std::size_t max_elements = 24;  // coordinates sampled per check
};

/// Central-difference checks for every catalog op, the rotation-trick forward,
/// biased self-attention (input and weights), the ConvNeXt block and both style
/// losses. The 32-bit run checks input gradients only.
std::vector<FdResult> run_fd_suite(const FdSuiteOptions& opts = {});

/// Tolerance for a suite entry: 1e-4 at 64 bits, 1e-3 for entries containing GELU;
/// 32-bit runs are held to 1e-2.
double fd_tolerance(const std::string& name, int bits);

}  // namespace spotkit::eval
