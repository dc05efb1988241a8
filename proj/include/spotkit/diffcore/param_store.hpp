#pragma once

#include <deque>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "spotkit/diffcore/tensor.hpp"

namespace spotkit::diff {

/// Named tensors in insertion order. References returned by add()/at() stay
/// valid for the store's lifetime.
///
/// Trainable entries have requires_grad set; everything else (codebooks,
/// normalization statistics, optimizer moments) is carried as state.
template <typename Real>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<Real> tensor;
  };

  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Tensor<Real>& add(const std::string& name, Tensor<Real> tensor, bool trainable = true);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor<Real>& at(const std::string& name);
  const Tensor<Real>& at(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  void zero_grad();
  /// Scalar count of trainable (or all) values.
  std::size_t parameter_count(bool trainable_only = true) const;

  /// Writes the "SPOTKIT1" container: magic, u64 header length, JSON header,
  /// then little-endian raw values.
  void save(const std::filesystem::path& path) const;
  /// Reads a container, converting stored dtype to Real.
  static ParamStore load(const std::filesystem::path& path);
  /// Overwrites values of existing entries from a file; names and shapes must match.
  void load_values(const std::filesystem::path& path);

  /// Copy with a different value type; grads are not copied.
  template <typename To>
  ParamStore<To> cast() const {
    ParamStore<To> out;
    for (const auto& e : entries_) out.add(e.name, e.tensor.template cast<To>(), e.tensor.requires_grad());
    return out;
  }

 private:
  std::deque<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace spotkit::diff
