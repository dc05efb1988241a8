#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "spotkit/diffcore/tensor.hpp"

namespace spotkit::diff {

template <typename Real>
class Tape;

/// Handle to a value recorded on a tape.
template <typename Real>
class Var {
 public:
  Var() = default;
  Var(Tape<Real>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<Real>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const { return tape_->needs_grad(id_); }

  Tape<Real>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Real>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Linear record of operations for reverse-mode differentiation.
///
/// Nodes are appended in creation order, so the record is topologically
/// sorted by construction and backward is a single reverse sweep.
template <typename Real>
class Tape {
 public:
  /// Called with the tape and the node's own id once its output gradient is
  /// final; adds into the gradients of the node's inputs.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Value that never receives a gradient (the stop-gradient boundary).
  Var<Real> constant(Tensor<Real> value);
  /// Tape-owned leaf that receives a gradient.
  Var<Real> variable(Tensor<Real> value);
  /// Leaf that reads `param` in place. If `param.requires_grad()`, backward
  /// accumulates into `param`'s grad slot.
  Var<Real> parameter(Tensor<Real>& param);

  /// Records an op output. Gradient tracking is on iff any input tracks it.
  Var<Real> record(const char* op, Tensor<Real> value, std::initializer_list<Var<Real>> inputs,
                   BackwardFn backward);
  Var<Real> record(const char* op, Tensor<Real> value, const std::vector<Var<Real>>& inputs,
                   BackwardFn backward);

  void backward(const Var<Real>& loss);

  const Tensor<Real>& value(std::size_t id) const {
    const auto& n = nodes_[id];
    return n.bound ? *n.bound : n.value;
  }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  const char* op_name(std::size_t id) const { return nodes_[id].op; }

  /// Gradient buffer of a node; only valid during or after backward().
  std::span<Real> grad(std::size_t id) { return nodes_[id].grad; }
  std::span<const Real> grad(std::size_t id) const { return nodes_[id].grad; }

  /// Gradient of the last backward() w.r.t. `v` (zeros if unreachable).
  Tensor<Real> gradient(const Var<Real>& v) const;

  /// Throws naming the first op whose output is not finite.
  void check_finite() const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    const char* op = "";
    Tensor<Real> value;
    Tensor<Real>* bound = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool needs_grad = false;
    std::vector<Real> grad;
  };

  Var<Real> push(Node node);

  std::deque<Node> nodes_;  // deque: recorded values keep their addresses
};

/// Runtime float width, selectable from the command line.
enum class Precision { f32, f64 };

}  // namespace spotkit::diff
