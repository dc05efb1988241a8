#include "spotkit/diffcore/tape.hpp"

#include <algorithm>
#include <stdexcept>

namespace spotkit::diff {

template <typename Real>
Var<Real> Tape<Real>::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var<Real>(this, nodes_.size() - 1);
}

template <typename Real>
Var<Real> Tape<Real>::constant(Tensor<Real> value) {
  Node n;
  n.op = "constant";
  value.set_requires_grad(false);
  value.clear_grad();
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename Real>
Var<Real> Tape<Real>::variable(Tensor<Real> value) {
  Node n;
  n.op = "variable";
  value.clear_grad();
  n.value = std::move(value);
  n.needs_grad = true;
  return push(std::move(n));
}

template <typename Real>
Var<Real> Tape<Real>::parameter(Tensor<Real>& param) {
  Node n;
  n.op = "parameter";
  n.bound = &param;
  n.needs_grad = param.requires_grad();
  return push(std::move(n));
}

template <typename Real>
Var<Real> Tape<Real>::record(const char* op, Tensor<Real> value,
                             std::initializer_list<Var<Real>> inputs, BackwardFn backward) {
  return record(op, std::move(value), std::vector<Var<Real>>(inputs), std::move(backward));
}

template <typename Real>
Var<Real> Tape<Real>::record(const char* op, Tensor<Real> value,
                             const std::vector<Var<Real>>& inputs, BackwardFn backward) {
  Node n;
  n.op = op;
  n.value = std::move(value);
  for (const auto& in : inputs) {
    if (in.tape() != this) throw std::logic_error(std::string(op) + ": input from another tape");
    n.inputs.push_back(in.id());
    n.needs_grad = n.needs_grad || nodes_[in.id()].needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

template <typename Real>
void Tape<Real>::backward(const Var<Real>& loss) {
  if (loss.tape() != this) throw std::logic_error("backward: loss is not on this tape");
  const auto& lv = value(loss.id());
  if (lv.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + to_string(lv.shape()));
  }
  const std::size_t last = loss.id();
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    auto& n = nodes_[i];
    if (n.needs_grad && i <= last)
      n.grad.assign(value(i).size(), Real(0));
    else
      n.grad.clear();
  }
  if (!nodes_[last].needs_grad) return;
  nodes_[last].grad[0] = Real(1);
  for (std::size_t i = last + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (n.needs_grad && n.backward) n.backward(*this, i);
  }
  for (std::size_t i = 0; i <= last; ++i) {
    auto& n = nodes_[i];
    if (n.bound && n.needs_grad) {
      n.bound->ensure_grad();
      auto g = n.bound->grad();
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
    }
  }
}

template <typename Real>
Tensor<Real> Tape<Real>::gradient(const Var<Real>& v) const {
  const auto& n = nodes_[v.id()];
  Tensor<Real> out(value(v.id()).shape());
  if (!n.grad.empty()) std::copy(n.grad.begin(), n.grad.end(), out.values().begin());
  return out;
}

template <typename Real>
void Tape<Real>::check_finite() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!value(i).all_finite()) {
      throw std::runtime_error("non-finite value produced by op '" + std::string(nodes_[i].op) +
                               "' (node " + std::to_string(i) + ")");
    }
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace spotkit::diff
