#pragma once

// Small parameterized building blocks over the op catalog. Each layer holds
// pointers into a ParamStore and binds them to the tape on every call.

#include <random>
#include <string>

#include "spotkit/diffcore/ops.hpp"
#include "spotkit/diffcore/param_store.hpp"

namespace spotkit::nn {

using diff::ParamStore;
using diff::Shape;
using diff::Tape;
using diff::Tensor;
using diff::Var;

using Rng = std::mt19937_64;

template <typename Real>
Tensor<Real> uniform_tensor(Shape shape, double bound, Rng& rng);

/// Fixed sinusoidal position table, T x d.
template <typename Real>
Tensor<Real> sinusoidal_positions(std::size_t T, std::size_t d);

template <typename Real>
struct Linear {
  Tensor<Real>* weight = nullptr;  // in x out
  Tensor<Real>* bias = nullptr;    // out, optional

  /// Fan-in scaled uniform weights, zero bias; `zero` zero-initializes the weights too.
  static Linear make(ParamStore<Real>& store, const std::string& name, std::size_t in,
                     std::size_t out, Rng& rng, bool zero = false, bool with_bias = true);
  Var<Real> operator()(Tape<Real>& tape, const Var<Real>& x) const;
  std::size_t in_dim() const { return weight->dim(0); }
  std::size_t out_dim() const { return weight->dim(1); }
};

/// Dense 1-D convolution over time with odd kernel and "same" zero padding.
///
/// Computed as one matmul against all taps followed by a shifted row
/// scatter: x (T,Cin) * W (Cin, K*Cout) -> (T*K, Cout) -> scatter into (T, Cout).
template <typename Real>
struct Conv1d {
  Tensor<Real>* weight = nullptr;  // Cin x (K*Cout)
  Tensor<Real>* bias = nullptr;    // Cout
  std::size_t kernel = 3;
  std::size_t dilation = 1;

  static Conv1d make(ParamStore<Real>& store, const std::string& name, std::size_t in,
                     std::size_t out, std::size_t kernel, std::size_t dilation, Rng& rng);
  Var<Real> operator()(Tape<Real>& tape, const Var<Real>& x) const;
  std::size_t out_dim() const { return bias->size(); }
};

template <typename Real>
struct LayerNormAffine {
  Tensor<Real>* gain = nullptr;
  Tensor<Real>* bias = nullptr;

  static LayerNormAffine make(ParamStore<Real>& store, const std::string& name, std::size_t dim);
  Var<Real> operator()(Tape<Real>& tape, const Var<Real>& x) const;
};

/// x + conv(gelu(norm(x)))
template <typename Real>
struct ConvResBlock {
  LayerNormAffine<Real> norm;
  Conv1d<Real> conv;

  static ConvResBlock make(ParamStore<Real>& store, const std::string& name, std::size_t dim,
                           std::size_t kernel, std::size_t dilation, Rng& rng);
  Var<Real> operator()(Tape<Real>& tape, const Var<Real>& x) const;
};

/// Two linear layers with a GELU between them.
template <typename Real>
struct Mlp {
  Linear<Real> fc1;
  Linear<Real> fc2;

  static Mlp make(ParamStore<Real>& store, const std::string& name, std::size_t in,
                  std::size_t hidden, std::size_t out, Rng& rng);
  Var<Real> operator()(Tape<Real>& tape, const Var<Real>& x) const;
};

}  // namespace spotkit::nn
