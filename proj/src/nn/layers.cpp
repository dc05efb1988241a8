#include "spotkit/nn/layers.hpp"

#include <cmath>
#include <cstdint>

namespace spotkit::nn {

template <typename Real>
Tensor<Real> uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor<Real> t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.values()) v = static_cast<Real>(dist(rng));
  return t;
}

template <typename Real>
Tensor<Real> sinusoidal_positions(std::size_t T, std::size_t d) {
  Tensor<Real> pe(Shape{T, d});
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pe(t, i) = static_cast<Real>(std::sin(static_cast<double>(t) * freq));
      if (i + 1 < d) pe(t, i + 1) = static_cast<Real>(std::cos(static_cast<double>(t) * freq));
    }
  }
  return pe;
}

template <typename Real>
Linear<Real> Linear<Real>::make(ParamStore<Real>& store, const std::string& name, std::size_t in,
                                std::size_t out, Rng& rng, bool zero, bool with_bias) {
  Linear l;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  l.weight = &store.add(name + ".weight",
                        zero ? Tensor<Real>(Shape{in, out}) : uniform_tensor<Real>({in, out}, bound, rng));
  if (with_bias) l.bias = &store.add(name + ".bias", Tensor<Real>(Shape{out}));
  return l;
}

template <typename Real>
Var<Real> Linear<Real>::operator()(Tape<Real>& tape, const Var<Real>& x) const {
  auto y = diff::matmul(x, tape.parameter(*weight));
  if (bias) y = diff::add(y, tape.parameter(*bias));
  return y;
}

template <typename Real>
Conv1d<Real> Conv1d<Real>::make(ParamStore<Real>& store, const std::string& name, std::size_t in,
                                std::size_t out, std::size_t kernel, std::size_t dilation, Rng& rng) {
  if (kernel % 2 == 0) throw diff::ShapeError("Conv1d: kernel must be odd");
  Conv1d c;
  c.kernel = kernel;
  c.dilation = dilation;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel));
  c.weight = &store.add(name + ".weight", uniform_tensor<Real>({in, kernel * out}, bound, rng));
  c.bias = &store.add(name + ".bias", Tensor<Real>(Shape{out}));
  return c;
}

template <typename Real>
Var<Real> Conv1d<Real>::operator()(Tape<Real>& tape, const Var<Real>& x) const {
  const std::size_t T = x.rows();
  const std::size_t cout = bias->size();
  auto taps = diff::matmul(x, tape.parameter(*weight));
  taps = diff::reshape(taps, Shape{T * kernel, cout});
  // Row (t, k) holds x[t] * W_k and lands on output row t - offset_k.
  std::vector<std::int64_t> index(T * kernel);
  const auto half = static_cast<std::int64_t>(kernel / 2);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t k = 0; k < kernel; ++k) {
      const std::int64_t dst = static_cast<std::int64_t>(t) -
                               (static_cast<std::int64_t>(k) - half) * static_cast<std::int64_t>(dilation);
      index[t * kernel + k] = (dst >= 0 && dst < static_cast<std::int64_t>(T)) ? dst : -1;
    }
  }
  auto y = diff::scatter_rows<Real>(taps, index, T);
  return diff::add(y, tape.parameter(*bias));
}

template <typename Real>
LayerNormAffine<Real> LayerNormAffine<Real>::make(ParamStore<Real>& store, const std::string& name,
                                                  std::size_t dim) {
  LayerNormAffine n;
  n.gain = &store.add(name + ".gain", Tensor<Real>(Shape{dim}, Real(1)));
  n.bias = &store.add(name + ".bias", Tensor<Real>(Shape{dim}));
  return n;
}

template <typename Real>
Var<Real> LayerNormAffine<Real>::operator()(Tape<Real>& tape, const Var<Real>& x) const {
  auto y = diff::mul(diff::layer_norm(x), tape.parameter(*gain));
  return diff::add(y, tape.parameter(*bias));
}

template <typename Real>
ConvResBlock<Real> ConvResBlock<Real>::make(ParamStore<Real>& store, const std::string& name,
                                            std::size_t dim, std::size_t kernel,
                                            std::size_t dilation, Rng& rng) {
  ConvResBlock b;
  b.norm = LayerNormAffine<Real>::make(store, name + ".norm", dim);
  b.conv = Conv1d<Real>::make(store, name + ".conv", dim, dim, kernel, dilation, rng);
  return b;
}

template <typename Real>
Var<Real> ConvResBlock<Real>::operator()(Tape<Real>& tape, const Var<Real>& x) const {
  return diff::add(x, conv(tape, diff::gelu(norm(tape, x))));
}

template <typename Real>
Mlp<Real> Mlp<Real>::make(ParamStore<Real>& store, const std::string& name, std::size_t in,
                          std::size_t hidden, std::size_t out, Rng& rng) {
  Mlp m;
  m.fc1 = Linear<Real>::make(store, name + ".fc1", in, hidden, rng);
  m.fc2 = Linear<Real>::make(store, name + ".fc2", hidden, out, rng);
  return m;
}

template <typename Real>
Var<Real> Mlp<Real>::operator()(Tape<Real>& tape, const Var<Real>& x) const {
  return fc2(tape, diff::gelu(fc1(tape, x)));
}

#define SPOTKIT_INSTANTIATE_NN(R)                                                  \
  template Tensor<R> uniform_tensor<R>(Shape, double, Rng&);                       \
  template Tensor<R> sinusoidal_positions<R>(std::size_t, std::size_t);            \
  template struct Linear<R>;                                                       \
  template struct Conv1d<R>;                                                       \
  template struct LayerNormAffine<R>;                                              \
  template struct ConvResBlock<R>;                                                 \
  template struct Mlp<R>;

SPOTKIT_INSTANTIATE_NN(float)
SPOTKIT_INSTANTIATE_NN(double)

}  // namespace spotkit::nn
