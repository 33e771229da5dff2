#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gscnn/layers.hpp"
#include "gscnn/ops.hpp"
#include "gscnn/tensor.hpp"

namespace gscnn {

// Smallest admissible Gaussian width; the optimizer clamps p back to this
// floor after every step so the gate never divides by a vanishing variance.
constexpr double kGatePFloor = 1e-3;

// Parameters of one matching gate working on (n, rows, cols, channels) maps.
// The summarizer consumes the full stripe width, so its kernel is
// (1, cols, channels, channels) and summarization leaves exactly one column.
template <typename T>
struct MatchingGateParams {
  Tensor<T> w;      // (1, c, h, h) summarization filters, shared by both streams
  Tensor<T> b;      // (1,1,1,h) summarizer bias
  Tensor<T> slope;  // (1,1,1,h) summarizer PReLU slope
  Tensor<T> p;      // (1,1,1,h) per-channel Gaussian width

  MatchingGateParams() = default;

  MatchingGateParams(index_t cols, index_t channels, T p_init, Rng& rng)
      : w(init_filters<T>(1, cols, channels, channels, rng)),
        b(Tensor<T>::zeros(vec_shape(channels), true)),
        slope(Tensor<T>::full(vec_shape(channels), T(kPreluInitSlope), true)),
        p(Tensor<T>::full(vec_shape(channels), p_init, true)) {}

  index_t cols() const { return w.shape().h; }
  index_t channels() const { return w.shape().c; }

  std::vector<Tensor<T>*> trainable() { return {&w, &b, &slope, &p}; }
};

// Gate values g in (0,1], one per (row, channel); broadcast() repeats them
// across the stripe width.
template <typename T>
struct GateMask {
  Tensor<T> g;  // (n, rows, 1, h)
  index_t width = 1;

  Tensor<T> broadcast() const {
    const Shape& s = g.shape();
    Tensor<T> out(Shape{s.n, s.h, width, s.c});
    for (index_t n = 0; n < s.n; ++n)
      for (index_t r = 0; r < s.h; ++r)
        for (index_t w = 0; w < width; ++w)
          for (index_t c = 0; c < s.c; ++c) out.at(n, r, w, c) = g.at(n, r, 0, c);
    return out;
  }
};

// Row-stripe summarization: convolve each full-width stripe down to a single
// column and apply PReLU. Both siamese streams are passed through the same
// parameters by the caller.
template <typename T>
Tensor<T> summarize_stripes(const Tensor<T>& x, MatchingGateParams<T>& params) {
  const Shape& s = x.shape();
  if (params.w.shape().h != s.w)
    throw std::invalid_argument("summarize_stripes: filter width " +
                                std::to_string(params.w.shape().h) +
                                " does not match input width " + std::to_string(s.w));
  Tensor<T> y = conv2d(x, params.w, params.b, index_t(0), index_t(0));
  return prelu(y, params.slope);
}

// Gaussian similarity per channel: g_i = exp(-(y1_i - y2_i)^2 / p_i^2).
// Differentiable in y1, y2 and p.
template <typename T>
GateMask<T> gate_values(const Tensor<T>& y1, const Tensor<T>& y2, const Tensor<T>& p,
                        index_t broadcast_width = 1) {
  detail::check_same_shape("gate_values", y1, y2);
  const Shape& s = y1.shape();
  if (p.size() != s.c)
    throw std::invalid_argument("gate_values: p length " + std::to_string(p.size()) +
                                " does not match channel count " + std::to_string(s.c));
  for (index_t j = 0; j < p.size(); ++j)
    if (!(p.data()[j] > T(0)))
      throw std::invalid_argument("gate_values: p must be strictly positive (channel " +
                                  std::to_string(j) + ")");

  const index_t c = s.c;
  auto backward = [c](detail::Node<T>& self) {
    auto& n1 = *self.parents[0];
    auto& n2 = *self.parents[1];
    auto& np = *self.parents[2];
    const index_t total = static_cast<index_t>(self.grad.size());
    const bool g1 = n1.requires_grad, g2 = n2.requires_grad, gp = np.requires_grad;
    if (g1) n1.ensure_grad();
    if (g2) n2.ensure_grad();
    if (gp) np.ensure_grad();
    for (index_t i = 0; i < total; ++i) {
      const index_t j = i % c;
      const T pj = np.value[j];
      const T diff = n1.value[i] - n2.value[i];
      const T g = self.value[i];
      const T common = self.grad[i] * g * T(2) * diff / (pj * pj);
      if (g1) n1.grad[i] -= common;
      if (g2) n2.grad[i] += common;
      if (gp) np.grad[j] += self.grad[i] * g * T(2) * diff * diff / (pj * pj * pj);
    }
  };
  Tensor<T> g = detail::make_op_output<T>("gate_values", s, {y1, y2, p}, backward);
  for (index_t i = 0; i < y1.size(); ++i) {
    const T pj = p.data()[i % c];
    const T diff = y1.data()[i] - y2.data()[i];
    g.data()[i] = std::exp(-(diff * diff) / (pj * pj));
  }
  return GateMask<T>{g, broadcast_width};
}

// Boosting of one stream: a = x + x * G, with the (n,r,1,h) gate repeated
// across the stripe width. The repetition is a broadcast in forward and a
// width-sum in backward.
template <typename T>
Tensor<T> gate_boost(const Tensor<T>& x, const GateMask<T>& mask) {
  const Shape& xs = x.shape();
  const Shape& gs = mask.g.shape();
  if (gs.n != xs.n || gs.h != xs.h || gs.w != 1 || gs.c != xs.c)
    throw std::invalid_argument("gate_boost: mask shape " + gs.str() +
                                " is not broadcastable to input " + xs.str());
  const index_t width = xs.w, c = xs.c;
  auto backward = [width, c](detail::Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& gn = *self.parents[1];
    const index_t stripes = static_cast<index_t>(self.grad.size()) / (width * c);
    if (xn.requires_grad) {
      auto& gx = xn.ensure_grad();
      for (index_t l = 0; l < stripes; ++l)
        for (index_t w = 0; w < width; ++w)
          for (index_t j = 0; j < c; ++j) {
            const index_t i = (l * width + w) * c + j;
            gx[i] += self.grad[i] * (T(1) + gn.value[l * c + j]);
          }
    }
    if (gn.requires_grad) {
      auto& gg = gn.ensure_grad();
      for (index_t l = 0; l < stripes; ++l)
        for (index_t w = 0; w < width; ++w)
          for (index_t j = 0; j < c; ++j) {
            const index_t i = (l * width + w) * c + j;
            gg[l * c + j] += self.grad[i] * xn.value[i];
          }
    }
  };
  Tensor<T> out = detail::make_op_output<T>("gate_boost", xs, {x, mask.g}, backward);
  const T* xv = x.data();
  const T* gv = mask.g.data();
  T* ov = out.data();
  const index_t stripes = x.size() / (width * c);
  for (index_t l = 0; l < stripes; ++l)
    for (index_t w = 0; w < width; ++w)
      for (index_t j = 0; j < c; ++j) {
        const index_t i = (l * width + w) * c + j;
        ov[i] = xv[i] * (T(1) + gv[l * c + j]);
      }
  return out;
}

// Boost both streams with a shared mask, then L2-normalize across channels.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> boost(const Tensor<T>& x1, const Tensor<T>& x2,
                                      const GateMask<T>& mask) {
  return {l2norm_channels(gate_boost(x1, mask)), l2norm_channels(gate_boost(x2, mask))};
}

template <typename T>
struct MatchingGateOutput {
  Tensor<T> a1;
  Tensor<T> a2;
  GateMask<T> mask;
};

// Full gate: summarize both stripes, score their per-channel similarity,
// boost the common patterns, normalize. With stop_gradient_mask the mask is
// treated as a constant in the backward pass (ablation switch); by default
// gradients flow through the mask into both streams and into p.
template <typename T>
MatchingGateOutput<T> matching_gate_forward(const Tensor<T>& x1, const Tensor<T>& x2,
                                            MatchingGateParams<T>& params,
                                            bool stop_gradient_mask = false) {
  detail::check_same_shape("matching_gate_forward", x1, x2);
  Tensor<T> y1 = summarize_stripes(x1, params);
  Tensor<T> y2 = summarize_stripes(x2, params);
  GateMask<T> mask = gate_values(y1, y2, params.p, x1.shape().w);
  GateMask<T> applied = stop_gradient_mask ? GateMask<T>{mask.g.detached(), mask.width} : mask;
  auto [a1, a2] = boost(x1, x2, applied);
  return {a1, a2, mask};
}

}  // namespace gscnn
