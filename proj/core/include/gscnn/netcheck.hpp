#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gscnn/gradcheck.hpp"
#include "gscnn/layers.hpp"
#include "gscnn/matching_gate.hpp"
#include "gscnn/network.hpp"
#include "gscnn/ops.hpp"
#include "gscnn/training.hpp"

namespace gscnn {

namespace detail {

// Identity in the forward direction whose recorded backward rule scales the
// incoming gradient by `factor`. A factor != 1 is a deliberately wrong rule;
// it exists so tests can prove the finite-difference checker actually trips
// on a broken backward implementation.
template <typename T>
Tensor<T> scale_backward_only(const Tensor<T>& x, T factor) {
  auto backward = [factor](Node<T>& self) {
    auto& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  };
  Tensor<T> out = make_op_output<T>("scale_backward_only", x.shape(), {x}, backward);
  out.values() = x.values();
  return out;
}

// Random values with |v| in [lo_mag, hi_mag]. Keeps inputs away from the
// PReLU kink and L2-norm singularity so central differences stay clean.
template <typename T>
Tensor<T> signed_uniform(Shape s, Rng& rng, T lo_mag, T hi_mag, bool requires_grad = false) {
  Tensor<T> t(s, requires_grad);
  for (auto& v : t.values()) {
    const T m = static_cast<T>(rng.uniform(static_cast<double>(lo_mag),
                                           static_cast<double>(hi_mag)));
    v = rng.next_u64() & 1 ? m : -m;
  }
  return t;
}

// Shuffled arithmetic ramp: all values distinct with gaps far above the
// finite-difference step, so max-pool argmaxes cannot flip mid-check.
template <typename T>
Tensor<T> shuffled_ramp(Shape s, Rng& rng, bool requires_grad = false) {
  Tensor<T> t(s, requires_grad);
  auto& v = t.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = T(0.01) * static_cast<T>(i);
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
  return t;
}

// sum(y * w_fixed) with constant weights; unlike sum(y^2) this stays
// sensitive through layers whose output has constant norm.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& y, const Tensor<T>& w_fixed) {
  return sum(mul(y, w_fixed));
}

template <typename T>
Tensor<T> sum_squares(const Tensor<T>& y) {
  return sum(mul(y, y));
}

}  // namespace detail

struct NamedReport {
  std::string name;
  GradCheckReport report;
};

// Finite-difference checks of every differentiable primitive in isolation,
// each on a small random problem. Returns one report per primitive.
template <typename T>
std::vector<NamedReport> layer_gradchecks(std::uint64_t seed, index_t n_coords, T step) {
  std::vector<NamedReport> out;
  Rng master(seed);

  {
    Rng rng = master.stream("conv2d");
    Tensor<T> x = detail::signed_uniform<T>(Shape{2, 5, 4, 3}, rng, T(0.2), T(1), true);
    Tensor<T> w = detail::signed_uniform<T>(Shape{3, 3, 3, 4}, rng, T(0.2), T(1), true);
    Tensor<T> b = detail::signed_uniform<T>(vec_shape(4), rng, T(0.2), T(1), true);
    auto f = [&]() { return detail::sum_squares(conv2d(x, w, b, index_t(1), index_t(1))); };
    out.push_back({"conv2d", gradcheck<T>(f, {{"x", x}, {"w", w}, {"b", b}}, n_coords, step,
                                          seed + 1)});
  }
  {
    Rng rng = master.stream("maxpool2x2");
    Tensor<T> x = detail::shuffled_ramp<T>(Shape{2, 4, 4, 3}, rng, true);
    auto f = [&]() { return detail::sum_squares(maxpool2x2(x)); };
    out.push_back({"maxpool2x2", gradcheck<T>(f, {{"x", x}}, n_coords, step, seed + 2)});
  }
  {
    Rng rng = master.stream("prelu");
    Tensor<T> x = detail::signed_uniform<T>(Shape{2, 3, 4, 5}, rng, T(0.2), T(1), true);
    Tensor<T> slope = Tensor<T>::uniform(vec_shape(5), rng, T(0.1), T(0.5), true);
    auto f = [&]() { return detail::sum_squares(prelu(x, slope)); };
    out.push_back({"prelu", gradcheck<T>(f, {{"x", x}, {"slope", slope}}, n_coords, step,
                                         seed + 3)});
  }
  {
    Rng rng = master.stream("batchnorm_train");
    Tensor<T> x = Tensor<T>::uniform(Shape{4, 2, 2, 3}, rng, T(-1), T(1), true);
    Tensor<T> gamma = Tensor<T>::uniform(vec_shape(3), rng, T(0.5), T(1.5), true);
    Tensor<T> beta = Tensor<T>::uniform(vec_shape(3), rng, T(-0.5), T(0.5), true);
    Tensor<T> rm = Tensor<T>::zeros(vec_shape(3));
    Tensor<T> rv = Tensor<T>::full(vec_shape(3), T(1));
    auto f = [&]() {
      return detail::sum_squares(
          batchnorm(x, gamma, beta, rm, rv, Mode::kTrain, /*update_running=*/false));
    };
    out.push_back({"batchnorm_train",
                   gradcheck<T>(f, {{"x", x}, {"gamma", gamma}, {"beta", beta}}, n_coords,
                                step, seed + 4)});
  }
  {
    Rng rng = master.stream("batchnorm_eval");
    Tensor<T> x = Tensor<T>::uniform(Shape{4, 2, 2, 3}, rng, T(-1), T(1), true);
    Tensor<T> gamma = Tensor<T>::uniform(vec_shape(3), rng, T(0.5), T(1.5), true);
    Tensor<T> beta = Tensor<T>::uniform(vec_shape(3), rng, T(-0.5), T(0.5), true);
    Tensor<T> rm = Tensor<T>::uniform(vec_shape(3), rng, T(-0.5), T(0.5));
    Tensor<T> rv = Tensor<T>::uniform(vec_shape(3), rng, T(0.5), T(1.5));
    auto f = [&]() {
      return detail::sum_squares(batchnorm(x, gamma, beta, rm, rv, Mode::kEval));
    };
    out.push_back({"batchnorm_eval",
                   gradcheck<T>(f, {{"x", x}, {"gamma", gamma}, {"beta", beta}}, n_coords,
                                step, seed + 5)});
  }
  {
    Rng rng = master.stream("l2norm_channels");
    Tensor<T> x = detail::signed_uniform<T>(Shape{2, 3, 2, 4}, rng, T(0.2), T(1), true);
    Tensor<T> wf = Tensor<T>::uniform(Shape{2, 3, 2, 4}, rng, T(-1), T(1));
    auto f = [&]() { return detail::weighted_sum(l2norm_channels(x), wf); };
    out.push_back({"l2norm_channels", gradcheck<T>(f, {{"x", x}}, n_coords, step, seed + 6)});
  }
  {
    Rng rng = master.stream("matching_gate");
    const Shape s{2, 4, 3, 6};
    Tensor<T> x1 = detail::signed_uniform<T>(s, rng, T(0.2), T(1), true);
    Tensor<T> x2 = detail::signed_uniform<T>(s, rng, T(0.2), T(1), true);
    Rng prng = master.stream("matching_gate_params");
    MatchingGateParams<T> g(s.w, s.c, T(1.5), prng);
    Tensor<T> wf1 = Tensor<T>::uniform(s, rng, T(-1), T(1));
    Tensor<T> wf2 = Tensor<T>::uniform(s, rng, T(-1), T(1));
    auto f = [&]() {
      MatchingGateOutput<T> o = matching_gate_forward(x1, x2, g);
      return sum(add(mul(o.a1, wf1), mul(o.a2, wf2)));
    };
    out.push_back({"matching_gate",
                   gradcheck<T>(f,
                                {{"x1", x1},
                                 {"x2", x2},
                                 {"w", g.w},
                                 {"b", g.b},
                                 {"slope", g.slope},
                                 {"p", g.p}},
                                n_coords, step, seed + 7)});
  }
  {
    Rng rng = master.stream("contrastive_loss");
    Tensor<T> e1 = Tensor<T>::uniform(Shape{4, 1, 1, 6}, rng, T(-0.4), T(0.4), true);
    Tensor<T> e2 = Tensor<T>::uniform(Shape{4, 1, 1, 6}, rng, T(-0.4), T(0.4), true);
    const std::vector<int> labels{0, 1, 0, 1};
    auto f = [&]() { return contrastive_loss_batch(e1, e2, labels, T(1)); };
    out.push_back({"contrastive_loss",
                   gradcheck<T>(f, {{"emb1", e1}, {"emb2", e2}}, n_coords, step, seed + 8)});
  }
  return out;
}

// End-to-end check: contrastive loss of one random positive pair through the
// configured network. Every trainable tensor is sampled. Batch norm runs in
// eval mode here: under train-mode normalization a conv bias is exactly
// output-neutral (the batch mean removes any constant channel shift), so its
// true gradient is identically zero and the relative-error quotient degrades
// into a noise ratio. The train-mode backward rule itself is covered by the
// dedicated batchnorm_train layer check. With corrupt_backward the loss
// passes through a deliberately wrong backward rule; the check must then
// fail.
template <typename T>
GradCheckReport network_gradcheck(const NetworkConfig& config, std::uint64_t seed,
                                  index_t n_coords, T step, bool corrupt_backward = false) {
  NetworkParams<T> net = init_network<T>(config, seed);
  Rng master(seed);
  Rng r1 = master.stream("img1");
  Rng r2 = master.stream("img2");
  const Shape in{1, config.input_h, config.input_w, config.input_c};
  Tensor<T> img1 = Tensor<T>::uniform(in, r1, T(0), T(1));
  Tensor<T> img2 = Tensor<T>::uniform(in, r2, T(0), T(1));
  const std::vector<int> labels{0};

  auto f = [&]() {
    auto [e1, e2] = forward_pair(img1, img2, net, Mode::kEval, /*update_running=*/false);
    Tensor<T> loss = contrastive_loss_batch(e1, e2, labels, T(1));
    if (corrupt_backward) loss = detail::scale_backward_only(loss, T(0.9));
    return loss;
  };

  std::vector<std::pair<std::string, Tensor<T>>> params;
  for (auto& [name, t] : net.named_trainable()) params.emplace_back(name, *t);
  return gradcheck<T>(f, params, n_coords, step, seed + 0x9e37);
}

}  // namespace gscnn
