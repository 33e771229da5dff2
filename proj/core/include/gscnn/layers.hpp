#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gscnn/ops.hpp"
#include "gscnn/rng.hpp"
#include "gscnn/tensor.hpp"

namespace gscnn {

enum class Mode { kTrain, kEval };

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;
constexpr double kPreluInitSlope = 0.25;
constexpr double kL2NormEps = 1e-12;

// Per-channel parametric ReLU: y = x for x >= 0, slope_c * x otherwise.
// slope is (1,1,1,c).
template <typename T>
Tensor<T> prelu(const Tensor<T>& x, const Tensor<T>& slope) {
  const Shape& s = x.shape();
  if (slope.size() != s.c)
    throw std::invalid_argument("prelu: slope length " + std::to_string(slope.size()) +
                                " does not match channel count " + std::to_string(s.c));
  const index_t c = s.c;
  auto backward = [c](detail::Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& sn = *self.parents[1];
    const index_t total = static_cast<index_t>(self.grad.size());
    if (xn.requires_grad) {
      auto& gx = xn.ensure_grad();
      for (index_t i = 0; i < total; ++i) {
        const T xi = xn.value[i];
        gx[i] += self.grad[i] * (xi >= T(0) ? T(1) : sn.value[i % c]);
      }
    }
    if (sn.requires_grad) {
      auto& gs = sn.ensure_grad();
      for (index_t i = 0; i < total; ++i) {
        const T xi = xn.value[i];
        if (xi < T(0)) gs[i % c] += self.grad[i] * xi;
      }
    }
  };
  Tensor<T> out = detail::make_op_output<T>("prelu", s, {x, slope}, backward);
  const T* xv = x.data();
  const T* sv = slope.data();
  T* ov = out.data();
  for (index_t i = 0; i < x.size(); ++i) {
    const T xi = xv[i];
    ov[i] = xi >= T(0) ? xi : sv[i % c] * xi;
  }
  return out;
}

// Batch normalization over (n,h,w) per channel. In train mode the output is
// standardized with batch statistics and, when update_running is set, the
// running estimates move by `momentum` toward the batch values (unbiased
// variance, matching the usual reference defaults). Eval mode uses the
// running statistics only.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
                    bool update_running = true, T momentum = T(kBnMomentum), T eps = T(kBnEps)) {
  const Shape& s = x.shape();
  const index_t c = s.c;
  const index_t n_samples = s.n * s.h * s.w;
  if (gamma.size() != c || beta.size() != c || running_mean.size() != c || running_var.size() != c)
    throw std::invalid_argument("batchnorm: parameter length does not match channel count " +
                                std::to_string(c));
  if (n_samples < 1) throw std::invalid_argument("batchnorm: empty input");

  if (mode == Mode::kEval) {
    auto backward = [c, eps](detail::Node<T>& self) {
      auto& xn = *self.parents[0];
      auto& gn = *self.parents[1];
      auto& bn = *self.parents[2];
      auto& rmn = *self.parents[3];
      auto& rvn = *self.parents[4];
      const index_t total = static_cast<index_t>(self.grad.size());
      std::vector<T> invstd(c);
      for (index_t j = 0; j < c; ++j) invstd[j] = T(1) / std::sqrt(rvn.value[j] + eps);
      if (xn.requires_grad) {
        auto& gx = xn.ensure_grad();
        for (index_t i = 0; i < total; ++i) {
          const index_t j = i % c;
          gx[i] += self.grad[i] * gn.value[j] * invstd[j];
        }
      }
      if (gn.requires_grad) {
        auto& gg = gn.ensure_grad();
        for (index_t i = 0; i < total; ++i) {
          const index_t j = i % c;
          gg[j] += self.grad[i] * (xn.value[i] - rmn.value[j]) * invstd[j];
        }
      }
      if (bn.requires_grad) {
        auto& gb = bn.ensure_grad();
        for (index_t i = 0; i < total; ++i) gb[i % c] += self.grad[i];
      }
    };
    Tensor<T> out = detail::make_op_output<T>("batchnorm_eval", s,
                                              {x, gamma, beta, running_mean, running_var},
                                              backward);
    const T* xv = x.data();
    T* ov = out.data();
    for (index_t j = 0; j < c; ++j) {
      const T invstd = T(1) / std::sqrt(running_var.data()[j] + eps);
      const T g = gamma.data()[j] * invstd;
      const T off = beta.data()[j] - running_mean.data()[j] * g;
      for (index_t i = j; i < x.size(); i += c) ov[i] = xv[i] * g + off;
    }
    return out;
  }

  // Train mode: batch statistics (biased variance in the normalization).
  auto mean = std::make_shared<std::vector<T>>(c, T(0));
  auto invstd = std::make_shared<std::vector<T>>(c, T(0));
  const T* xv = x.data();
  for (index_t i = 0; i < x.size(); ++i) (*mean)[i % c] += xv[i];
  for (index_t j = 0; j < c; ++j) (*mean)[j] /= static_cast<T>(n_samples);
  std::vector<T> var(c, T(0));
  for (index_t i = 0; i < x.size(); ++i) {
    const T d = xv[i] - (*mean)[i % c];
    var[i % c] += d * d;
  }
  for (index_t j = 0; j < c; ++j) {
    var[j] /= static_cast<T>(n_samples);
    (*invstd)[j] = T(1) / std::sqrt(var[j] + eps);
  }

  if (update_running) {
    const T unbias =
        n_samples > 1 ? static_cast<T>(n_samples) / static_cast<T>(n_samples - 1) : T(1);
    for (index_t j = 0; j < c; ++j) {
      running_mean.data()[j] = (T(1) - momentum) * running_mean.data()[j] + momentum * (*mean)[j];
      running_var.data()[j] =
          (T(1) - momentum) * running_var.data()[j] + momentum * var[j] * unbias;
    }
  }

  const T inv_n = T(1) / static_cast<T>(n_samples);
  auto backward = [c, mean, invstd, inv_n](detail::Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& gn = *self.parents[1];
    auto& bn = *self.parents[2];
    const index_t total = static_cast<index_t>(self.grad.size());
    // Per-channel reductions of dy and dy*xhat, shared by all three grads.
    std::vector<T> sum_dy(c, T(0)), sum_dy_xhat(c, T(0));
    for (index_t i = 0; i < total; ++i) {
      const index_t j = i % c;
      const T xhat = (xn.value[i] - (*mean)[j]) * (*invstd)[j];
      sum_dy[j] += self.grad[i];
      sum_dy_xhat[j] += self.grad[i] * xhat;
    }
    if (gn.requires_grad) {
      auto& gg = gn.ensure_grad();
      for (index_t j = 0; j < c; ++j) gg[j] += sum_dy_xhat[j];
    }
    if (bn.requires_grad) {
      auto& gb = bn.ensure_grad();
      for (index_t j = 0; j < c; ++j) gb[j] += sum_dy[j];
    }
    if (xn.requires_grad) {
      auto& gx = xn.ensure_grad();
      for (index_t i = 0; i < total; ++i) {
        const index_t j = i % c;
        const T xhat = (xn.value[i] - (*mean)[j]) * (*invstd)[j];
        gx[i] += gn.value[j] * (*invstd)[j] *
                 (self.grad[i] - inv_n * (sum_dy[j] + xhat * sum_dy_xhat[j]));
      }
    }
  };
  Tensor<T> out = detail::make_op_output<T>("batchnorm_train", s, {x, gamma, beta}, backward);
  T* ov = out.data();
  for (index_t i = 0; i < x.size(); ++i) {
    const index_t j = i % c;
    ov[i] = gamma.data()[j] * ((xv[i] - (*mean)[j]) * (*invstd)[j]) + beta.data()[j];
  }
  return out;
}

// L2 normalization of the channel vector at every (n,h,w) location:
// v -> v / max(||v||, eps). Zero vectors stay zero through the eps guard.
template <typename T>
Tensor<T> l2norm_channels(const Tensor<T>& x, T eps = T(kL2NormEps)) {
  const Shape& s = x.shape();
  const index_t c = s.c;
  const index_t locs = s.n * s.h * s.w;
  auto norms = std::make_shared<std::vector<T>>(static_cast<std::size_t>(locs));
  const T* xv = x.data();
  for (index_t l = 0; l < locs; ++l) {
    T acc = T(0);
    const T* v = xv + l * c;
    for (index_t j = 0; j < c; ++j) acc += v[j] * v[j];
    (*norms)[l] = std::sqrt(acc);
  }

  auto backward = [c, locs, norms, eps](detail::Node<T>& self) {
    auto& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& gx = xn.ensure_grad();
    for (index_t l = 0; l < locs; ++l) {
      const T m = (*norms)[l];
      const T* v = xn.value.data() + l * c;
      const T* dy = self.grad.data() + l * c;
      T* dv = gx.data() + l * c;
      if (m > eps) {
        T dot = T(0);
        for (index_t j = 0; j < c; ++j) dot += dy[j] * v[j];
        const T inv_m = T(1) / m;
        const T k = dot * inv_m * inv_m * inv_m;
        for (index_t j = 0; j < c; ++j) dv[j] += dy[j] * inv_m - v[j] * k;
      } else {
        const T inv_e = T(1) / eps;
        for (index_t j = 0; j < c; ++j) dv[j] += dy[j] * inv_e;
      }
    }
  };
  Tensor<T> out = detail::make_op_output<T>("l2norm_channels", s, {x}, backward);
  T* ov = out.data();
  for (index_t l = 0; l < locs; ++l) {
    const T inv = T(1) / std::max((*norms)[l], eps);
    for (index_t j = 0; j < c; ++j) ov[l * c + j] = xv[l * c + j] * inv;
  }
  return out;
}

// Uniform init on [-sqrt(6/fan_in), +sqrt(6/fan_in)], fan_in = kh*kw*cin.
template <typename T>
Tensor<T> init_filters(index_t kh, index_t kw, index_t cin, index_t cout, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(kh * kw * cin));
  return Tensor<T>::uniform(Shape{kh, kw, cin, cout}, rng, static_cast<T>(-bound),
                            static_cast<T>(bound), true);
}

// One block of the backbone: convolution -> batch norm -> PReLU.
template <typename T>
struct ConvBlockParams {
  Tensor<T> filters;          // (kh,kw,cin,cout)
  Tensor<T> bias;             // (1,1,1,cout)
  Tensor<T> bn_gamma;         // ones
  Tensor<T> bn_beta;          // zeros
  Tensor<T> bn_running_mean;  // buffer, zeros
  Tensor<T> bn_running_var;   // buffer, ones
  Tensor<T> prelu_slope;      // 0.25 everywhere
  index_t pad_h = 0;
  index_t pad_w = 0;

  ConvBlockParams() = default;

  ConvBlockParams(index_t kh, index_t kw, index_t cin, index_t cout, index_t ph, index_t pw,
                  Rng& rng)
      : filters(init_filters<T>(kh, kw, cin, cout, rng)),
        bias(Tensor<T>::zeros(vec_shape(cout), true)),
        bn_gamma(Tensor<T>::full(vec_shape(cout), T(1), true)),
        bn_beta(Tensor<T>::zeros(vec_shape(cout), true)),
        bn_running_mean(Tensor<T>::zeros(vec_shape(cout))),
        bn_running_var(Tensor<T>::full(vec_shape(cout), T(1))),
        prelu_slope(Tensor<T>::full(vec_shape(cout), T(kPreluInitSlope), true)),
        pad_h(ph),
        pad_w(pw) {}

  std::vector<Tensor<T>*> trainable() {
    return {&filters, &bias, &bn_gamma, &bn_beta, &prelu_slope};
  }
  std::vector<Tensor<T>*> buffers() { return {&bn_running_mean, &bn_running_var}; }
};

template <typename T>
Tensor<T> convblock_forward(const Tensor<T>& x, ConvBlockParams<T>& p, Mode mode,
                            bool update_running = true) {
  Tensor<T> y = conv2d(x, p.filters, p.bias, p.pad_h, p.pad_w);
  y = batchnorm(y, p.bn_gamma, p.bn_beta, p.bn_running_mean, p.bn_running_var, mode,
                mode == Mode::kTrain && update_running);
  return prelu(y, p.prelu_slope);
}

}  // namespace gscnn
