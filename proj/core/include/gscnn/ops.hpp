#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstring>
#include <string>
#include <vector>

#include "gscnn/tensor.hpp"

namespace gscnn {

namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using MapCM = Eigen::Map<const MatRM<T>>;

// Unfolds one image into patch rows: col is (oh*ow) x (kh*kw*cin) row-major.
// Zero padding is materialized here, so the GEMM never sees out-of-range reads.
template <typename T>
void im2col(const T* img, index_t h, index_t w, index_t c, index_t kh, index_t kw, index_t pad_h,
            index_t pad_w, T* col) {
  const index_t oh_n = h + 2 * pad_h - kh + 1;
  const index_t ow_n = w + 2 * pad_w - kw + 1;
  const index_t k = kh * kw * c;
  for (index_t oh = 0; oh < oh_n; ++oh) {
    for (index_t ki = 0; ki < kh; ++ki) {
      const index_t ih = oh + ki - pad_h;
      T* dst_base = col + (oh * ow_n) * k + ki * kw * c;
      if (ih < 0 || ih >= h) {
        for (index_t ow = 0; ow < ow_n; ++ow) std::fill_n(dst_base + ow * k, kw * c, T(0));
        continue;
      }
      const T* src_row = img + ih * w * c;
      for (index_t ow = 0; ow < ow_n; ++ow) {
        T* dst = dst_base + ow * k;
        const index_t iw0 = ow - pad_w;
        const index_t kj_lo = std::max<index_t>(0, -iw0);
        const index_t kj_hi = std::min<index_t>(kw, w - iw0);
        if (kj_lo > 0) std::fill_n(dst, kj_lo * c, T(0));
        if (kj_hi > kj_lo)
          std::copy_n(src_row + (iw0 + kj_lo) * c, (kj_hi - kj_lo) * c, dst + kj_lo * c);
        if (kj_hi < kw) std::fill_n(dst + kj_hi * c, (kw - kj_hi) * c, T(0));
      }
    }
  }
}

// Scatter-add of a patch-row gradient back onto the input image.
template <typename T>
void col2im_add(const T* col, index_t h, index_t w, index_t c, index_t kh, index_t kw,
                index_t pad_h, index_t pad_w, T* img_grad) {
  const index_t oh_n = h + 2 * pad_h - kh + 1;
  const index_t ow_n = w + 2 * pad_w - kw + 1;
  const index_t k = kh * kw * c;
  for (index_t oh = 0; oh < oh_n; ++oh) {
    for (index_t ki = 0; ki < kh; ++ki) {
      const index_t ih = oh + ki - pad_h;
      if (ih < 0 || ih >= h) continue;
      const T* src_base = col + (oh * ow_n) * k + ki * kw * c;
      T* dst_row = img_grad + ih * w * c;
      for (index_t ow = 0; ow < ow_n; ++ow) {
        const T* src = src_base + ow * k;
        const index_t iw0 = ow - pad_w;
        const index_t kj_lo = std::max<index_t>(0, -iw0);
        const index_t kj_hi = std::min<index_t>(kw, w - iw0);
        T* dst = dst_row + iw0 * c;
        for (index_t j = kj_lo * c; j < kj_hi * c; ++j) dst[j] += src[j];
      }
    }
  }
}

}  // namespace detail

// 2-d cross-correlation, stride 1, symmetric zero padding. x is (n,h,w,c),
// w is (kh,kw,cin,cout), b is (1,1,1,cout). Output (n, h+2ph-kh+1, w+2pw-kw+1, cout).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, index_t pad_h,
                 index_t pad_w) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  const index_t kh = ws.n, kw = ws.h, cin = ws.w, cout = ws.c;
  if (pad_h < 0 || pad_w < 0) throw std::invalid_argument("conv2d: negative padding");
  if (xs.c != cin)
    throw std::invalid_argument("conv2d: input channel count c=" + std::to_string(xs.c) +
                                " does not match filter cin=" + std::to_string(cin));
  if (kh > xs.h + 2 * pad_h)
    throw std::invalid_argument("conv2d: kernel height kh=" + std::to_string(kh) +
                                " exceeds padded input height " + std::to_string(xs.h + 2 * pad_h));
  if (kw > xs.w + 2 * pad_w)
    throw std::invalid_argument("conv2d: kernel width kw=" + std::to_string(kw) +
                                " exceeds padded input width " + std::to_string(xs.w + 2 * pad_w));
  if (b.size() != cout)
    throw std::invalid_argument("conv2d: bias length " + std::to_string(b.size()) +
                                " does not match cout=" + std::to_string(cout));

  const index_t oh = xs.h + 2 * pad_h - kh + 1;
  const index_t ow = xs.w + 2 * pad_w - kw + 1;
  const index_t m = oh * ow;
  const index_t k = kh * kw * cin;
  const Shape out_shape{xs.n, oh, ow, cout};

  auto backward = [xs, kh, kw, cin, cout, pad_h, pad_w, oh, ow, m, k](detail::Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    auto& bn = *self.parents[2];
    detail::MapCM<T> wmat(wn.value.data(), k, cout);
    std::vector<T> col(static_cast<std::size_t>(m * k));
    std::vector<T> dcol;
    if (xn.requires_grad) dcol.resize(static_cast<std::size_t>(m * k));
    if (wn.requires_grad) wn.ensure_grad();
    if (bn.requires_grad) bn.ensure_grad();
    if (xn.requires_grad) xn.ensure_grad();
    for (index_t i = 0; i < xs.n; ++i) {
      detail::MapCM<T> dy(self.grad.data() + i * m * cout, m, cout);
      if (wn.requires_grad || xn.requires_grad)
        detail::im2col(xn.value.data() + i * xs.h * xs.w * xs.c, xs.h, xs.w, xs.c, kh, kw, pad_h,
                       pad_w, col.data());
      if (wn.requires_grad) {
        detail::MapM<T> dw(wn.grad.data(), k, cout);
        detail::MapCM<T> colm(col.data(), m, k);
        dw.noalias() += colm.transpose() * dy;
      }
      if (bn.requires_grad) {
        // Fixed-order accumulation: Eigen's vectorized column reduction splits
        // head/tail by pointer alignment, so its rounding depends on where the
        // heap happened to place this gradient buffer. Near-zero bias gradients
        // then flip sign between otherwise identical runs.
        T* db = bn.grad.data();
        const T* dyp = self.grad.data() + i * m * cout;
        for (index_t r = 0; r < m; ++r)
          for (index_t c2 = 0; c2 < cout; ++c2) db[c2] += dyp[r * cout + c2];
      }
      if (xn.requires_grad) {
        detail::MapM<T> dcolm(dcol.data(), m, k);
        dcolm.noalias() = dy * wmat.transpose();
        detail::col2im_add(dcol.data(), xs.h, xs.w, xs.c, kh, kw, pad_h, pad_w,
                           xn.grad.data() + i * xs.h * xs.w * xs.c);
      }
    }
  };

  Tensor<T> out = detail::make_op_output<T>("conv2d", out_shape, {x, w, b}, backward);
  detail::MapCM<T> wmat(w.data(), k, cout);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(b.data(), cout);
  std::vector<T> col(static_cast<std::size_t>(m * k));
  for (index_t i = 0; i < xs.n; ++i) {
    detail::im2col(x.data() + i * xs.h * xs.w * xs.c, xs.h, xs.w, xs.c, kh, kw, pad_h, pad_w,
                   col.data());
    detail::MapCM<T> colm(col.data(), m, k);
    detail::MapM<T> outm(out.data() + i * m * cout, m, cout);
    outm.noalias() = colm * wmat;
    outm.rowwise() += bias.transpose();
  }
  return out;
}

// 2x2 max pooling, stride 2. Gradient routes to the argmax position only;
// ties go to the first element in row-major scan order.
template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.h % 2 != 0)
    throw std::invalid_argument("maxpool2x2: height " + std::to_string(s.h) + " is odd");
  if (s.w % 2 != 0)
    throw std::invalid_argument("maxpool2x2: width " + std::to_string(s.w) + " is odd");
  const Shape os{s.n, s.h / 2, s.w / 2, s.c};

  const bool rec = grad_enabled() && x.requires_grad();
  auto argmax = std::make_shared<std::vector<index_t>>();
  if (rec) argmax->resize(static_cast<std::size_t>(os.size()));

  auto backward = [argmax](detail::Node<T>& self) {
    auto& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& gx = xn.ensure_grad();
    const auto& am = *argmax;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[am[i]] += self.grad[i];
  };

  Tensor<T> out = detail::make_op_output<T>("maxpool2x2", os, {x}, backward);
  const T* xv = x.data();
  T* ov = out.data();
  index_t oi = 0;
  for (index_t n = 0; n < s.n; ++n)
    for (index_t ohh = 0; ohh < os.h; ++ohh)
      for (index_t oww = 0; oww < os.w; ++oww) {
        const index_t base = ((n * s.h + 2 * ohh) * s.w + 2 * oww) * s.c;
        const index_t cand[4] = {base, base + s.c, base + s.w * s.c, base + s.w * s.c + s.c};
        for (index_t c = 0; c < s.c; ++c, ++oi) {
          index_t best = cand[0] + c;
          T bv = xv[best];
          for (int j = 1; j < 4; ++j) {
            const index_t idx = cand[j] + c;
            if (xv[idx] > bv) {
              bv = xv[idx];
              best = idx;
            }
          }
          ov[oi] = bv;
          if (rec) (*argmax)[oi] = best;
        }
      }
  return out;
}

namespace detail {

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape()))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                                b.shape().str());
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("add", a, b);
  auto backward = [](detail::Node<T>& self) {
    for (int p = 0; p < 2; ++p) {
      auto& pn = *self.parents[p];
      if (!pn.requires_grad) continue;
      auto& g = pn.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  };
  Tensor<T> out = detail::make_op_output<T>("add", a.shape(), {a, b}, backward);
  for (index_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("sub", a, b);
  auto backward = [](detail::Node<T>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    if (an.requires_grad) {
      auto& g = an.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (bn.requires_grad) {
      auto& g = bn.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  };
  Tensor<T> out = detail::make_op_output<T>("sub", a.shape(), {a, b}, backward);
  for (index_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("mul", a, b);
  auto backward = [](detail::Node<T>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    if (an.requires_grad) {
      auto& g = an.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bn.value[i];
    }
    if (bn.requires_grad) {
      auto& g = bn.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * an.value[i];
    }
  };
  Tensor<T> out = detail::make_op_output<T>("mul", a.shape(), {a, b}, backward);
  for (index_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  auto backward = [s](detail::Node<T>& self) {
    auto& an = *self.parents[0];
    if (!an.requires_grad) return;
    auto& g = an.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
  };
  Tensor<T> out = detail::make_op_output<T>("scale", a.shape(), {a}, backward);
  for (index_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * s;
  return out;
}

// Sum of all elements, as a (1,1,1,1) scalar tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  auto backward = [](detail::Node<T>& self) {
    auto& an = *self.parents[0];
    if (!an.requires_grad) return;
    auto& g = an.ensure_grad();
    const T gs = self.grad[0];
    for (auto& v : g) v += gs;
  };
  Tensor<T> out = detail::make_op_output<T>("sum", Shape{1, 1, 1, 1}, {a}, backward);
  T acc = T(0);
  for (index_t i = 0; i < a.size(); ++i) acc += a.data()[i];
  out.data()[0] = acc;
  return out;
}

// Concatenation along the batch dimension.
template <typename T>
Tensor<T> concat_batch(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.h != bs.h || as.w != bs.w || as.c != bs.c)
    throw std::invalid_argument("concat_batch: shape mismatch " + as.str() + " vs " + bs.str());
  const Shape os{as.n + bs.n, as.h, as.w, as.c};
  const index_t an = as.size();
  auto backward = [an](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (index_t i = 0; i < an; ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = an; i < self.grad.size(); ++i) g[i - an] += self.grad[i];
    }
  };
  Tensor<T> out = detail::make_op_output<T>("concat_batch", os, {a, b}, backward);
  std::copy_n(a.data(), a.size(), out.data());
  std::copy_n(b.data(), b.size(), out.data() + a.size());
  return out;
}

// Contiguous batch slice [start, start+count).
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, index_t start, index_t count) {
  const Shape& s = x.shape();
  if (start < 0 || count < 0 || start + count > s.n)
    throw std::invalid_argument("slice_batch: range [" + std::to_string(start) + "," +
                                std::to_string(start + count) + ") outside batch of " +
                                std::to_string(s.n));
  const index_t stride = s.h * s.w * s.c;
  const Shape os{count, s.h, s.w, s.c};
  auto backward = [start, stride](detail::Node<T>& self) {
    auto& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.ensure_grad();
    const index_t off = start * stride;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
  };
  Tensor<T> out = detail::make_op_output<T>("slice_batch", os, {x}, backward);
  std::copy_n(x.data() + start * stride, os.size(), out.data());
  return out;
}

// Same data, new shape (element count must match).
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape s) {
  if (s.size() != x.size())
    throw std::invalid_argument("reshape: cannot view " + x.shape().str() + " as " + s.str());
  auto backward = [](detail::Node<T>& self) {
    auto& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    auto& g = xn.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  };
  Tensor<T> out = detail::make_op_output<T>("reshape", s, {x}, backward);
  std::copy_n(x.data(), x.size(), out.data());
  return out;
}

}  // namespace gscnn
