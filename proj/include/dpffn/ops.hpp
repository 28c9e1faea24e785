#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "dpffn/kernels.hpp"
#include "dpffn/rng.hpp"
#include "dpffn/tensor.hpp"

namespace dpffn {

namespace detail {

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
  bool same = false;
};

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

inline Broadcast broadcast(const Shape& a, const Shape& b, std::string_view op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  bc.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
      throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
    bc.out[i] = std::max(pa[i], pb[i]);
  }
  const auto sa = strides_of(pa), sb = strides_of(pb);
  bc.stride_a.resize(r);
  bc.stride_b.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    bc.stride_a[i] = pa[i] == 1 ? 0 : sa[i];
    bc.stride_b[i] = pb[i] == 1 ? 0 : sb[i];
  }
  return bc;
}

template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t n = numel(bc.out);
  if (bc.same) {
    for (std::size_t o = 0; o < n; ++o) f(o, o, o);
    return;
  }
  const std::size_t r = bc.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += bc.stride_a[d];
      ib += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.stride_a[d] * bc.out[d];
      ib -= bc.stride_b[d] * bc.out[d];
      idx[d] = 0;
    }
  }
}

// (outer, n, inner) split of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename S, typename Fwd, typename Da, typename Db>
Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b, std::string_view name, Fwd fwd, Da da, Db db) {
  auto bc = broadcast(a.shape(), b.shape(), name);
  std::vector<S> out(numel(bc.out));
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = fwd(pa[ia], pb[ib]); });
  Shape shape = bc.out;
  return make_result<S>(std::move(shape), std::move(out), name, {&a, &b}, [a, b, bc, da, db](Node<S>& self) {
    const S* g = self.grad.data();
    S* ga = grad_of(a);
    S* gb = grad_of(b);
    const S* xa = a.data().data();
    const S* xb = b.data().data();
    for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) ga[ia] += g[o] * da(xa[ia], xb[ib]);
      if (gb) gb[ib] += g[o] * db(xa[ia], xb[ib]);
    });
  });
}

// dx(x, y) is the local derivative dy/dx given input x and output y.
template <typename S, typename Fwd, typename Dx>
Tensor<S> unary_op(const Tensor<S>& x, std::string_view name, Fwd fwd, Dx dx) {
  std::vector<S> out(x.numel());
  const S* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(px[i]);
  return make_result<S>(x.shape(), std::move(out), name, {&x}, [x, dx](Node<S>& self) {
    S* gx = grad_of(x);
    if (!gx) return;
    const S* g = self.grad.data();
    const S* xv = x.data().data();
    const S* yv = self.data.data();
    for (std::size_t i = 0; i < self.data.size(); ++i) gx[i] += g[i] * dx(xv[i], yv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, "add", [](S x, S y) { return x + y; }, [](S, S) { return S{1}; }, [](S, S) { return S{1}; });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, "sub", [](S x, S y) { return x - y; }, [](S, S) { return S{1}; }, [](S, S) { return S{-1}; });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, "mul", [](S x, S y) { return x * y; }, [](S, S y) { return y; }, [](S x, S) { return x; });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, "div", [](S x, S y) { return x / y; }, [](S, S y) { return S{1} / y; },
      [](S x, S y) { return -x / (y * y); });
}

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S>
Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return div(a, b); }

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  return detail::unary_op(x, "scale", [c](S v) { return c * v; }, [c](S, S) { return c; });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& x, S c) {
  return detail::unary_op(x, "add_scalar", [c](S v) { return v + c; }, [](S, S) { return S{1}; });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return detail::unary_op(
      x, "relu", [](S v) { return v > S{0} ? v : S{0}; }, [](S v, S) { return v > S{0} ? S{1} : S{0}; });
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& x) {
  return detail::unary_op(x, "tanh", [](S v) { return std::tanh(v); }, [](S, S y) { return S{1} - y * y; });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return detail::unary_op(
      x, "sigmoid",
      [](S v) {
        if (v >= S{0}) return S{1} / (S{1} + std::exp(-v));
        const S e = std::exp(v);
        return e / (S{1} + e);
      },
      [](S, S y) { return y * (S{1} - y); });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& x) {
  return detail::unary_op(x, "exp", [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

template <typename S>
Tensor<S> log(const Tensor<S>& x) {
  return detail::unary_op(x, "log", [](S v) { return std::log(v); }, [](S v, S) { return S{1} / v; });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& x) {
  return detail::unary_op(x, "sqrt", [](S v) { return std::sqrt(v); }, [](S, S y) { return S{0.5} / y; });
}

template <typename S>
Tensor<S> abs(const Tensor<S>& x) {
  return detail::unary_op(
      x, "abs", [](S v) { return std::abs(v); },
      [](S v, S) { return v > S{0} ? S{1} : (v < S{0} ? S{-1} : S{0}); });
}

/// max(x, lo) elementwise; gradient is zero where the floor is active.
template <typename S>
Tensor<S> clamp_min(const Tensor<S>& x, S lo) {
  return detail::unary_op(
      x, "clamp_min", [lo](S v) { return v > lo ? v : lo; }, [lo](S v, S) { return v > lo ? S{1} : S{0}; });
}

// ---------------------------------------------------------------- shape ops

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  for (auto d : shape)
    if (d == 0) throw ShapeError("reshape: zero dimension in " + to_string(shape));
  return detail::make_result<S>(std::move(shape), x.values(), "reshape", {&x}, [x](Node<S>& self) {
    S* gx = detail::grad_of(x);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

template <typename S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  if (axes.size() != r) throw ShapeError("permute: axis list length does not match rank");
  std::vector<bool> seen(r, false);
  for (auto a : axes) {
    if (a >= r || seen[a]) throw ShapeError("permute: invalid axis permutation");
    seen[a] = true;
  }
  const auto in_strides = detail::strides_of(x.shape());
  Shape out_shape(r);
  std::vector<std::size_t> step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[axes[i]];
    step[i] = in_strides[axes[i]];
  }
  // map[o] = source offset of output element o
  std::vector<std::size_t> map(x.numel());
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < map.size(); ++o) {
    map[o] = src;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      src += step[d];
      if (idx[d] < out_shape[d]) break;
      src -= step[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  std::vector<S> out(map.size());
  const S* px = x.data().data();
  for (std::size_t o = 0; o < map.size(); ++o) out[o] = px[map[o]];
  return detail::make_result<S>(std::move(out_shape), std::move(out), "permute", {&x},
                                [x, map = std::move(map)](Node<S>& self) {
                                  S* gx = detail::grad_of(x);
                                  if (!gx) return;
                                  for (std::size_t o = 0; o < map.size(); ++o) gx[map[o]] += self.grad[o];
                                });
}

/// Swaps the last two axes.
template <typename S>
Tensor<S> transpose(const Tensor<S>& x) {
  if (x.rank() < 2) throw ShapeError("transpose requires rank >= 2");
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of empty list");
  const std::size_t ax = xs[0].normalize_axis(axis);
  Shape out_shape = xs[0].shape();
  out_shape[ax] = 0;
  for (const auto& t : xs) {
    if (t.rank() != xs[0].rank()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < t.rank(); ++d)
      if (d != ax && t.shape()[d] != xs[0].shape()[d])
        throw ShapeError("concat: shape mismatch " + to_string(t.shape()) + " vs " + to_string(xs[0].shape()));
    out_shape[ax] += t.shape()[ax];
  }
  const auto sp = detail::split_at(out_shape, ax);
  std::vector<S> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& t : xs) {
    offsets.push_back(off);
    const std::size_t w = t.shape()[ax] * sp.inner;
    const S* p = t.data().data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy(p + o * w, p + (o + 1) * w, out.begin() + static_cast<std::ptrdiff_t>(o * sp.n * sp.inner + off));
    off += w;
  }
  auto result = detail::make_result<S>(out_shape, std::move(out), "concat", {}, nullptr);
  bool any = false;
  for (const auto& t : xs) any = any || t.requires_grad();
  if (grad_enabled() && any) {
    auto* n = result.node();
    n->requires_grad = true;
    for (const auto& t : xs) n->parents.push_back(t.shared());
    n->backward_fn = [xs, offsets, sp, ax](Node<S>& self) {
      for (std::size_t i = 0; i < xs.size(); ++i) {
        S* gx = detail::grad_of(xs[i]);
        if (!gx) continue;
        const std::size_t w = xs[i].shape()[ax] * sp.inner;
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const S* g = self.grad.data() + o * sp.n * sp.inner + offsets[i];
          for (std::size_t j = 0; j < w; ++j) gx[o * w + j] += g[j];
        }
      }
    };
  }
  return result;
}

template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = x.normalize_axis(axis);
  if (length == 0 || start + length > x.shape()[ax])
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis of size " + std::to_string(x.shape()[ax]));
  const auto sp = detail::split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  std::vector<S> out(numel(out_shape));
  const S* p = x.data().data();
  const std::size_t w = length * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy(p + o * sp.n * sp.inner + start * sp.inner, p + o * sp.n * sp.inner + start * sp.inner + w,
              out.begin() + static_cast<std::ptrdiff_t>(o * w));
  return detail::make_result<S>(std::move(out_shape), std::move(out), "slice", {&x},
                                [x, sp, start, w](Node<S>& self) {
                                  S* gx = detail::grad_of(x);
                                  if (!gx) return;
                                  for (std::size_t o = 0; o < sp.outer; ++o)
                                    for (std::size_t j = 0; j < w; ++j)
                                      gx[o * sp.n * sp.inner + start * sp.inner + j] += self.grad[o * w + j];
                                });
}

// ---------------------------------------------------------------- reductions

template <typename S>
Tensor<S> sum(const Tensor<S>& x, int axis, bool keepdim = false) {
  const std::size_t ax = x.normalize_axis(axis);
  const auto sp = detail::split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  if (keepdim)
    out_shape[ax] = 1;
  else
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  if (out_shape.empty()) out_shape = {1};
  std::vector<S> out(sp.outer * sp.inner, S{0});
  const S* p = x.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += p[(o * sp.n + k) * sp.inner + i];
  return detail::make_result<S>(std::move(out_shape), std::move(out), "sum", {&x}, [x, sp](Node<S>& self) {
    S* gx = detail::grad_of(x);
    if (!gx) return;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.n; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i) gx[(o * sp.n + k) * sp.inner + i] += self.grad[o * sp.inner + i];
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x, int axis, bool keepdim = false) {
  const auto n = x.dim(axis);
  return scale(sum(x, axis, keepdim), S{1} / static_cast<S>(n));
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  return sum(reshape(x, {x.numel()}), 0);
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
  return scale(sum_all(x), S{1} / static_cast<S>(x.numel()));
}

// ---------------------------------------------------------------- normalization

/// Softmax along `axis`, stabilized by max-subtraction.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  const std::size_t ax = x.normalize_axis(axis);
  const auto sp = detail::split_at(x.shape(), ax);
  std::vector<S> out(x.numel());
  const S* p = x.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      S mx = -std::numeric_limits<S>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, p[base + k * sp.inner]);
      S total = 0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const S e = std::exp(p[base + k * sp.inner] - mx);
        out[base + k * sp.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] /= total;
    }
  return detail::make_result<S>(x.shape(), std::move(out), "softmax", {&x}, [x, sp](Node<S>& self) {
    S* gx = detail::grad_of(x);
    if (!gx) return;
    const S* y = self.data.data();
    const S* g = self.grad.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        S dot = 0;
        for (std::size_t k = 0; k < sp.n; ++k) dot += g[base + k * sp.inner] * y[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t j = base + k * sp.inner;
          gx[j] += y[j] * (g[j] - dot);
        }
      }
  });
}

/// Layer normalization over `axis` with learnable per-feature gain and shift
/// (both shaped [dim(axis)]).
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, int axis,
                     S eps = S{1e-5}) {
  const std::size_t ax = x.normalize_axis(axis);
  const auto sp = detail::split_at(x.shape(), ax);
  if (gamma.numel() != sp.n || beta.numel() != sp.n)
    throw ShapeError("layer_norm: gain/shift length must equal normalized axis size " + std::to_string(sp.n));
  const std::size_t groups = sp.outer * sp.inner;
  std::vector<S> xhat(x.numel()), inv_std(groups), out(x.numel());
  const S* p = x.data().data();
  const S* gm = gamma.data().data();
  const S* bt = beta.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      S mu = 0;
      for (std::size_t k = 0; k < sp.n; ++k) mu += p[base + k * sp.inner];
      mu /= static_cast<S>(sp.n);
      S var = 0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const S d = p[base + k * sp.inner] - mu;
        var += d * d;
      }
      var /= static_cast<S>(sp.n);
      const S is = S{1} / std::sqrt(var + eps);
      inv_std[o * sp.inner + i] = is;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const std::size_t j = base + k * sp.inner;
        xhat[j] = (p[j] - mu) * is;
        out[j] = xhat[j] * gm[k] + bt[k];
      }
    }
  return detail::make_result<S>(
      x.shape(), std::move(out), "layer_norm", {&x, &gamma, &beta},
      [x, gamma, beta, sp, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<S>& self) {
        S* gx = detail::grad_of(x);
        S* gg = detail::grad_of(gamma);
        S* gb = detail::grad_of(beta);
        const S* g = self.grad.data();
        const S* gm = gamma.data().data();
        const S n = static_cast<S>(sp.n);
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.n * sp.inner + i;
            S sum_d = 0, sum_dx = 0;
            for (std::size_t k = 0; k < sp.n; ++k) {
              const std::size_t j = base + k * sp.inner;
              if (gg) gg[k] += g[j] * xhat[j];
              if (gb) gb[k] += g[j];
              const S d = g[j] * gm[k];
              sum_d += d;
              sum_dx += d * xhat[j];
            }
            if (!gx) continue;
            const S is = inv_std[o * sp.inner + i];
            for (std::size_t k = 0; k < sp.n; ++k) {
              const std::size_t j = base + k * sp.inner;
              gx[j] += is / n * (n * g[j] * gm[k] - sum_d - xhat[j] * sum_dx);
            }
          }
      });
}

// ---------------------------------------------------------------- products

/// [m,k] x [k,n] -> [m,n], or batched [b,m,k] x [b,k,n] -> [b,m,n].
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  const bool batched = a.rank() == 3;
  if (!((a.rank() == 2 && b.rank() == 2) || (a.rank() == 3 && b.rank() == 3)))
    throw ShapeError("matmul expects two rank-2 or two rank-3 tensors, got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  const std::size_t batch = batched ? a.shape()[0] : 1;
  if (batched && b.shape()[0] != batch) throw ShapeError("matmul: batch size mismatch");
  const std::size_t m = a.shape()[a.rank() - 2], k = a.shape()[a.rank() - 1];
  const std::size_t k2 = b.shape()[b.rank() - 2], n = b.shape()[b.rank() - 1];
  if (k != k2)
    throw ShapeError("matmul: inner dimensions differ " + to_string(a.shape()) + " x " + to_string(b.shape()));
  std::vector<S> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i)
    kernel::gemm(a.data().data() + i * m * k, b.data().data() + i * k * n, out.data() + i * m * n, m, k, n, false,
                 false, false);
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return detail::make_result<S>(std::move(shape), std::move(out), "matmul", {&a, &b},
                                [a, b, batch, m, k, n](Node<S>& self) {
                                  S* ga = detail::grad_of(a);
                                  S* gb = detail::grad_of(b);
                                  for (std::size_t i = 0; i < batch; ++i) {
                                    const S* g = self.grad.data() + i * m * n;
                                    if (ga)
                                      kernel::gemm(g, b.data().data() + i * k * n, ga + i * m * k, m, n, k, false,
                                                   true, true);
                                    if (gb)
                                      kernel::gemm(a.data().data() + i * m * k, g, gb + i * k * n, k, m, n, true,
                                                   false, true);
                                  }
                                });
}

/// Affine map on the last axis: x[..., in] * W[in, out] + b[out].
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  if (w.rank() != 2) throw ShapeError("linear: weight must be rank 2");
  const std::size_t in = w.shape()[0], out_f = w.shape()[1];
  if (x.shape().back() != in)
    throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " + to_string(w.shape()));
  if (b.defined() && b.numel() != out_f) throw ShapeError("linear: bias length mismatch");
  const std::size_t rows = x.numel() / in;
  std::vector<S> out(rows * out_f);
  kernel::gemm(x.data().data(), w.data().data(), out.data(), rows, in, out_f, false, false, false);
  if (b.defined()) {
    const S* pb = b.data().data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < out_f; ++j) out[r * out_f + j] += pb[j];
  }
  Shape shape = x.shape();
  shape.back() = out_f;
  return detail::make_result<S>(std::move(shape), std::move(out), "linear", {&x, &w, &b},
                                [x, w, b, rows, in, out_f](Node<S>& self) {
                                  const S* g = self.grad.data();
                                  if (S* gx = detail::grad_of(x))
                                    kernel::gemm(g, w.data().data(), gx, rows, out_f, in, false, true, true);
                                  if (S* gw = detail::grad_of(w))
                                    kernel::gemm(x.data().data(), g, gw, in, rows, out_f, true, false, true);
                                  if (S* gb = detail::grad_of(b))
                                    for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t j = 0; j < out_f; ++j) gb[j] += g[r * out_f + j];
                                });
}

/// 1-D cross-correlation. x [B, Cin, L], w [Cout, Cin, K], bias [Cout]
/// (may be undefined) -> [B, Cout, (L + 2*padding - K)/stride + 1].
template <typename S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, std::size_t stride,
                 std::size_t padding) {
  if (x.rank() != 3 || w.rank() != 3) throw ShapeError("conv1d expects x [B,Cin,L] and w [Cout,Cin,K]");
  if (stride == 0) throw ShapeError("conv1d: stride must be positive");
  const std::size_t B = x.shape()[0], cin = x.shape()[1], L = x.shape()[2];
  const std::size_t cout = w.shape()[0], K = w.shape()[2];
  if (w.shape()[1] != cin)
    throw ShapeError("conv1d: input channels " + std::to_string(cin) + " != weight channels " +
                     std::to_string(w.shape()[1]));
  if (K > L + 2 * padding)
    throw ShapeError("conv1d: kernel " + std::to_string(K) + " larger than padded input " +
                     std::to_string(L + 2 * padding));
  if (bias.defined() && bias.numel() != cout) throw ShapeError("conv1d: bias length mismatch");
  const std::size_t lout = (L + 2 * padding - K) / stride + 1;
  const std::size_t rows = cin * K, cols = B * lout;

  std::vector<S> col(rows * cols, S{0});
  const S* px = x.data().data();
  for (std::size_t bb = 0; bb < B; ++bb)
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (std::size_t kk = 0; kk < K; ++kk) {
        S* dst = col.data() + (ci * K + kk) * cols + bb * lout;
        const S* src = px + (bb * cin + ci) * L;
        for (std::size_t t = 0; t < lout; ++t) {
          const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t * stride + kk) - static_cast<std::ptrdiff_t>(padding);
          if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(L)) dst[t] = src[pos];
        }
      }
  std::vector<S> mat(cout * cols);
  kernel::gemm(w.data().data(), col.data(), mat.data(), cout, rows, cols, false, false, false);
  std::vector<S> out(B * cout * lout);
  const S* pb = bias.defined() ? bias.data().data() : nullptr;
  for (std::size_t bb = 0; bb < B; ++bb)
    for (std::size_t co = 0; co < cout; ++co) {
      const S add = pb ? pb[co] : S{0};
      for (std::size_t t = 0; t < lout; ++t) out[(bb * cout + co) * lout + t] = mat[co * cols + bb * lout + t] + add;
    }
  return detail::make_result<S>(
      Shape{B, cout, lout}, std::move(out), "conv1d", {&x, &w, &bias},
      [x, w, bias, col = std::move(col), B, cin, L, cout, K, lout, rows, cols, stride, padding](Node<S>& self) {
        std::vector<S> gmat(cout * cols);
        const S* g = self.grad.data();
        for (std::size_t bb = 0; bb < B; ++bb)
          for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t t = 0; t < lout; ++t) gmat[co * cols + bb * lout + t] = g[(bb * cout + co) * lout + t];
        if (S* gw = detail::grad_of(w)) kernel::gemm(gmat.data(), col.data(), gw, cout, cols, rows, false, true, true);
        if (S* gb = detail::grad_of(bias))
          for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t j = 0; j < cols; ++j) gb[co] += gmat[co * cols + j];
        if (S* gx = detail::grad_of(x)) {
          std::vector<S> gcol(rows * cols);
          kernel::gemm(w.data().data(), gmat.data(), gcol.data(), rows, cout, cols, true, false, false);
          for (std::size_t bb = 0; bb < B; ++bb)
            for (std::size_t ci = 0; ci < cin; ++ci)
              for (std::size_t kk = 0; kk < K; ++kk) {
                const S* src = gcol.data() + (ci * K + kk) * cols + bb * lout;
                S* dst = gx + (bb * cin + ci) * L;
                for (std::size_t t = 0; t < lout; ++t) {
                  const std::ptrdiff_t pos =
                      static_cast<std::ptrdiff_t>(t * stride + kk) - static_cast<std::ptrdiff_t>(padding);
                  if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(L)) dst[pos] += src[t];
                }
              }
        }
      });
}

// ---------------------------------------------------------------- misc

/// Inverted dropout: scales survivors by 1/(1-p) in training, identity otherwise.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double p, bool training, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0, 1)");
  if (!training || p == 0.0) return detail::unary_op(x, "dropout", [](S v) { return v; }, [](S, S) { return S{1}; });
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  std::vector<S> mask(x.numel());
  for (auto& m : mask) m = rng.uniform() >= p ? keep_scale : S{0};
  std::vector<S> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  return detail::make_result<S>(x.shape(), std::move(out), "dropout", {&x}, [x, mask = std::move(mask)](Node<S>& self) {
    S* gx = detail::grad_of(x);
    if (!gx) return;
    for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += self.grad[i] * mask[i];
  });
}

/// alpha * a + (1 - alpha) * b, elementwise, with the result pinned inside
/// [min(a,b), max(a,b)] so rounding never leaves the convex hull.
template <typename S>
Tensor<S> gated_mix(const Tensor<S>& alpha, const Tensor<S>& a, const Tensor<S>& b) {
  if (alpha.shape() != a.shape() || a.shape() != b.shape())
    throw ShapeError("gated_mix: shapes differ " + to_string(alpha.shape()) + ", " + to_string(a.shape()) + ", " +
                     to_string(b.shape()));
  std::vector<S> out(a.numel());
  const S* pw = alpha.data().data();
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const S v = pb[i] + pw[i] * (pa[i] - pb[i]);
    out[i] = std::clamp(v, std::min(pa[i], pb[i]), std::max(pa[i], pb[i]));
  }
  return detail::make_result<S>(a.shape(), std::move(out), "gated_mix", {&alpha, &a, &b}, [alpha, a, b](Node<S>& self) {
    S* gw = detail::grad_of(alpha);
    S* ga = detail::grad_of(a);
    S* gb = detail::grad_of(b);
    const S* pw = alpha.data().data();
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const S g = self.grad[i];
      if (gw) gw[i] += g * (pa[i] - pb[i]);
      if (ga) ga[i] += g * pw[i];
      if (gb) gb[i] += g * (S{1} - pw[i]);
    }
  });
}

/// Pearson correlation of two equal-length vectors. Standard deviations are
/// floored at 1e-8 (variance at 1e-16) so constant inputs give a finite 0.
template <typename S>
Tensor<S> pearson(const Tensor<S>& x, const Tensor<S>& y) {
  if (x.numel() != y.numel())
    throw ShapeError("pearson: length mismatch " + std::to_string(x.numel()) + " vs " + std::to_string(y.numel()));
  if (x.numel() < 2) throw ShapeError("pearson: vectors need at least 2 entries");
  const auto xv = reshape(x, {x.numel()});
  const auto yv = reshape(y, {y.numel()});
  const auto cx = sub(xv, mean_all(xv));
  const auto cy = sub(yv, mean_all(yv));
  const auto cov = mean_all(mul(cx, cy));
  const S var_floor = S{1e-16};
  const auto sx = sqrt(clamp_min(mean_all(mul(cx, cx)), var_floor));
  const auto sy = sqrt(clamp_min(mean_all(mul(cy, cy)), var_floor));
  return div(cov, mul(sx, sy));
}

}  // namespace dpffn
