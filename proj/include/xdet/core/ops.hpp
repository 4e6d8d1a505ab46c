#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "xdet/core/autograd.hpp"

// Expression-style free functions over Var<T>. Every op allocates its output
// and registers an analytic backward; composition gives exact gradients.

namespace xdet {

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check<input_error>(a.val().same_shape(b.val()),
                     "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  out.arr() = a.val().arr() + b.val().arr();
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    self.inputs[0]->accum_grad(self.grad);
    self.inputs[1]->accum_grad(self.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check<input_error>(a.val().same_shape(b.val()), "sub: shape mismatch");
  Tensor<T> out(a.shape());
  out.arr() = a.val().arr() - b.val().arr();
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    self.inputs[0]->accum_grad(self.grad);
    Tensor<T> gb(self.grad.shape());
    gb.arr() = -self.grad.arr();
    self.inputs[1]->accum_grad(gb);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check<input_error>(a.val().same_shape(b.val()), "mul: shape mismatch");
  Tensor<T> out(a.shape());
  out.arr() = a.val().arr() * b.val().arr();
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    Tensor<T> ga(self.grad.shape()), gb(self.grad.shape());
    ga.arr() = self.grad.arr() * self.inputs[1]->value.arr();
    gb.arr() = self.grad.arr() * self.inputs[0]->value.arr();
    self.inputs[0]->accum_grad(ga);
    self.inputs[1]->accum_grad(gb);
  });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  check<input_error>(a.val().same_shape(b.val()), "div: shape mismatch");
  Tensor<T> out(a.shape());
  out.arr() = a.val().arr() / b.val().arr();
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.inputs[0]->value.arr();
    const auto& bv = self.inputs[1]->value.arr();
    Tensor<T> ga(self.grad.shape()), gb(self.grad.shape());
    ga.arr() = self.grad.arr() / bv;
    gb.arr() = -self.grad.arr() * av / (bv * bv);
    self.inputs[0]->accum_grad(ga);
    self.inputs[1]->accum_grad(gb);
  });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
  Tensor<T> out(a.shape());
  out.arr() = -a.val().arr();
  return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    Tensor<T> g(self.grad.shape());
    g.arr() = -self.grad.arr();
    self.inputs[0]->accum_grad(g);
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  out.arr() = a.val().arr() * s;
  return make_op<T>(std::move(out), {a}, [s](Node<T>& self) {
    Tensor<T> g(self.grad.shape());
    g.arr() = self.grad.arr() * s;
    self.inputs[0]->accum_grad(g);
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  out.arr() = a.val().arr() + s;
  return make_op<T>(std::move(out), {a},
                    [](Node<T>& self) { self.inputs[0]->accum_grad(self.grad); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a.shape());
  const T* x = a.val().data();
  T* y = out.data();
  for (Index i = 0; i < out.size(); ++i)
    y[i] = x[i] >= T(0) ? T(1) / (T(1) + std::exp(-x[i]))
                        : std::exp(x[i]) / (T(1) + std::exp(x[i]));
  Tensor<T> saved = out;  // shares storage
  return make_op<T>(std::move(out), {a}, [saved](Node<T>& self) {
    Tensor<T> g(self.grad.shape());
    g.arr() = self.grad.arr() * saved.arr() * (T(1) - saved.arr());
    self.inputs[0]->accum_grad(g);
  });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
  Tensor<T> out(a.shape());
  const T* x = a.val().data();
  T* y = out.data();
  for (Index i = 0; i < out.size(); ++i) {
    T s = x[i] >= T(0) ? T(1) / (T(1) + std::exp(-x[i]))
                       : std::exp(x[i]) / (T(1) + std::exp(x[i]));
    y[i] = x[i] * s;
  }
  return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    const T* x = self.inputs[0]->value.data();
    const T* go = self.grad.data();
    Tensor<T> g(self.grad.shape());
    T* gi = g.data();
    for (Index i = 0; i < g.size(); ++i) {
      T s = x[i] >= T(0) ? T(1) / (T(1) + std::exp(-x[i]))
                         : std::exp(x[i]) / (T(1) + std::exp(x[i]));
      gi[i] = go[i] * (s + x[i] * s * (T(1) - s));
    }
    self.inputs[0]->accum_grad(g);
  });
}

template <typename T>
Var<T> vexp(const Var<T>& a) {
  Tensor<T> out(a.shape());
  out.arr() = a.val().arr().exp();
  Tensor<T> saved = out;
  return make_op<T>(std::move(out), {a}, [saved](Node<T>& self) {
    Tensor<T> g(self.grad.shape());
    g.arr() = self.grad.arr() * saved.arr();
    self.inputs[0]->accum_grad(g);
  });
}

template <typename T>
Var<T> vlog(const Var<T>& a) {
  Tensor<T> out(a.shape());
  out.arr() = a.val().arr().log();
  return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    Tensor<T> g(self.grad.shape());
    g.arr() = self.grad.arr() / self.inputs[0]->value.arr();
    self.inputs[0]->accum_grad(g);
  });
}

template <typename T>
Var<T> vabs(const Var<T>& a) {
  Tensor<T> out(a.shape());
  out.arr() = a.val().arr().abs();
  return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    Tensor<T> g(self.grad.shape());
    g.arr() = self.grad.arr() * self.inputs[0]->value.arr().sign();
    self.inputs[0]->accum_grad(g);
  });
}

template <typename T>
Var<T> vatan(const Var<T>& a) {
  Tensor<T> out(a.shape());
  const T* x = a.val().data();
  T* y = out.data();
  for (Index i = 0; i < out.size(); ++i) y[i] = std::atan(x[i]);
  return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    Tensor<T> g(self.grad.shape());
    g.arr() = self.grad.arr() / (T(1) + self.inputs[0]->value.arr().square());
    self.inputs[0]->accum_grad(g);
  });
}

template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  Tensor<T> out(a.shape());
  out.arr() = a.val().arr().max(lo).min(hi);
  return make_op<T>(std::move(out), {a}, [lo, hi](Node<T>& self) {
    const auto& x = self.inputs[0]->value.arr();
    Tensor<T> g(self.grad.shape());
    g.arr() = self.grad.arr() * ((x >= lo) && (x <= hi)).template cast<T>();
    self.inputs[0]->accum_grad(g);
  });
}

template <typename T>
Var<T> minimum(const Var<T>& a, const Var<T>& b) {
  check<input_error>(a.val().same_shape(b.val()), "minimum: shape mismatch");
  Tensor<T> out(a.shape());
  out.arr() = a.val().arr().min(b.val().arr());
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.inputs[0]->value.arr();
    const auto& bv = self.inputs[1]->value.arr();
    auto take_a = (av <= bv).template cast<T>();
    Tensor<T> ga(self.grad.shape()), gb(self.grad.shape());
    ga.arr() = self.grad.arr() * take_a;
    gb.arr() = self.grad.arr() * (T(1) - take_a);
    self.inputs[0]->accum_grad(ga);
    self.inputs[1]->accum_grad(gb);
  });
}

template <typename T>
Var<T> maximum(const Var<T>& a, const Var<T>& b) {
  check<input_error>(a.val().same_shape(b.val()), "maximum: shape mismatch");
  Tensor<T> out(a.shape());
  out.arr() = a.val().arr().max(b.val().arr());
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.inputs[0]->value.arr();
    const auto& bv = self.inputs[1]->value.arr();
    auto take_a = (av >= bv).template cast<T>();
    Tensor<T> ga(self.grad.shape()), gb(self.grad.shape());
    ga.arr() = self.grad.arr() * take_a;
    gb.arr() = self.grad.arr() * (T(1) - take_a);
    self.inputs[0]->accum_grad(ga);
    self.inputs[1]->accum_grad(gb);
  });
}

// Numerically stable binary cross-entropy on logits, elementwise.
template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Var<T>& targets) {
  check<input_error>(logits.val().same_shape(targets.val()), "bce: shape mismatch");
  Tensor<T> out(logits.shape());
  const T* x = logits.val().data();
  const T* t = targets.val().data();
  T* y = out.data();
  for (Index i = 0; i < out.size(); ++i)
    y[i] = std::max(x[i], T(0)) - x[i] * t[i] + std::log1p(std::exp(-std::abs(x[i])));
  return make_op<T>(std::move(out), {logits, targets}, [](Node<T>& self) {
    const T* x = self.inputs[0]->value.data();
    const T* t = self.inputs[1]->value.data();
    const T* go = self.grad.data();
    Tensor<T> g(self.grad.shape());
    T* gi = g.data();
    for (Index i = 0; i < g.size(); ++i) {
      T s = x[i] >= T(0) ? T(1) / (T(1) + std::exp(-x[i]))
                         : std::exp(x[i]) / (T(1) + std::exp(x[i]));
      gi[i] = go[i] * (s - t[i]);
    }
    self.inputs[0]->accum_grad(g);
    if (self.inputs[1]->requires_grad) {
      Tensor<T> gt(self.grad.shape());
      gt.arr() = -self.grad.arr() * self.inputs[0]->value.arr();
      self.inputs[1]->accum_grad(gt);
    }
  });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
  Tensor<T> out = Tensor<T>::scalar(a.val().arr().sum());
  return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    Tensor<T> g(self.inputs[0]->value.shape());
    g.arr().setConstant(self.grad[0]);
    self.inputs[0]->accum_grad(g);
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// ------------------------------------------------------------- shape plumbing

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.val().reshaped(std::move(shape));
  return make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    self.inputs[0]->accum_grad(self.grad.reshaped(self.inputs[0]->value.shape()));
  });
}

namespace detail {

inline Shape permuted_shape(const Shape& s, const std::vector<int>& dims) {
  Shape out(dims.size());
  for (size_t i = 0; i < dims.size(); ++i) out[i] = s[static_cast<size_t>(dims[i])];
  return out;
}

// Copies src into dst where dst axis i reads src axis dims[i].
template <typename T>
void permute_copy(const Tensor<T>& src, Tensor<T>& dst, const std::vector<int>& dims) {
  const int nd = src.ndim();
  const Shape& ss = src.shape();
  std::vector<Index> src_strides(nd, 1);
  for (int i = nd - 2; i >= 0; --i) src_strides[i] = src_strides[i + 1] * ss[i + 1];
  std::vector<Index> out_src_stride(nd);
  for (int i = 0; i < nd; ++i) out_src_stride[i] = src_strides[static_cast<size_t>(dims[i])];
  const Shape& os = dst.shape();
  std::vector<Index> idx(nd, 0);
  const T* sp = src.data();
  T* dp = dst.data();
  const Index n = dst.size();
  Index src_off = 0;
  for (Index flat = 0; flat < n; ++flat) {
    dp[flat] = sp[src_off];
    for (int ax = nd - 1; ax >= 0; --ax) {
      if (++idx[ax] < os[ax]) {
        src_off += out_src_stride[ax];
        break;
      }
      idx[ax] = 0;
      src_off -= out_src_stride[ax] * (os[ax] - 1);
    }
  }
}

}  // namespace detail

template <typename T>
Var<T> permute(const Var<T>& a, const std::vector<int>& dims) {
  check<input_error>(static_cast<int>(dims.size()) == a.ndim(), "permute rank mismatch");
  Tensor<T> out(detail::permuted_shape(a.shape(), dims));
  detail::permute_copy(a.val(), out, dims);
  return make_op<T>(std::move(out), {a}, [dims](Node<T>& self) {
    std::vector<int> inv(dims.size());
    for (size_t i = 0; i < dims.size(); ++i) inv[static_cast<size_t>(dims[i])] = static_cast<int>(i);
    Tensor<T> g(self.inputs[0]->value.shape());
    detail::permute_copy(self.grad, g, inv);
    self.inputs[0]->accum_grad(g);
  });
}

template <typename T>
Var<T> slice(const Var<T>& a, int axis, Index start, Index len) {
  const Shape& s = a.shape();
  if (axis < 0) axis += a.ndim();
  check<input_error>(axis >= 0 && axis < a.ndim(), "slice axis out of range");
  check<input_error>(start >= 0 && len >= 0 && start + len <= s[static_cast<size_t>(axis)],
                     "slice range out of bounds");
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int i = axis + 1; i < a.ndim(); ++i) inner *= s[static_cast<size_t>(i)];
  Shape os = s;
  os[static_cast<size_t>(axis)] = len;
  Tensor<T> out(os);
  const Index axdim = s[static_cast<size_t>(axis)];
  const T* sp = a.val().data();
  T* dp = out.data();
  for (Index o = 0; o < outer; ++o)
    std::copy(sp + (o * axdim + start) * inner, sp + (o * axdim + start + len) * inner,
              dp + o * len * inner);
  return make_op<T>(std::move(out), {a}, [axis, start, len, outer, inner, axdim](Node<T>& self) {
    Tensor<T> g(self.inputs[0]->value.shape());
    const T* gp = self.grad.data();
    T* dp = g.data();
    for (Index o = 0; o < outer; ++o)
      std::copy(gp + o * len * inner, gp + (o + 1) * len * inner,
                dp + (o * axdim + start) * inner);
    self.inputs[0]->accum_grad(g);
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  check<input_error>(!parts.empty(), "concat: no inputs");
  const int nd = parts[0].ndim();
  if (axis < 0) axis += nd;
  check<input_error>(axis >= 0 && axis < nd, "concat axis out of range");
  Shape os = parts[0].shape();
  Index total = 0;
  for (const auto& p : parts) {
    check<input_error>(p.ndim() == nd, "concat rank mismatch");
    for (int i = 0; i < nd; ++i)
      check<input_error>(i == axis || p.shape()[static_cast<size_t>(i)] == os[static_cast<size_t>(i)],
                         "concat: non-axis dims differ");
    total += p.shape()[static_cast<size_t>(axis)];
  }
  os[static_cast<size_t>(axis)] = total;
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= os[static_cast<size_t>(i)];
  for (int i = axis + 1; i < nd; ++i) inner *= os[static_cast<size_t>(i)];
  Tensor<T> out(os);
  T* dp = out.data();
  std::vector<Index> axdims;
  Index off = 0;
  for (const auto& p : parts) {
    const Index ad = p.shape()[static_cast<size_t>(axis)];
    axdims.push_back(ad);
    const T* sp = p.val().data();
    for (Index o = 0; o < outer; ++o)
      std::copy(sp + o * ad * inner, sp + (o + 1) * ad * inner,
                dp + (o * total + off) * inner);
    off += ad;
  }
  return make_op<T>(std::move(out), parts, [axdims, outer, inner, total](Node<T>& self) {
    const T* gp = self.grad.data();
    Index off = 0;
    for (size_t k = 0; k < self.inputs.size(); ++k) {
      const Index ad = axdims[k];
      if (self.inputs[k]->requires_grad) {
        Tensor<T> g(self.inputs[k]->value.shape());
        T* dp = g.data();
        for (Index o = 0; o < outer; ++o)
          std::copy(gp + (o * total + off) * inner, gp + (o * total + off + ad) * inner,
                    dp + o * ad * inner);
        self.inputs[k]->accum_grad(g);
      }
      off += ad;
    }
  });
}

// Gathers rows of a 2-d tensor; backward scatter-adds.
template <typename T>
Var<T> index_select_rows(const Var<T>& a, std::vector<Index> rows) {
  check<input_error>(a.ndim() == 2, "index_select_rows needs a 2-d tensor");
  const Index cols = a.dim(1);
  Tensor<T> out(Shape{static_cast<Index>(rows.size()), cols});
  const T* sp = a.val().data();
  T* dp = out.data();
  for (size_t i = 0; i < rows.size(); ++i) {
    check<input_error>(rows[i] >= 0 && rows[i] < a.dim(0), "row index out of range");
    std::copy(sp + rows[i] * cols, sp + (rows[i] + 1) * cols, dp + static_cast<Index>(i) * cols);
  }
  return make_op<T>(std::move(out), {a}, [rows, cols](Node<T>& self) {
    Tensor<T> g(self.inputs[0]->value.shape());
    const T* gp = self.grad.data();
    T* dp = g.data();
    for (size_t i = 0; i < rows.size(); ++i)
      for (Index c = 0; c < cols; ++c) dp[rows[i] * cols + c] += gp[static_cast<Index>(i) * cols + c];
    self.inputs[0]->accum_grad(g);
  });
}

// ------------------------------------------------------------------- matmuls

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  check<input_error>(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
                     "matmul: incompatible shapes");
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out(Shape{m, n});
  out.mat(m, n).noalias() = a.val().mat(m, k) * b.val().mat(k, n);
  return make_op<T>(std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto gc = self.grad.mat(m, n);
    if (self.inputs[0]->requires_grad) {
      Tensor<T> ga(Shape{m, k});
      ga.mat(m, k).noalias() = gc * self.inputs[1]->value.mat(k, n).transpose();
      self.inputs[0]->accum_grad(ga);
    }
    if (self.inputs[1]->requires_grad) {
      Tensor<T> gb(Shape{k, n});
      gb.mat(k, n).noalias() = self.inputs[0]->value.mat(m, k).transpose() * gc;
      self.inputs[1]->accum_grad(gb);
    }
  });
}

// Batched matmul over leading axis: (B,M,K) x (B,K,N), or (B,N,K) when
// transpose_b is set.
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_b = false) {
  check<input_error>(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0),
                     "bmm: need matching 3-d batches");
  const Index bs = a.dim(0), m = a.dim(1), k = a.dim(2);
  const Index n = transpose_b ? b.dim(1) : b.dim(2);
  check<input_error>(transpose_b ? b.dim(2) == k : b.dim(1) == k, "bmm: inner dim mismatch");
  Tensor<T> out(Shape{bs, m, n});
  for (Index i = 0; i < bs; ++i) {
    typename Tensor<T>::ConstMatMap am(a.val().data() + i * m * k, m, k);
    if (transpose_b) {
      typename Tensor<T>::ConstMatMap bm(b.val().data() + i * n * k, n, k);
      typename Tensor<T>::MatMap om(out.data() + i * m * n, m, n);
      om.noalias() = am * bm.transpose();
    } else {
      typename Tensor<T>::ConstMatMap bm(b.val().data() + i * k * n, k, n);
      typename Tensor<T>::MatMap om(out.data() + i * m * n, m, n);
      om.noalias() = am * bm;
    }
  }
  return make_op<T>(std::move(out), {a, b}, [bs, m, k, n, transpose_b](Node<T>& self) {
    using CMap = typename Tensor<T>::ConstMatMap;
    using Map = typename Tensor<T>::MatMap;
    const Tensor<T>& av = self.inputs[0]->value;
    const Tensor<T>& bv = self.inputs[1]->value;
    Tensor<T> ga, gb;
    if (self.inputs[0]->requires_grad) ga = Tensor<T>::zeros(av.shape());
    if (self.inputs[1]->requires_grad) gb = Tensor<T>::zeros(bv.shape());
    for (Index i = 0; i < bs; ++i) {
      CMap gc(self.grad.data() + i * m * n, m, n);
      if (ga.defined()) {
        Map gam(ga.data() + i * m * k, m, k);
        if (transpose_b) {
          CMap bm(bv.data() + i * n * k, n, k);
          gam.noalias() = gc * bm;
        } else {
          CMap bm(bv.data() + i * k * n, k, n);
          gam.noalias() = gc * bm.transpose();
        }
      }
      if (gb.defined()) {
        CMap am(av.data() + i * m * k, m, k);
        if (transpose_b) {
          Map gbm(gb.data() + i * n * k, n, k);
          gbm.noalias() = gc.transpose() * am;
        } else {
          Map gbm(gb.data() + i * k * n, k, n);
          gbm.noalias() = am.transpose() * gc;
        }
      }
    }
    if (ga.defined()) self.inputs[0]->accum_grad(ga);
    if (gb.defined()) self.inputs[1]->accum_grad(gb);
  });
}

// ----------------------------------------------------------- row-vector forms

template <typename T>
Var<T> add_rowvec(const Var<T>& x, const Var<T>& v) {
  check<input_error>(x.ndim() == 2 && v.size() == x.dim(1), "add_rowvec: shape mismatch");
  const Index r = x.dim(0), c = x.dim(1);
  Tensor<T> out(Shape{r, c});
  out.mat(r, c) = x.val().mat(r, c).rowwise() +
                  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(v.val().data(), c);
  return make_op<T>(std::move(out), {x, v}, [r, c](Node<T>& self) {
    self.inputs[0]->accum_grad(self.grad);
    if (self.inputs[1]->requires_grad) {
      Tensor<T> gv(self.inputs[1]->value.shape());
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gv.data(), c) =
          self.grad.mat(r, c).colwise().sum();
      self.inputs[1]->accum_grad(gv);
    }
  });
}

template <typename T>
Var<T> mul_rowvec(const Var<T>& x, const Var<T>& v) {
  check<input_error>(x.ndim() == 2 && v.size() == x.dim(1), "mul_rowvec: shape mismatch");
  const Index r = x.dim(0), c = x.dim(1);
  Tensor<T> out(Shape{r, c});
  const T* xp = x.val().data();
  const T* vp = v.val().data();
  T* op = out.data();
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) op[i * c + j] = xp[i * c + j] * vp[j];
  return make_op<T>(std::move(out), {x, v}, [r, c](Node<T>& self) {
    const T* xp = self.inputs[0]->value.data();
    const T* vp = self.inputs[1]->value.data();
    const T* gp = self.grad.data();
    if (self.inputs[0]->requires_grad) {
      Tensor<T> gx(self.inputs[0]->value.shape());
      T* p = gx.data();
      for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < c; ++j) p[i * c + j] = gp[i * c + j] * vp[j];
      self.inputs[0]->accum_grad(gx);
    }
    if (self.inputs[1]->requires_grad) {
      Tensor<T> gv(self.inputs[1]->value.shape());
      T* p = gv.data();
      for (Index j = 0; j < c; ++j) p[j] = T(0);
      for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < c; ++j) p[j] += gp[i * c + j] * xp[i * c + j];
      self.inputs[1]->accum_grad(gv);
    }
  });
}

// y[b,c,h,w] = x[b,c,h,w] * gamma[c] + beta[c]
template <typename T>
Var<T> channel_scale_shift(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  check<input_error>(x.ndim() == 4, "channel_scale_shift needs NCHW");
  const Index b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  check<input_error>(gamma.size() == c && beta.size() == c, "affine param size mismatch");
  Tensor<T> out(x.shape());
  const T* xp = x.val().data();
  const T* gp = gamma.val().data();
  const T* bp = beta.val().data();
  T* op = out.data();
  for (Index i = 0; i < b; ++i)
    for (Index ch = 0; ch < c; ++ch) {
      const Index base = (i * c + ch) * hw;
      for (Index k = 0; k < hw; ++k) op[base + k] = xp[base + k] * gp[ch] + bp[ch];
    }
  return make_op<T>(std::move(out), {x, gamma, beta}, [b, c, hw](Node<T>& self) {
    const T* xp = self.inputs[0]->value.data();
    const T* gp = self.inputs[1]->value.data();
    const T* go = self.grad.data();
    if (self.inputs[0]->requires_grad) {
      Tensor<T> gx(self.inputs[0]->value.shape());
      T* p = gx.data();
      for (Index i = 0; i < b; ++i)
        for (Index ch = 0; ch < c; ++ch) {
          const Index base = (i * c + ch) * hw;
          for (Index k = 0; k < hw; ++k) p[base + k] = go[base + k] * gp[ch];
        }
      self.inputs[0]->accum_grad(gx);
    }
    Tensor<T> gg(Shape{c}), gb(Shape{c});
    T* ggp = gg.data();
    T* gbp = gb.data();
    for (Index ch = 0; ch < c; ++ch) ggp[ch] = gbp[ch] = T(0);
    for (Index i = 0; i < b; ++i)
      for (Index ch = 0; ch < c; ++ch) {
        const Index base = (i * c + ch) * hw;
        T sg = 0, sb = 0;
        for (Index k = 0; k < hw; ++k) {
          sg += go[base + k] * xp[base + k];
          sb += go[base + k];
        }
        ggp[ch] += sg;
        gbp[ch] += sb;
      }
    self.inputs[1]->accum_grad(gg);
    self.inputs[2]->accum_grad(gb);
  });
}

// --------------------------------------------------------------- row normals

// Per-row standardization: y = (x - mean) / sqrt(var + eps).
template <typename T>
Var<T> normalize_rows(const Var<T>& x, T eps) {
  check<input_error>(x.ndim() == 2, "normalize_rows needs a 2-d tensor");
  const Index r = x.dim(0), c = x.dim(1);
  Tensor<T> out(Shape{r, c});
  Tensor<T> inv_std(Shape{r});
  const T* xp = x.val().data();
  T* op = out.data();
  T* sp = inv_std.data();
  for (Index i = 0; i < r; ++i) {
    const T* row = xp + i * c;
    T mu = 0;
    for (Index j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (Index j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    sp[i] = is;
    for (Index j = 0; j < c; ++j) op[i * c + j] = (row[j] - mu) * is;
  }
  Tensor<T> saved_y = out;
  return make_op<T>(std::move(out), {x}, [r, c, inv_std, saved_y](Node<T>& self) {
    Tensor<T> g(Shape{r, c});
    const T* yp = saved_y.data();
    const T* gp = self.grad.data();
    const T* sp = inv_std.data();
    T* dp = g.data();
    for (Index i = 0; i < r; ++i) {
      T gs = 0, gys = 0;
      for (Index j = 0; j < c; ++j) {
        gs += gp[i * c + j];
        gys += gp[i * c + j] * yp[i * c + j];
      }
      gs /= static_cast<T>(c);
      gys /= static_cast<T>(c);
      for (Index j = 0; j < c; ++j)
        dp[i * c + j] = sp[i] * (gp[i * c + j] - gs - yp[i * c + j] * gys);
    }
    self.inputs[0]->accum_grad(g);
  });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
  check<input_error>(x.ndim() == 2, "softmax_rows needs a 2-d tensor");
  const Index r = x.dim(0), c = x.dim(1);
  Tensor<T> out(Shape{r, c});
  const T* xp = x.val().data();
  T* op = out.data();
  for (Index i = 0; i < r; ++i) {
    const T* row = xp + i * c;
    T mx = row[0];
    for (Index j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T s = 0;
    for (Index j = 0; j < c; ++j) {
      op[i * c + j] = std::exp(row[j] - mx);
      s += op[i * c + j];
    }
    const T inv = T(1) / s;
    for (Index j = 0; j < c; ++j) op[i * c + j] *= inv;
  }
  Tensor<T> saved = out;
  return make_op<T>(std::move(out), {x}, [r, c, saved](Node<T>& self) {
    Tensor<T> g(Shape{r, c});
    const T* yp = saved.data();
    const T* gp = self.grad.data();
    T* dp = g.data();
    for (Index i = 0; i < r; ++i) {
      T dot = 0;
      for (Index j = 0; j < c; ++j) dot += gp[i * c + j] * yp[i * c + j];
      for (Index j = 0; j < c; ++j) dp[i * c + j] = yp[i * c + j] * (gp[i * c + j] - dot);
    }
    self.inputs[0]->accum_grad(g);
  });
}

template <typename T>
Var<T> log_softmax_rows(const Var<T>& x) {
  check<input_error>(x.ndim() == 2, "log_softmax_rows needs a 2-d tensor");
  const Index r = x.dim(0), c = x.dim(1);
  Tensor<T> out(Shape{r, c});
  const T* xp = x.val().data();
  T* op = out.data();
  for (Index i = 0; i < r; ++i) {
    const T* row = xp + i * c;
    T mx = row[0];
    for (Index j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T s = 0;
    for (Index j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const T lse = mx + std::log(s);
    for (Index j = 0; j < c; ++j) op[i * c + j] = row[j] - lse;
  }
  Tensor<T> saved = out;
  return make_op<T>(std::move(out), {x}, [r, c, saved](Node<T>& self) {
    Tensor<T> g(Shape{r, c});
    const T* yp = saved.data();
    const T* gp = self.grad.data();
    T* dp = g.data();
    for (Index i = 0; i < r; ++i) {
      T gs = 0;
      for (Index j = 0; j < c; ++j) gs += gp[i * c + j];
      for (Index j = 0; j < c; ++j) dp[i * c + j] = gp[i * c + j] - std::exp(yp[i * c + j]) * gs;
    }
    self.inputs[0]->accum_grad(g);
  });
}

// -------------------------------------------------------------- spatial ops

namespace detail {

inline Index conv_out_dim(Index in, Index k, Index stride, Index pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// col layout: (Cg*kh*kw) x (Ho*Wo), row-major.
template <typename T>
void im2col(const T* x, Index c_in, Index h, Index w, Index kh, Index kw, Index stride,
            Index pad, Index ho, Index wo, T* col) {
  for (Index c = 0; c < c_in; ++c)
    for (Index ki = 0; ki < kh; ++ki)
      for (Index kj = 0; kj < kw; ++kj) {
        T* dst = col + ((c * kh + ki) * kw + kj) * ho * wo;
        for (Index oh = 0; oh < ho; ++oh) {
          const Index ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= h) {
            for (Index ow = 0; ow < wo; ++ow) dst[oh * wo + ow] = T(0);
            continue;
          }
          for (Index ow = 0; ow < wo; ++ow) {
            const Index iw = ow * stride - pad + kj;
            dst[oh * wo + ow] = (iw >= 0 && iw < w) ? x[(c * h + ih) * w + iw] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_accum(const T* col, Index c_in, Index h, Index w, Index kh, Index kw, Index stride,
                  Index pad, Index ho, Index wo, T* x) {
  for (Index c = 0; c < c_in; ++c)
    for (Index ki = 0; ki < kh; ++ki)
      for (Index kj = 0; kj < kw; ++kj) {
        const T* src = col + ((c * kh + ki) * kw + kj) * ho * wo;
        for (Index oh = 0; oh < ho; ++oh) {
          const Index ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= h) continue;
          for (Index ow = 0; ow < wo; ++ow) {
            const Index iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < w) x[(c * h + ih) * w + iw] += src[oh * wo + ow];
          }
        }
      }
}

}  // namespace detail

// x (B,Cin,H,W), w (Cout, Cin/groups, kh, kw), optional bias (Cout).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, Index stride, Index pad,
              Index groups = 1) {
  check<input_error>(x.ndim() == 4 && w.ndim() == 4, "conv2d: need 4-d input and weight");
  const Index b = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const Index cout = w.dim(0), cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  check<config_error>(groups >= 1 && cin % groups == 0 && cout % groups == 0,
                      "conv2d: groups must divide channels");
  check<input_error>(cg == cin / groups, "conv2d: weight channel mismatch");
  const Index ho = detail::conv_out_dim(h, kh, stride, pad);
  const Index wo = detail::conv_out_dim(ww, kw, stride, pad);
  check<input_error>(ho >= 1 && wo >= 1, "conv2d: output would be empty");
  const Index cog = cout / groups;
  const Index kdim = cg * kh * kw;
  const Index p = ho * wo;

  Tensor<T> out(Shape{b, cout, ho, wo});
  std::vector<T> col(static_cast<size_t>(kdim * p));
  for (Index i = 0; i < b; ++i)
    for (Index g = 0; g < groups; ++g) {
      detail::im2col(x.val().data() + (i * cin + g * cg) * h * ww, cg, h, ww, kh, kw, stride, pad,
                     ho, wo, col.data());
      typename Tensor<T>::ConstMatMap wm(w.val().data() + g * cog * kdim, cog, kdim);
      typename Tensor<T>::ConstMatMap cm(col.data(), kdim, p);
      typename Tensor<T>::MatMap om(out.data() + (i * cout + g * cog) * p, cog, p);
      om.noalias() = wm * cm;
    }
  if (bias.defined()) {
    check<input_error>(bias.size() == cout, "conv2d: bias size mismatch");
    T* op = out.data();
    const T* bp = bias.val().data();
    for (Index i = 0; i < b; ++i)
      for (Index c = 0; c < cout; ++c) {
        const Index base = (i * cout + c) * p;
        for (Index k = 0; k < p; ++k) op[base + k] += bp[c];
      }
  }

  std::vector<Var<T>> ins = {x, w};
  if (bias.defined()) ins.push_back(bias);
  auto bw = [b, cin, cout, h, ww, kh, kw, stride, pad, groups, cg, cog, kdim, p,
             has_bias = bias.defined()](Node<T>& self) {
    const Tensor<T>& xv = self.inputs[0]->value;
    const Tensor<T>& wv = self.inputs[1]->value;
    const Index ho = detail::conv_out_dim(h, kh, stride, pad);
    const Index wo = detail::conv_out_dim(ww, kw, stride, pad);
    Tensor<T> gx, gw;
    const bool need_gx = self.inputs[0]->requires_grad;
    const bool need_gw = self.inputs[1]->requires_grad;
    if (need_gx) gx = Tensor<T>::zeros(xv.shape());
    if (need_gw) gw = Tensor<T>::zeros(wv.shape());
    std::vector<T> col(static_cast<size_t>(kdim * p));
    std::vector<T> gcol(static_cast<size_t>(kdim * p));
    for (Index i = 0; i < b; ++i)
      for (Index g = 0; g < groups; ++g) {
        typename Tensor<T>::ConstMatMap gom(self.grad.data() + (i * cout + g * cog) * p, cog, p);
        if (need_gw) {
          detail::im2col(xv.data() + (i * cin + g * cg) * h * ww, cg, h, ww, kh, kw, stride, pad,
                         ho, wo, col.data());
          typename Tensor<T>::ConstMatMap cm(col.data(), kdim, p);
          typename Tensor<T>::MatMap gwm(gw.data() + g * cog * kdim, cog, kdim);
          gwm.noalias() += gom * cm.transpose();
        }
        if (need_gx) {
          typename Tensor<T>::ConstMatMap wm(wv.data() + g * cog * kdim, cog, kdim);
          typename Tensor<T>::MatMap gcm(gcol.data(), kdim, p);
          gcm.noalias() = wm.transpose() * gom;
          detail::col2im_accum(gcol.data(), cg, h, ww, kh, kw, stride, pad, ho, wo,
                               gx.data() + (i * cin + g * cg) * h * ww);
        }
      }
    if (need_gx) self.inputs[0]->accum_grad(gx);
    if (need_gw) self.inputs[1]->accum_grad(gw);
    if (has_bias && self.inputs[2]->requires_grad) {
      Tensor<T> gb(Shape{cout});
      T* gbp = gb.data();
      const T* gp = self.grad.data();
      for (Index c = 0; c < cout; ++c) gbp[c] = T(0);
      for (Index i = 0; i < b; ++i)
        for (Index c = 0; c < cout; ++c) {
          const Index base = (i * cout + c) * p;
          T s = 0;
          for (Index k = 0; k < p; ++k) s += gp[base + k];
          gbp[c] += s;
        }
      self.inputs[2]->accum_grad(gb);
    }
  };
  return make_op<T>(std::move(out), std::move(ins), std::move(bw));
}

template <typename T>
Var<T> maxpool2d(const Var<T>& x, Index k, Index stride, Index pad) {
  check<input_error>(x.ndim() == 4, "maxpool2d: need NCHW");
  const Index b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index ho = detail::conv_out_dim(h, k, stride, pad);
  const Index wo = detail::conv_out_dim(w, k, stride, pad);
  Tensor<T> out(Shape{b, c, ho, wo});
  std::vector<Index> argmax(static_cast<size_t>(out.size()));
  const T* xp = x.val().data();
  T* op = out.data();
  Index oi = 0;
  for (Index i = 0; i < b; ++i)
    for (Index ch = 0; ch < c; ++ch) {
      const T* plane = xp + (i * c + ch) * h * w;
      for (Index oh = 0; oh < ho; ++oh)
        for (Index ow = 0; ow < wo; ++ow, ++oi) {
          T best = -std::numeric_limits<T>::infinity();
          Index best_idx = -1;
          for (Index ki = 0; ki < k; ++ki) {
            const Index ih = oh * stride - pad + ki;
            if (ih < 0 || ih >= h) continue;
            for (Index kj = 0; kj < k; ++kj) {
              const Index iw = ow * stride - pad + kj;
              if (iw < 0 || iw >= w) continue;
              const T v = plane[ih * w + iw];
              if (v > best) {
                best = v;
                best_idx = (i * c + ch) * h * w + ih * w + iw;
              }
            }
          }
          op[oi] = best;
          argmax[static_cast<size_t>(oi)] = best_idx;
        }
    }
  return make_op<T>(std::move(out), {x}, [argmax](Node<T>& self) {
    Tensor<T> g(self.inputs[0]->value.shape());
    const T* gp = self.grad.data();
    T* dp = g.data();
    for (size_t i = 0; i < argmax.size(); ++i)
      if (argmax[i] >= 0) dp[argmax[i]] += gp[static_cast<Index>(i)];
    self.inputs[0]->accum_grad(g);
  });
}

template <typename T>
Var<T> upsample_nearest2(const Var<T>& x) {
  check<input_error>(x.ndim() == 4, "upsample_nearest2: need NCHW");
  const Index b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out(Shape{b, c, 2 * h, 2 * w});
  const T* xp = x.val().data();
  T* op = out.data();
  for (Index bc = 0; bc < b * c; ++bc) {
    const T* src = xp + bc * h * w;
    T* dst = op + bc * 4 * h * w;
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) {
        const T v = src[i * w + j];
        dst[(2 * i) * 2 * w + 2 * j] = v;
        dst[(2 * i) * 2 * w + 2 * j + 1] = v;
        dst[(2 * i + 1) * 2 * w + 2 * j] = v;
        dst[(2 * i + 1) * 2 * w + 2 * j + 1] = v;
      }
  }
  return make_op<T>(std::move(out), {x}, [b, c, h, w](Node<T>& self) {
    Tensor<T> g(Shape{b, c, h, w});
    const T* gp = self.grad.data();
    T* dp = g.data();
    for (Index bc = 0; bc < b * c; ++bc) {
      const T* src = gp + bc * 4 * h * w;
      T* dst = dp + bc * h * w;
      for (Index i = 0; i < h; ++i)
        for (Index j = 0; j < w; ++j)
          dst[i * w + j] = src[(2 * i) * 2 * w + 2 * j] + src[(2 * i) * 2 * w + 2 * j + 1] +
                           src[(2 * i + 1) * 2 * w + 2 * j] +
                           src[(2 * i + 1) * 2 * w + 2 * j + 1];
    }
    self.inputs[0]->accum_grad(g);
  });
}

// --------------------------------------------------------------- conveniences

template <typename T>
Var<T> square(const Var<T>& a) {
  return mul(a, a);
}

// log(x / (1-x)) with clamping; exact inverse of sigmoid away from saturation.
template <typename T>
Var<T> inverse_sigmoid(const Var<T>& x, T eps = T(1e-6)) {
  Var<T> xc = clamp(x, eps, T(1) - eps);
  return sub(vlog(xc), vlog(sub(make_leaf(Tensor<T>::full(xc.shape(), T(1))), xc)));
}

template <typename T>
Var<T> linear(const Var<T>& x2d, const Var<T>& w, const Var<T>& b) {
  Var<T> y = matmul(x2d, w);
  if (b.defined()) y = add_rowvec(y, b);
  return y;
}

}  // namespace xdet
