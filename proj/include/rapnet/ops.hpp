// Differentiable tensor operations.
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "rapnet/autodiff.hpp"

namespace rapnet::ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape " + shape_str(a) + " vs " + shape_str(b));
  }
}

inline void require_rank(const Shape& a, int rank, const char* op) {
  if (static_cast<int>(a.size()) != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a));
  }
}

template <class T, class F>
Tensor<T> map(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

inline std::size_t prod(const Shape& s, int from, int to) {
  std::size_t n = 1;
  for (int i = from; i < to; ++i) n *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
  return n;
}

}  // namespace detail

using rapnet::detail::accumulate;
using rapnet::detail::make_result;

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    accumulate(*n.parents[0], n.grad);
    accumulate(*n.parents[1], n.grad);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    accumulate(*n.parents[0], n.grad);
    accumulate(*n.parents[1], detail::map(n.grad, [](T g) { return -g; }));
  });
}

/// Hadamard product.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor<T> g(av.shape());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * bv[i];
      accumulate(*n.parents[0], g);
    }
    if (n.parents[1]->requires_grad) {
      Tensor<T> g(bv.shape());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * av[i];
      accumulate(*n.parents[1], g);
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return make_result<T>(detail::map(a.value(), [s](T v) { return v * s; }), {a},
                        [s](Node<T>& n) {
                          accumulate(*n.parents[0], detail::map(n.grad, [s](T g) { return g * s; }));
                        });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  auto out = detail::map(a.value(), [](T v) { return T{1} / (T{1} + std::exp(-v)); });
  return make_result<T>(out, {a}, [out](Node<T>& n) {
    Tensor<T> g(out.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * out[i] * (T{1} - out[i]);
    accumulate(*n.parents[0], g);
  });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  auto out = detail::map(a.value(), [](T v) { return std::tanh(v); });
  return make_result<T>(out, {a}, [out](Node<T>& n) {
    Tensor<T> g(out.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * (T{1} - out[i] * out[i]);
    accumulate(*n.parents[0], g);
  });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  auto out = a.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    accumulate(*n.parents[0], n.grad.reshaped(n.parents[0]->value.shape()));
  });
}

/// Concatenates along `axis`; all other extents must agree.
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape shape = parts.front().shape();
  const int rank = static_cast<int>(shape.size());
  if (axis < 0 || axis >= rank) throw ShapeError("concat: bad axis");
  int total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (static_cast<int>(s.size()) != rank) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != axis && s[d] != shape[d]) {
        throw ShapeError("concat: extent mismatch " + shape_str(s) + " vs " + shape_str(shape));
      }
    }
    total += s[axis];
  }
  shape[axis] = total;
  const std::size_t outer = detail::prod(shape, 0, axis);
  const std::size_t inner = detail::prod(shape, axis + 1, rank);
  Tensor<T> out(shape);
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = static_cast<std::size_t>(p.dim(axis)) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.value().data() + o * w, w,
                  out.data() + o * total * inner + offset);
    }
    widths.push_back(w);
    offset += w;
  }
  const std::size_t row = static_cast<std::size_t>(total) * inner;
  return make_result<T>(std::move(out), parts, [outer, row, widths](Node<T>& n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      auto& p = *n.parents[k];
      if (p.requires_grad) {
        Tensor<T> g(p.value.shape());
        for (std::size_t o = 0; o < outer; ++o) {
          std::copy_n(n.grad.data() + o * row + off, widths[k], g.data() + o * widths[k]);
        }
        accumulate(p, g);
      }
      off += widths[k];
    }
  });
}

/// Takes `len` entries starting at `start` along `axis`.
template <class T>
Var<T> slice(const Var<T>& a, int axis, int start, int len) {
  Shape shape = a.shape();
  const int rank = static_cast<int>(shape.size());
  if (axis < 0 || axis >= rank || start < 0 || len < 0 || start + len > shape[axis]) {
    throw ShapeError("slice: range out of bounds for " + shape_str(shape));
  }
  const std::size_t outer = detail::prod(shape, 0, axis);
  const std::size_t inner = detail::prod(shape, axis + 1, rank);
  const std::size_t src_row = static_cast<std::size_t>(shape[axis]) * inner;
  const std::size_t w = static_cast<std::size_t>(len) * inner;
  const std::size_t off = static_cast<std::size_t>(start) * inner;
  shape[axis] = len;
  Tensor<T> out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.value().data() + o * src_row + off, w, out.data() + o * w);
  }
  return make_result<T>(std::move(out), {a}, [outer, src_row, w, off](Node<T>& n) {
    Tensor<T> g(n.parents[0]->value.shape());
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(n.grad.data() + o * w, w, g.data() + o * src_row + off);
    }
    accumulate(*n.parents[0], g);
  });
}

/// Returns `base` with index `index` along `axis` replaced by `x`, where x has
/// base's shape minus that axis.
template <class T>
Var<T> replace_index(const Var<T>& base, const Var<T>& x, int axis, int index) {
  const Shape& bs = base.shape();
  const int rank = static_cast<int>(bs.size());
  Shape expect = bs;
  expect.erase(expect.begin() + axis);
  if (x.shape() != expect) {
    throw ShapeError("replace_index: got " + shape_str(x.shape()) + ", expected " +
                     shape_str(expect));
  }
  if (index < 0 || index >= bs[axis]) throw ShapeError("replace_index: index out of range");
  const std::size_t outer = detail::prod(bs, 0, axis);
  const std::size_t inner = detail::prod(bs, axis + 1, rank);
  const std::size_t row = static_cast<std::size_t>(bs[axis]) * inner;
  const std::size_t off = static_cast<std::size_t>(index) * inner;
  Tensor<T> out = base.value();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.value().data() + o * inner, inner, out.data() + o * row + off);
  }
  return make_result<T>(std::move(out), {base, x}, [outer, inner, row, off](Node<T>& n) {
    if (n.parents[0]->requires_grad) {
      Tensor<T> g = n.grad;
      for (std::size_t o = 0; o < outer; ++o) std::fill_n(g.data() + o * row + off, inner, T{0});
      accumulate(*n.parents[0], g);
    }
    if (n.parents[1]->requires_grad) {
      Tensor<T> g(n.parents[1]->value.shape());
      for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(n.grad.data() + o * row + off, inner, g.data() + o * inner);
      }
      accumulate(*n.parents[1], g);
    }
  });
}

/// out[i] = a[index[i]]; `index` must be a permutation or selection of a.
template <class T>
Var<T> gather(const Var<T>& a, std::vector<std::size_t> index, Shape shape) {
  if (index.size() != shape_size(shape)) throw ShapeError("gather: index/shape mismatch");
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.value().size()) throw ShapeError("gather: index out of range");
    out[i] = a.value()[index[i]];
  }
  return make_result<T>(std::move(out), {a}, [index = std::move(index)](Node<T>& n) {
    Tensor<T> g(n.parents[0]->value.shape());
    for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += n.grad[i];
    accumulate(*n.parents[0], g);
  });
}

/// [B, M, N] -> [B, N, M].
template <class T>
Var<T> transpose_last2(const Var<T>& a) {
  detail::require_rank(a.shape(), 3, "transpose_last2");
  const int b = a.dim(0), m = a.dim(1), k = a.dim(2);
  std::vector<std::size_t> index(a.value().size());
  std::size_t i = 0;
  for (int bb = 0; bb < b; ++bb)
    for (int kk = 0; kk < k; ++kk)
      for (int mm = 0; mm < m; ++mm)
        index[i++] = (static_cast<std::size_t>(bb) * m + mm) * k + kk;
  return gather(a, std::move(index), Shape{b, k, m});
}

/// Batched matrix product: a [B,M,K] times b [B,K,N], or b [B,N,K] transposed.
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_b = false) {
  detail::require_rank(a.shape(), 3, "bmm");
  detail::require_rank(b.shape(), 3, "bmm");
  const int batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const int bk = transpose_b ? b.dim(2) : b.dim(1);
  const int n = transpose_b ? b.dim(1) : b.dim(2);
  if (b.dim(0) != batch || bk != k) {
    throw ShapeError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                     (transpose_b ? "^T" : ""));
  }
  using CM = detail::ConstMapMat<T>;
  using MM = detail::MapMat<T>;
  Tensor<T> out(Shape{batch, m, n});
  const std::size_t sa = static_cast<std::size_t>(m) * k;
  const std::size_t sb = static_cast<std::size_t>(k) * n;
  const std::size_t so = static_cast<std::size_t>(m) * n;
  for (int i = 0; i < batch; ++i) {
    CM am(a.value().data() + i * sa, m, k);
    MM om(out.data() + i * so, m, n);
    if (transpose_b) {
      om.noalias() = am * CM(b.value().data() + i * sb, n, k).transpose();
    } else {
      om.noalias() = am * CM(b.value().data() + i * sb, k, n);
    }
  }
  return make_result<T>(std::move(out), {a, b},
                        [batch, m, k, n, sa, sb, so, transpose_b](Node<T>& nd) {
    auto& pa = *nd.parents[0];
    auto& pb = *nd.parents[1];
    if (pa.requires_grad) {
      Tensor<T> g(pa.value.shape());
      for (int i = 0; i < batch; ++i) {
        CM gm(nd.grad.data() + i * so, m, n);
        MM ga(g.data() + i * sa, m, k);
        if (transpose_b) {
          ga.noalias() = gm * CM(pb.value.data() + i * sb, n, k);
        } else {
          ga.noalias() = gm * CM(pb.value.data() + i * sb, k, n).transpose();
        }
      }
      accumulate(pa, g);
    }
    if (pb.requires_grad) {
      Tensor<T> g(pb.value.shape());
      for (int i = 0; i < batch; ++i) {
        CM gm(nd.grad.data() + i * so, m, n);
        CM av(pa.value.data() + i * sa, m, k);
        if (transpose_b) {
          MM(g.data() + i * sb, n, k).noalias() = gm.transpose() * av;
        } else {
          MM(g.data() + i * sb, k, n).noalias() = av.transpose() * gm;
        }
      }
      accumulate(pb, g);
    }
  });
}

namespace detail {

// Softmax backward over strided rows: gx = y * (g - sum(g * y)).
template <class T>
Tensor<T> softmax_grad(const Tensor<T>& y, const Tensor<T>& g, std::size_t outer,
                       std::size_t len, std::size_t inner) {
  Tensor<T> gx(y.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T dot{0};
      for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t idx = base + j * inner;
        gx[idx] = y[idx] * (g[idx] - dot);
      }
    }
  }
  return gx;
}

}  // namespace detail

/// Softmax along `axis` with max subtraction.
template <class T>
Var<T> softmax(const Var<T>& a, int axis) {
  const Shape& s = a.shape();
  const int rank = static_cast<int>(s.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("softmax: bad axis");
  const std::size_t outer = detail::prod(s, 0, axis);
  const std::size_t len = static_cast<std::size_t>(s[axis]);
  const std::size_t inner = detail::prod(s, axis + 1, rank);
  Tensor<T> out(s);
  const auto& x = a.value();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
      T sum{0};
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= sum;
    }
  }
  return make_result<T>(out, {a}, [out, outer, len, inner](Node<T>& n) {
    accumulate(*n.parents[0], detail::softmax_grad(out, n.grad, outer, len, inner));
  });
}

/// Softmax over the last axis of [B, Lq, Lk]; keys with keep[b, j] == 0 get
/// weight exactly 0.
template <class T>
Var<T> masked_softmax(const Var<T>& a, const Tensor<std::uint8_t>& keep) {
  detail::require_rank(a.shape(), 3, "masked_softmax");
  const int batch = a.dim(0), lq = a.dim(1), lk = a.dim(2);
  if (keep.shape() != Shape{batch, lk}) {
    throw ShapeError("masked_softmax: mask " + shape_str(keep.shape()) + " for logits " +
                     shape_str(a.shape()));
  }
  for (int b = 0; b < batch; ++b) {
    bool any = false;
    for (int j = 0; j < lk; ++j) any = any || keep.at(b, j) != 0;
    if (!any) throw InvalidMaskError("all keys masked for batch entry " + std::to_string(b));
  }
  Tensor<T> out(a.shape());
  const auto& x = a.value();
  for (int b = 0; b < batch; ++b) {
    for (int i = 0; i < lq; ++i) {
      const std::size_t base = (static_cast<std::size_t>(b) * lq + i) * lk;
      T mx = -std::numeric_limits<T>::infinity();
      for (int j = 0; j < lk; ++j) {
        if (keep.at(b, j)) mx = std::max(mx, x[base + j]);
      }
      T sum{0};
      for (int j = 0; j < lk; ++j) {
        const T e = keep.at(b, j) ? std::exp(x[base + j] - mx) : T{0};
        out[base + j] = e;
        sum += e;
      }
      for (int j = 0; j < lk; ++j) out[base + j] /= sum;
    }
  }
  const std::size_t rows = static_cast<std::size_t>(batch) * lq;
  const std::size_t len = static_cast<std::size_t>(lk);
  return make_result<T>(out, {a}, [out, rows, len](Node<T>& n) {
    accumulate(*n.parents[0], detail::softmax_grad(out, n.grad, rows, len, std::size_t{1}));
  });
}

namespace detail {

// 1x1 convolution as one GEMM per batch item; no column buffer.
template <class T>
Var<T> pointwise_conv(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const int batch = x.dim(0), ci = x.dim(1), co = weight.dim(0);
  const int plane = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{batch, co, x.dim(2), x.dim(3)});
  const ConstMapMat<T> wm(weight.value().data(), co, ci);
  for (int b = 0; b < batch; ++b) {
    MapMat<T> yb(out.data() + static_cast<std::size_t>(b) * co * plane, co, plane);
    yb.noalias() = wm * ConstMapMat<T>(x.value().data() + static_cast<std::size_t>(b) * ci * plane,
                                       ci, plane);
    if (bias.defined()) {
      for (int o = 0; o < co; ++o) yb.row(o).array() += bias.value()[o];
    }
  }
  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(out), inputs, [=](Node<T>& n) {
    auto& px = *n.parents[0];
    auto& pw = *n.parents[1];
    auto g_at = [&](int b) {
      return ConstMapMat<T>(n.grad.data() + static_cast<std::size_t>(b) * co * plane, co, plane);
    };
    if (n.parents.size() > 2 && n.parents[2]->requires_grad) {
      Tensor<T> gb(Shape{co});
      for (int b = 0; b < batch; ++b)
        for (int o = 0; o < co; ++o) gb[o] += g_at(b).row(o).sum();
      rapnet::detail::accumulate(*n.parents[2], std::move(gb));
    }
    if (pw.requires_grad) {
      Tensor<T> gw(pw.value.shape());
      MapMat<T> gwm(gw.data(), co, ci);
      for (int b = 0; b < batch; ++b) {
        gwm.noalias() +=
            g_at(b) * ConstMapMat<T>(px.value.data() + static_cast<std::size_t>(b) * ci * plane,
                                     ci, plane)
                          .transpose();
      }
      rapnet::detail::accumulate(pw, std::move(gw));
    }
    if (px.requires_grad) {
      Tensor<T> gx(px.value.shape());
      const ConstMapMat<T> wv(pw.value.data(), co, ci);
      for (int b = 0; b < batch; ++b) {
        MapMat<T>(gx.data() + static_cast<std::size_t>(b) * ci * plane, ci, plane).noalias() =
            wv.transpose() * g_at(b);
      }
      rapnet::detail::accumulate(px, std::move(gx));
    }
  });
}

}  // namespace detail

/// 2-D convolution. x [B,Ci,H,W], weight [Co,Ci,K,K], optional bias [Co].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride = 1,
              int pad = 0) {
  detail::require_rank(x.shape(), 4, "conv2d");
  detail::require_rank(weight.shape(), 4, "conv2d weight");
  const int batch = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != ci) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " vs weight " +
                     shape_str(weight.shape()));
  }
  if (bias.defined() && bias.shape() != Shape{co}) throw ShapeError("conv2d: bias shape");
  if (stride < 1) throw ShapeError("conv2d: stride must be positive");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (w + 2 * pad - kw) / stride + 1;
  if (ho < 1 || wo < 1) throw ShapeError("conv2d: kernel larger than padded input");

  const int krows = ci * kh * kw;
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  if (kh == 1 && kw == 1 && stride == 1 && pad == 0) return detail::pointwise_conv(x, weight, bias);
  const std::size_t ncols = static_cast<std::size_t>(batch) * plane;

  // Output columns ox in [lo, hi) read inside the image for kernel column j.
  auto valid_cols = [=](int j, int& lo, int& hi) {
    lo = 0;
    while (lo < wo && lo * stride - pad + j < 0) ++lo;
    hi = wo;
    while (hi > lo && (hi - 1) * stride - pad + j >= w) --hi;
  };

  // col[(c*kh + i)*kw + j, b*plane + oy*wo + ox]
  auto im2col = [=](const T* src, T* col) {
    for (int c = 0; c < ci; ++c)
      for (int i = 0; i < kh; ++i)
        for (int j = 0; j < kw; ++j) {
          int lo, hi;
          valid_cols(j, lo, hi);
          T* row = col + static_cast<std::size_t>((c * kh + i) * kw + j) * ncols;
          for (int b = 0; b < batch; ++b) {
            const T* img = src + (static_cast<std::size_t>(b) * ci + c) * h * w;
            T* dst = row + b * plane;
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * stride - pad + i;
              T* drow = dst + static_cast<std::size_t>(oy) * wo;
              if (iy < 0 || iy >= h) {
                std::fill_n(drow, wo, T{0});
                continue;
              }
              std::fill_n(drow, lo, T{0});
              const T* srow = img + iy * w - pad + j;
              if (stride == 1) {
                std::copy(srow + lo, srow + hi, drow + lo);
              } else {
                for (int ox = lo; ox < hi; ++ox) drow[ox] = srow[ox * stride];
              }
              std::fill(drow + hi, drow + wo, T{0});
            }
          }
        }
  };

  auto col2im = [=](const T* col, T* dst_img) {
    for (int c = 0; c < ci; ++c)
      for (int i = 0; i < kh; ++i)
        for (int j = 0; j < kw; ++j) {
          int lo, hi;
          valid_cols(j, lo, hi);
          const T* row = col + static_cast<std::size_t>((c * kh + i) * kw + j) * ncols;
          for (int b = 0; b < batch; ++b) {
            T* img = dst_img + (static_cast<std::size_t>(b) * ci + c) * h * w;
            const T* srcb = row + b * plane;
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * stride - pad + i;
              if (iy < 0 || iy >= h) continue;
              T* drow = img + iy * w - pad + j;
              const T* s = srcb + static_cast<std::size_t>(oy) * wo;
              if (stride == 1) {
                for (int ox = lo; ox < hi; ++ox) drow[ox] += s[ox];
              } else {
                for (int ox = lo; ox < hi; ++ox) drow[ox * stride] += s[ox];
              }
            }
          }
        }
  };

  AlignedVector<T> col(static_cast<std::size_t>(krows) * ncols);
  im2col(x.value().data(), col.data());
  detail::RowMat<T> y = detail::ConstMapMat<T>(weight.value().data(), co, krows) *
                        detail::ConstMapMat<T>(col.data(), krows, ncols);
  Tensor<T> out(Shape{batch, co, ho, wo});
  for (int b = 0; b < batch; ++b)
    for (int o = 0; o < co; ++o) {
      const T bv = bias.defined() ? bias.value()[o] : T{0};
      const T* src = y.data() + o * ncols + b * plane;
      T* dst = out.data() + (static_cast<std::size_t>(b) * co + o) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bv;
    }

  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(out), inputs, [=](Node<T>& n) {
    auto& px = *n.parents[0];
    auto& pw = *n.parents[1];
    detail::RowMat<T> g(co, ncols);
    for (int b = 0; b < batch; ++b)
      for (int o = 0; o < co; ++o) {
        std::copy_n(n.grad.data() + (static_cast<std::size_t>(b) * co + o) * plane, plane,
                    g.data() + o * ncols + b * plane);
      }
    if (n.parents.size() > 2 && n.parents[2]->requires_grad) {
      Tensor<T> gb(Shape{co});
      for (int o = 0; o < co; ++o) gb[o] = g.row(o).sum();
      accumulate(*n.parents[2], gb);
    }
    if (pw.requires_grad) {
      AlignedVector<T> c2(static_cast<std::size_t>(krows) * ncols);
      im2col(px.value.data(), c2.data());
      Tensor<T> gw(pw.value.shape());
      detail::MapMat<T>(gw.data(), co, krows).noalias() =
          g * detail::ConstMapMat<T>(c2.data(), krows, ncols).transpose();
      accumulate(pw, std::move(gw));
    }
    if (px.requires_grad) {
      detail::RowMat<T> gcol =
          detail::ConstMapMat<T>(pw.value.data(), co, krows).transpose() * g;
      Tensor<T> gx(px.value.shape());
      col2im(gcol.data(), gx.data());
      accumulate(px, std::move(gx));
    }
  });
}

/// Per-sample normalization over (C, H, W) with per-channel scale and shift.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  detail::require_rank(x.shape(), 4, "layer_norm");
  const int batch = x.dim(0), c = x.dim(1);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("layer_norm: affine parameters must have shape [" + std::to_string(c) + "]");
  }
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const std::size_t per = plane * c;
  Tensor<T> xhat(x.shape());
  Tensor<T> out(x.shape());
  std::vector<T> inv_std(batch);
  const auto& xv = x.value();
  for (int b = 0; b < batch; ++b) {
    const T* src = xv.data() + b * per;
    T mean{0};
    for (std::size_t i = 0; i < per; ++i) mean += src[i];
    mean /= static_cast<T>(per);
    T var{0};
    for (std::size_t i = 0; i < per; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= static_cast<T>(per);
    inv_std[b] = T{1} / std::sqrt(var + eps);
    for (int ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t i = ch * plane + p;
        const T xh = (src[i] - mean) * inv_std[b];
        xhat[b * per + i] = xh;
        out[b * per + i] = xh * gamma.value()[ch] + beta.value()[ch];
      }
  }
  return make_result<T>(std::move(out), {x, gamma, beta},
                        [xhat, inv_std, batch, c, plane, per](Node<T>& n) {
    const auto& gv = n.parents[1]->value;
    if (n.parents[1]->requires_grad || n.parents[2]->requires_grad) {
      Tensor<T> gg(Shape{c}), gbeta(Shape{c});
      for (int b = 0; b < batch; ++b)
        for (int ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t i = b * per + ch * plane + p;
            gg[ch] += n.grad[i] * xhat[i];
            gbeta[ch] += n.grad[i];
          }
      accumulate(*n.parents[1], gg);
      accumulate(*n.parents[2], gbeta);
    }
    if (n.parents[0]->requires_grad) {
      Tensor<T> gx(xhat.shape());
      const T count = static_cast<T>(per);
      for (int b = 0; b < batch; ++b) {
        T sum_g{0}, sum_gx{0};
        for (int ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t i = b * per + ch * plane + p;
            const T gh = n.grad[i] * gv[ch];
            sum_g += gh;
            sum_gx += gh * xhat[i];
          }
        for (int ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t i = b * per + ch * plane + p;
            const T gh = n.grad[i] * gv[ch];
            gx[i] = inv_std[b] * (gh - sum_g / count - xhat[i] * sum_gx / count);
          }
      }
      accumulate(*n.parents[0], gx);
    }
  });
}

/// lambda1 * mean|pred - truth| + lambda2 * mean (pred - truth)^2, a scalar.
template <class T>
Var<T> l1l2_loss(const Var<T>& pred, const Var<T>& truth, T lambda1, T lambda2) {
  detail::require_same(pred.shape(), truth.shape(), "l1l2_loss");
  const std::size_t n = pred.value().size();
  if (n == 0) throw ShapeError("l1l2_loss: empty input");
  T l1{0}, l2{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T d = pred.value()[i] - truth.value()[i];
    l1 += std::abs(d);
    l2 += d * d;
  }
  const T inv = T{1} / static_cast<T>(n);
  Tensor<T> out(Shape{1}, lambda1 * l1 * inv + lambda2 * l2 * inv);
  return make_result<T>(std::move(out), {pred, truth}, [lambda1, lambda2, inv](Node<T>& nd) {
    const auto& p = nd.parents[0]->value;
    const auto& t = nd.parents[1]->value;
    const T g = nd.grad[0];
    Tensor<T> gp(p.shape());
    for (std::size_t i = 0; i < gp.size(); ++i) {
      const T d = p[i] - t[i];
      const T sgn = d > T{0} ? T{1} : (d < T{0} ? T{-1} : T{0});
      gp[i] = g * inv * (lambda1 * sgn + lambda2 * T{2} * d);
    }
    if (nd.parents[0]->requires_grad) accumulate(*nd.parents[0], gp);
    if (nd.parents[1]->requires_grad) {
      for (auto& v : gp.storage()) v = -v;
      accumulate(*nd.parents[1], gp);
    }
  });
}

/// Scalar sum(a * weights) for a constant weight tensor; used to probe
/// gradients of non-scalar outputs.
template <class T>
Var<T> weighted_sum(const Var<T>& a, const Tensor<T>& weights) {
  detail::require_same(a.shape(), weights.shape(), "weighted_sum");
  T s{0};
  for (std::size_t i = 0; i < weights.size(); ++i) s += a.value()[i] * weights[i];
  return make_result<T>(Tensor<T>(Shape{1}, s), {a}, [weights](Node<T>& n) {
    Tensor<T> g(weights.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = weights[i] * n.grad[0];
    accumulate(*n.parents[0], g);
  });
}

}  // namespace rapnet::ops
