// Region attention block.
//
// Pixels are softly classified into N regions; the feature map is split into
// one masked copy per region, each copy becomes one attention token, and the
// attended tokens are folded back with the same soft assignment:
//
//   Fc  = softmax_N(conv(F))                 [B,N,H,W]
//   Fn  = split(F, Fc)                       [B,N,C,H,W]
//   Fqk = conv_stride_r(Fn), Fv = conv(Fn)   per region
//   Fa  = Attention(Wq Fqk, Wk Fqk, Wv Fv)   over the N region tokens
//   out = Norm(F + integrate(Fa, Fc))
#pragma once

#include <string>

#include "rapnet/attention.hpp"

namespace rapnet {

/// stack[b,n,c,h,w] = p[b,c,h,w] * q[b,n,h,w].
template <class T>
Var<T> region_split(const Var<T>& p, const Var<T>& q) {
  if (p.shape().size() != 4 || q.shape().size() != 4 || p.dim(0) != q.dim(0) ||
      p.dim(2) != q.dim(2) || p.dim(3) != q.dim(3)) {
    throw ShapeError("region_split: features " + shape_str(p.shape()) + " vs assignment " +
                     shape_str(q.shape()));
  }
  const int batch = p.dim(0), c = p.dim(1), n = q.dim(1);
  const std::size_t plane = static_cast<std::size_t>(p.dim(2)) * p.dim(3);
  Tensor<T> out(Shape{batch, n, c, p.dim(2), p.dim(3)});
  const T* pv = p.value().data();
  const T* qv = q.value().data();
  for (int b = 0; b < batch; ++b)
    for (int r = 0; r < n; ++r) {
      const T* qrow = qv + (static_cast<std::size_t>(b) * n + r) * plane;
      for (int ch = 0; ch < c; ++ch) {
        const T* prow = pv + (static_cast<std::size_t>(b) * c + ch) * plane;
        T* dst = out.data() + ((static_cast<std::size_t>(b) * n + r) * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] = prow[i] * qrow[i];
      }
    }
  return detail::make_result<T>(std::move(out), {p, q}, [batch, c, n, plane](Node<T>& nd) {
    const T* pv = nd.parents[0]->value.data();
    const T* qv = nd.parents[1]->value.data();
    Tensor<T> gp(nd.parents[0]->value.shape());
    Tensor<T> gq(nd.parents[1]->value.shape());
    for (int b = 0; b < batch; ++b)
      for (int r = 0; r < n; ++r) {
        const std::size_t qoff = (static_cast<std::size_t>(b) * n + r) * plane;
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t poff = (static_cast<std::size_t>(b) * c + ch) * plane;
          const T* g = nd.grad.data() + ((static_cast<std::size_t>(b) * n + r) * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            gp[poff + i] += g[i] * qv[qoff + i];
            gq[qoff + i] += g[i] * pv[poff + i];
          }
        }
      }
    detail::accumulate(*nd.parents[0], gp);
    detail::accumulate(*nd.parents[1], gq);
  });
}

/// out[b,c,h,w] = sum_n p[b,n,c,h,w] * q[b,n,h,w].
template <class T>
Var<T> region_integrate(const Var<T>& p, const Var<T>& q) {
  if (p.shape().size() != 5 || q.shape().size() != 4 || p.dim(0) != q.dim(0) ||
      p.dim(1) != q.dim(1) || p.dim(3) != q.dim(2) || p.dim(4) != q.dim(3)) {
    throw ShapeError("region_integrate: stack " + shape_str(p.shape()) + " vs assignment " +
                     shape_str(q.shape()));
  }
  const int batch = p.dim(0), n = p.dim(1), c = p.dim(2);
  const std::size_t plane = static_cast<std::size_t>(p.dim(3)) * p.dim(4);
  Tensor<T> out(Shape{batch, c, p.dim(3), p.dim(4)});
  const T* pv = p.value().data();
  const T* qv = q.value().data();
  for (int b = 0; b < batch; ++b)
    for (int r = 0; r < n; ++r) {
      const T* qrow = qv + (static_cast<std::size_t>(b) * n + r) * plane;
      for (int ch = 0; ch < c; ++ch) {
        const T* src = pv + ((static_cast<std::size_t>(b) * n + r) * c + ch) * plane;
        T* dst = out.data() + (static_cast<std::size_t>(b) * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] += src[i] * qrow[i];
      }
    }
  return detail::make_result<T>(std::move(out), {p, q}, [batch, c, n, plane](Node<T>& nd) {
    const T* pv = nd.parents[0]->value.data();
    const T* qv = nd.parents[1]->value.data();
    Tensor<T> gp(nd.parents[0]->value.shape());
    Tensor<T> gq(nd.parents[1]->value.shape());
    for (int b = 0; b < batch; ++b)
      for (int r = 0; r < n; ++r) {
        const std::size_t qoff = (static_cast<std::size_t>(b) * n + r) * plane;
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t poff = ((static_cast<std::size_t>(b) * n + r) * c + ch) * plane;
          const T* g = nd.grad.data() + (static_cast<std::size_t>(b) * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            gp[poff + i] += g[i] * qv[qoff + i];
            gq[qoff + i] += g[i] * pv[poff + i];
          }
        }
      }
    detail::accumulate(*nd.parents[0], gp);
    detail::accumulate(*nd.parents[1], gq);
  });
}

/// Shape of one region attention block.
struct RabShape {
  int channels = 1;
  int regions = 64;
  int reduction = 2;  // stride of the query/key reduction conv
  int kernel = 3;     // classifier and value conv kernel

  int reduced_channels() const { return (channels + 1) / 2; }
  int reduction_kernel() const { return 2 * reduction - 1; }
};

template <class T>
struct RabParams {
  ConvParams<T> classifier;  // C -> N
  ConvParams<T> reduce;      // C -> c, stride r
  ConvParams<T> value_conv;  // C -> C
  ConvParams<T> query;       // c -> c, 1x1, no bias
  ConvParams<T> key;         // c -> c, 1x1, no bias
  ConvParams<T> value;       // C -> C, 1x1, no bias
  Var<T> gamma;
  Var<T> beta;
  int reduction = 2;
  T eps = T(1e-5);

  static void init(ParamStore<T>& store, Rng& rng, const std::string& prefix, const RabShape& s) {
    if (s.regions < 1 || s.channels < 1 || s.reduction < 1 || s.kernel < 1 || s.kernel % 2 == 0) {
      throw ValidationError("region attention: regions, channels and reduction must be >= 1 and "
                            "kernel odd");
    }
    const int c = s.reduced_channels();
    add_conv(store, rng, prefix + ".classifier", s.regions, s.channels, s.kernel);
    add_conv(store, rng, prefix + ".reduce", c, s.channels, s.reduction_kernel());
    add_conv(store, rng, prefix + ".value_conv", s.channels, s.channels, s.kernel);
    add_conv(store, rng, prefix + ".query", c, c, 1, false);
    add_conv(store, rng, prefix + ".key", c, c, 1, false);
    add_conv(store, rng, prefix + ".value", s.channels, s.channels, 1, false);
    store.add(prefix + ".norm.gamma", Tensor<T>(Shape{s.channels}, T{1}));
    store.add(prefix + ".norm.beta", Tensor<T>(Shape{s.channels}, T{0}));
  }

  static RabParams bind(const ParamStore<T>& store, const std::string& prefix, int reduction) {
    RabParams p;
    p.classifier = ConvParams<T>::bind(store, prefix + ".classifier");
    p.reduce = ConvParams<T>::bind(store, prefix + ".reduce");
    p.value_conv = ConvParams<T>::bind(store, prefix + ".value_conv");
    p.query = ConvParams<T>::bind(store, prefix + ".query");
    p.key = ConvParams<T>::bind(store, prefix + ".key");
    p.value = ConvParams<T>::bind(store, prefix + ".value");
    p.gamma = store.get(prefix + ".norm.gamma");
    p.beta = store.get(prefix + ".norm.beta");
    p.reduction = reduction;
    return p;
  }

  int regions() const { return classifier.out_channels(); }
};

/// Soft region assignment [B, N, H, W]: same-padded conv then softmax over N.
template <class T>
Var<T> classify(const Var<T>& f, const ConvParams<T>& classifier) {
  const int k = classifier.kernel();
  return ops::softmax(ops::conv2d(f, classifier.weight, classifier.bias, 1, k / 2), 1);
}

/// Intermediate tensors of one block, for inspection and tests.
template <class T>
struct RabTrace {
  Var<T> assignment;         // Fc [B,N,H,W]
  Var<T> attention_weights;  // [B,N,N]
  Var<T> integrated;         // F'a [B,C,H,W]
};

template <class T>
Var<T> rab_forward(const Var<T>& f, const RabParams<T>& p, RabTrace<T>* trace = nullptr,
                   const std::string& where = "region attention") {
  if (f.shape().size() != 4) throw ShapeError(where + ": expected [B,C,H,W], got " +
                                              shape_str(f.shape()));
  const int batch = f.dim(0), ch = f.dim(1), h = f.dim(2), w = f.dim(3);
  const int n = p.regions();
  if (p.value_conv.out_channels() != ch) {
    throw ShapeError(where + ": block built for " + std::to_string(p.value_conv.out_channels()) +
                     " channels, input has " + std::to_string(ch));
  }
  auto fc = classify(f, p.classifier);
  auto stack = ops::reshape(region_split(f, fc), Shape{batch * n, ch, h, w});

  const int r = p.reduction;
  const int k = p.value_conv.kernel();
  auto fqk = ops::conv2d(stack, p.reduce.weight, p.reduce.bias, r, r - 1);
  auto fv = ops::conv2d(stack, p.value_conv.weight, p.value_conv.bias, 1, k / 2);
  const int token_qk = fqk.dim(1) * fqk.dim(2) * fqk.dim(3);
  auto q = ops::reshape(ops::conv2d(fqk, p.query.weight, p.query.bias), Shape{batch, n, token_qk});
  auto kk = ops::reshape(ops::conv2d(fqk, p.key.weight, p.key.bias), Shape{batch, n, token_qk});
  auto v = ops::reshape(ops::conv2d(fv, p.value.weight, p.value.bias), Shape{batch, n, ch * h * w});
  auto att = scaled_dot_attention(q, kk, v);
  auto fa = ops::reshape(att.output, Shape{batch, n, ch, h, w});
  auto integrated = region_integrate(fa, fc);
  auto out = ops::layer_norm(ops::add(f, integrated), p.gamma, p.beta, p.eps);
  check_finite(out, where);
  if (trace) *trace = {fc, att.weights, integrated};
  return out;
}

}  // namespace rapnet
