// Scaled dot-product attention and its spatial and channel forms.
//
//   Attention(Q, K, V) = softmax(Q K^T / sqrt(D)) V
//
// D is the feature width actually used in the dot product. The spatial form
// treats every pixel as a token of C features; the channel form treats every
// channel as a token of H*W features.
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include "rapnet/ops.hpp"
#include "rapnet/params.hpp"

namespace rapnet {

/// [B, Lk] keep-flags; 0 excludes the key from the softmax.
using KeyMask = Tensor<std::uint8_t>;

template <class T>
struct AttentionResult {
  Var<T> output;   // [B, Lq, Dv]
  Var<T> weights;  // [B, Lq, Lk], rows sum to one
};

template <class T>
AttentionResult<T> scaled_dot_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                                        const KeyMask* mask = nullptr) {
  if (q.shape().size() != 3 || k.shape().size() != 3 || v.shape().size() != 3) {
    throw ShapeError("scaled_dot_attention: q, k, v must be rank 3");
  }
  if (q.dim(0) != k.dim(0) || k.dim(0) != v.dim(0)) {
    throw ShapeError("scaled_dot_attention: batch mismatch");
  }
  if (q.dim(2) != k.dim(2)) {
    throw ShapeError("scaled_dot_attention: query width " + std::to_string(q.dim(2)) +
                     " != key width " + std::to_string(k.dim(2)));
  }
  if (k.dim(1) != v.dim(1)) {
    throw ShapeError("scaled_dot_attention: " + std::to_string(k.dim(1)) + " keys but " +
                     std::to_string(v.dim(1)) + " values");
  }
  const T inv_scale = T{1} / std::sqrt(static_cast<T>(q.dim(2)));
  auto logits = ops::scale(ops::bmm(q, k, /*transpose_b=*/true), inv_scale);
  auto weights = mask ? ops::masked_softmax(logits, *mask) : ops::softmax(logits, -1);
  return {ops::bmm(weights, v), weights};
}

/// Three 1x1 projections producing query, key and value maps.
template <class T>
struct SpatialAttentionParams {
  ConvParams<T> query;
  ConvParams<T> key;
  ConvParams<T> value;

  static void init(ParamStore<T>& store, Rng& rng, const std::string& prefix, int channels) {
    add_conv(store, rng, prefix + ".query", channels, channels, 1, false);
    add_conv(store, rng, prefix + ".key", channels, channels, 1, false);
    add_conv(store, rng, prefix + ".value", channels, channels, 1, false);
  }

  static SpatialAttentionParams bind(const ParamStore<T>& store, const std::string& prefix) {
    return {ConvParams<T>::bind(store, prefix + ".query"),
            ConvParams<T>::bind(store, prefix + ".key"),
            ConvParams<T>::bind(store, prefix + ".value")};
  }
};

/// Attention across the H*W positions of f [B, C, H, W]; output has f's shape.
template <class T>
Var<T> spatial_attention(const Var<T>& f, const SpatialAttentionParams<T>& p,
                         Var<T>* weights_out = nullptr) {
  if (f.shape().size() != 4) throw ShapeError("spatial_attention: expected [B,C,H,W]");
  const int b = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3);
  auto tokens = [&](const ConvParams<T>& cp) {
    return ops::transpose_last2(ops::reshape(ops::conv2d(f, cp.weight, cp.bias), Shape{b, c, hw}));
  };
  auto res = scaled_dot_attention(tokens(p.query), tokens(p.key), tokens(p.value));
  if (weights_out) *weights_out = res.weights;
  return ops::reshape(ops::transpose_last2(res.output), f.shape());
}

/// Attention from the Cq channels of `query_map` over the Ckv channels of
/// `key_value_map`, which serve as both keys and values. Both maps share
/// B, H and W; output is [B, Cq, H, W].
template <class T>
Var<T> channel_attention(const Var<T>& query_map, const Var<T>& key_value_map,
                         const KeyMask* mask = nullptr, Var<T>* weights_out = nullptr) {
  if (query_map.shape().size() != 4 || key_value_map.shape().size() != 4) {
    throw ShapeError("channel_attention: expected rank-4 maps");
  }
  const int b = query_map.dim(0), hw = query_map.dim(2) * query_map.dim(3);
  if (key_value_map.dim(0) != b || key_value_map.dim(2) != query_map.dim(2) ||
      key_value_map.dim(3) != query_map.dim(3)) {
    throw ShapeError("channel_attention: query " + shape_str(query_map.shape()) +
                     " vs key/value " + shape_str(key_value_map.shape()));
  }
  auto q = ops::reshape(query_map, Shape{b, query_map.dim(1), hw});
  auto kv = ops::reshape(key_value_map, Shape{b, key_value_map.dim(1), hw});
  auto res = scaled_dot_attention(q, kv, kv, mask);
  if (weights_out) *weights_out = res.weights;
  return ops::reshape(res.output, query_map.shape());
}

}  // namespace rapnet
