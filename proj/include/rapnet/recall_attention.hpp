// Recall attention over a bounded long-memory buffer of raw inputs.
//
// The bottom layer appends every input frame to a fixed-capacity buffer
// [B, Tcap, C, H, W]. Each layer convolves the buffer slot by slot with a
// shared kernel and lets its hidden state query the result by channel
// attention, with unfilled slots excluded from the softmax.
#pragma once

#include <string>

#include "rapnet/attention.hpp"

namespace rapnet {

template <class T>
struct LongMemory {
  Var<T> data;  // [B, Tcap, C, H, W]; slots >= fill_count are zero
  int fill_count = 0;

  static LongMemory empty(int batch, int capacity, int channels, int height, int width) {
    if (capacity < 1) throw ValidationError("long memory capacity must be >= 1");
    return {Var<T>::constant(Tensor<T>(Shape{batch, capacity, channels, height, width})), 0};
  }

  int batch() const { return data.dim(0); }
  int capacity() const { return data.dim(1); }
  int channels() const { return data.dim(2); }
  bool full() const { return fill_count >= capacity(); }
};

/// Writes x [B,C,H,W] into slot fill_count and advances the count.
template <class T>
LongMemory<T> push_frame(const LongMemory<T>& mem, const Var<T>& x) {
  if (mem.full()) {
    throw CapacityError("long memory full: capacity " + std::to_string(mem.capacity()));
  }
  return {ops::replace_index(mem.data, x, 1, mem.fill_count), mem.fill_count + 1};
}

/// keep[b, slot*C + c] = slot < fill_count.
inline KeyMask memory_key_mask(int batch, int capacity, int channels, int fill_count) {
  KeyMask keep(Shape{batch, capacity * channels});
  for (int b = 0; b < batch; ++b)
    for (int s = 0; s < fill_count; ++s)
      for (int c = 0; c < channels; ++c) keep.at(b, s * channels + c) = 1;
  return keep;
}

template <class T>
struct RamOutput {
  Var<T> hidden;
  LongMemory<T> memory;  // the convolved buffer handed to the next layer
  Var<T> attention_weights;
};

/// Per-slot same-padded convolution of the buffer; unfilled slots stay zero.
template <class T>
LongMemory<T> convolve_memory(const LongMemory<T>& mem, const ConvParams<T>& conv) {
  const Shape& s = mem.data.shape();
  const int batch = s[0], cap = s[1], c = s[2], h = s[3], w = s[4];
  if (conv.weight.dim(1) != c || conv.out_channels() != c) {
    throw ShapeError("memory conv must map " + std::to_string(c) + " channels to themselves");
  }
  auto folded = ops::reshape(mem.data, Shape{batch * cap, c, h, w});
  auto out = ops::reshape(ops::conv2d(folded, conv.weight, conv.bias, 1, conv.kernel() / 2), s);
  Tensor<T> slot_mask(s);
  const std::size_t slot = static_cast<std::size_t>(c) * h * w;
  for (int b = 0; b < batch; ++b)
    for (int t = 0; t < mem.fill_count; ++t)
      std::fill_n(slot_mask.data() + (static_cast<std::size_t>(b) * cap + t) * slot, slot, T{1});
  return {ops::mul(out, Var<T>::constant(std::move(slot_mask))), mem.fill_count};
}

template <class T>
RamOutput<T> ram_forward(const Var<T>& h, const LongMemory<T>& mem, const ConvParams<T>& conv,
                         bool residual = true) {
  if (!mem.data.defined() || mem.fill_count < 1) {
    throw StateError("recall attention on an empty long memory");
  }
  if (h.shape().size() != 4 || h.dim(0) != mem.batch() || h.dim(2) != mem.data.dim(3) ||
      h.dim(3) != mem.data.dim(4)) {
    throw ShapeError("recall attention: hidden " + shape_str(h.shape()) + " vs memory " +
                     shape_str(mem.data.shape()));
  }
  auto convolved = convolve_memory(mem, conv);
  const int batch = h.dim(0), cap = mem.capacity(), c = mem.channels();
  auto kv = ops::reshape(convolved.data, Shape{batch, cap * c, h.dim(2), h.dim(3)});
  const KeyMask keep = memory_key_mask(batch, cap, c, mem.fill_count);
  Var<T> weights;
  auto recalled = channel_attention(h, kv, &keep, &weights);
  auto hidden = residual ? ops::add(h, recalled) : recalled;
  return {hidden, convolved, weights};
}

}  // namespace rapnet
