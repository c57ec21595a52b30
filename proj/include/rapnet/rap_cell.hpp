// One recurrent unit: a spatiotemporal LSTM step with region attention on
// its input and hidden state and recall attention on its output.
#pragma once

#include <string>

#include "rapnet/recall_attention.hpp"
#include "rapnet/region_attention.hpp"

namespace rapnet {

/// Which attention sub-blocks are active. (x, h, ram) = (1,0,0) is the
/// input-side variant, (0,1,0) the hidden-side variant, (1,1,0) the full cell
/// and (1,1,1) the full network.
struct AblationFlags {
  bool rab_on_input = true;
  bool rab_on_hidden = true;
  bool ram_enabled = true;

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

struct CellShape {
  int in_channels = 1;
  int hidden = 64;
  int memory_channels = 1;  // channels of the long-memory buffer
  int kernel = 5;
  int regions = 64;
  int reduction = 2;
  int rab_kernel = 3;
  bool strict_fusion = false;  // fuse [x, m] instead of [c, m]
  bool ram_residual = true;
  AblationFlags flags;
};

template <class T>
struct CellParams {
  ConvParams<T> conv_x;  // in -> 7C: i g f i' g' f' o, carries the gate biases
  ConvParams<T> conv_h;  // C -> 4C: i g f o
  ConvParams<T> conv_m;  // C -> 3C: i' g' f'
  ConvParams<T> conv_o;  // [c, m] -> C
  ConvParams<T> fuse;    // 1x1 over [c, m] (or [x, m] in strict mode) -> C
  ConvParams<T> ram;     // memory conv, C_mem -> C_mem
  RabParams<T> rab_x;
  RabParams<T> rab_h;
  bool has_rab_x = false;
  bool has_rab_h = false;
  bool has_ram = false;

  /// Registers the groups `prefix.cell` and, per flag, `prefix.rab_x`,
  /// `prefix.rab_h`, `prefix.ram`. `all_groups` registers every group
  /// regardless of the flags.
  static void init(ParamStore<T>& store, Rng& rng, const std::string& prefix, const CellShape& s,
                   bool all_groups = false) {
    const int c = s.hidden;
    if (s.in_channels < 1 || c < 1 || s.kernel < 1 || s.kernel % 2 == 0) {
      throw ValidationError("cell: channels must be >= 1 and kernel odd");
    }
    add_conv(store, rng, prefix + ".cell.conv_x", 7 * c, s.in_channels, s.kernel);
    add_conv(store, rng, prefix + ".cell.conv_h", 4 * c, c, s.kernel, false);
    add_conv(store, rng, prefix + ".cell.conv_m", 3 * c, c, s.kernel, false);
    add_conv(store, rng, prefix + ".cell.conv_o", c, 2 * c, s.kernel, false);
    add_conv(store, rng, prefix + ".cell.fuse", c, s.strict_fusion ? s.in_channels + c : 2 * c, 1,
             false);
    if (all_groups || s.flags.rab_on_input) {
      RabParams<T>::init(store, rng, prefix + ".rab_x",
                         {s.in_channels, s.regions, s.reduction, s.rab_kernel});
    }
    if (all_groups || s.flags.rab_on_hidden) {
      RabParams<T>::init(store, rng, prefix + ".rab_h", {c, s.regions, s.reduction, s.rab_kernel});
    }
    if (all_groups || s.flags.ram_enabled) {
      add_conv(store, rng, prefix + ".ram.conv", s.memory_channels, s.memory_channels, s.kernel);
    }
  }

  static CellParams bind(const ParamStore<T>& store, const std::string& prefix,
                         const CellShape& s) {
    CellParams p;
    p.conv_x = ConvParams<T>::bind(store, prefix + ".cell.conv_x");
    p.conv_h = ConvParams<T>::bind(store, prefix + ".cell.conv_h");
    p.conv_m = ConvParams<T>::bind(store, prefix + ".cell.conv_m");
    p.conv_o = ConvParams<T>::bind(store, prefix + ".cell.conv_o");
    p.fuse = ConvParams<T>::bind(store, prefix + ".cell.fuse");
    if (s.flags.rab_on_input) {
      p.rab_x = RabParams<T>::bind(store, prefix + ".rab_x", s.reduction);
      p.has_rab_x = true;
    }
    if (s.flags.rab_on_hidden) {
      p.rab_h = RabParams<T>::bind(store, prefix + ".rab_h", s.reduction);
      p.has_rab_h = true;
    }
    if (s.flags.ram_enabled) {
      p.ram = ConvParams<T>::bind(store, prefix + ".ram.conv");
      p.has_ram = true;
    }
    return p;
  }
};

template <class T>
struct CellState {
  Var<T> h;
  Var<T> c;
  Var<T> m;
  LongMemory<T> xh;
};

template <class T>
CellState<T> rap_cell_step(const Var<T>& x, const Var<T>& h_prev, const Var<T>& c_prev,
                           const Var<T>& m_in, const LongMemory<T>& xh_in,
                           const CellParams<T>& p, const CellShape& s,
                           const std::string& where = "cell") {
  for (const auto* v : {&x, &h_prev, &c_prev, &m_in}) {
    if (v->shape().size() != 4 || v->dim(0) != x.dim(0) || v->dim(2) != x.dim(2) ||
        v->dim(3) != x.dim(3)) {
      throw ShapeError(where + ": inputs must share B, H, W; got " + shape_str(v->shape()) +
                       " and " + shape_str(x.shape()));
    }
  }
  const int c = s.hidden;
  if (h_prev.dim(1) != c || c_prev.dim(1) != c || m_in.dim(1) != c) {
    throw ShapeError(where + ": recurrent state must have " + std::to_string(c) + " channels");
  }
  const int k = s.kernel;
  auto conv = [k](const Var<T>& in, const ConvParams<T>& cp) {
    return ops::conv2d(in, cp.weight, cp.bias, 1, k / 2);
  };
  auto gate = [&](const Var<T>& v, const char* name) {
    check_finite(v, where + " gate " + name);
    return v;
  };

  Var<T> xa = s.flags.rab_on_input ? rab_forward<T>(x, p.rab_x, nullptr, where + " input RAB") : x;
  Var<T> ha =
      s.flags.rab_on_hidden ? rab_forward<T>(h_prev, p.rab_h, nullptr, where + " hidden RAB") : h_prev;

  auto xc = conv(xa, p.conv_x);
  auto hc = conv(ha, p.conv_h);
  auto mc = conv(m_in, p.conv_m);
  auto xs = [&](int i) { return ops::slice(xc, 1, i * c, c); };
  auto hs = [&](int i) { return ops::slice(hc, 1, i * c, c); };
  auto ms = [&](int i) { return ops::slice(mc, 1, i * c, c); };

  auto i_t = gate(ops::sigmoid(ops::add(xs(0), hs(0))), "i");
  auto g_t = gate(ops::tanh(ops::add(xs(1), hs(1))), "g");
  auto f_t = gate(ops::sigmoid(ops::add(xs(2), hs(2))), "f");
  auto i_m = gate(ops::sigmoid(ops::add(xs(3), ms(0))), "i'");
  auto g_m = gate(ops::tanh(ops::add(xs(4), ms(1))), "g'");
  auto f_m = gate(ops::sigmoid(ops::add(xs(5), ms(2))), "f'");

  auto c_out = ops::add(ops::mul(i_t, g_t), ops::mul(f_t, c_prev));
  auto m_out = ops::add(ops::mul(i_m, g_m), ops::mul(f_m, m_in));
  auto cm = ops::concat<T>({c_out, m_out}, 1);
  auto o_t = gate(ops::sigmoid(ops::add(ops::add(xs(6), hs(3)), conv(cm, p.conv_o))), "o");

  auto fused_in = s.strict_fusion ? ops::concat<T>({xa, m_out}, 1) : cm;
  auto h_fused = ops::mul(o_t, ops::tanh(ops::conv2d(fused_in, p.fuse.weight, p.fuse.bias)));
  check_finite(h_fused, where + " hidden");

  if (!s.flags.ram_enabled) return {h_fused, c_out, m_out, xh_in};
  auto ram = ram_forward(h_fused, xh_in, p.ram, s.ram_residual);
  check_finite(ram.hidden, where + " recall attention");
  return {ram.hidden, c_out, m_out, ram.memory};
}

}  // namespace rapnet
