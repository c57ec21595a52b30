// Plain PredRNN weights pulled out of a cell's fused convolutions, so the
// cell can be compared with the loop-based reference step.
#pragma once

#include "oracles/oracles.hpp"
#include "rapnet/rap_cell.hpp"
#include "test_util.hpp"

namespace testutil {

using namespace rapnet;

struct Cell {
  CellShape shape;
  ParamStore<double> store;
  CellParams<double> params;
};

inline Cell make_cell(int cin, int c, int k, AblationFlags flags, std::uint64_t seed, int cm = 1) {
  Cell cell;
  cell.shape.in_channels = cin;
  cell.shape.hidden = c;
  cell.shape.memory_channels = cm;
  cell.shape.kernel = k;
  cell.shape.regions = 4;
  cell.shape.flags = flags;
  Rng rng(seed);
  CellParams<double>::init(cell.store, rng, "layer0", cell.shape);
  cell.params = CellParams<double>::bind(cell.store, "layer0", cell.shape);
  return cell;
}

inline constexpr AblationFlags kPlain{false, false, false};

// Output channels [first, first + count) of a conv weight [Co, Ci, k, k].
inline std::vector<double> rows(const Tensor<double>& w, int first, int count) {
  const std::size_t per = w.size() / w.dim(0);
  return std::vector<double>(w.data() + first * per, w.data() + (first + count) * per);
}

// Input channels [first, first + count) of a conv weight [Co, Ci, k, k].
inline std::vector<double> cols(const Tensor<double>& w, int first, int count) {
  const int co = w.dim(0), ci = w.dim(1);
  const std::size_t kk = static_cast<std::size_t>(w.dim(2)) * w.dim(3);
  std::vector<double> out;
  for (int o = 0; o < co; ++o)
    for (int i = first; i < first + count; ++i)
      out.insert(out.end(), w.data() + (o * ci + i) * kk, w.data() + (o * ci + i + 1) * kk);
  return out;
}

inline oracle::PredRnnWeights unpack(const CellParams<double>& p, int c) {
  const auto& wx = p.conv_x.weight.value();
  const auto& bx = p.conv_x.bias.value();
  const auto& wh = p.conv_h.weight.value();
  const auto& wm = p.conv_m.weight.value();
  const auto& wo = p.conv_o.weight.value();
  oracle::PredRnnWeights w;
  w.wxi = rows(wx, 0, c);
  w.wxg = rows(wx, c, c);
  w.wxf = rows(wx, 2 * c, c);
  w.wxi2 = rows(wx, 3 * c, c);
  w.wxg2 = rows(wx, 4 * c, c);
  w.wxf2 = rows(wx, 5 * c, c);
  w.wxo = rows(wx, 6 * c, c);
  w.whi = rows(wh, 0, c);
  w.whg = rows(wh, c, c);
  w.whf = rows(wh, 2 * c, c);
  w.who = rows(wh, 3 * c, c);
  w.wmi = rows(wm, 0, c);
  w.wmg = rows(wm, c, c);
  w.wmf = rows(wm, 2 * c, c);
  w.wco = cols(wo, 0, c);
  w.wmo = cols(wo, c, c);
  w.w11 = to_vec(p.fuse.weight.value());
  w.bi = rows(bx.reshaped(Shape{7 * c, 1, 1, 1}), 0, c);
  w.bg = rows(bx.reshaped(Shape{7 * c, 1, 1, 1}), c, c);
  w.bf = rows(bx.reshaped(Shape{7 * c, 1, 1, 1}), 2 * c, c);
  w.bi2 = rows(bx.reshaped(Shape{7 * c, 1, 1, 1}), 3 * c, c);
  w.bg2 = rows(bx.reshaped(Shape{7 * c, 1, 1, 1}), 4 * c, c);
  w.bf2 = rows(bx.reshaped(Shape{7 * c, 1, 1, 1}), 5 * c, c);
  w.bo = rows(bx.reshaped(Shape{7 * c, 1, 1, 1}), 6 * c, c);
  return w;
}

}  // namespace testutil
