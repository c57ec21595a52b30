// Stacked recurrent network and the sequence forecast loop.
//
// Hidden and temporal states (h, c) flow along time inside each layer. The
// spatial memory m climbs the stack within a step and wraps from the top
// layer to the bottom layer of the next step. The long-memory buffer is
// filled at the bottom and handed upward, each layer passing on its
// convolved copy.
#pragma once

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

#include "rapnet/rap_cell.hpp"

namespace rapnet {

struct ModelConfig {
  int frame_channels = 1;
  int height = 64;
  int width = 64;
  int patch = 1;  // frames are folded into patch x patch blocks of channels
  int layers = 4;
  int hidden = 64;
  int regions = 64;
  int reduction = 2;
  int kernel = 5;
  int rab_kernel = 3;
  int t_in = 5;
  int t_total = 15;
  AblationFlags flags;
  bool strict_fusion = false;
  bool ram_residual = true;

  int model_channels() const { return frame_channels * patch * patch; }
  int model_height() const { return height / patch; }
  int model_width() const { return width / patch; }
  int forecast_length() const { return t_total - t_in; }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ValidationError("model." + field + ": " + why);
    };
    if (frame_channels < 1) fail("frame_channels", "must be >= 1");
    if (layers < 1) fail("layers", "must be >= 1");
    if (hidden < 1) fail("hidden", "must be >= 1");
    if (regions < 1) fail("regions", "must be >= 1");
    if (reduction < 1) fail("reduction", "must be >= 1");
    if (kernel < 1 || kernel % 2 == 0) fail("kernel", "must be a positive odd number");
    if (rab_kernel < 1 || rab_kernel % 2 == 0) fail("rab_kernel", "must be a positive odd number");
    if (patch < 1) fail("patch", "must be >= 1");
    if (height < 1 || width < 1) fail("height", "frame size must be positive");
    if (height % patch || width % patch) fail("patch", "must divide height and width");
    if (model_height() < reduction || model_width() < reduction) {
      fail("reduction", "exceeds the folded frame size");
    }
    if (t_in < 1) fail("t_in", "must be >= 1");
    if (t_in >= t_total) fail("t_in", "must be smaller than t_total");
  }

  CellShape cell_shape(int layer) const {
    CellShape s;
    s.in_channels = layer == 0 ? model_channels() : hidden;
    s.hidden = hidden;
    s.memory_channels = model_channels();
    s.kernel = kernel;
    s.regions = regions;
    s.reduction = reduction;
    s.rab_kernel = rab_kernel;
    s.strict_fusion = strict_fusion;
    s.ram_residual = ram_residual;
    s.flags = flags;
    return s;
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"frame_channels", c.frame_channels},
       {"height", c.height},
       {"width", c.width},
       {"patch", c.patch},
       {"layers", c.layers},
       {"hidden", c.hidden},
       {"regions", c.regions},
       {"reduction", c.reduction},
       {"kernel", c.kernel},
       {"rab_kernel", c.rab_kernel},
       {"t_in", c.t_in},
       {"t_total", c.t_total},
       {"rab_on_input", c.flags.rab_on_input},
       {"rab_on_hidden", c.flags.rab_on_hidden},
       {"ram_enabled", c.flags.ram_enabled},
       {"strict_fusion", c.strict_fusion},
       {"ram_residual", c.ram_residual}};
}

/// Missing keys keep their defaults; unknown keys are rejected by name.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ValidationError("model: expected a JSON object");
  auto read = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception&) {
      throw ValidationError(std::string("model.") + key + ": wrong type");
    }
  };
  static const std::vector<std::string> known = {
      "frame_channels", "height", "width", "patch", "layers", "hidden",
      "regions", "reduction", "kernel", "rab_kernel", "t_in", "t_total",
      "rab_on_input", "rab_on_hidden", "ram_enabled", "strict_fusion", "ram_residual"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ValidationError("model." + key + ": unknown field");
    }
  }
  read("frame_channels", c.frame_channels);
  read("height", c.height);
  read("width", c.width);
  read("patch", c.patch);
  read("layers", c.layers);
  read("hidden", c.hidden);
  read("regions", c.regions);
  read("reduction", c.reduction);
  read("kernel", c.kernel);
  read("rab_kernel", c.rab_kernel);
  read("t_in", c.t_in);
  read("t_total", c.t_total);
  read("rab_on_input", c.flags.rab_on_input);
  read("rab_on_hidden", c.flags.rab_on_hidden);
  read("ram_enabled", c.flags.ram_enabled);
  read("strict_fusion", c.strict_fusion);
  read("ram_residual", c.ram_residual);
}

inline std::string layer_prefix(int l) { return "layer" + std::to_string(l); }

/// Fresh parameters. With `all_groups`, attention groups are created even
/// when the flags disable them (used to show they receive no gradient).
template <class T>
ParamStore<T> init_params(const ModelConfig& cfg, std::uint64_t seed, bool all_groups = false) {
  cfg.validate();
  ParamStore<T> store;
  Rng rng(seed);
  for (int l = 0; l < cfg.layers; ++l) {
    CellParams<T>::init(store, rng, layer_prefix(l), cfg.cell_shape(l), all_groups);
  }
  add_conv(store, rng, "head.conv", cfg.model_channels(), cfg.hidden, 1);
  return store;
}

template <class T>
struct NetParams {
  std::vector<CellParams<T>> cells;
  ConvParams<T> head;

  static NetParams bind(const ParamStore<T>& store, const ModelConfig& cfg) {
    NetParams p;
    for (int l = 0; l < cfg.layers; ++l) {
      p.cells.push_back(CellParams<T>::bind(store, layer_prefix(l), cfg.cell_shape(l)));
    }
    p.head = ConvParams<T>::bind(store, "head.conv");
    return p;
  }
};

template <class T>
struct RAPState {
  std::vector<Var<T>> h;
  std::vector<Var<T>> c;
  Var<T> m;
  // xh[0] is the raw input buffer; xh[l] is the memory handed to layer l at
  // the latest step.
  std::vector<LongMemory<T>> xh;
  int step = 0;
};

template <class T>
RAPState<T> init_state(const ModelConfig& cfg, int batch) {
  cfg.validate();
  const int hh = cfg.model_height(), ww = cfg.model_width();
  RAPState<T> s;
  for (int l = 0; l < cfg.layers; ++l) {
    s.h.push_back(Var<T>::constant(Tensor<T>(Shape{batch, cfg.hidden, hh, ww})));
    s.c.push_back(Var<T>::constant(Tensor<T>(Shape{batch, cfg.hidden, hh, ww})));
    s.xh.push_back(LongMemory<T>::empty(batch, cfg.t_total, cfg.model_channels(), hh, ww));
  }
  s.m = Var<T>::constant(Tensor<T>(Shape{batch, cfg.hidden, hh, ww}));
  return s;
}

/// Advances every layer by one step on `input` [B, Cp, Hp, Wp] (folded
/// layout) and returns the next-frame prediction in the same layout.
template <class T>
Var<T> net_step(const ModelConfig& cfg, const NetParams<T>& p, RAPState<T>& state,
                const Var<T>& input) {
  if (cfg.flags.ram_enabled) state.xh[0] = push_frame(state.xh[0], input);
  Var<T> x = input;
  Var<T> m = state.m;
  LongMemory<T> mem = state.xh[0];
  for (int l = 0; l < cfg.layers; ++l) {
    auto out = rap_cell_step(x, state.h[l], state.c[l], m, mem, p.cells[l], cfg.cell_shape(l),
                             layer_prefix(l));
    state.h[l] = out.h;
    state.c[l] = out.c;
    m = out.m;
    mem = out.xh;
    if (l + 1 < cfg.layers) state.xh[l + 1] = mem;
    x = out.h;
  }
  state.m = m;
  ++state.step;
  return ops::conv2d(state.h.back(), p.head.weight, p.head.bias);
}

/// Index map for patch folding. folded[b, (py*p+px)*C + c, y, x] =
/// frame[b, c, y*p+py, x*p+px]; `to_folded` selects the direction.
inline std::vector<std::size_t> patch_index(int batch, int channels, int height, int width,
                                            int patch, bool to_folded) {
  const int hp = height / patch, wp = width / patch, cp = channels * patch * patch;
  std::vector<std::size_t> index(static_cast<std::size_t>(batch) * channels * height * width);
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < channels; ++c)
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
          const int fc = ((y % patch) * patch + x % patch) * channels + c;
          const std::size_t frame_i =
              ((static_cast<std::size_t>(b) * channels + c) * height + y) * width + x;
          const std::size_t fold_i =
              ((static_cast<std::size_t>(b) * cp + fc) * hp + y / patch) * wp + x / patch;
          if (to_folded) {
            index[fold_i] = frame_i;
          } else {
            index[frame_i] = fold_i;
          }
        }
  return index;
}

template <class T>
Var<T> fold_patches(const Var<T>& frame, int patch) {
  if (patch == 1) return frame;
  const int b = frame.dim(0), c = frame.dim(1), h = frame.dim(2), w = frame.dim(3);
  return ops::gather(frame, patch_index(b, c, h, w, patch, true),
                     Shape{b, c * patch * patch, h / patch, w / patch});
}

template <class T>
Var<T> unfold_patches(const Var<T>& folded, int frame_channels, int patch) {
  if (patch == 1) return folded;
  const int b = folded.dim(0), h = folded.dim(2) * patch, w = folded.dim(3) * patch;
  return ops::gather(folded, patch_index(b, frame_channels, h, w, patch, false),
                     Shape{b, frame_channels, h, w});
}

/// Frame `t` of [B, T, C, H, W] as [B, C, H, W].
template <class T>
Tensor<T> frame_at(const Tensor<T>& frames, int t) {
  const Shape& s = frames.shape();
  const std::size_t per = static_cast<std::size_t>(s[2]) * s[3] * s[4];
  Tensor<T> out(Shape{s[0], s[2], s[3], s[4]});
  for (int b = 0; b < s[0]; ++b) {
    std::copy_n(frames.data() + (static_cast<std::size_t>(b) * s[1] + t) * per, per,
                out.data() + b * per);
  }
  return out;
}

/// Frames [from, to) of [B, T, C, H, W].
template <class T>
Tensor<T> frame_range(const Tensor<T>& frames, int from, int to) {
  const Shape& s = frames.shape();
  if (from < 0 || to > s[1] || from > to) throw ShapeError("frame_range: bad range");
  const std::size_t per = static_cast<std::size_t>(s[2]) * s[3] * s[4];
  Tensor<T> out(Shape{s[0], to - from, s[2], s[3], s[4]});
  for (int b = 0; b < s[0]; ++b) {
    std::copy_n(frames.data() + (static_cast<std::size_t>(b) * s[1] + from) * per,
                (to - from) * per, out.data() + static_cast<std::size_t>(b) * (to - from) * per);
  }
  return out;
}

/// Runs the forecast loop over frames [B, T, C, H, W] with values in [0, 1].
/// T is t_total (training and scoring) or t_in (pure inference). Step tau
/// consumes ground truth when tau < t_in or teacher_mask[tau] is set, and the
/// previous prediction otherwise. Returns the t_total - 1 generated frames.
template <class T>
Var<T> forward_sequence(const Tensor<T>& frames, const ModelConfig& cfg,
                        const ParamStore<T>& store,
                        const std::optional<std::vector<bool>>& teacher_mask = std::nullopt) {
  cfg.validate();
  const Shape& s = frames.shape();
  if (s.size() != 5 || s[2] != cfg.frame_channels || s[3] != cfg.height || s[4] != cfg.width) {
    throw ShapeError("forward_sequence: frames " + shape_str(s) + " do not match the model (" +
                     std::to_string(cfg.frame_channels) + "x" + std::to_string(cfg.height) + "x" +
                     std::to_string(cfg.width) + ")");
  }
  const int available = s[1];
  if (available != cfg.t_total && available != cfg.t_in) {
    throw ShapeError("forward_sequence: expected " + std::to_string(cfg.t_in) + " or " +
                     std::to_string(cfg.t_total) + " frames, got " + std::to_string(available));
  }
  if (teacher_mask) {
    if (available != cfg.t_total) {
      throw ValidationError("forward_sequence: teacher forcing needs all future frames");
    }
    if (static_cast<int>(teacher_mask->size()) != cfg.t_total - 1) {
      throw ShapeError("forward_sequence: teacher mask must have t_total - 1 entries");
    }
  }
  constexpr double kTol = 1e-6;
  for (T v : frames.values()) {
    if (!(v >= -kTol && v <= 1 + kTol)) {
      throw ValidationError("forward_sequence: input not normalized to [0, 1]");
    }
  }

  const int batch = s[0];
  const NetParams<T> p = NetParams<T>::bind(store, cfg);
  RAPState<T> state = init_state<T>(cfg, batch);
  std::vector<Var<T>> generated;
  Var<T> previous;
  for (int tau = 0; tau + 1 < cfg.t_total; ++tau) {
    const bool ground_truth = tau < cfg.t_in || (teacher_mask && (*teacher_mask)[tau]);
    Var<T> input = ground_truth
                       ? fold_patches(Var<T>::constant(frame_at(frames, tau)), cfg.patch)
                       : previous;
    previous = net_step(cfg, p, state, input);
    check_finite(previous, "output head");
    auto frame = unfold_patches(previous, cfg.frame_channels, cfg.patch);
    generated.push_back(ops::reshape(frame, Shape{batch, 1, s[2], s[3], s[4]}));
  }
  return ops::concat(generated, 1);
}

/// Last forecast_length() generated frames, clamped to [0, 1].
template <class T>
Tensor<T> forecast_slice(const Tensor<T>& generated, const ModelConfig& cfg) {
  const int n = generated.dim(1);
  Tensor<T> out = frame_range(generated, n - cfg.forecast_length(), n);
  for (auto& v : out.storage()) v = std::clamp(v, T{0}, T{1});
  return out;
}

}  // namespace rapnet
