#include <gtest/gtest.h>

#include <filesystem>

#include "rapnet/checkpoint.hpp"
#include "rapnet/rap_net.hpp"
#include "test_util.hpp"

using namespace rapnet;
using testutil::cvar;
using testutil::matches;
using testutil::random_tensor;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.height = 8;
  cfg.width = 8;
  cfg.layers = 2;
  cfg.hidden = 4;
  cfg.regions = 4;
  cfg.kernel = 3;
  return cfg;
}

template <class T = double>
Tensor<T> random_frames(int b, int t, int h, int w, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  return random_tensor({b, t, 1, h, w}, gen, 0, 1).cast<T>();
}

}  // namespace

TEST(RapNet, GeneratesAllButFirstFrame) {
  const auto cfg = small_config();
  const auto store = init_params<double>(cfg, 1);
  const auto frames = random_frames(2, 15, 8, 8, 1);
  const auto gen = forward_sequence(frames, cfg, store);
  EXPECT_EQ(gen.shape(), (Shape{2, 14, 1, 8, 8}));
  const auto fc = forecast_slice(gen.value(), cfg);
  EXPECT_EQ(fc.shape(), (Shape{2, 10, 1, 8, 8}));
  for (double v : fc.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(RapNet, FrameCountIndependentOfFlags) {
  const auto frames = random_frames(1, 15, 8, 8, 2);
  for (auto flags : {AblationFlags{false, false, false}, AblationFlags{true, false, false},
                     AblationFlags{false, true, false}, AblationFlags{true, true, false},
                     AblationFlags{true, true, true}}) {
    auto cfg = small_config();
    cfg.flags = flags;
    const auto store = init_params<double>(cfg, 2);
    EXPECT_EQ(forward_sequence(frames, cfg, store).dim(1), 14);
  }
}

TEST(RapNet, InferenceFromInputFramesOnly) {
  const auto cfg = small_config();
  const auto store = init_params<double>(cfg, 3);
  const auto frames = random_frames(1, 15, 8, 8, 3);
  const auto full = forward_sequence(frames, cfg, store).value();
  const auto short_run = forward_sequence(frame_range(frames, 0, 5), cfg, store).value();
  // Without teacher forcing only the first t_in frames are read.
  EXPECT_EQ(full, short_run);
  EXPECT_THROW(forward_sequence(frame_range(frames, 0, 5), cfg, store,
                                std::vector<bool>(14, true)),
               ValidationError);
  EXPECT_THROW(forward_sequence(frame_range(frames, 0, 7), cfg, store), ShapeError);
}

TEST(RapNet, ZeroParametersGiveZeroFrames) {
  const auto cfg = small_config();
  auto store = init_params<double>(cfg, 4);
  for (const auto& [_, v] : store.entries()) {
    Var<double> handle = v;
    handle.mutable_value().fill(0);
  }
  const auto gen = forward_sequence(random_frames(2, 15, 8, 8, 4), cfg, store);
  EXPECT_EQ(gen.shape(), (Shape{2, 14, 1, 8, 8}));
  for (double v : gen.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(RapNet, Deterministic) {
  auto cfg = small_config();
  cfg.patch = 2;
  const auto frames = random_frames<float>(2, 15, 8, 8, 5);
  const auto a = forward_sequence(frames, cfg, init_params<float>(cfg, 5)).value();
  const auto b = forward_sequence(frames, cfg, init_params<float>(cfg, 5)).value();
  EXPECT_EQ(a, b);
  const auto c = forward_sequence(frames, cfg, init_params<float>(cfg, 6)).value();
  EXPECT_FALSE(a == c);
}

TEST(RapNet, TeacherMaskSelectsGroundTruth) {
  const auto cfg = small_config();
  const auto store = init_params<double>(cfg, 7);
  auto frames = random_frames(1, 15, 8, 8, 7);
  std::vector<bool> mask(14, false);
  const auto free_run = forward_sequence(frames, cfg, store, mask).value();
  EXPECT_EQ(free_run, forward_sequence(frames, cfg, store).value());
  mask[9] = true;
  const auto forced = forward_sequence(frames, cfg, store, mask).value();
  // Steps before the forced one are unchanged; the step after it differs.
  const std::size_t per = 64;
  for (std::size_t i = 0; i < 9 * per; ++i) EXPECT_EQ(forced[i], free_run[i]);
  bool differs = false;
  for (std::size_t i = 9 * per; i < 10 * per; ++i) differs |= forced[i] != free_run[i];
  EXPECT_TRUE(differs);
  EXPECT_THROW(forward_sequence(frames, cfg, store, std::vector<bool>(13, false)), ShapeError);
}

TEST(RapNet, WarmupReadsGroundTruth) {
  const auto cfg = small_config();
  const auto store = init_params<double>(cfg, 8);
  auto frames = random_frames(1, 15, 8, 8, 8);
  const auto base = forward_sequence(frames, cfg, store).value();
  // Changing frame 4 (the last input) changes the first forecast frame.
  frames.at(0, 4, 0, 3, 3) = 1 - frames.at(0, 4, 0, 3, 3);
  const auto changed = forward_sequence(frames, cfg, store).value();
  for (std::size_t i = 0; i < 4 * 64; ++i) EXPECT_EQ(base[i], changed[i]);
  bool differs = false;
  for (std::size_t i = 4 * 64; i < 5 * 64; ++i) differs |= base[i] != changed[i];
  EXPECT_TRUE(differs);
}

TEST(RapNet, RejectsUnnormalizedInput) {
  const auto cfg = small_config();
  const auto store = init_params<double>(cfg, 9);
  auto frames = random_frames(1, 15, 8, 8, 9);
  frames[17] = 1.5;
  EXPECT_THROW(forward_sequence(frames, cfg, store), ValidationError);
  frames[17] = -0.2;
  EXPECT_THROW(forward_sequence(frames, cfg, store), ValidationError);
  EXPECT_THROW(forward_sequence(random_frames(1, 15, 8, 6, 9), cfg, store), ShapeError);
}

TEST(RapNet, RamDisabledIgnoresBufferContents) {
  auto cfg = small_config();
  cfg.flags.ram_enabled = false;
  const auto store = init_params<double>(cfg, 10);
  const auto p = NetParams<double>::bind(store, cfg);
  const auto frames = random_frames(2, 15, 8, 8, 10);
  std::mt19937_64 gen(10);

  auto clean = init_state<double>(cfg, 2);
  auto noisy = init_state<double>(cfg, 2);
  for (auto& mem : noisy.xh) {
    mem.data = cvar(random_tensor(mem.data.shape(), gen));
    mem.fill_count = 3;
  }
  for (int t = 0; t < 14; ++t) {
    auto in = cvar(frame_at(frames, t));
    const auto a = net_step(cfg, p, clean, in).value();
    const auto b = net_step(cfg, p, noisy, in).value();
    ASSERT_EQ(a, b) << "step " << t;
  }
}

TEST(RapNet, SingleLayerMemoryZigZag) {
  auto cfg = small_config();
  cfg.layers = 1;
  const auto store = init_params<double>(cfg, 11);
  const auto p = NetParams<double>::bind(store, cfg);
  const auto frames = random_frames(1, 15, 8, 8, 11);
  auto state = init_state<double>(cfg, 1);
  net_step(cfg, p, state, cvar(frame_at(frames, 0)));
  const auto h0 = state.h[0], c0 = state.c[0], m0 = state.m;
  const auto mem = state.xh[0];

  net_step(cfg, p, state, cvar(frame_at(frames, 1)));
  auto pushed = push_frame(mem, cvar(frame_at(frames, 1)));
  auto manual = rap_cell_step(cvar(frame_at(frames, 1)), h0, c0, m0, pushed, p.cells[0],
                              cfg.cell_shape(0));
  EXPECT_EQ(state.m.value(), manual.m.value());
  EXPECT_EQ(state.h[0].value(), manual.h.value());
  EXPECT_EQ(state.step, 2);
}

TEST(RapNet, MemoryFlowsUpward) {
  const auto cfg = small_config();
  const auto store = init_params<double>(cfg, 12);
  const auto p = NetParams<double>::bind(store, cfg);
  const auto frames = random_frames(1, 15, 8, 8, 12);
  auto state = init_state<double>(cfg, 1);
  for (int t = 0; t < 3; ++t) net_step(cfg, p, state, cvar(frame_at(frames, t)));
  EXPECT_EQ(state.xh[0].fill_count, 3);
  EXPECT_EQ(state.xh[1].fill_count, 3);
  // Layer 1 receives layer 0's convolved buffer, not the raw one.
  EXPECT_FALSE(state.xh[1].data.value() == state.xh[0].data.value());
  auto conv0 = convolve_memory(state.xh[0], p.cells[0].ram);
  EXPECT_EQ(conv0.data.value(), state.xh[1].data.value());
}

TEST(RapNet, InitStateIsZero) {
  auto cfg = small_config();
  cfg.layers = 4;
  const auto s = init_state<double>(cfg, 2);
  ASSERT_EQ(s.h.size(), 4u);
  ASSERT_EQ(s.c.size(), 4u);
  ASSERT_EQ(s.xh.size(), 4u);
  for (int l = 0; l < 4; ++l) {
    EXPECT_EQ(s.h[l].shape(), (Shape{2, 4, 8, 8}));
    for (double v : s.h[l].value().values()) EXPECT_EQ(v, 0.0);
    for (double v : s.c[l].value().values()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(s.xh[l].fill_count, 0);
    EXPECT_EQ(s.xh[l].capacity(), cfg.t_total);
  }
  for (double v : s.m.value().values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(s.step, 0);
}

TEST(PatchFolding, RoundTrip) {
  std::mt19937_64 gen(13);
  const auto frame = random_tensor({2, 1, 8, 12}, gen);
  for (int p : {1, 2, 4}) {
    auto folded = fold_patches(cvar(frame), p);
    EXPECT_EQ(folded.shape(), (Shape{2, p * p, 8 / p, 12 / p}));
    EXPECT_EQ(unfold_patches(folded, 1, p).value(), frame);
  }
  auto folded = fold_patches(cvar(frame), 2).value();
  EXPECT_EQ(folded.at(1, 3, 2, 5), frame.at(1, 0, 5, 11));
  EXPECT_EQ(folded.at(0, 1, 0, 0), frame.at(0, 0, 0, 1));
}

TEST(ModelConfig, ValidationNamesTheField) {
  auto cfg = small_config();
  cfg.kernel = 4;
  try {
    cfg.validate();
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("model.kernel"), std::string::npos);
  }
  cfg = small_config();
  cfg.t_in = 15;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = small_config();
  cfg.patch = 3;
  EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(ModelConfig, JsonRoundTripRejectsUnknownKeys) {
  auto cfg = small_config();
  cfg.strict_fusion = true;
  cfg.flags.rab_on_hidden = false;
  nlohmann::json j = cfg;
  const auto back = j.get<ModelConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  j["hiden"] = 3;
  EXPECT_THROW(j.get<ModelConfig>(), ValidationError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto cfg = small_config();
  cfg.patch = 2;
  Checkpoint<float> ckpt{cfg, {{"note", "x"}}, init_params<float>(cfg, 14)};
  const auto bytes = encode_checkpoint(ckpt);
  EXPECT_EQ(bytes.substr(0, 11), "RAPNETCKPT1");
  const auto back = decode_checkpoint<float>(bytes);
  EXPECT_TRUE(back.params == ckpt.params);
  EXPECT_EQ(nlohmann::json(back.model), nlohmann::json(cfg));
  EXPECT_EQ(back.meta, ckpt.meta);
  EXPECT_EQ(encode_checkpoint(back), bytes);

  const auto path = std::filesystem::temp_directory_path() / "rapnet_test_ckpt.rapnet";
  save_checkpoint(path, ckpt);
  const auto loaded = load_checkpoint<float>(path);
  EXPECT_TRUE(loaded.params == ckpt.params);
  std::filesystem::remove(path);

  // Forecasts from the loaded parameters are identical.
  const auto frames = random_frames<float>(1, 15, 8, 8, 14);
  EXPECT_EQ(forward_sequence(frames, cfg, ckpt.params).value(),
            forward_sequence(frames, back.model, back.params).value());
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto cfg = small_config();
  const auto bytes = encode_checkpoint(Checkpoint<double>{cfg, {}, init_params<double>(cfg, 15)});
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint<double>(bad), FormatError);
  EXPECT_THROW(decode_checkpoint<double>(bytes.substr(0, bytes.size() - 3)), FormatError);
  EXPECT_THROW(decode_checkpoint<double>(bytes + "z"), FormatError);
  EXPECT_THROW(decode_checkpoint<double>(""), FormatError);
}
