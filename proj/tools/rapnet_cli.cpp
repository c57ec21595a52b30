// rapnet: synthetic data, training, evaluation, forecasting and plotting.
//
// Exit codes: 0 success, 2 usage error, 3 data or validation error,
// 4 numeric failure.
#include <CLI11.hpp>

#include <atomic>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include "cli_support.hpp"
#include "rapnet/checkpoint.hpp"
#include "rapnet/metrics.hpp"
#include "rapnet/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace rapnet::cli {
namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json file_entry(const fs::path& p) { return {{"path", p.string()}, {"hash", file_hash(p)}}; }

/// One manifest per run, next to its main output.
void write_manifest(const fs::path& path, const std::string& command,
                    const std::vector<std::string>& argv, const json& config, std::uint64_t seed,
                    const json& inputs, const json& outputs) {
  json m = {{"command", command}, {"argv", argv},   {"config", config},
            {"seed", seed},       {"inputs", inputs}, {"outputs", outputs}};
  if (outputs.contains("checkpoint")) m["checkpoint_hash"] = outputs["checkpoint"]["hash"];
  write_json(path, m);
}

fs::path sidecar(const fs::path& p, const std::string& suffix) {
  fs::path out = p;
  out += suffix;
  return out;
}

std::pair<int, int> parse_size(const std::string& s) {
  int h = 0, w = 0;
  char x = 0;
  std::istringstream is(s);
  if (!(is >> h >> x >> w) || (x != 'x' && x != 'X') || !is.eof() || h < 1 || w < 1) {
    throw UsageError("--size must look like 32x32");
  }
  return {h, w};
}

AblationFlags ablation_flags(const std::string& name) {
  if (name == "x") return {true, false, false};
  if (name == "h") return {false, true, false};
  if (name == "cell") return {true, true, false};
  if (name == "full") return {true, true, true};
  throw UsageError("--ablation must be one of x, h, cell, full");
}

/// Runs `fn(i)` for i in [0, n) on up to worker_count() threads.
template <class F>
void parallel_for(std::size_t n, F fn) {
  const unsigned workers = std::min<std::size_t>(worker_count(), std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

/// Model forecasts for every sequence, in pixel units [T_out, H, W].
std::vector<Tensor<std::uint8_t>> model_forecasts(const ModelConfig& cfg,
                                                  const ParamStore<float>& params,
                                                  const std::vector<RadarSequence>& seqs,
                                                  int batch_size) {
  const ParamStore<float> fixed = params.frozen();
  std::vector<Tensor<std::uint8_t>> out(seqs.size());
  const std::size_t chunks = (seqs.size() + batch_size - 1) / batch_size;
  parallel_for(chunks, [&](std::size_t c) {
    std::vector<std::size_t> index;
    for (std::size_t i = c * batch_size; i < std::min(seqs.size(), (c + 1) * batch_size); ++i) {
      index.push_back(i);
    }
    const Tensor<float> frames = to_batch<float>(seqs, index, 0, cfg.t_in);
    const Tensor<float> pred = forecast(cfg, fixed, frames);
    for (std::size_t b = 0; b < index.size(); ++b) out[index[b]] = to_pixels(pred, static_cast<int>(b));
  });
  return out;
}

void check_dims(const ModelConfig& cfg, const std::vector<RadarSequence>& seqs, int min_frames) {
  if (seqs.empty()) throw ValidationError("data: no sequences");
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = seqs[i];
    if (s.height() != cfg.height || s.width() != cfg.width) {
      throw ValidationError("data: sequence " + std::to_string(i) + " is " +
                            std::to_string(s.height()) + "x" + std::to_string(s.width()) +
                            ", checkpoint expects " + std::to_string(cfg.height) + "x" +
                            std::to_string(cfg.width));
    }
    if (s.length() < min_frames) {
      throw ValidationError("data: sequence " + std::to_string(i) + " has " +
                            std::to_string(s.length()) + " frames, need " +
                            std::to_string(min_frames));
    }
  }
}

Tensor<std::uint8_t> frames_of(const RadarSequence& s, int from, int to) {
  const std::size_t per = static_cast<std::size_t>(s.height()) * s.width();
  return Tensor<std::uint8_t>(Shape{to - from, s.height(), s.width()},
                              std::vector<std::uint8_t>(s.frames.data() + from * per,
                                                        s.frames.data() + to * per));
}

struct SynthArgs {
  fs::path out;
  long n = 0;
  int frames = 15;
  std::string size = "32x32";
  std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a, const std::vector<std::string>& argv) {
  if (a.n < 1) throw UsageError("--n must be >= 1");
  if (a.frames < 1) throw UsageError("--frames must be >= 1");
  const auto [h, w] = parse_size(a.size);
  const auto seqs = generate_synthetic(static_cast<std::size_t>(a.n), a.frames, h, w, a.seed);
  write_rseq(a.out, seqs);
  write_manifest(sidecar(a.out, ".manifest.json"), "synth", argv,
                 {{"n", a.n}, {"frames", a.frames}, {"height", h}, {"width", w}}, a.seed,
                 json::object(), {{"data", file_entry(a.out)}});
  std::cout << "wrote " << seqs.size() << " sequences to " << a.out.string() << "\n";
  return 0;
}

struct TrainArgs {
  fs::path data, config, out;
  std::string ablation;
  std::optional<std::uint64_t> seed;
  std::optional<int> iterations;
};

int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv) {
  json cfg_json;
  try {
    cfg_json = json::parse(read_file(a.config));
  } catch (const json::exception& e) {
    throw ValidationError("config: " + std::string(e.what()));
  }
  if (!cfg_json.is_object()) throw ValidationError("config: expected a JSON object");
  for (const auto& [key, _] : cfg_json.items()) {
    if (key != "model" && key != "train") throw ValidationError("config." + key + ": unknown field");
  }
  ModelConfig model = cfg_json.value("model", json::object()).get<ModelConfig>();
  TrainConfig tc = cfg_json.value("train", json::object()).get<TrainConfig>();
  if (!a.ablation.empty()) model.flags = ablation_flags(a.ablation);
  if (a.seed) tc.seed = *a.seed;
  if (a.iterations) tc.max_iterations = *a.iterations;
  model.validate();
  tc.validate();

  const auto seqs = read_rseq(a.data);
  check_dims(model, seqs, model.t_total);
  if (static_cast<std::size_t>(tc.val_count) >= seqs.size()) {
    throw ValidationError("train.val_count: must be smaller than the dataset (" +
                          std::to_string(seqs.size()) + " sequences)");
  }
  const DatasetSplit split = split_dataset(seqs.size(), tc.val_count, tc.seed);

  fs::create_directories(a.out);
  const fs::path log_path = a.out / "train_log.jsonl";
  const fs::path ckpt_path = a.out / "checkpoint.rapnet";
  std::string log_text;
  write_file_atomic(log_path, log_text);
  auto sink = [&](const LogRecord& r) {
    log_text += log_record_json(r).dump() + "\n";
    write_file_atomic(log_path, log_text);
    std::cout << "iter " << r.iter << " train " << r.train_loss << " val " << r.val_loss
              << " p " << r.sampling_p << " t " << r.seconds << "s" << std::endl;
  };
  auto result = train(model, tc, seqs, split, init_params<float>(model, tc.seed), sink);

  Checkpoint<float> ckpt;
  ckpt.model = model;
  ckpt.params = std::move(result.best);
  ckpt.meta = {{"train", tc},
               {"best_val_loss", result.best_val_loss ? json(*result.best_val_loss) : json(nullptr)},
               {"best_iteration", result.best_iteration},
               {"iterations", result.iterations},
               {"stopped_early", result.stopped_early},
               {"data_hash", file_hash(a.data)}};
  save_checkpoint(ckpt_path, ckpt);
  write_manifest(a.out / "manifest.json", "train", argv,
                 {{"model", model}, {"train", tc}, {"ablation", a.ablation}}, tc.seed,
                 {{"data", file_entry(a.data)}, {"config", file_entry(a.config)}},
                 {{"checkpoint", file_entry(ckpt_path)}, {"log", {{"path", log_path.string()}}}});
  std::cout << "checkpoint " << ckpt_path.string() << " (best iteration " << result.best_iteration
            << ")\n";
  return 0;
}

struct EvalArgs {
  fs::path data, ckpt, out, csv;
  std::string baseline;
  int t_in = 5;
  int t_total = 15;
  int batch = 8;
};

int cmd_eval(const EvalArgs& a, const std::vector<std::string>& argv) {
  const auto seqs = read_rseq(a.data);
  std::vector<Tensor<std::uint8_t>> preds, truths;
  json config;
  json inputs = {{"data", file_entry(a.data)}};
  int t_in = a.t_in, t_total = a.t_total;
  if (a.baseline.empty()) {
    if (a.ckpt.empty()) throw UsageError("eval needs --ckpt or --baseline");
    const auto ckpt = load_checkpoint<float>(a.ckpt);
    check_dims(ckpt.model, seqs, ckpt.model.t_total);
    t_in = ckpt.model.t_in;
    t_total = ckpt.model.t_total;
    preds = model_forecasts(ckpt.model, ckpt.params, seqs, a.batch);
    config = {{"model", ckpt.model}};
    inputs["checkpoint"] = file_entry(a.ckpt);
  } else {
    if (a.baseline != "persistence" && a.baseline != "identity") {
      throw UsageError("--baseline must be persistence or identity");
    }
    if (t_in < 1 || t_in >= t_total) throw UsageError("--t-in must be in [1, t_total)");
    if (seqs.empty()) throw ValidationError("data: no sequences");
    for (const auto& s : seqs) {
      if (s.length() < t_total) throw ValidationError("data: sequences shorter than t_total");
      if (a.baseline == "identity") {
        preds.push_back(frames_of(s, t_in, t_total));
      } else {
        Tensor<std::uint8_t> p(Shape{t_total - t_in, s.height(), s.width()});
        const std::size_t per = static_cast<std::size_t>(s.height()) * s.width();
        for (int t = 0; t < t_total - t_in; ++t) {
          std::copy_n(s.frames.data() + (t_in - 1) * per, per, p.data() + t * per);
        }
        preds.push_back(std::move(p));
      }
    }
    config = {{"baseline", a.baseline}, {"t_in", t_in}, {"t_total", t_total}};
  }
  for (const auto& s : seqs) truths.push_back(frames_of(s, t_in, t_total));

  const EvalReport report = evaluate(preds, truths);
  write_json(a.out, report_to_json(report));
  json outputs = {{"report", file_entry(a.out)}};
  if (!a.csv.empty()) {
    std::ostringstream os;
    os << "sequence";
    for (double t : report.thresholds) os << ",hss_" << threshold_key(t) << ",csi_" << threshold_key(t);
    os << ",mae,ssim\n";
    os.precision(10);
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const EvalReport r = evaluate(std::vector{preds[i]}, std::vector{truths[i]});
      os << i;
      for (std::size_t k = 0; k < r.thresholds.size(); ++k) {
        os << ',';
        if (r.hss[k]) os << *r.hss[k];
        os << ',';
        if (r.csi[k]) os << *r.csi[k];
      }
      os << ',' << r.mae << ',' << r.ssim << '\n';
    }
    write_file_atomic(a.csv, os.str());
    outputs["csv"] = file_entry(a.csv);
  }
  write_manifest(sidecar(a.out, ".manifest.json"), "eval", argv, config, 0, inputs, outputs);
  std::cout << report_to_json(report).dump(2) << "\n";
  return 0;
}

struct PredictArgs {
  fs::path ckpt, input, out;
  int batch = 8;
};

int cmd_predict(const PredictArgs& a, const std::vector<std::string>& argv) {
  const auto ckpt = load_checkpoint<float>(a.ckpt);
  const auto seqs = read_rseq(a.input);
  check_dims(ckpt.model, seqs, ckpt.model.t_in);
  const auto preds = model_forecasts(ckpt.model, ckpt.params, seqs, a.batch);
  std::vector<RadarSequence> out;
  for (const auto& p : preds) {
    RadarSequence s;
    s.frames = p;
    out.push_back(std::move(s));
  }
  write_rseq(a.out, out);
  write_manifest(sidecar(a.out, ".manifest.json"), "predict", argv, {{"model", ckpt.model}}, 0,
                 {{"checkpoint", file_entry(a.ckpt)}, {"input", file_entry(a.input)}},
                 {{"forecast", file_entry(a.out)}});
  std::cout << "wrote " << out.size() << " forecasts to " << a.out.string() << "\n";
  return 0;
}

struct PlotArgs {
  fs::path truth, pred, out;
  int scale = 0;
  long limit = -1;
};

int cmd_plot(const PlotArgs& a, const std::vector<std::string>& argv) {
  const auto preds = read_rseq(a.pred);
  std::vector<RadarSequence> truths;
  if (!a.truth.empty()) {
    truths = read_rseq(a.truth);
    if (truths.size() != preds.size()) throw ValidationError("plot: truth and forecast counts differ");
  }
  fs::create_directories(a.out);
  const std::size_t n = a.limit < 0 ? preds.size() : std::min<std::size_t>(preds.size(), a.limit);
  json written = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = preds[i];
    const int t_out = p.length();
    const int scale = a.scale > 0 ? a.scale : std::max(1, 128 / std::max(p.height(), p.width()));
    for (int t = 0; t < t_out; ++t) {
      const Tensor<std::uint8_t> pf = frames_of(p, t, t + 1).reshaped(Shape{p.height(), p.width()});
      std::vector<const Tensor<std::uint8_t>*> panels;
      Tensor<std::uint8_t> tf;
      if (!truths.empty()) {
        const auto& tr = truths[i];
        if (tr.height() != p.height() || tr.width() != p.width() || tr.length() < t_out) {
          throw ValidationError("plot: truth sequence " + std::to_string(i) + " does not match");
        }
        // The forecast lines up with the last t_out truth frames.
        const int k = tr.length() - t_out + t;
        tf = frames_of(tr, k, k + 1).reshaped(Shape{tr.height(), tr.width()});
        panels.push_back(&tf);
      }
      panels.push_back(&pf);
      char name[64];
      std::snprintf(name, sizeof(name), "seq%04zu_t%02d.png", i, t);
      write_png(a.out / name, render_panels(panels, scale));
      written.push_back(name);
    }
  }
  json inputs = {{"forecast", file_entry(a.pred)}};
  if (!a.truth.empty()) inputs["truth"] = file_entry(a.truth);
  write_manifest(a.out / "manifest.json", "plot", argv, {{"scale", a.scale}, {"limit", a.limit}}, 0,
                 inputs, {{"images", written}});
  std::cout << "wrote " << written.size() << " images to " << a.out.string() << "\n";
  return 0;
}

}  // namespace
}  // namespace rapnet::cli

int main(int argc, char** argv) {
  using namespace rapnet::cli;
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Radar echo extrapolation with region and recall attention"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic RSEQ dataset");
  synth->add_option("--out", sa.out, "Output RSEQ path")->required();
  synth->add_option("--n", sa.n, "Number of sequences")->required();
  synth->add_option("--frames", sa.frames, "Frames per sequence");
  synth->add_option("--size", sa.size, "Frame size HxW");
  synth->add_option("--seed", sa.seed, "Generator seed");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train a model");
  trn->add_option("--data", ta.data, "Training RSEQ")->required();
  trn->add_option("--config", ta.config, "JSON config with model and train sections")->required();
  trn->add_option("--out", ta.out, "Output directory")->required();
  trn->add_option("--ablation", ta.ablation, "x | h | cell | full");
  trn->add_option("--seed", ta.seed, "Override train.seed");
  trn->add_option("--iterations", ta.iterations, "Override train.max_iterations");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Score forecasts");
  ev->add_option("--data", ea.data, "Evaluation RSEQ")->required();
  ev->add_option("--ckpt", ea.ckpt, "Checkpoint");
  ev->add_option("--out", ea.out, "Report JSON")->required();
  ev->add_option("--csv", ea.csv, "Per-sequence CSV");
  ev->add_option("--baseline", ea.baseline, "persistence | identity instead of a model");
  ev->add_option("--t-in", ea.t_in, "Input frames for baselines");
  ev->add_option("--t-total", ea.t_total, "Total frames for baselines");
  ev->add_option("--batch", ea.batch, "Sequences per forward pass")->check(CLI::PositiveNumber);

  PredictArgs pa;
  auto* pred = app.add_subcommand("predict", "Forecast from input frames");
  pred->add_option("--ckpt", pa.ckpt, "Checkpoint")->required();
  pred->add_option("--input", pa.input, "Input RSEQ")->required();
  pred->add_option("--out", pa.out, "Forecast RSEQ")->required();
  pred->add_option("--batch", pa.batch, "Sequences per forward pass")->check(CLI::PositiveNumber);

  PlotArgs pl;
  auto* plot = app.add_subcommand("plot", "Render frames to PNG");
  plot->add_option("--pred", pl.pred, "Forecast RSEQ")->required();
  plot->add_option("--truth", pl.truth, "Observed RSEQ, drawn to the left");
  plot->add_option("--out", pl.out, "Output directory")->required();
  plot->add_option("--scale", pl.scale, "Pixel scale factor");
  plot->add_option("--limit", pl.limit, "Sequences to plot");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*synth) return cmd_synth(sa, args);
    if (*trn) return cmd_train(ta, args);
    if (*ev) return cmd_eval(ea, args);
    if (*pred) return cmd_predict(pa, args);
    if (*plot) return cmd_plot(pl, args);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const rapnet::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
