// softennet command-line tool: dataset generation, training, evaluation,
// inference, plots and the built-in self-test.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>
#include <torch/torch.h>

#include "plotting.hpp"
#include "softennet/checks.hpp"
#include "softennet/data.hpp"
#include "softennet/eval.hpp"
#include "softennet/log.hpp"
#include "softennet/train.hpp"

namespace fs = std::filesystem;
using namespace softennet;

namespace {

// Exit codes, one per failure class.
enum Exit : int {
  kOk = 0,
  kUnexpected = 1,
  kUsage = 2,
  kInputOutput = 3,
  kInvalidConfig = 4,
  kNonFinite = 5,
  kSelftestFailed = 6,
  kOutputExists = 7,
};

struct OutputExists : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path output_root() {
  const char* root = std::getenv("SOFTENNET_OUT_ROOT");
  return root && *root ? fs::path(root) : fs::path("runs");
}

fs::path resolve_out(const std::string& flag, const std::string& fallback) {
  return flag.empty() ? output_root() / fallback : fs::path(flag);
}

bool non_empty_dir(const fs::path& p) { return fs::exists(p) && !fs::is_empty(p); }

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string config, out;
  uint64_t seed = 0;
  int frames = 0;
  bool force = false;
};

int gen_data(const GenDataArgs& a) {
  data::TubeConfig config;
  if (!a.config.empty()) {
    config = data::TubeConfig::load(a.config);
  } else {
    config.frames = 5000;
  }
  if (a.frames > 0) config.frames = a.frames;
  config.validate();

  const fs::path out = resolve_out(a.out, "data");
  if (non_empty_dir(out)) {
    if (!a.force) throw OutputExists(fmt::format("'{}' is not empty; pass --force to overwrite", out.string()));
    for (const char* entry : {"frames", "depth", "lumen", "camera.txt", "poses.txt", "tube.cfg"}) {
      fs::remove_all(out / entry);
    }
  }

  data::TubeRenderer renderer(config, a.seed);
  data::prepare_dataset_dir(out, renderer.camera());
  std::ofstream(out / "tube.cfg", std::ios::binary) << "# seed = " << a.seed << "\n" << config.to_text();
  std::vector<geometry::RigidTransform> poses;
  for (int i = 0; i < config.frames; ++i) {
    auto frame = renderer.render(i);
    data::save_frame(out, frame, config.max_depth);
    poses.push_back(*frame.pose);
    if ((i + 1) % 500 == 0) log::info(fmt::format("{} / {} frames", i + 1, config.frames));
  }
  data::write_poses(out, poses);

  const auto& k = renderer.camera().intrinsics();
  std::cout << fmt::format("wrote {} frames to {}\n", config.frames, out.string());
  std::cout << fmt::format("camera: {} {}x{} fx={} fy={} cx={} cy={}", camera::to_string(renderer.camera().kind()),
                           k.width, k.height, k.fx, k.fy, k.cx, k.cy);
  if (const auto& ds = renderer.camera().ds()) std::cout << fmt::format(" xi={} alpha={}", ds->xi, ds->alpha);
  std::cout << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data, config, preset = "desk", out, weighting, fixed_weights;
  std::optional<uint64_t> seed;
  int epochs = 0;
  int stop_after = 0;
  bool no_resume = false;
};

int train_command(const TrainArgs& a) {
  auto config = a.config.empty() ? train::TrainConfig::preset(a.preset) : train::TrainConfig::load(a.config);
  if (a.seed) config.seed = *a.seed;
  if (a.epochs > 0) config.epochs = a.epochs;
  if (!a.weighting.empty()) {
    if (a.weighting == "learned") {
      config.weighting = train::WeightingMode::learned;
    } else if (a.weighting == "fixed") {
      config.weighting = train::WeightingMode::fixed;
    } else {
      throw std::invalid_argument(fmt::format("unknown weighting '{}' (learned or fixed)", a.weighting));
    }
  }
  if (!a.fixed_weights.empty()) {
    const auto comma = a.fixed_weights.find(',');
    if (comma == std::string::npos) throw std::invalid_argument("--fixed-weights expects 'depth,lumen'");
    config.fixed_depth_weight = std::stod(a.fixed_weights.substr(0, comma));
    config.fixed_lumen_weight = std::stod(a.fixed_weights.substr(comma + 1));
  }
  config.validate();

  const auto sequence = data::load_sequence(a.data, config.model.max_depth);
  const fs::path out = resolve_out(a.out, "train");
  log::info(fmt::format("training on {} frames from {} into {}", sequence.frames.size(), a.data, out.string()));
  auto state = train::fit(sequence, config, out, {!a.no_resume, a.stop_after});
  std::cout << fmt::format("finished epoch {} at step {}; checkpoint {}\n", state.epoch, state.step,
                           (out / "last.pt").string());
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, data, out;
  bool no_median_align = false;
  double max_depth = 20.0;
  int border_crop = 0;
  int batch_size = 8;
};

int eval_command(const EvalArgs& a) {
  eval::EvalOptions options;
  options.depth.median_align = !a.no_median_align;
  options.depth.max_depth = a.max_depth;
  options.depth.border_crop = a.border_crop;
  options.batch_size = a.batch_size;
  const auto sequence = data::load_sequence(a.data, a.max_depth);
  const auto report = eval::evaluate_run(a.checkpoint, sequence, options);
  std::cout << report.table();
  if (!a.out.empty()) {
    eval::write_report(a.out, report);
    log::info(fmt::format("report written to {}", a.out));
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct InferArgs {
  std::string checkpoint, image, out;
};

int infer_command(const InferArgs& a) {
  auto state = train::load_checkpoint(a.checkpoint);
  auto rgb = data::read_rgb_png(a.image);
  if (state.camera && (rgb.size(1) != state.camera->height() || rgb.size(2) != state.camera->width())) {
    log::warn(fmt::format("image is {}x{} but the model was trained on {}x{}", rgb.size(2), rgb.size(1),
                          state.camera->width(), state.camera->height()));
  }
  const auto pred = eval::predict(state, rgb.unsqueeze(0), state.inference_alpha());
  const fs::path out = resolve_out(a.out, "infer");
  fs::create_directories(out);
  const double max_depth = state.config.model.max_depth;
  auto depth = pred.depth[0].to(torch::kFloat32);
  data::write_depth_png(out / "depth.png", depth, max_depth);
  data::write_label_png(out / "lumen.png", pred.labels[0]);
  plot::write_image(out / "overlay.png", plot::overlay(rgb, depth, pred.labels[0], max_depth));
  std::cout << fmt::format("depth range [{:.4f}, {:.4f}], lumen fraction {:.4f}; outputs in {}\n",
                           depth.min().item<float>(), depth.max().item<float>(),
                           pred.labels.to(torch::kFloat32).mean().item<float>(), out.string());
  return kOk;
}

// ---------------------------------------------------------------------------

struct PlotArgs {
  std::string run, out, data;
  int overlays = 4;
};

int plot_command(const PlotArgs& a) {
  const fs::path run = a.run;
  const fs::path out = a.out.empty() ? run / "plots" : fs::path(a.out);
  std::ifstream log_file(run / "log.jsonl");
  if (!log_file) throw std::runtime_error(fmt::format("no log.jsonl in '{}'", run.string()));

  plot::Series total{"L"}, depth{"L_d"}, lumen{"L_l"}, g1{"gamma1"}, g2{"gamma2"}, lr{"lr x 1e4"};
  std::vector<plot::Series> terms{{"L_v"}, {"L_v'"}, {"L_c"}, {"L_e"}};
  std::map<int, std::pair<double, int>> per_epoch;
  int lines = 0;
  for (std::string line; std::getline(log_file, line);) {
    if (line.empty()) continue;
    const auto r = nlohmann::json::parse(line);
    const double step = r.at("step").get<double>();
    total.x.push_back(step), total.y.push_back(r.at("L").get<double>());
    depth.x.push_back(step), depth.y.push_back(r.at("L_d").get<double>());
    lumen.x.push_back(step), lumen.y.push_back(r.at("L_l").get<double>());
    g1.x.push_back(step), g1.y.push_back(r.at("gamma1").get<double>());
    g2.x.push_back(step), g2.y.push_back(r.at("gamma2").get<double>());
    lr.x.push_back(step), lr.y.push_back(1e4 * r.at("lr").get<double>());
    const char* keys[] = {"L_v", "L_v_prime", "L_c", "L_e"};
    for (int k = 0; k < 4; ++k) {
      terms[k].x.push_back(step);
      terms[k].y.push_back(r.at(keys[k]).at(0).get<double>());
    }
    auto& e = per_epoch[r.at("epoch").get<int>()];
    e.first += r.at("L").get<double>();
    e.second += 1;
    ++lines;
  }
  plot::Series epoch_mean{"mean L"};
  for (const auto& [epoch, acc] : per_epoch) {
    epoch_mean.x.push_back(epoch + 1);
    epoch_mean.y.push_back(acc.first / acc.second);
  }
  plot::write_image(out / "losses.png", plot::line_chart("training losses", "step", {total, depth, lumen}));
  plot::write_image(out / "depth_terms.png", plot::line_chart("depth terms, full scale", "step", terms, true));
  plot::write_image(out / "weights.png", plot::line_chart("task uncertainty and learning rate", "step", {g1, g2, lr}));
  plot::write_image(out / "epoch_loss.png", plot::line_chart("mean loss per epoch", "epoch", {epoch_mean}));
  std::cout << fmt::format("{} log records plotted\n", lines);

  if (!a.data.empty()) {
    const auto sequence = data::load_sequence(a.data);
    std::vector<std::pair<int, fs::path>> checkpoints;
    if (fs::exists(run / "checkpoints")) {
      for (const auto& entry : fs::directory_iterator(run / "checkpoints")) {
        const auto stem = entry.path().stem().string();
        if (entry.path().extension() == ".pt" && stem.rfind("epoch_", 0) == 0) {
          checkpoints.emplace_back(std::stoi(stem.substr(6)), entry.path());
        }
      }
    }
    std::sort(checkpoints.begin(), checkpoints.end());
    plot::Series abs_rel{"Abs Rel"}, lumen_iou{"Lumen IoU"}, mean_iou{"Mean IoU"};
    std::vector<std::string> header{"epoch"};
    for (const char* c : eval::kReportColumns) header.push_back(c);
    std::vector<std::vector<std::string>> rows;
    for (const auto& [epoch, path] : checkpoints) {
      const auto report = eval::evaluate_run(path, sequence);
      abs_rel.x.push_back(epoch), abs_rel.y.push_back(report.depth.abs_rel);
      lumen_iou.x.push_back(epoch), lumen_iou.y.push_back(report.lumen_iou);
      mean_iou.x.push_back(epoch), mean_iou.y.push_back(report.mean_iou);
      std::vector<std::string> row{std::to_string(epoch)};
      for (double v : report.row()) row.push_back(fmt::format("{:.4f}", v));
      rows.push_back(row);
    }
    plot::write_image(out / "metrics.png", plot::line_chart("metrics per epoch", "epoch", {abs_rel, lumen_iou, mean_iou}));
    // OpenCV's Hershey fonts have no Greek glyphs.
    for (auto& h : header) {
      for (auto [from, to] : {std::pair<std::string, std::string>{"δ", "d"}, {"²", "^2"}, {"³", "^3"}}) {
        for (auto pos = h.find(from); pos != std::string::npos; pos = h.find(from)) h.replace(pos, from.size(), to);
      }
    }
    plot::write_image(out / "metrics_table.png", plot::table_image(header, rows));

    if (fs::exists(run / "last.pt")) {
      auto state = train::load_checkpoint(run / "last.pt");
      const int n = std::min<int>(a.overlays, static_cast<int>(sequence.frames.size()));
      for (int i = 0; i < n; ++i) {
        const auto& f = sequence.frames[static_cast<std::size_t>(i) * sequence.frames.size() / n];
        const auto pred = eval::predict(state, f.rgb.unsqueeze(0), state.inference_alpha());
        const double max_depth = state.config.model.max_depth;
        auto predicted = plot::overlay(f.rgb, pred.depth[0], pred.labels[0], max_depth);
        if (f.depth && f.lumen) {
          cv::Mat both;
          cv::vconcat(predicted, plot::overlay(f.rgb, *f.depth, *f.lumen, max_depth), both);
          predicted = both;
        }
        plot::write_image(out / fmt::format("overlay_{:06d}.png", f.index), predicted);
      }
    }
    std::cout << fmt::format("{} checkpoints evaluated\n", checkpoints.size());
  }
  std::cout << fmt::format("plots written to {}\n", out.string());
  return kOk;
}

// ---------------------------------------------------------------------------

int selftest(uint64_t seed, bool skip_probe) {
  std::vector<checks::CheckResult> results;
  auto append = [&](std::vector<checks::CheckResult> r) { results.insert(results.end(), r.begin(), r.end()); };
  append(checks::geometry_suite(seed));
  append(checks::pac_suite(seed));
  append(checks::gradient_suite(seed));
  if (!skip_probe) results.push_back(checks::end_to_end_probe(seed));
  bool ok = true;
  for (const auto& r : results) {
    std::cout << fmt::format("{} {:<50} {:.3e} (limit {:.0e}){}\n", r.pass ? "PASS" : "FAIL", r.name, r.value,
                             r.tolerance, r.detail.empty() ? "" : "  " + r.detail);
    ok = ok && r.pass;
  }
  std::cout << (ok ? "selftest passed\n" : "selftest FAILED\n");
  return ok ? kOk : kSelftestFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SoftEnNet: self-supervised depth and lumen segmentation for endoscopy"};
  app.require_subcommand(1);
  std::string log_level = "info";
  int threads = 1;
  app.add_option("--log-level", log_level, "debug, info, warn, error or off")->capture_default_str();
  app.add_option("--threads", threads, "CPU threads for tensor operations; 1 keeps runs bit-reproducible")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "render a procedural colon sequence with ground truth");
  gen_cmd->add_option("--config", gen.config, "tube config file (key = value); defaults give 5000 frames");
  gen_cmd->add_option("--seed", gen.seed, "generator seed")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "dataset directory (default $SOFTENNET_OUT_ROOT/data)");
  gen_cmd->add_option("--frames", gen.frames, "override the frame count")->check(CLI::PositiveNumber);
  gen_cmd->add_flag("--force", gen.force, "overwrite an existing dataset directory");

  TrainArgs tr;
  uint64_t train_seed = 0;
  auto* train_cmd = app.add_subcommand("train", "train on a dataset directory");
  train_cmd->add_option("--data", tr.data, "dataset directory")->required();
  train_cmd->add_option("--config", tr.config, "train config file; overrides --preset");
  train_cmd->add_option("--preset", tr.preset, "full, desk or overfit")->capture_default_str();
  auto* seed_opt = train_cmd->add_option("--seed", train_seed, "override the config seed");
  train_cmd->add_option("--out", tr.out, "run directory (default $SOFTENNET_OUT_ROOT/train)");
  train_cmd->add_option("--epochs", tr.epochs, "override the epoch count")->check(CLI::PositiveNumber);
  train_cmd->add_option("--weighting", tr.weighting, "learned or fixed");
  train_cmd->add_option("--fixed-weights", tr.fixed_weights, "fixed task weights 'depth,lumen'");
  train_cmd->add_option("--stop-after", tr.stop_after, "stop after this many epochs in this invocation");
  train_cmd->add_flag("--no-resume", tr.no_resume, "start over even if the run directory has a checkpoint");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint against a dataset's ground truth");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--data", ev.data, "dataset directory")->required();
  eval_cmd->add_option("--out", ev.out, "write report.json and report.txt here");
  eval_cmd->add_flag("--no-median-align", ev.no_median_align, "compare raw depths");
  eval_cmd->add_option("--max-depth", ev.max_depth, "upper bound of valid ground truth")->capture_default_str();
  eval_cmd->add_option("--border-crop", ev.border_crop, "ignore this many pixels along each border")
      ->capture_default_str();
  eval_cmd->add_option("--batch-size", ev.batch_size, "frames per forward pass")->capture_default_str();

  InferArgs inf;
  auto* infer_cmd = app.add_subcommand("infer", "predict depth and lumen for one image");
  infer_cmd->add_option("--checkpoint", inf.checkpoint, "checkpoint file")->required();
  infer_cmd->add_option("--image", inf.image, "RGB PNG, sides divisible by 32")->required();
  infer_cmd->add_option("--out", inf.out, "output directory (default $SOFTENNET_OUT_ROOT/infer)");

  PlotArgs pl;
  auto* plot_cmd = app.add_subcommand("plot", "loss curves, metric tables and overlays for a run");
  plot_cmd->add_option("--run", pl.run, "run directory")->required();
  plot_cmd->add_option("--out", pl.out, "image directory (default RUN/plots)");
  plot_cmd->add_option("--data", pl.data, "dataset for per-epoch metrics and overlays");
  plot_cmd->add_option("--overlays", pl.overlays, "number of overlay frames")->capture_default_str();

  uint64_t selftest_seed = 0;
  bool skip_probe = false;
  auto* selftest_cmd = app.add_subcommand("selftest", "finite-difference gradient and geometry checks");
  selftest_cmd->add_option("--seed", selftest_seed, "seed of the random test inputs")->capture_default_str();
  selftest_cmd->add_flag("--skip-probe", skip_probe, "skip the end-to-end model gradient probe");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    log::set_level(log::parse_level(log_level));
    torch::set_num_threads(threads);
    if (*gen_cmd) return gen_data(gen);
    if (*train_cmd) {
      if (*seed_opt) tr.seed = train_seed;
      return train_command(tr);
    }
    if (*eval_cmd) return eval_command(ev);
    if (*infer_cmd) return infer_command(inf);
    if (*plot_cmd) return plot_command(pl);
    if (*selftest_cmd) return selftest(selftest_seed, skip_probe);
  } catch (const OutputExists& e) {
    log::error(e.what());
    return kOutputExists;
  } catch (const train::NonFiniteLoss& e) {
    log::error(e.what());
    return kNonFinite;
  } catch (const std::invalid_argument& e) {
    log::error(e.what());
    return kInvalidConfig;
  } catch (const fs::filesystem_error& e) {
    log::error(e.what());
    return kInputOutput;
  } catch (const std::runtime_error& e) {
    log::error(e.what());
    return kInputOutput;
  } catch (const std::exception& e) {
    log::error(e.what());
    return kUnexpected;
  }
  return kUsage;
}
