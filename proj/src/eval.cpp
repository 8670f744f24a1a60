#include "softennet/eval.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>
#include <json.hpp>

namespace softennet::eval {
namespace fs = std::filesystem;
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

torch::Tensor crop(const torch::Tensor& t, int border) {
  if (border <= 0) return t;
  const int64_t h = t.size(-2), w = t.size(-1);
  if (2 * border >= h || 2 * border >= w) throw std::invalid_argument("border crop removes the whole image");
  return t.slice(-2, border, h - border).slice(-1, border, w - border);
}

// Display width of a UTF-8 string, one column per code point.
std::size_t display_width(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80;
  return n;
}

std::string pad_left(const std::string& s, std::size_t width) {
  const std::size_t w = display_width(s);
  return w >= width ? s : std::string(width - w, ' ') + s;
}

}  // namespace

double median(const torch::Tensor& values) {
  auto sorted = std::get<0>(values.reshape({-1}).to(torch::kFloat64).sort());
  const int64_t n = sorted.numel();
  if (n == 0) throw std::invalid_argument("median of an empty set");
  const double* p = sorted.data_ptr<double>();
  return n % 2 == 1 ? p[n / 2] : 0.5 * (p[n / 2 - 1] + p[n / 2]);
}

DepthMetrics depth_metrics(const torch::Tensor& pred, const torch::Tensor& gt, const DepthEvalOptions& options) {
  if (pred.sizes() != gt.sizes()) throw std::invalid_argument("depth_metrics: prediction and ground truth differ in shape");
  auto p_all = crop(pred.detach().to(torch::kFloat64), options.border_crop).contiguous();
  auto g_all = crop(gt.detach().to(torch::kFloat64), options.border_crop).contiguous();
  auto valid = (g_all > 0).logical_and(g_all <= options.max_depth).logical_and(torch::isfinite(g_all));
  auto g = g_all.masked_select(valid);
  auto p = p_all.masked_select(valid);
  if (g.numel() == 0) throw std::invalid_argument("depth_metrics: no valid ground-truth pixels");
  if (!torch::isfinite(p).all().item<bool>() || (p <= 0).any().item<bool>()) {
    throw std::invalid_argument("depth_metrics: predicted depth must be finite and positive on valid pixels");
  }
  if (options.median_align) p = p * (eval::median(g) / eval::median(p));

  DepthMetrics m;
  auto diff = p - g;
  m.abs_rel = (diff.abs() / g).mean().item<double>();
  m.sq_rel = (diff * diff / g).mean().item<double>();
  m.rmse = std::sqrt((diff * diff).mean().item<double>());
  auto log_diff = torch::log(p) - torch::log(g);
  m.rmse_log = std::sqrt((log_diff * log_diff).mean().item<double>());
  auto ratio = torch::maximum(p / g, g / p);
  m.delta1 = (ratio < 1.25).to(torch::kFloat64).mean().item<double>();
  m.delta2 = (ratio < 1.25 * 1.25).to(torch::kFloat64).mean().item<double>();
  m.delta3 = (ratio < 1.25 * 1.25 * 1.25).to(torch::kFloat64).mean().item<double>();
  return m;
}

SegMetrics segmentation_metrics(const torch::Tensor& pred_labels, const torch::Tensor& gt_labels, int num_classes,
                                int lumen_class) {
  if (pred_labels.sizes() != gt_labels.sizes()) throw std::invalid_argument("segmentation_metrics: shape mismatch");
  if (num_classes < 1 || lumen_class < 0 || lumen_class >= num_classes) {
    throw std::invalid_argument("segmentation_metrics: invalid class configuration");
  }
  auto pred = pred_labels.to(torch::kLong);
  auto gt = gt_labels.to(torch::kLong);
  SegMetrics m;
  double sum = 0.0;
  int defined = 0;
  for (int c = 0; c < num_classes; ++c) {
    auto in_pred = pred == c;
    auto in_gt = gt == c;
    const auto inter = in_pred.logical_and(in_gt).sum().item<int64_t>();
    const auto uni = in_pred.logical_or(in_gt).sum().item<int64_t>();
    const double iou = uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : kNaN;
    m.per_class_iou.push_back(iou);
    if (uni > 0) {
      sum += iou;
      ++defined;
    }
  }
  m.lumen_iou = m.per_class_iou[lumen_class];
  m.mean_iou = defined > 0 ? sum / defined : kNaN;
  return m;
}

std::array<double, 9> Report::row() const {
  return {depth.abs_rel, depth.sq_rel, depth.rmse, depth.rmse_log, depth.delta1,
          depth.delta2,  depth.delta3, lumen_iou,  mean_iou};
}

std::string Report::table() const {
  const auto values = row();
  std::string header, line;
  for (std::size_t i = 0; i < kReportColumns.size(); ++i) {
    const std::string name = kReportColumns[i];
    const std::string value = fmt::format("{:.4f}", values[i]);
    const std::size_t width = std::max(display_width(name), display_width(value)) + 2;
    header += pad_left(name, width);
    line += pad_left(value, width);
  }
  return header + "\n" + line + "\n";
}

std::string Report::json() const {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr); };
  nlohmann::ordered_json j;
  j["frames"] = frames;
  nlohmann::ordered_json metrics = nlohmann::ordered_json::object();
  const auto values = row();
  for (std::size_t i = 0; i < kReportColumns.size(); ++i) metrics[kReportColumns[i]] = num(values[i]);
  j["metrics"] = metrics;
  nlohmann::ordered_json frames_json = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < per_frame_depth.size(); ++i) {
    const auto& d = per_frame_depth[i];
    nlohmann::ordered_json f{{"abs_rel", num(d.abs_rel)}, {"sq_rel", num(d.sq_rel)}, {"rmse", num(d.rmse)},
                             {"rmse_log", num(d.rmse_log)}, {"delta1", num(d.delta1)}, {"delta2", num(d.delta2)},
                             {"delta3", num(d.delta3)}};
    if (i < per_frame_seg.size()) {
      f["lumen_iou"] = num(per_frame_seg[i].lumen_iou);
      f["mean_iou"] = num(per_frame_seg[i].mean_iou);
    }
    frames_json.push_back(f);
  }
  j["per_frame"] = frames_json;
  return j.dump(2);
}

ReportBuilder::ReportBuilder(int num_classes, DepthEvalOptions options)
    : num_classes_(num_classes), options_(options) {}

void ReportBuilder::add(const torch::Tensor& pred_depth, const torch::Tensor& gt_depth,
                        const torch::Tensor& pred_labels, const torch::Tensor& gt_labels) {
  if (pred_depth.defined() && gt_depth.defined()) {
    report_.per_frame_depth.push_back(depth_metrics(pred_depth, gt_depth, options_));
  }
  if (pred_labels.defined() && gt_labels.defined()) {
    report_.per_frame_seg.push_back(segmentation_metrics(pred_labels, gt_labels, num_classes_));
  }
  ++report_.frames;
}

Report ReportBuilder::finish() const {
  Report r = report_;
  const auto& fd = r.per_frame_depth;
  if (fd.empty()) {
    r.depth = {kNaN, kNaN, kNaN, kNaN, kNaN, kNaN, kNaN};
  } else {
    DepthMetrics sum;
    for (const auto& d : fd) {
      sum.abs_rel += d.abs_rel;
      sum.sq_rel += d.sq_rel;
      sum.rmse += d.rmse;
      sum.rmse_log += d.rmse_log;
      sum.delta1 += d.delta1;
      sum.delta2 += d.delta2;
      sum.delta3 += d.delta3;
    }
    const double n = static_cast<double>(fd.size());
    r.depth = {sum.abs_rel / n, sum.sq_rel / n, sum.rmse / n,  sum.rmse_log / n,
               sum.delta1 / n,  sum.delta2 / n, sum.delta3 / n};
  }
  auto average = [](const std::vector<double>& v) {
    double s = 0.0;
    int n = 0;
    for (double x : v) {
      if (std::isfinite(x)) {
        s += x;
        ++n;
      }
    }
    return n > 0 ? s / n : kNaN;
  };
  std::vector<double> lumen, mean;
  for (const auto& s : r.per_frame_seg) {
    lumen.push_back(s.lumen_iou);
    mean.push_back(s.mean_iou);
  }
  r.lumen_iou = average(lumen);
  r.mean_iou = average(mean);
  return r;
}

Prediction predict(train::TrainState& state, const torch::Tensor& images, double alpha) {
  torch::NoGradGuard no_grad;
  state.model->eval();
  auto out = state.model->forward(images.to(state.dtype()), alpha);
  return {out.depth[0], out.lumen_posteriors.argmax(1), out.lumen_posteriors};
}

Report evaluate_model(train::TrainState& state, const data::Sequence& sequence, const EvalOptions& options) {
  if (options.batch_size < 1) throw std::invalid_argument("evaluation batch size must be positive");
  ReportBuilder builder(state.config.model.num_classes, options.depth);
  const double alpha = state.inference_alpha();
  const auto& frames = sequence.frames;
  for (std::size_t first = 0; first < frames.size(); first += options.batch_size) {
    const std::size_t last = std::min(frames.size(), first + options.batch_size);
    std::vector<torch::Tensor> images;
    for (std::size_t i = first; i < last; ++i) images.push_back(frames[i].rgb);
    auto pred = predict(state, torch::stack(images), alpha);
    for (std::size_t i = first; i < last; ++i) {
      const auto& f = frames[i];
      const int64_t k = static_cast<int64_t>(i - first);
      builder.add(pred.depth[k], f.depth ? *f.depth : torch::Tensor(), pred.labels[k],
                  f.lumen ? *f.lumen : torch::Tensor());
    }
  }
  return builder.finish();
}

Report evaluate_run(const fs::path& checkpoint, const data::Sequence& sequence, const EvalOptions& options) {
  auto state = train::load_checkpoint(checkpoint);
  if (state.camera && !(*state.camera == sequence.camera)) {
    throw std::invalid_argument(fmt::format("camera mismatch: checkpoint '{}' was trained with\n{}dataset has\n{}",
                                            checkpoint.string(), state.camera->to_text(),
                                            sequence.camera.to_text()));
  }
  return evaluate_model(state, sequence, options);
}

void write_report(const fs::path& dir, const Report& report) {
  fs::create_directories(dir);
  std::ofstream(dir / "report.json", std::ios::binary) << report.json() << '\n';
  std::ofstream(dir / "report.txt", std::ios::binary) << report.table();
}

}  // namespace softennet::eval
