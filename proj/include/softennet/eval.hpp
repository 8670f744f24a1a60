#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "softennet/data.hpp"
#include "softennet/train.hpp"

namespace softennet::eval {

struct DepthMetrics {
  double abs_rel = 0.0;
  double sq_rel = 0.0;
  double rmse = 0.0;
  double rmse_log = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
};

struct DepthEvalOptions {
  bool median_align = true;
  double max_depth = 20.0;
  int border_crop = 0;  // pixels ignored along each image border
};

/// Eigen metrics over pixels with gt in (0, max_depth]. pred and gt have the
/// same shape; both are read in double precision. Throws when no pixel is valid.
DepthMetrics depth_metrics(const torch::Tensor& pred, const torch::Tensor& gt, const DepthEvalOptions& options = {});

/// Median of a 1-D tensor; the mean of the two middle values for even sizes.
double median(const torch::Tensor& values);

struct SegMetrics {
  std::vector<double> per_class_iou;  // NaN for classes absent from both pred and gt
  double lumen_iou = 0.0;             // NaN when the lumen class is absent from both
  double mean_iou = 0.0;              // mean over classes with a defined IoU
};

SegMetrics segmentation_metrics(const torch::Tensor& pred_labels, const torch::Tensor& gt_labels, int num_classes,
                                int lumen_class = 1);

inline constexpr std::array<const char*, 9> kReportColumns{
    "Abs Rel", "Sq Rel", "RMSE", "RMSE log", "δ<1.25", "δ<1.25²", "δ<1.25³", "Lumen IoU", "Mean IoU"};

/// Frame-averaged metrics. Each frame has equal weight; a frame whose lumen
/// IoU is undefined is left out of the lumen average only.
struct Report {
  DepthMetrics depth;
  double lumen_iou = 0.0;
  double mean_iou = 0.0;
  int frames = 0;
  std::vector<DepthMetrics> per_frame_depth;
  std::vector<SegMetrics> per_frame_seg;

  std::array<double, 9> row() const;
  std::string table() const;  // aligned plain text, header plus one row
  std::string json() const;
};

/// Accumulates per-frame results in a fixed order.
class ReportBuilder {
 public:
  explicit ReportBuilder(int num_classes, DepthEvalOptions options = {});
  // depths: [1, H, W] or [H, W]; labels: [H, W]. Either pair may be undefined.
  void add(const torch::Tensor& pred_depth, const torch::Tensor& gt_depth, const torch::Tensor& pred_labels,
           const torch::Tensor& gt_labels);
  Report finish() const;

 private:
  int num_classes_;
  DepthEvalOptions options_;
  Report report_;
};

struct Prediction {
  torch::Tensor depth;       // [B, 1, H, W] scale-0 depth
  torch::Tensor labels;      // [B, H, W] argmax class
  torch::Tensor posteriors;  // [B, C, H, W]
};

/// Inference path: depth and lumen heads only, model in eval mode.
Prediction predict(train::TrainState& state, const torch::Tensor& images, double alpha);

struct EvalOptions {
  DepthEvalOptions depth;
  int batch_size = 8;
};

/// Runs the checkpointed model over every frame of `sequence` and scores it
/// against the frames' ground truth.
Report evaluate_model(train::TrainState& state, const data::Sequence& sequence, const EvalOptions& options = {});

/// evaluate_model for a checkpoint file; refuses a dataset whose camera
/// differs from the one the checkpoint was trained on.
Report evaluate_run(const std::filesystem::path& checkpoint, const data::Sequence& sequence,
                    const EvalOptions& options = {});

/// Writes report.json and report.txt into `dir`.
void write_report(const std::filesystem::path& dir, const Report& report);

}  // namespace softennet::eval
