#pragma once

// Independent reference implementations and gradient checking, shared by the
// unit tests, the acceptance runner and `softennet selftest`. Oracles are
// written as plain scalar loops so they share no code path with the tensor
// implementations they verify.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "softennet/camera.hpp"
#include "softennet/geometry.hpp"

namespace softennet::checks {

// ---------------------------------------------------------------------------
// Finite differences

struct GradCheck {
  double rel_error = 0.0;      // ||fd - analytic|| / max(||fd||, ||analytic||)
  double max_abs_error = 0.0;
  int64_t entries = 0;         // perturbed scalar entries
};

using ScalarFn = std::function<torch::Tensor(const std::vector<torch::Tensor>&)>;
using SkipFn = std::function<bool(std::size_t input, int64_t flat_index)>;

/// Compares autograd gradients of `f` (returning a scalar) with central
/// differences. Inputs are double tensors; they are cloned, so callers keep
/// theirs. With max_entries > 0 a seeded random subset of entries is probed.
GradCheck check_gradients(const ScalarFn& f, const std::vector<torch::Tensor>& inputs, double step = 1e-6,
                          int64_t max_entries = 0, uint64_t seed = 0, const SkipFn& skip = {});

// ---------------------------------------------------------------------------
// Oracles

/// SSIM per pixel and channel by explicit 3x3 windows with reflected borders.
torch::Tensor ssim_oracle(const torch::Tensor& a, const torch::Tensor& b);

/// Pixel-adaptive convolution by direct summation (zero padding).
torch::Tensor pac_oracle(const torch::Tensor& x, const torch::Tensor& guidance, const torch::Tensor& weight,
                         const torch::Tensor& bias, double alpha);

struct WarpOracle {
  torch::Tensor values;  // [B, C, H, W]
  torch::Tensor mask;    // [B, 1, H, W]
};

/// Per-pixel scalar view synthesis: unproject, move, project, bilinear lookup.
WarpOracle warp_oracle(const torch::Tensor& source, const torch::Tensor& target_depth,
                       const std::vector<geometry::RigidTransform>& target_to_source,
                       const camera::CameraModel& cam);

/// Nearest-rank percentile by sorting.
double percentile_oracle(std::vector<double> values, double percentile);

/// min(cost, theta) with theta from percentile_oracle over the masked costs.
torch::Tensor clip_oracle(const torch::Tensor& cost, const torch::Tensor& mask, double percentile);

/// Per-class IoU from a confusion matrix; NaN for classes absent from both.
std::vector<double> iou_oracle(const torch::Tensor& pred, const torch::Tensor& gt, int num_classes);

/// Double-sphere unprojection by Newton iteration on the projection itself.
/// Returns NaNs when the iteration does not converge.
camera::Point3 unproject_by_root_finding(const camera::CameraModel& cam, const camera::Pixel& pixel, double depth);

/// Sum over frames of the pixel-mean cross-entropy, by explicit loops.
double lumen_loss_oracle(const torch::Tensor& target_posteriors, const torch::Tensor& source_posteriors,
                         const torch::Tensor& target_labels, const torch::Tensor& source_labels);

/// mean over V of (1 - DC) * cost, by explicit loops.
double occlusion_reweight_oracle(const torch::Tensor& cost, const torch::Tensor& dc, const torch::Tensor& validity);

/// argmin over a fine grid of L / (2 g^2) + log(1 + g).
double gamma_grid_oracle(double loss, double lo = 1e-3, double hi = 10.0, int points = 2000001);

// ---------------------------------------------------------------------------
// Suites

struct CheckResult {
  std::string name;
  bool pass = false;
  double value = 0.0;      // measured error or statistic
  double tolerance = 0.0;  // pass bound on `value`
  std::string detail;
};

/// Finite-difference checks of every differentiable operator (double precision).
std::vector<CheckResult> gradient_suite(uint64_t seed = 0);

/// Gradient of the full training loss on a small model against finite
/// differences on a random subset of parameters.
CheckResult end_to_end_probe(uint64_t seed = 0, int64_t probes = 64);

/// Camera round trips, degenerate double sphere and identity warps.
std::vector<CheckResult> geometry_suite(uint64_t seed = 0);

/// PAC with constant guidance and small alpha against plain convolution.
std::vector<CheckResult> pac_suite(uint64_t seed = 0);

}  // namespace softennet::checks
