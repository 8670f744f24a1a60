#pragma once

#include <vector>

#include <torch/torch.h>

namespace softennet::losses {

/// Blend and term weights of the depth objective.
struct LossWeights {
  double eta = 0.85;     // SSIM share of the photometric cost
  double sigma1 = 1.0;   // occlusion-reweighted photometric term
  double sigma2 = 0.5;   // depth consistency
  double sigma3 = 0.001; // edge-aware smoothness
  double clip_percentile = 95.0;
  int scales = 4;

  void validate() const;
};

// SSIM window side and stabilizers for unit-range images.
inline constexpr int kSsimWindow = 3;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

// Posterior floor applied before the logarithm in the lumen loss.
inline constexpr double kPosteriorFloor = 1e-7;

/// Mean of a map over a binary mask. An empty mask yields 0 with `empty` set.
struct MaskedMean {
  torch::Tensor value;
  bool empty = false;
};

MaskedMean masked_mean(const torch::Tensor& map, const torch::Tensor& mask);

/// Per-pixel, per-channel SSIM over a 3x3 window with reflection padding.
/// a, b: [B, C, H, W] -> [B, C, H, W].
torch::Tensor ssim_map(const torch::Tensor& a, const torch::Tensor& b);

/// eta * (1 - SSIM) / 2 + (1 - eta) * |a - b|, averaged over channels.
/// Returns the un-normalized [B, 1, H, W] cost map.
torch::Tensor photometric_cost(const torch::Tensor& target, const torch::Tensor& reconstructed, double eta);

/// Mean of the cost map over V (L_v).
MaskedMean photometric_loss(const torch::Tensor& cost, const torch::Tensor& validity);

/// V = M_ego AND (|I_t - I_hat_t| < |I_t - I_s|), channel-mean differences,
/// strict inequality. Returned detached as a 0/1 map of shape [B, 1, H, W].
torch::Tensor validity_mask(const torch::Tensor& target, const torch::Tensor& reconstructed,
                            const torch::Tensor& source, const torch::Tensor& ego_mask);

/// Nearest-rank percentile of the entries of `values` where `mask` is set.
/// Returns an undefined tensor when the mask is empty.
torch::Tensor masked_percentile(const torch::Tensor& values, const torch::Tensor& mask, double percentile);

/// min(cost, theta) with theta the nearest-rank percentile of the costs over
/// `mask`; theta carries no gradient.
torch::Tensor clip_outliers(const torch::Tensor& cost, const torch::Tensor& mask, double percentile);

struct DepthConsistency {
  torch::Tensor dc;    // [B, 1, H, W], zero outside the used mask
  torch::Tensor mask;  // V minus degenerate pixels
  torch::Tensor loss;  // L_c
  bool degenerate = false;  // some pixel in V had a vanishing denominator
};

DepthConsistency depth_consistency(const torch::Tensor& projected, const torch::Tensor& sampled,
                                   const torch::Tensor& validity);

/// L_v' = mean over V of (1 - DC) * cost.
MaskedMean occlusion_reweight(const torch::Tensor& cost, const torch::Tensor& dc, const torch::Tensor& validity);

/// Edge-aware smoothness of the mean-normalized inverse depth, forward
/// differences along both axes, each axis averaged over its pixels.
torch::Tensor edge_smoothness(const torch::Tensor& image, const torch::Tensor& depth);

struct ScaleTerms {
  torch::Tensor photometric;   // L_v
  torch::Tensor reweighted;    // L_v'
  torch::Tensor consistency;   // L_c
  torch::Tensor smoothness;    // L_e
};

/// (1/S) sum_s sigma1 L_v'^s + sigma2 L_c^s + sigma3 L_e^s over the given scales.
torch::Tensor total_depth_loss(const std::vector<ScaleTerms>& scales, const LossWeights& weights);

/// labels: [B, H, W] integer classes -> one-hot [B, C, H, W] in `dtype`.
torch::Tensor one_hot(const torch::Tensor& labels, int64_t num_classes, torch::Dtype dtype = torch::kFloat32);

/// Cross-entropy of both frames against one-hot labels, each frame averaged
/// over pixels, then summed. Posteriors and labels are [B, C, H, W].
torch::Tensor lumen_loss(const torch::Tensor& target_posteriors, const torch::Tensor& source_posteriors,
                         const torch::Tensor& target_labels, const torch::Tensor& source_labels);

/// Learnable positive noise parameters. gamma = softplus(raw), raw initialized
/// so that both gammas start at 1.
class TaskUncertaintyImpl : public torch::nn::Module {
 public:
  TaskUncertaintyImpl();
  torch::Tensor gamma_depth() const;
  torch::Tensor gamma_lumen() const;

 private:
  torch::Tensor raw_depth_;
  torch::Tensor raw_lumen_;
};
TORCH_MODULE(TaskUncertainty);

/// L_d / (2 g1^2) + L_l / (2 g2^2) + log(1 + g1) + log(1 + g2).
torch::Tensor multitask_loss(const torch::Tensor& depth_loss, const torch::Tensor& lumen_loss,
                             const torch::Tensor& gamma_depth, const torch::Tensor& gamma_lumen);

torch::Tensor fixed_weight_loss(const torch::Tensor& depth_loss, const torch::Tensor& lumen_loss, double w_depth,
                                double w_lumen);

/// Everything computed by one training step, for logging and tests.
/// Per-scale scalars are averaged over both warp directions.
struct LossBundle {
  std::vector<double> photometric;   // L_v
  std::vector<double> reweighted;    // L_v'
  std::vector<double> consistency;   // L_c
  std::vector<double> smoothness;    // L_e
  double depth = 0.0;                // L_d
  double lumen = 0.0;                // L_l
  double total = 0.0;                // L
  double gamma_depth = 0.0;
  double gamma_lumen = 0.0;
  bool empty_validity = false;
  bool degenerate_consistency = false;

  // Target-from-source direction, per scale, detached.
  std::vector<torch::Tensor> validity;
  std::vector<torch::Tensor> ego_mask;
  std::vector<torch::Tensor> occlusion;  // M_o = 1 - DC
  std::vector<torch::Tensor> dc;

  bool finite() const;
};

}  // namespace softennet::losses
