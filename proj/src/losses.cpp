#include "softennet/losses.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace softennet::losses {
namespace {

namespace F = torch::nn::functional;

// 3x3 box mean with reflection padding, as two separable running sums.
torch::Tensor window_mean(const torch::Tensor& x) {
  static_assert(kSsimWindow == 3);
  auto padded = F::pad(x, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReflect));
  const int64_t h = x.size(2);
  const int64_t w = x.size(3);
  auto rows = padded.slice(3, 0, w) + padded.slice(3, 1, w + 1) + padded.slice(3, 2, w + 2);
  return (rows.slice(2, 0, h) + rows.slice(2, 1, h + 1) + rows.slice(2, 2, h + 2)) / 9.0;
}

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    throw std::invalid_argument(
        fmt::format("{}: shape mismatch {} vs {}", what, fmt::join(a.sizes(), "x"), fmt::join(b.sizes(), "x")));
  }
}

}  // namespace

void LossWeights::validate() const {
  if (!(eta >= 0.0 && eta <= 1.0)) throw std::invalid_argument(fmt::format("eta must lie in [0, 1], got {}", eta));
  if (sigma1 < 0.0 || sigma2 < 0.0 || sigma3 < 0.0) throw std::invalid_argument("loss sigmas must be non-negative");
  if (!(clip_percentile > 0.0 && clip_percentile <= 100.0)) {
    throw std::invalid_argument(fmt::format("clip percentile must lie in (0, 100], got {}", clip_percentile));
  }
  if (scales < 1) throw std::invalid_argument("scale count must be at least 1");
}

MaskedMean masked_mean(const torch::Tensor& map, const torch::Tensor& mask) {
  auto count = mask.sum();
  if (count.item<double>() <= 0.0) return {torch::zeros({}, map.options()), true};
  return {(map * mask).sum() / count, false};
}

torch::Tensor ssim_map(const torch::Tensor& a, const torch::Tensor& b) {
  check_same_shape(a, b, "ssim_map");
  auto mu_a = window_mean(a);
  auto mu_b = window_mean(b);
  auto var_a = window_mean(a * a) - mu_a * mu_a;
  auto var_b = window_mean(b * b) - mu_b * mu_b;
  auto cov = window_mean(a * b) - mu_a * mu_b;
  auto numerator = (2.0 * mu_a * mu_b + kSsimC1) * (2.0 * cov + kSsimC2);
  auto denominator = (mu_a * mu_a + mu_b * mu_b + kSsimC1) * (var_a + var_b + kSsimC2);
  return numerator / denominator;
}

torch::Tensor photometric_cost(const torch::Tensor& target, const torch::Tensor& reconstructed, double eta) {
  check_same_shape(target, reconstructed, "photometric_cost");
  auto l1 = (target - reconstructed).abs();
  if (eta == 0.0) return l1.mean(1, true);
  auto dssim = (1.0 - ssim_map(target, reconstructed)) / 2.0;
  return (eta * dssim + (1.0 - eta) * l1).mean(1, true);
}

MaskedMean photometric_loss(const torch::Tensor& cost, const torch::Tensor& validity) {
  return masked_mean(cost, validity);
}

torch::Tensor validity_mask(const torch::Tensor& target, const torch::Tensor& reconstructed,
                            const torch::Tensor& source, const torch::Tensor& ego_mask) {
  check_same_shape(target, reconstructed, "validity_mask");
  check_same_shape(target, source, "validity_mask");
  torch::NoGradGuard no_grad;
  auto reconstruction_error = (target - reconstructed).abs().mean(1, true);
  auto static_error = (target - source).abs().mean(1, true);
  return ego_mask * (reconstruction_error < static_error).to(target.dtype());
}

torch::Tensor masked_percentile(const torch::Tensor& values, const torch::Tensor& mask, double percentile) {
  if (!(percentile > 0.0 && percentile <= 100.0)) {
    throw std::invalid_argument(fmt::format("percentile must lie in (0, 100], got {}", percentile));
  }
  torch::NoGradGuard no_grad;
  auto selected = values.detach().masked_select(mask.expand_as(values) > 0.5);
  const int64_t count = selected.numel();
  if (count == 0) return {};
  // Nearest rank: ceil(p/100 * N), computed as p*N/100 to keep p=95, N=100 exact.
  auto rank = static_cast<int64_t>(std::ceil(percentile * static_cast<double>(count) / 100.0 - 1e-9));
  rank = std::clamp<int64_t>(rank, 1, count);
  return std::get<0>(torch::kthvalue(selected, rank));
}

torch::Tensor clip_outliers(const torch::Tensor& cost, const torch::Tensor& mask, double percentile) {
  if (percentile >= 100.0) return cost;  // the maximum clips nothing
  auto threshold = masked_percentile(cost, mask, percentile);
  if (!threshold.defined()) return cost;
  return torch::minimum(cost, threshold);
}

DepthConsistency depth_consistency(const torch::Tensor& projected, const torch::Tensor& sampled,
                                   const torch::Tensor& validity) {
  check_same_shape(projected, sampled, "depth_consistency");
  constexpr double kMinDenominator = 1e-12;
  auto denom = projected + sampled;
  auto usable = (denom.detach() > kMinDenominator).to(validity.dtype());
  auto mask = validity * usable;
  const bool degenerate = (validity.sum() - mask.sum()).item<double>() > 0.0;
  auto safe_denom = torch::where(mask > 0.5, denom, torch::ones_like(denom));
  auto dc = torch::where(mask > 0.5, (projected - sampled).abs() / safe_denom, torch::zeros_like(denom));
  return {dc, mask, masked_mean(dc, mask).value, degenerate};
}

MaskedMean occlusion_reweight(const torch::Tensor& cost, const torch::Tensor& dc, const torch::Tensor& validity) {
  check_same_shape(cost, dc, "occlusion_reweight");
  return masked_mean((1.0 - dc) * cost, validity);
}

torch::Tensor edge_smoothness(const torch::Tensor& image, const torch::Tensor& depth) {
  auto inverse = 1.0 / depth;
  auto normalized = inverse / inverse.mean({2, 3}, true);
  auto grad_x = (normalized.slice(3, 1) - normalized.slice(3, 0, -1)).abs();
  auto grad_y = (normalized.slice(2, 1) - normalized.slice(2, 0, -1)).abs();
  auto image_x = (image.slice(3, 1) - image.slice(3, 0, -1)).abs().mean(1, true);
  auto image_y = (image.slice(2, 1) - image.slice(2, 0, -1)).abs().mean(1, true);
  return (grad_x * torch::exp(-image_x)).mean() + (grad_y * torch::exp(-image_y)).mean();
}

torch::Tensor total_depth_loss(const std::vector<ScaleTerms>& scales, const LossWeights& weights) {
  if (scales.empty()) throw std::invalid_argument("total_depth_loss: no scales");
  torch::Tensor sum;
  for (const auto& s : scales) {
    auto term = weights.sigma1 * s.reweighted + weights.sigma2 * s.consistency + weights.sigma3 * s.smoothness;
    sum = sum.defined() ? sum + term : term;
  }
  return sum / static_cast<double>(scales.size());
}

torch::Tensor one_hot(const torch::Tensor& labels, int64_t num_classes, torch::Dtype dtype) {
  if (labels.numel() > 0 && (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() >= num_classes)) {
    throw std::invalid_argument(fmt::format("labels outside [0, {})", num_classes));
  }
  return F::one_hot(labels.to(torch::kLong), num_classes).permute({0, 3, 1, 2}).to(dtype);
}

torch::Tensor lumen_loss(const torch::Tensor& target_posteriors, const torch::Tensor& source_posteriors,
                         const torch::Tensor& target_labels, const torch::Tensor& source_labels) {
  auto frame_loss = [](const torch::Tensor& posteriors, const torch::Tensor& labels) {
    if (posteriors.dim() != 4 || labels.dim() != 4) {
      throw std::invalid_argument("lumen_loss: posteriors and labels must be [B, C, H, W]");
    }
    if (posteriors.size(1) != labels.size(1)) {
      throw std::invalid_argument(fmt::format("lumen_loss: {} posterior classes but {} label classes",
                                              posteriors.size(1), labels.size(1)));
    }
    check_same_shape(posteriors, labels, "lumen_loss");
    return -(labels * torch::log(posteriors.clamp_min(kPosteriorFloor))).sum(1).mean();
  };
  return frame_loss(target_posteriors, target_labels) + frame_loss(source_posteriors, source_labels);
}

TaskUncertaintyImpl::TaskUncertaintyImpl() {
  // softplus(log(e - 1)) = 1
  const double raw = std::log(std::exp(1.0) - 1.0);
  raw_depth_ = register_parameter("raw_gamma_depth", torch::full({}, raw, torch::kFloat64));
  raw_lumen_ = register_parameter("raw_gamma_lumen", torch::full({}, raw, torch::kFloat64));
}

torch::Tensor TaskUncertaintyImpl::gamma_depth() const { return F::softplus(raw_depth_); }

torch::Tensor TaskUncertaintyImpl::gamma_lumen() const { return F::softplus(raw_lumen_); }

torch::Tensor multitask_loss(const torch::Tensor& depth_loss, const torch::Tensor& lumen_loss,
                             const torch::Tensor& gamma_depth, const torch::Tensor& gamma_lumen) {
  return depth_loss / (2.0 * gamma_depth * gamma_depth) + lumen_loss / (2.0 * gamma_lumen * gamma_lumen) +
         torch::log1p(gamma_depth) + torch::log1p(gamma_lumen);
}

torch::Tensor fixed_weight_loss(const torch::Tensor& depth_loss, const torch::Tensor& lumen_loss, double w_depth,
                                double w_lumen) {
  if (w_depth < 0.0 || w_lumen < 0.0) throw std::invalid_argument("task weights must be non-negative");
  return w_depth * depth_loss + w_lumen * lumen_loss;
}

bool LossBundle::finite() const {
  auto all_finite = [](const std::vector<double>& v) {
    for (double x : v) {
      if (!std::isfinite(x)) return false;
    }
    return true;
  };
  return all_finite(photometric) && all_finite(reweighted) && all_finite(consistency) && all_finite(smoothness) &&
         std::isfinite(depth) && std::isfinite(lumen) && std::isfinite(total);
}

}  // namespace softennet::losses
