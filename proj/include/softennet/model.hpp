#pragma once

#include <string>
#include <vector>

#include <torch/torch.h>

#include "softennet/nn.hpp"

namespace softennet::model {

enum class EncoderSize { small, standard };

struct SoftEnNetConfig {
  EncoderSize encoder = EncoderSize::small;
  int scales = 4;
  int num_classes = 2;
  // Decoder levels (0 = full resolution ... 3 = 1/8) that carry TFG pathways.
  std::vector<int> pathway_levels{0, 1, 2, 3};
  bool lumen_to_depth = true;
  bool depth_to_lumen = true;
  nn::PathwayKind pathway_kind = nn::PathwayKind::pac;
  int pac_kernel = 3;
  double min_depth = 0.1;
  double max_depth = 20.0;

  void validate() const;
  int64_t encoder_width() const { return encoder == EncoderSize::standard ? 64 : 16; }
  std::vector<int64_t> decoder_widths() const;

  std::string to_text() const;
  static SoftEnNetConfig from_text(const std::string& text);
};

struct ModelOutputs {
  std::vector<torch::Tensor> disparity;  // scale 0 (full) first; sigmoid range
  std::vector<torch::Tensor> depth;      // same resolutions as disparity
  torch::Tensor lumen_logits;            // [B, C, H, W]
  torch::Tensor lumen_posteriors;        // softmax of the logits
  torch::Tensor bottleneck;              // deepest depth-encoder features, reused by pose
};

/// Maps a sigmoid disparity to depth in [min_depth, max_depth]:
/// D = 1 / (d (1/min - 1/max) + 1/max). d -> 0 gives max_depth.
torch::Tensor disparity_to_depth(const torch::Tensor& disparity, double min_depth, double max_depth);

/// Guidance scale: initial * 2^floor(epoch / period), capped at 1.
double pac_alpha_schedule(int epoch, double initial = 1e-4, int period = 5);

// Output scale applied to the raw pose regression.
inline constexpr double kPoseScale = 0.01;

/// Depth, lumen and pose sub-networks joined by TFG pathways.
///
/// Both task decoders run level by level; at each pathway level the depth
/// stream receives TFG(depth features; lumen guidance) and the lumen stream
/// TFG(lumen features; depth guidance), each added to the receiving stream.
/// The pose decoder reads the depth encoder's bottleneck features of both
/// frames, so the pose sub-network shares the depth encoder's weights.
class SoftEnNetImpl : public torch::nn::Module {
 public:
  explicit SoftEnNetImpl(SoftEnNetConfig config);

  ModelOutputs forward(const torch::Tensor& image, double alpha);

  std::vector<torch::Tensor> depth_forward(const torch::Tensor& image, double alpha = 1.0);
  torch::Tensor lumen_forward(const torch::Tensor& image, double alpha = 1.0);

  // pair: [B, 6, H, W] = target (channels 0-2) concatenated with source.
  // Returns the scaled 6-DOF vector of T_{t->s}: axis-angle then translation.
  torch::Tensor pose_forward(const torch::Tensor& pair);
  torch::Tensor pose_from_features(const torch::Tensor& target_bottleneck, const torch::Tensor& source_bottleneck);

  const SoftEnNetConfig& config() const { return config_; }
  void set_pathway_kind(nn::PathwayKind kind) { config_.pathway_kind = kind; }

  nn::ResNetEncoder depth_encoder() const { return depth_encoder_; }
  nn::ResNetEncoder lumen_encoder() const { return lumen_encoder_; }
  // The pose sub-network's encoder; the same module as depth_encoder().
  nn::ResNetEncoder pose_encoder() const { return depth_encoder_; }

  // Parameters of the pose decoder's last layer, zeroed in tests.
  torch::nn::Conv2d pose_output_layer() const { return pose_out_; }

 private:
  void check_input(const torch::Tensor& image) const;
  bool has_pathway(int level) const;

  SoftEnNetConfig config_;
  nn::ResNetEncoder depth_encoder_{nullptr};
  nn::ResNetEncoder lumen_encoder_{nullptr};
  torch::nn::ModuleList depth_up0_, depth_up1_, lumen_up0_, lumen_up1_;
  torch::nn::ModuleList disparity_heads_;
  nn::HeadConv lumen_head_{nullptr};
  torch::nn::ModuleDict lumen_to_depth_, depth_to_lumen_;
  torch::nn::Conv2d pose_squeeze_{nullptr}, pose_conv1_{nullptr}, pose_conv2_{nullptr}, pose_out_{nullptr};
};
TORCH_MODULE(SoftEnNet);

std::string to_string(EncoderSize size);
std::string to_string(nn::PathwayKind kind);

}  // namespace softennet::model
