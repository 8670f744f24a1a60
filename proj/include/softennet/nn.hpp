#pragma once

#include <vector>

#include <torch/torch.h>

namespace softennet::nn {

/// Pixel-adaptive convolution.
///
///   y_i = sum_{j in window(i)} K(alpha f_i, alpha f_j) W[j - i] x_j + b
///   K(a, b) = exp(-0.5 * |a - b|^2)   (summed over guidance channels)
///
/// x: [B, Cin, H, W]; guidance: [B, Cf, H, W]; weight: [Cout, Cin, k, k] with
/// k odd; zero padding of (k - 1) / 2 keeps the spatial size. A constant
/// guidance map makes K == 1 and the result equals a plain convolution.
torch::Tensor pac_conv2d(const torch::Tensor& x, const torch::Tensor& guidance, const torch::Tensor& weight,
                         const torch::Tensor& bias, double alpha);

class PacConv2dImpl : public torch::nn::Module {
 public:
  PacConv2dImpl(int64_t in_channels, int64_t out_channels, int64_t kernel_size = 3);

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& guidance, double alpha);
  // Same weights applied as an ordinary convolution.
  torch::Tensor forward_plain(const torch::Tensor& x);

  torch::Tensor weight;
  torch::Tensor bias;
  int64_t kernel_size;
};
TORCH_MODULE(PacConv2d);

enum class PathwayKind { pac, conv };

/// Task-specific feature guidance: ReLU(PAC(task features; guidance)).
/// With PathwayKind::conv the PAC is replaced by a plain convolution with the
/// same parameters and the guidance is ignored.
class TfgLayerImpl : public torch::nn::Module {
 public:
  TfgLayerImpl(int64_t task_channels, int64_t guidance_channels, int64_t kernel_size = 3);

  torch::Tensor forward(const torch::Tensor& task, const torch::Tensor& guidance, double alpha,
                        PathwayKind kind = PathwayKind::pac);

  int64_t guidance_channels() const { return guidance_channels_; }

 private:
  PacConv2d pac_{nullptr};
  int64_t guidance_channels_;
};
TORCH_MODULE(TfgLayer);

/// 3x3 reflection-padded convolution followed by ELU.
class ConvBlockImpl : public torch::nn::Module {
 public:
  ConvBlockImpl(int64_t in_channels, int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(ConvBlock);

/// Nearest-neighbour x2 upsampling.
torch::Tensor upsample2x(const torch::Tensor& x);

/// 3x3 reflection-padded convolution without activation (prediction heads).
class HeadConvImpl : public torch::nn::Module {
 public:
  HeadConvImpl(int64_t in_channels, int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_{nullptr};
};
TORCH_MODULE(HeadConv);

/// Two-convolution residual block with batch normalization.
class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
  torch::nn::Sequential downsample_{nullptr};
};
TORCH_MODULE(BasicBlock);

/// Two residual blocks; the first one changes width and stride.
class EncoderStageImpl : public torch::nn::Module {
 public:
  EncoderStageImpl(int64_t in_channels, int64_t out_channels, int64_t stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  BasicBlock first_{nullptr}, second_{nullptr};
};
TORCH_MODULE(EncoderStage);

/// 18-layer residual encoder (7x7 stem, max-pool, four stages of two basic
/// blocks). Returns the five-level pyramid at 1/2, 1/4, 1/8, 1/16 and 1/32
/// of the input resolution. `base_width` is 64 for the standard network.
class ResNetEncoderImpl : public torch::nn::Module {
 public:
  ResNetEncoderImpl(int64_t base_width, int64_t in_channels = 3);

  // Input images in [0, 1]; normalized internally.
  std::vector<torch::Tensor> forward(const torch::Tensor& image);
  const std::vector<int64_t>& channels() const { return channels_; }

 private:
  torch::nn::Conv2d stem_{nullptr};
  torch::nn::BatchNorm2d stem_bn_{nullptr};
  EncoderStage layer1_{nullptr}, layer2_{nullptr}, layer3_{nullptr}, layer4_{nullptr};
  std::vector<int64_t> channels_;
};
TORCH_MODULE(ResNetEncoder);

}  // namespace softennet::nn
