#include "softennet/nn.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace softennet::nn {
namespace {

namespace F = torch::nn::functional;

torch::nn::Conv2d conv(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t padding, bool bias) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding).bias(bias));
}

}  // namespace

torch::Tensor pac_conv2d(const torch::Tensor& x, const torch::Tensor& guidance, const torch::Tensor& weight,
                         const torch::Tensor& bias, double alpha) {
  if (x.dim() != 4 || guidance.dim() != 4) throw std::invalid_argument("pac_conv2d: inputs must be [B, C, H, W]");
  if (x.size(0) != guidance.size(0) || x.size(2) != guidance.size(2) || x.size(3) != guidance.size(3)) {
    throw std::invalid_argument(fmt::format("pac_conv2d: features {} and guidance {} are not aligned",
                                            fmt::join(x.sizes(), "x"), fmt::join(guidance.sizes(), "x")));
  }
  const int64_t k = weight.size(2);
  if (k % 2 == 0 || weight.size(3) != k) throw std::invalid_argument("pac_conv2d: kernel must be square and odd");
  if (weight.size(1) != x.size(1)) {
    throw std::invalid_argument(
        fmt::format("pac_conv2d: weight expects {} input channels, got {}", weight.size(1), x.size(1)));
  }
  const int64_t radius = (k - 1) / 2;
  const int64_t height = x.size(2);
  const int64_t width = x.size(3);
  const auto pad = F::PadFuncOptions({radius, radius, radius, radius});

  // One shifted copy of x per kernel tap, each scaled by its Gaussian
  // guidance affinity. Zero padding applies to both x and the guidance.
  auto scaled = guidance * alpha;
  auto padded_guidance = F::pad(scaled, pad);
  auto padded_x = F::pad(x, pad);
  std::vector<torch::Tensor> taps;
  taps.reserve(k * k);
  for (int64_t dy = 0; dy < k; ++dy) {
    for (int64_t dx = 0; dx < k; ++dx) {
      auto neighbour = padded_guidance.slice(2, dy, dy + height).slice(3, dx, dx + width);
      auto affinity = torch::exp(-0.5 * (neighbour - scaled).pow(2).sum(1, true));
      taps.push_back(padded_x.slice(2, dy, dy + height).slice(3, dx, dx + width) * affinity);
    }
  }
  // [B, C_in * k * k, H, W] in the weight's (c_in, ky, kx) order.
  auto columns = torch::stack(taps, 2).flatten(1, 2);
  auto options = F::Conv2dFuncOptions();
  if (bias.defined()) options = options.bias(bias);
  return F::conv2d(columns, weight.reshape({weight.size(0), -1, 1, 1}), options);
}

PacConv2dImpl::PacConv2dImpl(int64_t in_channels, int64_t out_channels, int64_t kernel_size_)
    : kernel_size(kernel_size_) {
  if (kernel_size % 2 == 0) throw std::invalid_argument("PAC kernel size must be odd");
  // Same fan-in uniform initialization as torch::nn::Conv2d.
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels * kernel_size * kernel_size));
  weight = register_parameter("weight",
                              torch::empty({out_channels, in_channels, kernel_size, kernel_size}).uniform_(-bound, bound));
  bias = register_parameter("bias", torch::empty({out_channels}).uniform_(-bound, bound));
}

torch::Tensor PacConv2dImpl::forward(const torch::Tensor& x, const torch::Tensor& guidance, double alpha) {
  return pac_conv2d(x, guidance, weight, bias, alpha);
}

torch::Tensor PacConv2dImpl::forward_plain(const torch::Tensor& x) {
  return F::conv2d(x, weight, F::Conv2dFuncOptions().bias(bias).padding((kernel_size - 1) / 2));
}

TfgLayerImpl::TfgLayerImpl(int64_t task_channels, int64_t guidance_channels, int64_t kernel_size)
    : guidance_channels_(guidance_channels) {
  pac_ = register_module("pac", PacConv2d(task_channels, task_channels, kernel_size));
}

torch::Tensor TfgLayerImpl::forward(const torch::Tensor& task, const torch::Tensor& guidance, double alpha,
                                    PathwayKind kind) {
  if (kind == PathwayKind::conv) return torch::relu(pac_->forward_plain(task));
  if (guidance.size(1) != guidance_channels_) {
    throw std::invalid_argument(
        fmt::format("TFG layer expects {} guidance channels, got {}", guidance_channels_, guidance.size(1)));
  }
  return torch::relu(pac_->forward(task, guidance, alpha));
}

ConvBlockImpl::ConvBlockImpl(int64_t in_channels, int64_t out_channels) {
  conv_ = register_module("conv", conv(in_channels, out_channels, 3, 1, 0, true));
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x) {
  auto padded = F::pad(x, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReflect));
  return F::elu(conv_->forward(padded));
}

torch::Tensor upsample2x(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{2.0, 2.0})
                               .mode(torch::kNearest));
}

HeadConvImpl::HeadConvImpl(int64_t in_channels, int64_t out_channels) {
  conv_ = register_module("conv", conv(in_channels, out_channels, 3, 1, 0, true));
}

torch::Tensor HeadConvImpl::forward(const torch::Tensor& x) {
  return conv_->forward(F::pad(x, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReflect)));
}

BasicBlockImpl::BasicBlockImpl(int64_t in_channels, int64_t out_channels, int64_t stride) {
  conv1_ = register_module("conv1", conv(in_channels, out_channels, 3, stride, 1, false));
  bn1_ = register_module("bn1", torch::nn::BatchNorm2d(out_channels));
  conv2_ = register_module("conv2", conv(out_channels, out_channels, 3, 1, 1, false));
  bn2_ = register_module("bn2", torch::nn::BatchNorm2d(out_channels));
  if (stride != 1 || in_channels != out_channels) {
    downsample_ = register_module("downsample", torch::nn::Sequential(conv(in_channels, out_channels, 1, stride, 0, false),
                                                                      torch::nn::BatchNorm2d(out_channels)));
  }
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
  auto out = torch::relu(bn1_->forward(conv1_->forward(x)));
  out = bn2_->forward(conv2_->forward(out));
  auto shortcut = downsample_ ? downsample_->forward(x) : x;
  return torch::relu(out + shortcut);
}

EncoderStageImpl::EncoderStageImpl(int64_t in_channels, int64_t out_channels, int64_t stride) {
  first_ = register_module("0", BasicBlock(in_channels, out_channels, stride));
  second_ = register_module("1", BasicBlock(out_channels, out_channels, 1));
}

torch::Tensor EncoderStageImpl::forward(const torch::Tensor& x) { return second_->forward(first_->forward(x)); }

ResNetEncoderImpl::ResNetEncoderImpl(int64_t base_width, int64_t in_channels) {
  const int64_t c = base_width;
  channels_ = {c, c, 2 * c, 4 * c, 8 * c};
  stem_ = register_module("conv1", conv(in_channels, c, 7, 2, 3, false));
  stem_bn_ = register_module("bn1", torch::nn::BatchNorm2d(c));
  layer1_ = register_module("layer1", EncoderStage(c, c, 1));
  layer2_ = register_module("layer2", EncoderStage(c, 2 * c, 2));
  layer3_ = register_module("layer3", EncoderStage(2 * c, 4 * c, 2));
  layer4_ = register_module("layer4", EncoderStage(4 * c, 8 * c, 2));
}

std::vector<torch::Tensor> ResNetEncoderImpl::forward(const torch::Tensor& image) {
  auto x = (image - 0.45) / 0.225;
  std::vector<torch::Tensor> features;
  features.push_back(torch::relu(stem_bn_->forward(stem_->forward(x))));
  auto pooled = F::max_pool2d(features.back(), F::MaxPool2dFuncOptions(3).stride(2).padding(1));
  features.push_back(layer1_->forward(pooled));
  features.push_back(layer2_->forward(features.back()));
  features.push_back(layer3_->forward(features.back()));
  features.push_back(layer4_->forward(features.back()));
  return features;
}

}  // namespace softennet::nn
