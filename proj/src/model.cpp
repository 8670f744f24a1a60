#include "softennet/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "softennet/kv.hpp"

namespace softennet::model {
namespace {

namespace F = torch::nn::functional;

std::string level_key(int level) { return fmt::format("level{}", level); }

nn::PathwayKind parse_pathway_kind(const std::string& s) {
  if (s == "pac") return nn::PathwayKind::pac;
  if (s == "conv") return nn::PathwayKind::conv;
  throw std::invalid_argument(fmt::format("unknown pathway kind '{}'", s));
}

EncoderSize parse_encoder(const std::string& s) {
  if (s == "small") return EncoderSize::small;
  if (s == "standard") return EncoderSize::standard;
  throw std::invalid_argument(fmt::format("unknown encoder size '{}'", s));
}

}  // namespace

std::string to_string(EncoderSize size) { return size == EncoderSize::small ? "small" : "standard"; }

std::string to_string(nn::PathwayKind kind) { return kind == nn::PathwayKind::pac ? "pac" : "conv"; }

void SoftEnNetConfig::validate() const {
  if (scales < 1 || scales > 4) throw std::invalid_argument(fmt::format("scales must lie in [1, 4], got {}", scales));
  if (num_classes < 2) throw std::invalid_argument("lumen head needs at least two classes");
  for (int level : pathway_levels) {
    if (level < 0 || level > 3) throw std::invalid_argument(fmt::format("pathway level {} outside [0, 3]", level));
  }
  if (pac_kernel < 1 || pac_kernel % 2 == 0) throw std::invalid_argument("PAC kernel size must be odd");
  if (!(min_depth > 0.0 && min_depth < max_depth)) {
    throw std::invalid_argument(fmt::format("need 0 < min_depth < max_depth, got {} and {}", min_depth, max_depth));
  }
}

std::vector<int64_t> SoftEnNetConfig::decoder_widths() const {
  if (encoder == EncoderSize::standard) return {16, 32, 64, 128, 256};
  return {8, 16, 32, 64, 128};
}

std::string SoftEnNetConfig::to_text() const {
  KeyValueFile kv;
  kv.set("encoder", to_string(encoder));
  kv.set("scales", scales);
  kv.set("num_classes", num_classes);
  std::vector<double> levels(pathway_levels.begin(), pathway_levels.end());
  kv.set("pathway_levels", levels);
  kv.set("lumen_to_depth", lumen_to_depth);
  kv.set("depth_to_lumen", depth_to_lumen);
  kv.set("pathway_kind", to_string(pathway_kind));
  kv.set("pac_kernel", pac_kernel);
  kv.set("min_depth", min_depth);
  kv.set("max_depth", max_depth);
  return kv.to_text();
}

SoftEnNetConfig SoftEnNetConfig::from_text(const std::string& text) {
  const auto kv = KeyValueFile::parse(text);
  SoftEnNetConfig c;
  c.encoder = parse_encoder(kv.get("encoder", to_string(c.encoder)));
  c.scales = static_cast<int>(kv.get_int("scales", c.scales));
  c.num_classes = static_cast<int>(kv.get_int("num_classes", c.num_classes));
  if (kv.contains("pathway_levels")) {
    c.pathway_levels.clear();
    for (double level : kv.get_doubles("pathway_levels")) c.pathway_levels.push_back(static_cast<int>(level));
  }
  c.lumen_to_depth = kv.get_bool("lumen_to_depth", c.lumen_to_depth);
  c.depth_to_lumen = kv.get_bool("depth_to_lumen", c.depth_to_lumen);
  c.pathway_kind = parse_pathway_kind(kv.get("pathway_kind", to_string(c.pathway_kind)));
  c.pac_kernel = static_cast<int>(kv.get_int("pac_kernel", c.pac_kernel));
  c.min_depth = kv.get_double("min_depth", c.min_depth);
  c.max_depth = kv.get_double("max_depth", c.max_depth);
  c.validate();
  return c;
}

torch::Tensor disparity_to_depth(const torch::Tensor& disparity, double min_depth, double max_depth) {
  const double min_inv = 1.0 / max_depth;
  const double max_inv = 1.0 / min_depth;
  return 1.0 / (disparity * (max_inv - min_inv) + min_inv);
}

double pac_alpha_schedule(int epoch, double initial, int period) {
  if (epoch < 0) throw std::invalid_argument("epoch must be non-negative");
  if (period < 1) throw std::invalid_argument("schedule period must be positive");
  return std::min(1.0, initial * std::ldexp(1.0, epoch / period));
}

SoftEnNetImpl::SoftEnNetImpl(SoftEnNetConfig config) : config_(std::move(config)) {
  config_.validate();
  const int64_t width = config_.encoder_width();
  depth_encoder_ = register_module("depth_encoder", nn::ResNetEncoder(width));
  lumen_encoder_ = register_module("lumen_encoder", nn::ResNetEncoder(width));
  const auto enc = depth_encoder_->channels();
  const auto dec = config_.decoder_widths();

  depth_up0_ = register_module("depth_up0", torch::nn::ModuleList());
  depth_up1_ = register_module("depth_up1", torch::nn::ModuleList());
  lumen_up0_ = register_module("lumen_up0", torch::nn::ModuleList());
  lumen_up1_ = register_module("lumen_up1", torch::nn::ModuleList());
  // Index i holds decoder level i; level 0 is full resolution.
  for (int i = 0; i <= 4; ++i) {
    const int64_t in0 = i == 4 ? enc[4] : dec[i + 1];
    const int64_t in1 = dec[i] + (i > 0 ? enc[i - 1] : 0);
    depth_up0_->push_back(nn::ConvBlock(in0, dec[i]));
    depth_up1_->push_back(nn::ConvBlock(in1, dec[i]));
    lumen_up0_->push_back(nn::ConvBlock(in0, dec[i]));
    lumen_up1_->push_back(nn::ConvBlock(in1, dec[i]));
  }
  disparity_heads_ = register_module("disparity_heads", torch::nn::ModuleList());
  for (int s = 0; s < config_.scales; ++s) disparity_heads_->push_back(nn::HeadConv(dec[s], 1));
  lumen_head_ = register_module("lumen_head", nn::HeadConv(dec[0], config_.num_classes));

  lumen_to_depth_ = register_module("lumen_to_depth", torch::nn::ModuleDict());
  depth_to_lumen_ = register_module("depth_to_lumen", torch::nn::ModuleDict());
  for (int level = 0; level <= 3; ++level) {
    if (!has_pathway(level)) continue;
    if (config_.lumen_to_depth) {
      lumen_to_depth_->update({{level_key(level), nn::TfgLayer(dec[level], dec[level], config_.pac_kernel).ptr()}});
    }
    if (config_.depth_to_lumen) {
      depth_to_lumen_->update({{level_key(level), nn::TfgLayer(dec[level], dec[level], config_.pac_kernel).ptr()}});
    }
  }

  const int64_t pose_width = 4 * width;
  pose_squeeze_ = register_module("pose_squeeze", torch::nn::Conv2d(torch::nn::Conv2dOptions(enc[4], pose_width, 1)));
  pose_conv1_ = register_module(
      "pose_conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * pose_width, pose_width, 3).padding(1)));
  pose_conv2_ =
      register_module("pose_conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(pose_width, pose_width, 3).padding(1)));
  pose_out_ = register_module("pose_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(pose_width, 6, 1)));
}

bool SoftEnNetImpl::has_pathway(int level) const {
  return std::find(config_.pathway_levels.begin(), config_.pathway_levels.end(), level) !=
         config_.pathway_levels.end();
}

void SoftEnNetImpl::check_input(const torch::Tensor& image) const {
  if (image.dim() != 4 || image.size(1) != 3) {
    throw std::invalid_argument(fmt::format("expected RGB batch [B, 3, H, W], got {}", fmt::join(image.sizes(), "x")));
  }
  if (image.size(2) % 32 != 0 || image.size(3) % 32 != 0) {
    throw std::invalid_argument(
        fmt::format("image size {}x{} is not divisible by 32", image.size(3), image.size(2)));
  }
}

ModelOutputs SoftEnNetImpl::forward(const torch::Tensor& image, double alpha) {
  check_input(image);
  const auto depth_features = depth_encoder_->forward(image);
  const auto lumen_features = lumen_encoder_->forward(image);

  ModelOutputs out;
  out.bottleneck = depth_features[4];
  out.disparity.resize(config_.scales);
  auto xd = depth_features[4];
  auto xl = lumen_features[4];
  for (int i = 4; i >= 0; --i) {
    xd = nn::upsample2x(depth_up0_[i]->as<nn::ConvBlock>()->forward(xd));
    xl = nn::upsample2x(lumen_up0_[i]->as<nn::ConvBlock>()->forward(xl));
    if (i > 0) {
      xd = torch::cat({xd, depth_features[i - 1]}, 1);
      xl = torch::cat({xl, lumen_features[i - 1]}, 1);
    }
    xd = depth_up1_[i]->as<nn::ConvBlock>()->forward(xd);
    xl = lumen_up1_[i]->as<nn::ConvBlock>()->forward(xl);

    if (i <= 3 && has_pathway(i)) {
      const auto depth_stream = xd;
      const auto lumen_stream = xl;
      const auto key = level_key(i);
      if (config_.lumen_to_depth) {
        xd = depth_stream +
             lumen_to_depth_[key]->as<nn::TfgLayer>()->forward(depth_stream, lumen_stream, alpha, config_.pathway_kind);
      }
      if (config_.depth_to_lumen) {
        xl = lumen_stream +
             depth_to_lumen_[key]->as<nn::TfgLayer>()->forward(lumen_stream, depth_stream, alpha, config_.pathway_kind);
      }
    }
    if (i < config_.scales) {
      out.disparity[i] = torch::sigmoid(disparity_heads_[i]->as<nn::HeadConv>()->forward(xd));
    }
  }
  for (const auto& d : out.disparity) out.depth.push_back(disparity_to_depth(d, config_.min_depth, config_.max_depth));
  out.lumen_logits = lumen_head_->forward(xl);
  out.lumen_posteriors = torch::softmax(out.lumen_logits, 1);
  return out;
}

std::vector<torch::Tensor> SoftEnNetImpl::depth_forward(const torch::Tensor& image, double alpha) {
  return forward(image, alpha).disparity;
}

torch::Tensor SoftEnNetImpl::lumen_forward(const torch::Tensor& image, double alpha) {
  return forward(image, alpha).lumen_posteriors;
}

torch::Tensor SoftEnNetImpl::pose_from_features(const torch::Tensor& target_bottleneck,
                                                const torch::Tensor& source_bottleneck) {
  auto squeezed = torch::cat({torch::relu(pose_squeeze_->forward(target_bottleneck)),
                              torch::relu(pose_squeeze_->forward(source_bottleneck))},
                             1);
  auto x = torch::relu(pose_conv1_->forward(squeezed));
  x = torch::relu(pose_conv2_->forward(x));
  return pose_out_->forward(x).mean({2, 3}) * kPoseScale;
}

torch::Tensor SoftEnNetImpl::pose_forward(const torch::Tensor& pair) {
  if (pair.dim() != 4 || pair.size(1) != 6) {
    throw std::invalid_argument(fmt::format("pose input must be [B, 6, H, W], got {}", fmt::join(pair.sizes(), "x")));
  }
  auto target = pair.slice(1, 0, 3);
  auto source = pair.slice(1, 3, 6);
  check_input(target);
  return pose_from_features(depth_encoder_->forward(target)[4], depth_encoder_->forward(source)[4]);
}

}  // namespace softennet::model
