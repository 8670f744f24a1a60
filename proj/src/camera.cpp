#include "softennet/camera.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>

#include "softennet/kv.hpp"

namespace softennet::camera {
namespace {

void validate(const Intrinsics& k) {
  if (!(k.fx > 0.0) || !(k.fy > 0.0)) {
    throw std::invalid_argument(fmt::format("focal lengths must be positive (fx={}, fy={})", k.fx, k.fy));
  }
  if (k.width <= 0 || k.height <= 0) {
    throw std::invalid_argument(fmt::format("image size must be positive ({}x{})", k.width, k.height));
  }
  if (!(k.cx >= 0.0 && k.cx < k.width) || !(k.cy >= 0.0 && k.cy < k.height)) {
    throw std::invalid_argument(fmt::format("principal point ({}, {}) outside {}x{} image", k.cx, k.cy, k.width, k.height));
  }
}

// Threshold w2 of the double-sphere projection domain: z > -w2 * |P|.
double ds_w2(const DoubleSphereParams& ds) {
  const double w1 = ds.alpha <= 0.5 ? ds.alpha / (1.0 - ds.alpha) : (1.0 - ds.alpha) / ds.alpha;
  return (w1 + ds.xi) / std::sqrt(2.0 * w1 * ds.xi + ds.xi * ds.xi + 1.0);
}

}  // namespace

std::string to_string(CameraKind kind) {
  return kind == CameraKind::pinhole ? "pinhole" : "double_sphere";
}

CameraModel::CameraModel(CameraKind kind, const Intrinsics& intrinsics, std::optional<DoubleSphereParams> ds)
    : kind_(kind), intrinsics_(intrinsics), ds_(ds) {
  validate(intrinsics_);
  if (ds_ && !(ds_->alpha >= 0.0 && ds_->alpha < 1.0)) {
    throw std::invalid_argument(fmt::format("double-sphere alpha must lie in [0, 1), got {}", ds_->alpha));
  }
}

CameraModel CameraModel::pinhole(const Intrinsics& intrinsics) {
  return CameraModel(CameraKind::pinhole, intrinsics, std::nullopt);
}

CameraModel CameraModel::double_sphere(const Intrinsics& intrinsics, const DoubleSphereParams& ds) {
  return CameraModel(CameraKind::double_sphere, intrinsics, ds);
}

Projection CameraModel::project(const Point3& p) const {
  const auto& k = intrinsics_;
  if (kind_ == CameraKind::pinhole) {
    if (!(p.z > 0.0)) return {};
    return {{k.cx + k.fx * p.x / p.z, k.cy + k.fy * p.y / p.z}, true};
  }
  const auto& ds = *ds_;
  const double r2 = p.x * p.x + p.y * p.y;
  const double d1 = std::sqrt(r2 + p.z * p.z);
  if (!(p.z > -ds_w2(ds) * d1)) return {};
  const double shifted_z = ds.xi * d1 + p.z;
  const double d2 = std::sqrt(r2 + shifted_z * shifted_z);
  const double denom = ds.alpha * d2 + (1.0 - ds.alpha) * shifted_z;
  if (!(denom > 0.0)) return {};
  return {{k.cx + k.fx * p.x / denom, k.cy + k.fy * p.y / denom}, true};
}

Point3 CameraModel::unproject(const Pixel& pixel, double depth) const {
  if (!(depth > 0.0)) throw std::invalid_argument(fmt::format("unproject: depth must be positive, got {}", depth));
  const auto& k = intrinsics_;
  const double mx = (pixel.u - k.cx) / k.fx;
  const double my = (pixel.v - k.cy) / k.fy;
  if (kind_ == CameraKind::pinhole) return {mx * depth, my * depth, depth};

  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  const auto& ds = *ds_;
  const double r2 = mx * mx + my * my;
  if (ds.alpha > 0.5 && r2 >= 1.0 / (2.0 * ds.alpha - 1.0)) return {nan, nan, nan};
  const double mz = (1.0 - ds.alpha * ds.alpha * r2) /
                    (ds.alpha * std::sqrt(1.0 - (2.0 * ds.alpha - 1.0) * r2) + 1.0 - ds.alpha);
  const double scale = (mz * ds.xi + std::sqrt(mz * mz + (1.0 - ds.xi * ds.xi) * r2)) / (mz * mz + r2);
  const double rz = scale * mz - ds.xi;
  if (!(rz > 0.0)) return {nan, nan, nan};
  const double s = depth / rz;
  return {scale * mx * s, scale * my * s, depth};
}

ProjectedPoints CameraModel::project(const torch::Tensor& points) const {
  const auto& k = intrinsics_;
  auto x = points.select(-1, 0);
  auto y = points.select(-1, 1);
  auto z = points.select(-1, 2);
  if (kind_ == CameraKind::pinhole) {
    auto valid = z > 0;
    auto safe_z = torch::where(valid, z, torch::ones_like(z));
    auto uv = torch::stack({k.cx + k.fx * x / safe_z, k.cy + k.fy * y / safe_z}, -1);
    return {uv, valid.to(points.dtype())};
  }
  const auto& ds = *ds_;
  auto r2 = x * x + y * y;
  auto d1 = torch::sqrt(r2 + z * z);
  auto shifted_z = ds.xi * d1 + z;
  auto d2 = torch::sqrt(r2 + shifted_z * shifted_z);
  auto denom = ds.alpha * d2 + (1.0 - ds.alpha) * shifted_z;
  auto valid = torch::logical_and(z > -ds_w2(ds) * d1, denom > 0);
  auto safe_denom = torch::where(valid, denom, torch::ones_like(denom));
  auto uv = torch::stack({k.cx + k.fx * x / safe_denom, k.cy + k.fy * y / safe_denom}, -1);
  return {uv, valid.to(points.dtype())};
}

torch::Tensor CameraModel::unproject(const torch::Tensor& pixels, const torch::Tensor& depth) const {
  const auto& k = intrinsics_;
  auto mx = (pixels.select(-1, 0) - k.cx) / k.fx;
  auto my = (pixels.select(-1, 1) - k.cy) / k.fy;
  if (kind_ == CameraKind::pinhole) return torch::stack({mx * depth, my * depth, depth}, -1);

  const auto& ds = *ds_;
  auto r2 = mx * mx + my * my;
  auto inner = (1.0 - (2.0 * ds.alpha - 1.0) * r2).clamp_min(0.0);
  auto mz = (1.0 - ds.alpha * ds.alpha * r2) / (ds.alpha * torch::sqrt(inner) + 1.0 - ds.alpha);
  auto radicand = (mz * mz + (1.0 - ds.xi * ds.xi) * r2).clamp_min(0.0);
  auto scale = (mz * ds.xi + torch::sqrt(radicand)) / (mz * mz + r2);
  auto rz = scale * mz - ds.xi;
  auto s = depth / rz;
  return torch::stack({scale * mx * s, scale * my * s, depth}, -1);
}

std::pair<torch::Tensor, torch::Tensor> CameraModel::pixel_rays(torch::Dtype dtype) const {
  const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  auto v = torch::arange(height(), opts).view({height(), 1}).expand({height(), width()});
  auto u = torch::arange(width(), opts).view({1, width()}).expand({height(), width()});
  auto pixels = torch::stack({u, v}, -1);
  auto rays = unproject(pixels, torch::ones({height(), width()}, opts));
  auto valid = torch::isfinite(rays).all(-1);
  if (kind_ == CameraKind::double_sphere) {
    const auto& ds = *ds_;
    auto mx = (u - intrinsics_.cx) / intrinsics_.fx;
    auto my = (v - intrinsics_.cy) / intrinsics_.fy;
    auto r2 = mx * mx + my * my;
    if (ds.alpha > 0.5) valid = torch::logical_and(valid, r2 < 1.0 / (2.0 * ds.alpha - 1.0));
    // The z-normalized ray must point forwards for a z-depth to exist.
    auto inner = (1.0 - (2.0 * ds.alpha - 1.0) * r2).clamp_min(0.0);
    auto mz = (1.0 - ds.alpha * ds.alpha * r2) / (ds.alpha * torch::sqrt(inner) + 1.0 - ds.alpha);
    auto radicand = (mz * mz + (1.0 - ds.xi * ds.xi) * r2).clamp_min(0.0);
    auto scale = (mz * ds.xi + torch::sqrt(radicand)) / (mz * mz + r2);
    valid = torch::logical_and(valid, scale * mz - ds.xi > 1e-9);
  }
  rays = torch::where(valid.unsqueeze(-1), rays, torch::zeros_like(rays));
  return {rays.to(dtype), valid};
}

bool CameraModel::horizontally_centered(double tolerance) const {
  return std::abs(intrinsics_.cx - (intrinsics_.width - 1) / 2.0) <= tolerance;
}

std::string CameraModel::to_text() const {
  KeyValueFile kv;
  kv.set("kind", to_string(kind_));
  kv.set("fx", intrinsics_.fx);
  kv.set("fy", intrinsics_.fy);
  kv.set("cx", intrinsics_.cx);
  kv.set("cy", intrinsics_.cy);
  kv.set("width", intrinsics_.width);
  kv.set("height", intrinsics_.height);
  kv.set("xi", ds_ ? ds_->xi : 0.0);
  kv.set("alpha", ds_ ? ds_->alpha : 0.0);
  return kv.to_text();
}

CameraModel CameraModel::from_text(const std::string& text) {
  const auto kv = KeyValueFile::parse(text);
  Intrinsics k;
  k.fx = kv.get_double("fx");
  k.fy = kv.get_double("fy");
  k.cx = kv.get_double("cx");
  k.cy = kv.get_double("cy");
  k.width = static_cast<int>(kv.get_int("width"));
  k.height = static_cast<int>(kv.get_int("height"));
  const std::string& kind = kv.get("kind");
  if (kind == "pinhole") return pinhole(k);
  if (kind == "double_sphere") {
    return double_sphere(k, {kv.get_double("xi"), kv.get_double("alpha")});
  }
  throw std::invalid_argument(fmt::format("unknown camera kind '{}'", kind));
}

void CameraModel::save(const std::filesystem::path& path) const { KeyValueFile::parse(to_text()).save(path); }

CameraModel CameraModel::load(const std::filesystem::path& path) {
  try {
    return from_text(KeyValueFile::load(path).to_text());
  } catch (const std::exception& e) {
    throw std::runtime_error(fmt::format("camera file '{}': {}", path.string(), e.what()));
  }
}

bool CameraModel::operator==(const CameraModel& other) const {
  const auto& a = intrinsics_;
  const auto& b = other.intrinsics_;
  const bool same_ds = (!ds_ && !other.ds_) ||
                       (ds_ && other.ds_ && ds_->xi == other.ds_->xi && ds_->alpha == other.ds_->alpha);
  return kind_ == other.kind_ && a.fx == b.fx && a.fy == b.fy && a.cx == b.cx && a.cy == b.cy &&
         a.width == b.width && a.height == b.height && same_ds;
}

}  // namespace softennet::camera
