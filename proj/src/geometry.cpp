#include "softennet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace softennet::geometry {
namespace {

// Below this squared angle the Rodrigues coefficients use their Taylor series.
constexpr double kSmallAngleSq = 1e-8;

// Coordinates within rounding distance of an integer are moved onto it so that
// an identity warp reads stored values exactly. The correction is constant
// with respect to autograd, so gradients pass through unchanged.
torch::Tensor snap_to_grid(const torch::Tensor& coord, int64_t extent) {
  const double eps = coord.scalar_type() == torch::kFloat64 ? std::numeric_limits<double>::epsilon()
                                                            : std::numeric_limits<float>::epsilon();
  const double tolerance = 64.0 * eps * static_cast<double>(extent);
  auto nearest = torch::round(coord).detach();
  auto offset = (nearest - coord).detach();
  return coord + torch::where(offset.abs() < tolerance, offset, torch::zeros_like(offset));
}

struct Projected {
  SamplingGrid grid;
  torch::Tensor transformed_z;  // [B, 1, H, W]
};

Projected transform_and_project(const torch::Tensor& target_depth, const Pose& target_to_source,
                                const camera::CameraModel& cam) {
  const auto [rays, ray_valid] = cam.pixel_rays(target_depth.scalar_type());
  auto cloud = target_depth.permute({0, 2, 3, 1}) * rays.unsqueeze(0);
  auto moved = target_to_source.apply(cloud);
  auto projected = cam.project(moved);
  auto valid = projected.valid * ray_valid.to(projected.valid.dtype()).unsqueeze(0);
  const int64_t height = target_depth.size(2);
  const int64_t width = target_depth.size(3);
  const int64_t extent = std::max(width, height);
  auto u = snap_to_grid(projected.uv.select(-1, 0), extent);
  auto v = snap_to_grid(projected.uv.select(-1, 1), extent);
  auto inside = (u >= 0).logical_and(u <= width - 1).logical_and(v >= 0).logical_and(v <= height - 1);
  auto in_bounds = (valid * inside.to(valid.dtype())).unsqueeze(1).detach();
  return {{torch::stack({u, v}, -1), in_bounds}, moved.select(-1, 2).unsqueeze(1)};
}

void check_depth(const torch::Tensor& depth, const camera::CameraModel& cam, const char* what) {
  if (depth.dim() != 4 || depth.size(1) != 1) {
    throw std::invalid_argument(fmt::format("{}: expected depth of shape [B, 1, H, W], got {}", what,
                                            fmt::join(depth.sizes(), "x")));
  }
  if (depth.size(2) != cam.height() || depth.size(3) != cam.width()) {
    throw std::invalid_argument(fmt::format("{}: depth is {}x{} but camera is {}x{}", what, depth.size(3),
                                            depth.size(2), cam.width(), cam.height()));
  }
}

}  // namespace

Pose Pose::identity(int64_t batch, torch::Dtype dtype) {
  auto opts = torch::TensorOptions().dtype(dtype);
  return {torch::eye(3, opts).unsqueeze(0).repeat({batch, 1, 1}), torch::zeros({batch, 3}, opts)};
}

Pose Pose::inverse() const {
  auto rt = rotation.transpose(1, 2);
  return {rt, -torch::matmul(rt, translation.unsqueeze(-1)).squeeze(-1)};
}

Pose Pose::compose(const Pose& first) const {
  return {torch::matmul(rotation, first.rotation),
          torch::matmul(rotation, first.translation.unsqueeze(-1)).squeeze(-1) + translation};
}

torch::Tensor Pose::apply(const torch::Tensor& points) const {
  const int64_t b = points.size(0);
  auto flat = points.reshape({b, -1, 3});
  auto moved = torch::matmul(flat, rotation.transpose(1, 2)) + translation.unsqueeze(1);
  return moved.reshape(points.sizes());
}

Pose pose_from_6dof(const torch::Tensor& params) {
  if (params.size(-1) != 6) throw std::invalid_argument("pose_from_6dof: last dimension must be 6");
  auto p = params.reshape({-1, 6});
  auto w = p.slice(1, 0, 3);
  auto t = p.slice(1, 3, 6);
  auto wx = w.select(1, 0);
  auto wy = w.select(1, 1);
  auto wz = w.select(1, 2);
  auto zero = torch::zeros_like(wx);
  auto skew = torch::stack({zero, -wz, wy, wz, zero, -wx, -wy, wx, zero}, 1).view({-1, 3, 3});

  auto theta_sq = (w * w).sum(1);
  auto small = theta_sq < kSmallAngleSq;
  auto theta = torch::sqrt(torch::where(small, torch::ones_like(theta_sq), theta_sq));
  auto sin_coef = torch::where(small, 1.0 - theta_sq / 6.0, torch::sin(theta) / theta);
  auto cos_coef = torch::where(small, 0.5 - theta_sq / 24.0, (1.0 - torch::cos(theta)) / (theta * theta));

  auto eye = torch::eye(3, p.options()).unsqueeze(0);
  auto rotation = eye + sin_coef.view({-1, 1, 1}) * skew + cos_coef.view({-1, 1, 1}) * torch::matmul(skew, skew);
  return {rotation, t};
}

RigidTransform RigidTransform::from_6dof(const std::array<double, 6>& params) {
  const double wx = params[0], wy = params[1], wz = params[2];
  const double theta_sq = wx * wx + wy * wy + wz * wz;
  double a, b;
  if (theta_sq < kSmallAngleSq) {
    a = 1.0 - theta_sq / 6.0;
    b = 0.5 - theta_sq / 24.0;
  } else {
    const double theta = std::sqrt(theta_sq);
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta_sq;
  }
  const std::array<double, 9> k{0, -wz, wy, wz, 0, -wx, -wy, wx, 0};
  RigidTransform out;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      double k2 = 0.0;
      for (int i = 0; i < 3; ++i) k2 += k[r * 3 + i] * k[i * 3 + c];
      out.rotation[r * 3 + c] = (r == c ? 1.0 : 0.0) + a * k[r * 3 + c] + b * k2;
    }
  }
  out.translation = {params[3], params[4], params[5]};
  return out;
}

std::array<double, 6> RigidTransform::to_6dof() const {
  const auto& r = rotation;
  const double trace = r[0] + r[4] + r[8];
  const double cos_angle = std::clamp((trace - 1.0) / 2.0, -1.0, 1.0);
  const double angle = std::acos(cos_angle);
  std::array<double, 3> w{r[7] - r[5], r[2] - r[6], r[3] - r[1]};
  if (angle < 1e-7) {
    for (auto& x : w) x *= 0.5;
  } else if (M_PI - angle < 1e-6) {
    // Near a half turn the antisymmetric part vanishes; read the axis off the
    // symmetric part and fix signs against the largest component.
    std::array<double, 3> axis{std::sqrt(std::max(0.0, (r[0] + 1.0) / 2.0)),
                               std::sqrt(std::max(0.0, (r[4] + 1.0) / 2.0)),
                               std::sqrt(std::max(0.0, (r[8] + 1.0) / 2.0))};
    int major = 0;
    for (int i = 1; i < 3; ++i) {
      if (axis[i] > axis[major]) major = i;
    }
    const std::array<double, 9> sym{r[0], (r[1] + r[3]) / 2, (r[2] + r[6]) / 2, (r[1] + r[3]) / 2, r[4],
                                    (r[5] + r[7]) / 2, (r[2] + r[6]) / 2, (r[5] + r[7]) / 2, r[8]};
    for (int i = 0; i < 3; ++i) {
      if (i != major && sym[major * 3 + i] < 0) axis[i] = -axis[i];
    }
    for (int i = 0; i < 3; ++i) w[i] = axis[i] * angle;
  } else {
    const double scale = angle / (2.0 * std::sin(angle));
    for (auto& x : w) x *= scale;
  }
  return {w[0], w[1], w[2], translation[0], translation[1], translation[2]};
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform out;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) out.rotation[r * 3 + c] = rotation[c * 3 + r];
  }
  for (int r = 0; r < 3; ++r) {
    double acc = 0.0;
    for (int c = 0; c < 3; ++c) acc += out.rotation[r * 3 + c] * translation[c];
    out.translation[r] = -acc;
  }
  return out;
}

RigidTransform RigidTransform::compose(const RigidTransform& first) const {
  RigidTransform out;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      double acc = 0.0;
      for (int i = 0; i < 3; ++i) acc += rotation[r * 3 + i] * first.rotation[i * 3 + c];
      out.rotation[r * 3 + c] = acc;
    }
    double acc = translation[r];
    for (int i = 0; i < 3; ++i) acc += rotation[r * 3 + i] * first.translation[i];
    out.translation[r] = acc;
  }
  return out;
}

camera::Point3 RigidTransform::apply(const camera::Point3& p) const {
  const auto& r = rotation;
  return {r[0] * p.x + r[1] * p.y + r[2] * p.z + translation[0],
          r[3] * p.x + r[4] * p.y + r[5] * p.z + translation[1],
          r[6] * p.x + r[7] * p.y + r[8] * p.z + translation[2]};
}

Pose RigidTransform::to_pose(torch::Dtype dtype) const {
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  auto rot = torch::tensor(std::vector<double>(rotation.begin(), rotation.end()), opts).view({1, 3, 3});
  auto trans = torch::tensor(std::vector<double>(translation.begin(), translation.end()), opts).view({1, 3});
  return {rot.to(dtype), trans.to(dtype)};
}

RigidTransform relative_pose(const RigidTransform& target_to_world, const RigidTransform& source_to_world) {
  return source_to_world.inverse().compose(target_to_world);
}

torch::Tensor backproject(const torch::Tensor& depth, const camera::CameraModel& cam) {
  check_depth(depth, cam, "backproject");
  const auto [rays, valid] = cam.pixel_rays(depth.scalar_type());
  (void)valid;
  // [B, H, W, 1] * [1, H, W, 3]
  return depth.permute({0, 2, 3, 1}) * rays.unsqueeze(0);
}

SamplingGrid warp_coordinates(const torch::Tensor& target_depth, const Pose& target_to_source,
                              const camera::CameraModel& cam) {
  check_depth(target_depth, cam, "warp_coordinates");
  return transform_and_project(target_depth, target_to_source, cam).grid;
}

SampleResult bilinear_sample(const torch::Tensor& image, const SamplingGrid& grid) {
  if (image.dim() != 4) throw std::invalid_argument("bilinear_sample: image must be [B, C, H, W]");
  if (grid.coords.dim() != 4 || grid.coords.size(-1) != 2 || grid.coords.size(0) != image.size(0)) {
    throw std::invalid_argument(fmt::format("bilinear_sample: grid {} does not match image {}",
                                            fmt::join(grid.coords.sizes(), "x"), fmt::join(image.sizes(), "x")));
  }
  const int64_t batch = image.size(0);
  const int64_t channels = image.size(1);
  const int64_t height = image.size(2);
  const int64_t width = image.size(3);
  const int64_t out_h = grid.coords.size(1);
  const int64_t out_w = grid.coords.size(2);

  auto u = snap_to_grid(grid.coords.select(-1, 0), std::max(width, height));
  auto v = snap_to_grid(grid.coords.select(-1, 1), std::max(width, height));
  auto inside = (u >= 0).logical_and(u <= width - 1).logical_and(v >= 0).logical_and(v <= height - 1);
  auto mask = (inside.to(image.dtype()).unsqueeze(1) * grid.in_bounds.to(image.dtype())).detach();

  // Clamp before flooring so that far-away coordinates stay indexable; those
  // samples are masked out anyway.
  auto uc = u.clamp(-1.0, static_cast<double>(width));
  auto vc = v.clamp(-1.0, static_cast<double>(height));
  auto u0f = torch::floor(uc).detach();
  auto v0f = torch::floor(vc).detach();
  auto wu = (uc - u0f).unsqueeze(1);
  auto wv = (vc - v0f).unsqueeze(1);
  auto u0 = u0f.to(torch::kLong).clamp(0, width - 1);
  auto v0 = v0f.to(torch::kLong).clamp(0, height - 1);
  auto u1 = (u0 + 1).clamp(0, width - 1);
  auto v1 = (v0 + 1).clamp(0, height - 1);

  auto flat = image.reshape({batch, channels, height * width});
  auto gather = [&](const torch::Tensor& vi, const torch::Tensor& ui) {
    auto index = (vi * width + ui).view({batch, 1, out_h * out_w}).expand({batch, channels, out_h * out_w});
    return flat.gather(2, index).view({batch, channels, out_h, out_w});
  };
  auto top = (1.0 - wu) * gather(v0, u0) + wu * gather(v0, u1);
  auto bottom = (1.0 - wu) * gather(v1, u0) + wu * gather(v1, u1);
  auto values = (1.0 - wv) * top + wv * bottom;
  return {values * mask, mask};
}

SampleResult synthesize_target(const torch::Tensor& source_image, const torch::Tensor& target_depth,
                               const Pose& target_to_source, const camera::CameraModel& cam) {
  return bilinear_sample(source_image, warp_coordinates(target_depth, target_to_source, cam));
}

ProjectedDepth project_depth(const torch::Tensor& target_depth, const Pose& target_to_source,
                             const camera::CameraModel& cam, const torch::Tensor& source_depth) {
  check_depth(target_depth, cam, "project_depth");
  check_depth(source_depth, cam, "project_depth");
  auto projected = transform_and_project(target_depth, target_to_source, cam);
  auto sampled = bilinear_sample(source_depth, projected.grid);
  return {projected.transformed_z, sampled.values, sampled.mask};
}

}  // namespace softennet::geometry
