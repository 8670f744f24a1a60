#pragma once

#include <array>

#include <torch/torch.h>

#include "softennet/camera.hpp"

namespace softennet::geometry {

/// Batched rigid transform P' = R P + t.
/// rotation: [B, 3, 3], translation: [B, 3].
struct Pose {
  torch::Tensor rotation;
  torch::Tensor translation;

  static Pose identity(int64_t batch, torch::Dtype dtype = torch::kFloat64);

  Pose inverse() const;
  // (*this) after `first`: maps x to this(first(x)).
  Pose compose(const Pose& first) const;
  // points: [B, ..., 3].
  torch::Tensor apply(const torch::Tensor& points) const;
  int64_t batch() const { return rotation.size(0); }
  Pose to(torch::Dtype dtype) const { return {rotation.to(dtype), translation.to(dtype)}; }
};

/// Axis-angle (radians) followed by translation, [..., 6] -> Pose with the
/// leading dimensions flattened into the batch. Exact identity at zero.
Pose pose_from_6dof(const torch::Tensor& params);

/// Plain double-precision rigid transform for per-frame bookkeeping
/// (generator trajectories, poses.txt, scalar oracles). Row-major R.
struct RigidTransform {
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::array<double, 3> translation{0, 0, 0};

  static RigidTransform from_6dof(const std::array<double, 6>& params);
  std::array<double, 6> to_6dof() const;
  RigidTransform inverse() const;
  RigidTransform compose(const RigidTransform& first) const;
  camera::Point3 apply(const camera::Point3& p) const;
  // Single-element Pose in the requested dtype.
  Pose to_pose(torch::Dtype dtype = torch::kFloat64) const;
};

// Relative motion T_{t->s} mapping target-camera points into the source
// camera, from camera-to-world poses of both frames.
RigidTransform relative_pose(const RigidTransform& target_to_world, const RigidTransform& source_to_world);

/// Continuous source coordinates per target pixel plus an in-bounds flag.
/// coords: [B, H, W, 2] as (u, v); in_bounds: [B, 1, H, W] in {0, 1}.
struct SamplingGrid {
  torch::Tensor coords;
  torch::Tensor in_bounds;
};

struct SampleResult {
  torch::Tensor values;  // [B, C, H, W]
  torch::Tensor mask;    // [B, 1, H, W], M_ego
};

struct ProjectedDepth {
  torch::Tensor projected;  // z of the transformed target cloud, target grid
  torch::Tensor sampled;    // source depth sampled at the warped coordinates
  torch::Tensor mask;       // in-bounds flags of the warp
};

// depth: [B, 1, H, W] -> points [B, H, W, 3].
torch::Tensor backproject(const torch::Tensor& depth, const camera::CameraModel& cam);

SamplingGrid warp_coordinates(const torch::Tensor& target_depth, const Pose& target_to_source,
                              const camera::CameraModel& cam);

/// Bilinear lookup of `image` at `grid`. Samples whose coordinates leave
/// [0, W-1] x [0, H-1], or whose grid flag is already 0, return 0 and mask 0.
/// Integer coordinates reproduce the stored value exactly.
SampleResult bilinear_sample(const torch::Tensor& image, const SamplingGrid& grid);

SampleResult synthesize_target(const torch::Tensor& source_image, const torch::Tensor& target_depth,
                               const Pose& target_to_source, const camera::CameraModel& cam);

ProjectedDepth project_depth(const torch::Tensor& target_depth, const Pose& target_to_source,
                             const camera::CameraModel& cam, const torch::Tensor& source_depth);

}  // namespace softennet::geometry
