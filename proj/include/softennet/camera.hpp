#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <torch/torch.h>

namespace softennet::camera {

struct Intrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;
};

struct DoubleSphereParams {
  double xi = 0.0;
  double alpha = 0.0;
};

enum class CameraKind { pinhole, double_sphere };

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

struct Pixel {
  double u = 0.0;
  double v = 0.0;
};

// Projection of a single point. `valid` is false when the point lies outside
// the model's projection domain; `pixel` is then meaningless.
struct Projection {
  Pixel pixel;
  bool valid = false;
};

// Batched projection result. `valid` is a 0/1 tensor of the point tensor's
// leading shape and the same dtype; invalid coordinates are finite garbage.
struct ProjectedPoints {
  torch::Tensor uv;
  torch::Tensor valid;
};

/// Pinhole or double-sphere camera. Owns the projection (3D -> pixel) and
/// unprojection (pixel + z-depth -> 3D) maps used by view synthesis.
///
/// Depth always means the z component in the camera frame, never ray length.
class CameraModel {
 public:
  static CameraModel pinhole(const Intrinsics& intrinsics);
  static CameraModel double_sphere(const Intrinsics& intrinsics, const DoubleSphereParams& ds);

  CameraKind kind() const { return kind_; }
  const Intrinsics& intrinsics() const { return intrinsics_; }
  const std::optional<DoubleSphereParams>& ds() const { return ds_; }
  int width() const { return intrinsics_.width; }
  int height() const { return intrinsics_.height; }

  Projection project(const Point3& point) const;

  // Throws std::invalid_argument for depth <= 0. Returns NaNs when the pixel
  // has no valid ray (double-sphere outside its unprojection domain).
  Point3 unproject(const Pixel& pixel, double depth) const;

  // Differentiable batched forms. `points` has shape [..., 3], `pixels`
  // [..., 2] and `depth` the leading shape of `pixels`.
  ProjectedPoints project(const torch::Tensor& points) const;
  torch::Tensor unproject(const torch::Tensor& pixels, const torch::Tensor& depth) const;

  // Rays with unit z component for every pixel centre, shape [H, W, 3], plus
  // a [H, W] validity map. Multiplying a ray by depth yields the 3D point.
  std::pair<torch::Tensor, torch::Tensor> pixel_rays(torch::Dtype dtype = torch::kFloat64) const;

  // True when the principal point sits on the horizontal image centre, the
  // precondition for horizontal flip augmentation.
  bool horizontally_centered(double tolerance = 1e-6) const;

  std::string to_text() const;
  static CameraModel from_text(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static CameraModel load(const std::filesystem::path& path);

  bool operator==(const CameraModel& other) const;

 private:
  CameraModel(CameraKind kind, const Intrinsics& intrinsics, std::optional<DoubleSphereParams> ds);

  CameraKind kind_;
  Intrinsics intrinsics_;
  std::optional<DoubleSphereParams> ds_;
};

std::string to_string(CameraKind kind);

}  // namespace softennet::camera
