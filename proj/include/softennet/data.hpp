#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "softennet/camera.hpp"
#include "softennet/geometry.hpp"

namespace softennet::data {

struct Frame {
  torch::Tensor rgb;                     // [3, H, W] float32 in [0, 1]
  std::optional<torch::Tensor> depth;    // [1, H, W] float32, scene units
  std::optional<torch::Tensor> lumen;    // [H, W] int64 class labels
  std::optional<geometry::RigidTransform> pose;  // camera-to-world
  int64_t index = 0;
};

struct Sequence {
  camera::CameraModel camera;
  std::vector<Frame> frames;
};

/// Parameters of the procedural colon tube and its fly-through.
///
/// The tube is the set of points whose distance, within the plane z = const,
/// from the centreline c(z) equals radius(z). The centreline's lateral offset
/// is a Catmull-Rom spline through seeded control points spaced along z.
struct TubeConfig {
  int width = 128;
  int height = 128;
  camera::CameraKind camera_kind = camera::CameraKind::pinhole;
  double focal_scale = 0.5;  // focal length in units of image width (0.5 -> 90 deg HFOV pinhole)
  double ds_xi = 0.5;
  double ds_alpha = 0.6;

  double radius = 2.5;
  double fold_amplitude = 0.25;  // fractional narrowing at a haustral fold
  double fold_period = 3.0;
  double fold_sharpness = 4.0;
  double control_spacing = 10.0;
  double lateral_amplitude = 1.5;
  // Explicit lateral control points "x0, y0, x1, y1, ..."; seeded when empty.
  std::vector<double> control_points;

  int noise_octaves = 4;
  double noise_frequency = 0.8;
  double vein_density = 1.2;
  double vein_strength = 0.35;
  double light_falloff = 2.0;
  double light_gain = 6.0;
  double ambient = 0.01;

  double speed = 0.1;        // units per frame along the tube axis
  double camera_offset = 0.2;  // lateral wander as a fraction of the radius
  double roll_amplitude = 0.1; // radians
  int frames = 50;
  double max_depth = 20.0;

  void validate() const;
  camera::CameraModel camera() const;

  std::string to_text() const;
  static TubeConfig from_text(const std::string& text);
  static TubeConfig load(const std::filesystem::path& path);
};

/// Ray-casting renderer for one seeded tube. Frames can be rendered in any
/// order; all randomness is drawn in the constructor.
class TubeRenderer {
 public:
  TubeRenderer(TubeConfig config, uint64_t seed);
  ~TubeRenderer();
  TubeRenderer(TubeRenderer&&) noexcept;
  TubeRenderer& operator=(TubeRenderer&&) noexcept;

  const TubeConfig& config() const;
  const camera::CameraModel& camera() const;
  geometry::RigidTransform camera_pose(int frame) const;
  Frame render(int frame) const;

 private:
  struct State;
  std::unique_ptr<State> state_;
};

Sequence generate_tube_sequence(const TubeConfig& config, uint64_t seed);

struct LumenLabels {
  torch::Tensor labels;      // [H, W] int64; 1 = lumen, 0 = wall
  bool degenerate = false;   // every pixel labelled lumen
};

/// Lumen where depth is at or above the nearest-rank percentile of the frame.
/// depth: [H, W] or [1, H, W].
LumenLabels lumen_gt_from_depth(const torch::Tensor& depth, double percentile = 95.0);

// 16-bit depth encoding: value = round(depth / max_depth * 65535).
inline constexpr double kDepthCodeMax = 65535.0;

// Single-image codecs shared by the dataset writer and the infer command.
void write_rgb_png(const std::filesystem::path& path, const torch::Tensor& rgb);  // [3, H, W] in [0, 1]
torch::Tensor read_rgb_png(const std::filesystem::path& path);                  // -> [3, H, W] float32
void write_depth_png(const std::filesystem::path& path, const torch::Tensor& depth, double max_depth = 20.0);
torch::Tensor read_depth_png(const std::filesystem::path& path, double max_depth = 20.0);  // -> [1, H, W]
void write_label_png(const std::filesystem::path& path, const torch::Tensor& labels);  // [H, W] integer
torch::Tensor read_label_png(const std::filesystem::path& path);                       // -> [H, W] int64

void save_sequence(const std::filesystem::path& dir, const Sequence& sequence, double max_depth = 20.0);
Sequence load_sequence(const std::filesystem::path& dir, double max_depth = 20.0);

/// Writes one frame of the documented layout; used to stream long sequences.
void save_frame(const std::filesystem::path& dir, const Frame& frame, double max_depth = 20.0);
void prepare_dataset_dir(const std::filesystem::path& dir, const camera::CameraModel& cam);
void write_poses(const std::filesystem::path& dir, const std::vector<geometry::RigidTransform>& poses);

/// Adjacent frames (target = frame k + stride, source = frame k) stacked
/// along the batch dimension.
struct PairBatch {
  torch::Tensor target_rgb;  // [B, 3, H, W]
  torch::Tensor source_rgb;
  torch::Tensor target_lumen;  // [B, H, W] int64, undefined when unlabeled
  torch::Tensor source_lumen;
  torch::Tensor target_depth;  // [B, 1, H, W], undefined when absent
  torch::Tensor source_depth;
};

struct PairIndex {
  int target = 0;
  int source = 0;
};

std::vector<PairIndex> adjacent_pairs(const Sequence& sequence, int stride = 1);
PairBatch make_batch(const Sequence& sequence, const std::vector<PairIndex>& pairs);

/// Horizontal flip of each pair with the given probability, applied jointly
/// to both frames and all their maps. Refused (with a warning, returning the
/// batch unchanged) when the principal point is off-centre.
PairBatch augment(const PairBatch& batch, double flip_probability, const camera::CameraModel& cam,
                  std::mt19937_64& rng);

}  // namespace softennet::data
