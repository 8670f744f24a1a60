#include "softennet/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "softennet/kv.hpp"
#include "softennet/log.hpp"
#include "softennet/losses.hpp"

namespace softennet::data {
namespace fs = std::filesystem;
namespace {

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
Vec3 cross(Vec3 a, Vec3 b) { return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x}; }
Vec3 normalized(Vec3 a) { return (1.0 / std::sqrt(dot(a, a))) * a; }

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seeded lattice value noise in [0, 1].
class ValueNoise {
 public:
  explicit ValueNoise(uint64_t seed) : seed_(splitmix64(seed)) {}

  double operator()(double x, double y, double z) const {
    const double fx = std::floor(x), fy = std::floor(y), fz = std::floor(z);
    const auto ix = static_cast<int64_t>(fx), iy = static_cast<int64_t>(fy), iz = static_cast<int64_t>(fz);
    const double tx = smooth(x - fx), ty = smooth(y - fy), tz = smooth(z - fz);
    auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
    double c[2][2][2];
    for (int dx = 0; dx < 2; ++dx)
      for (int dy = 0; dy < 2; ++dy)
        for (int dz = 0; dz < 2; ++dz) c[dx][dy][dz] = lattice(ix + dx, iy + dy, iz + dz);
    const double x00 = lerp(c[0][0][0], c[1][0][0], tx);
    const double x10 = lerp(c[0][1][0], c[1][1][0], tx);
    const double x01 = lerp(c[0][0][1], c[1][0][1], tx);
    const double x11 = lerp(c[0][1][1], c[1][1][1], tx);
    return lerp(lerp(x00, x10, ty), lerp(x01, x11, ty), tz);
  }

 private:
  static double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

  double lattice(int64_t i, int64_t j, int64_t k) const {
    uint64_t h = seed_;
    h = splitmix64(h ^ static_cast<uint64_t>(i));
    h = splitmix64(h ^ static_cast<uint64_t>(j));
    h = splitmix64(h ^ static_cast<uint64_t>(k));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  }

  uint64_t seed_;
};

std::string kind_name(camera::CameraKind kind) { return camera::to_string(kind); }

camera::CameraKind parse_kind(const std::string& s) {
  if (s == "pinhole") return camera::CameraKind::pinhole;
  if (s == "double_sphere") return camera::CameraKind::double_sphere;
  throw std::invalid_argument(fmt::format("unknown camera kind '{}'", s));
}

}  // namespace

// ---------------------------------------------------------------------------
// TubeConfig

void TubeConfig::validate() const {
  if (width <= 0 || height <= 0) throw std::invalid_argument("image size must be positive");
  if (!(radius > 0.0)) throw std::invalid_argument(fmt::format("tube radius must be positive, got {}", radius));
  if (!(speed > 0.0)) throw std::invalid_argument(fmt::format("camera speed must be positive, got {}", speed));
  if (frames < 1) throw std::invalid_argument(fmt::format("need at least one frame, got {}", frames));
  if (!(fold_amplitude >= 0.0 && fold_amplitude < 0.9)) {
    throw std::invalid_argument("fold amplitude must lie in [0, 0.9)");
  }
  if (!(fold_period > 0.0) || !(control_spacing > 0.0)) {
    throw std::invalid_argument("fold period and control spacing must be positive");
  }
  if (!(camera_offset >= 0.0) || camera_offset + fold_amplitude >= 0.9) {
    throw std::invalid_argument("camera wander plus fold depth leaves no room inside the tube");
  }
  if (!(max_depth > 0.0) || !(focal_scale > 0.0)) throw std::invalid_argument("max depth and focal scale must be positive");
  if (control_points.size() % 2 != 0) throw std::invalid_argument("control points come in (x, y) pairs");
  if (!control_points.empty() && control_points.size() < 8) {
    throw std::invalid_argument("explicit centreline needs at least 4 control points");
  }
}

camera::CameraModel TubeConfig::camera() const {
  camera::Intrinsics k;
  k.width = width;
  k.height = height;
  k.fx = k.fy = focal_scale * width;
  k.cx = (width - 1) / 2.0;
  k.cy = (height - 1) / 2.0;
  if (camera_kind == camera::CameraKind::pinhole) return camera::CameraModel::pinhole(k);
  return camera::CameraModel::double_sphere(k, {ds_xi, ds_alpha});
}

std::string TubeConfig::to_text() const {
  KeyValueFile kv;
  kv.set("width", width);
  kv.set("height", height);
  kv.set("camera_kind", kind_name(camera_kind));
  kv.set("focal_scale", focal_scale);
  kv.set("ds_xi", ds_xi);
  kv.set("ds_alpha", ds_alpha);
  kv.set("radius", radius);
  kv.set("fold_amplitude", fold_amplitude);
  kv.set("fold_period", fold_period);
  kv.set("fold_sharpness", fold_sharpness);
  kv.set("control_spacing", control_spacing);
  kv.set("lateral_amplitude", lateral_amplitude);
  kv.set("control_points", control_points);
  kv.set("noise_octaves", noise_octaves);
  kv.set("noise_frequency", noise_frequency);
  kv.set("vein_density", vein_density);
  kv.set("vein_strength", vein_strength);
  kv.set("light_falloff", light_falloff);
  kv.set("light_gain", light_gain);
  kv.set("ambient", ambient);
  kv.set("speed", speed);
  kv.set("camera_offset", camera_offset);
  kv.set("roll_amplitude", roll_amplitude);
  kv.set("frames", frames);
  kv.set("max_depth", max_depth);
  return kv.to_text();
}

TubeConfig TubeConfig::from_text(const std::string& text) {
  const auto kv = KeyValueFile::parse(text);
  TubeConfig c;
  static const std::vector<std::string> known{
      "width",        "height",         "camera_kind",     "focal_scale",     "ds_xi",        "ds_alpha",
      "radius",       "fold_amplitude", "fold_period",     "fold_sharpness",  "control_spacing",
      "lateral_amplitude", "control_points", "noise_octaves", "noise_frequency", "vein_density",
      "vein_strength", "light_falloff",  "light_gain",      "ambient",         "speed",        "camera_offset",
      "roll_amplitude", "frames",        "max_depth"};
  for (const auto& key : kv.keys()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument(fmt::format("unknown tube config key '{}'", key));
    }
  }
  c.width = static_cast<int>(kv.get_int("width", c.width));
  c.height = static_cast<int>(kv.get_int("height", c.height));
  c.camera_kind = parse_kind(kv.get("camera_kind", kind_name(c.camera_kind)));
  c.focal_scale = kv.get_double("focal_scale", c.focal_scale);
  c.ds_xi = kv.get_double("ds_xi", c.ds_xi);
  c.ds_alpha = kv.get_double("ds_alpha", c.ds_alpha);
  c.radius = kv.get_double("radius", c.radius);
  c.fold_amplitude = kv.get_double("fold_amplitude", c.fold_amplitude);
  c.fold_period = kv.get_double("fold_period", c.fold_period);
  c.fold_sharpness = kv.get_double("fold_sharpness", c.fold_sharpness);
  c.control_spacing = kv.get_double("control_spacing", c.control_spacing);
  c.lateral_amplitude = kv.get_double("lateral_amplitude", c.lateral_amplitude);
  if (kv.contains("control_points")) c.control_points = kv.get_doubles("control_points");
  c.noise_octaves = static_cast<int>(kv.get_int("noise_octaves", c.noise_octaves));
  c.noise_frequency = kv.get_double("noise_frequency", c.noise_frequency);
  c.vein_density = kv.get_double("vein_density", c.vein_density);
  c.vein_strength = kv.get_double("vein_strength", c.vein_strength);
  c.light_falloff = kv.get_double("light_falloff", c.light_falloff);
  c.light_gain = kv.get_double("light_gain", c.light_gain);
  c.ambient = kv.get_double("ambient", c.ambient);
  c.speed = kv.get_double("speed", c.speed);
  c.camera_offset = kv.get_double("camera_offset", c.camera_offset);
  c.roll_amplitude = kv.get_double("roll_amplitude", c.roll_amplitude);
  c.frames = static_cast<int>(kv.get_int("frames", c.frames));
  c.max_depth = kv.get_double("max_depth", c.max_depth);
  c.validate();
  return c;
}

TubeConfig TubeConfig::load(const fs::path& path) {
  try {
    return from_text(KeyValueFile::load(path).to_text());
  } catch (const std::exception& e) {
    throw std::runtime_error(fmt::format("tube config '{}': {}", path.string(), e.what()));
  }
}

// ---------------------------------------------------------------------------
// TubeRenderer

struct TubeRenderer::State {
  TubeConfig config;
  camera::CameraModel cam;
  ValueNoise texture_noise;
  ValueNoise vein_noise;
  std::vector<std::array<double, 2>> control;  // lateral offsets at z_j = (j - 1) * spacing
  std::array<double, 6> wander_phase{};
  double lipschitz = 1.0;

  State(TubeConfig c, uint64_t seed)
      : config(std::move(c)), cam(config.camera()), texture_noise(seed * 2 + 1), vein_noise(seed * 2 + 2) {}

  // Catmull-Rom centreline: value, first and second derivative in z.
  void centreline(double z, std::array<double, 2>& c, std::array<double, 2>& dc, std::array<double, 2>& ddc) const {
    const double spacing = config.control_spacing;
    const int n = static_cast<int>(control.size());
    int k = static_cast<int>(std::floor(z / spacing)) + 1;
    k = std::clamp(k, 1, n - 3);
    const double s = z / spacing - (k - 1);
    for (int a = 0; a < 2; ++a) {
      const double p0 = control[k - 1][a], p1 = control[k][a], p2 = control[k + 1][a], p3 = control[k + 2][a];
      const double b = -p0 + p2;
      const double q = 2 * p0 - 5 * p1 + 4 * p2 - p3;
      const double r = -p0 + 3 * p1 - 3 * p2 + p3;
      c[a] = 0.5 * (2 * p1 + b * s + q * s * s + r * s * s * s);
      dc[a] = 0.5 * (b + 2 * q * s + 3 * r * s * s) / spacing;
      ddc[a] = 0.5 * (2 * q + 6 * r * s) / (spacing * spacing);
    }
  }

  std::array<double, 2> centre_at(double z) const {
    std::array<double, 2> c{}, dc{}, ddc{};
    centreline(z, c, dc, ddc);
    return c;
  }

  double radius_at(double z) const {
    const double fold = std::max(0.0, std::cos(2.0 * M_PI * z / config.fold_period));
    return config.radius * (1.0 - config.fold_amplitude * std::pow(fold, config.fold_sharpness));
  }

  // Negative inside the tube, zero on the wall.
  double field(const Vec3& p) const {
    const auto c = centre_at(p.z);
    return std::hypot(p.x - c[0], p.y - c[1]) - radius_at(p.z);
  }

  Vec3 field_gradient(const Vec3& p) const {
    constexpr double h = 1e-6;
    return {(field({p.x + h, p.y, p.z}) - field({p.x - h, p.y, p.z})) / (2 * h),
            (field({p.x, p.y + h, p.z}) - field({p.x, p.y - h, p.z})) / (2 * h),
            (field({p.x, p.y, p.z + h}) - field({p.x, p.y, p.z - h})) / (2 * h)};
  }

  std::array<double, 2> wander(double z) const {
    const double amp = config.camera_offset * config.radius;
    return {amp * std::sin(z * wander_phase[0] + wander_phase[1]), amp * std::sin(z * wander_phase[2] + wander_phase[3])};
  }

  geometry::RigidTransform pose(int frame) const {
    const double z = frame * config.speed;
    constexpr double h = 1e-4;
    auto centre = [&](double zz) {
      const auto c = centre_at(zz);
      const auto w = wander(zz);
      return Vec3{c[0] + w[0], c[1] + w[1], zz};
    };
    const Vec3 origin = centre(z);
    const Vec3 forward = normalized(centre(z + h) - centre(z - h));
    Vec3 right = normalized(cross({0, 1, 0}, forward));
    Vec3 down = cross(forward, right);
    const double roll = config.roll_amplitude * std::sin(z * wander_phase[4] + wander_phase[5]);
    const Vec3 rolled_right = std::cos(roll) * right + std::sin(roll) * down;
    const Vec3 rolled_down = cross(forward, rolled_right);
    geometry::RigidTransform t;
    t.rotation = {rolled_right.x, rolled_down.x, forward.x, rolled_right.y, rolled_down.y,
                  forward.y,      rolled_right.z, rolled_down.z, forward.z};
    t.translation = {origin.x, origin.y, origin.z};
    return t;
  }

  std::array<double, 3> albedo(const Vec3& p) const {
    const auto c = centre_at(p.z);
    const double theta = std::atan2(p.y - c[1], p.x - c[0]);
    const Vec3 q{config.radius * std::cos(theta), config.radius * std::sin(theta), p.z};
    double fbm = 0.0, amplitude = 0.5, norm = 0.0, freq = config.noise_frequency;
    for (int o = 0; o < config.noise_octaves; ++o) {
      fbm += amplitude * texture_noise(q.x * freq, q.y * freq, q.z * freq);
      norm += amplitude;
      amplitude *= 0.5;
      freq *= 2.0;
    }
    fbm = norm > 0 ? fbm / norm : 0.5;
    const double vd = config.vein_density;
    const double ridge = std::abs(2.0 * vein_noise(q.x * vd, q.y * vd, q.z * vd) - 1.0);
    const double vein = std::max(0.0, 1.0 - 6.0 * ridge);
    const double shade = 0.6 + 0.8 * fbm;
    return {std::max(0.0, 0.82 * shade - config.vein_strength * vein * 0.15),
            std::max(0.0, 0.45 * shade - config.vein_strength * vein * 0.35),
            std::max(0.0, 0.40 * shade - config.vein_strength * vein * 0.30)};
  }
};

TubeRenderer::TubeRenderer(TubeConfig config, uint64_t seed) {
  config.validate();
  state_ = std::make_unique<State>(std::move(config), seed);
  auto& s = *state_;
  const auto& c = s.config;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);

  const double travel = c.frames * c.speed + c.max_depth + 2.0 * c.control_spacing;
  if (c.control_points.empty()) {
    const int count = static_cast<int>(std::ceil(travel / c.control_spacing)) + 4;
    for (int j = 0; j < count; ++j) s.control.push_back({c.lateral_amplitude * unit(rng), c.lateral_amplitude * unit(rng)});
  } else {
    for (std::size_t j = 0; j + 1 < c.control_points.size(); j += 2) {
      s.control.push_back({c.control_points[j], c.control_points[j + 1]});
    }
  }
  const double two_pi = 2.0 * M_PI;
  s.wander_phase = {two_pi / (12.0 + 6.0 * std::abs(unit(rng))), two_pi * unit(rng),
                    two_pi / (12.0 + 6.0 * std::abs(unit(rng))), two_pi * unit(rng),
                    two_pi / (15.0 + 5.0 * std::abs(unit(rng))), two_pi * unit(rng)};

  // Reject centrelines that shear or bend the tube into itself within reach of
  // the camera, and bound the field's slope along any unit ray.
  const double z_end = std::min(travel, (static_cast<int>(s.control.size()) - 3) * c.control_spacing);
  double max_slope = 0.0;
  for (double z = 0.0; z <= z_end; z += 0.02) {
    std::array<double, 2> p{}, dp{}, ddp{};
    s.centreline(z, p, dp, ddp);
    const double slope = std::hypot(dp[0], dp[1]);
    const double curvature = std::hypot(ddp[0], ddp[1]) / std::pow(1.0 + slope * slope, 1.5);
    if (slope > 1.0 || curvature * c.radius >= 1.0) {
      throw std::invalid_argument(fmt::format(
          "degenerate centreline near z={:.2f}: slope {:.3f}, curvature*radius {:.3f} (tube folds onto itself)", z,
          slope, curvature * c.radius));
    }
    max_slope = std::max(max_slope, slope);
  }
  const double fold_slope = c.radius * c.fold_amplitude * c.fold_sharpness * two_pi / c.fold_period;
  s.lipschitz = 1.05 * std::sqrt(1.0 + std::pow(max_slope + fold_slope, 2));

  for (int f = 0; f < c.frames; ++f) {
    const auto t = s.pose(f);
    if (s.field({t.translation[0], t.translation[1], t.translation[2]}) > -0.1 * c.radius) {
      throw std::invalid_argument(fmt::format("camera leaves the tube at frame {}", f));
    }
  }
}

TubeRenderer::~TubeRenderer() = default;
TubeRenderer::TubeRenderer(TubeRenderer&&) noexcept = default;
TubeRenderer& TubeRenderer::operator=(TubeRenderer&&) noexcept = default;

const TubeConfig& TubeRenderer::config() const { return state_->config; }

const camera::CameraModel& TubeRenderer::camera() const { return state_->cam; }

geometry::RigidTransform TubeRenderer::camera_pose(int frame) const { return state_->pose(frame); }

Frame TubeRenderer::render(int frame) const {
  const auto& s = *state_;
  const auto& c = s.config;
  const auto pose = s.pose(frame);
  const Vec3 origin{pose.translation[0], pose.translation[1], pose.translation[2]};
  const Vec3 forward{pose.rotation[2], pose.rotation[5], pose.rotation[8]};

  auto rgb = torch::zeros({3, c.height, c.width}, torch::kFloat32);
  auto depth = torch::full({1, c.height, c.width}, static_cast<float>(c.max_depth), torch::kFloat32);
  auto rgb_acc = rgb.accessor<float, 3>();
  auto depth_acc = depth.accessor<float, 3>();

  for (int v = 0; v < c.height; ++v) {
    for (int u = 0; u < c.width; ++u) {
      const auto ray_cam = s.cam.unproject({static_cast<double>(u), static_cast<double>(v)}, 1.0);
      if (!std::isfinite(ray_cam.x)) continue;
      const auto ray_world = pose.apply(ray_cam);
      const Vec3 dir = normalized(Vec3{ray_world.x, ray_world.y, ray_world.z} - origin);
      const double forward_cos = dot(dir, forward);
      const double t_max = c.max_depth / forward_cos;

      double t = 0.0;
      double g = s.field(origin);
      bool hit = false;
      double t_prev = 0.0;
      while (t < t_max) {
        t_prev = t;
        t += std::max(-g / s.lipschitz, 1e-3);
        g = s.field(origin + t * dir);
        if (g >= 0.0) {
          hit = true;
          break;
        }
      }
      if (!hit) {
        for (int ch = 0; ch < 3; ++ch) rgb_acc[ch][v][u] = 0.0f;
        continue;
      }
      double lo = t_prev, hi = t;
      for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        (s.field(origin + mid * dir) >= 0.0 ? hi : lo) = mid;
      }
      const double t_hit = 0.5 * (lo + hi);
      const double z_depth = t_hit * forward_cos;
      if (z_depth > c.max_depth) continue;
      const Vec3 point = origin + t_hit * dir;
      const Vec3 normal = normalized(s.field_gradient(point));
      const double cosine = std::max(0.0, dot(normal, dir));
      const auto alb = s.albedo(point);
      const double irradiance = c.light_gain * cosine / std::pow(t_hit, c.light_falloff) + c.ambient;
      depth_acc[0][v][u] = static_cast<float>(z_depth);
      for (int ch = 0; ch < 3; ++ch) {
        const double value = std::clamp(alb[ch] * irradiance, 0.0, 1.0);
        rgb_acc[ch][v][u] = static_cast<float>(std::round(value * 255.0) / 255.0);
      }
    }
  }

  Frame out;
  out.rgb = rgb;
  out.depth = depth;
  out.lumen = lumen_gt_from_depth(depth).labels;
  out.pose = pose;
  out.index = frame;
  return out;
}

Sequence generate_tube_sequence(const TubeConfig& config, uint64_t seed) {
  TubeRenderer renderer(config, seed);
  Sequence seq{renderer.camera(), {}};
  seq.frames.reserve(config.frames);
  for (int f = 0; f < config.frames; ++f) seq.frames.push_back(renderer.render(f));
  return seq;
}

// ---------------------------------------------------------------------------
// Lumen labels

LumenLabels lumen_gt_from_depth(const torch::Tensor& depth, double percentile) {
  auto map = depth.dim() == 3 ? depth.squeeze(0) : depth;
  if (map.dim() != 2) throw std::invalid_argument("lumen_gt_from_depth: expected [H, W] or [1, H, W] depth");
  auto threshold = losses::masked_percentile(map, torch::ones_like(map), percentile);
  auto labels = (map >= threshold).to(torch::kLong);
  const bool degenerate = labels.sum().item<int64_t>() == labels.numel();
  return {labels, degenerate};
}

// ---------------------------------------------------------------------------
// Dataset I/O

namespace {

std::string frame_name(int64_t index) { return fmt::format("{:06d}.png", index); }

void write_png(const fs::path& path, const cv::Mat& image) {
  if (!cv::imwrite(path.string(), image)) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
}

cv::Mat rgb_to_mat(const torch::Tensor& rgb) {
  auto bytes = (rgb.detach().to(torch::kFloat64).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8);
  auto hwc = bytes.permute({1, 2, 0}).contiguous();
  cv::Mat mat(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3, hwc.data_ptr<uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(mat, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

cv::Mat depth_to_mat(const torch::Tensor& depth, double max_depth) {
  auto code = (depth.detach().to(torch::kFloat64).squeeze(0) / max_depth * kDepthCodeMax)
                  .round()
                  .clamp(0.0, kDepthCodeMax)
                  .to(torch::kInt32)
                  .contiguous();
  cv::Mat mat(static_cast<int>(code.size(0)), static_cast<int>(code.size(1)), CV_32SC1, code.data_ptr<int32_t>());
  cv::Mat out;
  mat.convertTo(out, CV_16UC1);
  return out;
}

cv::Mat labels_to_mat(const torch::Tensor& labels) {
  auto bytes = labels.detach().to(torch::kUInt8).contiguous();
  return cv::Mat(static_cast<int>(bytes.size(0)), static_cast<int>(bytes.size(1)), CV_8UC1, bytes.data_ptr<uint8_t>())
      .clone();
}

cv::Mat read_png(const fs::path& path, int flags, int expected_type, const std::string& what) {
  cv::Mat mat = cv::imread(path.string(), flags);
  if (mat.empty()) throw std::runtime_error(fmt::format("{}: cannot decode '{}'", what, path.string()));
  if (mat.type() != expected_type) {
    throw std::runtime_error(fmt::format("{}: '{}' has unexpected pixel format", what, path.string()));
  }
  return mat;
}

torch::Tensor rgb_from_mat(const cv::Mat& bgr) {
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8)
      .permute({2, 0, 1})
      .to(torch::kFloat32)
      .div(255.0)
      .contiguous();
}

torch::Tensor depth_from_mat(const cv::Mat& code, double max_depth) {
  cv::Mat d32;
  code.convertTo(d32, CV_32SC1);
  return (torch::from_blob(d32.data, {1, d32.rows, d32.cols}, torch::kInt32).to(torch::kFloat64) *
          (max_depth / kDepthCodeMax))
      .to(torch::kFloat32);
}

torch::Tensor labels_from_mat(const cv::Mat& l) {
  return torch::from_blob(l.data, {l.rows, l.cols}, torch::kUInt8).to(torch::kLong);
}

}  // namespace

void write_rgb_png(const fs::path& path, const torch::Tensor& rgb) { write_png(path, rgb_to_mat(rgb)); }

torch::Tensor read_rgb_png(const fs::path& path) {
  return rgb_from_mat(read_png(path, cv::IMREAD_COLOR, CV_8UC3, "image"));
}

void write_depth_png(const fs::path& path, const torch::Tensor& depth, double max_depth) {
  write_png(path, depth_to_mat(depth.dim() == 2 ? depth.unsqueeze(0) : depth, max_depth));
}

torch::Tensor read_depth_png(const fs::path& path, double max_depth) {
  return depth_from_mat(read_png(path, cv::IMREAD_ANYDEPTH, CV_16UC1, "depth"), max_depth);
}

void write_label_png(const fs::path& path, const torch::Tensor& labels) { write_png(path, labels_to_mat(labels)); }

torch::Tensor read_label_png(const fs::path& path) {
  return labels_from_mat(read_png(path, cv::IMREAD_GRAYSCALE, CV_8UC1, "labels"));
}

void prepare_dataset_dir(const fs::path& dir, const camera::CameraModel& cam) {
  fs::create_directories(dir / "frames");
  fs::create_directories(dir / "depth");
  fs::create_directories(dir / "lumen");
  cam.save(dir / "camera.txt");
}

void save_frame(const fs::path& dir, const Frame& frame, double max_depth) {
  const auto name = frame_name(frame.index);
  write_png(dir / "frames" / name, rgb_to_mat(frame.rgb));
  if (frame.depth) write_png(dir / "depth" / name, depth_to_mat(*frame.depth, max_depth));
  if (frame.lumen) write_png(dir / "lumen" / name, labels_to_mat(*frame.lumen));
}

void write_poses(const fs::path& dir, const std::vector<geometry::RigidTransform>& poses) {
  std::ofstream out(dir / "poses.txt", std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", (dir / "poses.txt").string()));
  for (const auto& pose : poses) {
    const auto p = pose.to_6dof();
    out << fmt::format("{} {} {} {} {} {}\n", format_double(p[0]), format_double(p[1]), format_double(p[2]),
                       format_double(p[3]), format_double(p[4]), format_double(p[5]));
  }
}

void save_sequence(const fs::path& dir, const Sequence& sequence, double max_depth) {
  prepare_dataset_dir(dir, sequence.camera);
  std::vector<geometry::RigidTransform> poses;
  for (const auto& frame : sequence.frames) {
    save_frame(dir, frame, max_depth);
    if (frame.pose) poses.push_back(*frame.pose);
  }
  if (!poses.empty()) {
    if (poses.size() != sequence.frames.size()) throw std::invalid_argument("either all frames carry a pose or none");
    write_poses(dir, poses);
  }
}

Sequence load_sequence(const fs::path& dir, double max_depth) {
  if (!fs::is_directory(dir)) throw std::runtime_error(fmt::format("dataset directory '{}' not found", dir.string()));
  auto cam = camera::CameraModel::load(dir / "camera.txt");

  std::vector<fs::path> frame_files;
  if (fs::is_directory(dir / "frames")) {
    for (const auto& entry : fs::directory_iterator(dir / "frames")) {
      if (entry.path().extension() == ".png") frame_files.push_back(entry.path());
    }
  }
  std::sort(frame_files.begin(), frame_files.end());
  if (frame_files.empty()) throw std::runtime_error(fmt::format("'{}' contains no frames", dir.string()));

  std::vector<std::array<double, 6>> poses;
  if (fs::exists(dir / "poses.txt")) {
    std::ifstream in(dir / "poses.txt");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream fields(line);
      std::array<double, 6> p{};
      for (auto& x : p) {
        if (!(fields >> x)) throw std::runtime_error(fmt::format("poses.txt: malformed line '{}'", line));
      }
      poses.push_back(p);
    }
    if (poses.size() != frame_files.size()) {
      throw std::runtime_error(
          fmt::format("poses.txt has {} lines for {} frames", poses.size(), frame_files.size()));
    }
  }

  Sequence seq{cam, {}};
  for (std::size_t i = 0; i < frame_files.size(); ++i) {
    const auto& path = frame_files[i];
    const std::string stem = path.stem().string();
    Frame frame;
    try {
      frame.index = std::stoll(stem);
    } catch (const std::exception&) {
      throw std::runtime_error(fmt::format("frame file '{}' is not named by its index", path.string()));
    }
    const std::string what = fmt::format("frame {}", frame.index);

    cv::Mat bgr = read_png(path, cv::IMREAD_COLOR, CV_8UC3, what);
    if (bgr.cols != cam.width() || bgr.rows != cam.height()) {
      throw std::runtime_error(fmt::format("{}: image is {}x{} but camera is {}x{}", what, bgr.cols, bgr.rows,
                                           cam.width(), cam.height()));
    }
    frame.rgb = rgb_from_mat(bgr);

    const auto depth_path = dir / "depth" / path.filename();
    if (fs::exists(depth_path)) {
      frame.depth = depth_from_mat(read_png(depth_path, cv::IMREAD_ANYDEPTH, CV_16UC1, what), max_depth);
    } else {
      log::warn(fmt::format("{}: no depth map at '{}'", what, depth_path.string()));
    }
    const auto lumen_path = dir / "lumen" / path.filename();
    if (fs::exists(lumen_path)) {
      frame.lumen = labels_from_mat(read_png(lumen_path, cv::IMREAD_GRAYSCALE, CV_8UC1, what));
    }
    if (!poses.empty()) frame.pose = geometry::RigidTransform::from_6dof(poses[i]);
    seq.frames.push_back(std::move(frame));
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Batching and augmentation

std::vector<PairIndex> adjacent_pairs(const Sequence& sequence, int stride) {
  if (stride < 1) throw std::invalid_argument("pair stride must be positive");
  std::vector<PairIndex> pairs;
  const int n = static_cast<int>(sequence.frames.size());
  for (int k = 0; k + stride < n; ++k) pairs.push_back({k + stride, k});
  return pairs;
}

PairBatch make_batch(const Sequence& sequence, const std::vector<PairIndex>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("make_batch: empty pair list");
  std::vector<torch::Tensor> trgb, srgb, tlab, slab, tdep, sdep;
  bool labeled = true, with_depth = true;
  for (const auto& p : pairs) {
    const auto& t = sequence.frames.at(p.target);
    const auto& s = sequence.frames.at(p.source);
    trgb.push_back(t.rgb);
    srgb.push_back(s.rgb);
    labeled = labeled && t.lumen && s.lumen;
    with_depth = with_depth && t.depth && s.depth;
    if (labeled) {
      tlab.push_back(*t.lumen);
      slab.push_back(*s.lumen);
    }
    if (with_depth) {
      tdep.push_back(*t.depth);
      sdep.push_back(*s.depth);
    }
  }
  PairBatch batch;
  batch.target_rgb = torch::stack(trgb);
  batch.source_rgb = torch::stack(srgb);
  if (labeled) {
    batch.target_lumen = torch::stack(tlab);
    batch.source_lumen = torch::stack(slab);
  }
  if (with_depth) {
    batch.target_depth = torch::stack(tdep);
    batch.source_depth = torch::stack(sdep);
  }
  return batch;
}

PairBatch augment(const PairBatch& batch, double flip_probability, const camera::CameraModel& cam,
                  std::mt19937_64& rng) {
  if (flip_probability <= 0.0) return batch;
  if (!cam.horizontally_centered()) {
    log::warn(fmt::format("horizontal flip refused: principal point cx={} is off-centre", cam.intrinsics().cx));
    return batch;
  }
  const int64_t n = batch.target_rgb.size(0);
  std::bernoulli_distribution coin(flip_probability);
  std::vector<int64_t> flipped;
  for (int64_t i = 0; i < n; ++i) {
    if (coin(rng)) flipped.push_back(i);
  }
  if (flipped.empty()) return batch;
  auto index = torch::tensor(flipped, torch::kLong);
  auto flip = [&](const torch::Tensor& t) {
    if (!t.defined()) return t;
    auto out = t.clone();
    out.index_copy_(0, index, t.index_select(0, index).flip({-1}));
    return out;
  };
  return {flip(batch.target_rgb), flip(batch.source_rgb),   flip(batch.target_lumen),
          flip(batch.source_lumen), flip(batch.target_depth), flip(batch.source_depth)};
}

}  // namespace softennet::data
