#include "testing.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <queue>

#include "softennet/data.hpp"
#include "softennet/geometry.hpp"
#include "softennet/losses.hpp"

using namespace softennet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("softennet_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

data::TubeConfig small_tube(int frames) {
  data::TubeConfig c;
  c.width = 64;
  c.height = 64;
  c.frames = frames;
  return c;
}

// Pixels of `mask` 4-connected to `seed`.
int64_t flood_count(const torch::Tensor& mask, int64_t sy, int64_t sx) {
  auto m = mask.to(torch::kLong).contiguous();
  const int64_t h = m.size(0), w = m.size(1);
  std::vector<char> seen(h * w, 0);
  std::queue<std::pair<int64_t, int64_t>> q;
  q.push({sy, sx});
  seen[sy * w + sx] = 1;
  int64_t n = 0;
  auto acc = m.accessor<int64_t, 2>();
  while (!q.empty()) {
    auto [y, x] = q.front();
    q.pop();
    ++n;
    const int64_t dy[] = {1, -1, 0, 0}, dx[] = {0, 0, 1, -1};
    for (int k = 0; k < 4; ++k) {
      const int64_t ny = y + dy[k], nx = x + dx[k];
      if (ny < 0 || ny >= h || nx < 0 || nx >= w || seen[ny * w + nx] || acc[ny][nx] == 0) continue;
      seen[ny * w + nx] = 1;
      q.push({ny, nx});
    }
  }
  return n;
}

}  // namespace

TEST_CASE("tube config") {
  data::TubeConfig c;
  CHECK_NOTHROW(c.validate());
  auto back = data::TubeConfig::from_text(c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK_THROWS(data::TubeConfig::from_text("width = 64\nbogus = 1\n"));
  c.control_points = {0.0, 0.0, 1.0};
  CHECK_THROWS(c.validate());
  auto cam = data::TubeConfig{}.camera();
  CHECK(cam.horizontally_centered());
}

TEST_CASE("straight tube on axis renders a radially symmetric depth map") {
  auto c = small_tube(1);
  c.control_points = {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  c.camera_offset = 0.0;
  c.roll_amplitude = 0.0;
  c.fold_amplitude = 0.0;
  data::TubeRenderer r(c, 1);
  auto f = r.render(0);
  REQUIRE(f.depth);
  auto d = (*f.depth)[0];
  // Symmetric under both flips and the transpose (square image, cx = cy).
  CHECK((d - d.flip({0})).abs().max().item<float>() < 1e-3);
  CHECK((d - d.flip({1})).abs().max().item<float>() < 1e-3);
  CHECK((d - d.t()).abs().max().item<float>() < 1e-3);
  // Deepest at the centre.
  CHECK(d[31][31].item<float>() >= d.max().item<float>() - 1e-3);
}

TEST_CASE("generator is deterministic") {
  auto c = small_tube(3);
  auto a = data::generate_tube_sequence(c, 7);
  auto b = data::generate_tube_sequence(c, 7);
  auto other = data::generate_tube_sequence(c, 8);
  for (int i = 0; i < 3; ++i) {
    CHECK(torch::equal(a.frames[i].rgb, b.frames[i].rgb));
    CHECK(torch::equal(*a.frames[i].depth, *b.frames[i].depth));
    CHECK(torch::equal(*a.frames[i].lumen, *b.frames[i].lumen));
  }
  CHECK_FALSE(torch::equal(a.frames[0].rgb, other.frames[0].rgb));
  // Frames can be rendered out of order.
  data::TubeRenderer r(c, 7);
  CHECK(torch::equal(r.render(2).rgb, a.frames[2].rgb));
}

TEST_CASE("generated frames are consistent with the warp") {
  auto c = small_tube(4);
  auto seq = data::generate_tube_sequence(c, 3);
  for (int k = 0; k + 1 < 4; ++k) {
    const auto& t = seq.frames[k + 1];
    const auto& s = seq.frames[k];
    auto rel = geometry::relative_pose(*t.pose, *s.pose);
    auto depth = t.depth->unsqueeze(0).to(torch::kFloat64);
    auto warped = geometry::synthesize_target(s.rgb.unsqueeze(0).to(torch::kFloat64), depth,
                                              rel.to_pose(), seq.camera);
    auto residual = (warped.values - t.rgb.unsqueeze(0).to(torch::kFloat64)).abs().mean(1, true);
    auto mean = losses::masked_mean(residual, warped.mask).value.item<double>();
    CHECK(mean < 0.02);

    // A 5 degree rotation error makes the reconstruction worse.
    auto bad = rel.compose(geometry::RigidTransform::from_6dof({0.0, 5.0 * std::numbers::pi / 180.0, 0.0, 0.0, 0.0, 0.0}));
    auto off = geometry::synthesize_target(s.rgb.unsqueeze(0).to(torch::kFloat64), depth, bad.to_pose(), seq.camera);
    auto off_residual = (off.values - t.rgb.unsqueeze(0).to(torch::kFloat64)).abs().mean(1, true);
    CHECK(losses::masked_mean(off_residual, off.mask).value.item<double>() > mean);
  }
}

TEST_CASE("lumen labels from depth") {
  auto ramp = torch::arange(1, 101, torch::kFloat32).view({10, 10});
  auto labels = data::lumen_gt_from_depth(ramp);
  CHECK_FALSE(labels.degenerate);
  // Nearest-rank 95th percentile of 1..100 is 95; depths 95..100 are lumen.
  CHECK(labels.labels.sum().item<int64_t>() == 6);
  CHECK(labels.labels[9][9].item<int64_t>() == 1);
  CHECK(labels.labels[9][3].item<int64_t>() == 0);

  auto flat = data::lumen_gt_from_depth(torch::full({4, 4}, 3.0));
  CHECK(flat.degenerate);
  CHECK(flat.labels.sum().item<int64_t>() == 16);

  auto c = small_tube(2);
  c.control_points = {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  auto f = data::TubeRenderer(c, 2).render(1);
  auto lumen = *f.lumen;
  auto flat_index = f.depth->view({-1}).argmax().item<int64_t>();
  const int64_t y = flat_index / 64, x = flat_index % 64;
  CHECK(lumen[y][x].item<int64_t>() == 1);
  CHECK(flood_count(lumen, y, x) == lumen.sum().item<int64_t>());
}

TEST_CASE("dataset round trip") {
  auto dir = temp_dir("roundtrip");
  auto seq = data::generate_tube_sequence(small_tube(3), 5);
  data::save_sequence(dir, seq);
  CHECK(fs::exists(dir / "camera.txt"));
  CHECK(fs::exists(dir / "poses.txt"));
  CHECK(fs::exists(dir / "frames" / "000000.png"));
  CHECK(fs::exists(dir / "depth" / "000002.png"));
  CHECK(fs::exists(dir / "lumen" / "000001.png"));

  auto back = data::load_sequence(dir);
  REQUIRE(back.frames.size() == 3);
  CHECK(back.camera == seq.camera);
  for (int i = 0; i < 3; ++i) {
    CHECK(torch::equal(back.frames[i].rgb, seq.frames[i].rgb));
    CHECK((*back.frames[i].depth - *seq.frames[i].depth).abs().max().item<float>() <= 20.0 / 2.0 / 65535.0 + 1e-6);
    CHECK(torch::equal(*back.frames[i].lumen, *seq.frames[i].lumen));
    const auto a = back.frames[i].pose->to_6dof();
    const auto b = seq.frames[i].pose->to_6dof();
    for (int k = 0; k < 6; ++k) CHECK(std::abs(a[k] - b[k]) < 1e-12);
  }

  // A missing depth map loads without ground truth for that frame.
  fs::remove(dir / "depth" / "000001.png");
  auto partial = data::load_sequence(dir);
  CHECK_FALSE(partial.frames[1].depth.has_value());
  CHECK(partial.frames[0].depth.has_value());

  auto batch = data::make_batch(partial, data::adjacent_pairs(partial));
  CHECK_FALSE(batch.target_depth.defined());
  CHECK(batch.target_lumen.defined());

  fs::remove(dir / "camera.txt");
  CHECK_THROWS(data::load_sequence(dir));
  fs::remove_all(dir);
}

TEST_CASE("depth codec") {
  auto dir = temp_dir("codec");
  auto depth = torch::tensor({0.0f, 20.0f, 10.0f, 25.0f}).view({1, 2, 2});
  data::write_depth_png(dir / "d.png", depth);
  auto back = data::read_depth_png(dir / "d.png");
  CHECK(back[0][0][1].item<float>() == 20.0f);
  CHECK(back[0][1][1].item<float>() == 20.0f);  // saturates at the top code
  CHECK(std::abs(back[0][1][0].item<float>() - 10.0f) <= 20.0 / 2 / 65535 + 1e-6);

  std::ofstream(dir / "bad.png") << "not an image";
  CHECK_THROWS(data::read_depth_png(dir / "bad.png"));
  fs::remove_all(dir);
}

TEST_CASE("adjacent pairs and batches") {
  auto seq = data::generate_tube_sequence(small_tube(5), 1);
  auto pairs = data::adjacent_pairs(seq);
  REQUIRE(pairs.size() == 4);
  CHECK(pairs[0].target == 1);
  CHECK(pairs[0].source == 0);
  auto strided = data::adjacent_pairs(seq, 2);
  REQUIRE(strided.size() == 3);
  CHECK(strided[2].target == 4);
  CHECK(strided[2].source == 2);

  auto batch = data::make_batch(seq, {pairs[0], pairs[3]});
  CHECK(batch.target_rgb.sizes() == torch::IntArrayRef({2, 3, 64, 64}));
  CHECK(batch.target_lumen.sizes() == torch::IntArrayRef({2, 64, 64}));
  CHECK(torch::equal(batch.source_rgb[1], seq.frames[3].rgb));
}

TEST_CASE("flip augmentation") {
  auto seq = data::generate_tube_sequence(small_tube(3), 1);
  auto batch = data::make_batch(seq, data::adjacent_pairs(seq));
  std::mt19937_64 rng(3);
  auto same = data::augment(batch, 0.0, seq.camera, rng);
  CHECK(torch::equal(same.target_rgb, batch.target_rgb));

  auto once = data::augment(batch, 1.0, seq.camera, rng);
  CHECK(torch::equal(once.target_rgb, batch.target_rgb.flip({-1})));
  CHECK(torch::equal(once.source_lumen, batch.source_lumen.flip({-1})));
  CHECK(torch::equal(once.target_depth, batch.target_depth.flip({-1})));
  auto twice = data::augment(once, 1.0, seq.camera, rng);
  CHECK(torch::equal(twice.target_rgb, batch.target_rgb));
  CHECK(torch::equal(twice.source_depth, batch.source_depth));

  // An off-centre principal point refuses to flip.
  auto k = seq.camera.intrinsics();
  k.cx += 3.0;
  auto skewed = camera::CameraModel::pinhole(k);
  auto refused = data::augment(batch, 1.0, skewed, rng);
  CHECK(torch::equal(refused.target_rgb, batch.target_rgb));
}
