#include "testing.hpp"

#include <cmath>
#include <filesystem>

#include <json.hpp>

#include "softennet/checks.hpp"
#include "softennet/eval.hpp"

using namespace softennet;
using namespace softennet::eval;
namespace fs = std::filesystem;

namespace {

const auto kD = torch::TensorOptions().dtype(torch::kFloat64);

torch::Tensor gt_depth() { return 0.5 + 15.0 * torch::rand({1, 24, 32}, kD); }

void check_perfect(const DepthMetrics& m) {
  CHECK(m.abs_rel == 0.0);
  CHECK(m.sq_rel == 0.0);
  CHECK(m.rmse == 0.0);
  CHECK(m.rmse_log == 0.0);
  CHECK(m.delta1 == 1.0);
  CHECK(m.delta2 == 1.0);
  CHECK(m.delta3 == 1.0);
}

}  // namespace

TEST_CASE("median") {
  CHECK(eval::median(torch::tensor({3.0, 1.0, 2.0})) == 2.0);
  CHECK(eval::median(torch::tensor({4.0, 1.0, 2.0, 3.0})) == 2.5);
  CHECK_THROWS(eval::median(torch::zeros({0})));
}

TEST_CASE("depth metrics closed forms") {
  auto gt = gt_depth();
  check_perfect(depth_metrics(gt, gt));
  check_perfect(depth_metrics(2.0 * gt, gt));

  DepthEvalOptions raw;
  raw.median_align = false;
  auto m = depth_metrics(1.3 * gt, gt, raw);
  // 1.3 g - g rounds differently per pixel, so the mean is 0.3 to rounding.
  CHECK(std::abs(m.abs_rel - 0.3) < 1e-12);
  CHECK(m.delta1 == 0.0);
  CHECK(m.delta2 == 1.0);
  CHECK(m.delta3 == 1.0);
  CHECK(m.delta1 <= m.delta2);
}

TEST_CASE("median alignment removes global scale") {
  auto gt = gt_depth();
  auto pred = gt * (1.0 + 0.2 * torch::randn({1, 24, 32}, kD)).abs().clamp_min(0.1);
  const auto base = depth_metrics(pred, gt);
  for (double s : {0.25, 0.5, 2.0, 8.0}) {
    const auto m = depth_metrics(s * pred, gt);
    CHECK(m.abs_rel == base.abs_rel);
    CHECK(m.rmse == base.rmse);
    CHECK(m.rmse_log == base.rmse_log);
    CHECK(m.delta1 == base.delta1);
  }
  for (double s : {0.3, 1.7, 13.1}) {
    const auto m = depth_metrics(s * pred, gt);
    CHECK(std::abs(m.abs_rel - base.abs_rel) < 1e-12);
    CHECK(std::abs(m.rmse - base.rmse) < 1e-12);
  }
}

TEST_CASE("depth metrics validity and permutation") {
  auto gt = gt_depth();
  auto pred = gt * 1.1;
  auto perm = torch::randperm(gt.numel());
  auto a = depth_metrics(pred, gt);
  auto b = depth_metrics(pred.view({-1}).index({perm}).view_as(pred), gt.view({-1}).index({perm}).view_as(gt));
  CHECK(std::abs(a.abs_rel - b.abs_rel) < 1e-15);

  // Pixels with gt outside (0, max_depth] do not count.
  auto holes = gt.clone();
  holes[0][0][0] = 0.0;
  holes[0][0][1] = 25.0;
  auto bad_pred = pred.clone();
  bad_pred[0][0][0] = 1000.0;
  bad_pred[0][0][1] = 1000.0;
  CHECK(depth_metrics(bad_pred, holes).abs_rel < 0.2);

  CHECK_THROWS(depth_metrics(pred, torch::zeros_like(gt)));
  CHECK_THROWS(depth_metrics(-pred, gt));
  CHECK_THROWS(depth_metrics(pred.slice(2, 1), gt));

  DepthEvalOptions crop;
  crop.border_crop = 2;
  auto edged = pred.clone();
  edged.index_put_({0, 0, torch::indexing::Slice()}, 100.0);
  CHECK(depth_metrics(edged, gt, crop).abs_rel < 1e-12);
}

TEST_CASE("segmentation metrics") {
  auto labels = torch::randint(0, 2, {16, 16});
  auto same = segmentation_metrics(labels, labels, 2);
  CHECK(same.lumen_iou == 1.0);
  CHECK(same.mean_iou == 1.0);

  auto half = torch::zeros({8, 8}, torch::kLong);
  half.slice(1, 4) = 1;
  auto wall = segmentation_metrics(torch::zeros({8, 8}, torch::kLong), half, 2);
  CHECK(wall.lumen_iou == 0.0);
  CHECK(wall.per_class_iou[0] == 0.5);
  CHECK(wall.mean_iou == 0.25);

  // No lumen anywhere: undefined, and left out of the mean.
  auto empty = segmentation_metrics(torch::zeros({4, 4}, torch::kLong), torch::zeros({4, 4}, torch::kLong), 2);
  CHECK(std::isnan(empty.lumen_iou));
  CHECK(empty.mean_iou == 1.0);

  for (int trial = 0; trial < 100; ++trial) {
    const double p = (trial + 1) / 101.0;
    auto pred = (torch::rand({12, 10}) < p).to(torch::kLong);
    auto gt = (torch::rand({12, 10}) < 0.3).to(torch::kLong);
    auto m = segmentation_metrics(pred, gt, 2);
    auto oracle = checks::iou_oracle(pred, gt, 2);
    for (int c = 0; c < 2; ++c) {
      if (std::isnan(oracle[c])) {
        CHECK(std::isnan(m.per_class_iou[c]));
      } else {
        CHECK(m.per_class_iou[c] == oracle[c]);
      }
    }
    auto swapped = segmentation_metrics(gt, pred, 2);
    CHECK(((swapped.lumen_iou == m.lumen_iou) || (std::isnan(swapped.lumen_iou) && std::isnan(m.lumen_iou))));
  }
  CHECK_THROWS(segmentation_metrics(labels, labels.slice(0, 1), 2));
}

TEST_CASE("report") {
  ReportBuilder builder(2);
  for (int i = 0; i < 3; ++i) {
    auto gt = gt_depth();
    auto labels = torch::randint(0, 2, {24, 32});
    builder.add(gt, gt, labels, labels);
  }
  auto r = builder.finish();
  CHECK(r.frames == 3);
  check_perfect(r.depth);
  CHECK(r.lumen_iou == 1.0);
  CHECK(r.mean_iou == 1.0);

  auto table = r.table();
  auto header = table.substr(0, table.find('\n'));
  auto pos = std::string::npos;
  for (const char* name : kReportColumns) {
    auto at = header.find(name);
    CHECK(at != std::string::npos);
    if (pos != std::string::npos) CHECK(at > pos);
    pos = at;
  }
  auto j = nlohmann::ordered_json::parse(r.json());
  CHECK(j["frames"] == 3);
  CHECK(j["metrics"].size() == 9);
  CHECK(j["metrics"].begin().key() == "Abs Rel");
  CHECK(j["metrics"]["δ<1.25"] == 1.0);
  CHECK(j["per_frame"].size() == 3);

  auto dir = fs::temp_directory_path() / "softennet_eval_report";
  write_report(dir, r);
  CHECK(fs::exists(dir / "report.json"));
  CHECK(fs::exists(dir / "report.txt"));
  fs::remove_all(dir);
}

TEST_CASE("frames weigh equally") {
  ReportBuilder builder(2);
  auto gt = gt_depth();
  builder.add(gt, gt, {}, {});
  builder.add(1.5 * gt.slice(2, 0, 4), gt.slice(2, 0, 4), {}, {});
  auto r = builder.finish();
  CHECK(std::abs(r.depth.abs_rel - 0.0) < 1e-12);  // median alignment undoes the scale
  ReportBuilder unaligned(2, {false, 20.0, 0});
  unaligned.add(gt, gt, {}, {});
  unaligned.add(1.5 * gt.slice(2, 0, 4), gt.slice(2, 0, 4), {}, {});
  CHECK(std::abs(unaligned.finish().depth.abs_rel - 0.25) < 1e-12);
}
