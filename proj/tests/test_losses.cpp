#include "testing.hpp"

#include <cmath>

#include "softennet/checks.hpp"
#include "softennet/losses.hpp"

using namespace softennet;
using namespace softennet::losses;

namespace {

const auto kD = torch::TensorOptions().dtype(torch::kFloat64);

double item(const torch::Tensor& t) { return t.item<double>(); }

}  // namespace

TEST_CASE("SSIM") {
  auto a = torch::rand({2, 3, 8, 9}, kD);
  CHECK((ssim_map(a, a) - 1.0).abs().max().item<double>() < 1e-12);

  auto flat = torch::full({1, 1, 5, 5}, 0.5, kD);
  double previous = 1.0;
  for (double offset : {0.1, 0.2, 0.4}) {
    const double s = item(ssim_map(flat, flat + offset).mean());
    CHECK(s < previous);
    previous = s;
  }

  auto b = torch::rand({2, 3, 8, 9}, kD);
  auto map = ssim_map(a, b);
  CHECK(map.abs().max().item<double>() <= 1.0);
  CHECK((map - checks::ssim_oracle(a, b)).abs().max().item<double>() < 1e-12);
}

TEST_CASE("photometric cost and loss") {
  auto t = torch::rand({1, 3, 6, 7}, kD);
  auto v = (torch::rand({1, 1, 6, 7}, kD) > 0.5).to(torch::kFloat64);
  CHECK(item(photometric_loss(photometric_cost(t, t, 0.85), v).value) == 0.0);

  // eta = 1 leaves only the structural term.
  auto base = torch::full({1, 1, 6, 7}, 0.5, kD);
  auto n1 = base + 0.05 * torch::randn({1, 1, 6, 7}, kD);
  auto n2 = base + 0.05 * torch::randn({1, 1, 6, 7}, kD);
  auto expected = (1.0 - checks::ssim_oracle(n1, n2)) / 2.0;
  CHECK((photometric_cost(n1, n2, 1.0) - expected).abs().max().item<double>() < 1e-12);

  auto l1 = photometric_cost(t, t + 0.25, 0.0);
  CHECK((l1 - 0.25).abs().max().item<double>() < 1e-12);

  auto empty = photometric_loss(l1, torch::zeros_like(v));
  CHECK(empty.empty);
  CHECK(item(empty.value) == 0.0);
}

TEST_CASE("validity mask") {
  auto target = torch::rand({1, 3, 8, 8}, kD);
  auto source = torch::rand({1, 3, 8, 8}, kD);
  auto ego = (torch::rand({1, 1, 8, 8}, kD) > 0.2).to(torch::kFloat64);

  // Perfect reconstruction keeps every in-view pixel where the frames differ.
  CHECK(torch::equal(validity_mask(target, target, source, ego), ego));
  // Static pixels (source equals target) fail the strict inequality.
  CHECK(torch::all(validity_mask(target, target, target, ego) == 0).item<bool>());

  // A specular blob pasted identically into both frames is static; the moving
  // texture around it is kept.
  auto src = torch::rand({1, 3, 16, 16}, kD);
  auto tgt = torch::roll(src, {1}, {3});
  auto recon = tgt + 0.01 * torch::randn_like(tgt);
  for (auto* img : {&src, &tgt, &recon}) img->index_put_({0, torch::indexing::Slice(), torch::indexing::Slice(5, 9), torch::indexing::Slice(5, 9)}, 1.0);
  auto ones = torch::ones({1, 1, 16, 16}, kD);
  auto v = validity_mask(tgt, recon, src, ones);
  auto blob = v.index({0, 0, torch::indexing::Slice(5, 9), torch::indexing::Slice(5, 9)});
  CHECK(torch::all(blob == 0).item<bool>());
  CHECK(item(v.sum()) > 0.9 * (256 - 16));
}

TEST_CASE("percentile clipping") {
  auto costs = torch::arange(1, 101, kD).view({1, 1, 10, 10});
  auto ones = torch::ones_like(costs);
  CHECK(torch::equal(clip_outliers(costs, ones, 100.0), costs));
  auto clipped = clip_outliers(costs, ones, 95.0);
  CHECK(item(clipped.max()) == 95.0);
  CHECK(item((clipped == 95.0).sum()) == 6.0);
  CHECK(torch::equal(clipped.slice(2, 0, 9), costs.slice(2, 0, 9)));

  for (int trial = 0; trial < 20; ++trial) {
    auto c = torch::rand({2, 1, 7, 9}, kD);
    auto m = (torch::rand({2, 1, 7, 9}, kD) > 0.3).to(torch::kFloat64);
    const double p = 50.0 + 49.0 * torch::rand({1}, kD).item<double>();
    CHECK(torch::equal(clip_outliers(c, m, p), checks::clip_oracle(c, m, p)));
  }
  CHECK(torch::equal(clip_outliers(costs, torch::zeros_like(costs), 95.0), costs));
  CHECK_THROWS(masked_percentile(costs, ones, 0.0));
}

TEST_CASE("depth consistency") {
  auto v = torch::ones({1, 1, 3, 3}, kD);
  auto same = depth_consistency(torch::full({1, 1, 3, 3}, 2.0, kD), torch::full({1, 1, 3, 3}, 2.0, kD), v);
  CHECK(item(same.loss) == 0.0);
  auto three_one = depth_consistency(torch::full({1, 1, 3, 3}, 3.0, kD), torch::ones({1, 1, 3, 3}, kD), v);
  CHECK(item(three_one.dc.max()) == 0.5);
  CHECK(item(three_one.loss) == 0.5);
  CHECK_FALSE(three_one.degenerate);

  auto zero = depth_consistency(torch::zeros({1, 1, 3, 3}, kD), torch::zeros({1, 1, 3, 3}, kD), v);
  CHECK(zero.degenerate);
  CHECK(std::isfinite(item(zero.loss)));
}

TEST_CASE("occlusion reweighting") {
  auto cost = torch::rand({2, 1, 5, 5}, kD);
  auto v = (torch::rand({2, 1, 5, 5}, kD) > 0.4).to(torch::kFloat64);
  CHECK(item(occlusion_reweight(cost, torch::zeros_like(cost), v).value) ==
        item(photometric_loss(cost, v).value));
  CHECK(item(occlusion_reweight(cost, torch::ones_like(cost), v).value) == 0.0);
  auto dc = torch::rand({2, 1, 5, 5}, kD);
  CHECK(std::abs(item(occlusion_reweight(cost, dc, v).value) - checks::occlusion_reweight_oracle(cost, dc, v)) <
        1e-14);
}

TEST_CASE("edge-aware smoothness") {
  auto image = torch::rand({1, 3, 8, 8}, kD);
  CHECK(item(edge_smoothness(image, torch::full({1, 1, 8, 8}, 3.0, kD))) == 0.0);

  // Inverse depth ramp 1 + 0.1 x has mean 1.35 over 8 columns.
  auto inverse = 1.0 + 0.1 * torch::arange(8, kD).view({1, 1, 1, 8}).expand({1, 1, 8, 8});
  auto flat = torch::full({1, 3, 8, 8}, 0.4, kD);
  CHECK(std::abs(item(edge_smoothness(flat, 1.0 / inverse)) - 0.1 / 1.35) < 1e-12);

  // A depth step is cheaper where the image has an edge too.
  auto depth = torch::full({1, 1, 8, 8}, 2.0, kD);
  depth.index_put_({0, 0, torch::indexing::Slice(), torch::indexing::Slice(4, 8)}, 6.0);
  auto edge = flat.clone();
  edge.index_put_({0, torch::indexing::Slice(), torch::indexing::Slice(), torch::indexing::Slice(4, 8)}, 0.9);
  CHECK(item(edge_smoothness(edge, depth)) < item(edge_smoothness(flat, depth)));
}

TEST_CASE("total depth loss") {
  LossWeights w;
  auto zero = torch::zeros({}, kD);
  auto one = torch::ones({}, kD);
  CHECK(item(total_depth_loss({{zero, zero, zero, zero}}, w)) == 0.0);
  CHECK(std::abs(item(total_depth_loss({{one, one, one, one}}, w)) - 1.501) < 1e-15);
  ScaleTerms t{torch::full({}, 0.3, kD), torch::full({}, 0.2, kD), torch::full({}, 0.1, kD),
               torch::full({}, 0.7, kD)};
  CHECK(item(total_depth_loss({t, t, t, t}, w)) == item(total_depth_loss({t}, w)));
  CHECK_THROWS(total_depth_loss({}, w));
}

TEST_CASE("lumen cross-entropy") {
  auto labels = one_hot(torch::randint(0, 2, {2, 4, 5}), 2, torch::kFloat64);
  CHECK(item(lumen_loss(labels, labels, labels, labels)) < 1e-6);

  auto uniform = torch::full({2, 2, 4, 5}, 0.5, kD);
  CHECK(std::abs(item(lumen_loss(uniform, uniform, labels, labels)) - 2.0 * std::log(2.0)) < 1e-12);

  auto pt = torch::softmax(torch::randn({2, 2, 4, 5}, kD), 1);
  auto ps = torch::softmax(torch::randn({2, 2, 4, 5}, kD), 1);
  auto ls = one_hot(torch::randint(0, 2, {2, 4, 5}), 2, torch::kFloat64);
  CHECK(std::abs(item(lumen_loss(pt, ps, labels, ls)) - checks::lumen_loss_oracle(pt, ps, labels, ls)) < 1e-12);

  CHECK_THROWS(lumen_loss(pt, ps, one_hot(torch::zeros({2, 4, 5}, torch::kLong), 3, torch::kFloat64), ls));
  CHECK_THROWS(losses::one_hot(torch::full({1, 2, 2}, 2, torch::kLong), 2));
}

TEST_CASE("task weighting") {
  TaskUncertainty u;
  CHECK(std::abs(item(u->gamma_depth()) - 1.0) < 1e-15);
  CHECK(std::abs(item(u->gamma_lumen()) - 1.0) < 1e-15);

  auto ld = torch::full({}, 0.8, kD), ll = torch::full({}, 0.3, kD);
  CHECK(std::abs(item(multitask_loss(ld, ll, u->gamma_depth(), u->gamma_lumen())) -
                 ((0.8 + 0.3) / 2.0 + 2.0 * std::log(2.0))) < 1e-12);

  // The minimising gamma solves g^3 / (1 + g) = L.
  for (double loss : {0.05, 0.4, 2.0}) {
    auto raw = torch::full({}, 0.0, kD).requires_grad_(true);
    torch::optim::SGD opt({raw}, torch::optim::SGDOptions(0.5));
    for (int i = 0; i < 5000; ++i) {
      opt.zero_grad();
      auto g = torch::nn::functional::softplus(raw);
      auto l = multitask_loss(torch::full({}, loss, kD), torch::zeros({}, kD), g, torch::ones({}, kD));
      l.backward();
      opt.step();
    }
    const double g = item(torch::nn::functional::softplus(raw));
    const double grid = checks::gamma_grid_oracle(loss);
    CHECK(std::abs(g - grid) < 1e-4);
    CHECK(std::abs(g * g * g / (1.0 + g) - loss) < 1e-4);
  }

  CHECK(item(fixed_weight_loss(torch::full({}, 2.0, kD), torch::full({}, 3.0, kD), 1, 1)) == 5.0);
  CHECK(item(fixed_weight_loss(torch::full({}, 2.0, kD), torch::full({}, 3.0, kD), 0, 1)) == 3.0);
  CHECK(std::abs(item(fixed_weight_loss(torch::full({}, 2.0, kD), torch::full({}, 3.0, kD), 0.6, 0.4)) - 2.4) <
        1e-15);
  CHECK_THROWS(fixed_weight_loss(ld, ll, -1, 1));
}

TEST_CASE("loss bundle finiteness") {
  LossBundle b;
  b.photometric = {0.1, 0.2};
  CHECK(b.finite());
  b.reweighted = {std::nan("")};
  CHECK_FALSE(b.finite());
}

TEST_CASE("loss weights validation") {
  LossWeights w;
  CHECK_NOTHROW(w.validate());
  w.eta = 1.5;
  CHECK_THROWS(w.validate());
  w = {};
  w.clip_percentile = 0.0;
  CHECK_THROWS(w.validate());
}
