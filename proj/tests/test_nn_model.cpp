#include "testing.hpp"

#include <cmath>

#include "softennet/checks.hpp"
#include "softennet/geometry.hpp"
#include "softennet/model.hpp"
#include "softennet/nn.hpp"

using namespace softennet;
namespace F = torch::nn::functional;

namespace {

const auto kD = torch::TensorOptions().dtype(torch::kFloat64);

}  // namespace

TEST_CASE("PAC") {
  torch::manual_seed(1);
  auto x = torch::randn({2, 3, 4, 4}, kD);
  auto w = torch::randn({2, 3, 3, 3}, kD);
  auto b = torch::randn({2}, kD);
  auto conv = F::conv2d(x, w, F::Conv2dFuncOptions().bias(b).padding(1));

  for (double value : {-3.0, 0.0, 11.0}) {
    auto pac = nn::pac_conv2d(x, torch::full({2, 5, 4, 4}, value, kD), w, b, 1.0);
    CHECK((pac - conv).abs().max().item<double>() < 1e-12);
  }
  // Small alpha approaches the plain convolution for any guidance.
  auto guidance = torch::randn({2, 5, 4, 4}, kD);
  double previous = 1e9;
  for (double alpha : {1e-1, 1e-2, 1e-3, 1e-4}) {
    const double err = (nn::pac_conv2d(x, guidance, w, b, alpha) - conv).abs().max().item<double>();
    CHECK(err < previous);
    previous = err;
  }
  CHECK(previous < 1e-6);

  auto oracle = checks::pac_oracle(x, guidance, w, b, 0.9);
  CHECK((nn::pac_conv2d(x, guidance, w, b, 0.9) - oracle).abs().max().item<double>() < 1e-12);
  CHECK((nn::pac_conv2d(x, guidance, w, {}, 0.9) - checks::pac_oracle(x, guidance, w, {}, 0.9)).abs().max().item<double>() <
        1e-12);

  CHECK_THROWS(nn::pac_conv2d(x, guidance, torch::randn({2, 3, 2, 2}, kD), b, 1.0));
  CHECK_THROWS(nn::pac_conv2d(x, guidance.slice(2, 0, 3), w, b, 1.0));
}

TEST_CASE("PAC suite") {
  for (const auto& r : checks::pac_suite(2)) {
    INFO(r.name << ": " << r.value);
    CHECK(r.pass);
  }
}

TEST_CASE("TFG layer") {
  nn::TfgLayer tfg(3, 2);
  tfg->to(torch::kFloat64);
  auto task = torch::randn({1, 3, 5, 5}, kD);
  auto constant = torch::full({1, 2, 5, 5}, 0.3, kD);
  // Constant guidance: a rectified plain convolution with the layer's own weights.
  auto params = tfg->named_parameters();
  auto weight = params[params.keys()[0]];
  auto bias = params[params.keys()[1]];
  auto expected = torch::relu(F::conv2d(task, weight, F::Conv2dFuncOptions().bias(bias).padding(1)));
  CHECK((tfg->forward(task, constant, 1.0) - expected).abs().max().item<double>() < 1e-12);
  CHECK((tfg->forward(task, torch::randn({1, 2, 5, 5}, kD), 0.7, nn::PathwayKind::conv) - expected)
            .abs()
            .max()
            .item<double>() < 1e-12);

  // All-negative pre-activation gives a zero map.
  {
    torch::NoGradGuard no_grad;
    weight.zero_();
    bias.fill_(-1.0);
  }
  CHECK(torch::all(tfg->forward(task, constant, 1.0) == 0).item<bool>());
}

TEST_CASE("convolution blocks") {
  nn::ConvBlock block(4, 6);
  auto y = block->forward(torch::randn({2, 4, 8, 8}));
  CHECK(y.sizes() == torch::IntArrayRef({2, 6, 8, 8}));
  CHECK(torch::all(y >= -1.0).item<bool>());  // ELU floor

  auto up = nn::upsample2x(torch::arange(4.0).view({1, 1, 2, 2}));
  CHECK(up.sizes() == torch::IntArrayRef({1, 1, 4, 4}));
  CHECK(up[0][0][1][1].item<double>() == 0.0);
  CHECK(up[0][0][3][3].item<double>() == 3.0);

  nn::BasicBlock res(8, 16, 2);
  CHECK(res->forward(torch::randn({2, 8, 8, 8})).sizes() == torch::IntArrayRef({2, 16, 4, 4}));

  nn::ResNetEncoder enc(16);
  auto pyramid = enc->forward(torch::rand({1, 3, 64, 64}));
  REQUIRE(pyramid.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(pyramid[i].size(2) == (64 >> (i + 1)));
    CHECK(pyramid[i].size(1) == enc->channels()[i]);
  }
}

TEST_CASE("depth network contract") {
  torch::manual_seed(4);
  model::SoftEnNetConfig cfg;
  model::SoftEnNet net(cfg);
  net->eval();
  torch::NoGradGuard no_grad;
  auto image = torch::rand({1, 3, 256, 256});
  auto disparity = net->depth_forward(image, 0.5);
  REQUIRE(disparity.size() == 4);
  for (int s = 0; s < 4; ++s) {
    CHECK(disparity[s].size(2) == (256 >> s));
    CHECK(disparity[s].size(3) == (256 >> s));
    CHECK(torch::all(disparity[s] > 0).item<bool>());
    CHECK(torch::all(disparity[s] < 1).item<bool>());
  }
  auto again = net->depth_forward(image, 0.5);
  for (int s = 0; s < 4; ++s) CHECK(torch::equal(disparity[s], again[s]));

  auto lumen = net->lumen_forward(image, 0.5);
  CHECK(lumen.sizes() == torch::IntArrayRef({1, 2, 256, 256}));
  CHECK((lumen.sum(1) - 1.0).abs().max().item<double>() < 1e-6);

  CHECK_THROWS(net->forward(torch::rand({1, 3, 100, 128}), 1.0));
  CHECK_THROWS(net->forward(torch::rand({1, 1, 64, 64}), 1.0));
}

TEST_CASE("same seed builds identical networks") {
  model::SoftEnNetConfig cfg;
  torch::manual_seed(9);
  model::SoftEnNet a(cfg);
  torch::manual_seed(9);
  model::SoftEnNet b(cfg);
  auto pa = a->parameters(), pb = b->parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(torch::equal(pa[i], pb[i]));
}

TEST_CASE("disparity to depth") {
  auto d = torch::tensor({1e-9, 0.25, 0.5, 1.0}, kD);
  auto depth = model::disparity_to_depth(d, 0.1, 20.0);
  CHECK(std::abs(depth[0].item<double>() - 20.0) < 1e-4);
  CHECK(std::abs(depth[3].item<double>() - 0.1) < 1e-12);
  for (int i = 0; i < 3; ++i) CHECK(depth[i].item<double>() > depth[i + 1].item<double>());
}

TEST_CASE("pose network") {
  torch::manual_seed(5);
  model::SoftEnNet net(model::SoftEnNetConfig{});
  net->eval();
  torch::NoGradGuard no_grad;
  auto pair = torch::rand({3, 6, 64, 64});
  auto pose = net->pose_forward(pair);
  CHECK(pose.sizes() == torch::IntArrayRef({3, 6}));

  net->pose_output_layer()->weight.zero_();
  if (net->pose_output_layer()->bias.defined()) net->pose_output_layer()->bias.zero_();
  auto zero = net->pose_forward(pair);
  CHECK(torch::all(zero == 0).item<bool>());
  auto t = geometry::pose_from_6dof(zero.to(torch::kFloat64));
  CHECK(torch::equal(t.rotation, torch::eye(3, kD).expand({3, 3, 3})));

  // The pose encoder is the depth encoder.
  CHECK(net->pose_encoder().get() == net->depth_encoder().get());
}

TEST_CASE("pathways") {
  torch::manual_seed(6);
  model::SoftEnNetConfig cfg;
  model::SoftEnNet net(cfg);
  net->eval();
  torch::NoGradGuard no_grad;
  auto image = torch::rand({1, 3, 64, 64});

  net->set_pathway_kind(nn::PathwayKind::pac);
  auto tiny = net->forward(image, 1e-4);
  net->set_pathway_kind(nn::PathwayKind::conv);
  auto plain = net->forward(image, 1e-4);
  auto rel = ((tiny.depth[0] - plain.depth[0]).norm() / plain.depth[0].norm()).item<double>();
  CHECK(rel < 1e-3);

  // Pathways actually carry information: at alpha 1 the PAC result differs.
  net->set_pathway_kind(nn::PathwayKind::pac);
  auto full = net->forward(image, 1.0);
  CHECK_FALSE(torch::equal(full.depth[0], plain.depth[0]));

  model::SoftEnNetConfig none = cfg;
  none.pathway_levels.clear();
  CHECK_NOTHROW(model::SoftEnNet(none)->forward(image, 1.0));
  model::SoftEnNetConfig bad = cfg;
  bad.pathway_levels = {7};
  CHECK_THROWS(bad.validate());
}

TEST_CASE("alpha schedule") {
  CHECK(model::pac_alpha_schedule(0) == 1e-4);
  CHECK(model::pac_alpha_schedule(4) == 1e-4);
  CHECK(model::pac_alpha_schedule(5) == 2e-4);
  CHECK(model::pac_alpha_schedule(10) == 4e-4);
  CHECK(model::pac_alpha_schedule(65) < 1.0);
  CHECK(model::pac_alpha_schedule(70) == 1.0);
  CHECK(model::pac_alpha_schedule(500) == 1.0);
  CHECK(model::pac_alpha_schedule(3, 1e-4, 1) == 8e-4);
}

TEST_CASE("model config text") {
  model::SoftEnNetConfig cfg;
  cfg.encoder = model::EncoderSize::standard;
  cfg.pathway_levels = {0, 2};
  cfg.depth_to_lumen = false;
  auto back = model::SoftEnNetConfig::from_text(cfg.to_text());
  CHECK(back.encoder == model::EncoderSize::standard);
  CHECK((back.pathway_levels == std::vector<int>{0, 2}));
  CHECK_FALSE(back.depth_to_lumen);
  CHECK(back.to_text() == cfg.to_text());
}
