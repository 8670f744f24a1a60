#include "softennet/checks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include <fmt/format.h>

#include "softennet/data.hpp"
#include "softennet/losses.hpp"
#include "softennet/model.hpp"
#include "softennet/nn.hpp"
#include "softennet/train.hpp"

namespace softennet::checks {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kGradTolerance = 1e-4;

const auto kDouble = torch::TensorOptions().dtype(torch::kFloat64);

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double relative_difference(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const double scale = std::max({norm(a), norm(b), 1e-300});
  return norm(d) / scale;
}

// Reflect index into [0, n) the way reflection padding does (edge not repeated).
int64_t reflect(int64_t i, int64_t n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

CheckResult grad_result(const std::string& name, const GradCheck& g, double tolerance = kGradTolerance) {
  return {name, g.rel_error < tolerance, g.rel_error, tolerance,
          fmt::format("{} entries, max abs error {:.3g}", g.entries, g.max_abs_error)};
}

torch::Tensor rand_d(std::vector<int64_t> shape) { return torch::rand(shape, kDouble); }

// Random smooth-ish test image in [0.1, 0.9].
torch::Tensor test_image(int64_t b, int64_t c, int64_t h, int64_t w) {
  auto coarse = torch::rand({b, c, (h + 1) / 2, (w + 1) / 2}, kDouble);
  auto up = torch::nn::functional::interpolate(
      coarse, torch::nn::functional::InterpolateFuncOptions().size(std::vector<int64_t>{h, w}).mode(torch::kBilinear).align_corners(false));
  return 0.1 + 0.8 * (0.7 * up + 0.3 * torch::rand({b, c, h, w}, kDouble));
}

camera::CameraModel small_pinhole(int w, int h) {
  return camera::CameraModel::pinhole({0.6 * w, 0.6 * w, (w - 1) / 2.0, (h - 1) / 2.0, w, h});
}

camera::CameraModel small_ds(int w, int h) {
  return camera::CameraModel::double_sphere({0.35 * w, 0.35 * w, (w - 1) / 2.0, (h - 1) / 2.0, w, h}, {-0.2, 0.6});
}

}  // namespace

// ---------------------------------------------------------------------------

GradCheck check_gradients(const ScalarFn& f, const std::vector<torch::Tensor>& inputs, double step,
                          int64_t max_entries, uint64_t seed, const SkipFn& skip) {
  std::vector<torch::Tensor> xs;
  for (const auto& in : inputs) {
    if (in.scalar_type() != torch::kFloat64) throw std::invalid_argument("check_gradients: inputs must be double");
    xs.push_back(in.detach().clone().contiguous().requires_grad_(true));
  }
  auto out = f(xs);
  if (out.numel() != 1) throw std::invalid_argument("check_gradients: function must return a scalar");
  std::vector<torch::Tensor> grads = torch::autograd::grad({out}, xs, {}, false, false, true);

  std::vector<std::pair<std::size_t, int64_t>> entries;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (int64_t k = 0; k < xs[i].numel(); ++k) {
      if (!skip || !skip(i, k)) entries.emplace_back(i, k);
    }
  }
  if (max_entries > 0 && static_cast<int64_t>(entries.size()) > max_entries) {
    std::mt19937_64 rng(seed);
    std::shuffle(entries.begin(), entries.end(), rng);
    entries.resize(static_cast<std::size_t>(max_entries));
  }

  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> plain;
  for (const auto& x : xs) plain.push_back(x.detach().clone());
  std::vector<double> fd, an;
  GradCheck result;
  for (const auto& [i, k] : entries) {
    double* p = plain[i].data_ptr<double>() + k;
    const double saved = *p;
    *p = saved + step;
    const double up = f(plain).item<double>();
    *p = saved - step;
    const double down = f(plain).item<double>();
    *p = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double analytic = grads[i].defined() ? grads[i].contiguous().data_ptr<double>()[k] : 0.0;
    fd.push_back(numeric);
    an.push_back(analytic);
    result.max_abs_error = std::max(result.max_abs_error, std::abs(numeric - analytic));
  }
  result.entries = static_cast<int64_t>(fd.size());
  result.rel_error = fd.empty() ? 0.0 : relative_difference(fd, an);
  return result;
}

// ---------------------------------------------------------------------------

torch::Tensor ssim_oracle(const torch::Tensor& a_in, const torch::Tensor& b_in) {
  auto a = a_in.detach().to(torch::kFloat64).contiguous();
  auto b = b_in.detach().to(torch::kFloat64).contiguous();
  const int64_t B = a.size(0), C = a.size(1), H = a.size(2), W = a.size(3);
  auto out = torch::empty({B, C, H, W}, kDouble);
  auto A = a.accessor<double, 4>();
  auto Bt = b.accessor<double, 4>();
  auto O = out.accessor<double, 4>();
  for (int64_t n = 0; n < B; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
          double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const double va = A[n][c][reflect(y + dy, H)][reflect(x + dx, W)];
              const double vb = Bt[n][c][reflect(y + dy, H)][reflect(x + dx, W)];
              sa += va;
              sb += vb;
              saa += va * va;
              sbb += vb * vb;
              sab += va * vb;
            }
          const double ma = sa / 9, mb = sb / 9;
          const double va = saa / 9 - ma * ma, vb = sbb / 9 - mb * mb, cov = sab / 9 - ma * mb;
          O[n][c][y][x] = (2 * ma * mb + losses::kSsimC1) * (2 * cov + losses::kSsimC2) /
                          ((ma * ma + mb * mb + losses::kSsimC1) * (va + vb + losses::kSsimC2));
        }
  return out;
}

torch::Tensor pac_oracle(const torch::Tensor& x_in, const torch::Tensor& g_in, const torch::Tensor& w_in,
                         const torch::Tensor& b_in, double alpha) {
  auto x = x_in.detach().to(torch::kFloat64).contiguous();
  auto g = g_in.detach().to(torch::kFloat64).contiguous();
  auto w = w_in.detach().to(torch::kFloat64).contiguous();
  const int64_t B = x.size(0), Cin = x.size(1), H = x.size(2), W = x.size(3);
  const int64_t Cf = g.size(1), Cout = w.size(0), k = w.size(2), r = (k - 1) / 2;
  auto out = torch::zeros({B, Cout, H, W}, kDouble);
  auto X = x.accessor<double, 4>();
  auto G = g.accessor<double, 4>();
  auto Wt = w.accessor<double, 4>();
  auto O = out.accessor<double, 4>();
  std::vector<double> bias(Cout, 0.0);
  if (b_in.defined()) {
    auto b = b_in.detach().to(torch::kFloat64).contiguous();
    for (int64_t o = 0; o < Cout; ++o) bias[o] = b.data_ptr<double>()[o];
  }
  for (int64_t n = 0; n < B; ++n)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t xx = 0; xx < W; ++xx)
        for (int64_t o = 0; o < Cout; ++o) {
          double acc = bias[o];
          for (int64_t dy = -r; dy <= r; ++dy)
            for (int64_t dx = -r; dx <= r; ++dx) {
              const int64_t yy = y + dy, xj = xx + dx;
              // Zero padding pads both the input and the guidance.
              double d2 = 0.0;
              for (int64_t f = 0; f < Cf; ++f) {
                const double gj = (yy >= 0 && yy < H && xj >= 0 && xj < W) ? G[n][f][yy][xj] : 0.0;
                const double diff = alpha * (gj - G[n][f][y][xx]);
                d2 += diff * diff;
              }
              if (yy < 0 || yy >= H || xj < 0 || xj >= W) continue;
              const double kernel = std::exp(-0.5 * d2);
              for (int64_t c = 0; c < Cin; ++c) acc += kernel * Wt[o][c][dy + r][dx + r] * X[n][c][yy][xj];
            }
          O[n][o][y][xx] = acc;
        }
  return out;
}

WarpOracle warp_oracle(const torch::Tensor& source_in, const torch::Tensor& depth_in,
                       const std::vector<geometry::RigidTransform>& target_to_source,
                       const camera::CameraModel& cam) {
  auto src = source_in.detach().to(torch::kFloat64).contiguous();
  auto depth = depth_in.detach().to(torch::kFloat64).contiguous();
  const int64_t B = src.size(0), C = src.size(1), H = src.size(2), W = src.size(3);
  WarpOracle out{torch::zeros({B, C, H, W}, kDouble), torch::zeros({B, 1, H, W}, kDouble)};
  auto S = src.accessor<double, 4>();
  auto D = depth.accessor<double, 4>();
  auto V = out.values.accessor<double, 4>();
  auto M = out.mask.accessor<double, 4>();
  for (int64_t n = 0; n < B; ++n)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        const auto p = cam.unproject({static_cast<double>(x), static_cast<double>(y)}, D[n][0][y][x]);
        if (!std::isfinite(p.x) || !std::isfinite(p.y)) continue;
        const auto proj = cam.project(target_to_source[n].apply(p));
        if (!proj.valid) continue;
        const double u = proj.pixel.u, v = proj.pixel.v;
        if (!(u >= 0 && u <= W - 1 && v >= 0 && v <= H - 1)) continue;
        const auto u0 = static_cast<int64_t>(std::floor(u)), v0 = static_cast<int64_t>(std::floor(v));
        const int64_t u1 = std::min(u0 + 1, W - 1), v1 = std::min(v0 + 1, H - 1);
        const double a = u - u0, b = v - v0;
        for (int64_t c = 0; c < C; ++c) {
          V[n][c][y][x] = (1 - b) * ((1 - a) * S[n][c][v0][u0] + a * S[n][c][v0][u1]) +
                          b * ((1 - a) * S[n][c][v1][u0] + a * S[n][c][v1][u1]);
        }
        M[n][0][y][x] = 1.0;
      }
  return out;
}

double percentile_oracle(std::vector<double> values, double percentile) {
  if (values.empty()) return kNaN;
  std::sort(values.begin(), values.end());
  // Smallest value with at least p% of the samples at or below it.
  const auto n = values.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (100.0 * static_cast<double>(i + 1) >= percentile * static_cast<double>(n)) return values[i];
  }
  return values.back();
}

torch::Tensor clip_oracle(const torch::Tensor& cost, const torch::Tensor& mask, double percentile) {
  auto c = cost.detach().to(torch::kFloat64).contiguous().reshape({-1});
  auto m = mask.detach().to(torch::kFloat64).expand_as(cost).contiguous().reshape({-1});
  std::vector<double> selected;
  for (int64_t i = 0; i < c.numel(); ++i) {
    if (m[i].item<double>() > 0.5) selected.push_back(c[i].item<double>());
  }
  if (selected.empty()) return cost.detach().to(torch::kFloat64).clone();
  const double theta = percentile_oracle(selected, percentile);
  auto out = c.clone();
  for (int64_t i = 0; i < out.numel(); ++i) {
    double* p = out.data_ptr<double>() + i;
    *p = std::min(*p, theta);
  }
  return out.view(cost.sizes());
}

std::vector<double> iou_oracle(const torch::Tensor& pred_in, const torch::Tensor& gt_in, int num_classes) {
  auto pred = pred_in.to(torch::kLong).contiguous().reshape({-1});
  auto gt = gt_in.to(torch::kLong).contiguous().reshape({-1});
  std::vector<std::vector<int64_t>> confusion(num_classes, std::vector<int64_t>(num_classes, 0));
  const int64_t* p = pred.data_ptr<int64_t>();
  const int64_t* g = gt.data_ptr<int64_t>();
  for (int64_t i = 0; i < pred.numel(); ++i) ++confusion[g[i]][p[i]];
  std::vector<double> iou(num_classes);
  for (int c = 0; c < num_classes; ++c) {
    int64_t row = 0, col = 0;
    for (int k = 0; k < num_classes; ++k) {
      row += confusion[c][k];
      col += confusion[k][c];
    }
    const int64_t tp = confusion[c][c];
    const int64_t uni = row + col - tp;
    iou[c] = uni > 0 ? static_cast<double>(tp) / static_cast<double>(uni) : kNaN;
  }
  return iou;
}

camera::Point3 unproject_by_root_finding(const camera::CameraModel& cam, const camera::Pixel& pixel, double depth) {
  const auto& k = cam.intrinsics();
  // Start from the pinhole guess and refine (x, y) at fixed z by Newton steps
  // with a finite-difference Jacobian.
  double x = (pixel.u - k.cx) / k.fx * depth;
  double y = (pixel.v - k.cy) / k.fy * depth;
  auto residual = [&](double px, double py, double& ru, double& rv) {
    const auto pr = cam.project({px, py, depth});
    if (!pr.valid) return false;
    ru = pr.pixel.u - pixel.u;
    rv = pr.pixel.v - pixel.v;
    return true;
  };
  for (int iter = 0; iter < 100; ++iter) {
    double ru, rv;
    if (!residual(x, y, ru, rv)) break;
    if (std::hypot(ru, rv) < 1e-12) return {x, y, depth};
    const double h = 1e-7 * std::max(1.0, std::hypot(x, y, depth));
    double a1, b1, a2, b2, a3, b3, a4, b4;
    if (!residual(x + h, y, a1, b1) || !residual(x - h, y, a2, b2) || !residual(x, y + h, a3, b3) ||
        !residual(x, y - h, a4, b4)) {
      break;
    }
    const double j11 = (a1 - a2) / (2 * h), j21 = (b1 - b2) / (2 * h);
    const double j12 = (a3 - a4) / (2 * h), j22 = (b3 - b4) / (2 * h);
    const double det = j11 * j22 - j12 * j21;
    if (!(std::abs(det) > 0)) break;
    double dx = (j22 * ru - j12 * rv) / det;
    double dy = (-j21 * ru + j11 * rv) / det;
    // Halve the step until the residual shrinks.
    const double r0 = std::hypot(ru, rv);
    for (int halving = 0; halving < 30; ++halving) {
      double nu, nv;
      if (residual(x - dx, y - dy, nu, nv) && std::hypot(nu, nv) < r0) break;
      dx *= 0.5;
      dy *= 0.5;
    }
    x -= dx;
    y -= dy;
  }
  double ru, rv;
  if (residual(x, y, ru, rv) && std::hypot(ru, rv) < 1e-9) return {x, y, depth};
  return {kNaN, kNaN, kNaN};
}

double lumen_loss_oracle(const torch::Tensor& tp, const torch::Tensor& sp, const torch::Tensor& tl,
                         const torch::Tensor& sl) {
  auto frame = [](const torch::Tensor& post_in, const torch::Tensor& lab_in) {
    auto post = post_in.detach().to(torch::kFloat64).contiguous();
    auto lab = lab_in.detach().to(torch::kFloat64).contiguous();
    auto P = post.accessor<double, 4>();
    auto L = lab.accessor<double, 4>();
    const int64_t B = post.size(0), C = post.size(1), H = post.size(2), W = post.size(3);
    double total = 0.0;
    for (int64_t n = 0; n < B; ++n)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
          for (int64_t c = 0; c < C; ++c) {
            total -= L[n][c][y][x] * std::log(std::max(P[n][c][y][x], losses::kPosteriorFloor));
          }
    return total / static_cast<double>(B * H * W);
  };
  return frame(tp, tl) + frame(sp, sl);
}

double occlusion_reweight_oracle(const torch::Tensor& cost_in, const torch::Tensor& dc_in,
                                 const torch::Tensor& v_in) {
  auto cost = cost_in.detach().to(torch::kFloat64).contiguous().reshape({-1});
  auto dc = dc_in.detach().to(torch::kFloat64).contiguous().reshape({-1});
  auto v = v_in.detach().to(torch::kFloat64).contiguous().reshape({-1});
  double sum = 0.0, count = 0.0;
  for (int64_t i = 0; i < cost.numel(); ++i) {
    const double m = v.data_ptr<double>()[i];
    sum += m * (1.0 - dc.data_ptr<double>()[i]) * cost.data_ptr<double>()[i];
    count += m;
  }
  return count > 0 ? sum / count : 0.0;
}

double gamma_grid_oracle(double loss, double lo, double hi, int points) {
  double best = lo, best_value = std::numeric_limits<double>::infinity();
  for (int i = 0; i < points; ++i) {
    const double g = lo + (hi - lo) * i / (points - 1);
    const double value = loss / (2 * g * g) + std::log1p(g);
    if (value < best_value) {
      best_value = value;
      best = g;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------

std::vector<CheckResult> gradient_suite(uint64_t seed) {
  torch::manual_seed(seed);
  std::vector<CheckResult> results;
  const int64_t H = 6, W = 7;

  {
    auto image = test_image(1, 2, H, W);
    // Non-integer coordinates inside the image, a few outside.
    auto coords = torch::stack({torch::rand({1, H, W}, kDouble) * (W - 1.2) + 0.1,
                                torch::rand({1, H, W}, kDouble) * (H - 1.2) + 0.1}, -1);
    coords.index_put_({0, 0, 0, 0}, -0.5);
    coords.index_put_({0, 1, 2, 1}, H + 0.3);
    auto in_bounds = torch::ones({1, 1, H, W}, kDouble);
    auto weights = torch::rand({1, 2, H, W}, kDouble);
    auto g = check_gradients(
        [&](const std::vector<torch::Tensor>& in) {
          return (geometry::bilinear_sample(in[0], {in[1], in_bounds}).values * weights).sum();
        },
        {image, coords});
    results.push_back(grad_result("bilinear sampler", g));
  }
  {
    auto a = test_image(1, 2, H, W), b = test_image(1, 2, H, W);
    auto weights = torch::rand({1, 2, H, W}, kDouble);
    auto g = check_gradients(
        [&](const std::vector<torch::Tensor>& in) { return (losses::ssim_map(in[0], in[1]) * weights).sum(); },
        {a, b});
    results.push_back(grad_result("SSIM", g));
  }
  {
    auto a = test_image(1, 3, H, W), b = test_image(1, 3, H, W);
    auto weights = torch::rand({1, 1, H, W}, kDouble);
    auto g = check_gradients(
        [&](const std::vector<torch::Tensor>& in) {
          return (losses::photometric_cost(in[0], in[1], 0.85) * weights).sum();
        },
        {a, b});
    results.push_back(grad_result("photometric cost", g));
  }
  {
    auto cost = rand_d({1, 1, H, W});
    auto mask = (torch::rand({1, 1, H, W}, kDouble) > 0.2).to(torch::kFloat64);
    auto weights = torch::rand({1, 1, H, W}, kDouble);
    const double theta = losses::masked_percentile(cost, mask, 80.0).item<double>();
    auto flat = cost.reshape({-1});
    // The threshold entry itself moves theta; min() is not differentiable there.
    auto g = check_gradients(
        [&](const std::vector<torch::Tensor>& in) {
          return (losses::clip_outliers(in[0], mask, 80.0) * weights).sum();
        },
        {cost}, 1e-6, 0, 0,
        [&](std::size_t, int64_t k) { return std::abs(flat[k].item<double>() - theta) < 1e-4; });
    results.push_back(grad_result("percentile clip", g));
  }
  {
    auto projected = 1.0 + rand_d({1, 1, H, W}), sampled = 1.0 + rand_d({1, 1, H, W});
    auto validity = (torch::rand({1, 1, H, W}, kDouble) > 0.3).to(torch::kFloat64);
    auto weights = torch::rand({1, 1, H, W}, kDouble);
    auto g = check_gradients(
        [&](const std::vector<torch::Tensor>& in) {
          auto dc = losses::depth_consistency(in[0], in[1], validity);
          return dc.loss + (dc.dc * weights).sum();
        },
        {projected, sampled});
    results.push_back(grad_result("depth consistency", g));
  }
  {
    auto cost = rand_d({1, 1, H, W}), dc = 0.5 * rand_d({1, 1, H, W});
    auto validity = (torch::rand({1, 1, H, W}, kDouble) > 0.3).to(torch::kFloat64);
    auto g = check_gradients(
        [&](const std::vector<torch::Tensor>& in) {
          return losses::occlusion_reweight(in[0], in[1], validity).value;
        },
        {cost, dc});
    results.push_back(grad_result("occlusion reweighting", g));
  }
  {
    auto image = test_image(2, 3, H, W);
    auto depth = 1.0 + 5.0 * rand_d({2, 1, H, W});
    auto g = check_gradients(
        [&](const std::vector<torch::Tensor>& in) { return losses::edge_smoothness(in[0], in[1]); }, {image, depth});
    results.push_back(grad_result("edge-aware smoothness", g));
  }
  {
    losses::LossWeights w;
    w.scales = 2;
    auto terms = rand_d({2, 4});
    auto g = check_gradients(
        [&](const std::vector<torch::Tensor>& in) {
          std::vector<losses::ScaleTerms> scales;
          for (int s = 0; s < 2; ++s) {
            scales.push_back({in[0][s][0], in[0][s][1], in[0][s][2], in[0][s][3]});
          }
          return losses::total_depth_loss(scales, w);
        },
        {terms});
    results.push_back(grad_result("total depth loss", g));
  }
  {
    auto logits_t = torch::randn({2, 2, H, W}, kDouble), logits_s = torch::randn({2, 2, H, W}, kDouble);
    auto labels_t = losses::one_hot(torch::randint(0, 2, {2, H, W}), 2, torch::kFloat64);
    auto labels_s = losses::one_hot(torch::randint(0, 2, {2, H, W}), 2, torch::kFloat64);
    auto g = check_gradients(
        [&](const std::vector<torch::Tensor>& in) {
          return losses::lumen_loss(torch::softmax(in[0], 1), torch::softmax(in[1], 1), labels_t, labels_s);
        },
        {logits_t, logits_s});
    results.push_back(grad_result("lumen cross-entropy", g));
  }
  {
    auto inputs = std::vector<torch::Tensor>{torch::full({}, 0.7, kDouble), torch::full({}, 0.3, kDouble),
                                             torch::full({}, 0.8, kDouble), torch::full({}, 1.4, kDouble)};
    auto g = check_gradients(
        [&](const std::vector<torch::Tensor>& in) { return losses::multitask_loss(in[0], in[1], in[2], in[3]); },
        inputs);
    results.push_back(grad_result("multitask loss", g));
    losses::TaskUncertainty unc;
    auto raw = torch::tensor({0.3, -0.4}, kDouble);
    auto g2 = check_gradients(
        [&](const std::vector<torch::Tensor>& in) {
          auto g1 = torch::nn::functional::softplus(in[0][0]);
          auto gl = torch::nn::functional::softplus(in[0][1]);
          return losses::multitask_loss(torch::full({}, 0.7, kDouble), torch::full({}, 0.3, kDouble), g1, gl);
        },
        {raw});
    results.push_back(grad_result("multitask loss in softplus gamma", g2));
  }
  {
    auto x = torch::randn({1, 2, 5, 6}, kDouble), guidance = torch::randn({1, 3, 5, 6}, kDouble);
    auto weight = torch::randn({3, 2, 3, 3}, kDouble), bias = torch::randn({3}, kDouble);
    auto weights = torch::rand({1, 3, 5, 6}, kDouble);
    auto g = check_gradients(
        [&](const std::vector<torch::Tensor>& in) {
          return (nn::pac_conv2d(in[0], in[1], in[2], in[3], 0.7) * weights).sum();
        },
        {x, guidance, weight, bias});
    results.push_back(grad_result("PAC", g));
  }
  {
    nn::TfgLayer layer(2, 3);
    layer->to(torch::kFloat64);
    auto task = torch::randn({1, 2, 5, 6}, kDouble), guidance = torch::randn({1, 3, 5, 6}, kDouble);
    auto weights = torch::rand({1, 2, 5, 6}, kDouble);
    auto g = check_gradients(
        [&](const std::vector<torch::Tensor>& in) { return (layer->forward(in[0], in[1], 0.5) * weights).sum(); },
        {task, guidance});
    results.push_back(grad_result("TFG layer", g));
  }
  for (const auto& cam : {small_pinhole(W, H), small_ds(W, H)}) {
    const std::string kind = camera::to_string(cam.kind());
    auto points = torch::stack({torch::randn({4, 5}, kDouble), torch::randn({4, 5}, kDouble),
                                2.0 + rand_d({4, 5})}, -1);
    auto pixels = torch::stack({1.0 + rand_d({4, 5}) * (W - 3), 1.0 + rand_d({4, 5}) * (H - 3)}, -1);
    auto depth = 1.0 + rand_d({4, 5});
    auto g1 = check_gradients(
        [&](const std::vector<torch::Tensor>& in) { return cam.project(in[0]).uv.sin().sum(); }, {points});
    results.push_back(grad_result(kind + " projection", g1));
    auto g2 = check_gradients(
        [&](const std::vector<torch::Tensor>& in) { return cam.unproject(in[0], in[1]).sin().sum(); },
        {pixels, depth});
    results.push_back(grad_result(kind + " unprojection", g2));
  }
  {
    const auto cam = small_pinhole(W, H);
    auto depth = 2.0 + rand_d({1, 1, H, W});
    auto params = torch::tensor({{0.02, -0.03, 0.01, 0.05, -0.02, 0.1}}, kDouble);
    auto g = check_gradients(
        [&](const std::vector<torch::Tensor>& in) {
          return geometry::warp_coordinates(in[0], geometry::pose_from_6dof(in[1]), cam).coords.sin().sum();
        },
        {depth, params});
    results.push_back(grad_result("warp coordinates and pose", g));
  }
  return results;
}

CheckResult end_to_end_probe(uint64_t seed, int64_t probes) {
  train::TrainConfig config = train::TrainConfig::preset("desk");
  config.double_precision = true;
  config.weights.clip_percentile = 100.0;
  config.seed = seed;
  auto state = train::TrainState::create(config);
  state.model->train();

  data::TubeConfig tube;
  tube.width = 64;
  tube.height = 64;
  tube.frames = 2;
  const auto seq = data::generate_tube_sequence(tube, seed + 1);
  auto batch = train::to_dtype(data::make_batch(seq, {{1, 0}}), torch::kFloat64);
  const auto cam = seq.camera;
  const double alpha = 0.5;

  auto loss = [&]() { return train::compute_losses(state, batch, cam, alpha).total; };

  std::vector<torch::Tensor> params = state.model->parameters();
  for (const auto& p : state.uncertainty->parameters()) params.push_back(p);
  auto total = loss();
  auto grads = torch::autograd::grad({total}, params, {}, false, false, true);

  std::vector<std::pair<std::size_t, int64_t>> pool;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (int64_t k = 0; k < params[i].numel(); ++k) pool.emplace_back(i, k);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);

  torch::NoGradGuard no_grad;
  constexpr double h = 1e-6;
  std::vector<double> fd, an;
  int64_t kinks = 0;
  for (const auto& [i, k] : pool) {
    if (static_cast<int64_t>(fd.size()) >= probes) break;
    auto flat = params[i].view({-1});
    const double saved = flat[k].item<double>();
    flat[k] = saved + h;
    const double up = loss().item<double>();
    flat[k] = saved - h;
    const double down = loss().item<double>();
    flat[k] = saved;
    const double centre = loss().item<double>();
    // A mask or activation switching inside [x - h, x + h] makes the loss
    // non-differentiable there; such probes say nothing about the gradient.
    const double right = (up - centre) / h, left = (centre - down) / h;
    if (std::abs(right - left) > 1e-3 * std::max({std::abs(right), std::abs(left), 1e-6})) {
      ++kinks;
      continue;
    }
    fd.push_back((up - down) / (2 * h));
    an.push_back(grads[i].defined() ? grads[i].reshape({-1})[k].item<double>() : 0.0);
  }
  const double rel = relative_difference(fd, an);
  return {"end-to-end loss gradient", rel < 1e-3, rel, 1e-3,
          fmt::format("{} parameter probes, {} skipped at kinks", fd.size(), kinks)};
}

std::vector<CheckResult> geometry_suite(uint64_t seed) {
  torch::manual_seed(seed);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<CheckResult> results;
  const int W = 64, H = 48;

  for (const auto& cam : {small_pinhole(W, H), small_ds(W, H)}) {
    const std::string kind = camera::to_string(cam.kind());
    const auto [rays, valid] = cam.pixel_rays();
    double worst = 0.0;
    int tried = 0;
    for (int i = 0; i < 2000; ++i) {
      const camera::Pixel px{unit(rng) * (W - 1), unit(rng) * (H - 1)};
      const double depth = 0.2 + 20.0 * unit(rng);
      const auto p = cam.unproject(px, depth);
      if (!std::isfinite(p.x)) continue;
      const auto back = cam.project(p);
      worst = std::max(worst, back.valid ? std::hypot(back.pixel.u - px.u, back.pixel.v - px.v) : 1e9);
      ++tried;
    }
    results.push_back({kind + " round trip (scalar)", worst < 1e-6 && tried > 1000, worst, 1e-6,
                       fmt::format("{} pixels", tried)});

    auto depth = 0.2 + 20.0 * torch::rand({H, W}, kDouble);
    auto pixels = torch::stack({torch::arange(W, kDouble).view({1, W}).expand({H, W}) + 0.25,
                                torch::arange(H, kDouble).view({H, 1}).expand({H, W}) - 0.125}, -1)
                      .clamp_min(0.0);
    auto points = cam.unproject(pixels, depth);
    auto projected = cam.project(points);
    auto ok = torch::isfinite(points).all(-1).logical_and(projected.valid > 0.5);
    const double err = ((projected.uv - pixels).norm(2, -1) * ok.to(torch::kFloat64)).max().item<double>();
    results.push_back({kind + " round trip (batched)", err < 1e-6, err, 1e-6, ""});

    auto image = test_image(2, 3, H, W);
    auto d = 0.5 + 10.0 * torch::rand({2, 1, H, W}, kDouble);
    auto warped = geometry::synthesize_target(image, d, geometry::Pose::identity(2), cam);
    auto valid_px = valid.to(torch::kFloat64).view({1, 1, H, W});
    const bool exact = torch::equal(warped.values, image * valid_px) && torch::equal(warped.mask, valid_px.expand({2, 1, H, W}));
    results.push_back({kind + " identity warp is exact", exact, exact ? 0.0 : 1.0, 0.0,
                       fmt::format("{} valid pixels per frame", valid.sum().item<int64_t>())});

    auto image_f = image.to(torch::kFloat32);
    auto warped_f = geometry::synthesize_target(image_f, d.to(torch::kFloat32),
                                                geometry::Pose::identity(2, torch::kFloat32), cam);
    const bool exact_f = torch::equal(warped_f.values, image_f * valid_px.to(torch::kFloat32));
    results.push_back({kind + " identity warp is exact (float)", exact_f, exact_f ? 0.0 : 1.0, 0.0, ""});

    std::vector<geometry::RigidTransform> poses;
    std::vector<torch::Tensor> six;
    for (int b = 0; b < 2; ++b) {
      std::array<double, 6> v{0.03 * (unit(rng) - 0.5), 0.03 * (unit(rng) - 0.5), 0.03 * (unit(rng) - 0.5),
                              0.1 * (unit(rng) - 0.5), 0.1 * (unit(rng) - 0.5), 0.2 * (unit(rng) - 0.5)};
      poses.push_back(geometry::RigidTransform::from_6dof(v));
      six.push_back(torch::tensor(std::vector<double>(v.begin(), v.end()), kDouble));
    }
    auto moved = geometry::synthesize_target(image, d, geometry::pose_from_6dof(torch::stack(six)), cam);
    auto oracle = warp_oracle(image, d, poses, cam);
    const double mask_mismatch = (moved.mask - oracle.mask).abs().sum().item<double>();
    const double value_err = ((moved.values - oracle.values) * oracle.mask * moved.mask).abs().max().item<double>();
    results.push_back({kind + " warp matches scalar oracle", value_err < 1e-9 && mask_mismatch <= 2.0, value_err,
                       1e-9, fmt::format("{} mask disagreements", mask_mismatch)});
  }

  {
    const auto ds = small_ds(W, H);
    double worst = 0.0;
    int tried = 0;
    for (int i = 0; i < 300; ++i) {
      const camera::Pixel px{unit(rng) * (W - 1), unit(rng) * (H - 1)};
      const double depth = 0.5 + 5.0 * unit(rng);
      const auto closed = ds.unproject(px, depth);
      const auto root = unproject_by_root_finding(ds, px, depth);
      if (!std::isfinite(closed.x) || !std::isfinite(root.x)) continue;
      worst = std::max({worst, std::abs(closed.x - root.x), std::abs(closed.y - root.y)});
      ++tried;
    }
    results.push_back({"double-sphere unprojection matches root finding", worst < 1e-6 && tried > 100, worst, 1e-6,
                       fmt::format("{} pixels", tried)});
  }
  {
    const camera::Intrinsics k{40.0, 42.0, 31.5, 23.5, W, H};
    const auto pin = camera::CameraModel::pinhole(k);
    const auto ds = camera::CameraModel::double_sphere(k, {0.0, 0.0});
    double worst = 0.0;
    for (int i = 0; i < 2000; ++i) {
      const camera::Point3 p{4.0 * (unit(rng) - 0.5), 4.0 * (unit(rng) - 0.5), 0.5 + 10.0 * unit(rng)};
      const auto a = pin.project(p), b = ds.project(p);
      worst = std::max({worst, std::abs(a.pixel.u - b.pixel.u), std::abs(a.pixel.v - b.pixel.v)});
      const camera::Pixel px{unit(rng) * (W - 1), unit(rng) * (H - 1)};
      const auto ua = pin.unproject(px, p.z), ub = ds.unproject(px, p.z);
      worst = std::max({worst, std::abs(ua.x - ub.x), std::abs(ua.y - ub.y), std::abs(ua.z - ub.z)});
    }
    auto pts = torch::stack({torch::randn({100}, kDouble), torch::randn({100}, kDouble), 1.0 + rand_d({100})}, -1);
    worst = std::max(worst, (pin.project(pts).uv - ds.project(pts).uv).abs().max().item<double>());
    results.push_back({"double sphere (0, 0) equals pinhole", worst < 1e-9, worst, 1e-9, ""});
  }
  return results;
}

std::vector<CheckResult> pac_suite(uint64_t seed) {
  torch::manual_seed(seed);
  namespace F = torch::nn::functional;
  std::vector<CheckResult> results;

  for (auto dtype : {torch::kFloat32, torch::kFloat64}) {
    const auto opts = torch::TensorOptions().dtype(dtype);
    auto x = torch::randn({2, 4, 9, 11}, opts);
    auto weight = torch::randn({5, 4, 3, 3}, opts);
    auto bias = torch::randn({5}, opts);
    auto guidance = torch::full({2, 3, 9, 11}, 0.37, opts);
    auto pac = nn::pac_conv2d(x, guidance, weight, bias, 1.0);
    auto conv = F::conv2d(x, weight, F::Conv2dFuncOptions().bias(bias).padding(1));
    // Float sums differ from the reference in rounding, so the float error is
    // taken relative to the output magnitude.
    const bool single = dtype == torch::kFloat32;
    const double scale = single ? conv.abs().max().item<double>() : 1.0;
    const double err = (pac - conv).abs().max().item<double>() / scale;
    results.push_back({fmt::format("constant-guidance PAC equals convolution ({})", single ? "float" : "double"),
                       err < 1e-6, err, 1e-6, single ? "relative to max |conv|" : ""});
  }
  {
    auto x = torch::randn({1, 3, 7, 8}, kDouble);
    auto guidance = torch::randn({1, 2, 7, 8}, kDouble);
    auto weight = torch::randn({4, 3, 3, 3}, kDouble);
    auto bias = torch::randn({4}, kDouble);
    const double err =
        (nn::pac_conv2d(x, guidance, weight, bias, 0.8) - pac_oracle(x, guidance, weight, bias, 0.8))
            .abs()
            .max()
            .item<double>();
    results.push_back({"PAC matches direct summation", err < 1e-12, err, 1e-12, ""});
  }
  {
    model::SoftEnNetConfig mc;
    model::SoftEnNet net(mc);
    net->eval();
    torch::NoGradGuard no_grad;
    auto image = torch::rand({2, 3, 64, 64});
    net->set_pathway_kind(nn::PathwayKind::pac);
    auto pac = net->forward(image, 1e-4);
    net->set_pathway_kind(nn::PathwayKind::conv);
    auto conv = net->forward(image, 1e-4);
    auto rel = [](const torch::Tensor& a, const torch::Tensor& b) {
      return ((a - b).norm() / b.norm().clamp_min(1e-30)).item<double>();
    };
    double worst = 0.0;
    for (std::size_t s = 0; s < pac.depth.size(); ++s) worst = std::max(worst, rel(pac.depth[s], conv.depth[s]));
    worst = std::max(worst, rel(pac.lumen_posteriors, conv.lumen_posteriors));
    results.push_back({"network at alpha 1e-4 matches plain pathways", worst < 1e-3, worst, 1e-3,
                       "relative L2 over depth scales and lumen posteriors"});
  }
  return results;
}

}  // namespace softennet::checks
