#include "plotting.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace softennet::plot {
namespace {

const cv::Scalar kPalette[] = {{180, 119, 31}, {14, 127, 255}, {44, 160, 44},  {40, 39, 214},
                               {189, 103, 148}, {75, 86, 140}, {194, 119, 227}, {127, 127, 127}};
constexpr int kFont = cv::FONT_HERSHEY_SIMPLEX;

std::string tick(double v) {
  if (v == 0.0) return "0";
  const double a = std::abs(v);
  if (a >= 1e4 || a < 1e-2) return fmt::format("{:.1e}", v);
  return fmt::format("{:.3g}", v);
}

}  // namespace

cv::Mat line_chart(const std::string& title, const std::string& x_label, const std::vector<Series>& series, bool log_y,
                   cv::Size size) {
  cv::Mat img(size, CV_8UC3, cv::Scalar(255, 255, 255));
  const int left = 80, right = 180, top = 40, bottom = 50;
  const cv::Rect area(left, top, size.width - left - right, size.height - top - bottom);

  auto transform_y = [&](double y) { return log_y ? std::log10(y) : y; };
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      const double y = transform_y(s.y[i]);
      if (!std::isfinite(s.x[i]) || !std::isfinite(y)) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  cv::putText(img, title, {left, 25}, kFont, 0.6, {0, 0, 0}, 1, cv::LINE_AA);
  cv::rectangle(img, area, {0, 0, 0}, 1);
  if (!std::isfinite(x0)) {
    cv::putText(img, "no data", {area.x + 20, area.y + 40}, kFont, 0.6, {0, 0, 255}, 1, cv::LINE_AA);
    return img;
  }
  if (x1 == x0) x1 = x0 + 1.0;
  if (y1 == y0) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  auto to_px = [&](double x, double y) {
    return cv::Point(area.x + static_cast<int>(std::lround((x - x0) / (x1 - x0) * area.width)),
                     area.y + area.height - static_cast<int>(std::lround((y - y0) / (y1 - y0) * area.height)));
  };

  for (int i = 0; i <= 5; ++i) {
    const double yv = y0 + (y1 - y0) * i / 5.0;
    const auto p = to_px(x0, yv);
    cv::line(img, p, {area.x + area.width, p.y}, {225, 225, 225}, 1);
    cv::putText(img, tick(log_y ? std::pow(10.0, yv) : yv), {5, p.y + 4}, kFont, 0.4, {60, 60, 60}, 1, cv::LINE_AA);
    const double xv = x0 + (x1 - x0) * i / 5.0;
    const auto q = to_px(xv, y0);
    cv::putText(img, tick(xv), {q.x - 12, area.y + area.height + 18}, kFont, 0.4, {60, 60, 60}, 1, cv::LINE_AA);
  }
  cv::putText(img, x_label, {area.x + area.width / 2 - 20, size.height - 10}, kFont, 0.5, {0, 0, 0}, 1, cv::LINE_AA);

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const auto colour = kPalette[k % std::size(kPalette)];
    std::vector<cv::Point> pts;
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      const double y = transform_y(s.y[i]);
      if (std::isfinite(s.x[i]) && std::isfinite(y)) pts.push_back(to_px(s.x[i], y));
    }
    if (pts.size() == 1) cv::circle(img, pts[0], 2, colour, cv::FILLED);
    if (pts.size() > 1) cv::polylines(img, pts, false, colour, 1, cv::LINE_AA);
    const int ly = top + 20 + 22 * static_cast<int>(k);
    cv::line(img, {size.width - right + 15, ly - 4}, {size.width - right + 40, ly - 4}, colour, 2);
    cv::putText(img, s.name, {size.width - right + 46, ly}, kFont, 0.45, {0, 0, 0}, 1, cv::LINE_AA);
  }
  return img;
}

cv::Mat table_image(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  const double scale = 0.5;
  const int pad = 12, row_h = 30;
  std::vector<int> widths(header.size(), 0);
  auto measure = [&](const std::string& s) {
    int baseline = 0;
    return cv::getTextSize(s, kFont, scale, 1, &baseline).width;
  };
  for (std::size_t c = 0; c < header.size(); ++c) {
    widths[c] = measure(header[c]);
    for (const auto& r : rows) {
      if (c < r.size()) widths[c] = std::max(widths[c], measure(r[c]));
    }
  }
  int total = pad;
  for (int w : widths) total += w + 2 * pad;
  cv::Mat img(row_h * static_cast<int>(rows.size() + 1) + pad, total, CV_8UC3, cv::Scalar(255, 255, 255));
  auto draw_row = [&](const std::vector<std::string>& cells, int y, bool bold) {
    int x = pad;
    for (std::size_t c = 0; c < widths.size(); ++c) {
      const std::string& s = c < cells.size() ? cells[c] : "";
      cv::putText(img, s, {x + pad + widths[c] - measure(s), y}, kFont, scale, {0, 0, 0}, bold ? 2 : 1, cv::LINE_AA);
      x += widths[c] + 2 * pad;
    }
  };
  draw_row(header, row_h - 8, true);
  cv::line(img, {pad, row_h}, {total - pad, row_h}, {0, 0, 0}, 1);
  for (std::size_t r = 0; r < rows.size(); ++r) draw_row(rows[r], row_h * static_cast<int>(r + 2) - 8, false);
  return img;
}

cv::Mat overlay(const torch::Tensor& rgb, const torch::Tensor& depth, const torch::Tensor& labels, double max_depth) {
  auto image = (rgb.detach().to(torch::kFloat32).clamp(0, 1) * 255.0).round().to(torch::kUInt8);
  image = image.flip({0}).permute({1, 2, 0}).contiguous();  // RGB -> BGR, HWC
  const int h = static_cast<int>(image.size(0)), w = static_cast<int>(image.size(1));
  cv::Mat bgr(h, w, CV_8UC3, image.data_ptr<uint8_t>());
  bgr = bgr.clone();

  auto mask = labels.to(torch::kUInt8).contiguous();
  cv::Mat lumen(h, w, CV_8UC1, mask.data_ptr<uint8_t>());
  cv::Mat tint(h, w, CV_8UC3, cv::Scalar(60, 60, 255));
  cv::Mat blended;
  cv::addWeighted(bgr, 0.55, tint, 0.45, 0.0, blended);
  blended.copyTo(bgr, lumen);

  auto scaled = (depth.detach().to(torch::kFloat32).squeeze(0) / max_depth * 255.0).clamp(0, 255).round();
  auto d8 = scaled.to(torch::kUInt8).contiguous();
  cv::Mat depth_grey(h, w, CV_8UC1, d8.data_ptr<uint8_t>());
  cv::Mat depth_colour;
  cv::applyColorMap(depth_grey, depth_colour, cv::COLORMAP_MAGMA);

  cv::Mat out;
  cv::hconcat(bgr, depth_colour, out);
  return out;
}

void write_image(const std::filesystem::path& path, const cv::Mat& image) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), image)) throw std::runtime_error(fmt::format("could not write '{}'", path.string()));
}

}  // namespace softennet::plot
