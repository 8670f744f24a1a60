#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/torch.h>

namespace softennet::plot {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

/// Line chart with axes, tick labels and a legend. Non-finite points are skipped.
cv::Mat line_chart(const std::string& title, const std::string& x_label, const std::vector<Series>& series,
                   bool log_y = false, cv::Size size = {960, 540});

/// Renders a header row and value rows as a plain table image.
cv::Mat table_image(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows);

/// RGB frame with the lumen mask tinted, next to a colour-mapped depth map.
/// rgb: [3, H, W] in [0, 1]; depth: [1, H, W]; labels: [H, W].
cv::Mat overlay(const torch::Tensor& rgb, const torch::Tensor& depth, const torch::Tensor& labels, double max_depth);

void write_image(const std::filesystem::path& path, const cv::Mat& image);

}  // namespace softennet::plot
