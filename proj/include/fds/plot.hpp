#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace fds::plot {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

// Static SVG charts.
void write_line_chart(const std::filesystem::path& path, const std::vector<Series>& series, const std::string& title,
                      const std::string& x_label, const std::string& y_label);
void write_scatter(const std::filesystem::path& path, std::span<const std::pair<double, double>> points,
                   const std::vector<std::string>& labels, const std::string& title);

// Tiles CHW images in [0,1] into one binary PGM (1 channel) or PPM (3 channels).
void write_image_grid(const std::filesystem::path& path, const std::vector<std::vector<float>>& images, int channels,
                      int height, int width, int columns);

}  // namespace fds::plot
