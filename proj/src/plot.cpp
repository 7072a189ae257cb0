#include "fds/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "fds/common.hpp"

namespace fds::plot {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
                                    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939"};
constexpr int kW = 640, kH = 440, kLeft = 70, kRight = 170, kTop = 40, kBottom = 50;

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * (kW - kLeft - kRight); }
  double py(double y) const { return kH - kBottom - (y - y0) / (y1 - y0) * (kH - kTop - kBottom); }
};

Frame frame_for(double x0, double x1, double y0, double y1) {
  if (!(x1 > x0)) { x0 -= 0.5; x1 += 0.5; }
  if (!(y1 > y0)) { y0 -= 0.5; y1 += 0.5; }
  const double mx = 0.05 * (x1 - x0), my = 0.05 * (y1 - y0);
  return {x0 - mx, x1 + mx, y0 - my, y1 + my};
}

void axes(std::ostringstream& o, const Frame& f, const std::string& title, const std::string& xl, const std::string& yl) {
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" font-family=\"sans-serif\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << esc(title) << "</text>\n";
  o << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << kW - kLeft - kRight << "\" height=\""
    << kH - kTop - kBottom << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0, yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    o << "<text x=\"" << num(f.px(xv)) << "\" y=\"" << kH - kBottom + 16 << "\" text-anchor=\"middle\" font-size=\"11\">"
      << num(xv) << "</text>\n";
    o << "<text x=\"" << kLeft - 6 << "\" y=\"" << num(f.py(yv) + 4) << "\" text-anchor=\"end\" font-size=\"11\">" << num(yv)
      << "</text>\n";
  }
  if (!xl.empty())
    o << "<text x=\"" << (kLeft + kW - kRight) / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
      << esc(xl) << "</text>\n";
  if (!yl.empty())
    o << "<text x=\"16\" y=\"" << (kTop + kH - kBottom) / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
      << (kTop + kH - kBottom) / 2 << ")\">" << esc(yl) << "</text>\n";
}

void legend(std::ostringstream& o, const std::vector<std::string>& names) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    const int y = kTop + 10 + static_cast<int>(i) * 18;
    o << "<rect x=\"" << kW - kRight + 14 << "\" y=\"" << y - 9 << "\" width=\"10\" height=\"10\" fill=\""
      << kPalette[i % std::size(kPalette)] << "\"/>\n";
    o << "<text class=\"legend\" x=\"" << kW - kRight + 30 << "\" y=\"" << y << "\" font-size=\"12\">" << esc(names[i]) << "</text>\n";
  }
}

}  // namespace

void write_line_chart(const std::filesystem::path& path, const std::vector<Series>& series, const std::string& title,
                      const std::string& x_label, const std::string& y_label) {
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("line chart: x/y length mismatch");
    for (double v : s.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
    for (double v : s.y) y0 = std::min(y0, v), y1 = std::max(y1, v);
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  const Frame f = frame_for(x0, x1, y0, y1);
  std::ostringstream o;
  axes(o, f, title, x_label, y_label);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = kPalette[i % std::size(kPalette)];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < s.x.size(); ++k) o << num(f.px(s.x[k])) << ',' << num(f.py(s.y[k])) << ' ';
    o << "\"/>\n";
    for (std::size_t k = 0; k < s.x.size(); ++k)
      o << "<circle cx=\"" << num(f.px(s.x[k])) << "\" cy=\"" << num(f.py(s.y[k])) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    names.push_back(s.name);
  }
  legend(o, names);
  o << "</svg>\n";
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path, o.str());
}

void write_scatter(const std::filesystem::path& path, std::span<const std::pair<double, double>> points,
                   const std::vector<std::string>& labels, const std::string& title) {
  if (labels.size() != points.size()) throw std::invalid_argument("scatter: one label per point");
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& [x, y] : points) x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
  if (points.empty()) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  const Frame f = frame_for(x0, x1, y0, y1);
  std::vector<std::string> names;
  for (const auto& l : labels)
    if (std::find(names.begin(), names.end(), l) == names.end()) names.push_back(l);
  std::ostringstream o;
  axes(o, f, title, "", "");
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto c = static_cast<std::size_t>(std::find(names.begin(), names.end(), labels[i]) - names.begin());
    o << "<circle cx=\"" << num(f.px(points[i].first)) << "\" cy=\"" << num(f.py(points[i].second)) << "\" r=\"2.5\" fill=\""
      << kPalette[c % std::size(kPalette)] << "\" fill-opacity=\"0.75\"/>\n";
  }
  legend(o, names);
  o << "</svg>\n";
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path, o.str());
}

void write_image_grid(const std::filesystem::path& path, const std::vector<std::vector<float>>& images, int channels,
                      int height, int width, int columns) {
  if (channels != 1 && channels != 3) throw std::invalid_argument("image grid: channels must be 1 or 3");
  if (images.empty() || columns < 1) throw std::invalid_argument("image grid: nothing to write");
  const int n = static_cast<int>(images.size());
  const int cols = std::min(columns, n), rows = (n + cols - 1) / cols, pad = 1;
  const int W = cols * (width + pad) + pad, H = rows * (height + pad) + pad;
  std::vector<unsigned char> px(static_cast<std::size_t>(W) * H * channels, 255);
  for (int i = 0; i < n; ++i) {
    const auto& img = images[static_cast<std::size_t>(i)];
    if (static_cast<int>(img.size()) != channels * height * width) throw std::invalid_argument("image grid: payload size mismatch");
    const int ox = pad + (i % cols) * (width + pad), oy = pad + (i / cols) * (height + pad);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        for (int c = 0; c < channels; ++c) {
          const float v = std::clamp(img[static_cast<std::size_t>((c * height + y) * width + x)], 0.0f, 1.0f);
          px[(static_cast<std::size_t>(oy + y) * W + (ox + x)) * channels + c] = static_cast<unsigned char>(std::lround(v * 255.0f));
        }
  }
  std::string header = (channels == 1 ? "P5\n" : "P6\n") + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  std::string out = header;
  out.append(reinterpret_cast<const char*>(px.data()), px.size());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path, out);
}

}  // namespace fds::plot
