// SPDX-License-Identifier: Apache-2.0
//
// Minimal raster plots written with libpng: MSE-vs-step curves and grids of
// scatter frames. Only tick labels are drawn (a 3x5 digit font); colors
// identify series and objects.
#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "eqcollide/error.hpp"
#include "eqcollide/trajectory.hpp"

namespace eqcollide::plot {

using Rgb = std::array<std::uint8_t, 3>;

inline const std::vector<Rgb>& palette() {
  static const std::vector<Rgb> p{{31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40},
                                  {148, 103, 189}, {140, 86, 75}, {227, 119, 194}, {23, 190, 207}};
  return p;
}

class Image {
 public:
  Image(int w, int h, Rgb bg = {255, 255, 255}) : w_(w), h_(h), px_(static_cast<std::size_t>(w) * h * 3) {
    for (std::size_t i = 0; i < px_.size(); i += 3) std::copy(bg.begin(), bg.end(), px_.begin() + i);
  }
  int width() const { return w_; }
  int height() const { return h_; }

  void set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
    std::copy(c.begin(), c.end(), px_.begin() + (static_cast<std::size_t>(y) * w_ + x) * 3);
  }

  void line(double x0, double y0, double x1, double y1, Rgb c) {
    const int n = static_cast<int>(std::max(std::abs(x1 - x0), std::abs(y1 - y0))) + 1;
    for (int i = 0; i <= n; ++i) {
      const double t = static_cast<double>(i) / n;
      set(static_cast<int>(std::lround(x0 + t * (x1 - x0))), static_cast<int>(std::lround(y0 + t * (y1 - y0))), c);
    }
  }

  void dot(double x, double y, int r, Rgb c) {
    const int cx = static_cast<int>(std::lround(x)), cy = static_cast<int>(std::lround(y));
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx)
        if (dx * dx + dy * dy <= r * r) set(cx + dx, cy + dy, c);
  }

  void rect(int x0, int y0, int x1, int y1, Rgb c) {
    line(x0, y0, x1, y0, c);
    line(x1, y0, x1, y1, c);
    line(x1, y1, x0, y1, c);
    line(x0, y1, x0, y0, c);
  }

  /// Digits, '.', '-', '+' and 'e' at scale 2, top-left anchored.
  void text(int x, int y, const std::string& s, Rgb c) {
    static const std::array<std::uint16_t, 14> glyphs{
        0x7B6F, 0x2C97, 0x73E7, 0x73CF, 0x5BC9, 0x79CF, 0x79EF, 0x7249, 0x7BEF, 0x7BCF,  // 0-9
        0x0002, 0x01C0, 0x05D0, 0x7BE7};                                                  // . - + e
    for (char ch : s) {
      int g = -1;
      if (ch >= '0' && ch <= '9') g = ch - '0';
      if (ch == '.') g = 10;
      if (ch == '-') g = 11;
      if (ch == '+') g = 12;
      if (ch == 'e') g = 13;
      if (g >= 0)
        for (int r = 0; r < 5; ++r)
          for (int col = 0; col < 3; ++col)
            if (glyphs[g] >> (14 - (r * 3 + col)) & 1)
              for (int a = 0; a < 2; ++a)
                for (int b = 0; b < 2; ++b) set(x + col * 2 + a, y + r * 2 + b, c);
      x += 8;
    }
  }

  void write(const std::filesystem::path& path) const {
    FILE* fp = std::fopen(path.string().c_str(), "wb");
    if (!fp) throw FormatError("cannot open " + path.string() + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      std::fclose(fp);
      throw FormatError("PNG encoding failed for " + path.string());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w_), static_cast<png_uint_32>(h_), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < h_; ++y)
      png_write_row(png, const_cast<png_bytep>(px_.data() + static_cast<std::size_t>(y) * w_ * 3));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
  }

 private:
  int w_, h_;
  std::vector<std::uint8_t> px_;
};

struct Series {
  std::vector<double> x;
  std::vector<double> y;
};

/// Line plot with a log10 y axis (non-positive values are clamped to the
/// smallest positive value present).
inline void mse_curves(const std::filesystem::path& path, const std::vector<Series>& series, int w = 640,
                       int h = 420) {
  require(!series.empty(), "mse_curves: nothing to plot");
  double x0 = 1e300, x1 = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series) {
    require(s.x.size() == s.y.size() && !s.x.empty(), "mse_curves: series lengths differ or are empty");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      if (s.y[i] > 0) {
        ymin = std::min(ymin, s.y[i]);
        ymax = std::max(ymax, s.y[i]);
      }
    }
  }
  if (ymax < ymin) ymin = ymax = 1e-6;
  const double ly0 = std::floor(std::log10(ymin)), ly1 = std::max(ly0 + 1, std::ceil(std::log10(ymax)));
  if (x1 <= x0) x1 = x0 + 1;
  const int L = 70, R = w - 20, T = 20, B = h - 40;
  Image img(w, h);
  const Rgb axis{60, 60, 60}, grid{225, 225, 225};
  for (double e = ly0; e <= ly1; e += 1) {
    const double py = B - (e - ly0) / (ly1 - ly0) * (B - T);
    img.line(L, py, R, py, grid);
    char buf[16];
    std::snprintf(buf, sizeof buf, "1e%d", static_cast<int>(e));
    img.text(4, static_cast<int>(py) - 5, buf, axis);
  }
  for (const auto& s : series)
    for (double x : s.x) {
      const double px = L + (x - x0) / (x1 - x0) * (R - L);
      img.line(px, B, px, B + 4, axis);
      img.text(static_cast<int>(px) - 6, B + 10, std::to_string(static_cast<long long>(std::lround(x))), axis);
    }
  img.rect(L, T, R, B, axis);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const Rgb c = palette()[k % palette().size()];
    const auto& s = series[k];
    auto map = [&](std::size_t i) {
      const double y = std::log10(std::max(s.y[i], ymin));
      return std::pair<double, double>{L + (s.x[i] - x0) / (x1 - x0) * (R - L), B - (y - ly0) / (ly1 - ly0) * (B - T)};
    };
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const auto [px, py] = map(i);
      img.dot(px, py, 3, c);
      if (i > 0) {
        const auto [qx, qy] = map(i - 1);
        img.line(qx, qy, px, py, c);
      }
    }
  }
  img.write(path);
}

/// One panel per requested frame, points colored by object over the unit
/// square. Optional ground truth is drawn underneath in gray. Steps past the
/// end of the trajectory are skipped.
inline void frame_grid(const std::filesystem::path& path, const Trajectory& traj, const std::vector<std::size_t>& steps,
                       const Trajectory* truth = nullptr, int panel = 220) {
  std::vector<std::size_t> shown;
  for (std::size_t s : steps)
    if (s < traj.n_frames()) shown.push_back(s);
  require(!shown.empty(), "frame_grid: no requested step lies inside the trajectory");
  const int cols = static_cast<int>(std::min<std::size_t>(shown.size(), 3));
  const int rows = static_cast<int>((shown.size() + cols - 1) / cols);
  const int pad = 24;
  Image img(cols * (panel + pad) + pad, rows * (panel + pad) + pad);
  for (std::size_t k = 0; k < shown.size(); ++k) {
    const int ox = pad + static_cast<int>(k % cols) * (panel + pad);
    const int oy = pad + static_cast<int>(k / cols) * (panel + pad);
    img.rect(ox, oy, ox + panel, oy + panel, {90, 90, 90});
    img.text(ox, oy - 14, std::to_string(shown[k]), {60, 60, 60});
    auto draw = [&](const MassPointCloud& f, bool gray) {
      for (std::size_t i = 0; i < f.size(); ++i) {
        const Rgb c = gray ? Rgb{200, 200, 200} : palette()[f.object_ids[i] % palette().size()];
        img.dot(ox + f.positions[i].x * panel, oy + (1.0 - f.positions[i].y) * panel, 1, c);
      }
    };
    if (truth != nullptr && shown[k] < truth->n_frames()) draw(truth->frames[shown[k]], true);
    draw(traj.frames[shown[k]], false);
  }
  img.write(path);
}

}  // namespace eqcollide::plot
