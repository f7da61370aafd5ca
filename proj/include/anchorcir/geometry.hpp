#pragma once

#include <cstddef>
#include <string>

namespace anchorcir {

// Patch grid of an image: h rows by w columns, raster order.
struct GridShape {
  std::size_t h = 8;
  std::size_t w = 8;

  std::size_t count() const noexcept { return h * w; }
  bool operator==(const GridShape&) const = default;
};

// Normalized rectangle, 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1.
struct BBox {
  double x0 = 0.0;
  double y0 = 0.0;
  double x1 = 1.0;
  double y1 = 1.0;

  double width() const noexcept { return x1 - x0; }
  double height() const noexcept { return y1 - y0; }
  double area() const noexcept { return width() * height(); }
  double center_x() const noexcept { return 0.5 * (x0 + x1); }
  double center_y() const noexcept { return 0.5 * (y0 + y1); }
  bool valid() const noexcept;
  bool contains(double x, double y) const noexcept { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
  bool operator==(const BBox&) const = default;
};

double intersection_area(const BBox& a, const BBox& b) noexcept;
double iou(const BBox& a, const BBox& b) noexcept;
std::string to_string(const BBox& b);

}  // namespace anchorcir
