#include "anchorcir/geometry.hpp"

#include <algorithm>
#include <cstdio>

namespace anchorcir {

bool BBox::valid() const noexcept {
  return x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0 && x0 < x1 && y0 < y1;
}

double intersection_area(const BBox& a, const BBox& b) noexcept {
  const double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  return (w > 0.0 && h > 0.0) ? w * h : 0.0;
}

double iou(const BBox& a, const BBox& b) noexcept {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::string to_string(const BBox& b) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "(%.4f, %.4f, %.4f, %.4f)", b.x0, b.y0, b.x1, b.y1);
  return buf;
}

}  // namespace anchorcir
