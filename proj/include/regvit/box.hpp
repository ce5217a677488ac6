#pragma once

#include <algorithm>
#include <cstddef>

namespace regvit {

// Axis-aligned box with inclusive integer corners.
struct Box {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  int width() const noexcept { return x1 - x0 + 1; }
  int height() const noexcept { return y1 - y0 + 1; }
  long area() const noexcept { return static_cast<long>(width()) * height(); }
  bool valid() const noexcept { return x0 <= x1 && y0 <= y1; }
  bool operator==(const Box&) const = default;
};

inline double iou(const Box& a, const Box& b) {
  const int ix0 = std::max(a.x0, b.x0);
  const int iy0 = std::max(a.y0, b.y0);
  const int ix1 = std::min(a.x1, b.x1);
  const int iy1 = std::min(a.y1, b.y1);
  const long inter = (ix1 < ix0 || iy1 < iy0) ? 0 : static_cast<long>(ix1 - ix0 + 1) * (iy1 - iy0 + 1);
  const long uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

// Pixel box to the inclusive range of patches it touches.
inline Box to_patch_box(const Box& pixels, std::size_t patch_size) {
  const int p = static_cast<int>(patch_size);
  return {pixels.x0 / p, pixels.y0 / p, pixels.x1 / p, pixels.y1 / p};
}

}  // namespace regvit
