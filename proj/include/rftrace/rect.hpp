#pragma once

#include <algorithm>
#include <span>
#include <string>

#include "rftrace/error.hpp"

namespace rftrace {

// Inclusive pixel rectangle in the frame of one feature map. Before clamping
// the coordinates may be negative or run past the map.
struct Rect {
  int top = 0;
  int left = 0;
  int bottom = 0;
  int right = 0;

  static Rect pixel(int row, int col) { return {row, col, row, col}; }
  static Rect full(int height, int width) { return {0, 0, height - 1, width - 1}; }

  int height() const { return bottom - top + 1; }
  int width() const { return right - left + 1; }
  long long area() const { return static_cast<long long>(height()) * width(); }
  bool valid() const { return top <= bottom && left <= right; }

  bool contains(const Rect& o) const {
    return o.top >= top && o.left >= left && o.bottom <= bottom && o.right <= right;
  }
  bool contains(int row, int col) const {
    return row >= top && row <= bottom && col >= left && col <= right;
  }
  Rect translated(int drow, int dcol) const {
    return {top + drow, left + dcol, bottom + drow, right + dcol};
  }

  friend bool operator==(const Rect&, const Rect&) = default;
};

inline std::string to_string(const Rect& r) {
  return "[" + std::to_string(r.top) + "," + std::to_string(r.left) + "," +
         std::to_string(r.bottom) + "," + std::to_string(r.right) + "]";
}

// Border widths, in pixels.
struct Margins {
  int top = 0;
  int bottom = 0;
  int left = 0;
  int right = 0;

  bool zero() const { return top == 0 && bottom == 0 && left == 0 && right == 0; }
  friend bool operator==(const Margins&, const Margins&) = default;
};

struct ClampResult {
  Rect rect;
  Margins margins;
};

// Intersects `rect` with [0,height-1] x [0,width-1] and records how far it
// overhung each border.
inline ClampResult clamp(const Rect& rect, int height, int width) {
  if (!rect.valid()) throw TraceError("clamp: inverted rect " + to_string(rect));
  if (rect.bottom < 0 || rect.right < 0 || rect.top > height - 1 || rect.left > width - 1) {
    throw TraceError("clamp: rect " + to_string(rect) + " lies entirely outside a " +
                     std::to_string(height) + "x" + std::to_string(width) + " map");
  }
  ClampResult out;
  out.rect = {std::max(rect.top, 0), std::max(rect.left, 0), std::min(rect.bottom, height - 1),
              std::min(rect.right, width - 1)};
  out.margins = {out.rect.top - rect.top, rect.bottom - out.rect.bottom, out.rect.left - rect.left,
                 rect.right - out.rect.right};
  return out;
}

inline Rect rect_hull(std::span<const Rect> rects) {
  if (rects.empty()) throw ValueError("rect_hull: empty rect list");
  Rect hull = rects.front();
  for (const Rect& r : rects.subspan(1)) {
    hull.top = std::min(hull.top, r.top);
    hull.left = std::min(hull.left, r.left);
    hull.bottom = std::max(hull.bottom, r.bottom);
    hull.right = std::max(hull.right, r.right);
  }
  return hull;
}

inline Rect rect_hull(const Rect& a, const Rect& b) {
  const Rect both[] = {a, b};
  return rect_hull(both);
}

}  // namespace rftrace
