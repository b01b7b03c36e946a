#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rftrace/error.hpp"
#include "rftrace/rect.hpp"

namespace rftrace {

// Pixel position in image coordinates: x is the column, y the row.
struct Click {
  int x = 0;
  int y = 0;
  friend bool operator==(const Click&, const Click&) = default;
  friend auto operator<=>(const Click&, const Click&) = default;
};

class BinaryMask {
 public:
  BinaryMask() : BinaryMask(1, 1) {}
  BinaryMask(int height, int width) : height_(height), width_(width) {
    if (height < 1 || width < 1) {
      throw ValueError("mask dimensions must be >= 1, got " + std::to_string(height) + "x" + std::to_string(width));
    }
    bits_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), 0);
  }

  int height() const { return height_; }
  int width() const { return width_; }
  bool in_bounds(int y, int x) const { return y >= 0 && x >= 0 && y < height_ && x < width_; }

  bool at(int y, int x) const { return bits_[index(y, x)] != 0; }
  void set(int y, int x, bool v = true) { bits_[index(y, x)] = v ? 1 : 0; }
  bool contains(const Click& c) const { return in_bounds(c.y, c.x) && at(c.y, c.x); }

  std::size_t area() const {
    std::size_t n = 0;
    for (std::uint8_t b : bits_) n += b;
    return n;
  }
  bool empty() const { return area() == 0; }

  std::optional<Rect> bounding_box() const {
    std::optional<Rect> box;
    for (int y = 0; y < height_; ++y) {
      for (int x = 0; x < width_; ++x) {
        if (!at(y, x)) continue;
        if (!box) {
          box = Rect::pixel(y, x);
        } else {
          box = rect_hull(*box, Rect::pixel(y, x));
        }
      }
    }
    return box;
  }

  // Row-major pixel list of set pixels.
  std::vector<Click> pixels() const {
    std::vector<Click> out;
    for (int y = 0; y < height_; ++y) {
      for (int x = 0; x < width_; ++x) {
        if (at(y, x)) out.push_back({x, y});
      }
    }
    return out;
  }

  const std::vector<std::uint8_t>& bits() const { return bits_; }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  std::size_t index(int y, int x) const {
    if (!in_bounds(y, x)) {
      throw ValueError("mask pixel (" + std::to_string(y) + "," + std::to_string(x) + ") outside " +
                       std::to_string(height_) + "x" + std::to_string(width_));
    }
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
  }

  int height_;
  int width_;
  std::vector<std::uint8_t> bits_;
};

inline void require_same_dims(const BinaryMask& a, const BinaryMask& b, const char* what) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw ShapeError(std::string(what) + ": mask dimensions " + std::to_string(a.height()) + "x" +
                     std::to_string(a.width()) + " and " + std::to_string(b.height()) + "x" +
                     std::to_string(b.width()) + " differ");
  }
}

}  // namespace rftrace
