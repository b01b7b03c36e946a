#pragma once

// Click simulation around an instance's centroid: five concentric bands grown
// by repeated rectangular dilation, five clicks drawn from each.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rftrace/error.hpp"
#include "rftrace/mask.hpp"

namespace rftrace {

inline constexpr int kBandCount = 5;
inline constexpr int kClicksPerBand = 5;

// Rounded first moment. When that pixel misses the mask, the nearest mask
// pixel (Euclidean; ties to the smallest row, then column) is used instead.
inline Click centroid(const BinaryMask& m) {
  long long n = 0;
  long long sum_y = 0;
  long long sum_x = 0;
  for (int y = 0; y < m.height(); ++y) {
    for (int x = 0; x < m.width(); ++x) {
      if (!m.at(y, x)) continue;
      ++n;
      sum_y += y;
      sum_x += x;
    }
  }
  if (n == 0) throw ValueError("centroid of an empty mask");
  // Round half up on non-negative means: floor((2*sum + n) / (2n)).
  const Click c{static_cast<int>((2 * sum_x + n) / (2 * n)), static_cast<int>((2 * sum_y + n) / (2 * n))};
  if (m.contains(c)) return c;

  Click best{};
  long long best_d = -1;
  for (int y = 0; y < m.height(); ++y) {
    for (int x = 0; x < m.width(); ++x) {
      if (!m.at(y, x)) continue;
      const long long dy = y - c.y;
      const long long dx = x - c.x;
      const long long d = dy * dy + dx * dx;
      if (best_d < 0 || d < best_d) {
        best_d = d;
        best = {x, y};
      }
    }
  }
  return best;
}

// Binary dilation with a filled kernel_h x kernel_w rectangle anchored at its
// centre. Separable: a row pass then a column pass.
inline BinaryMask dilate(const BinaryMask& m, int kernel_h, int kernel_w) {
  if (kernel_h < 1 || kernel_w < 1 || kernel_h % 2 == 0 || kernel_w % 2 == 0) {
    throw ValueError("dilation kernel must have odd positive sides, got " + std::to_string(kernel_h) + "x" +
                     std::to_string(kernel_w));
  }
  const int ry = kernel_h / 2;
  const int rx = kernel_w / 2;
  const int h = m.height();
  const int w = m.width();
  BinaryMask rows(h, w);
  for (int y = 0; y < h; ++y) {
    int last = -1 - rx;  // most recent set column
    for (int x = 0; x < w + rx; ++x) {
      if (x < w && m.at(y, x)) last = x;
      const int target = x - rx;
      if (target >= 0 && x - last <= 2 * rx) rows.set(y, target);
    }
  }
  BinaryMask out(h, w);
  for (int x = 0; x < w; ++x) {
    int last = -1 - ry;
    for (int y = 0; y < h + ry; ++y) {
      if (y < h && rows.at(y, x)) last = y;
      const int target = y - ry;
      if (target >= 0 && y - last <= 2 * ry) out.set(target, x);
    }
  }
  return out;
}

inline int odd_ceil(double v) {
  int k = static_cast<int>(std::ceil(v));
  if (k < 1) k = 1;
  return k % 2 == 0 ? k + 1 : k;
}

struct BandSet {
  std::array<BinaryMask, kBandCount> bands;  // band 1 first
  Click center;
  int kernel_h = 1;
  int kernel_w = 1;
};

// Bands grow outward from the centroid by repeated dilation with a kernel one
// fifth of the bounding box (rounded up to odd); each is clipped to the
// instance and the fifth takes everything left over.
inline BandSet make_bands(const BinaryMask& instance) {
  const auto box = instance.bounding_box();
  if (!box) throw ValueError("make_bands: empty instance mask");
  BandSet s;
  s.center = centroid(instance);
  s.kernel_h = odd_ceil(box->height() / 5.0);
  s.kernel_w = odd_ceil(box->width() / 5.0);

  BinaryMask grown(instance.height(), instance.width());
  grown.set(s.center.y, s.center.x);
  BinaryMask claimed(instance.height(), instance.width());
  for (int k = 0; k < kBandCount; ++k) {
    BinaryMask band(instance.height(), instance.width());
    if (k < kBandCount - 1) grown = dilate(grown, s.kernel_h, s.kernel_w);
    for (int y = 0; y < instance.height(); ++y) {
      for (int x = 0; x < instance.width(); ++x) {
        if (!instance.at(y, x) || claimed.at(y, x)) continue;
        if (k == kBandCount - 1 || grown.at(y, x)) {
          band.set(y, x);
          claimed.set(y, x);
        }
      }
    }
    s.bands[k] = std::move(band);
  }
  return s;
}

struct SimulatedClick {
  Click click;
  int band = 1;  // 1..5, the band whose quota this click fills
};

namespace detail {

// Uniform integer in [0, n) by rejection, so draws depend only on the
// engine's output sequence and not on the library's distribution code.
inline std::size_t uniform_below(std::mt19937_64& rng, std::size_t n) {
  const std::uint64_t range = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % range;
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return static_cast<std::size_t>(v % range);
}

inline std::vector<Click> draw(std::mt19937_64& rng, std::vector<Click> pool, int count) {
  std::vector<Click> out;
  if (pool.size() >= static_cast<std::size_t>(count)) {
    // Partial Fisher-Yates: without replacement.
    for (int i = 0; i < count; ++i) {
      const std::size_t j = i + uniform_below(rng, pool.size() - i);
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
  } else {
    for (int i = 0; i < count; ++i) out.push_back(pool[uniform_below(rng, pool.size())]);
  }
  return out;
}

}  // namespace detail

// Five clicks per band; a band with no pixels draws its quota from the whole
// instance instead.
inline std::vector<SimulatedClick> sample_clicks(const BandSet& bands, std::uint64_t seed,
                                                 int per_band = kClicksPerBand) {
  if (bands.bands[0].empty()) throw ValueError("sample_clicks: band 1 is empty");
  std::mt19937_64 rng(seed);
  BinaryMask all(bands.bands[0].height(), bands.bands[0].width());
  for (const BinaryMask& b : bands.bands) {
    for (const Click& c : b.pixels()) all.set(c.y, c.x);
  }
  std::vector<SimulatedClick> out;
  for (int k = 0; k < kBandCount; ++k) {
    const BinaryMask& band = bands.bands[k];
    const std::vector<Click> pool = band.empty() ? all.pixels() : band.pixels();
    for (const Click& c : detail::draw(rng, pool, per_band)) out.push_back({c, k + 1});
  }
  return out;
}

// Per-instance seed so each instance's clicks do not depend on which other
// instances are simulated alongside it.
inline std::uint64_t instance_seed(std::uint64_t seed, const std::string& instance_id) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char ch : instance_id) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::uint64_t z = seed ^ h;  // splitmix64 finalizer
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::vector<SimulatedClick> simulate_clicks(const BinaryMask& instance, std::uint64_t seed) {
  return sample_clicks(make_bands(instance), seed);
}

}  // namespace rftrace
