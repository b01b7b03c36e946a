#pragma once

// Binary netpbm images: PGM (P5) masks and PPM (P6) RGB images, 8-bit only.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "rftrace/error.hpp"
#include "rftrace/mask.hpp"
#include "rftrace/tensor.hpp"

namespace rftrace {

namespace detail {

struct Netpbm {
  std::string magic;
  int width = 0;
  int height = 0;
  int maxval = 0;
  std::vector<std::uint8_t> pixels;
};

inline Netpbm read_netpbm(const std::filesystem::path& path, const char* magic, int samples) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) { return FormatError(path.string() + ": " + why); };

  // Header tokens are separated by whitespace; '#' starts a comment line.
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') t.push_back(static_cast<char>(bytes[pos++]));
    if (t.empty()) throw fail("truncated header");
    return t;
  };
  auto number = [&](const char* what) {
    const std::string t = token();
    for (char c : t) {
      if (!std::isdigit(static_cast<unsigned char>(c))) throw fail(std::string("bad ") + what + " \"" + t + "\"");
    }
    if (t.size() > 9) throw fail(std::string(what) + " too large");
    return std::stoi(t);
  };

  Netpbm img;
  img.magic = token();
  if (img.magic != magic) throw fail("expected " + std::string(magic) + " image, found \"" + img.magic + "\"");
  img.width = number("width");
  img.height = number("height");
  img.maxval = number("maxval");
  if (img.width < 1 || img.height < 1) throw fail("empty image");
  if (img.maxval < 1 || img.maxval > 255) throw fail("only 8-bit images are supported (maxval " + std::to_string(img.maxval) + ")");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw fail("missing separator after header");
  ++pos;
  const std::size_t n = static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height) * samples;
  if (bytes.size() - pos < n) throw fail("pixel data truncated");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

inline void write_netpbm(const std::filesystem::path& path, const char* magic, int width, int height,
                         const std::vector<std::uint8_t>& pixels) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  f << magic << '\n' << width << ' ' << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!f) throw FormatError("failed writing " + path.string());
}

}  // namespace detail

// Any non-zero sample is foreground.
inline BinaryMask read_pgm_mask(const std::filesystem::path& path) {
  const detail::Netpbm img = detail::read_netpbm(path, "P5", 1);
  BinaryMask m(img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (img.pixels[static_cast<std::size_t>(y) * img.width + x] != 0) m.set(y, x);
    }
  }
  return m;
}

inline void write_pgm_mask(const std::filesystem::path& path, const BinaryMask& m) {
  std::vector<std::uint8_t> px(m.bits().size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = m.bits()[i] ? 255 : 0;
  detail::write_netpbm(path, "P5", m.width(), m.height(), px);
}

// RGB image as a 3 x H x W tensor scaled to [0, 1].
inline Tensor read_ppm(const std::filesystem::path& path) {
  const detail::Netpbm img = detail::read_netpbm(path, "P6", 3);
  Tensor t(3, img.height, img.width);
  const float scale = 1.0f / static_cast<float>(img.maxval);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const std::size_t base = (static_cast<std::size_t>(y) * img.width + x) * 3;
      for (int c = 0; c < 3; ++c) t.at(c, y, x) = static_cast<float>(img.pixels[base + c]) * scale;
    }
  }
  return t;
}

inline void write_ppm(const std::filesystem::path& path, const Tensor& rgb) {
  if (rgb.channels() != 3) throw ShapeError("write_ppm: need 3 channels, got " + std::to_string(rgb.channels()));
  std::vector<std::uint8_t> px(static_cast<std::size_t>(rgb.height()) * rgb.width() * 3);
  for (int y = 0; y < rgb.height(); ++y) {
    for (int x = 0; x < rgb.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(rgb.at(c, y, x), 0.0f, 1.0f);
        px[(static_cast<std::size_t>(y) * rgb.width() + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  detail::write_netpbm(path, "P6", rgb.width(), rgb.height(), px);
}

}  // namespace rftrace
