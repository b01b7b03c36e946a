#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rftrace/error.hpp"
#include "rftrace/rect.hpp"

namespace rftrace {

struct Shape {
  int channels = 1;
  int height = 1;
  int width = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(width);
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return std::to_string(s.channels) + "x" + std::to_string(s.height) + "x" + std::to_string(s.width);
}

// Single-image feature map, channels x height x width, row-major float32.
class Tensor {
 public:
  Tensor() : Tensor(1, 1, 1) {}
  Tensor(int channels, int height, int width, float fill = 0.0f)
      : Tensor(Shape{channels, height, width}, fill) {}
  explicit Tensor(Shape shape, float fill = 0.0f) : shape_(checked(shape)), data_(shape.size(), fill) {}
  Tensor(Shape shape, std::vector<float> data) : shape_(checked(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       to_string(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  int channels() const { return shape_.channels; }
  int height() const { return shape_.height; }
  int width() const { return shape_.width; }

  float& at(int c, int y, int x) { return data_[index(c, y, x)]; }
  float at(int c, int y, int x) const { return data_[index(c, y, x)]; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  std::span<float> plane(int c) {
    return std::span<float>(data_).subspan(static_cast<std::size_t>(c) * plane_size(), plane_size());
  }
  std::span<const float> plane(int c) const {
    return std::span<const float>(data_).subspan(static_cast<std::size_t>(c) * plane_size(), plane_size());
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  static Shape checked(Shape s) {
    if (s.channels < 1 || s.height < 1 || s.width < 1) {
      throw ShapeError("tensor dimensions must be >= 1, got " + to_string(s));
    }
    return s;
  }
  std::size_t plane_size() const {
    return static_cast<std::size_t>(shape_.height) * static_cast<std::size_t>(shape_.width);
  }
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * shape_.height + y) * shape_.width + x;
  }

  Shape shape_;
  std::vector<float> data_;
};

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                     " differ");
  }
  float worst = 0.0f;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    const float d = std::fabs(a.data()[i] - b.data()[i]);
    if (std::isnan(d)) return std::numeric_limits<float>::infinity();
    worst = std::max(worst, d);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Convolution

struct ConvAttrs {
  int kernel_h = 1;
  int kernel_w = 1;
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;
  int dilation_h = 1;
  int dilation_w = 1;
  int in_channels = 1;
  int out_channels = 1;

  void validate() const {
    if (kernel_h < 1 || kernel_w < 1) throw ShapeError("conv: kernel dims must be >= 1");
    if (stride_h < 1 || stride_w < 1) throw ShapeError("conv: stride must be >= 1");
    if (pad_h < 0 || pad_w < 0) throw ShapeError("conv: padding must be >= 0");
    if (dilation_h < 1 || dilation_w < 1) throw ShapeError("conv: dilation must be >= 1");
    if (in_channels < 1 || out_channels < 1) throw ShapeError("conv: channel counts must be >= 1");
  }

  std::size_t weight_count() const {
    return static_cast<std::size_t>(out_channels) * in_channels * kernel_h * kernel_w;
  }

  // floor((in + 2 pad - dilation (kernel - 1) - 1) / stride) + 1, per axis.
  std::pair<int, int> output_dims(int in_h, int in_w) const {
    const int span_h = in_h + 2 * pad_h - dilation_h * (kernel_h - 1) - 1;
    const int span_w = in_w + 2 * pad_w - dilation_w * (kernel_w - 1) - 1;
    if (span_h < 0 || span_w < 0) {
      throw ShapeError("conv: kernel " + std::to_string(kernel_h) + "x" + std::to_string(kernel_w) +
                       " does not fit a padded " + std::to_string(in_h) + "x" + std::to_string(in_w) +
                       " input");
    }
    return {span_h / stride_h + 1, span_w / stride_w + 1};
  }

  friend bool operator==(const ConvAttrs&, const ConvAttrs&) = default;
};

// Weights are laid out [out][in][kh][kw]; an empty bias means no bias.
inline Tensor conv2d(const Tensor& input, std::span<const float> weights, std::span<const float> bias,
                     const ConvAttrs& attrs) {
  attrs.validate();
  if (input.channels() != attrs.in_channels) {
    throw ShapeError("conv: input has " + std::to_string(input.channels()) + " channels, attrs expect " +
                     std::to_string(attrs.in_channels));
  }
  if (weights.size() != attrs.weight_count()) {
    throw ShapeError("conv: weight array has " + std::to_string(weights.size()) + " values, expected " +
                     std::to_string(attrs.weight_count()));
  }
  if (!bias.empty() && bias.size() != static_cast<std::size_t>(attrs.out_channels)) {
    throw ShapeError("conv: bias has " + std::to_string(bias.size()) + " values, expected " +
                     std::to_string(attrs.out_channels));
  }
  const auto [out_h, out_w] = attrs.output_dims(input.height(), input.width());
  const int in_h = input.height();
  const int in_w = input.width();
  Tensor out(attrs.out_channels, out_h, out_w);

  // Accumulate plane by plane; every output still sums its terms in
  // (ci, ky, kx) order, so cropped and full runs add identical sequences.
  for (int co = 0; co < attrs.out_channels; ++co) {
    std::span<float> dst = out.plane(co);
    for (int ci = 0; ci < attrs.in_channels; ++ci) {
      std::span<const float> src = input.plane(ci);
      for (int ky = 0; ky < attrs.kernel_h; ++ky) {
        for (int kx = 0; kx < attrs.kernel_w; ++kx) {
          const float w =
              weights[((static_cast<std::size_t>(co) * attrs.in_channels + ci) * attrs.kernel_h + ky) *
                          attrs.kernel_w + kx];
          for (int oy = 0; oy < out_h; ++oy) {
            const int iy = oy * attrs.stride_h - attrs.pad_h + ky * attrs.dilation_h;
            if (iy < 0 || iy >= in_h) continue;
            const float* row = src.data() + static_cast<std::size_t>(iy) * in_w;
            float* orow = dst.data() + static_cast<std::size_t>(oy) * out_w;
            for (int ox = 0; ox < out_w; ++ox) {
              const int ix = ox * attrs.stride_w - attrs.pad_w + kx * attrs.dilation_w;
              if (ix < 0 || ix >= in_w) continue;
              orow[ox] += w * row[ix];
            }
          }
        }
      }
    }
    if (!bias.empty()) {
      for (float& v : dst) v += bias[co];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pointwise

enum class PointwiseKind { kRelu, kSigmoid, kBatchNorm };

// batchnorm is the inference form with folded running statistics:
// y = x * scale[c] + shift[c].
inline Tensor pointwise(const Tensor& input, PointwiseKind kind, std::span<const float> scale = {},
                        std::span<const float> shift = {}) {
  Tensor out(input.shape());
  switch (kind) {
    case PointwiseKind::kRelu:
      std::transform(input.data().begin(), input.data().end(), out.data().begin(),
                     [](float x) { return std::max(x, 0.0f); });
      break;
    case PointwiseKind::kSigmoid:
      std::transform(input.data().begin(), input.data().end(), out.data().begin(),
                     [](float x) { return 1.0f / (1.0f + std::exp(-x)); });
      break;
    case PointwiseKind::kBatchNorm: {
      const auto c = static_cast<std::size_t>(input.channels());
      if (scale.size() != c || shift.size() != c) {
        throw ShapeError("batchnorm: scale/shift lengths " + std::to_string(scale.size()) + "/" +
                         std::to_string(shift.size()) + " do not match " + std::to_string(c) +
                         " channels");
      }
      for (int ch = 0; ch < input.channels(); ++ch) {
        std::span<const float> src = input.plane(ch);
        std::span<float> dst = out.plane(ch);
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] * scale[ch] + shift[ch];
      }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling (no padding)

inline Tensor maxpool2d(const Tensor& input, int kernel, int stride) {
  if (kernel < 1 || stride < 1) throw ShapeError("maxpool: kernel and stride must be >= 1");
  if (kernel > input.height() || kernel > input.width()) {
    throw ShapeError("maxpool: kernel " + std::to_string(kernel) + " larger than input " +
                     to_string(input.shape()));
  }
  const int out_h = (input.height() - kernel) / stride + 1;
  const int out_w = (input.width() - kernel) / stride + 1;
  Tensor out(input.channels(), out_h, out_w);
  for (int c = 0; c < input.channels(); ++c) {
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox) {
        float best = input.at(c, oy * stride, ox * stride);
        for (int ky = 0; ky < kernel; ++ky) {
          for (int kx = 0; kx < kernel; ++kx) {
            best = std::max(best, input.at(c, oy * stride + ky, ox * stride + kx));
          }
        }
        out.at(c, oy, ox) = best;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear upsampling, half-pixel centres (align_corners = false).

inline void check_upsample_scale(int scale) {
  if (scale != 2 && scale != 4) {
    throw ShapeError("upsample: scale must be 2 or 4, got " + std::to_string(scale));
  }
}

// Computes the rows/cols `out_rect` of upsampling a `src_h` x `src_w` map by
// `scale`, reading the source from `patch`, whose element (0,0) sits at
// (patch_top, patch_left) of the source frame. Source coordinates are clamped
// to the true source bounds, and a neighbour with zero blend weight is never
// read, so the patch only has to cover the rows/cols that actually contribute.
inline Tensor upsample_window(const Tensor& patch, int patch_top, int patch_left, int src_h, int src_w,
                              int scale, const Rect& out_rect) {
  check_upsample_scale(scale);
  if (!out_rect.valid()) throw ShapeError("upsample: invalid output rect " + to_string(out_rect));

  struct Tap {
    int i0;
    int i1;
    float frac;
  };
  auto taps = [scale](int first, int last, int src_extent) {
    std::vector<Tap> out;
    out.reserve(static_cast<std::size_t>(last - first + 1));
    const float inv = 1.0f / static_cast<float>(scale);
    for (int d = first; d <= last; ++d) {
      float s = (static_cast<float>(d) + 0.5f) * inv - 0.5f;
      s = std::clamp(s, 0.0f, static_cast<float>(src_extent - 1));
      const int i0 = static_cast<int>(std::floor(s));
      const int i1 = std::min(i0 + 1, src_extent - 1);
      out.push_back({i0, i1, s - static_cast<float>(i0)});
    }
    return out;
  };
  const std::vector<Tap> rows = taps(out_rect.top, out_rect.bottom, src_h);
  const std::vector<Tap> cols = taps(out_rect.left, out_rect.right, src_w);

  auto fetch = [&](int c, int y, int x) -> float {
    const int py = y - patch_top;
    const int px = x - patch_left;
    if (py < 0 || px < 0 || py >= patch.height() || px >= patch.width()) {
      throw ShapeError("upsample: source pixel (" + std::to_string(y) + "," + std::to_string(x) +
                       ") not covered by the input patch");
    }
    return patch.at(c, py, px);
  };
  auto row_value = [&](int c, int y, const Tap& col) {
    const float a = fetch(c, y, col.i0);
    if (col.frac == 0.0f) return a;
    return (1.0f - col.frac) * a + col.frac * fetch(c, y, col.i1);
  };

  Tensor out(patch.channels(), out_rect.height(), out_rect.width());
  for (int c = 0; c < patch.channels(); ++c) {
    for (std::size_t oy = 0; oy < rows.size(); ++oy) {
      const Tap& r = rows[oy];
      for (std::size_t ox = 0; ox < cols.size(); ++ox) {
        const float upper = row_value(c, r.i0, cols[ox]);
        float v = upper;
        if (r.frac != 0.0f) v = (1.0f - r.frac) * upper + r.frac * row_value(c, r.i1, cols[ox]);
        out.at(c, static_cast<int>(oy), static_cast<int>(ox)) = v;
      }
    }
  }
  return out;
}

inline Tensor bilinear_upsample(const Tensor& input, int scale) {
  check_upsample_scale(scale);
  return upsample_window(input, 0, 0, input.height(), input.width(), scale,
                         Rect::full(input.height() * scale, input.width() * scale));
}

// ---------------------------------------------------------------------------
// Structural ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  return out;
}

inline Tensor concat(const Tensor& a, const Tensor& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw ShapeError("concat: spatial dims of " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                     " differ");
  }
  std::vector<float> data;
  data.reserve(a.data().size() + b.data().size());
  data.insert(data.end(), a.data().begin(), a.data().end());
  data.insert(data.end(), b.data().begin(), b.data().end());
  return Tensor(Shape{a.channels() + b.channels(), a.height(), a.width()}, std::move(data));
}

inline Tensor crop(const Tensor& input, const Rect& rect) {
  if (!rect.valid() || !Rect::full(input.height(), input.width()).contains(rect)) {
    throw ShapeError("crop: rect " + to_string(rect) + " outside " + to_string(input.shape()));
  }
  Tensor out(input.channels(), rect.height(), rect.width());
  for (int c = 0; c < input.channels(); ++c) {
    for (int y = 0; y < rect.height(); ++y) {
      const float* src = &input.plane(c)[static_cast<std::size_t>(rect.top + y) * input.width() + rect.left];
      std::copy(src, src + rect.width(), &out.plane(c)[static_cast<std::size_t>(y) * rect.width()]);
    }
  }
  return out;
}

inline Tensor pad(const Tensor& input, const Margins& m, float value = 0.0f) {
  if (m.top < 0 || m.bottom < 0 || m.left < 0 || m.right < 0) throw ShapeError("pad: negative margin");
  if (m.zero()) return input;
  Tensor out(input.channels(), input.height() + m.top + m.bottom, input.width() + m.left + m.right, value);
  for (int c = 0; c < input.channels(); ++c) {
    for (int y = 0; y < input.height(); ++y) {
      const float* src = &input.plane(c)[static_cast<std::size_t>(y) * input.width()];
      std::copy(src, src + input.width(),
                &out.plane(c)[static_cast<std::size_t>(y + m.top) * out.width() + m.left]);
    }
  }
  return out;
}

}  // namespace rftrace
