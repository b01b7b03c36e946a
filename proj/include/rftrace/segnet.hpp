#pragma once

// Click-conditioned instance segmentation on a small FPN network with
// seeded random weights. segment() runs two traced phases:
//   1. one pixel of every level's head output at the click location
//      (controller parameters, box distances, centerness);
//   2. the mask branch over the box-bounded P3 rect, followed by the dynamic
//      1x1 mask head built from the chosen level's parameters.
// Phase 2 reuses whatever phase 1 already computed.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rftrace/error.hpp"
#include "rftrace/exec.hpp"
#include "rftrace/graph.hpp"
#include "rftrace/mask.hpp"
#include "rftrace/models.hpp"
#include "rftrace/rft.hpp"
#include "rftrace/tensor.hpp"
#include "rftrace/weights.hpp"

namespace rftrace {

inline constexpr int kMaskParamCount = 169;
inline constexpr int kMaskFeatureChannels = 8;
inline constexpr int kHeadChannels = kMaskParamCount + 4 + 1;  // controller | box | centerness
inline constexpr float kRelCoordScale = 64.0f;
inline constexpr int kMaskUpsample = 4;

struct PyramidLevel {
  std::string name;
  int stride = 8;
  friend bool operator==(const PyramidLevel&, const PyramidLevel&) = default;
};

struct PyramidConfig {
  Shape input{3, 256, 256};
  int width = 16;  // stem / FPN / head tower channels
  int tower_depth = 4;
  int mask_hidden = 32;
  std::vector<PyramidLevel> levels{{"P3", 8}, {"P4", 16}, {"P5", 32}, {"P6", 64}, {"P7", 128}};

  // The backbone is built for exactly these five levels; the fields exist so
  // the pyramid is described in the bundle rather than implied.
  void validate() const {
    static const std::vector<PyramidLevel> expected{{"P3", 8}, {"P4", 16}, {"P5", 32}, {"P6", 64}, {"P7", 128}};
    for (std::size_t i = 1; i < levels.size(); ++i) {
      if (levels[i].stride <= levels[i - 1].stride) throw ValueError("pyramid strides must strictly increase");
    }
    for (const PyramidLevel& l : levels) {
      if (l.stride < 1 || (l.stride & (l.stride - 1)) != 0) {
        throw ValueError("pyramid stride " + std::to_string(l.stride) + " is not a power of two");
      }
    }
    if (levels != expected) throw ValueError("the FPN builder supports levels P3..P7 with strides 8..128");
    if (width < 1 || tower_depth < 0 || mask_hidden < 1) throw ValueError("pyramid widths must be positive");
    if (input.channels < 1) throw ValueError("input needs at least one channel");
    const int deepest = levels.back().stride;
    if (input.height < deepest || input.width < deepest) {
      throw ValueError("input " + to_string(input) + " is smaller than the deepest stride " + std::to_string(deepest));
    }
    if (input.height % 32 != 0 || input.width % 32 != 0) {
      throw ValueError("input height and width must be multiples of 32 for the FPN merges, got " + to_string(input));
    }
  }
};

inline nlohmann::json to_json(const PyramidConfig& c) {
  nlohmann::json levels = nlohmann::json::array();
  for (const PyramidLevel& l : c.levels) levels.push_back({{"name", l.name}, {"stride", l.stride}});
  return {{"input_shape", {c.input.channels, c.input.height, c.input.width}},
          {"width", c.width},
          {"tower_depth", c.tower_depth},
          {"mask_hidden", c.mask_hidden},
          {"levels", levels}};
}

inline PyramidConfig pyramid_config_from_json(const nlohmann::json& j) {
  PyramidConfig c;
  try {
    const auto s = j.at("input_shape").get<std::vector<int>>();
    if (s.size() != 3) throw FormatError("segnet config: input_shape must be [C, H, W]");
    c.input = {s[0], s[1], s[2]};
    c.width = j.at("width").get<int>();
    c.tower_depth = j.at("tower_depth").get<int>();
    c.mask_hidden = j.at("mask_hidden").get<int>();
    c.levels.clear();
    for (const auto& l : j.at("levels")) c.levels.push_back({l.at("name").get<std::string>(), l.at("stride").get<int>()});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("segnet config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Graph

inline std::string head_output_id(const std::string& level) { return "head/" + level + "/out"; }
inline const std::string kMaskFeatureId = "mask/feat";

// Backbone (two strided stem convs, four stages of two basic blocks), a
// top-down FPN over C3..C5 with P6/P7 on top, a head tower per level and the
// P3 mask branch, all in one graph whose designated output is the mask
// feature map. Per-level graphs come from with_output(level name).
inline GraphSpec build_backbone(const PyramidConfig& cfg) {
  cfg.validate();
  std::vector<NodeSpec> nodes{node::input("image")};
  auto conv = [&](const std::string& id, const std::string& src, int cin, int cout, int k, int s = 1) {
    nodes.push_back(node::conv(id, src, cin, cout, k, s, k / 2));
    return id;
  };
  auto bn = [&](const std::string& id, const std::string& src) {
    nodes.push_back(node::batchnorm(id, src));
    return id;
  };
  auto relu = [&](const std::string& id, const std::string& src) {
    nodes.push_back(node::relu(id, src));
    return id;
  };

  const int w = cfg.width;
  std::string x = relu("stem/relu1", bn("stem/bn1", conv("stem/conv1", "image", cfg.input.channels, w, 3, 2)));
  x = relu("stem/relu2", bn("stem/bn2", conv("stem/conv2", x, w, w, 3, 2)));

  int cin = w;
  std::vector<std::string> stage_out;
  for (int stage = 0; stage < 4; ++stage) {
    const int cout = w << stage;
    for (int b = 0; b < 2; ++b) {
      const std::string p = "res" + std::to_string(stage + 2) + "." + std::to_string(b) + "/";
      const int stride = (b == 0 && stage > 0) ? 2 : 1;
      std::string y = relu(p + "relu1", bn(p + "bn1", conv(p + "conv1", x, cin, cout, 3, stride)));
      y = bn(p + "bn2", conv(p + "conv2", y, cout, cout, 3));
      std::string shortcut = x;
      if (stride != 1 || cin != cout) shortcut = bn(p + "down/bn", conv(p + "down", x, cin, cout, 1, stride));
      nodes.push_back(node::add(p + "add", y, shortcut));
      x = relu(p + "out", p + "add");
      cin = cout;
    }
    stage_out.push_back(x);
  }

  conv("fpn/lat5", stage_out[3], 8 * w, w, 1);
  conv("fpn/lat4", stage_out[2], 4 * w, w, 1);
  conv("fpn/lat3", stage_out[1], 2 * w, w, 1);
  nodes.push_back(node::upsample("fpn/up5", "fpn/lat5", 2));
  nodes.push_back(node::add("fpn/merge4", "fpn/lat4", "fpn/up5"));
  nodes.push_back(node::upsample("fpn/up4", "fpn/merge4", 2));
  nodes.push_back(node::add("fpn/merge3", "fpn/lat3", "fpn/up4"));
  conv("P3", "fpn/merge3", w, w, 3);
  conv("P4", "fpn/merge4", w, w, 3);
  conv("P5", "fpn/lat5", w, w, 3);
  conv("P6", "P5", w, w, 3, 2);
  relu("P6/relu", "P6");
  conv("P7", "P6/relu", w, w, 3, 2);

  for (const PyramidLevel& level : cfg.levels) {
    const std::string p = "head/" + level.name + "/";
    std::string y = level.name;
    for (int i = 0; i < cfg.tower_depth; ++i) {
      const std::string t = p + "tower" + std::to_string(i);
      y = relu(t + "/relu", bn(t + "/bn", conv(t, y, w, w, 3)));
    }
    conv(p + "ctrl", y, w, kMaskParamCount, 3);
    conv(p + "box", y, w, 4, 3);
    conv(p + "ctr", y, w, 1, 3);
    nodes.push_back(node::concat(p + "cat", p + "ctrl", p + "box"));
    nodes.push_back(node::concat(head_output_id(level.name), p + "cat", p + "ctr"));
  }

  relu("mask/relu1", conv("mask/conv1", "P3", w, cfg.mask_hidden, 3));
  conv(kMaskFeatureId, "mask/relu1", cfg.mask_hidden, kMaskFeatureChannels, 3);
  return GraphSpec(cfg.input, kMaskFeatureId, std::move(nodes));
}

// Seeded weights. Head towers and sibling heads are shared across levels:
// every level's head nodes carry a copy of the first level's parameters.
inline WeightStore segnet_weights(const GraphSpec& g, const PyramidConfig& cfg, std::uint64_t seed) {
  WeightStore w = random_weights(g, seed);
  const std::string first = "head/" + cfg.levels.front().name + "/";
  for (std::size_t li = 1; li < cfg.levels.size(); ++li) {
    const std::string other = "head/" + cfg.levels[li].name + "/";
    for (const NodeSpec& n : g.nodes()) {
      if (n.id.rfind(first, 0) != 0) continue;
      const std::string twin = other + n.id.substr(first.size());
      for (WeightRole role : {WeightRole::kWeight, WeightRole::kBias, WeightRole::kScale, WeightRole::kShift}) {
        if (w.has(n.id, role)) w.set(twin, role, w.get(n.id, role));
      }
    }
  }
  return w;
}

struct SegNet {
  PyramidConfig config;
  GraphSpec graph;
  WeightStore weights;
  ShapeMap shapes;
  std::uint64_t seed = 0;
};

inline SegNet make_segnet(const PyramidConfig& cfg, std::uint64_t seed) {
  GraphSpec g = build_backbone(cfg);
  WeightStore w = segnet_weights(g, cfg, seed);
  ShapeMap shapes = infer_shapes(g);
  return {cfg, std::move(g), std::move(w), std::move(shapes), seed};
}

// ---------------------------------------------------------------------------
// Click mapping and heads

// Feature cell (column a, row b) on a level.
struct Location {
  int a = 0;
  int b = 0;
  friend bool operator==(const Location&, const Location&) = default;
};

inline void check_click(const Click& c, int height, int width) {
  if (c.x < 0 || c.y < 0 || c.x >= width || c.y >= height) {
    throw ValueError("click (" + std::to_string(c.x) + "," + std::to_string(c.y) + ") outside the " +
                     std::to_string(width) + "x" + std::to_string(height) + " image");
  }
}

// Inverse of cell -> image centre floor(s/2) + i*s: rounds (x - floor(s/2))/s
// with ties going down, then clamps to the level.
inline Location click_to_location(const Click& c, int stride, int level_h, int level_w) {
  auto axis = [stride](int v, int extent) {
    const int num = v - stride / 2;
    const int i = detail::ceil_div(2 * num - stride, 2 * stride);
    return std::clamp(i, 0, extent - 1);
  };
  return {axis(c.x, level_w), axis(c.y, level_h)};
}

struct BoxPrediction {
  float l = 0.0f;  // distances in image pixels from the location centre
  float t = 0.0f;
  float r = 0.0f;
  float b = 0.0f;
  float score = 0.0f;  // centerness
};

struct HeadOutput {
  std::vector<float> theta;  // kMaskParamCount controller values
  BoxPrediction box;
};

inline float sigmoid(float v) { return 1.0f / (1.0f + std::exp(-v)); }

// Splits one head output column (controller | box | centerness) into its
// parts. Box distances are exp(raw) * stride, centerness is sigmoid(raw).
inline HeadOutput head_forward(std::span<const float> column, int stride) {
  if (column.size() != static_cast<std::size_t>(kHeadChannels)) {
    throw ShapeError("head output must have " + std::to_string(kHeadChannels) + " channels, got " +
                     std::to_string(column.size()));
  }
  HeadOutput h;
  h.theta.assign(column.begin(), column.begin() + kMaskParamCount);
  const float* box = column.data() + kMaskParamCount;
  const float s = static_cast<float>(stride);
  h.box.l = std::exp(box[0]) * s;
  h.box.t = std::exp(box[1]) * s;
  h.box.r = std::exp(box[2]) * s;
  h.box.b = std::exp(box[3]) * s;
  h.box.score = sigmoid(column[kHeadChannels - 1]);
  return h;
}

// Column of a C x H x W tensor at (row, col).
inline std::vector<float> column_at(const Tensor& t, int row, int col) {
  std::vector<float> v(static_cast<std::size_t>(t.channels()));
  for (int c = 0; c < t.channels(); ++c) v[c] = t.at(c, row, col);
  return v;
}

// Highest centerness wins; ties go to the finer level. `forced` overrides.
inline std::size_t select_level(std::span<const float> scores, std::optional<std::size_t> forced = std::nullopt) {
  if (scores.empty()) throw ValueError("select_level: no levels");
  if (forced) {
    if (*forced >= scores.size()) throw ValueError("select_level: forced level out of range");
    return *forced;
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

inline std::optional<std::size_t> level_index(const PyramidConfig& cfg, const std::string& name) {
  for (std::size_t i = 0; i < cfg.levels.size(); ++i) {
    if (cfg.levels[i].name == name) return i;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Dynamic mask head

struct MaskHeadParams {
  std::array<float, 80> w1{};  // [8 out][10 in]
  std::array<float, 8> b1{};
  std::array<float, 64> w2{};  // [8][8]
  std::array<float, 8> b2{};
  std::array<float, 8> w3{};  // [1][8]
  std::array<float, 1> b3{};
  friend bool operator==(const MaskHeadParams&, const MaskHeadParams&) = default;
};

inline MaskHeadParams unpack_mask_params(std::span<const float> theta) {
  if (theta.size() != static_cast<std::size_t>(kMaskParamCount)) {
    throw ValueError("mask head parameters: expected " + std::to_string(kMaskParamCount) + " values, got " +
                     std::to_string(theta.size()));
  }
  MaskHeadParams p;
  auto it = theta.begin();
  auto take = [&it](auto& dst) {
    std::copy(it, it + static_cast<std::ptrdiff_t>(dst.size()), dst.begin());
    it += static_cast<std::ptrdiff_t>(dst.size());
  };
  take(p.w1);
  take(p.b1);
  take(p.w2);
  take(p.b2);
  take(p.w3);
  take(p.b3);
  return p;
}

inline std::vector<float> pack_mask_params(const MaskHeadParams& p) {
  std::vector<float> out;
  out.reserve(kMaskParamCount);
  auto put = [&out](const auto& src) { out.insert(out.end(), src.begin(), src.end()); };
  put(p.w1);
  put(p.b1);
  put(p.w2);
  put(p.b2);
  put(p.w3);
  put(p.b3);
  return out;
}

// Relative coordinates of the cells of `region` (P3 frame) to the click cell:
// channel 0 = (col - a)/64, channel 1 = (row - b)/64.
inline Tensor rel_coord_map(const Location& click_p3, const Rect& region) {
  if (!region.valid()) throw ValueError("rel_coord_map: invalid region " + to_string(region));
  Tensor t(2, region.height(), region.width());
  for (int y = 0; y < region.height(); ++y) {
    for (int x = 0; x < region.width(); ++x) {
      t.at(0, y, x) = static_cast<float>(region.left + x - click_p3.a) / kRelCoordScale;
      t.at(1, y, x) = static_cast<float>(region.top + y - click_p3.b) / kRelCoordScale;
    }
  }
  return t;
}

inline Tensor rel_coord_map(const Location& click_p3, int height, int width) {
  return rel_coord_map(click_p3, Rect::full(height, width));
}

// Three dynamic 1x1 convs (10 -> 8 -> 8 -> 1, relu between) and a sigmoid,
// at the feature resolution.
inline Tensor dynamic_mask_head(const Tensor& features, const Tensor& rel, const MaskHeadParams& p) {
  if (features.channels() != kMaskFeatureChannels) {
    throw ShapeError("mask features need " + std::to_string(kMaskFeatureChannels) + " channels, got " +
                     std::to_string(features.channels()));
  }
  if (rel.channels() != 2 || rel.height() != features.height() || rel.width() != features.width()) {
    throw ShapeError("relative coordinates " + to_string(rel.shape()) + " do not match features " +
                     to_string(features.shape()));
  }
  ConvAttrs a1;
  a1.in_channels = kMaskFeatureChannels + 2;
  a1.out_channels = 8;
  ConvAttrs a2;
  a2.in_channels = 8;
  a2.out_channels = 8;
  ConvAttrs a3;
  a3.in_channels = 8;
  a3.out_channels = 1;
  Tensor x = concat(features, rel);
  x = pointwise(conv2d(x, p.w1, p.b1, a1), PointwiseKind::kRelu);
  x = pointwise(conv2d(x, p.w2, p.b2, a2), PointwiseKind::kRelu);
  return pointwise(conv2d(x, p.w3, p.b3, a3), PointwiseKind::kSigmoid);
}

// Mask probabilities at 4x the feature resolution.
inline Tensor mask_forward(const Tensor& features, const Tensor& rel, const MaskHeadParams& p) {
  return bilinear_upsample(dynamic_mask_head(features, rel, p), kMaskUpsample);
}

inline std::uint64_t dynamic_head_flops(long long cells) {
  const auto n = static_cast<std::uint64_t>(cells);
  // 2*(10*8 + 8*8 + 8*1) for the convs, 8 + 8 for the relus, 2 for the sigmoid.
  return n * (2 * (80 + 64 + 8) + 16 + 2);
}

// ---------------------------------------------------------------------------
// Pipeline

struct SegmentOptions {
  std::optional<std::string> level;  // force a pyramid level by name
  float box_margin = 0.1f;
  int fallback_window = 64;
  float threshold = 0.5f;
};

struct SegmentDiagnostics {
  std::string level;
  std::vector<float> centerness;  // per level, config order
  BoxPrediction box;
  Rect image_box;   // expanded, clamped, image pixels
  Rect p3_rect;     // mask-branch rect on P3
  bool fallback = false;
  std::uint64_t phase1_traced = 0;
  std::uint64_t phase2_traced = 0;
  std::uint64_t mask_head_traced = 0;
  std::uint64_t total_traced = 0;
  std::uint64_t total_full = 0;
  std::size_t reused_nodes = 0;

  double savings_ratio() const {
    return total_full == 0 ? 0.0 : 1.0 - static_cast<double>(total_traced) / static_cast<double>(total_full);
  }
};

struct SegmentResult {
  BinaryMask mask;
  Tensor probs;     // 1 x h x w mask probabilities over `probs_rect`
  Rect probs_rect;  // in the stride-2 mask frame
  std::vector<HeadOutput> heads;
  SegmentDiagnostics diagnostics;
};

namespace detail {

inline std::uint64_t region_flops(const GraphSpec& g, const ShapeMap& shapes, const TraceResult& t) {
  std::uint64_t total = 0;
  for (const auto& [id, r] : t.regions) {
    if (t.reused.count(id)) continue;
    total += node_flops(g.node(id), shapes.at(id).channels, r.height(), r.width());
  }
  return total;
}

// Image-pixel box from a head prediction at `loc`, grown by `margin` of its
// size per side and clamped. nullopt when it is empty or not finite.
inline std::optional<Rect> expanded_box(const BoxPrediction& box, const Location& loc, int stride, float margin,
                                        int height, int width) {
  const double cx = stride / 2 + static_cast<double>(loc.a) * stride;
  const double cy = stride / 2 + static_cast<double>(loc.b) * stride;
  double x0 = cx - box.l;
  double x1 = cx + box.r;
  double y0 = cy - box.t;
  double y1 = cy + box.b;
  const double mx = margin * (x1 - x0);
  const double my = margin * (y1 - y0);
  x0 -= mx;
  x1 += mx;
  y0 -= my;
  y1 += my;
  for (double v : {x0, x1, y0, y1}) {
    if (!std::isfinite(v)) return std::nullopt;
  }
  if (x1 < 0 || y1 < 0 || x0 > width - 1 || y0 > height - 1 || x1 < x0 || y1 < y0) return std::nullopt;
  const Rect r{static_cast<int>(std::floor(std::max(y0, 0.0))), static_cast<int>(std::floor(std::max(x0, 0.0))),
               static_cast<int>(std::ceil(std::min(y1, height - 1.0))),
               static_cast<int>(std::ceil(std::min(x1, width - 1.0)))};
  if (!r.valid()) return std::nullopt;
  return r;
}

// Stride-2 rect covered by the x4 upsample of a P3 rect.
inline Rect upsampled_rect(const Rect& p3) {
  return {p3.top * kMaskUpsample, p3.left * kMaskUpsample, p3.bottom * kMaskUpsample + kMaskUpsample - 1,
          p3.right * kMaskUpsample + kMaskUpsample - 1};
}

// Binarizes stride-2 probabilities into an image-frame mask (nearest
// neighbour: image pixel (y, x) reads mask cell (y/2, x/2)).
inline BinaryMask place_mask(const Tensor& probs, const Rect& probs_rect, int height, int width, float threshold) {
  BinaryMask m(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const int i = y / 2;
      const int j = x / 2;
      if (!probs_rect.contains(i, j)) continue;
      if (probs.at(0, i - probs_rect.top, j - probs_rect.left) >= threshold) m.set(y, x);
    }
  }
  return m;
}

}  // namespace detail

// Full-pipeline cost: every node at its full map, the dynamic head over all
// of P3 and the x4 upsample of its output.
inline std::uint64_t full_pipeline_flops(const SegNet& net) {
  std::uint64_t total = 0;
  for (const NodeSpec& n : net.graph.nodes()) {
    const Shape& s = net.shapes.at(n.id);
    total += node_flops(n, s.channels, s.height, s.width);
  }
  const Shape& p3 = net.shapes.at(kMaskFeatureId);
  total += dynamic_head_flops(static_cast<long long>(p3.height) * p3.width);
  total += node_flops(node::upsample("u", "x", kMaskUpsample), 1, p3.height * kMaskUpsample, p3.width * kMaskUpsample);
  return total;
}

inline SegmentResult segment(const SegNet& net, const Tensor& image, const Click& click,
                             const SegmentOptions& opt = {}) {
  const PyramidConfig& cfg = net.config;
  if (image.shape() != cfg.input) {
    throw ShapeError("image " + to_string(image.shape()) + " does not match the model input " + to_string(cfg.input));
  }
  check_click(click, image.height(), image.width());
  const GraphSpec& g = net.graph;

  // Phase 1: one head pixel per level.
  std::vector<Location> locs;
  std::vector<std::pair<std::string, Rect>> seeds;
  for (const PyramidLevel& level : cfg.levels) {
    const Shape& s = net.shapes.at(head_output_id(level.name));
    const Location loc = click_to_location(click, level.stride, s.height, s.width);
    locs.push_back(loc);
    seeds.emplace_back(head_output_id(level.name), Rect::pixel(loc.b, loc.a));
  }
  const TraceResult t1 = backtrace(g, net.shapes, seeds);
  FeatureCache cache;
  const auto heads = execute_trace(g, net.weights, image, t1, net.shapes, nullptr, nullptr, &cache);

  SegmentResult res;
  SegmentDiagnostics& d = res.diagnostics;
  for (std::size_t i = 0; i < cfg.levels.size(); ++i) {
    const Tensor& col = heads.at(head_output_id(cfg.levels[i].name));
    res.heads.push_back(head_forward(col.data(), cfg.levels[i].stride));
    d.centerness.push_back(res.heads.back().box.score);
  }
  std::optional<std::size_t> forced;
  if (opt.level) {
    forced = level_index(cfg, *opt.level);
    if (!forced) throw ValueError("unknown pyramid level \"" + *opt.level + "\"");
  }
  const std::size_t li = select_level(d.centerness, forced);
  const HeadOutput& head = res.heads[li];
  d.level = cfg.levels[li].name;
  d.box = head.box;
  const MaskHeadParams params = unpack_mask_params(head.theta);

  // Box -> P3 rect, or the fixed window around the click.
  const Shape& p3 = net.shapes.at(kMaskFeatureId);
  const int p3_stride = cfg.levels.front().stride;
  std::optional<Rect> box = detail::expanded_box(head.box, locs[li], cfg.levels[li].stride, opt.box_margin,
                                                 image.height(), image.width());
  if (!box) {
    d.fallback = true;
    const int half = opt.fallback_window / 2;
    box = clamp(Rect{click.y - half, click.x - half, click.y + half - 1, click.x + half - 1}, image.height(),
                image.width())
              .rect;
  }
  d.image_box = *box;
  d.p3_rect = clamp(Rect{box->top / p3_stride, box->left / p3_stride, box->bottom / p3_stride, box->right / p3_stride},
                    p3.height, p3.width)
                  .rect;

  // Phase 2: mask features over the cells the x4 upsample of p3_rect reads.
  const Rect out_rect = detail::upsampled_rect(d.p3_rect);
  const Rect feat_rect =
      clamp(inverse_map(out_rect, node::upsample("u", "x", kMaskUpsample)), p3.height, p3.width).rect;
  const RegionMap available = cached_regions(cache);
  const TraceResult t2 = backtrace(g, net.shapes, {{kMaskFeatureId, feat_rect}}, &available);
  const Tensor feat = execute_trace(g, net.weights, image, t2, net.shapes, nullptr, &cache).at(kMaskFeatureId);
  const Location click_p3 = click_to_location(click, p3_stride, p3.height, p3.width);
  const Tensor low = dynamic_mask_head(feat, rel_coord_map(click_p3, feat_rect), params);
  res.probs = upsample_window(low, feat_rect.top, feat_rect.left, p3.height, p3.width, kMaskUpsample, out_rect);
  res.probs_rect = out_rect;
  res.mask = detail::place_mask(res.probs, out_rect, image.height(), image.width(), opt.threshold);

  d.phase1_traced = detail::region_flops(g, net.shapes, t1);
  d.phase2_traced = detail::region_flops(g, net.shapes, t2);
  d.mask_head_traced = dynamic_head_flops(feat_rect.area()) +
                       node_flops(node::upsample("u", "x", kMaskUpsample), 1, out_rect.height(), out_rect.width());
  d.total_traced = d.phase1_traced + d.phase2_traced + d.mask_head_traced;
  d.total_full = full_pipeline_flops(net);
  d.reused_nodes = t2.reused.size();
  return res;
}

// Untraced reference: full maps everywhere, then the same level choice, box
// and crop. Used to check segment() against.
struct FullReference {
  std::vector<HeadOutput> heads;  // at the click location of each level
  Tensor probs;                   // 1 x (4*P3h) x (4*P3w)
};

inline FullReference segment_full(const SegNet& net, const Tensor& image, const Click& click,
                                  std::optional<std::size_t> level = std::nullopt) {
  const PyramidConfig& cfg = net.config;
  check_click(click, image.height(), image.width());
  std::vector<std::string> keep;
  for (const PyramidLevel& l : cfg.levels) keep.push_back(head_output_id(l.name));
  std::map<std::string, Tensor> kept;
  const ExecResult full = run_full(net.graph, net.weights, image, &kept, keep);

  FullReference ref;
  std::vector<float> scores;
  for (const PyramidLevel& l : cfg.levels) {
    const Tensor& t = kept.at(head_output_id(l.name));
    const Location loc = click_to_location(click, l.stride, t.height(), t.width());
    ref.heads.push_back(head_forward(column_at(t, loc.b, loc.a), l.stride));
    scores.push_back(ref.heads.back().box.score);
  }
  const std::size_t li = select_level(scores, level);
  const Shape& p3 = net.shapes.at(kMaskFeatureId);
  const Location click_p3 = click_to_location(click, cfg.levels.front().stride, p3.height, p3.width);
  ref.probs = mask_forward(full.output, rel_coord_map(click_p3, p3.height, p3.width),
                           unpack_mask_params(ref.heads[li].theta));
  return ref;
}

// ---------------------------------------------------------------------------
// Model bundle: graph.json (whole network), levels/<P>.json and
// heads/<P>.json (per-level views), mask.json, weights.json + weights.bin,
// segnet.json (config and seed).

inline void write_json_file(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream f(p);
  if (!f) throw FormatError("cannot write " + p.string());
  f << j.dump(1) << '\n';
}

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw FormatError("cannot read " + p.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

inline std::vector<std::filesystem::path> save_segnet(const SegNet& net, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "levels");
  fs::create_directories(dir / "heads");
  std::vector<fs::path> written;
  auto put = [&](const fs::path& p, const nlohmann::json& j) {
    write_json_file(p, j);
    written.push_back(p);
  };
  put(dir / "graph.json", to_json(net.graph));
  for (const PyramidLevel& l : net.config.levels) {
    put(dir / "levels" / (l.name + ".json"), to_json(net.graph.with_output(l.name)));
    put(dir / "heads" / (l.name + ".json"), to_json(net.graph.with_output(head_output_id(l.name))));
  }
  put(dir / "mask.json", to_json(net.graph.with_output(kMaskFeatureId)));
  put(dir / "segnet.json", {{"config", to_json(net.config)}, {"seed", net.seed}});
  save_weights(net.weights, dir / "weights.json");
  written.push_back(dir / "weights.json");
  written.push_back(blob_path_for(dir / "weights.json"));
  return written;
}

inline SegNet load_segnet(const std::filesystem::path& dir) {
  const nlohmann::json meta = read_json_file(dir / "segnet.json");
  if (!meta.contains("config")) throw FormatError("segnet.json: missing config");
  SegNet net{pyramid_config_from_json(meta["config"]), graph_from_json(read_json_file(dir / "graph.json")), {}, {}, 0};
  net.seed = meta.value("seed", std::uint64_t{0});
  net.weights = load_weights(dir / "weights.json");
  net.weights.validate_against(net.graph);
  net.shapes = infer_shapes(net.graph);
  for (const PyramidLevel& l : net.config.levels) {
    if (!net.graph.contains(head_output_id(l.name))) {
      throw FormatError("model graph has no head output for level " + l.name);
    }
  }
  if (net.shapes.at(kMaskFeatureId).channels != kMaskFeatureChannels) {
    throw FormatError("model mask features must have 8 channels");
  }
  return net;
}

}  // namespace rftrace
