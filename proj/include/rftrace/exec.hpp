#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rftrace/error.hpp"
#include "rftrace/graph.hpp"
#include "rftrace/rft.hpp"
#include "rftrace/tensor.hpp"
#include "rftrace/weights.hpp"

namespace rftrace {

struct ExecResult {
  Tensor output;
  int origin_row = 0;  // position of output(0,0) in the full output frame
  int origin_col = 0;
  std::map<std::string, Shape> node_shapes;
};

namespace detail {

inline Tensor apply_pointwise(const NodeSpec& n, const WeightStore& w, const Tensor& in) {
  const PointwiseKind op = n.pointwise().op;
  if (op == PointwiseKind::kBatchNorm) {
    return pointwise(in, op, w.values(n.id, WeightRole::kScale), w.values(n.id, WeightRole::kShift));
  }
  return pointwise(in, op);
}

inline Tensor apply_conv(const NodeSpec& n, const WeightStore& w, const Tensor& in, const ConvAttrs& attrs) {
  return conv2d(in, w.values(n.id, WeightRole::kWeight), w.values(n.id, WeightRole::kBias), attrs);
}

}  // namespace detail

// Runs the full-map forward pass for every node the designated output (and
// each id in `keep`) depends on. Returns the output node's map plus the maps
// of `keep` in `kept`, when given.
inline ExecResult run_full(const GraphSpec& g, const WeightStore& w, const Tensor& input,
                           std::map<std::string, Tensor>* kept = nullptr,
                           const std::vector<std::string>& keep = {}) {
  if (input.shape() != g.input_shape()) {
    throw ShapeError("run_full: input " + to_string(input.shape()) + " does not match graph input " +
                     to_string(g.input_shape()));
  }
  std::vector<int> roots{g.index_of(g.output())};
  for (const std::string& id : keep) roots.push_back(g.index_of(id));
  const std::vector<bool> live = g.ancestors_of(roots);

  std::vector<int> remaining(g.size(), 0);
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (auto [c, slot] : g.consumers(static_cast<int>(i))) {
      if (live[c]) ++remaining[i];
    }
  }
  std::vector<bool> pinned(g.size(), false);
  for (int r : roots) pinned[r] = true;

  std::vector<std::optional<Tensor>> maps(g.size());
  ExecResult result;
  for (const std::string& id : topo_order(g)) {
    const int i = g.index_of(id);
    if (!live[i]) continue;
    const NodeSpec& n = g.node(i);
    auto in = [&](int slot) -> const Tensor& { return *maps[g.producers(i)[slot]]; };
    Tensor out;
    switch (n.kind) {
      case OpKind::kInput: out = input; break;
      case OpKind::kConv: out = detail::apply_conv(n, w, in(0), n.conv()); break;
      case OpKind::kPointwise: out = detail::apply_pointwise(n, w, in(0)); break;
      case OpKind::kMaxPool: out = maxpool2d(in(0), n.pool().kernel, n.pool().stride); break;
      case OpKind::kUpsample: out = bilinear_upsample(in(0), n.upsample().scale); break;
      case OpKind::kAdd: out = add(in(0), in(1)); break;
      case OpKind::kConcat: out = concat(in(0), in(1)); break;
    }
    result.node_shapes[id] = out.shape();
    maps[i] = std::move(out);
    for (int p : g.producers(i)) {
      if (--remaining[p] == 0 && !pinned[p]) maps[p].reset();
    }
  }
  if (kept) {
    for (const std::string& id : keep) (*kept)[id] = *maps[g.index_of(id)];
  }
  result.output = *maps[g.index_of(g.output())];
  return result;
}

// A node's values over `rect` of its full map.
struct RegionTensor {
  Rect rect;
  Tensor data;
};
using FeatureCache = std::map<std::string, RegionTensor>;

inline RegionMap cached_regions(const FeatureCache& cache) {
  RegionMap out;
  for (const auto& [id, rt] : cache) out[id] = rt.rect;
  return out;
}

// Executes a trace: every live node computes exactly its region, reading
// from each producer the memorized crop and zero-padding the memorized
// margins. Returns the region tensors of the trace's seed nodes.
//
// `computed_shapes`, when given, receives the shape of every computed map.
// Nodes in trace.reused are cut out of `cache` instead of computed. With
// `keep`, every node's region tensor is retained there.
inline std::map<std::string, Tensor> execute_trace(const GraphSpec& g, const WeightStore& w, const Tensor& input,
                                                   const TraceResult& trace, const ShapeMap& shapes,
                                                   std::map<std::string, Shape>* computed_shapes = nullptr,
                                                   const FeatureCache* cache = nullptr, FeatureCache* keep = nullptr) {
  if (input.shape() != g.input_shape()) {
    throw ShapeError("run_traced: input " + to_string(input.shape()) + " does not match graph input " +
                     to_string(g.input_shape()));
  }
  std::vector<int> remaining(g.size(), 0);
  for (const CropEdge& e : trace.plan) ++remaining[g.index_of(e.producer)];

  std::vector<std::optional<Tensor>> maps(g.size());
  for (const std::string& id : topo_order(g)) {
    auto rit = trace.regions.find(id);
    if (rit == trace.regions.end()) continue;
    const Rect& region = rit->second;
    const int i = g.index_of(id);
    const NodeSpec& n = g.node(i);

    // Crop + pad of producer `slot`, covering exactly the consumer's need.
    auto fetch = [&](int slot) {
      const CropEdge& e = trace.edge(id, slot);
      const Tensor& src = *maps[g.index_of(e.producer)];
      Tensor patch = pad(crop(src, e.crop), e.margins, e.pad_value);
      if (patch.height() != e.need.height() || patch.width() != e.need.width()) {
        throw TraceError("crop plan for \"" + e.producer + "\" -> \"" + id + "\" yields a " +
                         std::to_string(patch.height()) + "x" + std::to_string(patch.width()) +
                         " patch for a " + std::to_string(e.need.height()) + "x" + std::to_string(e.need.width()) +
                         " need");
      }
      return patch;
    };

    Tensor out;
    if (trace.reused.count(id)) {
      if (!cache || !cache->count(id)) throw TraceError("node \"" + id + "\" is marked reused but not cached");
      const RegionTensor& c = cache->at(id);
      maps[i] = crop(c.data, region.translated(-c.rect.top, -c.rect.left));
      if (keep) (*keep)[id] = {region, *maps[i]};
      continue;
    }
    switch (n.kind) {
      case OpKind::kInput: out = crop(input, region); break;
      case OpKind::kConv: {
        ConvAttrs a = n.conv();
        a.pad_h = 0;
        a.pad_w = 0;
        out = detail::apply_conv(n, w, fetch(0), a);
        break;
      }
      case OpKind::kPointwise: out = detail::apply_pointwise(n, w, fetch(0)); break;
      case OpKind::kMaxPool: out = maxpool2d(fetch(0), n.pool().kernel, n.pool().stride); break;
      case OpKind::kUpsample: {
        const CropEdge& e = trace.edge(id, 0);
        const Shape& src = shapes.at(e.producer);
        out = upsample_window(fetch(0), e.need.top, e.need.left, src.height, src.width, n.upsample().scale, region);
        break;
      }
      case OpKind::kAdd: out = add(fetch(0), fetch(1)); break;
      case OpKind::kConcat: out = concat(fetch(0), fetch(1)); break;
    }
    if (out.height() != region.height() || out.width() != region.width()) {
      throw TraceError("node \"" + id + "\" produced " + to_string(out.shape()) + " for region " + to_string(region));
    }
    if (computed_shapes) (*computed_shapes)[id] = out.shape();
    if (keep) (*keep)[id] = {region, out};
    maps[i] = std::move(out);
    for (int p : g.producers(i)) {
      if (--remaining[p] == 0 && !trace.seeds.count(g.node(p).id)) maps[p].reset();
    }
  }

  std::map<std::string, Tensor> seeds;
  for (const auto& [id, rect] : trace.seeds) {
    const Rect& region = trace.regions.at(id);
    seeds[id] = crop(*maps[g.index_of(id)], rect.translated(-region.top, -region.left));
  }
  return seeds;
}

inline ExecResult run_traced(const GraphSpec& g, const WeightStore& w, const Tensor& input, const Rect& out_rect) {
  const ShapeMap shapes = infer_shapes(g);
  const TraceResult trace = backtrace(g, shapes, out_rect);
  ExecResult r;
  auto seeds = execute_trace(g, w, input, trace, shapes, &r.node_shapes);
  r.output = std::move(seeds.at(g.output()));
  r.origin_row = out_rect.top;
  r.origin_col = out_rect.left;
  return r;
}

// ---------------------------------------------------------------------------
// Equivalence check

struct EquivalenceReport {
  float max_abs_diff = 0.0f;
  bool pass = false;
  std::string error;  // set when the traced run could not complete
};

// Runs the given trace and the full pass and compares the output patch.
inline EquivalenceReport verify_plan(const GraphSpec& g, const WeightStore& w, const Tensor& input,
                                     const TraceResult& trace, const ShapeMap& shapes, float tolerance) {
  EquivalenceReport rep;
  try {
    const Rect& out_rect = trace.seeds.at(g.output());
    const Tensor full = crop(run_full(g, w, input).output, out_rect);
    const Tensor traced = execute_trace(g, w, input, trace, shapes).at(g.output());
    rep.max_abs_diff = max_abs_diff(full, traced);
    rep.pass = rep.max_abs_diff <= tolerance;
  } catch (const Error& e) {
    rep.max_abs_diff = std::numeric_limits<float>::infinity();
    rep.pass = false;
    rep.error = e.what();
  }
  return rep;
}

inline EquivalenceReport verify_equivalence(const GraphSpec& g, const WeightStore& w, const Tensor& input,
                                            const Rect& out_rect, float tolerance) {
  ShapeMap shapes;
  TraceResult trace;
  try {
    shapes = infer_shapes(g);
    trace = backtrace(g, shapes, out_rect);
  } catch (const Error& e) {
    return {std::numeric_limits<float>::infinity(), false, e.what()};
  }
  return verify_plan(g, w, input, trace, shapes, tolerance);
}

// ---------------------------------------------------------------------------
// FLOPs accounting

// kFlops counts a multiply-accumulate as two operations. kMacs counts it as
// one (the fvcore / detectron convention); element-wise ops are counted the
// same way under both.
enum class FlopConvention { kFlops, kMacs };

inline const char* to_string(FlopConvention c) { return c == FlopConvention::kFlops ? "flops" : "macs"; }

// Cost of producing an out_h x out_w region of node `n` (out_c channels).
//   conv 2*kh*kw*Cin*Cout*H*W, relu H*W*C, batchnorm/sigmoid 2*H*W*C,
//   maxpool k^2*H*W*C, upsample 4*H*W*C, add H*W*C, concat/input 0.
inline std::uint64_t node_flops(const NodeSpec& n, int out_c, int out_h, int out_w,
                                FlopConvention conv = FlopConvention::kFlops) {
  const auto hw = static_cast<std::uint64_t>(out_h) * static_cast<std::uint64_t>(out_w);
  const auto c = static_cast<std::uint64_t>(out_c);
  switch (n.kind) {
    case OpKind::kConv: {
      const ConvAttrs& a = n.conv();
      const std::uint64_t macs = static_cast<std::uint64_t>(a.kernel_h) * a.kernel_w * a.in_channels *
                                 a.out_channels * hw;
      return conv == FlopConvention::kFlops ? 2 * macs : macs;
    }
    case OpKind::kPointwise:
      return n.pointwise().op == PointwiseKind::kRelu ? hw * c : 2 * hw * c;
    case OpKind::kMaxPool:
      return static_cast<std::uint64_t>(n.pool().kernel) * n.pool().kernel * hw * c;
    case OpKind::kUpsample: return 4 * hw * c;
    case OpKind::kAdd: return hw * c;
    case OpKind::kConcat:
    case OpKind::kInput: return 0;
  }
  return 0;
}

struct NodeFlops {
  std::uint64_t full = 0;
  std::uint64_t traced = 0;
};

struct FlopsReport {
  std::map<std::string, NodeFlops> per_node;
  std::uint64_t total_full = 0;
  std::uint64_t total_traced = 0;
  FlopConvention convention = FlopConvention::kFlops;

  double savings_ratio() const {
    if (total_full == 0) return 0.0;
    return 1.0 - static_cast<double>(total_traced) / static_cast<double>(total_full);
  }
};

// Full cost covers every node the designated output depends on, at its
// inferred shape; traced cost covers the nodes of `regions` at their region
// sizes. Pass regions == nullptr for a full-only report (traced = full).
inline FlopsReport count_flops(const GraphSpec& g, const ShapeMap& shapes, const RegionMap* regions,
                               FlopConvention conv = FlopConvention::kFlops) {
  FlopsReport rep;
  rep.convention = conv;
  const std::vector<bool> live = g.live_nodes();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const NodeSpec& n = g.node(static_cast<int>(i));
    const bool traced = regions && regions->count(n.id);
    if (!live[i] && !traced) continue;
    const Shape& s = shapes.at(n.id);
    NodeFlops f;
    if (live[i]) f.full = node_flops(n, s.channels, s.height, s.width, conv);
    if (!regions) {
      f.traced = f.full;
    } else if (traced) {
      const Rect& r = regions->at(n.id);
      f.traced = node_flops(n, s.channels, r.height(), r.width(), conv);
    }
    rep.per_node[n.id] = f;
    rep.total_full += f.full;
    rep.total_traced += f.traced;
  }
  return rep;
}

inline FlopsReport count_flops(const GraphSpec& g, const RegionMap& regions,
                               FlopConvention conv = FlopConvention::kFlops) {
  return count_flops(g, infer_shapes(g), &regions, conv);
}

}  // namespace rftrace
