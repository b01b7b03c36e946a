#pragma once

#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "rftrace/error.hpp"
#include "rftrace/graph.hpp"
#include "rftrace/rect.hpp"

namespace rftrace {

namespace detail {
// floor(num / den) and ceil(num / den) for den > 0.
inline int floor_div(int num, int den) { return num >= 0 ? num / den : -((-num + den - 1) / den); }
inline int ceil_div(int num, int den) { return -floor_div(-num, den); }
}  // namespace detail

// Maps a region of a layer's output to the (unclamped) region of its input
// that the layer reads.
//   conv:      [o*s - p, o*s - p + d(k-1)] per axis
//   maxpool:   [o*s, o*s + k - 1]
//   upsample:  [floor((o + .5)/r - .5), ceil((o + .5)/r - .5)]
//   pointwise, add, concat: identity
inline Rect inverse_map(const Rect& out, const NodeSpec& n) {
  switch (n.kind) {
    case OpKind::kConv: {
      const ConvAttrs& a = n.conv();
      return {out.top * a.stride_h - a.pad_h, out.left * a.stride_w - a.pad_w,
              out.bottom * a.stride_h - a.pad_h + a.dilation_h * (a.kernel_h - 1),
              out.right * a.stride_w - a.pad_w + a.dilation_w * (a.kernel_w - 1)};
    }
    case OpKind::kMaxPool: {
      const PoolAttrs& p = n.pool();
      return {out.top * p.stride, out.left * p.stride, out.bottom * p.stride + p.kernel - 1,
              out.right * p.stride + p.kernel - 1};
    }
    case OpKind::kUpsample: {
      // (o + 0.5)/r - 0.5 == (2o + 1 - r) / 2r, kept in integers.
      const int r = n.upsample().scale;
      auto lo = [r](int o) { return detail::floor_div(2 * o + 1 - r, 2 * r); };
      auto hi = [r](int o) { return detail::ceil_div(2 * o + 1 - r, 2 * r); };
      return {lo(out.top), lo(out.left), hi(out.bottom), hi(out.right)};
    }
    case OpKind::kPointwise:
    case OpKind::kAdd:
    case OpKind::kConcat:
    case OpKind::kInput:
      return out;
  }
  return out;
}

using RegionMap = std::map<std::string, Rect>;

// What one consumer reads from one producer.
struct CropEdge {
  std::string producer;
  std::string consumer;
  int slot = 0;        // position in the consumer's input list
  Rect need;           // producer frame, unclamped
  Rect crop;           // relative to the producer's region
  Margins margins;     // overhang of `need` past the producer's true bounds
  float pad_value = 0.0f;
};

struct TraceStats {
  std::size_t nodes_visited = 0;
  std::size_t edges_traversed = 0;
};

struct TraceResult {
  RegionMap regions;
  std::vector<CropEdge> plan;
  TraceStats stats;
  std::map<std::string, Rect> seeds;
  std::set<std::string> reused;  // nodes served from already-computed regions

  const CropEdge& edge(const std::string& consumer, int slot) const {
    auto it = edge_index_.find({consumer, slot});
    if (it == edge_index_.end()) {
      throw TraceError("no crop plan for input " + std::to_string(slot) + " of \"" + consumer + "\"");
    }
    return plan[it->second];
  }
  CropEdge& edge(const std::string& consumer, int slot) {
    return const_cast<CropEdge&>(std::as_const(*this).edge(consumer, slot));
  }

  void add_edge(CropEdge e) {
    edge_index_[{e.consumer, e.slot}] = plan.size();
    plan.push_back(std::move(e));
  }

 private:
  std::map<std::pair<std::string, int>, std::size_t> edge_index_;
};

// Back-traces regions from one or more (node, rect) seeds toward the input.
//
// A node is finalized only after every live consumer has contributed its
// inverse-mapped need; its region is the rectangular hull of those needs
// (clamped to the node's bounds) and of its own seed rect, if any. Processing
// is reverse-topological with per-node pending-edge counters, so each live
// node and each live edge is handled exactly once.
//
// `available` lists regions computed earlier (e.g. by a previous trace on the
// same input). A node whose region fits inside its available rect becomes a
// leaf: it is listed in `reused` and its producers get no need from it.
inline TraceResult backtrace(const GraphSpec& g, const ShapeMap& shapes,
                             const std::vector<std::pair<std::string, Rect>>& seeds,
                             const RegionMap* available = nullptr) {
  if (seeds.empty()) throw TraceError("backtrace: no seed regions");
  const std::size_t n = g.size();
  TraceResult result;

  std::vector<int> roots;
  std::vector<std::vector<Rect>> needs(n);
  for (const auto& [id, rect] : seeds) {
    if (!g.contains(id)) throw TraceError("backtrace: seed node \"" + id + "\" is not in the graph");
    const Shape& s = shapes.at(id);
    if (!rect.valid() || !Rect::full(s.height, s.width).contains(rect)) {
      throw TraceError("backtrace: seed rect " + to_string(rect) + " outside \"" + id + "\" (" + to_string(s) + ")");
    }
    const int i = g.index_of(id);
    roots.push_back(i);
    needs[i].push_back(rect);
    auto [it, fresh] = result.seeds.emplace(id, rect);
    if (!fresh) it->second = rect_hull(it->second, rect);
  }

  const std::vector<bool> live = g.ancestors_of(roots);
  std::vector<int> pending(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!live[i]) continue;
    for (auto [c, slot] : g.consumers(static_cast<int>(i))) {
      if (live[c]) ++pending[i];
    }
  }

  std::vector<int> ready;
  for (std::size_t i = 0; i < n; ++i) {
    if (live[i] && pending[i] == 0) ready.push_back(static_cast<int>(i));
  }
  std::vector<bool> finalized(n, false);
  while (!ready.empty()) {
    const int i = ready.back();
    ready.pop_back();
    const NodeSpec& node = g.node(i);
    const auto& producers = g.producers(i);
    if (finalized[i]) throw TraceError("backtrace: node \"" + node.id + "\" finalized twice");
    finalized[i] = true;

    if (needs[i].empty()) {
      // Only reachable through reused consumers.
      for (int p : producers) {
        if (--pending[p] == 0) ready.push_back(p);
      }
      continue;
    }
    ++result.stats.nodes_visited;
    const Rect region = rect_hull(needs[i]);
    result.regions[node.id] = region;

    if (available) {
      auto it = available->find(node.id);
      if (it != available->end() && it->second.contains(region)) {
        result.reused.insert(node.id);
        for (int p : producers) {
          if (--pending[p] == 0) ready.push_back(p);
        }
        continue;
      }
    }

    for (std::size_t slot = 0; slot < producers.size(); ++slot) {
      const int p = producers[slot];
      const NodeSpec& prod = g.node(p);
      const Shape& ps = shapes.at(prod.id);
      CropEdge e;
      e.producer = prod.id;
      e.consumer = node.id;
      e.slot = static_cast<int>(slot);
      e.need = inverse_map(region, node);
      ClampResult c;
      try {
        c = clamp(e.need, ps.height, ps.width);
      } catch (const TraceError& err) {
        throw TraceError("backtrace: \"" + node.id + "\" needs a region of \"" + prod.id +
                         "\" outside its bounds: " + err.what());
      }
      e.margins = c.margins;
      e.crop = c.rect;  // made relative once the producer's hull is known
      needs[p].push_back(c.rect);
      result.add_edge(std::move(e));
      ++result.stats.edges_traversed;
      if (--pending[p] == 0) ready.push_back(p);
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (live[i] && !finalized[i]) throw TraceError("backtrace: node \"" + g.node(i).id + "\" never finalized");
  }
  for (CropEdge& e : result.plan) {
    const Rect& hull = result.regions.at(e.producer);
    e.crop = e.crop.translated(-hull.top, -hull.left);
  }
  return result;
}

inline TraceResult backtrace(const GraphSpec& g, const ShapeMap& shapes, const Rect& out_rect) {
  return backtrace(g, shapes, {{g.output(), out_rect}});
}

inline TraceResult backtrace(const GraphSpec& g, const Rect& out_rect) {
  return backtrace(g, infer_shapes(g), out_rect);
}

// Number of nodes the designated output depends on.
inline std::size_t reachable_count(const GraphSpec& g) {
  std::size_t count = 0;
  for (bool b : g.live_nodes()) count += b ? 1 : 0;
  return count;
}

}  // namespace rftrace
