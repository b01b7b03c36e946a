#pragma once

// JSON documents written by the command-line tool.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rftrace/error.hpp"
#include "rftrace/exec.hpp"
#include "rftrace/metrics.hpp"
#include "rftrace/rft.hpp"
#include "rftrace/segnet.hpp"

namespace rftrace {

inline constexpr const char* kToolVersion = "0.1.0";

struct RunManifest {
  std::string command;
  std::vector<std::string> inputs;
  std::optional<std::uint64_t> seed;
  nlohmann::json overrides = nlohmann::json::object();
  std::string version = kToolVersion;
};

inline nlohmann::json to_json(const RunManifest& m) {
  nlohmann::json j{{"command", m.command}, {"inputs", m.inputs}, {"overrides", m.overrides}, {"tool_version", m.version}};
  j["seed"] = m.seed ? nlohmann::json(*m.seed) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json rect_json(const Rect& r) { return {r.top, r.left, r.bottom, r.right}; }
inline nlohmann::json shape_json(const Shape& s) { return {s.channels, s.height, s.width}; }

inline nlohmann::json error_document(const std::string& kind, const std::string& message) {
  return {{"error", {{"kind", kind}, {"message", message}}}};
}

// Per node: traced region, full map, and the fraction of the map cropped
// away; plus the crop plan and traversal statistics.
inline nlohmann::json region_report(const GraphSpec& g, const ShapeMap& shapes, const TraceResult& t) {
  nlohmann::json nodes = nlohmann::json::object();
  for (const NodeSpec& n : g.nodes()) {
    auto it = t.regions.find(n.id);
    if (it == t.regions.end()) continue;
    const Shape& s = shapes.at(n.id);
    const double full = static_cast<double>(s.height) * s.width;
    nodes[n.id] = {{"op", to_string(n.kind)},
                   {"region", rect_json(it->second)},
                   {"full_shape", shape_json(s)},
                   {"cropped_fraction", 1.0 - static_cast<double>(it->second.area()) / full}};
  }
  nlohmann::json plan = nlohmann::json::array();
  for (const CropEdge& e : t.plan) {
    plan.push_back({{"producer", e.producer},
                    {"consumer", e.consumer},
                    {"slot", e.slot},
                    {"need", rect_json(e.need)},
                    {"crop", rect_json(e.crop)},
                    {"pad", {e.margins.top, e.margins.left, e.margins.bottom, e.margins.right}}});
  }
  nlohmann::json seeds = nlohmann::json::object();
  for (const auto& [id, r] : t.seeds) seeds[id] = rect_json(r);
  return {{"seeds", seeds},
          {"regions", nodes},
          {"plan", plan},
          {"stats", {{"nodes_visited", t.stats.nodes_visited}, {"edges_traversed", t.stats.edges_traversed}}}};
}

inline nlohmann::json to_json(const FlopsReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [id, f] : r.per_node) per[id] = {{"full", f.full}, {"traced", f.traced}};
  return {{"per_node", per},
          {"total_full", r.total_full},
          {"total_traced", r.total_traced},
          {"savings_ratio", r.savings_ratio()},
          {"convention", to_string(r.convention)}};
}

inline nlohmann::json to_json(const GroupScore& g) {
  return {{"miou_t", g.miou_t}, {"miou_t_mean_variant", g.miou_t_mean_variant}, {"records", g.records}};
}

inline nlohmann::json metrics_report(std::span<const ScoredRecord> records, const MetricsConfig& cfg, MtaMode mode) {
  nlohmann::json per_category = nlohmann::json::object();
  for (const auto& [k, g] : per_category_report(records)) per_category[k] = to_json(g);
  nlohmann::json per_band = nlohmann::json::object();
  for (const auto& [k, g] : per_band_report(records)) per_band[std::to_string(k)] = to_json(g);
  return {{"miou_t", miou_t(records)},
          {"miou_t_mean_variant", miou_t_mean_variant(records)},
          {"mta", mta(records, cfg, mode)},
          {"mta_mode", to_string(mode)},
          {"beta", cfg.beta},
          {"records", records.size()},
          {"per_category", per_category},
          {"per_band", per_band}};
}

inline nlohmann::json to_json(const SegmentDiagnostics& d) {
  return {{"level", d.level},
          {"centerness", d.centerness},
          {"box", {{"l", d.box.l}, {"t", d.box.t}, {"r", d.box.r}, {"b", d.box.b}, {"score", d.box.score}}},
          {"image_box", rect_json(d.image_box)},
          {"p3_rect", rect_json(d.p3_rect)},
          {"fallback_window", d.fallback},
          {"flops",
           {{"phase1_traced", d.phase1_traced},
            {"phase2_traced", d.phase2_traced},
            {"mask_head_traced", d.mask_head_traced},
            {"total_traced", d.total_traced},
            {"total_full", d.total_full},
            {"savings_ratio", d.savings_ratio()},
            {"convention", "flops"}}},
          {"reused_nodes", d.reused_nodes}};
}

}  // namespace rftrace
