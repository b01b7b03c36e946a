#pragma once

// Tap-IoU metrics. mIoU-T is a ratio of summed intersections to summed
// unions over all (instance, click) records; mTA counts records whose IoU
// clears a threshold, per ground-truth pixel.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rftrace/error.hpp"
#include "rftrace/mask.hpp"

namespace rftrace {

inline constexpr double kDefaultBeta = 0.7;
inline const std::string kCategoryTotal = "Category Total";
inline const std::string kUnknownCategory = "unknown";

struct Overlap {
  std::uint64_t intersection = 0;
  std::uint64_t union_area = 0;
  std::uint64_t gt_area = 0;

  double iou() const { return union_area == 0 ? 0.0 : static_cast<double>(intersection) / static_cast<double>(union_area); }
};

inline Overlap overlap(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_dims(pred, gt, "iou");
  Overlap o;
  const auto& a = pred.bits();
  const auto& b = gt.bits();
  for (std::size_t i = 0; i < a.size(); ++i) {
    o.intersection += a[i] & b[i];
    o.union_area += a[i] | b[i];
    o.gt_area += b[i];
  }
  return o;
}

inline double iou(const BinaryMask& a, const BinaryMask& b) { return overlap(a, b).iou(); }

struct EvalRecord {
  std::string instance_id;
  int click = 0;
  BinaryMask pred;
  std::shared_ptr<const BinaryMask> gt;  // shared by all clicks of an instance
  std::optional<std::string> category;
  std::optional<int> band;
};

// A record reduced to its pixel counts; all aggregates work on these.
struct ScoredRecord {
  std::string instance_id;
  int click = 0;
  Overlap counts;
  std::optional<std::string> category;
  std::optional<int> band;
};

inline ScoredRecord score(const EvalRecord& r) {
  if (!r.gt) throw ValueError("record " + r.instance_id + ": missing ground truth");
  return {r.instance_id, r.click, overlap(r.pred, *r.gt), r.category, r.band};
}

inline std::vector<ScoredRecord> score_all(std::span<const EvalRecord> records) {
  std::vector<ScoredRecord> out;
  out.reserve(records.size());
  for (const EvalRecord& r : records) out.push_back(score(r));
  return out;
}

inline double miou_t(std::span<const ScoredRecord> records) {
  if (records.empty()) throw ValueError("miou_t: no records");
  std::uint64_t inter = 0;
  std::uint64_t uni = 0;
  for (const ScoredRecord& r : records) {
    inter += r.counts.intersection;
    uni += r.counts.union_area;
  }
  if (uni == 0) throw ValueError("miou_t: every union is empty");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// Mean of per-record IoUs; reported next to miou_t as a diagnostic.
inline double miou_t_mean_variant(std::span<const ScoredRecord> records) {
  if (records.empty()) throw ValueError("miou_t: no records");
  double sum = 0.0;
  for (const ScoredRecord& r : records) sum += r.counts.iou();
  return sum / static_cast<double>(records.size());
}

enum class MtaMode {
  kExhaustive,  // every ground-truth pixel was clicked once
  kSampled,     // a subset was clicked; passes are rescaled per instance
};

inline const char* to_string(MtaMode m) { return m == MtaMode::kExhaustive ? "exhaustive" : "sampled"; }

struct MetricsConfig {
  double beta = kDefaultBeta;
  void validate() const {
    if (!(beta > 0.0 && beta < 1.0)) throw ValueError("beta must lie in (0, 1), got " + std::to_string(beta));
  }
};

// sum over records of 1(IoU >= beta), divided by the summed ground-truth
// area of the distinct instances. In sampled mode each instance's passes are
// scaled by area / clicks so a fully passing instance contributes its area.
inline double mta(std::span<const ScoredRecord> records, const MetricsConfig& cfg = {},
                  MtaMode mode = MtaMode::kExhaustive) {
  cfg.validate();
  struct Instance {
    std::uint64_t area = 0;
    std::uint64_t clicks = 0;
    std::uint64_t passes = 0;
  };
  std::map<std::string, Instance> per;
  for (const ScoredRecord& r : records) {
    Instance& in = per[r.instance_id];
    in.area = r.counts.gt_area;
    ++in.clicks;
    if (r.counts.iou() >= cfg.beta) ++in.passes;
  }
  std::uint64_t area = 0;
  for (const auto& [id, in] : per) area += in.area;
  if (area == 0) throw ValueError("mta: total ground-truth area is zero");

  if (mode == MtaMode::kExhaustive) {
    std::uint64_t passes = 0;
    for (const auto& [id, in] : per) passes += in.passes;
    return static_cast<double>(passes) / static_cast<double>(area);
  }
  double passes = 0.0;
  for (const auto& [id, in] : per) {
    passes += static_cast<double>(in.passes) * static_cast<double>(in.area) / static_cast<double>(in.clicks);
  }
  return passes / static_cast<double>(area);
}

struct GroupScore {
  double miou_t = 0.0;
  double miou_t_mean_variant = 0.0;
  std::size_t records = 0;
};

namespace detail {

template <class Key>
std::map<Key, GroupScore> group_scores(std::span<const ScoredRecord> records,
                                       const std::function<std::optional<Key>(const ScoredRecord&)>& key) {
  std::map<Key, std::vector<ScoredRecord>> groups;
  for (const ScoredRecord& r : records) {
    if (auto k = key(r)) groups[*k].push_back(r);
  }
  std::map<Key, GroupScore> out;
  for (const auto& [k, rs] : groups) {
    GroupScore g;
    g.records = rs.size();
    g.miou_t_mean_variant = miou_t_mean_variant(rs);
    // A group whose unions are all empty scores 0 rather than aborting the report.
    bool any = false;
    for (const ScoredRecord& r : rs) any = any || r.counts.union_area > 0;
    g.miou_t = any ? miou_t(rs) : 0.0;
    out.emplace(k, g);
  }
  return out;
}

}  // namespace detail

// mIoU-T per category plus a "Category Total" row over every record.
// Records without a category are grouped as "unknown".
inline std::map<std::string, GroupScore> per_category_report(std::span<const ScoredRecord> records) {
  auto out = detail::group_scores<std::string>(
      records, [](const ScoredRecord& r) -> std::optional<std::string> { return r.category.value_or(kUnknownCategory); });
  if (!records.empty()) {
    GroupScore total;
    total.records = records.size();
    total.miou_t = miou_t(records);
    total.miou_t_mean_variant = miou_t_mean_variant(records);
    out[kCategoryTotal] = total;
  }
  return out;
}

// mIoU-T per click band, for records that carry one.
inline std::map<int, GroupScore> per_band_report(std::span<const ScoredRecord> records) {
  return detail::group_scores<int>(records, [](const ScoredRecord& r) { return r.band; });
}

}  // namespace rftrace
