#pragma once

// On-disk instance sets and click lists.
//   masks dir:  index.json {"<instance_id>": {"file": "a.pgm", "category": "cat"}} + PGM files
//   clicks:     [{"instance_id": ..., "band": 1..5, "x": .., "y": ..}, ...]
//   preds dir:  <instance_id>_<j>.pgm, j = the click's position among that
//               instance's clicks in the clicks file

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rftrace/clicksim.hpp"
#include "rftrace/error.hpp"
#include "rftrace/io.hpp"
#include "rftrace/mask.hpp"

namespace rftrace {

struct InstanceEntry {
  std::string id;
  std::string file;
  std::optional<std::string> category;
};

inline std::filesystem::path mask_index_path(const std::filesystem::path& dir) { return dir / "index.json"; }

inline std::vector<InstanceEntry> read_mask_index(const std::filesystem::path& dir) {
  const auto path = mask_index_path(dir);
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw FormatError(path.string() + ": expected an object keyed by instance id");
  std::vector<InstanceEntry> out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& v = it.value();
    if (!v.is_object() || !v.contains("file") || !v["file"].is_string()) {
      throw FormatError(path.string() + ": instance \"" + it.key() + "\" needs a \"file\" string");
    }
    InstanceEntry e{it.key(), v["file"].get<std::string>(), std::nullopt};
    if (v.contains("category") && v["category"].is_string()) e.category = v["category"].get<std::string>();
    out.push_back(std::move(e));
  }
  return out;
}

inline void write_mask_index(const std::filesystem::path& dir, const std::vector<InstanceEntry>& entries) {
  nlohmann::json j = nlohmann::json::object();
  for (const InstanceEntry& e : entries) {
    j[e.id] = {{"file", e.file}};
    if (e.category) j[e.id]["category"] = *e.category;
  }
  std::ofstream f(mask_index_path(dir));
  if (!f) throw FormatError("cannot write " + mask_index_path(dir).string());
  f << j.dump(1) << '\n';
}

struct ClickEntry {
  std::string instance_id;
  int band = 0;
  Click click;
};

inline nlohmann::json clicks_to_json(const std::vector<ClickEntry>& clicks) {
  nlohmann::json j = nlohmann::json::array();
  for (const ClickEntry& c : clicks) {
    j.push_back({{"instance_id", c.instance_id}, {"band", c.band}, {"x", c.click.x}, {"y", c.click.y}});
  }
  return j;
}

// Accepts the bare list or an object carrying it under "clicks".
inline std::vector<ClickEntry> clicks_from_json(const nlohmann::json& doc) {
  const nlohmann::json& list = doc.is_object() && doc.contains("clicks") ? doc["clicks"] : doc;
  if (!list.is_array()) throw FormatError("clicks: expected a list");
  std::vector<ClickEntry> out;
  try {
    for (const auto& c : list) {
      out.push_back({c.at("instance_id").get<std::string>(), c.value("band", 0), {c.at("x").get<int>(), c.at("y").get<int>()}});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("clicks: ") + e.what());
  }
  return out;
}

inline std::string prediction_file(const std::string& instance_id, int j) {
  return instance_id + "_" + std::to_string(j) + ".pgm";
}

}  // namespace rftrace
