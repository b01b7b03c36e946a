#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rftrace/error.hpp"
#include "rftrace/graph.hpp"

namespace rftrace {

enum class WeightRole { kWeight, kBias, kScale, kShift };

inline const char* to_string(WeightRole r) {
  switch (r) {
    case WeightRole::kWeight: return "weight";
    case WeightRole::kBias: return "bias";
    case WeightRole::kScale: return "scale";
    case WeightRole::kShift: return "shift";
  }
  return "?";
}

inline std::optional<WeightRole> parse_weight_role(const std::string& s) {
  if (s == "weight") return WeightRole::kWeight;
  if (s == "bias") return WeightRole::kBias;
  if (s == "scale") return WeightRole::kScale;
  if (s == "shift") return WeightRole::kShift;
  return std::nullopt;
}

struct WeightTensor {
  std::vector<int> shape;
  std::vector<float> values;

  std::size_t expected_size() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
  }
  friend bool operator==(const WeightTensor&, const WeightTensor&) = default;
};

// Parameters keyed by (node id, role).
class WeightStore {
 public:
  void set(const std::string& id, WeightRole role, WeightTensor t) {
    if (t.values.size() != t.expected_size()) {
      throw ShapeError("weights for \"" + id + "\"/" + to_string(role) + ": " + std::to_string(t.values.size()) +
                       " values do not match the declared shape");
    }
    entries_[id][role] = std::move(t);
  }

  bool has(const std::string& id, WeightRole role) const {
    auto it = entries_.find(id);
    return it != entries_.end() && it->second.count(role) != 0;
  }

  const WeightTensor& get(const std::string& id, WeightRole role) const {
    auto it = entries_.find(id);
    if (it == entries_.end() || !it->second.count(role)) {
      throw GraphError("missing " + std::string(to_string(role)) + " for node \"" + id + "\"");
    }
    return it->second.at(role);
  }

  std::span<const float> values(const std::string& id, WeightRole role) const { return get(id, role).values; }

  const std::map<std::string, std::map<WeightRole, WeightTensor>>& entries() const { return entries_; }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [id, roles] : entries_) {
      for (const auto& [role, t] : roles) n += t.values.size();
    }
    return n;
  }

  // Every conv needs weight [out,in,kh,kw] and bias [out]; every batchnorm
  // needs scale and shift [C].
  void validate_against(const GraphSpec& g) const {
    const ShapeMap shapes = infer_shapes(g);
    for (const NodeSpec& n : g.nodes()) {
      if (n.kind == OpKind::kConv) {
        const ConvAttrs& a = n.conv();
        expect_shape(n.id, WeightRole::kWeight, {a.out_channels, a.in_channels, a.kernel_h, a.kernel_w});
        expect_shape(n.id, WeightRole::kBias, {a.out_channels});
      } else if (n.kind == OpKind::kPointwise && n.pointwise().op == PointwiseKind::kBatchNorm) {
        const int c = shapes.at(n.id).channels;
        expect_shape(n.id, WeightRole::kScale, {c});
        expect_shape(n.id, WeightRole::kShift, {c});
      }
    }
  }

  friend bool operator==(const WeightStore&, const WeightStore&) = default;

 private:
  void expect_shape(const std::string& id, WeightRole role, const std::vector<int>& shape) const {
    const WeightTensor& t = get(id, role);
    if (t.shape != shape) {
      throw ShapeError("weights for \"" + id + "\"/" + to_string(role) + " have the wrong shape");
    }
  }

  std::map<std::string, std::map<WeightRole, WeightTensor>> entries_;
};

// ---------------------------------------------------------------------------
// Manifest + little-endian float32 blob

struct SerializedWeights {
  nlohmann::json manifest;
  std::vector<std::uint8_t> blob;
};

namespace detail {

inline void put_f32_le(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xffu));
}

inline float get_f32_le(const std::uint8_t* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

inline SerializedWeights serialize_weights(const WeightStore& store) {
  SerializedWeights out;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [id, roles] : store.entries()) {
    for (const auto& [role, t] : roles) {
      entries.push_back({{"id", id},
                         {"tensor", to_string(role)},
                         {"shape", t.shape},
                         {"offset", out.blob.size()},
                         {"len", t.values.size()}});
      for (float v : t.values) detail::put_f32_le(out.blob, v);
    }
  }
  out.manifest = {{"entries", std::move(entries)}};
  return out;
}

inline WeightStore deserialize_weights(const nlohmann::json& manifest, std::span<const std::uint8_t> blob) {
  if (!manifest.is_object() || !manifest.contains("entries") || !manifest["entries"].is_array()) {
    throw FormatError("weights manifest: expected {\"entries\": [...]}");
  }
  WeightStore store;
  for (std::size_t i = 0; i < manifest["entries"].size(); ++i) {
    const auto& e = manifest["entries"][i];
    const std::string path = "entries[" + std::to_string(i) + "]";
    try {
      auto role = parse_weight_role(e.at("tensor").get<std::string>());
      if (!role) throw FormatError(path + ".tensor: unknown tensor role");
      WeightTensor t;
      t.shape = e.at("shape").get<std::vector<int>>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto len = e.at("len").get<std::uint64_t>();
      if (offset % 4 != 0 || offset + len * 4 > blob.size()) {
        throw FormatError(path + ": byte range outside the weights blob");
      }
      t.values.resize(len);
      for (std::uint64_t k = 0; k < len; ++k) t.values[k] = detail::get_f32_le(blob.data() + offset + 4 * k);
      store.set(e.at("id").get<std::string>(), *role, std::move(t));
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(path + ": " + ex.what());
    }
  }
  return store;
}

inline std::filesystem::path blob_path_for(const std::filesystem::path& manifest_path) {
  std::filesystem::path p = manifest_path;
  p.replace_extension(".bin");
  return p;
}

inline void save_weights(const WeightStore& store, const std::filesystem::path& manifest_path) {
  const SerializedWeights s = serialize_weights(store);
  std::ofstream m(manifest_path);
  if (!m) throw FormatError("cannot write " + manifest_path.string());
  m << s.manifest.dump(1) << '\n';
  std::ofstream b(blob_path_for(manifest_path), std::ios::binary);
  if (!b) throw FormatError("cannot write " + blob_path_for(manifest_path).string());
  b.write(reinterpret_cast<const char*>(s.blob.data()), static_cast<std::streamsize>(s.blob.size()));
}

inline WeightStore load_weights(const std::filesystem::path& manifest_path) {
  std::ifstream m(manifest_path);
  if (!m) throw FormatError("cannot read weights manifest " + manifest_path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(m);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("weights manifest " + manifest_path.string() + ": " + e.what());
  }
  const auto bin = blob_path_for(manifest_path);
  std::ifstream b(bin, std::ios::binary);
  if (!b) throw FormatError("cannot read weights blob " + bin.string());
  std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  return deserialize_weights(manifest, blob);
}

}  // namespace rftrace
