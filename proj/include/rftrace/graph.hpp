#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "rftrace/error.hpp"
#include "rftrace/tensor.hpp"

namespace rftrace {

enum class OpKind { kInput, kConv, kPointwise, kMaxPool, kUpsample, kAdd, kConcat };

inline const char* to_string(OpKind k) {
  switch (k) {
    case OpKind::kInput: return "input";
    case OpKind::kConv: return "conv";
    case OpKind::kPointwise: return "pointwise";
    case OpKind::kMaxPool: return "maxpool";
    case OpKind::kUpsample: return "upsample";
    case OpKind::kAdd: return "add";
    case OpKind::kConcat: return "concat";
  }
  return "?";
}

inline std::optional<OpKind> parse_op_kind(const std::string& s) {
  static const std::map<std::string, OpKind> kinds = {
      {"input", OpKind::kInput},       {"conv", OpKind::kConv}, {"pointwise", OpKind::kPointwise},
      {"maxpool", OpKind::kMaxPool},   {"upsample", OpKind::kUpsample}, {"add", OpKind::kAdd},
      {"concat", OpKind::kConcat}};
  auto it = kinds.find(s);
  if (it == kinds.end()) return std::nullopt;
  return it->second;
}

inline const char* to_string(PointwiseKind k) {
  switch (k) {
    case PointwiseKind::kRelu: return "relu";
    case PointwiseKind::kSigmoid: return "sigmoid";
    case PointwiseKind::kBatchNorm: return "batchnorm";
  }
  return "?";
}

inline int expected_arity(OpKind k) {
  switch (k) {
    case OpKind::kInput: return 0;
    case OpKind::kAdd:
    case OpKind::kConcat: return 2;
    default: return 1;
  }
}

struct PointwiseAttrs {
  PointwiseKind op = PointwiseKind::kRelu;
  friend bool operator==(const PointwiseAttrs&, const PointwiseAttrs&) = default;
};

struct PoolAttrs {
  int kernel = 2;
  int stride = 2;
  friend bool operator==(const PoolAttrs&, const PoolAttrs&) = default;
};

struct UpsampleAttrs {
  int scale = 2;
  friend bool operator==(const UpsampleAttrs&, const UpsampleAttrs&) = default;
};

using NodeAttrs = std::variant<std::monostate, ConvAttrs, PointwiseAttrs, PoolAttrs, UpsampleAttrs>;

struct NodeSpec {
  std::string id;
  OpKind kind = OpKind::kInput;
  NodeAttrs attrs;
  std::vector<std::string> inputs;

  const ConvAttrs& conv() const { return std::get<ConvAttrs>(attrs); }
  const PointwiseAttrs& pointwise() const { return std::get<PointwiseAttrs>(attrs); }
  const PoolAttrs& pool() const { return std::get<PoolAttrs>(attrs); }
  const UpsampleAttrs& upsample() const { return std::get<UpsampleAttrs>(attrs); }

  friend bool operator==(const NodeSpec&, const NodeSpec&) = default;
};

// Convenience constructors used by the model builders and tests.
namespace node {
inline NodeSpec input(std::string id) { return {std::move(id), OpKind::kInput, std::monostate{}, {}}; }
inline NodeSpec conv(std::string id, std::string src, int in_c, int out_c, int kernel, int stride = 1,
                     int pad = 0, int dilation = 1) {
  ConvAttrs a{kernel, kernel, stride, stride, pad, pad, dilation, dilation, in_c, out_c};
  return {std::move(id), OpKind::kConv, a, {std::move(src)}};
}
inline NodeSpec conv(std::string id, std::string src, const ConvAttrs& a) {
  return {std::move(id), OpKind::kConv, a, {std::move(src)}};
}
inline NodeSpec relu(std::string id, std::string src) {
  return {std::move(id), OpKind::kPointwise, PointwiseAttrs{PointwiseKind::kRelu}, {std::move(src)}};
}
inline NodeSpec sigmoid(std::string id, std::string src) {
  return {std::move(id), OpKind::kPointwise, PointwiseAttrs{PointwiseKind::kSigmoid}, {std::move(src)}};
}
inline NodeSpec batchnorm(std::string id, std::string src) {
  return {std::move(id), OpKind::kPointwise, PointwiseAttrs{PointwiseKind::kBatchNorm}, {std::move(src)}};
}
inline NodeSpec maxpool(std::string id, std::string src, int kernel, int stride) {
  return {std::move(id), OpKind::kMaxPool, PoolAttrs{kernel, stride}, {std::move(src)}};
}
inline NodeSpec upsample(std::string id, std::string src, int scale) {
  return {std::move(id), OpKind::kUpsample, UpsampleAttrs{scale}, {std::move(src)}};
}
inline NodeSpec add(std::string id, std::string a, std::string b) {
  return {std::move(id), OpKind::kAdd, std::monostate{}, {std::move(a), std::move(b)}};
}
inline NodeSpec concat(std::string id, std::string a, std::string b) {
  return {std::move(id), OpKind::kConcat, std::monostate{}, {std::move(a), std::move(b)}};
}
}  // namespace node

// Validated, immutable computation graph with one input node and one
// designated output. Nodes that do not feed the output are allowed; the
// executors and the tracer only touch the output's ancestors.
class GraphSpec {
 public:
  GraphSpec(Shape input_shape, std::string output, std::vector<NodeSpec> nodes)
      : input_shape_(input_shape), output_(std::move(output)), nodes_(std::move(nodes)) {
    validate();
  }

  const Shape& input_shape() const { return input_shape_; }
  const std::string& output() const { return output_; }
  const std::vector<NodeSpec>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }

  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  int index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw GraphError("unknown node id \"" + id + "\"");
    return it->second;
  }
  const NodeSpec& node(const std::string& id) const { return nodes_[index_of(id)]; }
  const NodeSpec& node(int index) const { return nodes_[index]; }
  const std::string& input_id() const { return nodes_[input_index_].id; }

  // (consumer index, input slot) pairs reading node `index`.
  const std::vector<std::pair<int, int>>& consumers(int index) const { return consumers_[index]; }
  const std::vector<int>& producers(int index) const { return producers_[index]; }

  // Same nodes, different designated output.
  GraphSpec with_output(const std::string& id) const {
    GraphSpec g = *this;
    if (!g.contains(id)) throw GraphError("output \"" + id + "\" is not a node of the graph");
    g.output_ = id;
    return g;
  }

  // Indices of every node the designated output depends on (itself included).
  std::vector<bool> ancestors_of(const std::vector<int>& roots) const {
    std::vector<bool> live(nodes_.size(), false);
    std::vector<int> stack = roots;
    while (!stack.empty()) {
      const int i = stack.back();
      stack.pop_back();
      if (live[i]) continue;
      live[i] = true;
      for (int p : producers_[i]) stack.push_back(p);
    }
    return live;
  }
  std::vector<bool> live_nodes() const { return ancestors_of({index_of(output_)}); }

 private:
  void validate() {
    if (input_shape_.channels < 1 || input_shape_.height < 1 || input_shape_.width < 1) {
      throw GraphError("input_shape must be positive, got " + to_string(input_shape_));
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const NodeSpec& n = nodes_[i];
      if (n.id.empty()) throw GraphError("nodes[" + std::to_string(i) + "]: empty id");
      if (!index_.emplace(n.id, static_cast<int>(i)).second) {
        throw GraphError("duplicate node id \"" + n.id + "\"");
      }
    }
    producers_.assign(nodes_.size(), {});
    consumers_.assign(nodes_.size(), {});
    int inputs = 0;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const NodeSpec& n = nodes_[i];
      const int arity = expected_arity(n.kind);
      if (static_cast<int>(n.inputs.size()) != arity) {
        throw GraphError("node \"" + n.id + "\" (" + to_string(n.kind) + ") needs " + std::to_string(arity) +
                         " inputs, has " + std::to_string(n.inputs.size()));
      }
      check_attrs(n);
      if (n.kind == OpKind::kInput) {
        ++inputs;
        input_index_ = static_cast<int>(i);
      }
      for (std::size_t slot = 0; slot < n.inputs.size(); ++slot) {
        auto it = index_.find(n.inputs[slot]);
        if (it == index_.end()) {
          throw GraphError("node \"" + n.id + "\": unknown producer \"" + n.inputs[slot] + "\"");
        }
        producers_[i].push_back(it->second);
        consumers_[it->second].emplace_back(static_cast<int>(i), static_cast<int>(slot));
      }
    }
    check_acyclic();
    if (inputs != 1) throw GraphError("graph needs exactly one input node, found " + std::to_string(inputs));
    if (!index_.count(output_)) throw GraphError("output \"" + output_ + "\" is not a node of the graph");

    // Every node must be fed, directly or indirectly, by the input.
    std::vector<bool> reached(nodes_.size(), false);
    std::vector<int> stack{input_index_};
    while (!stack.empty()) {
      const int i = stack.back();
      stack.pop_back();
      if (reached[i]) continue;
      reached[i] = true;
      for (auto [c, slot] : consumers_[i]) stack.push_back(c);
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!reached[i]) throw GraphError("node \"" + nodes_[i].id + "\" is not reachable from the input");
    }
  }

  static void check_attrs(const NodeSpec& n) {
    auto fail = [&](const std::string& what) {
      throw GraphError("node \"" + n.id + "\": " + what);
    };
    switch (n.kind) {
      case OpKind::kInput:
      case OpKind::kAdd:
      case OpKind::kConcat:
        if (!std::holds_alternative<std::monostate>(n.attrs)) fail("takes no attributes");
        break;
      case OpKind::kConv:
        if (!std::holds_alternative<ConvAttrs>(n.attrs)) fail("conv attributes missing");
        try {
          n.conv().validate();
        } catch (const ShapeError& e) {
          fail(e.what());
        }
        break;
      case OpKind::kPointwise:
        if (!std::holds_alternative<PointwiseAttrs>(n.attrs)) fail("pointwise attributes missing");
        break;
      case OpKind::kMaxPool:
        if (!std::holds_alternative<PoolAttrs>(n.attrs)) fail("maxpool attributes missing");
        if (n.pool().kernel < 1 || n.pool().stride < 1) fail("maxpool kernel/stride must be >= 1");
        break;
      case OpKind::kUpsample:
        if (!std::holds_alternative<UpsampleAttrs>(n.attrs)) fail("upsample attributes missing");
        if (n.upsample().scale != 2 && n.upsample().scale != 4) fail("upsample scale must be 2 or 4");
        break;
    }
  }

  void check_acyclic() const {
    std::vector<int> indeg(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) indeg[i] = static_cast<int>(producers_[i].size());
    std::vector<int> ready;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (indeg[i] == 0) ready.push_back(static_cast<int>(i));
    }
    std::size_t seen = 0;
    while (!ready.empty()) {
      const int i = ready.back();
      ready.pop_back();
      ++seen;
      for (auto [c, slot] : consumers_[i]) {
        if (--indeg[c] == 0) ready.push_back(c);
      }
    }
    if (seen != nodes_.size()) throw GraphError("cycle detected in computation graph");
  }

  Shape input_shape_;
  std::string output_;
  std::vector<NodeSpec> nodes_;
  std::unordered_map<std::string, int> index_;
  std::vector<std::vector<int>> producers_;
  std::vector<std::vector<std::pair<int, int>>> consumers_;
  int input_index_ = -1;
};

// Kahn's algorithm; ready nodes leave in lexicographic id order.
inline std::vector<std::string> topo_order(const GraphSpec& g) {
  const std::size_t n = g.size();
  std::vector<int> indeg(n);
  using Entry = std::pair<std::string, int>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> ready;
  for (std::size_t i = 0; i < n; ++i) {
    indeg[i] = static_cast<int>(g.producers(static_cast<int>(i)).size());
    if (indeg[i] == 0) ready.emplace(g.node(static_cast<int>(i)).id, static_cast<int>(i));
  }
  std::vector<std::string> order;
  order.reserve(n);
  while (!ready.empty()) {
    auto [id, i] = ready.top();
    ready.pop();
    order.push_back(id);
    for (auto [c, slot] : g.consumers(i)) {
      if (--indeg[c] == 0) ready.emplace(g.node(c).id, c);
    }
  }
  if (order.size() != n) throw GraphError("cycle detected in computation graph");
  return order;
}

using ShapeMap = std::map<std::string, Shape>;

// Output shape of one node given its producers' shapes; the same formulas the
// kernels apply.
inline Shape node_output_shape(const NodeSpec& n, const std::vector<Shape>& in, const Shape& input_shape) {
  auto fail = [&](const std::string& what) -> Shape {
    throw ShapeError("node \"" + n.id + "\": " + what);
  };
  switch (n.kind) {
    case OpKind::kInput: return input_shape;
    case OpKind::kConv: {
      const ConvAttrs& a = n.conv();
      if (in[0].channels != a.in_channels) {
        return fail("conv expects " + std::to_string(a.in_channels) + " input channels, producer has " +
                    std::to_string(in[0].channels));
      }
      try {
        auto [h, w] = a.output_dims(in[0].height, in[0].width);
        return {a.out_channels, h, w};
      } catch (const ShapeError& e) {
        return fail(e.what());
      }
    }
    case OpKind::kPointwise: return in[0];
    case OpKind::kMaxPool: {
      const PoolAttrs& p = n.pool();
      if (p.kernel > in[0].height || p.kernel > in[0].width) {
        return fail("maxpool kernel larger than input " + to_string(in[0]));
      }
      return {in[0].channels, (in[0].height - p.kernel) / p.stride + 1, (in[0].width - p.kernel) / p.stride + 1};
    }
    case OpKind::kUpsample:
      return {in[0].channels, in[0].height * n.upsample().scale, in[0].width * n.upsample().scale};
    case OpKind::kAdd:
      if (in[0] != in[1]) return fail("add branches " + to_string(in[0]) + " and " + to_string(in[1]) + " differ");
      return in[0];
    case OpKind::kConcat:
      if (in[0].height != in[1].height || in[0].width != in[1].width) {
        return fail("concat branches " + to_string(in[0]) + " and " + to_string(in[1]) + " differ spatially");
      }
      return {in[0].channels + in[1].channels, in[0].height, in[0].width};
  }
  return fail("unknown op kind");
}

inline ShapeMap infer_shapes(const GraphSpec& g) {
  ShapeMap shapes;
  for (const std::string& id : topo_order(g)) {
    const NodeSpec& n = g.node(id);
    std::vector<Shape> in;
    for (const std::string& p : n.inputs) in.push_back(shapes.at(p));
    shapes[id] = node_output_shape(n, in, g.input_shape());
  }
  return shapes;
}

// ---------------------------------------------------------------------------
// JSON graph-spec format

namespace detail {

using nlohmann::json;

inline int json_int(const json& v, const std::string& path) {
  if (!v.is_number_integer()) throw GraphError(path + ": expected an integer");
  return v.get<int>();
}

// Accepts either a scalar or a [h, w] pair.
inline std::pair<int, int> json_pair(const json& v, const std::string& path) {
  if (v.is_number_integer()) return {v.get<int>(), v.get<int>()};
  if (v.is_array() && v.size() == 2) return {json_int(v[0], path + "[0]"), json_int(v[1], path + "[1]")};
  throw GraphError(path + ": expected an integer or a [h, w] pair");
}

inline void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& path) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!allowed.count(it.key())) throw GraphError(path + ": unknown field \"" + it.key() + "\"");
  }
}

inline NodeAttrs parse_attrs(OpKind kind, const json& a, const std::string& path) {
  if (!a.is_object()) throw GraphError(path + ": expected an object");
  switch (kind) {
    case OpKind::kInput:
    case OpKind::kAdd:
    case OpKind::kConcat:
      reject_unknown(a, {}, path);
      return std::monostate{};
    case OpKind::kConv: {
      reject_unknown(a, {"kernel", "stride", "pad", "dilation", "in_channels", "out_channels"}, path);
      for (const char* req : {"kernel", "in_channels", "out_channels"}) {
        if (!a.contains(req)) throw GraphError(path + "." + req + ": required field missing");
      }
      ConvAttrs c;
      std::tie(c.kernel_h, c.kernel_w) = json_pair(a["kernel"], path + ".kernel");
      if (a.contains("stride")) std::tie(c.stride_h, c.stride_w) = json_pair(a["stride"], path + ".stride");
      if (a.contains("pad")) std::tie(c.pad_h, c.pad_w) = json_pair(a["pad"], path + ".pad");
      if (a.contains("dilation")) {
        std::tie(c.dilation_h, c.dilation_w) = json_pair(a["dilation"], path + ".dilation");
      }
      c.in_channels = json_int(a["in_channels"], path + ".in_channels");
      c.out_channels = json_int(a["out_channels"], path + ".out_channels");
      return c;
    }
    case OpKind::kPointwise: {
      reject_unknown(a, {"op"}, path);
      if (!a.contains("op") || !a["op"].is_string()) throw GraphError(path + ".op: expected a string");
      const std::string op = a["op"].get<std::string>();
      if (op == "relu") return PointwiseAttrs{PointwiseKind::kRelu};
      if (op == "sigmoid") return PointwiseAttrs{PointwiseKind::kSigmoid};
      if (op == "batchnorm") return PointwiseAttrs{PointwiseKind::kBatchNorm};
      throw GraphError(path + ".op: unknown pointwise op \"" + op + "\"");
    }
    case OpKind::kMaxPool: {
      reject_unknown(a, {"kernel", "stride"}, path);
      if (!a.contains("kernel")) throw GraphError(path + ".kernel: required field missing");
      PoolAttrs p;
      p.kernel = json_int(a["kernel"], path + ".kernel");
      p.stride = a.contains("stride") ? json_int(a["stride"], path + ".stride") : p.kernel;
      return p;
    }
    case OpKind::kUpsample: {
      reject_unknown(a, {"scale"}, path);
      if (!a.contains("scale")) throw GraphError(path + ".scale: required field missing");
      return UpsampleAttrs{json_int(a["scale"], path + ".scale")};
    }
  }
  throw GraphError(path + ": unknown kind");
}

inline json attrs_to_json(const NodeSpec& n) {
  switch (n.kind) {
    case OpKind::kConv: {
      const ConvAttrs& c = n.conv();
      return {{"kernel", {c.kernel_h, c.kernel_w}},   {"stride", {c.stride_h, c.stride_w}},
              {"pad", {c.pad_h, c.pad_w}},            {"dilation", {c.dilation_h, c.dilation_w}},
              {"in_channels", c.in_channels},         {"out_channels", c.out_channels}};
    }
    case OpKind::kPointwise: return {{"op", to_string(n.pointwise().op)}};
    case OpKind::kMaxPool: return {{"kernel", n.pool().kernel}, {"stride", n.pool().stride}};
    case OpKind::kUpsample: return {{"scale", n.upsample().scale}};
    default: return json::object();
  }
}

}  // namespace detail

inline GraphSpec graph_from_json(const nlohmann::json& doc) {
  using detail::json;
  if (!doc.is_object()) throw GraphError("graph spec: expected a JSON object");
  detail::reject_unknown(doc, {"input_shape", "output", "nodes"}, "graph spec");
  if (!doc.contains("input_shape") || !doc["input_shape"].is_array() || doc["input_shape"].size() != 3) {
    throw GraphError("input_shape: expected [C, H, W]");
  }
  const json& s = doc["input_shape"];
  Shape shape{detail::json_int(s[0], "input_shape[0]"), detail::json_int(s[1], "input_shape[1]"),
              detail::json_int(s[2], "input_shape[2]")};
  if (!doc.contains("output") || !doc["output"].is_string()) throw GraphError("output: expected a node id string");
  if (!doc.contains("nodes") || !doc["nodes"].is_array()) throw GraphError("nodes: expected an array");

  std::vector<NodeSpec> nodes;
  for (std::size_t i = 0; i < doc["nodes"].size(); ++i) {
    const json& jn = doc["nodes"][i];
    std::string path = "nodes[" + std::to_string(i) + "]";
    if (!jn.is_object()) throw GraphError(path + ": expected an object");
    detail::reject_unknown(jn, {"id", "kind", "inputs", "attrs"}, path);
    if (!jn.contains("id") || !jn["id"].is_string()) throw GraphError(path + ".id: expected a string");
    NodeSpec n;
    n.id = jn["id"].get<std::string>();
    path += " (id \"" + n.id + "\")";
    if (!jn.contains("kind") || !jn["kind"].is_string()) throw GraphError(path + ".kind: expected a string");
    auto kind = parse_op_kind(jn["kind"].get<std::string>());
    if (!kind) throw GraphError(path + ".kind: unknown kind \"" + jn["kind"].get<std::string>() + "\"");
    n.kind = *kind;
    if (jn.contains("inputs")) {
      if (!jn["inputs"].is_array()) throw GraphError(path + ".inputs: expected an array");
      for (const json& p : jn["inputs"]) {
        if (!p.is_string()) throw GraphError(path + ".inputs: expected node id strings");
        n.inputs.push_back(p.get<std::string>());
      }
    }
    n.attrs = detail::parse_attrs(n.kind, jn.value("attrs", json::object()), path + ".attrs");
    nodes.push_back(std::move(n));
  }
  return GraphSpec(shape, doc["output"].get<std::string>(), std::move(nodes));
}

inline GraphSpec parse_graph(const std::string& json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw GraphError(std::string("graph spec is not valid JSON: ") + e.what());
  }
  return graph_from_json(doc);
}

inline nlohmann::json to_json(const GraphSpec& g) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const NodeSpec& n : g.nodes()) {
    nodes.push_back({{"id", n.id}, {"kind", to_string(n.kind)}, {"inputs", n.inputs}, {"attrs", detail::attrs_to_json(n)}});
  }
  const Shape& s = g.input_shape();
  return {{"input_shape", {s.channels, s.height, s.width}}, {"output", g.output()}, {"nodes", std::move(nodes)}};
}

}  // namespace rftrace
