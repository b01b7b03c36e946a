#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "rftrace/exec.hpp"
#include "rftrace/graph.hpp"
#include "rftrace/models.hpp"
#include "rftrace/weights.hpp"

using namespace rftrace;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream f(path);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string fixture(const std::string& name) { return std::string(RFTRACE_FIXTURES) + "/" + name; }

std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

GraphSpec abc_chain() {
  return GraphSpec({1, 8, 8}, "c",
                   {node::input("a"), node::conv("b", "a", 1, 1, 3, 1, 1), node::conv("c", "b", 1, 1, 3, 1, 1)});
}

}  // namespace

TEST_CASE("single conv spec parses to input plus conv", "[graph][json]") {
  const GraphSpec g = parse_graph(R"({
    "input_shape": [3, 8, 8], "output": "c",
    "nodes": [
      {"id": "x", "kind": "input"},
      {"id": "c", "kind": "conv", "inputs": ["x"],
       "attrs": {"kernel": 3, "stride": [1, 2], "pad": 1, "in_channels": 3, "out_channels": 4}}
    ]})");
  REQUIRE(g.size() == 2);
  const ConvAttrs& a = g.node("c").conv();
  REQUIRE(a.kernel_h == 3);
  REQUIRE(a.stride_h == 1);
  REQUIRE(a.stride_w == 2);
  REQUIRE(a.dilation_w == 1);
  REQUIRE(infer_shapes(g).at("c") == Shape{4, 8, 4});
}

TEST_CASE("cycles are rejected", "[graph][json]") {
  const std::string msg = message_of([] {
    parse_graph(R"({"input_shape": [1, 4, 4], "output": "b", "nodes": [
      {"id": "in", "kind": "input"},
      {"id": "s", "kind": "add", "inputs": ["in", "b"]},
      {"id": "a", "kind": "pointwise", "inputs": ["s"], "attrs": {"op": "relu"}},
      {"id": "b", "kind": "pointwise", "inputs": ["a"], "attrs": {"op": "relu"}}]})");
  });
  REQUIRE(msg.find("cycle") != std::string::npos);
}

TEST_CASE("parse errors name the node and the field", "[graph][json]") {
  const std::string unknown_field = message_of([] {
    parse_graph(R"({"input_shape": [1, 4, 4], "output": "c", "nodes": [
      {"id": "in", "kind": "input"},
      {"id": "c", "kind": "conv", "inputs": ["in"],
       "attrs": {"kernel": 3, "in_channels": 1, "out_channels": 1, "groups": 2}}]})");
  });
  REQUIRE(unknown_field.find("\"c\"") != std::string::npos);
  REQUIRE(unknown_field.find("groups") != std::string::npos);

  const std::string bad_type = message_of([] {
    parse_graph(R"({"input_shape": [1, 4, 4], "output": "c", "nodes": [
      {"id": "in", "kind": "input"},
      {"id": "c", "kind": "conv", "inputs": ["in"],
       "attrs": {"kernel": "three", "in_channels": 1, "out_channels": 1}}]})");
  });
  REQUIRE(bad_type.find("attrs.kernel") != std::string::npos);

  REQUIRE_THROWS_AS(parse_graph(R"({"input_shape": [1, 4, 4], "output": "x", "nodes": [
      {"id": "x", "kind": "input"}, {"id": "x", "kind": "input"}]})"),
                    GraphError);
  const std::string kind = message_of([] {
    parse_graph(R"({"input_shape": [1, 4, 4], "output": "x", "nodes": [
      {"id": "in", "kind": "input"}, {"id": "x", "kind": "gelu", "inputs": ["in"]}]})");
  });
  REQUIRE(kind.find("gelu") != std::string::npos);
  REQUIRE_THROWS_AS(parse_graph("{not json"), GraphError);
  REQUIRE_THROWS_AS(parse_graph(R"({"input_shape": [1, 4, 4], "output": "x", "nodes": [], "extra": 1})"),
                    GraphError);
}

TEST_CASE("structural validation", "[graph]") {
  REQUIRE_THROWS_AS(GraphSpec({1, 4, 4}, "b", {node::input("a"), node::relu("b", "missing")}), GraphError);
  REQUIRE_THROWS_AS(GraphSpec({1, 4, 4}, "zz", {node::input("a"), node::relu("b", "a")}), GraphError);
  REQUIRE_THROWS_AS(GraphSpec({1, 4, 4}, "b", {node::input("a"), node::input("b")}), GraphError);
  REQUIRE_THROWS_AS(GraphSpec({1, 4, 4}, "b", {node::input("a"), node::upsample("b", "a", 3)}), GraphError);
  NodeSpec unary_add{"s", OpKind::kAdd, std::monostate{}, {"a"}};
  REQUIRE_THROWS_AS(GraphSpec({1, 4, 4}, "s", {node::input("a"), unary_add}), GraphError);
}

TEST_CASE("topo_order examples", "[graph][topo]") {
  REQUIRE(topo_order(abc_chain()) == std::vector<std::string>{"a", "b", "c"});

  // Declared out of order on purpose.
  const GraphSpec diamond({1, 4, 4}, "d",
                          {node::add("d", "c", "b"), node::relu("c", "a"), node::relu("b", "a"), node::input("a")});
  REQUIRE(topo_order(diamond) == std::vector<std::string>{"a", "b", "c", "d"});
}

TEST_CASE("topo_order is a deterministic permutation with producers first", "[graph][topo][property]") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    RandomGraphOptions opt;
    opt.max_nodes = 30;
    const GraphSpec g = random_graph(rng, opt);
    REQUIRE(g.size() <= 30);
    const auto order = topo_order(g);
    REQUIRE(order == topo_order(g));
    REQUIRE(order.size() == g.size());
    std::map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]] = i;
    REQUIRE(pos.size() == g.size());
    for (const NodeSpec& n : g.nodes()) {
      for (const std::string& p : n.inputs) REQUIRE(pos.at(p) < pos.at(n.id));
    }
  }
}

TEST_CASE("infer_shapes examples", "[graph][shapes]") {
  const GraphSpec g({3, 64, 64}, "c", {node::input("in"), node::conv("c", "in", 3, 64, 3, 2, 1)});
  REQUIRE(infer_shapes(g).at("c") == Shape{64, 32, 32});

  const GraphSpec up({8, 16, 16}, "u", {node::input("in"), node::upsample("u", "in", 2)});
  REQUIRE(infer_shapes(up).at("u") == Shape{8, 32, 32});

  const GraphSpec bad_add({1, 8, 8}, "s",
                          {node::input("in"), node::conv("d", "in", 1, 1, 3, 2, 1), node::add("s", "in", "d")});
  REQUIRE_THROWS_AS(infer_shapes(bad_add), ShapeError);

  const GraphSpec too_small({1, 2, 2}, "c", {node::input("in"), node::conv("c", "in", 1, 1, 5)});
  REQUIRE_THROWS_AS(infer_shapes(too_small), ShapeError);
}

TEST_CASE("infer_shapes agrees with executed tensors", "[graph][shapes][property]") {
  std::mt19937_64 rng(1234);
  for (int trial = 0; trial < 60; ++trial) {
    const GraphSpec g = random_graph(rng);
    const ShapeMap shapes = infer_shapes(g);
    const WeightStore w = random_weights(g, static_cast<std::uint64_t>(trial));
    std::vector<std::string> all;
    for (const NodeSpec& n : g.nodes()) all.push_back(n.id);
    std::map<std::string, Tensor> kept;
    run_full(g, w, random_tensor(g.input_shape(), 5), &kept, all);
    const auto live = g.live_nodes();
    for (const NodeSpec& n : g.nodes()) {
      if (!live[g.index_of(n.id)]) continue;
      REQUIRE(kept.at(n.id).shape() == shapes.at(n.id));
    }
  }
}

TEST_CASE("graph JSON round trip", "[graph][json][property]") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const GraphSpec g = random_graph(rng);
    const GraphSpec back = parse_graph(to_json(g).dump());
    REQUIRE(to_json(back) == to_json(g));
    REQUIRE(infer_shapes(back) == infer_shapes(g));
  }
}

TEST_CASE("shipped fixtures parse and match execution", "[graph][fixtures]") {
  const GraphSpec pyramid = parse_graph(read_file(fixture("toy-r18-fpn.json")));
  const ShapeMap shapes = infer_shapes(pyramid);
  REQUIRE(pyramid.input_shape() == Shape{3, 256, 256});
  const int strides[] = {8, 16, 32, 64, 128};
  for (int level = 3; level <= 7; ++level) {
    const std::string id = "P" + std::to_string(level);
    REQUIRE(pyramid.contains(id));
    REQUIRE(shapes.at(id).height == 256 / strides[level - 3]);
    REQUIRE(shapes.at(id).width == 256 / strides[level - 3]);
  }
  REQUIRE(shapes.at("P3").height == 32);

  // Executed shapes match on the P3 output and every one of its ancestors.
  const WeightStore w = random_weights(pyramid, 3);
  std::vector<std::string> all;
  for (const NodeSpec& n : pyramid.nodes()) all.push_back(n.id);
  std::map<std::string, Tensor> kept;
  run_full(pyramid.with_output("P3"), w, random_tensor(pyramid.input_shape(), 1), &kept, all);
  for (const auto& [id, t] : kept) REQUIRE(t.shape() == shapes.at(id));

  for (const char* name : {"chain-5.json", "diamond.json"}) {
    const GraphSpec g = parse_graph(read_file(fixture(name)));
    REQUIRE_NOTHROW(infer_shapes(g));
  }
}

TEST_CASE("weights validate against the graph", "[graph][weights]") {
  const GraphSpec g = abc_chain();
  WeightStore w = random_weights(g, 1);
  REQUIRE_NOTHROW(w.validate_against(g));
  WeightStore missing;
  missing.set("b", WeightRole::kWeight, {{1, 1, 3, 3}, std::vector<float>(9)});
  REQUIRE_THROWS(missing.validate_against(g));
  WeightStore wrong = w;
  wrong.set("c", WeightRole::kWeight, {{1, 1, 1, 1}, {1.0f}});
  REQUIRE_THROWS(wrong.validate_against(g));
}

TEST_CASE("weights serialization round trips bit-exactly", "[graph][weights][property]") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const GraphSpec g = random_graph(rng);
    WeightStore w = random_weights(g, static_cast<std::uint64_t>(trial));
    // Include the awkward bit patterns too.
    for (const NodeSpec& n : g.nodes()) {
      if (!w.has(n.id, WeightRole::kBias)) continue;
      WeightTensor b = w.get(n.id, WeightRole::kBias);
      b.values[0] = -0.0f;
      if (b.values.size() > 1) b.values[1] = std::numeric_limits<float>::denorm_min();
      w.set(n.id, WeightRole::kBias, b);
      break;
    }
    const SerializedWeights s = serialize_weights(w);
    const WeightStore back = deserialize_weights(nlohmann::json::parse(s.manifest.dump()), s.blob);
    REQUIRE(back == w);
    for (const auto& [id, roles] : w.entries()) {
      for (const auto& [role, t] : roles) {
        const auto& u = back.get(id, role).values;
        REQUIRE(std::memcmp(u.data(), t.values.data(), 4 * t.values.size()) == 0);
      }
    }
  }
}

TEST_CASE("weights blob is little-endian f32", "[graph][weights]") {
  WeightStore w;
  w.set("k", WeightRole::kWeight, {{1}, {1.0f}});
  const SerializedWeights s = serialize_weights(w);
  REQUIRE(s.blob == std::vector<std::uint8_t>{0x00, 0x00, 0x80, 0x3f});
  REQUIRE(s.manifest["entries"][0]["offset"] == 0);
  REQUIRE(s.manifest["entries"][0]["len"] == 1);

  std::vector<std::uint8_t> short_blob{0x00, 0x00};
  REQUIRE_THROWS_AS(deserialize_weights(s.manifest, short_blob), FormatError);
}
