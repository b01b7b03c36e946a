#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rftrace/graph.hpp"
#include "rftrace/weights.hpp"

namespace rftrace {

// Seeded parameters for every conv and batchnorm node: He-normal conv
// weights, small uniform biases, batchnorm scale in [0.5, 1.5].
inline WeightStore random_weights(const GraphSpec& g, std::uint64_t seed, float gain = 1.0f) {
  std::mt19937_64 rng(seed);
  const ShapeMap shapes = infer_shapes(g);
  WeightStore w;
  for (const NodeSpec& n : g.nodes()) {
    if (n.kind == OpKind::kConv) {
      const ConvAttrs& a = n.conv();
      const float fan_in = static_cast<float>(a.in_channels * a.kernel_h * a.kernel_w);
      std::normal_distribution<float> normal(0.0f, gain * std::sqrt(2.0f / fan_in));
      std::uniform_real_distribution<float> small(-0.1f, 0.1f);
      WeightTensor weight{{a.out_channels, a.in_channels, a.kernel_h, a.kernel_w}, {}};
      weight.values.resize(a.weight_count());
      for (float& v : weight.values) v = normal(rng);
      WeightTensor bias{{a.out_channels}, std::vector<float>(static_cast<std::size_t>(a.out_channels))};
      for (float& v : bias.values) v = small(rng);
      w.set(n.id, WeightRole::kWeight, std::move(weight));
      w.set(n.id, WeightRole::kBias, std::move(bias));
    } else if (n.kind == OpKind::kPointwise && n.pointwise().op == PointwiseKind::kBatchNorm) {
      const int c = shapes.at(n.id).channels;
      std::uniform_real_distribution<float> scale(0.5f, 1.5f);
      std::uniform_real_distribution<float> shift(-0.2f, 0.2f);
      WeightTensor s{{c}, std::vector<float>(static_cast<std::size_t>(c))};
      WeightTensor t{{c}, std::vector<float>(static_cast<std::size_t>(c))};
      for (float& v : s.values) v = scale(rng);
      for (float& v : t.values) v = shift(rng);
      w.set(n.id, WeightRole::kScale, std::move(s));
      w.set(n.id, WeightRole::kShift, std::move(t));
    }
  }
  return w;
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor t(shape);
  for (float& v : t.data()) v = u(rng);
  return t;
}

// n stacked 3x3 stride-1 pad-1 convs: in -> c1 -> ... -> cN.
inline GraphSpec chain_graph(int n, Shape input = {3, 64, 64}, int channels = 8) {
  if (n < 1) throw ValueError("chain_graph: need at least one conv");
  std::vector<NodeSpec> nodes{node::input("in")};
  std::string prev = "in";
  int c_in = input.channels;
  for (int i = 1; i <= n; ++i) {
    std::string id = "c" + std::to_string(i);
    nodes.push_back(node::conv(id, prev, c_in, channels, 3, 1, 1));
    prev = id;
    c_in = channels;
  }
  return GraphSpec(input, prev, std::move(nodes));
}

// in -> stem(3x3) -> {branch3 (3x3 p1), branch1 (1x1)} -> sum (add)
inline GraphSpec diamond_graph(Shape input = {3, 16, 16}, int channels = 4) {
  std::vector<NodeSpec> nodes{
      node::input("in"),
      node::conv("stem", "in", input.channels, channels, 3, 1, 1),
      node::conv("branch3", "stem", channels, channels, 3, 1, 1),
      node::conv("branch1", "stem", channels, channels, 1),
      node::add("sum", "branch3", "branch1"),
  };
  return GraphSpec(input, "sum", std::move(nodes));
}

// ---------------------------------------------------------------------------
// Random graphs for property tests

struct RandomGraphOptions {
  int max_nodes = 30;
  int min_size = 12;  // input height/width range
  int max_size = 32;
  int max_channels = 4;
  bool force_diamond = true;
  bool force_upsample = true;
  bool force_concat = false;
};

namespace detail {

class RandomGraphBuilder {
 public:
  RandomGraphBuilder(std::mt19937_64& rng, const RandomGraphOptions& opt) : rng_(rng), opt_(opt) {}

  GraphSpec build() {
    const int h = uniform(opt_.min_size, opt_.max_size);
    const int w = uniform(opt_.min_size, opt_.max_size);
    input_ = {uniform(1, 3), h, w};
    nodes_.push_back(node::input("in"));
    shapes_.push_back(input_);
    cur_ = 0;

    std::vector<int> plan;
    if (opt_.force_diamond) plan.push_back(kDiamond);
    if (opt_.force_upsample) plan.push_back(kDownUp);
    if (opt_.force_concat) plan.push_back(kConcatMerge);
    std::shuffle(plan.begin(), plan.end(), rng_);

    const int target = uniform(std::min(10, opt_.max_nodes), opt_.max_nodes);
    std::size_t forced = 0;
    while (static_cast<int>(nodes_.size()) < target) {
      const int budget = opt_.max_nodes - static_cast<int>(nodes_.size());
      int action = forced < plan.size() ? plan[forced] : uniform(0, 3);
      const int cost = action == kChain ? 1 : 6;
      if (cost > budget) {
        if (forced < plan.size()) break;
        action = kChain;
      }
      if (budget < 1) break;
      bool ok = false;
      switch (action) {
        case kChain: ok = chain_op(); break;
        case kDiamond: ok = diamond(); break;
        case kDownUp: ok = down_up(); break;
        case kConcatMerge: ok = concat_merge(); break;
      }
      if (ok && forced < plan.size() && action == plan[forced]) ++forced;
      if (!ok && forced < plan.size() && ++stalls_ > 50) ++forced;
    }
    std::string output = nodes_[cur_].id;
    return GraphSpec(input_, std::move(output), std::move(nodes_));
  }

 private:
  enum { kChain = 0, kDiamond = 1, kDownUp = 2, kConcatMerge = 3 };

  int uniform(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  bool coin(double p = 0.5) { return std::bernoulli_distribution(p)(rng_); }

  int push(NodeSpec n) {
    std::vector<Shape> in;
    for (const std::string& p : n.inputs) in.push_back(shapes_[index_of(p)]);
    shapes_.push_back(node_output_shape(n, in, input_));
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }
  int index_of(const std::string& id) const {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].id == id) return static_cast<int>(i);
    }
    return -1;
  }
  std::string fresh(const char* prefix) { return std::string(prefix) + std::to_string(counter_++); }

  // Shape-preserving op on node `src`; returns the new node index.
  int same_size_op(int src, int out_c) {
    const Shape s = shapes_[src];
    const std::string from = nodes_[src].id;
    const int pick = uniform(0, 4);
    if (pick == 4 && out_c == s.channels) {
      static const PointwiseKind kinds[] = {PointwiseKind::kRelu, PointwiseKind::kSigmoid, PointwiseKind::kBatchNorm};
      NodeSpec n{fresh("pw"), OpKind::kPointwise, PointwiseAttrs{kinds[uniform(0, 2)]}, {from}};
      return push(std::move(n));
    }
    ConvAttrs a;
    a.in_channels = s.channels;
    a.out_channels = out_c;
    const int k = pick == 0 ? 1 : (pick == 3 ? 5 : 3);
    a.kernel_h = a.kernel_w = k;
    if (pick == 2 && k == 3 && s.height > 6 && s.width > 6) a.dilation_h = a.dilation_w = 2;
    a.pad_h = a.dilation_h * (a.kernel_h - 1) / 2;
    a.pad_w = a.dilation_w * (a.kernel_w - 1) / 2;
    return push(node::conv(fresh("conv"), from, a));
  }

  bool chain_op() {
    const Shape s = shapes_[cur_];
    const std::string from = nodes_[cur_].id;
    const int pick = uniform(0, 5);
    if (pick <= 1) {
      cur_ = same_size_op(cur_, uniform(1, opt_.max_channels));
      return true;
    }
    if (pick == 2 && s.height >= 8 && s.width >= 8) {
      // Shrinking or strided conv, sometimes with a rectangular kernel.
      ConvAttrs a;
      a.in_channels = s.channels;
      a.out_channels = uniform(1, opt_.max_channels);
      a.kernel_h = uniform(1, 3) * 2 - 1;
      a.kernel_w = coin(0.3) ? uniform(1, 3) * 2 - 1 : a.kernel_h;
      a.stride_h = a.stride_w = coin(0.4) ? 2 : 1;
      a.pad_h = uniform(0, (a.kernel_h - 1) / 2);
      a.pad_w = uniform(0, (a.kernel_w - 1) / 2);
      cur_ = push(node::conv(fresh("conv"), from, a));
      return true;
    }
    if (pick == 3 && s.height >= 8 && s.width >= 8) {
      const int k = uniform(2, 3);
      cur_ = push(node::maxpool(fresh("pool"), from, k, uniform(1, 2)));
      return true;
    }
    if (pick == 4) {
      static const PointwiseKind kinds[] = {PointwiseKind::kRelu, PointwiseKind::kSigmoid, PointwiseKind::kBatchNorm};
      cur_ = push({fresh("pw"), OpKind::kPointwise, PointwiseAttrs{kinds[uniform(0, 2)]}, {from}});
      return true;
    }
    if (pick == 5 && s.height <= 20 && s.width <= 20) {
      cur_ = push(node::upsample(fresh("up"), from, 2));
      return true;
    }
    cur_ = same_size_op(cur_, s.channels);
    return true;
  }

  bool diamond() {
    const int base = cur_;
    const int c = uniform(1, opt_.max_channels);
    int a = same_size_op(base, c);
    if (coin()) a = same_size_op(a, c);
    int b = same_size_op(base, c);
    if (coin(0.3)) b = same_size_op(b, c);
    const std::string id = fresh(coin() ? "add" : "cat");
    if (id.rfind("add", 0) == 0) {
      cur_ = push(node::add(id, nodes_[a].id, nodes_[b].id));
    } else {
      cur_ = push(node::concat(id, nodes_[a].id, nodes_[b].id));
    }
    return true;
  }

  bool down_up() {
    const Shape s = shapes_[cur_];
    if (s.height < 6 || s.width < 6 || s.height > 40 || s.width > 40) {
      chain_op();
      return false;
    }
    const int base = cur_;
    int down;
    if (coin()) {
      down = push(node::maxpool(fresh("pool"), nodes_[base].id, 2, 2));
    } else {
      down = push(node::conv(fresh("conv"), nodes_[base].id, s.channels, s.channels, 3, 2, 1));
    }
    const int mid = same_size_op(down, s.channels);
    const int up = push(node::upsample(fresh("up"), nodes_[mid].id, 2));
    if (shapes_[up].height == s.height && shapes_[up].width == s.width) {
      if (coin()) {
        cur_ = push(node::add(fresh("add"), nodes_[base].id, nodes_[up].id));
      } else {
        cur_ = push(node::concat(fresh("cat"), nodes_[up].id, nodes_[base].id));
      }
    } else {
      cur_ = up;
    }
    return true;
  }

  bool concat_merge() {
    const Shape s = shapes_[cur_];
    std::vector<int> candidates;
    for (std::size_t i = 0; i + 1 < nodes_.size(); ++i) {
      if (static_cast<int>(i) != cur_ && shapes_[i].height == s.height && shapes_[i].width == s.width) {
        candidates.push_back(static_cast<int>(i));
      }
    }
    if (candidates.empty()) {
      const int side = same_size_op(cur_, uniform(1, opt_.max_channels));
      cur_ = push(node::concat(fresh("cat"), nodes_[side].id, nodes_[cur_].id));
      return true;
    }
    const int other = candidates[uniform(0, static_cast<int>(candidates.size()) - 1)];
    cur_ = push(node::concat(fresh("cat"), nodes_[cur_].id, nodes_[other].id));
    return true;
  }

  std::mt19937_64& rng_;
  RandomGraphOptions opt_;
  Shape input_;
  std::vector<NodeSpec> nodes_;
  std::vector<Shape> shapes_;
  int cur_ = 0;
  int counter_ = 0;
  int stalls_ = 0;
};

}  // namespace detail

inline GraphSpec random_graph(std::mt19937_64& rng, const RandomGraphOptions& opt = {}) {
  return detail::RandomGraphBuilder(rng, opt).build();
}

// ---------------------------------------------------------------------------
// ResNet-50 + FPN + CondInst-style mask branch, batchnorm folded into the
// conv biases. The stem max-pool is 2x2/2 (pooling is unpadded here), which
// keeps every stage at the standard 1/4 .. 1/32 resolution.

inline GraphSpec r50_fpn_graph(Shape input = {3, 768, 1024}) {
  std::vector<NodeSpec> nodes{node::input("image")};
  auto conv = [&](const std::string& id, const std::string& src, int cin, int cout, int k, int s = 1) {
    nodes.push_back(node::conv(id, src, cin, cout, k, s, k / 2));
    return id;
  };
  auto relu = [&](const std::string& id, const std::string& src) {
    nodes.push_back(node::relu(id, src));
    return id;
  };

  std::string x = relu("stem/relu", conv("stem/conv", "image", input.channels, 64, 7, 2));
  nodes.push_back(node::maxpool("stem/pool", x, 2, 2));
  x = "stem/pool";
  int cin = 64;
  const int blocks[] = {3, 4, 6, 3};
  const int widths[] = {64, 128, 256, 512};
  std::vector<std::string> stage_out;
  for (int stage = 0; stage < 4; ++stage) {
    for (int b = 0; b < blocks[stage]; ++b) {
      const std::string p = "res" + std::to_string(stage + 2) + "." + std::to_string(b) + "/";
      const int mid = widths[stage];
      const int stride = (b == 0 && stage > 0) ? 2 : 1;
      std::string y = relu(p + "relu1", conv(p + "conv1", x, cin, mid, 1));
      y = relu(p + "relu2", conv(p + "conv2", y, mid, mid, 3, stride));
      y = conv(p + "conv3", y, mid, mid * 4, 1);
      std::string shortcut = x;
      if (b == 0) shortcut = conv(p + "shortcut", x, cin, mid * 4, 1, stride);
      nodes.push_back(node::add(p + "add", y, shortcut));
      x = relu(p + "out", p + "add");
      cin = mid * 4;
    }
    stage_out.push_back(x);
  }

  // FPN over C3..C5, P6/P7 from P5.
  const int f = 256;
  conv("fpn/lat5", stage_out[3], 2048, f, 1);
  conv("fpn/lat4", stage_out[2], 1024, f, 1);
  conv("fpn/lat3", stage_out[1], 512, f, 1);
  nodes.push_back(node::upsample("fpn/up5", "fpn/lat5", 2));
  nodes.push_back(node::add("fpn/merge4", "fpn/lat4", "fpn/up5"));
  nodes.push_back(node::upsample("fpn/up4", "fpn/merge4", 2));
  nodes.push_back(node::add("fpn/merge3", "fpn/lat3", "fpn/up4"));
  conv("P5", "fpn/lat5", f, f, 3);
  conv("P4", "fpn/merge4", f, f, 3);
  conv("P3", "fpn/merge3", f, f, 3);
  conv("P6", "P5", f, f, 3, 2);
  relu("P6/relu", "P6");
  conv("P7", "P6/relu", f, f, 3, 2);

  // Mask branch: refine P3..P5 to 128 channels at P3 resolution, then four
  // 3x3 convs and a 1x1 projection to 8 channels.
  const int m = 128;
  relu("mask/refine3/relu", conv("mask/refine3", "P3", f, m, 3));
  relu("mask/refine4/relu", conv("mask/refine4", "P4", f, m, 3));
  relu("mask/refine5/relu", conv("mask/refine5", "P5", f, m, 3));
  nodes.push_back(node::upsample("mask/up4", "mask/refine4/relu", 2));
  nodes.push_back(node::upsample("mask/up5", "mask/refine5/relu", 4));
  nodes.push_back(node::add("mask/sum45", "mask/up4", "mask/up5"));
  nodes.push_back(node::add("mask/sum", "mask/refine3/relu", "mask/sum45"));
  std::string y = "mask/sum";
  for (int i = 0; i < 4; ++i) {
    const std::string p = "mask/tower" + std::to_string(i);
    y = relu(p + "/relu", conv(p, y, m, m, 3));
  }
  conv("mask/out", y, m, 8, 1);
  return GraphSpec(input, "mask/out", std::move(nodes));
}

}  // namespace rftrace
