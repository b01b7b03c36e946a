#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "rftrace/segnet.hpp"

using namespace rftrace;

namespace {

const SegNet& small_net() {
  static const SegNet net = make_segnet(PyramidConfig{}, 11);
  return net;
}

Tensor image_for(const SegNet& net, std::uint64_t seed) { return random_tensor(net.config.input, seed, 0.0f, 1.0f); }

// Dense per-pixel evaluation of the three dynamic layers in double, followed
// by the tent-kernel bilinear oracle.
Tensor dense_mask_oracle(const Tensor& feat, const Tensor& rel, const std::vector<float>& theta) {
  Tensor low(1, feat.height(), feat.width());
  for (int y = 0; y < feat.height(); ++y) {
    for (int x = 0; x < feat.width(); ++x) {
      double in[10];
      for (int c = 0; c < 8; ++c) in[c] = feat.at(c, y, x);
      in[8] = rel.at(0, y, x);
      in[9] = rel.at(1, y, x);
      double h1[8], h2[8];
      for (int o = 0; o < 8; ++o) {
        double acc = theta[80 + o];
        for (int i = 0; i < 10; ++i) acc += static_cast<double>(theta[o * 10 + i]) * in[i];
        h1[o] = std::max(acc, 0.0);
      }
      for (int o = 0; o < 8; ++o) {
        double acc = theta[152 + o];
        for (int i = 0; i < 8; ++i) acc += static_cast<double>(theta[88 + o * 8 + i]) * h1[i];
        h2[o] = std::max(acc, 0.0);
      }
      double acc = theta[168];
      for (int i = 0; i < 8; ++i) acc += static_cast<double>(theta[160 + i]) * h2[i];
      low.at(0, y, x) = static_cast<float>(1.0 / (1.0 + std::exp(-acc)));
    }
  }
  return oracle::bilinear(low, 4);
}

}  // namespace

TEST_CASE("click_to_location examples", "[segnet][click]") {
  REQUIRE(click_to_location({100, 60}, 8, 32, 32) == Location{12, 7});
  REQUIRE(click_to_location({4, 4}, 8, 32, 32) == Location{0, 0});
  REQUIRE(click_to_location({0, 0}, 16, 16, 16) == Location{0, 0});
  // Clamped at the far border.
  REQUIRE(click_to_location({255, 255}, 128, 2, 2) == Location{1, 1});
}

TEST_CASE("click_to_location picks the nearest cell centre", "[segnet][click][property]") {
  for (int s : {8, 16, 32, 64, 128}) {
    const int n = 1024 / s;
    for (int x = 0; x < 1024; ++x) {
      const Location loc = click_to_location({x, x}, s, n, n);
      REQUIRE(loc.a == loc.b);
      REQUIRE(loc.a >= 0);
      REQUIRE(loc.a < n);
      const int centre = s / 2 + loc.a * s;
      // Every other cell centre is at least as far away; ties resolve low.
      for (int other : {loc.a - 1, loc.a + 1}) {
        if (other < 0 || other >= n) continue;
        const int d_other = std::abs(s / 2 + other * s - x);
        REQUIRE(std::abs(centre - x) <= d_other);
        if (std::abs(centre - x) == d_other) REQUIRE(loc.a < other);
      }
    }
  }
}

TEST_CASE("mask parameter layout", "[segnet][params]") {
  std::vector<float> theta(kMaskParamCount);
  std::iota(theta.begin(), theta.end(), 0.0f);
  const MaskHeadParams p = unpack_mask_params(theta);
  REQUIRE(p.w1[0] == 0.0f);
  REQUIRE(p.w1[79] == 79.0f);
  REQUIRE(p.b1[0] == 80.0f);
  REQUIRE(p.w2[0] == 88.0f);
  REQUIRE(p.b2[0] == 152.0f);
  REQUIRE(p.w3[0] == 160.0f);
  REQUIRE(p.b3[0] == 168.0f);
  REQUIRE(pack_mask_params(p) == theta);

  theta.pop_back();
  REQUIRE_THROWS_AS(unpack_mask_params(theta), ValueError);
  try {
    unpack_mask_params(theta);
  } catch (const ValueError& e) {
    REQUIRE(std::string(e.what()).find("169") != std::string::npos);
  }
  theta.resize(170);
  REQUIRE_THROWS_AS(unpack_mask_params(theta), ValueError);
}

TEST_CASE("head decoding of an all-zero column", "[segnet][head]") {
  const std::vector<float> zeros(kHeadChannels, 0.0f);
  const HeadOutput h = head_forward(zeros, 16);
  REQUIRE(h.theta == std::vector<float>(kMaskParamCount, 0.0f));
  REQUIRE(h.box.l == 16.0f);
  REQUIRE(h.box.t == 16.0f);
  REQUIRE(h.box.r == 16.0f);
  REQUIRE(h.box.b == 16.0f);
  REQUIRE(h.box.score == 0.5f);
  REQUIRE_THROWS_AS(head_forward(std::vector<float>(10), 8), ShapeError);
}

TEST_CASE("select_level", "[segnet][head]") {
  REQUIRE(select_level(std::vector<float>{0.1f, 0.7f, 0.3f}) == 1);
  REQUIRE(select_level(std::vector<float>{0.5f, 0.5f, 0.5f}) == 0);
  REQUIRE(select_level(std::vector<float>{0.2f, 0.6f, 0.6f}) == 1);
  REQUIRE(select_level(std::vector<float>{0.9f, 0.1f}, 1) == 1);
  REQUIRE_THROWS_AS(select_level(std::vector<float>{}), ValueError);
  REQUIRE_THROWS_AS(select_level(std::vector<float>{0.1f}, 3), ValueError);
}

TEST_CASE("relative coordinates", "[segnet][coords]") {
  const Tensor t = rel_coord_map({3, 5}, 8, 8);
  REQUIRE(t.shape() == Shape{2, 8, 8});
  REQUIRE(t.at(0, 5, 3) == 0.0f);
  REQUIRE(t.at(1, 5, 3) == 0.0f);
  REQUIRE(t.at(0, 0, 7) == 4.0f / 64.0f);
  REQUIRE(t.at(1, 0, 7) == -5.0f / 64.0f);
  REQUIRE(t.at(0, 5, 4) == 1.0f / 64.0f);
  REQUIRE(t.at(1, 5, 4) == 0.0f);
  const Tensor part = rel_coord_map({3, 5}, Rect{2, 1, 4, 6});
  REQUIRE(part == crop(t, Rect{2, 1, 4, 6}));

  // Antisymmetric about the click cell.
  const Tensor full = rel_coord_map({16, 16}, 32, 32);
  for (int dy = -16; dy < 16; ++dy) {
    for (int dx = -15; dx < 16; ++dx) {
      if (dy == -16) continue;
      REQUIRE(full.at(0, 16 + dy, 16 + dx) == -full.at(0, 16 - dy, 16 - dx));
      REQUIRE(full.at(1, 16 + dy, 16 + dx) == -full.at(1, 16 - dy, 16 - dx));
    }
  }
}

TEST_CASE("mask_forward matches the dense oracle", "[segnet][mask][oracle]") {
  std::mt19937_64 rng(17);
  std::normal_distribution<float> normal(0.0f, 0.7f);
  for (int trial = 0; trial < 50; ++trial) {
    const int h = 1 + trial % 9;
    const int w = 1 + (trial * 5) % 11;
    const Tensor feat = random_tensor({8, h, w}, trial);
    const Tensor rel = rel_coord_map({trial % 7, trial % 3}, h, w);
    std::vector<float> theta(kMaskParamCount);
    for (float& v : theta) v = normal(rng);
    const Tensor got = mask_forward(feat, rel, unpack_mask_params(theta));
    const Tensor want = dense_mask_oracle(feat, rel, theta);
    REQUIRE(got.shape() == Shape{1, 4 * h, 4 * w});
    REQUIRE(max_abs_diff(got, want) <= 1e-6f);
  }
}

TEST_CASE("dynamic mask head", "[segnet][mask]") {
  const Tensor feat = random_tensor({8, 6, 5}, 3);
  const Tensor rel = rel_coord_map({2, 2}, 6, 5);
  MaskHeadParams zero;
  const Tensor half = mask_forward(feat, rel, zero);
  REQUIRE(half.shape() == Shape{1, 24, 20});
  for (float v : half.data()) REQUIRE(v == 0.5f);

  std::mt19937_64 rng(4);
  std::normal_distribution<float> normal(0.0f, 0.5f);
  std::vector<float> theta(kMaskParamCount);
  for (float& v : theta) v = normal(rng);
  const MaskHeadParams p = unpack_mask_params(theta);
  const Tensor probs = mask_forward(feat, rel, p);
  for (float v : probs.data()) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 1.0f);
  }
  // 1x1 convs only: a cell depends on nothing but its own column.
  Tensor bumped = feat;
  bumped.at(0, 0, 0) += 3.0f;
  const Tensor a = dynamic_mask_head(feat, rel, p);
  const Tensor b = dynamic_mask_head(bumped, rel, p);
  for (int y = 0; y < 6; ++y) {
    for (int x = 0; x < 5; ++x) {
      if (y || x) REQUIRE(a.at(0, y, x) == b.at(0, y, x));
    }
  }
  REQUIRE_THROWS_AS(dynamic_mask_head(random_tensor({7, 6, 5}, 1), rel, p), ShapeError);
  REQUIRE_THROWS_AS(dynamic_mask_head(feat, rel_coord_map({0, 0}, 5, 5), p), ShapeError);
}

TEST_CASE("pyramid config validation", "[segnet][config]") {
  REQUIRE_NOTHROW(PyramidConfig{}.validate());
  PyramidConfig c;
  c.input = {3, 96, 256};
  REQUIRE_THROWS_AS(c.validate(), ValueError);
  c.input = {3, 160, 250};
  REQUIRE_THROWS_AS(c.validate(), ValueError);
  c.input = {3, 128, 160};
  REQUIRE_NOTHROW(c.validate());
  c.levels[2].stride = 16;
  REQUIRE_THROWS_AS(c.validate(), ValueError);

  const PyramidConfig back = pyramid_config_from_json(to_json(PyramidConfig{}));
  REQUIRE(back.input == PyramidConfig{}.input);
  REQUIRE(back.levels == PyramidConfig{}.levels);
}

TEST_CASE("segnet graph layout", "[segnet][graph]") {
  const SegNet& net = small_net();
  REQUIRE(net.graph.output() == kMaskFeatureId);
  REQUIRE(net.shapes.at(kMaskFeatureId) == Shape{8, 32, 32});
  for (const PyramidLevel& l : net.config.levels) {
    const Shape& s = net.shapes.at(l.name);
    REQUIRE(s.height == 256 / l.stride);
    REQUIRE(s.width == 256 / l.stride);
    REQUIRE(net.shapes.at(head_output_id(l.name)) == Shape{kHeadChannels, s.height, s.width});
  }
  // Heads share parameters across levels.
  REQUIRE(net.weights.get("head/P3/ctrl", WeightRole::kWeight).values ==
          net.weights.get("head/P7/ctrl", WeightRole::kWeight).values);
  REQUIRE(net.weights.get("head/P4/tower2/bn", WeightRole::kScale).values ==
          net.weights.get("head/P6/tower2/bn", WeightRole::kScale).values);
  REQUIRE_NOTHROW(net.weights.validate_against(net.graph));

  // The P4 graph carries the top-down merge.
  const GraphSpec p4 = net.graph.with_output("P4");
  const std::vector<bool> live = p4.live_nodes();
  REQUIRE(live[p4.index_of("fpn/up5")]);
  REQUIRE(live[p4.index_of("fpn/merge4")]);
  REQUIRE(p4.node("fpn/merge4").kind == OpKind::kAdd);

  const SegNet again = make_segnet(PyramidConfig{}, 11);
  REQUIRE(serialize_weights(again.weights).blob == serialize_weights(net.weights).blob);
}

TEST_CASE("traced head values equal the full maps on 50 seeds", "[segnet][equivalence]") {
  PyramidConfig cfg;
  cfg.input = {3, 128, 128};
  cfg.width = 8;
  std::mt19937_64 rng(23);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const SegNet net = make_segnet(cfg, seed);
    const Tensor img = random_tensor(cfg.input, seed + 1000, 0.0f, 1.0f);
    const Click click{std::uniform_int_distribution<int>(0, 127)(rng), std::uniform_int_distribution<int>(0, 127)(rng)};
    const SegmentResult r = segment(net, img, click);
    const FullReference ref = segment_full(net, img, click, *level_index(cfg, r.diagnostics.level));
    for (std::size_t i = 0; i < ref.heads.size(); ++i) {
      REQUIRE(r.heads[i].box.score == Catch::Approx(ref.heads[i].box.score).margin(1e-4));
      for (int k = 0; k < kMaskParamCount; ++k) {
        REQUIRE(r.heads[i].theta[k] == Catch::Approx(ref.heads[i].theta[k]).margin(1e-4));
      }
    }
    REQUIRE(max_abs_diff(r.probs, crop(ref.probs, r.probs_rect)) <= 1e-4f);
    REQUIRE(r.diagnostics.total_traced <= r.diagnostics.total_full);
  }
}

TEST_CASE("segment matches the full pipeline", "[segnet][equivalence]") {
  const SegNet& net = small_net();
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 6; ++trial) {
    const Tensor img = image_for(net, trial);
    const Click click{std::uniform_int_distribution<int>(0, 255)(rng), std::uniform_int_distribution<int>(0, 255)(rng)};
    const SegmentResult r = segment(net, img, click);
    const std::size_t li = *level_index(net.config, r.diagnostics.level);
    const FullReference ref = segment_full(net, img, click, li);

    for (std::size_t i = 0; i < ref.heads.size(); ++i) {
      REQUIRE(r.heads[i].box.score == Catch::Approx(ref.heads[i].box.score).margin(1e-4));
      for (int k = 0; k < kMaskParamCount; ++k) {
        REQUIRE(r.heads[i].theta[k] == Catch::Approx(ref.heads[i].theta[k]).margin(1e-3));
      }
    }
    const Tensor expect = crop(ref.probs, r.probs_rect);
    INFO("click " << click.x << "," << click.y << " rect " << to_string(r.probs_rect));
    REQUIRE(max_abs_diff(r.probs, expect) <= 1e-4f);
    REQUIRE(r.mask.height() == 256);
  }
}

TEST_CASE("segment is deterministic and cheaper than the full pipeline", "[segnet][flops]") {
  const SegNet& net = small_net();
  const Tensor img = image_for(net, 99);
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 8; ++trial) {
    const Click click{std::uniform_int_distribution<int>(0, 255)(rng), std::uniform_int_distribution<int>(0, 255)(rng)};
    const SegmentResult a = segment(net, img, click);
    const SegmentResult b = segment(net, img, click);
    REQUIRE(a.mask == b.mask);
    REQUIRE(a.probs == b.probs);
    const SegmentDiagnostics& d = a.diagnostics;
    REQUIRE(d.total_traced == d.phase1_traced + d.phase2_traced + d.mask_head_traced);
    REQUIRE(d.total_full == full_pipeline_flops(net));
    REQUIRE(d.total_traced <= d.total_full);
    REQUIRE(d.centerness.size() == 5);

    // Placement: the click's stride-2 cell is set iff its probability clears 0.5.
    const int ci = click.y / 2;
    const int cj = click.x / 2;
    if (a.probs_rect.contains(ci, cj)) {
      const bool on = a.probs.at(0, ci - a.probs_rect.top, cj - a.probs_rect.left) >= 0.5f;
      REQUIRE(a.mask.at(click.y, click.x) == on);
      REQUIRE(a.mask.at(ci * 2, cj * 2) == on);
      REQUIRE(a.mask.at(ci * 2 + 1, cj * 2 + 1) == on);
    }
  }
}

TEST_CASE("forced level and fallback window", "[segnet][pipeline]") {
  const SegNet& net = small_net();
  const Tensor img = image_for(net, 3);
  SegmentOptions opt;
  opt.level = "P6";
  const SegmentResult r = segment(net, img, {40, 200}, opt);
  REQUIRE(r.diagnostics.level == "P6");
  opt.level = "P9";
  REQUIRE_THROWS_AS(segment(net, img, {40, 200}, opt), ValueError);
  REQUIRE_THROWS_AS(segment(net, img, {256, 0}), ValueError);
  REQUIRE_THROWS_AS(segment(net, Tensor(3, 128, 128), {0, 0}), ShapeError);

  // A non-finite box falls back to the fixed window.
  BoxPrediction inf_box{std::numeric_limits<float>::infinity(), 1, 1, 1, 0.5f};
  REQUIRE_FALSE(detail::expanded_box(inf_box, {3, 3}, 8, 0.1f, 256, 256).has_value());
  const auto box = detail::expanded_box({8, 8, 8, 8, 0.5f}, {3, 3}, 8, 0.1f, 256, 256);
  REQUIRE(box.has_value());
  // Centre (28,28), +-8 grown by 1.6 per side.
  REQUIRE(*box == Rect{18, 18, 38, 38});
}

TEST_CASE("model bundle round trip", "[segnet][io]") {
  PyramidConfig cfg;
  cfg.input = {3, 128, 128};
  cfg.width = 8;
  const SegNet net = make_segnet(cfg, 21);
  const auto dir = std::filesystem::temp_directory_path() / "rftrace_segnet_bundle";
  std::filesystem::remove_all(dir);
  const auto files = save_segnet(net, dir);
  for (const auto& f : files) REQUIRE(std::filesystem::exists(f));
  REQUIRE(std::filesystem::exists(dir / "levels" / "P5.json"));
  REQUIRE(std::filesystem::exists(dir / "heads" / "P7.json"));

  const SegNet back = load_segnet(dir);
  REQUIRE(back.seed == 21);
  REQUIRE(to_json(back.graph) == to_json(net.graph));
  const Tensor img = random_tensor(cfg.input, 2, 0.0f, 1.0f);
  REQUIRE(segment(back, img, {64, 64}).probs == segment(net, img, {64, 64}).probs);
  std::filesystem::remove_all(dir);
}
