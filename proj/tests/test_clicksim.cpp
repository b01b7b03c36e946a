#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "oracles.hpp"
#include "rftrace/clicksim.hpp"

using namespace rftrace;

namespace {

BinaryMask square(int h, int w, const Rect& r) {
  BinaryMask m(h, w);
  for (int y = r.top; y <= r.bottom; ++y) {
    for (int x = r.left; x <= r.right; ++x) m.set(y, x);
  }
  return m;
}

// Bands rebuilt from pixel sets: D_0 = {centre}, D_k = dilate^k, band k =
// (D_k \\ D_{k-1}) & instance, band 1 also holds the centre, band 5 = rest.
std::array<oracle::PixelSet, 5> oracle_bands(const BinaryMask& inst, Click centre, int kh, int kw) {
  const oracle::PixelSet I = oracle::to_set(inst);
  std::array<oracle::PixelSet, 5> out;
  oracle::PixelSet prev{{centre.y, centre.x}};
  oracle::PixelSet covered;
  for (int k = 0; k < 4; ++k) {
    const oracle::PixelSet next = oracle::dilate(prev, kh, kw, inst.height(), inst.width());
    out[k] = oracle::set_and(oracle::set_minus(next, prev), I);
    if (k == 0) out[0] = oracle::set_or(out[0], oracle::set_and(prev, I));
    covered = oracle::set_or(covered, out[k]);
    prev = next;
  }
  out[4] = oracle::set_minus(I, covered);
  return out;
}

void check_band_invariants(const BinaryMask& inst, const BandSet& b) {
  const oracle::PixelSet I = oracle::to_set(inst);
  oracle::PixelSet all;
  std::size_t total = 0;
  for (const BinaryMask& band : b.bands) {
    const oracle::PixelSet s = oracle::to_set(band);
    total += s.size();
    all = oracle::set_or(all, s);
  }
  REQUIRE(total == all.size());  // pairwise disjoint
  REQUIRE(all == I);             // union is the instance
  REQUIRE(b.bands[0].contains(b.center));
}

}  // namespace

TEST_CASE("centroid examples", "[clicksim][centroid]") {
  REQUIRE(centroid(square(3, 3, {0, 0, 2, 2})) == Click{1, 1});
  BinaryMask one(10, 10);
  one.set(4, 7);
  REQUIRE(centroid(one) == Click{7, 4});
  REQUIRE_THROWS_AS(centroid(BinaryMask(4, 4)), ValueError);

  // Ring with a hollow centre: snap to the nearest ring pixel, smallest row first.
  BinaryMask ring = square(9, 9, {1, 1, 7, 7});
  for (int y = 3; y <= 5; ++y) {
    for (int x = 3; x <= 5; ++x) ring.set(y, x, false);
  }
  const Click c = centroid(ring);
  REQUIRE(ring.contains(c));
  REQUIRE(c == Click{4, 2});
}

TEST_CASE("centroid snaps to the brute-force nearest pixel", "[clicksim][centroid][property]") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const BinaryMask m = oracle::random_blob(rng, 6 + trial % 20, 6 + (trial * 7) % 20);
    const auto pts = m.pixels();
    double my = 0, mx = 0;
    for (const Click& p : pts) {
      my += p.y;
      mx += p.x;
    }
    const int ry = static_cast<int>(std::floor(my / pts.size() + 0.5));
    const int rx = static_cast<int>(std::floor(mx / pts.size() + 0.5));
    Click expect{rx, ry};
    if (!m.contains(expect)) {
      long long best = -1;
      for (const Click& p : pts) {  // row-major order gives the lexicographic tie-break
        const long long d = 1LL * (p.y - ry) * (p.y - ry) + 1LL * (p.x - rx) * (p.x - rx);
        if (best < 0 || d < best) {
          best = d;
          expect = p;
        }
      }
    }
    REQUIRE(centroid(m) == expect);
  }
}

TEST_CASE("dilate examples", "[clicksim][dilate]") {
  BinaryMask m(5, 5);
  m.set(2, 2);
  REQUIRE(dilate(m, 3, 3) == square(5, 5, {1, 1, 3, 3}));
  REQUIRE(dilate(m, 1, 1) == m);
  REQUIRE(dilate(m, 1, 5) == square(5, 5, {2, 0, 2, 4}));

  BinaryMask two(3, 7);
  two.set(1, 1);
  two.set(1, 3);
  REQUIRE(dilate(two, 3, 3) == square(3, 7, {0, 0, 2, 4}));

  REQUIRE_THROWS_AS(dilate(m, 2, 3), ValueError);
  REQUIRE_THROWS_AS(dilate(m, 3, 0), ValueError);
}

TEST_CASE("dilate matches the union of translates", "[clicksim][dilate][property]") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 300; ++trial) {
    const int h = 1 + trial % 13;
    const int w = 1 + (trial * 3) % 17;
    const BinaryMask m = oracle::random_mask(rng, h, w, 0.15);
    const int kh = 1 + 2 * static_cast<int>(rng() % 4);
    const int kw = 1 + 2 * static_cast<int>(rng() % 4);
    const BinaryMask d = dilate(m, kh, kw);
    REQUIRE(oracle::to_set(d) == oracle::dilate(oracle::to_set(m), kh, kw, h, w));

    // Extensive and monotone.
    REQUIRE(oracle::set_minus(oracle::to_set(m), oracle::to_set(d)).empty());
    BinaryMask bigger = m;
    bigger.set(static_cast<int>(rng() % h), static_cast<int>(rng() % w));
    REQUIRE(oracle::set_minus(oracle::to_set(d), oracle::to_set(dilate(bigger, kh, kw))).empty());
  }
}

TEST_CASE("bands of a 50x50 square", "[clicksim][bands]") {
  const BinaryMask sq = square(60, 60, {5, 5, 54, 54});
  const BandSet b = make_bands(sq);
  REQUIRE(b.kernel_h == 11);
  REQUIRE(b.kernel_w == 11);
  REQUIRE(b.center == Click{30, 30});
  check_band_invariants(sq, b);
  // Concentric squares of half-width 5, 10, 15, 20 around (30,30).
  REQUIRE(b.bands[0].area() == 11 * 11);
  REQUIRE(b.bands[1].area() == 21 * 21 - 11 * 11);
  REQUIRE(b.bands[2].area() == 31 * 31 - 21 * 21);
  REQUIRE(b.bands[3].area() == 41 * 41 - 31 * 31);
  REQUIRE(b.bands[4].area() == 50 * 50 - 41 * 41);
  const auto expect = oracle_bands(sq, b.center, 11, 11);
  for (int k = 0; k < 5; ++k) REQUIRE(oracle::to_set(b.bands[k]) == expect[k]);

  const auto clicks = simulate_clicks(sq, 1);
  REQUIRE(clicks.size() == 25);
  for (int k = 1; k <= 5; ++k) {
    int n = 0;
    for (const SimulatedClick& c : clicks) {
      if (c.band != k) continue;
      ++n;
      REQUIRE(b.bands[k - 1].contains(c.click));
    }
    REQUIRE(n == 5);
  }
}

TEST_CASE("one-pixel instance", "[clicksim][bands]") {
  BinaryMask one(8, 8);
  one.set(3, 6);
  const BandSet b = make_bands(one);
  REQUIRE(b.bands[0] == one);
  for (int k = 1; k < 5; ++k) REQUIRE(b.bands[k].empty());
  const auto clicks = sample_clicks(b, 4);
  REQUIRE(clicks.size() == 25);
  for (const SimulatedClick& c : clicks) REQUIRE(c.click == Click{6, 3});
  REQUIRE_THROWS_AS(make_bands(BinaryMask(3, 3)), ValueError);
}

TEST_CASE("bands and clicks on random blobs", "[clicksim][property]") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 150; ++trial) {
    const int h = 4 + static_cast<int>(rng() % 40);
    const int w = 4 + static_cast<int>(rng() % 40);
    const BinaryMask blob = oracle::random_blob(rng, h, w);
    const BandSet b = make_bands(blob);
    check_band_invariants(blob, b);
    const auto box = *blob.bounding_box();
    REQUIRE(b.kernel_h == odd_ceil(box.height() / 5.0));
    REQUIRE(b.kernel_h % 2 == 1);
    const auto expect = oracle_bands(blob, b.center, b.kernel_h, b.kernel_w);
    for (int k = 0; k < 5; ++k) REQUIRE(oracle::to_set(b.bands[k]) == expect[k]);

    const auto clicks = sample_clicks(b, trial);
    REQUIRE(clicks.size() == 25);
    for (const SimulatedClick& c : clicks) REQUIRE(blob.contains(c.click));
    // Distinct clicks within a band whenever it has at least five pixels.
    for (int k = 0; k < 5; ++k) {
      if (b.bands[k].area() < 5) continue;
      std::set<Click> seen;
      for (const SimulatedClick& c : clicks) {
        if (c.band == k + 1) {
          REQUIRE(b.bands[k].contains(c.click));
          seen.insert(c.click);
        }
      }
      REQUIRE(seen.size() == 5);
    }
    const auto again = sample_clicks(b, trial);
    for (std::size_t i = 0; i < clicks.size(); ++i) REQUIRE(clicks[i].click == again[i].click);
  }
}

TEST_CASE("instance seeds are stable", "[clicksim]") {
  REQUIRE(instance_seed(1, "a") == instance_seed(1, "a"));
  REQUIRE(instance_seed(1, "a") != instance_seed(1, "b"));
  REQUIRE(instance_seed(1, "a") != instance_seed(2, "a"));
  REQUIRE(odd_ceil(10) == 11);
  REQUIRE(odd_ceil(0.2) == 1);
  REQUIRE(odd_ceil(2.4) == 3);
  REQUIRE(odd_ceil(7) == 7);
}
