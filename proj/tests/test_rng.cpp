#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "st/rng.hpp"

using namespace st;

TEST_CASE("rng: identical seeds give identical streams", "[rng]") {
  Rng a(7), b(7);
  for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("rng: pinned stream values guard against silent generator changes", "[rng]") {
  // Every reproducibility guarantee downstream (fold plans, prototype
  // seeding, report bytes) rests on these exact sequences.
  Rng r(123);
  REQUIRE(r.next_u64() == 13032462758197477675ULL);
  REQUIRE(r.next_u64() == 18015028434894305148ULL);
  REQUIRE(r.next_u64() == 15857969311440292840ULL);
  REQUIRE(sub_seed(0, "model") == 14656039059671636888ULL);
  REQUIRE(sub_seed(42, "x", 7) == 6746497637651853272ULL);
}

TEST_CASE("rng: next_double lies in [0,1)", "[rng]") {
  Rng r(1);
  for (int i = 0; i < 10000; ++i) {
    const double v = r.next_double();
    REQUIRE(v >= 0.0);
    REQUIRE(v < 1.0);
  }
}

TEST_CASE("rng: below stays in range and is roughly uniform", "[rng]") {
  Rng r(2);
  const std::uint64_t n = 6;
  std::vector<int> hist(n, 0);
  const int draws = 60000;
  for (int i = 0; i < draws; ++i) {
    const std::uint64_t v = r.below(n);
    REQUIRE(v < n);
    ++hist[static_cast<std::size_t>(v)];
  }
  for (int h : hist) {
    REQUIRE(h > draws / static_cast<int>(n) * 90 / 100);
    REQUIRE(h < draws / static_cast<int>(n) * 110 / 100);
  }
  REQUIRE(r.below(1) == 0);
}

TEST_CASE("rng: uniform respects bounds", "[rng]") {
  Rng r(3);
  for (int i = 0; i < 10000; ++i) {
    const double v = r.uniform(-2.5, 4.0);
    REQUIRE(v >= -2.5);
    REQUIRE(v < 4.0);
  }
}

TEST_CASE("rng: normal has approximately unit moments", "[rng]") {
  Rng r(4);
  const int n = 100000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = r.normal();
    s += v;
    s2 += v * v;
  }
  const double mean = s / n;
  const double var = s2 / n - mean * mean;
  REQUIRE(std::abs(mean) < 0.02);
  REQUIRE(std::abs(var - 1.0) < 0.03);
}

TEST_CASE("rng: poisson mean matches lambda", "[rng]") {
  Rng r(5);
  const double lambda = 3.0;
  const int n = 50000;
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    const int v = r.poisson(lambda);
    REQUIRE(v >= 0);
    s += v;
  }
  REQUIRE(std::abs(s / n - lambda) < 0.05);
}

TEST_CASE("rng: shuffle permutes and is seed-deterministic", "[rng]") {
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  std::vector<int> a2 = v, b = v;
  Rng ra(9), rb(9), rc(10);
  ra.shuffle(a2);
  rb.shuffle(b);
  REQUIRE(a2 == b);
  std::vector<int> sorted = a2;
  std::sort(sorted.begin(), sorted.end());
  REQUIRE(sorted == v);
  std::vector<int> c = v;
  rc.shuffle(c);
  REQUIRE(c != a2);  // different seed, different order (50! makes collision absurd)
}

TEST_CASE("rng: sub_seed separates tags, indices, and parents", "[rng]") {
  std::set<std::uint64_t> seen;
  seen.insert(sub_seed(1, "a"));
  seen.insert(sub_seed(1, "b"));
  seen.insert(sub_seed(2, "a"));
  for (std::uint64_t i = 0; i < 20; ++i) seen.insert(sub_seed(1, "a", i));
  REQUIRE(seen.size() == 23);
  REQUIRE(sub_seed(1, "a") == sub_seed(1, "a"));
  REQUIRE(sub_seed(1, "a", 3) == sub_seed(1, "a", 3));
}
