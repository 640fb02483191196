#include "ear/attention.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <sstream>

using namespace ear;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

AttentionMap gaussian_blob(int grid, double cx, double cy, double sigma,
                           double amp = 1.0) {
  AttentionMap m(grid, grid);
  for (int r = 0; r < grid; ++r)
    for (int c = 0; c < grid; ++c) {
      const double dx = c - cx, dy = r - cy;
      m.at(r, c) = amp * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
    }
  return m;
}

}  // namespace

TEST_CASE("normalize_maxmin rescales, degenerates, and is idempotent") {
  AttentionMap m(2, 2, {2, 4, 6, 8});
  AttentionMap n = normalize_maxmin(m);
  CHECK(n[0] == 0.0);
  CHECK_THAT(n[1], WithinRel(1.0 / 3.0, 1e-15));
  CHECK_THAT(n[2], WithinRel(2.0 / 3.0, 1e-15));
  CHECK(n[3] == 1.0);

  AttentionMap constant(3, 3, 5.0);
  AttentionMap z = normalize_maxmin(constant);
  for (size_t i = 0; i < z.size(); ++i) CHECK(z[i] == 0.0);

  AttentionMap again = normalize_maxmin(n);
  for (size_t i = 0; i < n.size(); ++i) CHECK(again[i] == n[i]);
}

TEST_CASE("iou on hand-evaluated cases") {
  AttentionMap a(2, 2, {1, 0, 1, 0});
  CHECK(iou(a, a) == 0.5);  // identical binary: k/(2k)

  AttentionMap b(2, 2, {0, 1, 0, 1});
  CHECK(iou(a, b) == 0.0);  // disjoint supports

  AttentionMap c(2, 2, {1, 0, 0, 0});
  AttentionMap d(2, 2, {1, 1, 0, 0});
  CHECK_THAT(iou(c, d), WithinRel(1.0 / 3.0, 1e-15));

  AttentionMap zero(2, 2, 0.0);
  CHECK(iou(zero, zero) == 0.0);  // degenerate-input rule
}

TEST_CASE("iou symmetry and range on random [0,1] maps") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    AttentionMap a(8, 8), b(8, 8);
    for (size_t i = 0; i < a.size(); ++i) {
      a[i] = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      b[i] = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    }
    const double v = iou(a, b);
    CHECK(v == iou(b, a));
    CHECK(v >= 0.0);
    CHECK(v <= 0.5);
  }
}

TEST_CASE("center_of_mass basics") {
  AttentionMap uniform(16, 16, 1.0);
  CHECK_THAT(center_of_mass(uniform, Axis::X), WithinAbs(7.5, 1e-12));
  CHECK_THAT(center_of_mass(uniform, Axis::Y), WithinAbs(7.5, 1e-12));

  AttentionMap point(16, 16, 0.0);
  point.at(3, 5) = 2.0;
  CHECK(center_of_mass(point, Axis::Y) == 3.0);
  CHECK(center_of_mass(point, Axis::X) == 5.0);

  AttentionMap two(16, 16, 0.0);
  two.at(4, 2) = 1.0;
  two.at(4, 6) = 1.0;
  CHECK(center_of_mass(two, Axis::X) == 4.0);

  AttentionMap empty(4, 4, 0.0);
  CHECK_THROWS_AS(center_of_mass(empty, Axis::X), empty_map_error);
}

TEST_CASE("center_of_mass translation equivariance for point masses") {
  AttentionMap m(16, 16, 0.0);
  m.at(7, 3) = 1.0;
  const double base = center_of_mass(m, Axis::X);
  for (int k = 1; k <= 10; ++k) {
    AttentionMap shifted(16, 16, 0.0);
    shifted.at(7, 3 + k) = 1.0;
    CHECK(center_of_mass(shifted, Axis::X) == base + k);
  }
}

TEST_CASE("center_of_mass unnormalized variant is the raw first moment") {
  AttentionMap m(4, 4, 0.0);
  m.at(1, 2) = 2.0;
  m.at(3, 0) = 1.0;
  CHECK(center_of_mass(m, Axis::X, false) == 4.0);  // 2*2 + 0*1
  CHECK(center_of_mass(m, Axis::Y, false) == 5.0);  // 1*2 + 3*1
}

TEST_CASE("extract_bbox on a unimodal blob contains the scaled center") {
  AttentionMap m = gaussian_blob(16, 8, 8, 2.0);
  BoundingBox box = extract_bbox(m, 4, 1.0);
  CHECK(box.contains(8 * 4, 8 * 4));
  CHECK(box.row_min <= box.row_max);
  CHECK(box.col_min <= box.col_max);
}

TEST_CASE("extract_bbox picks the larger of two blobs") {
  AttentionMap m = gaussian_blob(16, 4, 4, 2.2);
  AttentionMap small = gaussian_blob(16, 12, 12, 0.8);
  for (size_t i = 0; i < m.size(); ++i) m[i] = std::max(m[i], small[i]);
  BoundingBox box = extract_bbox(m, 4, 1.0);

  // brute-force oracle: threshold, label, find the biggest component
  AttentionMap big = detail::upscale_nearest(m, 4);
  big = detail::gaussian_blur(big, 1.0);
  big = normalize_maxmin(big);
  std::vector<double> sorted(big.values());
  std::sort(sorted.begin(), sorted.end());
  const double thresh = sorted[static_cast<size_t>(0.9 * (sorted.size() - 1))];
  std::vector<uint8_t> mask(big.size());
  for (size_t i = 0; i < big.size(); ++i) mask[i] = big[i] >= thresh && big[i] > 0;
  auto [labels, areas] = detail::label_components(mask, big.height(), big.width());
  REQUIRE(areas.size() >= 2);

  CHECK(box.contains(4 * 4, 4 * 4));          // center of the big blob
  CHECK_FALSE(box.contains(12 * 4, 12 * 4));  // small blob excluded
}

TEST_CASE("extract_bbox box contains the blurred argmax") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const double cx = 3 + 10.0 * static_cast<double>(rng() >> 11) * 0x1.0p-53;
    const double cy = 3 + 10.0 * static_cast<double>(rng() >> 11) * 0x1.0p-53;
    AttentionMap m = gaussian_blob(16, cx, cy, 1.5);
    BoundingBox box = extract_bbox(m, 4, 1.0);
    AttentionMap big =
        detail::gaussian_blur(detail::upscale_nearest(m, 4), 1.0);
    size_t argmax = 0;
    for (size_t i = 0; i < big.size(); ++i)
      if (big[i] > big[argmax]) argmax = i;
    CHECK(box.contains(static_cast<int>(argmax) / big.width(),
                       static_cast<int>(argmax) % big.width()));
  }
}

TEST_CASE("extract_bbox on a uniform map reports an empty map") {
  AttentionMap uniform(16, 16, 1.0);
  CHECK_THROWS_AS(extract_bbox(uniform, 4, 1.0), empty_map_error);
  AttentionMap zero(16, 16, 0.0);
  CHECK_THROWS_AS(extract_bbox(zero, 4, 1.0), empty_map_error);
}

TEST_CASE("map dump formats") {
  AttentionMap m(2, 3, {0, 0.5, 1, 0.25, 0.75, 1});
  std::ostringstream csv;
  write_map_csv(m, csv);
  CHECK(csv.str() == "0,0.5,1\n0.25,0.75,1\n");

  std::ostringstream pgm;
  write_map_pgm(m, pgm);
  const std::string s = pgm.str();
  CHECK(s.rfind("P5\n3 2\n255\n", 0) == 0);
  CHECK(s.size() == 11 + 6);
  CHECK(static_cast<unsigned char>(s[11]) == 0);
  CHECK(static_cast<unsigned char>(s[13]) == 255);
}
