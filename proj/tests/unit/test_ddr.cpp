#include <doctest.h>

#include <cmath>
#include <random>

#include "ddrvlad/ddr.h"

using namespace ddrvlad;

namespace {

FeatureMap iota_map(std::uint32_t h, std::uint32_t w, std::uint32_t d) {
  std::vector<float> data(static_cast<std::size_t>(h) * w * d);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(i);
  return FeatureMap(h, w, d, std::move(data));
}

DescriptorSet single_row(std::vector<double> values) {
  DescriptorSet ds;
  ds.rows = Matrix(1, values.size());
  ds.rows.data = std::move(values);
  return ds;
}

}  // namespace

TEST_CASE("8x8x1280 with split 128 gives 640 descriptors of 128 dims") {
  const DescriptorSet ds = ddr_split(iota_map(8, 8, 1280), {128, false});
  CHECK(ds.size() == 640);
  CHECK(ds.dim() == 128);
  CHECK(ds.origin.size() == 640);
}

TEST_CASE("1x1xD with split D is the depth vector itself") {
  const FeatureMap fm = iota_map(1, 1, 16);
  const DescriptorSet ds = ddr_split(fm, {16, false});
  REQUIRE(ds.size() == 1);
  for (std::uint32_t c = 0; c < 16; ++c) CHECK(ds.rows(0, c) == fm.at(0, 0, c));
}

TEST_CASE("2x2x4 split 2 matches an index-arithmetic oracle") {
  // Values chosen so each (h, w, c) is recognisable: 100h + 10w + c.
  std::vector<float> data;
  for (int h = 0; h < 2; ++h)
    for (int w = 0; w < 2; ++w)
      for (int c = 0; c < 4; ++c) data.push_back(static_cast<float>(100 * h + 10 * w + c));
  const FeatureMap fm(2, 2, 4, data);
  const DescriptorSet ds = ddr_split(fm, {2, false});
  REQUIRE(ds.size() == 8);
  std::size_t row = 0;
  for (std::uint32_t h = 0; h < 2; ++h)
    for (std::uint32_t w = 0; w < 2; ++w)
      for (std::uint32_t j = 0; j < 2; ++j, ++row) {
        CHECK(ds.origin[row] == CellIndex{h, w});
        for (std::uint32_t k = 0; k < 2; ++k) CHECK(ds.rows(row, k) == 100.0 * h + 10.0 * w + (2 * j + k));
      }
}

TEST_CASE("non-divisible depth is an error") {
  CHECK_THROWS_AS(ddr_split(iota_map(2, 2, 10), {3, true}), Error);
}

TEST_CASE("split factor 0 disables DDR: one descriptor per cell") {
  const DescriptorSet ds = ddr_split(iota_map(3, 2, 12), {0, false});
  CHECK(ds.size() == 6);
  CHECK(ds.dim() == 12);
}

TEST_CASE("property: count law and partition law") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::uint32_t> side(1, 6), parts(1, 8), split(1, 16);
  std::uniform_real_distribution<float> value(-2.f, 2.f);
  for (int trial = 0; trial < 100; ++trial) {
    const std::uint32_t h = side(rng), w = side(rng), s = split(rng), d = s * parts(rng);
    std::vector<float> data(static_cast<std::size_t>(h) * w * d);
    for (float& v : data) v = value(rng);
    const FeatureMap fm(h, w, d, data);
    const DescriptorSet ds = ddr_split(fm, {s, false});
    REQUIRE(ds.size() == static_cast<std::size_t>(h) * w * d / s);
    // Concatenating a cell's descriptors in order rebuilds its depth vector.
    for (std::uint32_t y = 0; y < h; ++y)
      for (std::uint32_t x = 0; x < w; ++x) {
        std::vector<double> rebuilt;
        for (std::size_t r = 0; r < ds.size(); ++r)
          if (ds.origin[r] == CellIndex{y, x})
            rebuilt.insert(rebuilt.end(), ds.rows.row(r).begin(), ds.rows.row(r).end());
        REQUIRE(rebuilt.size() == d);
        for (std::uint32_t c = 0; c < d; ++c) REQUIRE(rebuilt[c] == fm.at(y, x, c));
      }
  }
}

TEST_CASE("root-square normalization examples") {
  SUBCASE("single support") {
    const auto ds = root_square_normalize(single_row({4, 0, 0}));
    CHECK(ds.rows.data == std::vector<double>{1, 0, 0});
  }
  SUBCASE("uniform row") {
    const auto ds = root_square_normalize(single_row({1, 1, 1, 1}));
    // L1 gives 0.25 per entry; sqrt(0.25) = 0.5, and the row has unit L2 norm.
    for (double v : ds.rows.data) CHECK(std::abs(v - 0.5) < 1e-12);
    CHECK(std::abs(l2_norm(ds.rows.row(0)) - 1.0) < 1e-12);
  }
  SUBCASE("zero row passes through") {
    const auto ds = root_square_normalize(single_row({0, 0, 0}));
    CHECK(ds.rows.data == std::vector<double>{0, 0, 0});
  }
  SUBCASE("sign is preserved") {
    const auto ds = root_square_normalize(single_row({-1, 3}));
    CHECK(std::abs(ds.rows.data[0] + 0.5) < 1e-12);
    CHECK(std::abs(ds.rows.data[1] - std::sqrt(0.75)) < 1e-12);
  }
}

TEST_CASE("property: root-square rows have unit L2 norm") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> value(-3.0, 3.0);
  DescriptorSet ds;
  ds.rows = Matrix(200, 16);
  for (double& v : ds.rows.data) v = value(rng);
  ds.rows.row(7)[0] = 0;  // a few exact zeros inside rows are fine
  const auto out = root_square_normalize(ds);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(std::abs(l2_norm(out.rows.row(i)) - 1.0) < 1e-12);
}
