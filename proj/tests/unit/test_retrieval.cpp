#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ddrvlad/retrieval.h"
#include "synthetic.h"

using namespace ddrvlad;

namespace {

std::vector<std::string> make_ids(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("db" + std::to_string(i));
  return ids;
}

// Double loop: every row's distance, then a stable sort by distance.
std::vector<std::pair<std::size_t, double>> oracle_rank(const Matrix& db, std::span<const double> q) {
  std::vector<std::pair<std::size_t, double>> all;
  for (std::size_t i = 0; i < db.rows; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < db.cols; ++j) s += (q[j] - db(i, j)) * (q[j] - db(i, j));
    all.emplace_back(i, std::sqrt(s));
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
  return all;
}

}  // namespace

TEST_CASE("index_build validation") {
  std::mt19937_64 rng(51);
  const Matrix unit = testing::random_matrix(3, 4, rng, true);
  CHECK(index_build(unit, make_ids(3)).size() == 3);
  CHECK_THROWS_WITH_AS(index_build(unit, {"a", "b", "a"}), doctest::Contains("duplicate"), Error);
  CHECK_THROWS_AS(index_build(unit, {"a", "b"}), Error);
  Matrix loose = unit;
  loose(1, 0) += 0.1;
  CHECK_THROWS_WITH_AS(index_build(loose, make_ids(3)), doctest::Contains("unit-norm"), Error);
  Matrix bad = unit;
  bad(2, 1) = std::nan("");
  CHECK_THROWS_WITH_AS(index_build(bad, make_ids(3)), doctest::Contains("non-finite"), Error);
}

TEST_CASE("self retrieval, top-k and exclusion") {
  std::mt19937_64 rng(52);
  const Matrix db = testing::random_matrix(20, 8, rng, true);
  const Index idx = index_build(db, make_ids(20));
  const RankedList self = idx.search(db.row(7));
  REQUIRE(self.hits.size() == 20);
  CHECK(self.hits[0].image_id == "db7");
  CHECK(self.hits[0].distance == 0.0);

  const RankedList top3 = idx.search(db.row(7), 3);
  CHECK(top3.hits.size() == 3);
  const auto oracle = oracle_rank(db, db.row(7));
  for (std::size_t r = 0; r < 3; ++r) CHECK(top3.hits[r].image_id == "db" + std::to_string(oracle[r].first));

  const RankedList excl = idx.search(db.row(7), std::nullopt, std::string("db7"));
  CHECK(excl.hits.size() == 19);
  CHECK(std::none_of(excl.hits.begin(), excl.hits.end(), [](const Hit& h) { return h.image_id == "db7"; }));

  const std::vector<double> wrong(5, 0.0);
  CHECK_THROWS_AS(idx.search(wrong), Error);
}

TEST_CASE("rankings match the double-loop oracle on 50x32 instances") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(600 + seed);
    const Matrix db = testing::random_matrix(50, 32, rng, true);
    const Matrix queries = testing::random_matrix(10, 32, rng, true);
    const Index idx = index_build(db, make_ids(50));
    for (std::size_t q = 0; q < queries.rows; ++q) {
      const RankedList got = idx.search(queries.row(q), std::nullopt, std::nullopt, "q", 3);
      const auto want = oracle_rank(db, queries.row(q));
      REQUIRE(got.hits.size() == want.size());
      for (std::size_t r = 0; r < want.size(); ++r) {
        CHECK(got.hits[r].image_id == "db" + std::to_string(want[r].first));
        CHECK(std::abs(got.hits[r].distance - want[r].second) < 1e-12);
      }
    }
  }
}

TEST_CASE("ties keep insertion order") {
  Matrix db(4, 2);
  db.data = {1, 0, 0, 1, 1, 0, 0, 1};  // rows 0/2 and 1/3 duplicate each other
  const Index idx = index_build(db, {"a", "b", "c", "d"});
  const std::vector<double> q = {std::sqrt(0.5), std::sqrt(0.5)};
  const RankedList r = idx.search(q);
  CHECK(r.hits[0].image_id == "a");
  CHECK(r.hits[1].image_id == "b");
  CHECK(r.hits[2].image_id == "c");
  CHECK(r.hits[3].image_id == "d");
}

TEST_CASE("L2 ranking on unit vectors equals inner-product ranking") {
  std::mt19937_64 rng(53);
  const Matrix db = testing::random_matrix(40, 16, rng, true);
  const Matrix q = testing::random_matrix(1, 16, rng, true);
  const Index idx = index_build(db, make_ids(40));
  const RankedList r = idx.search(q.row(0));
  std::vector<std::size_t> by_ip(40);
  std::iota(by_ip.begin(), by_ip.end(), 0);
  const auto ip = [&](std::size_t i) {
    double s = 0;
    for (std::size_t j = 0; j < 16; ++j) s += db(i, j) * q(0, j);
    return s;
  };
  std::stable_sort(by_ip.begin(), by_ip.end(), [&](std::size_t a, std::size_t b) { return ip(a) > ip(b); });
  for (std::size_t k = 0; k < 40; ++k) CHECK(r.hits[k].image_id == "db" + std::to_string(by_ip[k]));
}

TEST_CASE("Holidays-sized database of 991 rows") {
  std::mt19937_64 rng(54);
  const Index idx = index_build(testing::random_matrix(991, 16, rng, true), make_ids(991));
  CHECK(idx.size() == 991);
}

TEST_CASE("index persistence") {
  std::mt19937_64 rng(55);
  const Matrix db = testing::random_matrix(10, 6, rng, true);
  const auto dir = testing::scratch_dir("index");
  index_build(db, make_ids(10)).save(dir / "idx");
  const Index back = Index::load(dir / "idx");
  CHECK(back.size() == 10);
  CHECK(back.ids() == make_ids(10));
  CHECK(std::abs(back.matrix()(3, 2) - db(3, 2)) < 1e-7);
}
