#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "ragcap/retrieval.hpp"
#include "oracles.hpp"

using namespace ragcap;
using retrieval::Hit;
namespace fs = std::filesystem;
using oracle::oracle_filter;
using oracle::random_record;

namespace {

std::vector<float> random_rows(std::mt19937_64& rng, int n, int d) {
  std::normal_distribution<float> nd;
  std::vector<float> v(static_cast<std::size_t>(n) * d);
  for (auto& x : v) x = nd(rng);
  return v;
}

retrieval::RetrievalDatabase random_db(std::mt19937_64& rng, int n, int d) {
  std::vector<std::string> ids;
  std::vector<attr::AttributeRecord> attrs;
  for (int i = 0; i < n; ++i) {
    ids.push_back("img" + std::to_string(1000 + i));
    attrs.push_back(random_record(rng));
  }
  return retrieval::build_database(ids, attrs, random_rows(rng, n, d), d, {}, "h");
}

}  // namespace

TEST_CASE("filter_attributes matches a brute-force oracle on 1000 random hit lists") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 1 + static_cast<int>(rng() % 10);
    std::vector<attr::AttributeRecord> recs;
    for (int i = 0; i < k; ++i) recs.push_back(random_record(rng));
    std::vector<std::pair<const attr::AttributeRecord*, double>> hits;
    // Similarities drawn from a small set so mean-similarity ties also occur.
    for (int i = 0; i < k; ++i) hits.emplace_back(&recs[static_cast<std::size_t>(i)], 0.25 * static_cast<double>(rng() % 4));
    const int n = 1 + static_cast<int>(rng() % 4);
    const auto got = retrieval::filter_attributes(hits, n);
    const auto want = oracle_filter(hits, n);
    for (auto c : attr::kAttributeCategories) {
      REQUIRE(got.terms(c) == want.terms(c));
      CHECK(got.terms(c).size() <= static_cast<std::size_t>(n));
    }
  }
}

TEST_CASE("filter_attributes hand cases") {
  attr::AttributeRecord a, b, c, d;
  for (auto* r : {&a, &b, &c}) r->add(attr::Category::Object, "cube");
  d.add(attr::Category::Object, "ball");
  std::vector<std::pair<const attr::AttributeRecord*, double>> hits{{&a, 0.9}, {&b, 0.8}, {&c, 0.7}, {&d, 0.99}};
  CHECK(retrieval::filter_attributes(hits, 1).objects == std::vector<std::string>{"cube"});
  CHECK(retrieval::filter_attributes(hits, 10).objects == std::vector<std::string>{"cube", "ball"});
  CHECK(retrieval::filter_attributes({}, 3).empty());
  CHECK_THROWS(retrieval::filter_attributes(hits, 0));
}

TEST_CASE("assemble_prompt expands the template with placeholders") {
  attr::AttributeRecord r;
  CHECK(retrieval::assemble_prompt(r) == "something and being in somewhere");
  r.add(attr::Category::Object, "cube");
  CHECK(retrieval::assemble_prompt(r) == "cube and being in somewhere");
  r.add(attr::Category::Object, "ball");
  r.add(attr::Category::Action, "stack");
  r.add(attr::Category::Environment, "grid");
  CHECK(retrieval::assemble_prompt(r) == "cube, ball and stack in grid");
}

TEST_CASE("query matches a brute-force cosine ranking") {
  std::mt19937_64 rng(22);
  const int d = 16;
  const auto db = random_db(rng, 200, d);
  for (int trial = 0; trial < 50; ++trial) {
    const auto q = random_rows(rng, 1, d);
    double qn = 0.0;
    for (float x : q) qn += double(x) * x;
    qn = std::sqrt(qn);
    std::vector<std::pair<double, std::string>> ref;
    for (const auto& e : db.entries()) {
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += double(e.key[static_cast<std::size_t>(j)]) * q[static_cast<std::size_t>(j)];
      ref.emplace_back(-dot / qn, e.image_id);
    }
    std::sort(ref.begin(), ref.end());
    const auto hits = db.query(q, 8);
    REQUIRE(hits.size() == 8);
    for (std::size_t i = 0; i < hits.size(); ++i) {
      CHECK(db.entry(hits[i].index).image_id == ref[i].second);
      CHECK(hits[i].similarity == doctest::Approx(-ref[i].first).epsilon(1e-5));
    }
  }
}

TEST_CASE("query self-retrieval, orthogonal keys, ties, exclusion and oversize k") {
  const std::vector<float> keys{1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 1, 0};
  const auto db = retrieval::build_database({"c", "b", "a", "a2"}, std::vector<attr::AttributeRecord>(4), keys, 3, {}, "h");
  for (std::size_t i = 0; i < db.size(); ++i) {
    const auto& e = db.entry(i);
    const auto top = db.query(e.key, 1);
    CHECK(db.entry(top[0].index).key == e.key);
  }
  const auto hits = db.query(std::vector<float>{0, 2, 0}, 2);
  CHECK(db.entry(hits[0].index).image_id == "a2");
  CHECK(db.entry(hits[1].index).image_id == "b");
  const auto ex = db.query(std::vector<float>{0, 2, 0}, 1, "a2");
  CHECK(db.entry(ex[0].index).image_id == "b");
  CHECK(db.query(std::vector<float>{1, 1, 1}, 99).size() == 4);
  CHECK_THROWS(db.query(std::vector<float>{1, 0, 0}, 0));
  CHECK_THROWS(db.query(std::vector<float>{std::numeric_limits<float>::quiet_NaN(), 0, 0}, 1));
}

TEST_CASE("appending a lower-similarity entry never changes the top-k set") {
  std::mt19937_64 rng(23);
  const int d = 8, n = 40, k = 5;
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::string> ids;
    for (int i = 0; i < n; ++i) ids.push_back("x" + std::to_string(100 + i));
    auto rows = random_rows(rng, n, d);
    const std::vector<attr::AttributeRecord> attrs(n);
    const auto db = retrieval::build_database(ids, attrs, rows, d, {}, "h");
    const auto q = random_rows(rng, 1, d);
    const auto hits = db.query(q, k);
    const double kth = hits.back().similarity;
    // Candidate: negated query direction has similarity -1 < kth.
    std::vector<float> extra(q.begin(), q.end());
    for (auto& x : extra) x = -x;
    REQUIRE(-1.0 < kth);
    ids.push_back("x000");
    rows.insert(rows.end(), extra.begin(), extra.end());
    auto attrs2 = attrs;
    attrs2.emplace_back();
    const auto db2 = retrieval::build_database(ids, attrs2, rows, d, {}, "h");
    const auto hits2 = db2.query(q, k);
    for (std::size_t i = 0; i < hits.size(); ++i)
      CHECK(db.entry(hits[i].index).image_id == db2.entry(hits2[i].index).image_id);
  }
}

TEST_CASE("database build contracts") {
  std::mt19937_64 rng(24);
  const int d = 6;
  std::vector<std::string> ids;
  for (int i = 0; i < 500; ++i) ids.push_back("i" + std::to_string(i));
  const std::vector<attr::AttributeRecord> attrs(500);
  const auto rows = random_rows(rng, 500, d);
  const auto full = retrieval::build_database(ids, attrs, rows, d, {}, "h");
  CHECK(full.size() == 500);
  for (const auto& e : full.entries()) {
    double n2 = 0.0;
    for (float x : e.key) n2 += double(x) * x;
    CHECK(std::sqrt(n2) == doctest::Approx(1.0).epsilon(1e-6));
  }
  retrieval::BuildOptions quarter;
  quarter.fraction = 0.25;
  quarter.sample_seed = 3;
  const auto q1 = retrieval::build_database(ids, attrs, rows, d, quarter, "h");
  CHECK(q1.size() == 125);
  CHECK(retrieval::build_database(ids, attrs, rows, d, quarter, "h").keys_hash() == q1.keys_hash());
  std::set<std::string> uniq;
  for (const auto& e : q1.entries()) uniq.insert(e.image_id);
  CHECK(uniq.size() == 125);

  CHECK_THROWS_AS(retrieval::build_database({}, {}, {}, d, {}, "h"), retrieval::BuildError);
  auto bad = rows;
  bad[static_cast<std::size_t>(7 * d)] = std::numeric_limits<float>::quiet_NaN();
  try {
    retrieval::build_database(ids, attrs, bad, d, {}, "h");
    FAIL("expected BuildError");
  } catch (const retrieval::BuildError& e) {
    CHECK(std::string(e.what()).find("i7") != std::string::npos);
  }
}

TEST_CASE("objects-only entries drop actions and environments") {
  attr::AttributeRecord r;
  r.add(attr::Category::Object, "cube");
  r.add(attr::Category::Action, "stack");
  r.add(attr::Category::Environment, "grid");
  retrieval::BuildOptions o;
  o.attributes = retrieval::EntryAttributes::ObjectsOnly;
  const auto db = retrieval::build_database({"a"}, {r}, {1, 0}, 2, o, "h");
  CHECK(db.entry(0).attributes.objects == std::vector<std::string>{"cube"});
  CHECK(db.entry(0).attributes.actions.empty());
  CHECK(db.entry(0).attributes.environments.empty());
}

TEST_CASE("database save and load round trip is bit-identical") {
  std::mt19937_64 rng(25);
  const auto db = random_db(rng, 30, 5);
  const auto dir = fs::temp_directory_path() / "ragcap_db_rt";
  fs::remove_all(dir);
  db.save(dir);
  const auto back = retrieval::RetrievalDatabase::load(dir);
  REQUIRE(back.size() == db.size());
  CHECK(back.keys_hash() == db.keys_hash());
  for (std::size_t i = 0; i < db.size(); ++i) {
    CHECK(back.entry(i).image_id == db.entry(i).image_id);
    CHECK(back.entry(i).key == db.entry(i).key);
    CHECK(back.entry(i).attributes == db.entry(i).attributes);
  }
  fs::remove_all(dir);
}

TEST_CASE("retrieve assembles provenance and prompt from the filtered record") {
  std::mt19937_64 rng(26);
  const auto db = random_db(rng, 50, 4);
  const auto q = random_rows(rng, 1, 4);
  const auto ctx = retrieval::retrieve(db, q.data(), 6, 2);
  CHECK(ctx.provenance.size() == 6);
  CHECK(ctx.prompt == retrieval::assemble_prompt(ctx.filtered));
  CHECK(ctx.filtered == retrieval::filter_attributes(db, db.query(q, 6), 2));
}
