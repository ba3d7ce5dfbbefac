#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <unordered_map>

#include "doctest.h"
#include "ragcap/evaluation.hpp"
#include "oracles.hpp"

using namespace ragcap;
namespace fs = std::filesystem;
using namespace oracle;

TEST_CASE("bleu4 and cider agree with brute-force oracles on 200 random corpora") {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 200; ++t) {
    const auto c = random_corpus(rng);
    const double b = eval::bleu4(c.cands, c.refs);
    const double d = eval::cider(c.cands, c.refs);
    REQUIRE(b == doctest::Approx(oracle_bleu(c.cands, c.refs)).epsilon(1e-9));
    REQUIRE(d == doctest::Approx(oracle_cider(c.cands, c.refs)).epsilon(1e-9));
    CHECK(b >= 0.0);
    CHECK(b <= 1.0);
    CHECK(d >= 0.0);
    CHECK(d <= 10.0);
  }
}

TEST_CASE("bleu4 hand example: the cat sat") {
  const double b = eval::bleu4({"the cat sat"}, {{"the cat sat down"}});
  // p1 = p2 = p3 = 1; no 4-grams, so p4 = 1e-6.
  const double want = std::exp((3 * std::log(1.0) + std::log(1e-6)) / 4.0) * std::exp(1.0 - 4.0 / 3.0);
  CHECK(std::abs(b - want) < 1e-9);
}

TEST_CASE("identity and zero overlap") {
  const std::vector<std::string> c{"a red cube stacked on a grid background", "two blue balls lined up on a plain surface"};
  const std::vector<std::vector<std::string>> same{{c[0]}, {c[1]}};
  CHECK(eval::bleu4(c, same) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(eval::cider(c, same) == doctest::Approx(oracle_cider(c, same)).epsilon(1e-9));
  CHECK(eval::cider(c, same) > 0.0);
  const std::vector<std::string> off{"zebra quartz", "violin moon"};
  CHECK(eval::bleu4(off, same) == 0.0);
  CHECK(eval::cider(off, same) == 0.0);
}

TEST_CASE("duplicating every reference leaves scores unchanged") {
  std::mt19937_64 rng(32);
  for (int t = 0; t < 50; ++t) {
    auto c = random_corpus(rng);
    auto dup = c.refs;
    for (auto& r : dup) {
      const auto copy = r;
      r.insert(r.end(), copy.begin(), copy.end());
    }
    CHECK(eval::bleu4(c.cands, dup) == doctest::Approx(eval::bleu4(c.cands, c.refs)).epsilon(1e-12));
    CHECK(eval::cider(c.cands, dup) == doctest::Approx(eval::cider(c.cands, c.refs)).epsilon(1e-12));
  }
}

TEST_CASE("shuffling candidate/reference pairs leaves corpus scores unchanged") {
  std::mt19937_64 rng(33);
  for (int t = 0; t < 50; ++t) {
    auto c = random_corpus(rng);
    std::vector<std::size_t> perm(c.cands.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    RandomCorpus s;
    for (auto i : perm) {
      s.cands.push_back(c.cands[i]);
      s.refs.push_back(c.refs[i]);
    }
    CHECK(eval::bleu4(s.cands, s.refs) == doctest::Approx(eval::bleu4(c.cands, c.refs)).epsilon(1e-12));
    CHECK(eval::cider(s.cands, s.refs) == doctest::Approx(eval::cider(c.cands, c.refs)).epsilon(1e-12));
  }
}

TEST_CASE("metric contract errors") {
  CHECK_THROWS_AS(eval::bleu4({}, {}), eval::MetricError);
  CHECK_THROWS_AS(eval::cider({"a"}, {}), eval::MetricError);
  CHECK_THROWS_AS(eval::cider({"a"}, {{}}), eval::MetricError);
  CHECK(eval::cider({"a cube"}, {{"a cube"}}) >= 0.0);
}

TEST_CASE("attribute recall hand counts on five samples") {
  const auto& lex = attr::TaggerLexicon::bundled();
  const std::vector<corpus::SceneSpec> specs{
      {{{"cube", "red"}}, "stacked", "grid", 1},
      {{{"ball", "blue"}, {"cone", "red"}}, "lined", "plain", 2},
      {{{"ring", "green"}}, "scattered", "dotted", 3},
      {{{"cross", "red"}, {"cube", "blue"}, {"ball", "red"}}, "rotated", "striped", 4},
      {{{"cone", "yellow"}}, "stacked", "checkered", 5},
  };
  const std::vector<std::string> cands{
      "a red cube stacked on a grid background",   // obj 1/1 act 1 env 1
      "a blue ball lined up on a grid",            // obj 1/2 act 1 env 0
      "",                                          // obj 0/1 act 0 env 0
      "cubes and balls and crosses rotated",       // obj 3/3 act 1 env 0
      "a cone scattered over a checkered pattern", // obj 1/1 act 0 env 1
  };
  const auto r = eval::attribute_recall(cands, specs, lex);
  CHECK(r.objects == doctest::Approx(6.0 / 8.0));
  CHECK(r.actions == doctest::Approx(3.0 / 5.0));
  CHECK(r.environments == doctest::Approx(2.0 / 5.0));

  const auto perfect = eval::attribute_recall({"cube stacked grid"}, {specs[0]}, lex);
  CHECK(perfect.objects == 1.0);
  CHECK(perfect.actions == 1.0);
  CHECK(perfect.environments == 1.0);
  const auto empty = eval::attribute_recall({""}, {specs[0]}, lex);
  CHECK(empty.objects == 0.0);
}

TEST_CASE("attribute recall is monotone when candidates are extended by ground-truth words") {
  const auto& lex = attr::TaggerLexicon::bundled();
  std::mt19937_64 rng(34);
  const std::vector<corpus::SceneSpec> specs{{{{"cube", "red"}, {"ring", "blue"}}, "lined", "striped", 1}};
  std::vector<std::string> gt{"cube", "ring", "lined", "striped"};
  for (int t = 0; t < 20; ++t) {
    std::shuffle(gt.begin(), gt.end(), rng);
    std::string cand = "a picture";
    auto prev = eval::attribute_recall({cand}, specs, lex);
    for (const auto& w : gt) {
      cand += " " + w;
      const auto cur = eval::attribute_recall({cand}, specs, lex);
      CHECK(cur.objects >= prev.objects);
      CHECK(cur.actions >= prev.actions);
      CHECK(cur.environments >= prev.environments);
      prev = cur;
    }
    CHECK(prev.objects == 1.0);
  }
}

namespace {

struct ToyRetrieval {
  retrieval::RetrievalDatabase db;
  std::vector<attr::AttributeRecord> truth;
};

ToyRetrieval toy_retrieval(std::mt19937_64& rng, int n, int d) {
  static const char* objs[] = {"cube", "ball", "cone"};
  static const char* acts[] = {"stack", "line"};
  ToyRetrieval t;
  std::vector<std::string> ids;
  std::normal_distribution<float> nd;
  std::vector<float> rows(static_cast<std::size_t>(n) * d);
  for (auto& x : rows) x = nd(rng);
  for (int i = 0; i < n; ++i) {
    attr::AttributeRecord r;
    r.add(attr::Category::Object, objs[rng() % 3]);
    r.add(attr::Category::Action, acts[rng() % 2]);
    t.truth.push_back(r);
    ids.push_back("e" + std::to_string(i));
  }
  t.db = retrieval::build_database(ids, t.truth, rows, d, {}, "h");
  return t;
}

}  // namespace

TEST_CASE("retrieval recall: self hits, monotone in k, and the random-query base rate") {
  std::mt19937_64 rng(35);
  const int d = 16;
  const auto t = toy_retrieval(rng, 300, d);
  std::vector<float> self;
  for (const auto& e : t.db.entries()) self.insert(self.end(), e.key.begin(), e.key.end());
  CHECK(eval::retrieval_recall(t.db, t.truth, self, t.truth, 1) == 1.0);

  const int q = 3000;
  std::normal_distribution<float> nd;
  std::vector<float> queries(static_cast<std::size_t>(q) * d);
  for (auto& x : queries) x = nd(rng);
  std::vector<attr::AttributeRecord> qt;
  double base = 0.0;
  for (int i = 0; i < q; ++i) {
    qt.push_back(t.truth[rng() % t.truth.size()]);
    int eligible = 0;
    for (const auto& e : t.truth) eligible += eval::retrieval_hit(qt.back(), e);
    base += static_cast<double>(eligible) / static_cast<double>(t.truth.size());
  }
  base /= q;
  double prev = 0.0;
  for (int k : {1, 2, 4, 8, 16}) {
    const double r = eval::retrieval_recall(t.db, t.truth, queries, qt, k);
    CHECK(r >= prev);
    prev = r;
    if (k == 1) CHECK(std::abs(r - base) <= 0.05);
  }
}

namespace {

eval::RunSummary summary(const std::string& axis, const std::string& value, const std::string& seed, double cider_out,
                         const std::string& paired = "p") {
  eval::RunSummary s;
  s.run_id = "run-" + value + "-" + seed;
  s.axis = axis;
  s.value = value;
  s.seed = seed;
  s.paired_hash = paired;
  s.report.splits["test-in"] = {};
  s.report.splits["test-out"] = {};
  s.report.splits["test-out"].cider = cider_out;
  return s;
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream f(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(f, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("report: single run gives a single-row table") {
  const auto dir = fs::temp_directory_path() / "ragcap_report_single";
  fs::remove_all(dir);
  const auto files = eval::render_report({summary("", "", "s1", 0.5)}, dir);
  CHECK(lines(dir / "baseline.csv").size() == 2);
  CHECK(lines(dir / "baseline_runs.csv").size() == 2);
  CHECK_FALSE(fs::exists(dir / "baseline.svg"));
  fs::remove_all(dir);
}

TEST_CASE("report: lambda sweep gives a four-row table and a plot") {
  const auto dir = fs::temp_directory_path() / "ragcap_report_lambda";
  fs::remove_all(dir);
  std::vector<eval::RunSummary> runs;
  for (const char* v : {"3", "5", "7", "9"})
    for (const char* s : {"s1", "s2"}) runs.push_back(summary("lambda", v, s, std::stod(v) / 10 + (s[1] == '1' ? 0.0 : 0.2)));
  eval::render_report(runs, dir);
  const auto rows = lines(dir / "lambda.csv");
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].rfind("axis,value,runs,seeds", 0) == 0);
  CHECK(rows[1].rfind("lambda,3,2,s1;s2", 0) == 0);
  // out_cider mean for lambda 3 is 0.4, sample std of {0.3, 0.5} is 0.141421.
  CHECK(rows[1].find(",0.400000,0.141421") != std::string::npos);
  CHECK(lines(dir / "lambda_runs.csv").size() == 9);
  const auto svg = lines(dir / "lambda.svg");
  REQUIRE_FALSE(svg.empty());
  CHECK(svg.front().rfind("<svg", 0) == 0);
  fs::remove_all(dir);
}

TEST_CASE("report: mismatched paired hashes are rejected") {
  const auto dir = fs::temp_directory_path() / "ragcap_report_bad";
  CHECK_THROWS_AS(eval::render_report({summary("top_n", "1", "s", 0.1, "p"), summary("top_n", "3", "s", 0.1, "q")}, dir),
                  eval::ReportError);
  CHECK_THROWS_AS(eval::render_report({}, dir), eval::ReportError);
  CHECK_THROWS_AS(eval::render_report({summary("top_n", "many", "s", 0.1)}, dir), eval::ReportError);
  fs::remove_all(dir);
}
