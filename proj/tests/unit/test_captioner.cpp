#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "doctest.h"
#include "ragcap/captioner.hpp"
#include "support.hpp"

using namespace ragcap;
using captioner::Captioner;
using captioner::Vocab;
using ag::Var;

namespace {

const std::vector<std::string> kTexts{"a red cube stacked on a grid background",
                                      "two blue balls lined up on a plain surface",
                                      "cube and stack in grid", "something and being in somewhere"};

captioner::CaptionerConfig small_config() {
  captioner::CaptionerConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.n_image_queries = 3;
  c.n_text_queries = 2;
  c.max_len = 10;
  c.max_prompt_len = 64;
  return c;
}

Var<float> random_float(std::mt19937_64& rng, ag::Shape shape, float scale = 1.0f) {
  std::normal_distribution<float> nd(0.0f, scale);
  std::vector<float> v(ag::numel(shape));
  for (auto& x : v) x = nd(rng);
  return Var<float>::from(std::move(shape), std::move(v));
}

std::vector<float> vals(const Var<float>& v) { return {v.value().begin(), v.value().end()}; }

}  // namespace

TEST_CASE("vocab: dense ids, distinct specials, round trip") {
  const auto v = Vocab::build(kTexts);
  const std::set<int> specials{Vocab::kPad, Vocab::kBos, Vocab::kEos, Vocab::kUnk};
  CHECK(specials.size() == 4);
  for (int i = 0; i < v.size(); ++i) CHECK(v.id(v.token(i)) == i);
  CHECK(v.encode("zebra") == std::vector<int>{Vocab::kUnk});
  CHECK(v.decode(v.encode(kTexts[0])) == kTexts[0]);
  auto ids = v.encode("red cube");
  ids.push_back(Vocab::kEos);
  ids.push_back(v.id("grid"));
  CHECK(v.decode(ids) == "red cube");
  const auto path = std::filesystem::temp_directory_path() / "ragcap_vocab.txt";
  v.save(path);
  CHECK(Vocab::load(path) == v);
  std::filesystem::remove(path);
}

TEST_CASE("teacher forcing shifts by one and pads") {
  std::vector<int> in, tgt;
  captioner::make_teacher_forcing({7, 8, 9}, 6, in, tgt);
  CHECK(in == std::vector<int>{Vocab::kBos, 7, 8, 9, 0, 0});
  CHECK(tgt == std::vector<int>{7, 8, 9, Vocab::kEos, 0, 0});
  in.clear();
  tgt.clear();
  captioner::make_teacher_forcing({7, 8, 9, 10}, 3, in, tgt);
  CHECK(in == std::vector<int>{Vocab::kBos, 7, 8});
  CHECK(tgt == std::vector<int>{7, 8, 9});
}

TEST_CASE("prompt encoding: empty prompt, determinism and sensitivity") {
  const Captioner cap(small_config(), Vocab::build(kTexts), 1);
  const auto empty = cap.tokenize_prompts({""});
  CHECK(empty.length == 1);
  CHECK(empty.ids == std::vector<int>{Vocab::kEos});
  CHECK(cap.encode_prompt(empty).shape() == ag::Shape{1, 16});

  const auto a = cap.encode_prompt(cap.tokenize_prompts({"cube and stack in grid"}));
  const auto b = cap.encode_prompt(cap.tokenize_prompts({"cube and stack in grid"}));
  const auto c = cap.encode_prompt(cap.tokenize_prompts({"cube and stack in background"}));
  CHECK(vals(a) == vals(b));
  CHECK(vals(a) != vals(c));
}

TEST_CASE("text q-former has a fixed output size and ignores padding") {
  const Captioner cap(small_config(), Vocab::build(kTexts), 2);
  for (int len : {1, 5, 50}) {
    std::string p;
    for (int i = 1; i < len; ++i) p += "cube ";
    const auto pb = cap.tokenize_prompts({p});
    CHECK(pb.length == len);
    CHECK(cap.text_qformer(cap.encode_prompt(pb), pb).shape() == ag::Shape{2, 16});
  }

  auto pb = cap.tokenize_prompts({"cube and stack in grid", "cube"});
  REQUIRE(pb.valid[1] == 2);
  const auto ref = cap.text_qformer(cap.encode_prompt(pb), pb);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    auto shuffled = pb;
    for (int j = shuffled.valid[1]; j < shuffled.length; ++j)
      shuffled.ids[static_cast<std::size_t>(shuffled.length + j)] = 4 + static_cast<int>(rng() % 10);
    const auto out = cap.text_qformer(cap.encode_prompt(shuffled), shuffled);
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out.value()[i] == doctest::Approx(ref.value()[i]).epsilon(1e-6));
  }
}

TEST_CASE("fusion concatenates image rows then fused text rows") {
  const Captioner cap(small_config(), Vocab::build(kTexts), 4);
  std::mt19937_64 rng(5);
  const auto img = random_float(rng, {2 * 3, 16});
  const auto pb = cap.tokenize_prompts({"cube and stack in grid", "something and being in somewhere"});
  const auto f = cap.fuse(img, pb, false);
  REQUIRE(f.concat.shape() == ag::Shape{2 * 5, 16});
  CHECK(vals(f.image_features) == vals(img));
  for (int b = 0; b < 2; ++b)
    for (int r = 0; r < 5; ++r)
      for (int d = 0; d < 16; ++d) {
        const float want = r < 3 ? img.value()[static_cast<std::size_t>((b * 3 + r) * 16 + d)]
                                 : f.fused_text.value()[static_cast<std::size_t>((b * 2 + r - 3) * 16 + d)];
        CHECK(f.concat.value()[static_cast<std::size_t>((b * 5 + r) * 16 + d)] == want);
      }
  const auto g = cap.fuse(img, pb, true);
  CHECK(vals(g.image_features) != vals(img));
  CHECK(vals(g.fused_text) == vals(f.fused_text));
  CHECK_THROWS_AS(cap.fuse(random_float(rng, {2 * 4, 16}), pb, false), captioner::ContractError);
}

TEST_CASE("decoder is causal, finite and normalised") {
  const Captioner cap(small_config(), Vocab::build(kTexts), 6);
  std::mt19937_64 rng(7);
  const auto ctx = random_float(rng, {2 * 5, 16});
  const int L = 8, V = cap.vocab().size();
  std::vector<int> ids(2 * L);
  for (auto& x : ids) x = 4 + static_cast<int>(rng() % static_cast<unsigned>(V - 4));
  ids[0] = ids[L] = Vocab::kBos;
  const auto base = cap.decode_logits(ctx, 2, ids, L);
  for (float x : base.value()) CHECK(std::isfinite(x));
  for (int r = 0; r < 2 * L; ++r) {
    double mx = -1e30, z = 0;
    for (int c = 0; c < V; ++c) mx = std::max(mx, double(base.value()[static_cast<std::size_t>(r * V + c)]));
    for (int c = 0; c < V; ++c) z += std::exp(base.value()[static_cast<std::size_t>(r * V + c)] - mx);
    double s = 0;
    for (int c = 0; c < V; ++c) s += std::exp(base.value()[static_cast<std::size_t>(r * V + c)] - mx) / z;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
  }
  for (int j = 1; j < L; ++j) {
    auto changed = ids;
    changed[static_cast<std::size_t>(j)] = changed[static_cast<std::size_t>(j)] == 5 ? 6 : 5;
    const auto out = cap.decode_logits(ctx, 2, changed, L);
    for (int pos = 0; pos < j; ++pos)
      for (int c = 0; c < V; ++c)
        REQUIRE(out.value()[static_cast<std::size_t>(pos * V + c)] == base.value()[static_cast<std::size_t>(pos * V + c)]);
    bool moved = false;
    for (int c = 0; c < V; ++c)
      moved |= out.value()[static_cast<std::size_t>(j * V + c)] != base.value()[static_cast<std::size_t>(j * V + c)];
    CHECK(moved);
    // Sample 1 is untouched by edits to sample 0.
    for (int c = 0; c < L * V; ++c)
      REQUIRE(out.value()[static_cast<std::size_t>(L * V + c)] == base.value()[static_cast<std::size_t>(L * V + c)]);
  }
  std::vector<int> too_long(11, Vocab::kBos);
  CHECK_THROWS_AS(cap.decode_logits(random_float(rng, {5, 16}), 1, too_long, 11), captioner::ContractError);
  auto no_bos = ids;
  no_bos[0] = 5;
  CHECK_THROWS_AS(cap.decode_logits(ctx, 2, no_bos, L), captioner::ContractError);
}

TEST_CASE("caption loss: analytic values, oracle and gradient") {
  const std::vector<int> tgt{3, 0, 15, 7};
  auto uniform = Var<double>::zeros({4, 16});
  CHECK(captioner::caption_loss(uniform, tgt).item() == doctest::Approx(std::log(16.0)).epsilon(1e-10));

  std::vector<double> perfect(4 * 16, 0.0);
  for (int r = 0; r < 4; ++r) perfect[static_cast<std::size_t>(r * 16 + tgt[static_cast<std::size_t>(r)])] = 200.0;
  CHECK(captioner::caption_loss(Var<double>::from({4, 16}, perfect), tgt).item() < 1e-12);

  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    auto logits = testsupport::random_var(rng, {6, 9}, 3.0);
    std::vector<int> t(6);
    for (auto& x : t) x = static_cast<int>(rng() % 9);
    t[0] = 1 + static_cast<int>(rng() % 8);
    double nll = 0;
    int n = 0;
    for (int r = 0; r < 6; ++r) {
      if (t[static_cast<std::size_t>(r)] == 0) continue;
      double z = 0;
      for (int c = 0; c < 9; ++c) z += std::exp(logits.value()[static_cast<std::size_t>(r * 9 + c)]);
      nll -= logits.value()[static_cast<std::size_t>(r * 9 + t[static_cast<std::size_t>(r)])] - std::log(z);
      ++n;
    }
    CHECK(captioner::caption_loss(logits, t).item() == doctest::Approx(nll / n).epsilon(1e-9));
    CHECK(testsupport::max_grad_error([&] { return captioner::caption_loss(logits, t); }, {logits}) < 1e-4);
  }
  CHECK_THROWS_AS(captioner::caption_loss(uniform, std::vector<int>{0, 0, 0, 0}), captioner::ContractError);
}

TEST_CASE("generation is deterministic, bounded, and beam 1 equals greedy") {
  const Captioner cap(small_config(), Vocab::build(kTexts), 9);
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    const auto ctx = random_float(rng, {3 * 5, 16}, 2.0f);
    const auto g1 = cap.generate(ctx, 3, {1});
    const auto g2 = cap.generate(ctx, 3, {1});
    CHECK(g1 == g2);
    REQUIRE(g1.size() == 3);
    for (const auto& s : g1) {
      CHECK(static_cast<int>(s.size()) <= 10);
      for (int id : s) CHECK(id != Vocab::kEos);
    }
    captioner::DecodeOptions b1;
    b1.beam_search = true;
    CHECK(cap.generate(ctx, 3, b1) == g1);
    const auto beam = cap.generate(ctx, 3, {3});
    CHECK(beam == cap.generate(ctx, 3, {3}));
  }
}
