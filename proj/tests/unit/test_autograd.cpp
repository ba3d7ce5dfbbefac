#include <cmath>
#include <random>

#include "doctest.h"
#include "ragcap/ag/archive.hpp"
#include "ragcap/ag/layers.hpp"
#include "ragcap/ag/optim.hpp"
#include "support.hpp"

using namespace ragcap;
using ag::Var;
using testsupport::max_grad_error;
using testsupport::probe;
using testsupport::random_var;

namespace {
constexpr double kGradTol = 1e-6;
}

TEST_CASE("elementwise and reduction ops match central differences") {
  std::mt19937_64 rng(1);
  auto a = random_var(rng, {3, 5});
  auto b = random_var(rng, {3, 5});
  CHECK(max_grad_error([&] { return probe(ag::add(a, b)); }, {a, b}) < kGradTol);
  CHECK(max_grad_error([&] { return probe(ag::sub(a, b)); }, {a, b}) < kGradTol);
  CHECK(max_grad_error([&] { return probe(ag::mul(a, b)); }, {a, b}) < kGradTol);
  CHECK(max_grad_error([&] { return probe(ag::gelu(a)); }, {a}) < kGradTol);
  CHECK(max_grad_error([&] { return probe(ag::silu(a)); }, {a}) < kGradTol);
  CHECK(max_grad_error([&] { return ag::mean(ag::mul(a, a)); }, {a}) < kGradTol);
  CHECK(max_grad_error([&] { return probe(ag::l2_normalize_rows(a)); }, {a}) < kGradTol);
  CHECK(max_grad_error([&] { return probe(ag::mean_row_groups(a, 3)); }, {a}) < kGradTol);
  auto r = random_var(rng, {5});
  CHECK(max_grad_error([&] { return probe(ag::add_rows_cyclic(a, ag::reshape(r, {1, 5}))); }, {a, r}) < kGradTol);
}

TEST_CASE("matmul, linear, transpose and layer norm gradients") {
  std::mt19937_64 rng(2);
  auto x = random_var(rng, {4, 6});
  auto w = random_var(rng, {6, 3});
  auto bias = random_var(rng, {3});
  auto g = random_var(rng, {6});
  auto be = random_var(rng, {6});
  CHECK(max_grad_error([&] { return probe(ag::matmul(x, w)); }, {x, w}) < kGradTol);
  CHECK(max_grad_error([&] { return probe(ag::linear(x, w, bias)); }, {x, w, bias}) < kGradTol);
  CHECK(max_grad_error([&] { return probe(ag::transpose(x)); }, {x}) < kGradTol);
  CHECK(max_grad_error([&] { return probe(ag::layer_norm(x, g, be)); }, {x, g, be}) < kGradTol);
}

TEST_CASE("gelu forward is the tanh approximation") {
  auto x = Var<double>::from({5}, {-3.0, -0.5, 0.0, 0.7, 2.5});
  const auto y = ag::gelu(x);
  for (std::size_t i = 0; i < 5; ++i) {
    const double v = x.value()[i];
    const double ref = 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
    CHECK(y.value()[i] == doctest::Approx(ref).epsilon(1e-12));
  }
}

namespace {

// Naive per-head softmax attention used as an independent forward oracle.
std::vector<double> naive_attention(const Var<double>& q, const Var<double>& k, const Var<double>& v,
                                    const ag::AttentionSpec& s) {
  const int d = q.dim(1), hd = d / s.heads;
  std::vector<double> out(static_cast<std::size_t>(s.batch) * s.query_len * d, 0.0);
  for (int b = 0; b < s.batch; ++b) {
    const int valid = s.key_valid.empty() ? s.key_len : s.key_valid[static_cast<std::size_t>(b)];
    for (int h = 0; h < s.heads; ++h) {
      for (int i = 0; i < s.query_len; ++i) {
        std::vector<double> logit;
        std::vector<int> keys;
        for (int j = 0; j < s.key_len; ++j) {
          if (j >= valid) continue;
          if (s.causal && !(j < s.prefix || j <= i)) continue;
          double dot = 0.0;
          for (int c = 0; c < hd; ++c)
            dot += q.value()[static_cast<std::size_t>((b * s.query_len + i) * d + h * hd + c)] *
                   k.value()[static_cast<std::size_t>((b * s.key_len + j) * d + h * hd + c)];
          logit.push_back(dot / std::sqrt(static_cast<double>(hd)));
          keys.push_back(j);
        }
        double mx = -1e300, z = 0.0;
        for (double l : logit) mx = std::max(mx, l);
        for (double& l : logit) z += (l = std::exp(l - mx));
        for (std::size_t t = 0; t < keys.size(); ++t)
          for (int c = 0; c < hd; ++c)
            out[static_cast<std::size_t>((b * s.query_len + i) * d + h * hd + c)] +=
                logit[t] / z * v.value()[static_cast<std::size_t>((b * s.key_len + keys[t]) * d + h * hd + c)];
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("attention agrees with a naive oracle under padding and causal masks") {
  std::mt19937_64 rng(3);
  for (int variant = 0; variant < 3; ++variant) {
    ag::AttentionSpec s;
    s.batch = 2;
    s.heads = 2;
    s.query_len = variant == 2 ? 5 : 3;
    s.key_len = 5;
    if (variant == 1) s.key_valid = {5, 2};
    if (variant == 2) {
      s.causal = true;
      s.prefix = 2;
    }
    auto q = random_var(rng, {s.batch * s.query_len, 4});
    auto k = random_var(rng, {s.batch * s.key_len, 4});
    auto v = random_var(rng, {s.batch * s.key_len, 4});
    const auto out = ag::attention(q, k, v, s);
    const auto ref = naive_attention(q, k, v, s);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(out.value()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    CHECK(max_grad_error([&] { return probe(ag::attention(q, k, v, s)); }, {q, k, v}) < kGradTol);
  }
}

TEST_CASE("cross entropy ignores padding and rejects an all-padding batch") {
  std::mt19937_64 rng(4);
  auto logits = random_var(rng, {4, 6});
  const std::vector<int> targets{1, 0, 5, 0};
  const auto loss = ag::cross_entropy(logits, targets, 0);
  double ref = 0.0;
  for (int r : {0, 2}) {
    double mx = -1e300, z = 0.0;
    for (int c = 0; c < 6; ++c) mx = std::max(mx, logits.value()[static_cast<std::size_t>(r * 6 + c)]);
    for (int c = 0; c < 6; ++c) z += std::exp(logits.value()[static_cast<std::size_t>(r * 6 + c)] - mx);
    ref += -(logits.value()[static_cast<std::size_t>(r * 6 + targets[static_cast<std::size_t>(r)])] - mx - std::log(z));
  }
  CHECK(loss.item() == doctest::Approx(ref / 2).epsilon(1e-12));
  CHECK(max_grad_error([&] { return ag::cross_entropy(logits, targets, 0); }, {logits}) < kGradTol);
  CHECK_THROWS_AS(ag::cross_entropy(logits, std::vector<int>{0, 0, 0, 0}, 0), std::invalid_argument);
}

TEST_CASE("conv2d matches a direct loop and pooling ops have exact gradients") {
  std::mt19937_64 rng(5);
  auto x = random_var(rng, {2, 3, 4, 4});
  auto w = random_var(rng, {2, 3, 3, 3});
  auto b = random_var(rng, {2});
  const auto y = ag::conv2d(x, w, b);
  REQUIRE(y.shape() == ag::Shape{2, 2, 4, 4});
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 2; ++o)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
          double acc = b.value()[static_cast<std::size_t>(o)];
          for (int c = 0; c < 3; ++c)
            for (int di = -1; di <= 1; ++di)
              for (int dj = -1; dj <= 1; ++dj) {
                const int ii = i + di, jj = j + dj;
                if (ii < 0 || jj < 0 || ii >= 4 || jj >= 4) continue;
                acc += x.value()[static_cast<std::size_t>(((n * 3 + c) * 4 + ii) * 4 + jj)] *
                       w.value()[static_cast<std::size_t>(((o * 3 + c) * 3 + di + 1) * 3 + dj + 1)];
              }
          CHECK(y.value()[static_cast<std::size_t>(((n * 2 + o) * 4 + i) * 4 + j)] == doctest::Approx(acc).epsilon(1e-12));
        }
  CHECK(max_grad_error([&] { return probe(ag::conv2d(x, w, b)); }, {x, w, b}) < kGradTol);
  CHECK(max_grad_error([&] { return probe(ag::avg_pool2(x)); }, {x}) < kGradTol);
  CHECK(max_grad_error([&] { return probe(ag::upsample2(x)); }, {x}) < kGradTol);
  auto x2 = random_var(rng, {2, 1, 4, 4});
  CHECK(max_grad_error([&] { return probe(ag::concat_channels(x, x2)); }, {x, x2}) < kGradTol);
  auto gb = random_var(rng, {2, 6});
  CHECK(max_grad_error([&] { return probe(ag::film(x, gb)); }, {x, gb}) < kGradTol);
  CHECK(max_grad_error([&] { return probe(ag::patchify(x, 2)); }, {x}) < kGradTol);
}

TEST_CASE("sequence plumbing ops have exact gradients") {
  std::mt19937_64 rng(6);
  auto a = random_var(rng, {6, 3});
  auto b = random_var(rng, {4, 3});
  auto table = random_var(rng, {5, 3});
  auto p = random_var(rng, {2, 4});
  auto t = random_var(rng, {2, 4});
  CHECK(max_grad_error([&] { return probe(ag::concat_per_sample(a, b, 2)); }, {a, b}) < kGradTol);
  CHECK(max_grad_error([&] { return probe(ag::slice_per_sample(a, 2, 1, 2)); }, {a}) < kGradTol);
  CHECK(max_grad_error([&] { return probe(ag::tile_rows(b, 3)); }, {b}) < kGradTol);
  CHECK(max_grad_error([&] { return probe(ag::embedding(table, {4, 0, 4, 2})); }, {table}) < kGradTol);
  CHECK(max_grad_error([&] { return ag::mse(p, t); }, {p, t}) < kGradTol);
}

TEST_CASE("transformer and query blocks have exact parameter gradients") {
  ag::Initializer init(7);
  ag::TransformerBlock<double> block(8, 2, 16, init);
  ag::QueryBlock<double> qb(3, 8, 2, 16, init, true);
  std::mt19937_64 rng(8);
  auto x = random_var(rng, {2 * 4, 8});
  ag::AttentionSpec s;
  s.batch = 2;
  s.heads = 2;
  s.query_len = 4;
  s.key_len = 4;
  ag::ParamList<double> params;
  block.collect(params, "b");
  qb.collect(params, "q");
  std::vector<Var<double>> leaves{x};
  for (auto& p : params) {
    p.var.set_requires_grad(true);
    leaves.push_back(p.var);
  }
  auto loss = [&] { return probe(qb(block(x, s), 2, 4, {4, 3})); };
  CHECK(max_grad_error(loss, leaves, 1e-6, 8) < kGradTol);
}

TEST_CASE("no-grad guard records no graph") {
  auto a = Var<float>::from({2}, {1.0f, 2.0f}, true);
  {
    ag::NoGradGuard guard;
    const auto y = ag::mul(a, a);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(ag::mul(a, a).requires_grad());
}

TEST_CASE("adamw skips parameters without gradients and clips the global norm") {
  auto used = Var<float>::from({2, 2}, {1, 2, 3, 4}, true);
  auto unused = Var<float>::from({2, 2}, {1, 1, 1, 1}, true);
  ag::AdamW opt({{"used", used}, {"unused", unused}}, {});
  ag::sum(ag::scale(used, 100.0f)).backward();
  opt.step(0.1);
  CHECK(opt.last_grad_norm() == doctest::Approx(200.0));
  for (float v : unused.value()) CHECK(v == 1.0f);
  // First Adam step moves each coordinate by lr (bias-corrected m/sqrt(v) = 1) plus decay.
  CHECK(used.value()[0] == doctest::Approx(1.0f - 0.1f - 0.1f * 0.01f * 1.0f).epsilon(1e-5));
  CHECK(ag::cosine_lr(1.0, 0, 100, 10) == doctest::Approx(0.1));
  CHECK(std::abs(ag::cosine_lr(1.0, 100, 100, 10)) < 1e-12);
}

TEST_CASE("archive round trip preserves values and hash") {
  ag::Initializer init(9);
  ag::Linear<float> lin(4, 3, init);
  ag::ParamList<float> params;
  lin.collect(params, "lin");
  const auto bytes = ag::serialize_params(params);
  ag::Initializer other(10);
  ag::Linear<float> copy(4, 3, other);
  ag::ParamList<float> dst;
  copy.collect(dst, "lin");
  CHECK(ag::params_hash(dst) != ag::params_hash(params));
  ag::deserialize_params(bytes, dst);
  CHECK(ag::params_hash(dst) == ag::params_hash(params));
  CHECK(ag::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  ag::ParamList<float> wrong{{"lin.w", Var<float>::zeros({3, 4})}};
  CHECK_THROWS(ag::deserialize_params(bytes, wrong));
}
