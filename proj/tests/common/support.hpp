#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "ragcap/ag/ops.hpp"

namespace testsupport {

using ragcap::ag::Var;

inline Var<double> random_var(std::mt19937_64& rng, ragcap::ag::Shape shape, double scale = 1.0,
                              bool requires_grad = true) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(ragcap::ag::numel(shape));
  for (auto& x : v) x = nd(rng);
  return Var<double>::from(std::move(shape), std::move(v), requires_grad);
}

/// Reduces a tensor to a scalar through fixed random weights so every
/// output element carries a distinct upstream gradient.
inline Var<double> probe(const Var<double>& out, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  auto w = random_var(rng, out.shape(), 1.0, false);
  return ragcap::ag::sum(ragcap::ag::mul(out, w));
}

/// Largest mismatch between backprop gradients and central differences,
/// measured as |a - n| / max(1, |a|, |n|).
inline double max_grad_error(const std::function<Var<double>()>& loss, std::vector<Var<double>> leaves,
                             double h = 1e-6, std::size_t max_elems = 64) {
  for (auto& l : leaves) l.zero_grad();
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) {
    const auto g = l.grad();
    analytic.emplace_back(g.begin(), g.end());
    if (analytic.back().empty()) analytic.back().assign(l.numel(), 0.0);
  }
  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    const std::size_t n = leaf.numel();
    const std::size_t stride = std::max<std::size_t>(1, n / max_elems);
    for (std::size_t i = 0; i < n; i += stride) {
      const double keep = leaf.value()[i];
      leaf.value()[i] = keep + h;
      const double up = loss().item();
      leaf.value()[i] = keep - h;
      const double down = loss().item();
      leaf.value()[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[li][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)}));
    }
  }
  return worst;
}

}  // namespace testsupport
