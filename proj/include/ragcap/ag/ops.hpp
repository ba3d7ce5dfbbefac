#pragma once

// Differentiable ops. Matrices are row-major [rows, cols]; image batches are
// [batch, channels, height, width]. Batched sequence data is stored as
// [batch * length, features] with samples contiguous.

#include <cstdint>
#include <vector>

#include "ragcap/ag/tensor.hpp"

namespace ragcap::ag {

// ---- dense algebra ---------------------------------------------------------

/// C = A·B (A [m,k], B [k,n]).
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// x·W + b with W stored [in, out]; `bias` may be undefined.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias);
template <typename T> Var<T> transpose(const Var<T>& a);
/// Same data, new shape (element count must match).
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);

// ---- elementwise -----------------------------------------------------------

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
/// x[i, :] + r[i mod R, :] for x [M, N], r [R, N] with M divisible by R.
template <typename T> Var<T> add_rows_cyclic(const Var<T>& x, const Var<T>& r);
template <typename T> Var<T> gelu(const Var<T>& a);
template <typename T> Var<T> silu(const Var<T>& a);

// ---- reductions and normalisation ------------------------------------------

template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
/// Mean over consecutive groups of `group` rows: [B*group, N] -> [B, N].
template <typename T> Var<T> mean_row_groups(const Var<T>& x, int group);
template <typename T> Var<T> l2_normalize_rows(const Var<T>& x, T eps = T(1e-12));
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

// ---- row bookkeeping for batched sequences ---------------------------------

/// Repeats all rows `times` times: [R, N] -> [times*R, N].
template <typename T> Var<T> tile_rows(const Var<T>& x, int times);
/// Per-sample concatenation: a [B*Ra, N], b [B*Rb, N] -> [B*(Ra+Rb), N].
template <typename T> Var<T> concat_per_sample(const Var<T>& a, const Var<T>& b, int batch);
/// Per-sample row window: x [B*L, N] -> [B*count, N] taking rows [begin, begin+count).
template <typename T> Var<T> slice_per_sample(const Var<T>& x, int batch, int begin, int count);
/// Gathers rows of `table` [V, N] by id.
template <typename T> Var<T> embedding(const Var<T>& table, const std::vector<int>& ids);

// ---- attention -------------------------------------------------------------

struct AttentionSpec {
  int batch = 1;
  int query_len = 1;
  int key_len = 1;
  int heads = 1;
  /// Valid key count per sample (keys past it are masked); empty = all valid.
  std::vector<int> key_valid;
  /// Causal mask: query i sees key j iff j < prefix or j <= i.
  bool causal = false;
  int prefix = 0;
};

/// Multi-head scaled dot-product attention on pre-projected q [B*Lq, D],
/// k [B*Lk, D], v [B*Lk, D]. Heads split D evenly. Returns [B*Lq, D].
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const AttentionSpec& spec);

// ---- losses ----------------------------------------------------------------

/// Mean next-token negative log-likelihood over rows whose target != ignore.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& targets, int ignore_index);
/// Mean squared error over all elements.
template <typename T> Var<T> mse(const Var<T>& pred, const Var<T>& target);

// ---- images ----------------------------------------------------------------

/// 2-D convolution, square kernel, stride 1, "same" zero padding.
/// x [B, Cin, H, W], w [Cout, Cin, k, k], bias [Cout] (may be undefined).
template <typename T> Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias);
template <typename T> Var<T> avg_pool2(const Var<T>& x);
template <typename T> Var<T> upsample2(const Var<T>& x);
template <typename T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
/// Feature-wise modulation: x * (1 + gamma) + beta with [gamma | beta] = gb [B, 2C].
template <typename T> Var<T> film(const Var<T>& x, const Var<T>& gb);
/// Non-overlapping p×p patches: [B, C, H, W] -> [B*(H/p)*(W/p), C*p*p].
template <typename T> Var<T> patchify(const Var<T>& x, int p);

}  // namespace ragcap::ag
