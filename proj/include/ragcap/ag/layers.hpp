#pragma once

// Parameterised building blocks shared by the encoder, denoiser and captioner.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ragcap/ag/ops.hpp"

namespace ragcap::ag {

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

/// Seeded source of initial parameter values.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  template <typename T>
  Var<T> normal(Shape shape, double stddev);
  template <typename T>
  Var<T> constant(Shape shape, double value);

 private:
  std::mt19937_64 rng_;
};

template <typename T>
void set_requires_grad(const ParamList<T>& params, bool on);
template <typename T>
std::size_t parameter_count(const ParamList<T>& params);

template <typename T>
struct Linear {
  Var<T> w;  // [in, out]
  Var<T> b;  // [out], undefined when bias-free

  Linear() = default;
  Linear(int in, int out, Initializer& init, bool bias = true, double gain = 1.0);
  Var<T> operator()(const Var<T>& x) const { return linear(x, w, b); }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct LayerNorm {
  Var<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(int dim, Initializer& init);
  Var<T> operator()(const Var<T>& x) const { return layer_norm(x, gamma, beta); }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct Mlp {
  Linear<T> fc1, fc2;

  Mlp() = default;
  Mlp(int dim, int hidden, Initializer& init);
  Var<T> operator()(const Var<T>& x) const { return fc2(gelu(fc1(x))); }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// Projections around ag::attention.
template <typename T>
struct MultiHeadAttention {
  Linear<T> q, k, v, o;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(int dim, int heads, Initializer& init);
  /// queries [B*Lq, D] attend to keys/values [B*Lk, D].
  Var<T> operator()(const Var<T>& queries, const Var<T>& keys, const AttentionSpec& spec) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// Pre-LN self-attention block.
template <typename T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  MultiHeadAttention<T> attn;
  Mlp<T> mlp;

  TransformerBlock() = default;
  TransformerBlock(int dim, int heads, int hidden, Initializer& init);
  /// x [B*L, D]; spec.query_len == spec.key_len == L.
  Var<T> operator()(const Var<T>& x, const AttentionSpec& spec) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

/// Learnable queries cross-attending to a memory sequence.
template <typename T>
struct QueryBlock {
  Var<T> queries;  // [n_queries, D]
  LayerNorm<T> ln_q, ln_mem, ln_mlp;
  MultiHeadAttention<T> attn;
  Mlp<T> mlp;
  bool query_residual = true;

  QueryBlock() = default;
  QueryBlock(int n_queries, int dim, int heads, int hidden, Initializer& init, bool query_residual);
  int num_queries() const { return queries.dim(0); }
  /// memory [B*Lm, D] -> [B*n_queries, D].
  Var<T> operator()(const Var<T>& memory, int batch, int memory_len,
                    const std::vector<int>& memory_valid = {}) const;
  /// Same block with caller-supplied query rows [B*Lq, D] in place of the learned ones.
  Var<T> attend(const Var<T>& query_rows, int query_len, const Var<T>& memory, int batch,
                int memory_len, const std::vector<int>& memory_valid = {}) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct Conv2d {
  Var<T> w;  // [out, in, k, k]
  Var<T> b;

  Conv2d() = default;
  Conv2d(int in, int out, int kernel, Initializer& init, double gain = 1.0);
  Var<T> operator()(const Var<T>& x) const { return conv2d(x, w, b); }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

}  // namespace ragcap::ag
