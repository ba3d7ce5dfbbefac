#include "ragcap/ag/layers.hpp"

#include <cmath>

namespace ragcap::ag {

template <typename T>
Var<T> Initializer::normal(Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> values(numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng_));
  return Var<T>::from(std::move(shape), std::move(values), true);
}

template <typename T>
Var<T> Initializer::constant(Shape shape, double value) {
  return Var<T>::full(std::move(shape), static_cast<T>(value), true);
}

template <typename T>
void set_requires_grad(const ParamList<T>& params, bool on) {
  for (const auto& p : params) {
    auto v = p.var;
    v.set_requires_grad(on);
    v.zero_grad();
  }
}

template <typename T>
std::size_t parameter_count(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var.numel();
  return n;
}

template <typename T>
Linear<T>::Linear(int in, int out, Initializer& init, bool bias, double gain)
    : w(init.normal<T>({in, out}, gain / std::sqrt(static_cast<double>(in)))) {
  if (bias) b = init.constant<T>({out}, 0.0);
}

template <typename T>
void Linear<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".w", w});
  if (b.defined()) out.push_back({prefix + ".b", b});
}

template <typename T>
LayerNorm<T>::LayerNorm(int dim, Initializer& init)
    : gamma(init.constant<T>({dim}, 1.0)), beta(init.constant<T>({dim}, 0.0)) {}

template <typename T>
void LayerNorm<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

template <typename T>
Mlp<T>::Mlp(int dim, int hidden, Initializer& init)
    : fc1(dim, hidden, init), fc2(hidden, dim, init, true, 0.5) {}

template <typename T>
void Mlp<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(int dim, int n_heads, Initializer& init)
    : q(dim, dim, init),
      k(dim, dim, init),
      v(dim, dim, init),
      o(dim, dim, init, true, 0.5),
      heads(n_heads) {}

template <typename T>
Var<T> MultiHeadAttention<T>::operator()(const Var<T>& queries, const Var<T>& keys,
                                         const AttentionSpec& spec) const {
  AttentionSpec s = spec;
  s.heads = heads;
  return o(attention(q(queries), k(keys), v(keys), s));
}

template <typename T>
void MultiHeadAttention<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  q.collect(out, prefix + ".q");
  k.collect(out, prefix + ".k");
  v.collect(out, prefix + ".v");
  o.collect(out, prefix + ".o");
}

template <typename T>
TransformerBlock<T>::TransformerBlock(int dim, int heads, int hidden, Initializer& init)
    : ln1(dim, init), ln2(dim, init), attn(dim, heads, init), mlp(dim, hidden, init) {}

template <typename T>
Var<T> TransformerBlock<T>::operator()(const Var<T>& x, const AttentionSpec& spec) const {
  auto h = ln1(x);
  auto y = add(x, attn(h, h, spec));
  return add(y, mlp(ln2(y)));
}

template <typename T>
void TransformerBlock<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  ln1.collect(out, prefix + ".ln1");
  ln2.collect(out, prefix + ".ln2");
  attn.collect(out, prefix + ".attn");
  mlp.collect(out, prefix + ".mlp");
}

template <typename T>
QueryBlock<T>::QueryBlock(int n_queries, int dim, int heads, int hidden, Initializer& init,
                          bool residual)
    : queries(init.normal<T>({n_queries, dim}, 0.5)),
      ln_q(dim, init),
      ln_mem(dim, init),
      ln_mlp(dim, init),
      attn(dim, heads, init),
      mlp(dim, hidden, init),
      query_residual(residual) {}

template <typename T>
Var<T> QueryBlock<T>::operator()(const Var<T>& memory, int batch, int memory_len,
                                 const std::vector<int>& memory_valid) const {
  const int nq = num_queries();
  auto q = tile_rows(queries, batch);
  AttentionSpec spec{.batch = batch, .query_len = nq, .key_len = memory_len, .heads = 1,
                     .key_valid = memory_valid};
  auto read = attn(ln_q(q), ln_mem(memory), spec);
  auto h = query_residual ? add(q, read) : read;
  return add(h, mlp(ln_mlp(h)));
}

template <typename T>
Var<T> QueryBlock<T>::attend(const Var<T>& query_rows, int query_len, const Var<T>& memory,
                             int batch, int memory_len, const std::vector<int>& memory_valid) const {
  AttentionSpec spec{.batch = batch, .query_len = query_len, .key_len = memory_len, .heads = 1,
                     .key_valid = memory_valid};
  auto h = add(query_rows, attn(ln_q(query_rows), ln_mem(memory), spec));
  return add(h, mlp(ln_mlp(h)));
}

template <typename T>
void QueryBlock<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".queries", queries});
  ln_q.collect(out, prefix + ".ln_q");
  ln_mem.collect(out, prefix + ".ln_mem");
  ln_mlp.collect(out, prefix + ".ln_mlp");
  attn.collect(out, prefix + ".attn");
  mlp.collect(out, prefix + ".mlp");
}

template <typename T>
Conv2d<T>::Conv2d(int in, int out, int kernel, Initializer& init, double gain)
    : w(init.normal<T>({out, in, kernel, kernel},
                       gain * std::sqrt(2.0 / static_cast<double>(in * kernel * kernel)))),
      b(init.constant<T>({out}, 0.0)) {}

template <typename T>
void Conv2d<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".w", w});
  out.push_back({prefix + ".b", b});
}

#define RAGCAP_INSTANTIATE(T)                                             \
  template Var<T> Initializer::normal<T>(Shape, double);                  \
  template Var<T> Initializer::constant<T>(Shape, double);                \
  template void set_requires_grad(const ParamList<T>&, bool);             \
  template std::size_t parameter_count(const ParamList<T>&);              \
  template struct Linear<T>;                                              \
  template struct LayerNorm<T>;                                           \
  template struct Mlp<T>;                                                 \
  template struct MultiHeadAttention<T>;                                  \
  template struct TransformerBlock<T>;                                    \
  template struct QueryBlock<T>;                                          \
  template struct Conv2d<T>;

RAGCAP_INSTANTIATE(float)
RAGCAP_INSTANTIATE(double)

#undef RAGCAP_INSTANTIATE

}  // namespace ragcap::ag
