#include "ragcap/ag/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace ragcap::ag {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const RowMat<T>>;

// c (+)= op(a) * op(b); a is stored [ar, ac], b is stored [br, bc].
template <typename T>
void gemm(const T* a, int ar, int ac, bool ta, const T* b, int br, int bc, bool tb, T* c,
          bool accumulate) {
  CMapM<T> A(a, ar, ac);
  CMapM<T> B(b, br, bc);
  const int m = ta ? ac : ar;
  const int n = tb ? br : bc;
  MapM<T> C(c, m, n);
  if (!ta && !tb) {
    if (accumulate) C.noalias() += A * B; else C.noalias() = A * B;
  } else if (ta && !tb) {
    if (accumulate) C.noalias() += A.transpose() * B; else C.noalias() = A.transpose() * B;
  } else if (!ta && tb) {
    if (accumulate) C.noalias() += A * B.transpose(); else C.noalias() = A * B.transpose();
  } else {
    if (accumulate) C.noalias() += A.transpose() * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
Node<T>& in(Node<T>& self, std::size_t i) {
  return *self.inputs[i];
}

}  // namespace

// ---- dense algebra ---------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m) * n);
  gemm(a.data(), m, k, false, b.data(), k, n, false, out.data(), false);
  return make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    Node<T>& A = in(self, 0);
    Node<T>& B = in(self, 1);
    if (A.requires_grad)
      gemm(self.grad.data(), m, n, false, B.value.data(), k, n, true, A.grad_data(), true);
    if (B.requires_grad)
      gemm(A.value.data(), m, k, true, self.grad.data(), m, n, false, B.grad_data(), true);
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  require(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(0),
          "linear: incompatible " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  const int m = x.dim(0), k = x.dim(1), n = w.dim(1);
  const bool has_bias = bias.defined();
  if (has_bias) require(static_cast<int>(bias.numel()) == n, "linear: bias size mismatch");
  std::vector<T> out(static_cast<std::size_t>(m) * n);
  if (has_bias) {
    const T* bp = bias.data();
    for (int i = 0; i < m; ++i) std::copy(bp, bp + n, out.data() + static_cast<std::size_t>(i) * n);
  }
  gemm(x.data(), m, k, false, w.data(), k, n, false, out.data(), has_bias);
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>({m, n}, std::move(out), std::move(inputs),
                        [m, k, n, has_bias](Node<T>& self) {
    Node<T>& X = in(self, 0);
    Node<T>& W = in(self, 1);
    const T* g = self.grad.data();
    if (X.requires_grad) gemm(g, m, n, false, W.value.data(), k, n, true, X.grad_data(), true);
    if (W.requires_grad) gemm(X.value.data(), m, k, true, g, m, n, false, W.grad_data(), true);
    if (has_bias) {
      Node<T>& Bn = in(self, 2);
      if (Bn.requires_grad) {
        T* gb = Bn.grad_data();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) gb[j] += g[static_cast<std::size_t>(i) * n + j];
      }
    }
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  require(a.rank() == 2, "transpose: rank-2 tensor required");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<T> out(a.numel());
  const T* src = a.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j) * m + i] = src[static_cast<std::size_t>(i) * n + j];
  return make_result<T>({n, m}, std::move(out), {a}, [m, n](Node<T>& self) {
    Node<T>& A = in(self, 0);
    T* ga = A.grad_data();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        ga[static_cast<std::size_t>(i) * n + j] += self.grad[static_cast<std::size_t>(j) * m + i];
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  require(numel(shape) == a.numel(),
          "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(a.value().begin(), a.value().end());
  return make_result<T>(std::move(shape), std::move(out), {a}, [](Node<T>& self) {
    Node<T>& A = in(self, 0);
    T* ga = A.grad_data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

// ---- elementwise -----------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node<T>& X = in(self, k);
      if (!X.requires_grad) continue;
      T* g = X.grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), "sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    Node<T>& A = in(self, 0);
    Node<T>& B = in(self, 1);
    if (A.requires_grad) {
      T* g = A.grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (B.requires_grad) {
      T* g = B.grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    Node<T>& A = in(self, 0);
    Node<T>& B = in(self, 1);
    if (A.requires_grad) {
      T* g = A.grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * B.value[i];
    }
    if (B.requires_grad) {
      T* g = B.grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * A.value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return make_result<T>(a.shape(), std::move(out), {a}, [s](Node<T>& self) {
    T* g = in(self, 0).grad_data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
  });
}

template <typename T>
Var<T> add_rows_cyclic(const Var<T>& x, const Var<T>& r) {
  require(x.rank() == 2 && r.rank() == 2 && x.dim(1) == r.dim(1) && r.dim(0) > 0 &&
              x.dim(0) % r.dim(0) == 0,
          "add_rows_cyclic: " + shape_str(x.shape()) + " + " + shape_str(r.shape()));
  const int m = x.dim(0), n = x.dim(1), period = r.dim(0);
  std::vector<T> out(x.value().begin(), x.value().end());
  for (int i = 0; i < m; ++i) {
    const T* rr = r.data() + static_cast<std::size_t>(i % period) * n;
    T* o = out.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) o[j] += rr[j];
  }
  return make_result<T>(x.shape(), std::move(out), {x, r}, [m, n, period](Node<T>& self) {
    Node<T>& X = in(self, 0);
    Node<T>& R = in(self, 1);
    if (X.requires_grad) {
      T* g = X.grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (R.requires_grad) {
      T* g = R.grad_data();
      for (int i = 0; i < m; ++i) {
        const T* s = self.grad.data() + static_cast<std::size_t>(i) * n;
        T* d = g + static_cast<std::size_t>(i % period) * n;
        for (int j = 0; j < n; ++j) d[j] += s[j];
      }
    }
  });
}

// tanh form of GELU; tanh is evaluated through exp.
template <typename T>
Var<T> gelu(const Var<T>& a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c3 = T(0.044715);
  auto tanh_of = [](T u) { return T(1) - T(2) / (std::exp(T(2) * u) + T(1)); };
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.data()[i];
    out[i] = T(0.5) * x * (T(1) + tanh_of(c * (x + c3 * x * x * x)));
  }
  return make_result<T>(a.shape(), std::move(out), {a}, [tanh_of](Node<T>& self) {
    Node<T>& A = in(self, 0);
    T* g = A.grad_data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T x = A.value[i];
      const T th = tanh_of(c * (x + c3 * x * x * x));
      const T du = c * (T(1) + T(3) * c3 * x * x);
      g[i] += self.grad[i] * (T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du);
    }
  });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.data()[i];
    out[i] = x / (T(1) + std::exp(-x));
  }
  return make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
    Node<T>& A = in(self, 0);
    T* g = A.grad_data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T x = A.value[i];
      const T s = T(1) / (T(1) + std::exp(-x));
      g[i] += self.grad[i] * s * (T(1) + x * (T(1) - s));
    }
  });
}

// ---- reductions and normalisation ------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (T v : a.value()) acc += v;
  return make_result<T>({1}, {acc}, {a}, [](Node<T>& self) {
    Node<T>& A = in(self, 0);
    T* g = A.grad_data();
    for (std::size_t i = 0; i < A.value.size(); ++i) g[i] += self.grad[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  require(a.numel() > 0, "mean of empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Var<T> mean_row_groups(const Var<T>& x, int group) {
  require(x.rank() == 2 && group > 0 && x.dim(0) % group == 0,
          "mean_row_groups: " + shape_str(x.shape()));
  const int n = x.dim(1), batch = x.dim(0) / group;
  std::vector<T> out(static_cast<std::size_t>(batch) * n, T(0));
  const T inv = T(1) / static_cast<T>(group);
  for (int b = 0; b < batch; ++b)
    for (int r = 0; r < group; ++r) {
      const T* src = x.data() + (static_cast<std::size_t>(b) * group + r) * n;
      T* dst = out.data() + static_cast<std::size_t>(b) * n;
      for (int j = 0; j < n; ++j) dst[j] += src[j] * inv;
    }
  return make_result<T>({batch, n}, std::move(out), {x}, [batch, group, n, inv](Node<T>& self) {
    T* g = in(self, 0).grad_data();
    for (int b = 0; b < batch; ++b)
      for (int r = 0; r < group; ++r) {
        T* dst = g + (static_cast<std::size_t>(b) * group + r) * n;
        const T* src = self.grad.data() + static_cast<std::size_t>(b) * n;
        for (int j = 0; j < n; ++j) dst[j] += src[j] * inv;
      }
  });
}

template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x, T eps) {
  require(x.rank() == 2, "l2_normalize_rows: rank-2 tensor required");
  const int m = x.dim(0), n = x.dim(1);
  std::vector<T> out(x.numel());
  std::vector<T> norms(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    const T* r = x.data() + static_cast<std::size_t>(i) * n;
    T ss = 0;
    for (int j = 0; j < n; ++j) ss += r[j] * r[j];
    const T nrm = std::sqrt(ss + eps);
    norms[static_cast<std::size_t>(i)] = nrm;
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i) * n + j] = r[j] / nrm;
  }
  return make_result<T>(x.shape(), std::move(out), {x},
                        [m, n, norms = std::move(norms)](Node<T>& self) {
    T* g = in(self, 0).grad_data();
    for (int i = 0; i < m; ++i) {
      const T* y = self.value.data() + static_cast<std::size_t>(i) * n;
      const T* gy = self.grad.data() + static_cast<std::size_t>(i) * n;
      T dot = 0;
      for (int j = 0; j < n; ++j) dot += y[j] * gy[j];
      const T inv = T(1) / norms[static_cast<std::size_t>(i)];
      for (int j = 0; j < n; ++j) g[static_cast<std::size_t>(i) * n + j] += (gy[j] - y[j] * dot) * inv;
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  require(x.rank() == 2 && static_cast<int>(gamma.numel()) == x.dim(1) &&
              static_cast<int>(beta.numel()) == x.dim(1),
          "layer_norm: " + shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    const T* r = x.data() + static_cast<std::size_t>(i) * n;
    T mu = 0;
    for (int j = 0; j < n; ++j) mu += r[j];
    mu /= static_cast<T>(n);
    T var = 0;
    for (int j = 0; j < n; ++j) var += (r[j] - mu) * (r[j] - mu);
    var /= static_cast<T>(n);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < n; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i) * n + j;
      xhat[idx] = (r[j] - mu) * is;
      out[idx] = xhat[idx] * gamma.data()[j] + beta.data()[j];
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                        [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
    Node<T>& X = in(self, 0);
    Node<T>& G = in(self, 1);
    Node<T>& Bt = in(self, 2);
    const T* gy = self.grad.data();
    if (G.requires_grad || Bt.requires_grad) {
      T* gg = G.requires_grad ? G.grad_data() : nullptr;
      T* gb = Bt.requires_grad ? Bt.grad_data() : nullptr;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i) * n + j;
          if (gg) gg[j] += gy[idx] * xhat[idx];
          if (gb) gb[j] += gy[idx];
        }
    }
    if (X.requires_grad) {
      T* gx = X.grad_data();
      const T* gam = G.value.data();
      for (int i = 0; i < m; ++i) {
        T s1 = 0, s2 = 0;
        for (int j = 0; j < n; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i) * n + j;
          const T d = gy[idx] * gam[j];
          s1 += d;
          s2 += d * xhat[idx];
        }
        s1 /= static_cast<T>(n);
        s2 /= static_cast<T>(n);
        const T is = inv_std[static_cast<std::size_t>(i)];
        for (int j = 0; j < n; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i) * n + j;
          gx[idx] += is * (gy[idx] * gam[j] - s1 - xhat[idx] * s2);
        }
      }
    }
  });
}

// ---- row bookkeeping -------------------------------------------------------

template <typename T>
Var<T> tile_rows(const Var<T>& x, int times) {
  require(x.rank() == 2 && times > 0, "tile_rows: " + shape_str(x.shape()));
  const std::size_t block = x.numel();
  std::vector<T> out(block * static_cast<std::size_t>(times));
  for (int t = 0; t < times; ++t) std::copy(x.data(), x.data() + block, out.data() + block * t);
  return make_result<T>({x.dim(0) * times, x.dim(1)}, std::move(out), {x},
                        [block, times](Node<T>& self) {
    T* g = in(self, 0).grad_data();
    for (int t = 0; t < times; ++t)
      for (std::size_t i = 0; i < block; ++i) g[i] += self.grad[block * t + i];
  });
}

template <typename T>
Var<T> concat_per_sample(const Var<T>& a, const Var<T>& b, int batch) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1) && batch > 0 &&
              a.dim(0) % batch == 0 && b.dim(0) % batch == 0,
          "concat_per_sample: " + shape_str(a.shape()) + " ++ " + shape_str(b.shape()));
  const int n = a.dim(1), ra = a.dim(0) / batch, rb = b.dim(0) / batch;
  const std::size_t sa = static_cast<std::size_t>(ra) * n, sb = static_cast<std::size_t>(rb) * n;
  std::vector<T> out((sa + sb) * batch);
  for (int s = 0; s < batch; ++s) {
    std::copy(a.data() + sa * s, a.data() + sa * (s + 1), out.data() + (sa + sb) * s);
    std::copy(b.data() + sb * s, b.data() + sb * (s + 1), out.data() + (sa + sb) * s + sa);
  }
  return make_result<T>({batch * (ra + rb), n}, std::move(out), {a, b},
                        [sa, sb, batch](Node<T>& self) {
    Node<T>& A = in(self, 0);
    Node<T>& B = in(self, 1);
    for (int s = 0; s < batch; ++s) {
      const T* src = self.grad.data() + (sa + sb) * s;
      if (A.requires_grad) {
        T* g = A.grad_data() + sa * s;
        for (std::size_t i = 0; i < sa; ++i) g[i] += src[i];
      }
      if (B.requires_grad) {
        T* g = B.grad_data() + sb * s;
        for (std::size_t i = 0; i < sb; ++i) g[i] += src[sa + i];
      }
    }
  });
}

template <typename T>
Var<T> slice_per_sample(const Var<T>& x, int batch, int begin, int count) {
  require(x.rank() == 2 && batch > 0 && x.dim(0) % batch == 0, "slice_per_sample: bad input");
  const int len = x.dim(0) / batch, n = x.dim(1);
  require(begin >= 0 && count > 0 && begin + count <= len, "slice_per_sample: window out of range");
  std::vector<T> out(static_cast<std::size_t>(batch) * count * n);
  for (int s = 0; s < batch; ++s) {
    const T* src = x.data() + (static_cast<std::size_t>(s) * len + begin) * n;
    std::copy(src, src + static_cast<std::size_t>(count) * n,
              out.data() + static_cast<std::size_t>(s) * count * n);
  }
  return make_result<T>({batch * count, n}, std::move(out), {x},
                        [batch, len, begin, count, n](Node<T>& self) {
    T* g = in(self, 0).grad_data();
    for (int s = 0; s < batch; ++s) {
      T* dst = g + (static_cast<std::size_t>(s) * len + begin) * n;
      const T* src = self.grad.data() + static_cast<std::size_t>(s) * count * n;
      for (std::size_t i = 0; i < static_cast<std::size_t>(count) * n; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& ids) {
  require(table.rank() == 2, "embedding: table must be rank 2");
  const int vocab = table.dim(0), n = table.dim(1);
  std::vector<T> out(ids.size() * static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < vocab, "embedding: id out of range");
    const T* src = table.data() + static_cast<std::size_t>(ids[i]) * n;
    std::copy(src, src + n, out.data() + i * n);
  }
  return make_result<T>({static_cast<int>(ids.size()), n}, std::move(out), {table},
                        [ids, n](Node<T>& self) {
    T* g = in(self, 0).grad_data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      T* dst = g + static_cast<std::size_t>(ids[i]) * n;
      const T* src = self.grad.data() + i * n;
      for (int j = 0; j < n; ++j) dst[j] += src[j];
    }
  });
}

// ---- attention -------------------------------------------------------------

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const AttentionSpec& spec) {
  const int B = spec.batch, Lq = spec.query_len, Lk = spec.key_len, H = spec.heads;
  require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "attention: rank-2 inputs required");
  const int D = q.dim(1);
  require(B > 0 && H > 0 && D % H == 0, "attention: feature dim must split across heads");
  require(q.dim(0) == B * Lq && k.dim(0) == B * Lk && v.dim(0) == B * Lk && k.dim(1) == D &&
              v.dim(1) == D,
          "attention: shapes q" + shape_str(q.shape()) + " k" + shape_str(k.shape()) + " v" +
              shape_str(v.shape()));
  require(spec.key_valid.empty() || static_cast<int>(spec.key_valid.size()) == B,
          "attention: key_valid must have one entry per sample");
  const int dh = D / H;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));

  auto valid_for = [&spec, Lk](int b) {
    return spec.key_valid.empty() ? Lk : std::clamp(spec.key_valid[static_cast<std::size_t>(b)], 1, Lk);
  };

  std::vector<T> out(static_cast<std::size_t>(B) * Lq * D, T(0));
  std::vector<T> probs(static_cast<std::size_t>(B) * H * Lq * Lk, T(0));
  RowMat<T> qh(Lq, dh), kh(Lk, dh), vh(Lk, dh), s(Lq, Lk), oh(Lq, dh);

  for (int b = 0; b < B; ++b) {
    const int valid = valid_for(b);
    for (int h = 0; h < H; ++h) {
      for (int i = 0; i < Lq; ++i)
        for (int d = 0; d < dh; ++d) qh(i, d) = q.data()[(static_cast<std::size_t>(b) * Lq + i) * D + h * dh + d];
      for (int j = 0; j < Lk; ++j)
        for (int d = 0; d < dh; ++d) {
          const std::size_t src = (static_cast<std::size_t>(b) * Lk + j) * D + h * dh + d;
          kh(j, d) = k.data()[src];
          vh(j, d) = v.data()[src];
        }
      s.noalias() = qh * kh.transpose();
      T* p = probs.data() + ((static_cast<std::size_t>(b) * H + h) * Lq) * Lk;
      for (int i = 0; i < Lq; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < Lk; ++j) {
          const bool visible = j < valid && (!spec.causal || j < spec.prefix || j <= i);
          if (visible) mx = std::max(mx, s(i, j) * sc);
        }
        T z = 0;
        for (int j = 0; j < Lk; ++j) {
          const bool visible = j < valid && (!spec.causal || j < spec.prefix || j <= i);
          const T e = visible ? std::exp(s(i, j) * sc - mx) : T(0);
          p[static_cast<std::size_t>(i) * Lk + j] = e;
          z += e;
        }
        for (int j = 0; j < Lk; ++j) p[static_cast<std::size_t>(i) * Lk + j] /= z;
      }
      CMapM<T> P(p, Lq, Lk);
      oh.noalias() = P * vh;
      for (int i = 0; i < Lq; ++i)
        for (int d = 0; d < dh; ++d) out[(static_cast<std::size_t>(b) * Lq + i) * D + h * dh + d] = oh(i, d);
    }
  }

  return make_result<T>({B * Lq, D}, std::move(out), {q, k, v},
                        [B, Lq, Lk, H, D, dh, sc, probs = std::move(probs)](Node<T>& self) {
    Node<T>& Q = in(self, 0);
    Node<T>& K = in(self, 1);
    Node<T>& V = in(self, 2);
    T* gq = Q.requires_grad ? Q.grad_data() : nullptr;
    T* gk = K.requires_grad ? K.grad_data() : nullptr;
    T* gv = V.requires_grad ? V.grad_data() : nullptr;
    RowMat<T> qh(Lq, dh), kh(Lk, dh), vh(Lk, dh), go(Lq, dh), dp(Lq, Lk), ds(Lq, Lk);
    RowMat<T> dq(Lq, dh), dk(Lk, dh), dv(Lk, dh);
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        for (int i = 0; i < Lq; ++i)
          for (int d = 0; d < dh; ++d) {
            const std::size_t idx = (static_cast<std::size_t>(b) * Lq + i) * D + h * dh + d;
            qh(i, d) = Q.value[idx];
            go(i, d) = self.grad[idx];
          }
        for (int j = 0; j < Lk; ++j)
          for (int d = 0; d < dh; ++d) {
            const std::size_t idx = (static_cast<std::size_t>(b) * Lk + j) * D + h * dh + d;
            kh(j, d) = K.value[idx];
            vh(j, d) = V.value[idx];
          }
        CMapM<T> P(probs.data() + ((static_cast<std::size_t>(b) * H + h) * Lq) * Lk, Lq, Lk);
        if (gv) {
          dv.noalias() = P.transpose() * go;
          for (int j = 0; j < Lk; ++j)
            for (int d = 0; d < dh; ++d) gv[(static_cast<std::size_t>(b) * Lk + j) * D + h * dh + d] += dv(j, d);
        }
        if (!gq && !gk) continue;
        dp.noalias() = go * vh.transpose();
        for (int i = 0; i < Lq; ++i) {
          T dot = 0;
          for (int j = 0; j < Lk; ++j) dot += dp(i, j) * P(i, j);
          for (int j = 0; j < Lk; ++j) ds(i, j) = P(i, j) * (dp(i, j) - dot) * sc;
        }
        if (gq) {
          dq.noalias() = ds * kh;
          for (int i = 0; i < Lq; ++i)
            for (int d = 0; d < dh; ++d) gq[(static_cast<std::size_t>(b) * Lq + i) * D + h * dh + d] += dq(i, d);
        }
        if (gk) {
          dk.noalias() = ds.transpose() * qh;
          for (int j = 0; j < Lk; ++j)
            for (int d = 0; d < dh; ++d) gk[(static_cast<std::size_t>(b) * Lk + j) * D + h * dh + d] += dk(j, d);
        }
      }
    }
  });
}

// ---- losses ----------------------------------------------------------------

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& targets, int ignore_index) {
  require(logits.rank() == 2 && static_cast<int>(targets.size()) == logits.dim(0),
          "cross_entropy: one target per logit row required");
  const int m = logits.dim(0), vocab = logits.dim(1);
  int count = 0;
  for (int t : targets) {
    if (t == ignore_index) continue;
    require(t >= 0 && t < vocab, "cross_entropy: target id out of range");
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: every target position is padding");

  std::vector<T> probs(logits.numel());
  T total = 0;
  for (int i = 0; i < m; ++i) {
    const T* row = logits.data() + static_cast<std::size_t>(i) * vocab;
    T* pr = probs.data() + static_cast<std::size_t>(i) * vocab;
    const T mx = *std::max_element(row, row + vocab);
    T z = 0;
    for (int j = 0; j < vocab; ++j) {
      pr[j] = std::exp(row[j] - mx);
      z += pr[j];
    }
    for (int j = 0; j < vocab; ++j) pr[j] /= z;
    const int t = targets[static_cast<std::size_t>(i)];
    if (t != ignore_index) total += (mx + std::log(z)) - row[t];
  }
  const T inv = T(1) / static_cast<T>(count);
  return make_result<T>({1}, {total * inv}, {logits},
                        [m, vocab, inv, targets, ignore_index, probs = std::move(probs)](Node<T>& self) {
    T* g = in(self, 0).grad_data();
    const T up = self.grad[0] * inv;
    for (int i = 0; i < m; ++i) {
      const int t = targets[static_cast<std::size_t>(i)];
      if (t == ignore_index) continue;
      const T* pr = probs.data() + static_cast<std::size_t>(i) * vocab;
      T* gr = g + static_cast<std::size_t>(i) * vocab;
      for (int j = 0; j < vocab; ++j) gr[j] += up * pr[j];
      gr[t] -= up;
    }
  });
}

template <typename T>
Var<T> mse(const Var<T>& pred, const Var<T>& target) {
  require(pred.shape() == target.shape(),
          "mse: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  T acc = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const T d = pred.data()[i] - target.data()[i];
    acc += d * d;
  }
  const T inv = T(1) / static_cast<T>(pred.numel());
  return make_result<T>({1}, {acc * inv}, {pred, target}, [inv](Node<T>& self) {
    Node<T>& P = in(self, 0);
    Node<T>& Tg = in(self, 1);
    const T up = T(2) * self.grad[0] * inv;
    T* gp = P.requires_grad ? P.grad_data() : nullptr;
    T* gt = Tg.requires_grad ? Tg.grad_data() : nullptr;
    for (std::size_t i = 0; i < P.value.size(); ++i) {
      const T d = (P.value[i] - Tg.value[i]) * up;
      if (gp) gp[i] += d;
      if (gt) gt[i] -= d;
    }
  });
}

// ---- images ----------------------------------------------------------------

namespace {

template <typename T>
void im2col(const T* x, int c, int h, int w, int ks, T* cols) {
  const int pad = ks / 2;
  const int hw = h * w;
  for (int ch = 0; ch < c; ++ch)
    for (int ky = 0; ky < ks; ++ky)
      for (int kx = 0; kx < ks; ++kx) {
        T* row = cols + static_cast<std::size_t>((ch * ks + ky) * ks + kx) * hw;
        const T* plane = x + static_cast<std::size_t>(ch) * hw;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          T* dst = row + static_cast<std::size_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(dst, dst + w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(sy) * w;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + kx - pad;
            dst[xx] = (sx >= 0 && sx < w) ? src[sx] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, int c, int h, int w, int ks, T* x) {
  const int pad = ks / 2;
  const int hw = h * w;
  for (int ch = 0; ch < c; ++ch)
    for (int ky = 0; ky < ks; ++ky)
      for (int kx = 0; kx < ks; ++kx) {
        const T* row = cols + static_cast<std::size_t>((ch * ks + ky) * ks + kx) * hw;
        T* plane = x + static_cast<std::size_t>(ch) * hw;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          const T* src = row + static_cast<std::size_t>(y) * w;
          T* dst = plane + static_cast<std::size_t>(sy) * w;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + kx - pad;
            if (sx >= 0 && sx < w) dst[sx] += src[xx];
          }
        }
      }
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  require(x.rank() == 4 && w.rank() == 4 && w.dim(1) == x.dim(1) && w.dim(2) == w.dim(3) &&
              w.dim(2) % 2 == 1,
          "conv2d: x" + shape_str(x.shape()) + " w" + shape_str(w.shape()));
  const int B = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), ks = w.dim(2);
  const int hw = h * wd, kdim = cin * ks * ks;
  const bool has_bias = bias.defined();
  if (has_bias) require(static_cast<int>(bias.numel()) == cout, "conv2d: bias size mismatch");

  std::vector<T> out(static_cast<std::size_t>(B) * cout * hw);
  std::vector<T> cols(static_cast<std::size_t>(kdim) * hw);
  for (int b = 0; b < B; ++b) {
    im2col(x.data() + static_cast<std::size_t>(b) * cin * hw, cin, h, wd, ks, cols.data());
    T* ob = out.data() + static_cast<std::size_t>(b) * cout * hw;
    if (has_bias)
      for (int o = 0; o < cout; ++o) std::fill(ob + static_cast<std::size_t>(o) * hw, ob + static_cast<std::size_t>(o + 1) * hw, bias.data()[o]);
    gemm(w.data(), cout, kdim, false, cols.data(), kdim, hw, false, ob, has_bias);
  }
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>({B, cout, h, wd}, std::move(out), std::move(inputs),
                        [B, cin, h, wd, cout, ks, hw, kdim, has_bias](Node<T>& self) {
    Node<T>& X = in(self, 0);
    Node<T>& W = in(self, 1);
    std::vector<T> cols(static_cast<std::size_t>(kdim) * hw);
    for (int b = 0; b < B; ++b) {
      const T* gy = self.grad.data() + static_cast<std::size_t>(b) * cout * hw;
      if (W.requires_grad) {
        im2col(X.value.data() + static_cast<std::size_t>(b) * cin * hw, cin, h, wd, ks, cols.data());
        gemm(gy, cout, hw, false, cols.data(), kdim, hw, true, W.grad_data(), true);
      }
      if (X.requires_grad) {
        gemm(W.value.data(), cout, kdim, true, gy, cout, hw, false, cols.data(), false);
        col2im_add(cols.data(), cin, h, wd, ks, X.grad_data() + static_cast<std::size_t>(b) * cin * hw);
      }
    }
    if (has_bias) {
      Node<T>& Bn = in(self, 2);
      if (Bn.requires_grad) {
        T* gb = Bn.grad_data();
        for (int b = 0; b < B; ++b)
          for (int o = 0; o < cout; ++o) {
            const T* gy = self.grad.data() + (static_cast<std::size_t>(b) * cout + o) * hw;
            T acc = 0;
            for (int i = 0; i < hw; ++i) acc += gy[i];
            gb[o] += acc;
          }
      }
    }
  });
}

template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  require(x.rank() == 4 && x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0, "avg_pool2: " + shape_str(x.shape()));
  const int planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), oh = h / 2, ow = w / 2;
  std::vector<T> out(static_cast<std::size_t>(planes) * oh * ow);
  for (int p = 0; p < planes; ++p) {
    const T* src = x.data() + static_cast<std::size_t>(p) * h * w;
    T* dst = out.data() + static_cast<std::size_t>(p) * oh * ow;
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        const T* s0 = src + static_cast<std::size_t>(2 * y) * w + 2 * xx;
        dst[y * ow + xx] = T(0.25) * (s0[0] + s0[1] + s0[w] + s0[w + 1]);
      }
  }
  return make_result<T>({x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
                        [planes, h, w, oh, ow](Node<T>& self) {
    T* g = in(self, 0).grad_data();
    for (int p = 0; p < planes; ++p) {
      T* dst = g + static_cast<std::size_t>(p) * h * w;
      const T* src = self.grad.data() + static_cast<std::size_t>(p) * oh * ow;
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          const T v = T(0.25) * src[y * ow + xx];
          T* d0 = dst + static_cast<std::size_t>(2 * y) * w + 2 * xx;
          d0[0] += v; d0[1] += v; d0[w] += v; d0[w + 1] += v;
        }
    }
  });
}

template <typename T>
Var<T> upsample2(const Var<T>& x) {
  require(x.rank() == 4, "upsample2: " + shape_str(x.shape()));
  const int planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), oh = 2 * h, ow = 2 * w;
  std::vector<T> out(static_cast<std::size_t>(planes) * oh * ow);
  for (int p = 0; p < planes; ++p) {
    const T* src = x.data() + static_cast<std::size_t>(p) * h * w;
    T* dst = out.data() + static_cast<std::size_t>(p) * oh * ow;
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
  }
  return make_result<T>({x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
                        [planes, h, w, oh, ow](Node<T>& self) {
    T* g = in(self, 0).grad_data();
    for (int p = 0; p < planes; ++p) {
      T* dst = g + static_cast<std::size_t>(p) * h * w;
      const T* src = self.grad.data() + static_cast<std::size_t>(p) * oh * ow;
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
    }
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  require(a.rank() == 4 && b.rank() == 4 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) &&
              a.dim(3) == b.dim(3),
          "concat_channels: " + shape_str(a.shape()) + " ++ " + shape_str(b.shape()));
  const int B = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  const std::size_t sa = static_cast<std::size_t>(ca) * hw, sb = static_cast<std::size_t>(cb) * hw;
  std::vector<T> out((sa + sb) * B);
  for (int s = 0; s < B; ++s) {
    std::copy(a.data() + sa * s, a.data() + sa * (s + 1), out.data() + (sa + sb) * s);
    std::copy(b.data() + sb * s, b.data() + sb * (s + 1), out.data() + (sa + sb) * s + sa);
  }
  return make_result<T>({B, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                        [B, sa, sb](Node<T>& self) {
    Node<T>& A = in(self, 0);
    Node<T>& Bn = in(self, 1);
    for (int s = 0; s < B; ++s) {
      const T* src = self.grad.data() + (sa + sb) * s;
      if (A.requires_grad) {
        T* g = A.grad_data() + sa * s;
        for (std::size_t i = 0; i < sa; ++i) g[i] += src[i];
      }
      if (Bn.requires_grad) {
        T* g = Bn.grad_data() + sb * s;
        for (std::size_t i = 0; i < sb; ++i) g[i] += src[sa + i];
      }
    }
  });
}

template <typename T>
Var<T> film(const Var<T>& x, const Var<T>& gb) {
  require(x.rank() == 4 && gb.rank() == 2 && gb.dim(0) == x.dim(0) && gb.dim(1) == 2 * x.dim(1),
          "film: x" + shape_str(x.shape()) + " gb" + shape_str(gb.shape()));
  const int B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(x.numel());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T g = T(1) + gb.data()[static_cast<std::size_t>(b) * 2 * C + c];
      const T be = gb.data()[static_cast<std::size_t>(b) * 2 * C + C + c];
      const std::size_t off = (static_cast<std::size_t>(b) * C + c) * hw;
      for (int i = 0; i < hw; ++i) out[off + i] = x.data()[off + i] * g + be;
    }
  return make_result<T>(x.shape(), std::move(out), {x, gb}, [B, C, hw](Node<T>& self) {
    Node<T>& X = in(self, 0);
    Node<T>& GB = in(self, 1);
    T* gx = X.requires_grad ? X.grad_data() : nullptr;
    T* ggb = GB.requires_grad ? GB.grad_data() : nullptr;
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const std::size_t off = (static_cast<std::size_t>(b) * C + c) * hw;
        const T g = T(1) + GB.value[static_cast<std::size_t>(b) * 2 * C + c];
        T dg = 0, dbe = 0;
        for (int i = 0; i < hw; ++i) {
          const T up = self.grad[off + i];
          if (gx) gx[off + i] += up * g;
          dg += up * X.value[off + i];
          dbe += up;
        }
        if (ggb) {
          ggb[static_cast<std::size_t>(b) * 2 * C + c] += dg;
          ggb[static_cast<std::size_t>(b) * 2 * C + C + c] += dbe;
        }
      }
  });
}

template <typename T>
Var<T> patchify(const Var<T>& x, int p) {
  require(x.rank() == 4 && p > 0 && x.dim(2) % p == 0 && x.dim(3) % p == 0,
          "patchify: " + shape_str(x.shape()));
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int gh = H / p, gw = W / p, pd = C * p * p, np = gh * gw;
  std::vector<T> out(static_cast<std::size_t>(B) * np * pd);
  auto index = [=](int b, int c, int y, int xx) {
    return ((static_cast<std::size_t>(b) * C + c) * H + y) * W + xx;
  };
  for (int b = 0; b < B; ++b)
    for (int py = 0; py < gh; ++py)
      for (int px = 0; px < gw; ++px) {
        T* dst = out.data() + (static_cast<std::size_t>(b) * np + py * gw + px) * pd;
        int k = 0;
        for (int c = 0; c < C; ++c)
          for (int y = 0; y < p; ++y)
            for (int xx = 0; xx < p; ++xx) dst[k++] = x.data()[index(b, c, py * p + y, px * p + xx)];
      }
  return make_result<T>({B * np, pd}, std::move(out), {x},
                        [B, C, p, gh, gw, np, pd, index](Node<T>& self) {
    T* g = in(self, 0).grad_data();
    for (int b = 0; b < B; ++b)
      for (int py = 0; py < gh; ++py)
        for (int px = 0; px < gw; ++px) {
          const T* src = self.grad.data() + (static_cast<std::size_t>(b) * np + py * gw + px) * pd;
          int k = 0;
          for (int c = 0; c < C; ++c)
            for (int y = 0; y < p; ++y)
              for (int xx = 0; xx < p; ++xx) g[index(b, c, py * p + y, px * p + xx)] += src[k++];
        }
  });
}

#define RAGCAP_INSTANTIATE(T)                                                              \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                     \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                      \
  template Var<T> transpose(const Var<T>&);                                                 \
  template Var<T> reshape(const Var<T>&, Shape);                                            \
  template Var<T> add(const Var<T>&, const Var<T>&);                                        \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                        \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                        \
  template Var<T> scale(const Var<T>&, T);                                                  \
  template Var<T> add_rows_cyclic(const Var<T>&, const Var<T>&);                            \
  template Var<T> gelu(const Var<T>&);                                                      \
  template Var<T> silu(const Var<T>&);                                                      \
  template Var<T> sum(const Var<T>&);                                                       \
  template Var<T> mean(const Var<T>&);                                                      \
  template Var<T> mean_row_groups(const Var<T>&, int);                                      \
  template Var<T> l2_normalize_rows(const Var<T>&, T);                                      \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);               \
  template Var<T> tile_rows(const Var<T>&, int);                                            \
  template Var<T> concat_per_sample(const Var<T>&, const Var<T>&, int);                     \
  template Var<T> slice_per_sample(const Var<T>&, int, int, int);                           \
  template Var<T> embedding(const Var<T>&, const std::vector<int>&);                        \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, const AttentionSpec&); \
  template Var<T> cross_entropy(const Var<T>&, const std::vector<int>&, int);               \
  template Var<T> mse(const Var<T>&, const Var<T>&);                                        \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&);                      \
  template Var<T> avg_pool2(const Var<T>&);                                                 \
  template Var<T> upsample2(const Var<T>&);                                                 \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                            \
  template Var<T> film(const Var<T>&, const Var<T>&);                                       \
  template Var<T> patchify(const Var<T>&, int);

RAGCAP_INSTANTIATE(float)
RAGCAP_INSTANTIATE(double)

#undef RAGCAP_INSTANTIATE

}  // namespace ragcap::ag
