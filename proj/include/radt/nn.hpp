#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "radt/common.hpp"
#include "radt/kernels.hpp"
#include "radt/tensor.hpp"

namespace radt::nn {

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

template <typename T>
struct ParamTensor {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  bool decay = false;  // weight decay applies to 2-D weights only
};

template <typename T>
class ParamStore {
 public:
  ParamTensor<T>& create(const std::string& name, int rows, int cols, bool decay) {
    if (by_name_.count(name)) throw std::runtime_error("duplicate parameter: " + name);
    auto t = std::make_unique<ParamTensor<T>>();
    t->name = name;
    t->value.resize(rows, cols);
    t->grad.resize(rows, cols);
    t->decay = decay;
    by_name_[name] = list_.size();
    list_.push_back(std::move(t));
    return *list_.back();
  }

  ParamTensor<T>& at(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::runtime_error("unknown parameter: " + name);
    return *list_[it->second];
  }

  std::vector<std::unique_ptr<ParamTensor<T>>>& list() { return list_; }
  const std::vector<std::unique_ptr<ParamTensor<T>>>& list() const { return list_; }

  void zero_grads() {
    for (auto& t : list_) t->grad.zero();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : list_) n += t->value.size();
    return n;
  }

  u64 value_digest() const {
    u64 h = kFnvBasis;
    for (const auto& t : list_) {
      h = fnv1a(t->name, h);
      h = t->value.digest(h);
    }
    return h;
  }

  void copy_values_from(const ParamStore& other) {
    if (other.list_.size() != list_.size())
      throw std::runtime_error("copy_values_from: parameter count mismatch");
    for (std::size_t i = 0; i < list_.size(); ++i) {
      if (other.list_[i]->value.size() != list_[i]->value.size())
        throw std::runtime_error("copy_values_from: shape mismatch at " + list_[i]->name);
      list_[i]->value.data = other.list_[i]->value.data;
    }
  }

 private:
  std::vector<std::unique_ptr<ParamTensor<T>>> list_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

// Truncated normal init (resample outside 2 sigma), the GPT-style default.
template <typename T>
void init_trunc_normal(Matrix<T>& m, double stddev, Rng& rng) {
  for (auto& v : m.data) {
    double z;
    do {
      z = rng.normal();
    } while (std::abs(z) > 2.0);
    v = static_cast<T>(z * stddev);
  }
}

// ---------------------------------------------------------------------------
// Numerics helpers
// ---------------------------------------------------------------------------

template <typename T>
inline void softmax_row(const T* in, T* out, int n) {
  T mx = in[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, in[i]);
  T sum = T(0);
  for (int i = 0; i < n; ++i) {
    out[i] = std::exp(in[i] - mx);
    sum += out[i];
  }
  T inv = T(1) / sum;
  for (int i = 0; i < n; ++i) out[i] *= inv;
}

template <typename T>
std::vector<T> softmax(const std::vector<T>& v) {
  std::vector<T> out(v.size());
  if (!v.empty()) softmax_row(v.data(), out.data(), static_cast<int>(v.size()));
  return out;
}

template <typename T>
inline T gelu(T x) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  T u = c * (x + static_cast<T>(0.044715) * x * x * x);
  return static_cast<T>(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
inline T gelu_grad(T x) {
  const T c = static_cast<T>(0.7978845608028654);
  T x2 = x * x;
  T u = c * (x + static_cast<T>(0.044715) * x * x2);
  T th = std::tanh(u);
  T du = c * (T(1) + static_cast<T>(3 * 0.044715) * x2);
  return static_cast<T>(0.5) * (T(1) + th) + static_cast<T>(0.5) * x * (T(1) - th * th) * du;
}

// ---------------------------------------------------------------------------
// Dropout: stateless hash masks, recomputed identically in backward
// ---------------------------------------------------------------------------

template <typename T>
struct DropoutCtx {
  bool active = false;  // true only during training with rate > 0
  T rate = T(0);
  u64 seed = 0;
  u64 step = 0;
};

template <typename T>
inline void dropout_forward(Matrix<T>& x, const DropoutCtx<T>& ctx, u64 tag) {
  if (!ctx.active || ctx.rate <= T(0)) return;
  const T scale = T(1) / (T(1) - ctx.rate);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < x.data.size(); ++i)
    x.data[i] = hash_uniform(ctx.seed, ctx.step, tag, i) < ctx.rate ? T(0) : x.data[i] * scale;
}

template <typename T>
inline void dropout_backward(Matrix<T>& dx, const DropoutCtx<T>& ctx, u64 tag) {
  dropout_forward(dx, ctx, tag);  // identical mask and scaling
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <typename T>
struct Dense {
  ParamTensor<T>* w = nullptr;  // [in, out]
  ParamTensor<T>* b = nullptr;  // [1, out]
  int in = 0, out = 0;

  void init(ParamStore<T>& ps, const std::string& name, int in_dim, int out_dim, Rng& rng,
            double stddev = 0.02) {
    in = in_dim;
    out = out_dim;
    w = &ps.create(name + ".w", in, out, true);
    b = &ps.create(name + ".b", 1, out, false);
    init_trunc_normal(w->value, stddev, rng);
  }

  void forward(const Matrix<T>& x, Matrix<T>& y) const {
    y.reshape(x.rows, out);
    kernels::matmul(x.ptr(), w->value.ptr(), y.ptr(), x.rows, in, out);
    const T* bias = b->value.ptr();
#pragma omp parallel for schedule(static)
    for (int r = 0; r < y.rows; ++r) {
      T* yr = y.row(r);
#pragma omp simd
      for (int c = 0; c < out; ++c) yr[c] += bias[c];
    }
  }

  // dx may alias nothing; pass dx = nullptr to skip input gradients.
  // Writes through the parameter pointers, so const like forward.
  void backward(const Matrix<T>& x, const Matrix<T>& dy, Matrix<T>* dx,
                std::vector<T>& scratch) const {
    kernels::matmul_tn(x.ptr(), dy.ptr(), w->grad.ptr(), x.rows, in, out, true, scratch);
    T* bg = b->grad.ptr();
#pragma omp parallel for schedule(static)
    for (int c = 0; c < out; ++c) {
      T s = T(0);
      for (int r = 0; r < dy.rows; ++r) s += dy.at(r, c);
      bg[c] += s;
    }
    if (dx) {
      dx->reshape(dy.rows, in);
      kernels::matmul_nt(dy.ptr(), w->value.ptr(), dx->ptr(), dy.rows, out, in);
    }
  }
};

template <typename T>
struct LayerNorm {
  ParamTensor<T>* g = nullptr;
  ParamTensor<T>* b = nullptr;
  int dim = 0;
  static constexpr T kEps = static_cast<T>(1e-5);

  void init(ParamStore<T>& ps, const std::string& name, int d) {
    dim = d;
    g = &ps.create(name + ".g", 1, d, false);
    b = &ps.create(name + ".b", 1, d, false);
    g->value.fill(T(1));
  }

  void forward(const Matrix<T>& x, Matrix<T>& y, std::vector<T>& mean,
               std::vector<T>& rstd) const {
    y.reshape(x.rows, x.cols);
    mean.resize(x.rows);
    rstd.resize(x.rows);
    const T* gv = g->value.ptr();
    const T* bv = b->value.ptr();
#pragma omp parallel for schedule(static)
    for (int r = 0; r < x.rows; ++r) {
      const T* xr = x.row(r);
      T m = T(0);
      for (int c = 0; c < dim; ++c) m += xr[c];
      m /= dim;
      T v = T(0);
      for (int c = 0; c < dim; ++c) v += (xr[c] - m) * (xr[c] - m);
      v /= dim;
      T rs = T(1) / std::sqrt(v + kEps);
      mean[r] = m;
      rstd[r] = rs;
      T* yr = y.row(r);
#pragma omp simd
      for (int c = 0; c < dim; ++c) yr[c] = gv[c] * (xr[c] - m) * rs + bv[c];
    }
  }

  void backward(const Matrix<T>& x, const Matrix<T>& dy, const std::vector<T>& mean,
                const std::vector<T>& rstd, Matrix<T>& dx) const {
    dx.reshape(x.rows, x.cols);
    const T* gv = g->value.ptr();
    // parameter grads: reduce over rows (kept serial per column for determinism)
    T* gg = g->grad.ptr();
    T* bg = b->grad.ptr();
#pragma omp parallel for schedule(static)
    for (int c = 0; c < dim; ++c) {
      T sg = T(0), sb = T(0);
      for (int r = 0; r < x.rows; ++r) {
        T xhat = (x.at(r, c) - mean[r]) * rstd[r];
        sg += dy.at(r, c) * xhat;
        sb += dy.at(r, c);
      }
      gg[c] += sg;
      bg[c] += sb;
    }
#pragma omp parallel for schedule(static)
    for (int r = 0; r < x.rows; ++r) {
      const T* xr = x.row(r);
      const T* dyr = dy.row(r);
      T* dxr = dx.row(r);
      T m = mean[r], rs = rstd[r];
      T sum_dyg = T(0), sum_dyg_xhat = T(0);
      for (int c = 0; c < dim; ++c) {
        T dyg = dyr[c] * gv[c];
        T xhat = (xr[c] - m) * rs;
        sum_dyg += dyg;
        sum_dyg_xhat += dyg * xhat;
      }
      T inv_dim = T(1) / dim;
#pragma omp simd
      for (int c = 0; c < dim; ++c) {
        T dyg = dyr[c] * gv[c];
        T xhat = (xr[c] - m) * rs;
        dxr[c] = rs * (dyg - inv_dim * sum_dyg - xhat * inv_dim * sum_dyg_xhat);
      }
    }
  }
};

template <typename T>
struct Embedding {
  ParamTensor<T>* tab = nullptr;
  int vocab = 0, dim = 0;

  void init(ParamStore<T>& ps, const std::string& name, int v, int d, Rng& rng,
            double stddev = 0.02) {
    vocab = v;
    dim = d;
    tab = &ps.create(name + ".tab", v, d, false);
    init_trunc_normal(tab->value, stddev, rng);
  }

  const T* row(int id) const {
    if (id < 0 || id >= vocab) throw std::runtime_error("embedding id out of range");
    return tab->value.row(id);
  }

  void scatter_grad(const std::vector<int>& ids, const Matrix<T>& dy) const {
    // column-parallel so each accumulator is owned by one thread
#pragma omp parallel for schedule(static)
    for (int c = 0; c < dim; ++c) {
      for (std::size_t i = 0; i < ids.size(); ++i)
        tab->grad.at(ids[i], c) += dy.at(static_cast<int>(i), c);
    }
  }
};

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// Self-attention over B contiguous blocks of S tokens. qkv rows hold
// [q | k | v] of width 3d. With causal=true position i attends to j <= i;
// invalid tokens are never attended to and produce zero output.
template <typename T>
void attention_self_forward(const Matrix<T>& qkv, int B, int S, int heads,
                            const std::vector<uint8_t>& valid, bool causal,
                            const DropoutCtx<T>& drop, u64 tag, Matrix<T>& probs,
                            Matrix<T>& out) {
  const int d = qkv.cols / 3;
  const int dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  probs.reshape(B * heads * S, S);
  out.reshape(B * S, d);
  const T keep_scale = drop.active ? T(1) / (T(1) - drop.rate) : T(1);

#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < B; ++b) {
    for (int h = 0; h < heads; ++h) {
      const int base = b * S;
      std::vector<T> srow(S);
      for (int i = 0; i < S; ++i) {
        T* out_i = out.row(base + i) + h * dh;
        T* prow = probs.row((static_cast<std::size_t>(b) * heads + h) * S + i);
        if (!valid[base + i]) {
          std::fill(prow, prow + S, T(0));
          std::fill(out_i, out_i + dh, T(0));
          continue;
        }
        const T* qi = qkv.row(base + i) + h * dh;
        const int jmax = causal ? i : S - 1;
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j <= jmax; ++j) {
          if (!valid[base + j]) {
            srow[j] = -std::numeric_limits<T>::infinity();
            continue;
          }
          const T* kj = qkv.row(base + j) + d + h * dh;
          T s = T(0);
#pragma omp simd reduction(+ : s)
          for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
          srow[j] = s * scale;
          mx = std::max(mx, srow[j]);
        }
        T sum = T(0);
        for (int j = 0; j <= jmax; ++j) {
          srow[j] = std::isinf(srow[j]) ? T(0) : std::exp(srow[j] - mx);
          sum += srow[j];
        }
        T inv = sum > T(0) ? T(1) / sum : T(0);
        std::fill(out_i, out_i + dh, T(0));
        const u64 prow_tag = tag ^ (static_cast<u64>((static_cast<std::size_t>(b) * heads + h) * S + i) << 20);
        for (int j = 0; j <= jmax; ++j) {
          T p = srow[j] * inv;
          prow[j] = p;
          T pe = p;
          if (drop.active) {
            pe = hash_uniform(drop.seed, drop.step, prow_tag, static_cast<u64>(j)) < drop.rate
                     ? T(0)
                     : p * keep_scale;
          }
          if (pe == T(0)) continue;
          const T* vj = qkv.row(base + j) + 2 * d + h * dh;
#pragma omp simd
          for (int c = 0; c < dh; ++c) out_i[c] += pe * vj[c];
        }
        std::fill(prow + jmax + 1, prow + S, T(0));
      }
    }
  }
}

template <typename T>
void attention_self_backward(const Matrix<T>& qkv, const Matrix<T>& probs,
                             const Matrix<T>& d_out, int B, int S, int heads,
                             const std::vector<uint8_t>& valid, bool causal,
                             const DropoutCtx<T>& drop, u64 tag, Matrix<T>& d_qkv) {
  const int d = qkv.cols / 3;
  const int dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  d_qkv.reshape(qkv.rows, qkv.cols);
  d_qkv.zero();
  const T keep_scale = drop.active ? T(1) / (T(1) - drop.rate) : T(1);

#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < B; ++b) {
    for (int h = 0; h < heads; ++h) {
      const int base = b * S;
      std::vector<T> dp(S);
      for (int i = 0; i < S; ++i) {
        if (!valid[base + i]) continue;
        const T* doi = d_out.row(base + i) + h * dh;
        const T* qi = qkv.row(base + i) + h * dh;
        const T* prow = probs.row((static_cast<std::size_t>(b) * heads + h) * S + i);
        const int jmax = causal ? i : S - 1;
        const u64 prow_tag = tag ^ (static_cast<u64>((static_cast<std::size_t>(b) * heads + h) * S + i) << 20);
        // dV and d(dropped probs)
        T dot_pp = T(0);
        for (int j = 0; j <= jmax; ++j) {
          if (prow[j] == T(0)) {
            dp[j] = T(0);
            continue;
          }
          T mask = T(1);
          if (drop.active)
            mask = hash_uniform(drop.seed, drop.step, prow_tag, static_cast<u64>(j)) < drop.rate
                       ? T(0)
                       : keep_scale;
          const T* vj = qkv.row(base + j) + 2 * d + h * dh;
          T s = T(0);
#pragma omp simd reduction(+ : s)
          for (int c = 0; c < dh; ++c) s += doi[c] * vj[c];
          dp[j] = s * mask;  // gradient w.r.t. raw prob j
          if (mask != T(0)) {
            // each (b,h) owns a disjoint column slice of rows [base, base+S)
            T pe = prow[j] * mask;
            T* dvj = d_qkv.row(base + j) + 2 * d + h * dh;
#pragma omp simd
            for (int c = 0; c < dh; ++c) dvj[c] += pe * doi[c];
          }
          dot_pp += dp[j] * prow[j];
        }
        // softmax backward + dQ/dK
        T* dqi = d_qkv.row(base + i) + h * dh;
        for (int j = 0; j <= jmax; ++j) {
          if (prow[j] == T(0)) continue;
          T ds = prow[j] * (dp[j] - dot_pp) * scale;
          if (ds == T(0)) continue;
          const T* kj = qkv.row(base + j) + d + h * dh;
          T* dkj = d_qkv.row(base + j) + d + h * dh;
#pragma omp simd
          for (int c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
#pragma omp simd
          for (int c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
        }
      }
    }
  }
}

// Cross-attention: every query token of element b attends over that
// element's context tokens [ctx_off[b], ctx_off[b+1]). Empty context spans
// produce zero output (the caller's residual path makes the layer an
// identity). Probs are stored ragged; prob_off[b*heads + h] indexes the flat
// buffer per (element, head).
template <typename T>
struct RaggedProbs {
  std::vector<T> flat;
  std::vector<std::size_t> off;  // size B*heads + 1
};

template <typename T>
void attention_cross_forward(const Matrix<T>& q, const Matrix<T>& kv, int B, int S,
                             int heads, const std::vector<int>& ctx_off,
                             const std::vector<uint8_t>& q_valid,
                             const DropoutCtx<T>& drop, u64 tag, RaggedProbs<T>& probs,
                             Matrix<T>& out) {
  const int d = q.cols;
  const int dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  out.reshape(B * S, d);
  probs.off.assign(static_cast<std::size_t>(B) * heads + 1, 0);
  for (int b = 0; b < B; ++b) {
    std::size_t len = static_cast<std::size_t>(ctx_off[b + 1] - ctx_off[b]) * S;
    for (int h = 0; h < heads; ++h)
      probs.off[static_cast<std::size_t>(b) * heads + h + 1] =
          probs.off[static_cast<std::size_t>(b) * heads + h] + len;
  }
  probs.flat.assign(probs.off.back(), T(0));
  const T keep_scale = drop.active ? T(1) / (T(1) - drop.rate) : T(1);

#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < B; ++b) {
    for (int h = 0; h < heads; ++h) {
      const int c0 = ctx_off[b], c1 = ctx_off[b + 1];
      const int len = c1 - c0;
      const int base = b * S;
      T* pflat = probs.flat.data() + probs.off[static_cast<std::size_t>(b) * heads + h];
      std::vector<T> srow(std::max(1, len));
      for (int i = 0; i < S; ++i) {
        T* out_i = out.row(base + i) + h * dh;
        std::fill(out_i, out_i + dh, T(0));
        if (len == 0 || !q_valid[base + i]) continue;
        const T* qi = q.row(base + i) + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < len; ++j) {
          const T* kj = kv.row(c0 + j) + h * dh;
          T s = T(0);
#pragma omp simd reduction(+ : s)
          for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
          srow[j] = s * scale;
          mx = std::max(mx, srow[j]);
        }
        T sum = T(0);
        for (int j = 0; j < len; ++j) {
          srow[j] = std::exp(srow[j] - mx);
          sum += srow[j];
        }
        T inv = T(1) / sum;
        T* prow = pflat + static_cast<std::size_t>(i) * len;
        const u64 prow_tag = tag ^ (static_cast<u64>(base + i) << 24) ^ (static_cast<u64>(h) << 56);
        for (int j = 0; j < len; ++j) {
          T p = srow[j] * inv;
          prow[j] = p;
          T pe = p;
          if (drop.active)
            pe = hash_uniform(drop.seed, drop.step, prow_tag, static_cast<u64>(j)) < drop.rate
                     ? T(0)
                     : p * keep_scale;
          if (pe == T(0)) continue;
          const T* vj = kv.row(c0 + j) + d + h * dh;
#pragma omp simd
          for (int c = 0; c < dh; ++c) out_i[c] += pe * vj[c];
        }
      }
    }
  }
}

template <typename T>
void attention_cross_backward(const Matrix<T>& q, const Matrix<T>& kv,
                              const RaggedProbs<T>& probs, const Matrix<T>& d_out, int B,
                              int S, int heads, const std::vector<int>& ctx_off,
                              const std::vector<uint8_t>& q_valid,
                              const DropoutCtx<T>& drop, u64 tag, Matrix<T>& d_q,
                              Matrix<T>& d_kv) {
  const int d = q.cols;
  const int dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  d_q.reshape(q.rows, q.cols);
  d_q.zero();
  d_kv.reshape(kv.rows, kv.cols);
  d_kv.zero();
  const T keep_scale = drop.active ? T(1) / (T(1) - drop.rate) : T(1);

  // parallel over elements only: (b) owns its context slice of d_kv
#pragma omp parallel for schedule(static)
  for (int b = 0; b < B; ++b) {
    const int c0 = ctx_off[b], c1 = ctx_off[b + 1];
    const int len = c1 - c0;
    if (len == 0) continue;
    const int base = b * S;
    std::vector<T> dp(len);
    for (int h = 0; h < heads; ++h) {
      const T* pflat = probs.flat.data() + probs.off[static_cast<std::size_t>(b) * heads + h];
      for (int i = 0; i < S; ++i) {
        if (!q_valid[base + i]) continue;
        const T* doi = d_out.row(base + i) + h * dh;
        const T* qi = q.row(base + i) + h * dh;
        const T* prow = pflat + static_cast<std::size_t>(i) * len;
        const u64 prow_tag = tag ^ (static_cast<u64>(base + i) << 24) ^ (static_cast<u64>(h) << 56);
        T dot_pp = T(0);
        for (int j = 0; j < len; ++j) {
          T mask = T(1);
          if (drop.active)
            mask = hash_uniform(drop.seed, drop.step, prow_tag, static_cast<u64>(j)) < drop.rate
                       ? T(0)
                       : keep_scale;
          const T* vj = kv.row(c0 + j) + d + h * dh;
          T s = T(0);
#pragma omp simd reduction(+ : s)
          for (int c = 0; c < dh; ++c) s += doi[c] * vj[c];
          dp[j] = s * mask;
          if (mask != T(0) && prow[j] != T(0)) {
            T pe = prow[j] * mask;
            T* dvj = d_kv.row(c0 + j) + d + h * dh;
#pragma omp simd
            for (int c = 0; c < dh; ++c) dvj[c] += pe * doi[c];
          }
          dot_pp += dp[j] * prow[j];
        }
        T* dqi = d_q.row(base + i) + h * dh;
        for (int j = 0; j < len; ++j) {
          T ds = prow[j] * (dp[j] - dot_pp) * scale;
          if (ds == T(0)) continue;
          const T* kj = kv.row(c0 + j) + h * dh;
          T* dkj = d_kv.row(c0 + j) + h * dh;
#pragma omp simd
          for (int c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
#pragma omp simd
          for (int c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Optimizer: AdamW with linear warmup + cosine decay to a floor
// ---------------------------------------------------------------------------

struct LrSchedule {
  double peak = 1e-4;
  double floor = 1e-6;
  i64 warmup_steps = 4000;
  i64 decay_steps = 100000;  // total steps of the run

  double at(i64 step) const {
    if (warmup_steps > 0 && step < warmup_steps)
      return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (decay_steps <= warmup_steps) return floor;
    double t = static_cast<double>(step - warmup_steps) /
               static_cast<double>(decay_steps - warmup_steps);
    t = std::min(1.0, std::max(0.0, t));
    return floor + (peak - floor) * 0.5 * (1.0 + std::cos(M_PI * t));
  }
};

struct AdamConfig {
  LrSchedule lr;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.25;
};

// Scales all gradients so the global L2 norm is at most max_norm. Throws on
// non-finite gradients, naming the parameter.
template <typename T>
double clip_global_norm(ParamStore<T>& ps, double max_norm) {
  double sq = 0.0;
  for (const auto& t : ps.list()) {
    // serial sum: the clip factor must not depend on thread count
    double local = 0.0;
    const auto& g = t->grad.data;
    for (std::size_t i = 0; i < g.size(); ++i) local += static_cast<double>(g[i]) * g[i];
    if (!std::isfinite(local))
      throw std::runtime_error("non-finite gradient in parameter " + t->name);
    sq += local;
  }
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    T s = static_cast<T>(max_norm / norm);
    for (auto& t : ps.list()) {
      auto& g = t->grad.data;
#pragma omp parallel for schedule(static)
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= s;
    }
  }
  return norm;
}

template <typename T>
class AdamW {
 public:
  AdamW(ParamStore<T>& ps, const AdamConfig& cfg) : cfg_(cfg) {
    for (const auto& t : ps.list()) {
      m_.emplace_back(t->value.rows, t->value.cols);
      v_.emplace_back(t->value.rows, t->value.cols);
    }
  }

  const AdamConfig& config() const { return cfg_; }
  i64 step_count() const { return step_; }

  // one update; gradients must already be clipped/valid
  void step(ParamStore<T>& ps) {
    ++step_;
    const double lr = cfg_.lr.at(step_ - 1);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, step_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, step_);
    for (std::size_t k = 0; k < ps.list().size(); ++k) {
      auto& t = *ps.list()[k];
      auto& m = m_[k].data;
      auto& v = v_[k].data;
      auto& p = t.value.data;
      const auto& g = t.grad.data;
      const double wd = t.decay ? cfg_.weight_decay : 0.0;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!std::isfinite(g[i]))
          throw std::runtime_error("non-finite gradient in parameter " + t.name);
#pragma omp parallel for schedule(static)
      for (std::size_t i = 0; i < p.size(); ++i) {
        double gi = g[i];
        double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        double mhat = mi / bc1;
        double vhat = vi / bc2;
        double upd = mhat / (std::sqrt(vhat) + cfg_.eps) + wd * p[i];
        p[i] = static_cast<T>(p[i] - lr * upd);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::vector<Matrix<T>> m_, v_;
  i64 step_ = 0;
};

// ---------------------------------------------------------------------------
// Gradient checking against central finite differences
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
};

// loss_fn(true) must populate gradients in `ps` (after zero_grads);
// loss_fn(false) must only return the loss. Pass stochastic=true for graphs
// with active dropout: the check is rejected.
inline GradCheckResult grad_check(ParamStore<double>& ps,
                                  const std::function<double(bool)>& loss_fn,
                                  double h = 1e-5, bool stochastic = false) {
  if (stochastic)
    throw std::invalid_argument("grad_check: non-deterministic graph (dropout enabled)");
  ps.zero_grads();
  loss_fn(true);
  std::vector<std::vector<double>> analytic;
  for (const auto& t : ps.list()) analytic.push_back(t->grad.data);

  GradCheckResult res;
  for (std::size_t k = 0; k < ps.list().size(); ++k) {
    auto& t = *ps.list()[k];
    for (std::size_t i = 0; i < t.value.data.size(); ++i) {
      double orig = t.value.data[i];
      t.value.data[i] = orig + h;
      double lp = loss_fn(false);
      t.value.data[i] = orig - h;
      double lm = loss_fn(false);
      t.value.data[i] = orig;
      double fd = (lp - lm) / (2.0 * h);
      double an = analytic[k][i];
      // the 1e-6 floor keeps fp cancellation noise on near-zero gradients
      // (|noise| ~ eps*|loss|/h ~ 1e-11) from registering as relative error
      double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
      double rel = std::abs(fd - an) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = t.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

}  // namespace radt::nn
