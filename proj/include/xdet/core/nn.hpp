#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "xdet/core/ops.hpp"

namespace xdet {

// Deterministic RNG front-end; bit layout does not depend on libstdc++
// distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; consumes two draws per pair, caches the spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0;
    while (u1 <= 1e-300) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(th);
    has_spare_ = true;
    return r * std::cos(th);
  }

  int64_t randint(int64_t lo, int64_t hi_exclusive) {
    const uint64_t span = static_cast<uint64_t>(hi_exclusive - lo);
    return lo + static_cast<int64_t>(gen_() % span);
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

template <typename T>
struct NamedParam {
  std::string name;
  Var<T>* param;
};

template <typename T>
class Module {
 public:
  virtual ~Module() = default;
  virtual void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) = 0;

  std::vector<NamedParam<T>> named_parameters(const std::string& prefix = "") {
    std::vector<NamedParam<T>> out;
    collect(prefix, out);
    return out;
  }

  Index parameter_count() {
    Index n = 0;
    for (auto& p : named_parameters()) n += p.param->size();
    return n;
  }
};

template <typename T>
inline Var<T> init_uniform(Shape shape, double bound, Rng& rng) {
  Tensor<T> t(shape);
  T* p = t.data();
  for (Index i = 0; i < t.size(); ++i) p[i] = static_cast<T>(rng.uniform(-bound, bound));
  return make_param(std::move(t));
}

// Fan-in scaled uniform, the framework's default weight init.
template <typename T>
inline Var<T> init_fan_in(Shape shape, Index fan_in, Rng& rng) {
  return init_uniform<T>(std::move(shape), std::sqrt(3.0 / static_cast<double>(fan_in)), rng);
}

template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d() = default;
  Conv2d(Index cin, Index cout, Index k, Index stride, Index pad, Index groups, Rng& rng,
         bool bias = true)
      : stride_(stride), pad_(pad), groups_(groups) {
    check<config_error>(cin > 0 && cout > 0 && k > 0, "conv2d: non-positive dimension");
    weight_ = init_fan_in<T>({cout, cin / groups, k, k}, (cin / groups) * k * k, rng);
    if (bias) bias_ = make_param(Tensor<T>::zeros({cout}));
  }

  Var<T> forward(const Var<T>& x) { return conv2d(x, weight_, bias_, stride_, pad_, groups_); }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) override {
    out.push_back({prefix + ".weight", &weight_});
    if (bias_.defined()) out.push_back({prefix + ".bias", &bias_});
  }

  Var<T>& weight() { return weight_; }
  Var<T>& bias() { return bias_; }

 private:
  Var<T> weight_, bias_;
  Index stride_ = 1, pad_ = 0, groups_ = 1;
};

template <typename T>
class Linear : public Module<T> {
 public:
  Linear() = default;
  Linear(Index in, Index out, Rng& rng, bool bias = true) {
    weight_ = init_fan_in<T>({in, out}, in, rng);
    if (bias) bias_ = make_param(Tensor<T>::zeros({out}));
  }

  // x: (..., in) -> (..., out)
  Var<T> forward(const Var<T>& x) {
    const Index in = weight_.dim(0), out = weight_.dim(1);
    Shape os = x.shape();
    os.back() = out;
    Var<T> x2 = reshape(x, {x.size() / in, in});
    return reshape(linear(x2, weight_, bias_), std::move(os));
  }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) override {
    out.push_back({prefix + ".weight", &weight_});
    if (bias_.defined()) out.push_back({prefix + ".bias", &bias_});
  }

  Var<T>& weight() { return weight_; }
  Var<T>& bias() { return bias_; }

 private:
  Var<T> weight_, bias_;
};

// Per-sample group normalization over (C/G, H, W); keeps batch elements
// independent (a contract the detector heads rely on).
template <typename T>
class GroupNorm : public Module<T> {
 public:
  GroupNorm() = default;
  GroupNorm(Index channels, Index groups, T eps = T(1e-5)) : groups_(groups), eps_(eps) {
    while (groups_ > 1 && channels % groups_ != 0) --groups_;
    gamma_ = make_param(Tensor<T>::full({channels}, T(1)));
    beta_ = make_param(Tensor<T>::zeros({channels}));
  }

  Var<T> forward(const Var<T>& x) {
    const Index b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Var<T> flat = reshape(x, {b * groups_, (c / groups_) * h * w});
    Var<T> y = reshape(normalize_rows(flat, eps_), {b, c, h, w});
    return channel_scale_shift(y, gamma_, beta_);
  }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) override {
    out.push_back({prefix + ".gamma", &gamma_});
    out.push_back({prefix + ".beta", &beta_});
  }

 private:
  Var<T> gamma_, beta_;
  Index groups_ = 1;
  T eps_ = T(1e-5);
};

template <typename T>
class LayerNorm : public Module<T> {
 public:
  LayerNorm() = default;
  explicit LayerNorm(Index dim, T eps = T(1e-5)) : dim_(dim), eps_(eps) {
    gamma_ = make_param(Tensor<T>::full({dim}, T(1)));
    beta_ = make_param(Tensor<T>::zeros({dim}));
  }

  // x: (..., dim)
  Var<T> forward(const Var<T>& x) {
    Shape os = x.shape();
    Var<T> x2 = reshape(x, {x.size() / dim_, dim_});
    Var<T> y = normalize_rows(x2, eps_);
    y = add_rowvec(mul_rowvec(y, gamma_), beta_);
    return reshape(y, std::move(os));
  }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) override {
    out.push_back({prefix + ".gamma", &gamma_});
    out.push_back({prefix + ".beta", &beta_});
  }

 private:
  Var<T> gamma_, beta_;
  Index dim_ = 0;
  T eps_ = T(1e-5);
};

// Multi-head attention with separate q/k/v projections. Self-attention is
// forward(x, x, x); positional terms are added by the caller to q/k only.
template <typename T>
class MultiheadAttention : public Module<T> {
 public:
  MultiheadAttention() = default;
  MultiheadAttention(Index dim, Index heads, Rng& rng) : dim_(dim), heads_(heads) {
    check<config_error>(dim % heads == 0, "attention: heads must divide dim");
    wq_ = Linear<T>(dim, dim, rng);
    wk_ = Linear<T>(dim, dim, rng);
    wv_ = Linear<T>(dim, dim, rng);
    wo_ = Linear<T>(dim, dim, rng);
  }

  // q: (B,M,D), k/v: (B,N,D)
  Var<T> forward(const Var<T>& q_in, const Var<T>& k_in, const Var<T>& v_in) {
    const Index b = q_in.dim(0), m = q_in.dim(1), n = k_in.dim(1);
    const Index dh = dim_ / heads_;
    Var<T> q = split_heads(wq_.forward(q_in), b, m, dh);
    Var<T> k = split_heads(wk_.forward(k_in), b, n, dh);
    Var<T> v = split_heads(wv_.forward(v_in), b, n, dh);
    Var<T> scores = scale(bmm(q, k, /*transpose_b=*/true),
                          static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    Var<T> attn = reshape(softmax_rows(reshape(scores, {b * heads_ * m, n})), {b * heads_, m, n});
    Var<T> ctx = bmm(attn, v);  // (B*h, M, dh)
    ctx = reshape(permute(reshape(ctx, {b, heads_, m, dh}), {0, 2, 1, 3}), {b, m, dim_});
    return wo_.forward(ctx);
  }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) override {
    wq_.collect(prefix + ".wq", out);
    wk_.collect(prefix + ".wk", out);
    wv_.collect(prefix + ".wv", out);
    wo_.collect(prefix + ".wo", out);
  }

 private:
  Var<T> split_heads(const Var<T>& x, Index b, Index tokens, Index dh) {
    return reshape(permute(reshape(x, {b, tokens, heads_, dh}), {0, 2, 1, 3}),
                   {b * heads_, tokens, dh});
  }

  Linear<T> wq_, wk_, wv_, wo_;
  Index dim_ = 0, heads_ = 1;
};

template <typename T>
class Mlp : public Module<T> {
 public:
  Mlp() = default;
  Mlp(Index dim, Index hidden, Rng& rng) : fc1_(dim, hidden, rng), fc2_(hidden, dim, rng) {}

  Var<T> forward(const Var<T>& x) { return fc2_.forward(silu(fc1_.forward(x))); }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) override {
    fc1_.collect(prefix + ".fc1", out);
    fc2_.collect(prefix + ".fc2", out);
  }

  Linear<T>& fc2() { return fc2_; }

 private:
  Linear<T> fc1_, fc2_;
};

// Conv -> GroupNorm -> SiLU, the basic convolutional unit.
template <typename T>
class ConvNormAct : public Module<T> {
 public:
  ConvNormAct() = default;
  ConvNormAct(Index cin, Index cout, Index k, Index stride, Rng& rng, Index groups = 1)
      : conv_(cin, cout, k, stride, k / 2, groups, rng, /*bias=*/false),
        norm_(cout, default_groups(cout)) {}

  Var<T> forward(const Var<T>& x) { return silu(norm_.forward(conv_.forward(x))); }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) override {
    conv_.collect(prefix + ".conv", out);
    norm_.collect(prefix + ".norm", out);
  }

  static Index default_groups(Index channels) {
    Index g = std::min<Index>(8, channels);
    while (g > 1 && channels % g != 0) --g;
    return g;
  }

 private:
  Conv2d<T> conv_;
  GroupNorm<T> norm_;
};

// Fixed 2-d sine/cosine position table, (H*W, dim). Deterministic constant.
template <typename T>
inline Tensor<T> sincos_position_2d(Index h, Index w, Index dim, double temperature = 10000.0) {
  check<config_error>(dim % 4 == 0, "sincos position table needs dim divisible by 4");
  Tensor<T> out(Shape{h * w, dim});
  const Index quarter = dim / 4;
  T* p = out.data();
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j < w; ++j) {
      const double y = (static_cast<double>(i) + 0.5) / static_cast<double>(h) * 6.283185307179586;
      const double x = (static_cast<double>(j) + 0.5) / static_cast<double>(w) * 6.283185307179586;
      T* row = p + (i * w + j) * dim;
      for (Index q = 0; q < quarter; ++q) {
        const double t = std::pow(temperature, static_cast<double>(q) / static_cast<double>(quarter));
        row[q] = static_cast<T>(std::sin(x / t));
        row[quarter + q] = static_cast<T>(std::cos(x / t));
        row[2 * quarter + q] = static_cast<T>(std::sin(y / t));
        row[3 * quarter + q] = static_cast<T>(std::cos(y / t));
      }
    }
  return out;
}

}  // namespace xdet
