#pragma once

// Transformer building blocks over the tensor engine. All modules register
// their parameters in a ParamStore so optimizers and checkpoints see one flat
// named list.

#include <cmath>
#include <string>
#include <vector>

#include "flowtts/adam.hpp"
#include "flowtts/tensor.hpp"

namespace flowtts {

template <class S>
class ParamStore {
 public:
  explicit ParamStore(uint64_t init_seed) : rng_(init_seed) {}

  Tensor<S> randn(const std::string& name, Shape shape, S std) {
    auto t = Tensor<S>::randn(shape, rng_, std, true);
    list_.push_back({name, t});
    return t;
  }
  Tensor<S> zeros(const std::string& name, Shape shape) {
    auto t = Tensor<S>::zeros(shape, true);
    list_.push_back({name, t});
    return t;
  }
  Tensor<S> constant(const std::string& name, Shape shape, S v) {
    auto t = Tensor<S>::full(shape, v);
    t.set_requires_grad(true);
    list_.push_back({name, t});
    return t;
  }

  const ParamList<S>& list() const { return list_; }

  Tensor<S> find(const std::string& name) const {
    for (const auto& p : list_)
      if (p.name == name) return p.tensor;
    fail("ParamStore: no parameter named '" + name + "'");
  }

  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& p : list_) n += p.tensor.numel();
    return n;
  }

 private:
  Rng rng_;
  ParamList<S> list_;
};

template <class S>
struct Linear {
  Tensor<S> w, b;

  Linear() = default;
  Linear(ParamStore<S>& ps, const std::string& name, int64_t in, int64_t out,
         bool zero_init = false, bool with_bias = true) {
    w = zero_init ? ps.zeros(name + ".w", {in, out})
                  : ps.randn(name + ".w", {in, out},
                             S(1.0 / std::sqrt(double(in))));
    if (with_bias) b = ps.zeros(name + ".b", {out});
  }

  Tensor<S> operator()(const Tensor<S>& x) const {
    auto y = matmul(x, w);
    return b.defined() ? add_rowvec(y, b) : y;
  }
};

template <class S>
struct LayerNorm {
  Tensor<S> g, b;

  LayerNorm() = default;
  LayerNorm(ParamStore<S>& ps, const std::string& name, int64_t dim) {
    g = ps.constant(name + ".g", {dim}, S(1));
    b = ps.zeros(name + ".b", {dim});
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return layer_norm(x, g, b); }
};

template <class S>
struct MultiHeadAttention {
  Linear<S> qkv, out;
  int64_t heads = 1, width = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<S>& ps, const std::string& name, int64_t w,
                     int64_t h)
      // bias-free qkv: a key bias is cancelled by softmax anyway
      : qkv(ps, name + ".qkv", w, 3 * w, false, /*with_bias=*/false),
        out(ps, name + ".out", w, w), heads(h), width(w) {}

  Tensor<S> operator()(const Tensor<S>& x) const {
    int64_t dh = width / heads;
    auto proj = qkv(x);  // [T, 3W]
    std::vector<Tensor<S>> per_head;
    per_head.reserve(size_t(heads));
    S inv_sqrt_dh = S(1.0 / std::sqrt(double(dh)));
    for (int64_t h = 0; h < heads; ++h) {
      auto q = slice_cols(proj, h * dh, (h + 1) * dh);
      auto k = slice_cols(proj, width + h * dh, width + (h + 1) * dh);
      auto v = slice_cols(proj, 2 * width + h * dh, 2 * width + (h + 1) * dh);
      auto attn = softmax_rows(scale(matmul_nt(q, k), inv_sqrt_dh));
      per_head.push_back(matmul(attn, v));
    }
    return out(concat_cols(per_head));
  }
};

template <class S>
struct Mlp {
  Linear<S> fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore<S>& ps, const std::string& name, int64_t w, int64_t hidden) {
    fc1 = Linear<S>(ps, name + ".fc1", w, hidden);
    fc2 = Linear<S>(ps, name + ".fc2", hidden, w);
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return fc2(gelu(fc1(x))); }
};

// Pre-norm transformer block: x + attn(ln(x)), x + mlp(ln(x))
template <class S>
struct TransformerBlock {
  LayerNorm<S> ln1, ln2;
  MultiHeadAttention<S> attn;
  Mlp<S> mlp;

  TransformerBlock() = default;
  TransformerBlock(ParamStore<S>& ps, const std::string& name, int64_t w,
                   int64_t heads, int64_t mlp_ratio = 4)
      : ln1(ps, name + ".ln1", w), ln2(ps, name + ".ln2", w),
        attn(ps, name + ".attn", w, heads),
        mlp(ps, name + ".mlp", w, w * mlp_ratio) {}

  Tensor<S> operator()(const Tensor<S>& x) const {
    auto h = add(x, attn(ln1(x)));
    return add(h, mlp(ln2(h)));
  }
};

// Adaptive layer-norm block: modulation (shift/scale/gate per sublayer) is a
// zero-initialized linear read off the conditioning vector, so the block
// starts as the identity.
template <class S>
struct AdaLnBlock {
  MultiHeadAttention<S> attn;
  Mlp<S> mlp;
  Linear<S> mod;
  int64_t width = 0;

  AdaLnBlock() = default;
  AdaLnBlock(ParamStore<S>& ps, const std::string& name, int64_t w,
             int64_t heads, int64_t cond_dim, int64_t mlp_ratio = 4)
      : attn(ps, name + ".attn", w, heads),
        mlp(ps, name + ".mlp", w, w * mlp_ratio),
        mod(ps, name + ".mod", cond_dim, 6 * w, /*zero_init=*/true),
        width(w) {}

  // cond is [1, cond_dim]
  Tensor<S> operator()(const Tensor<S>& x, const Tensor<S>& cond) const {
    auto m = mod(cond);  // [1, 6W]
    auto part = [&](int64_t i) {
      return reshape(slice_cols(m, i * width, (i + 1) * width), {width});
    };
    auto shift1 = part(0), scale1 = part(1), gate1 = part(2);
    auto shift2 = part(3), scale2 = part(4), gate2 = part(5);
    auto modulate = [&](const Tensor<S>& h, const Tensor<S>& sh,
                        const Tensor<S>& sc) {
      return add_rowvec(mul_rowvec(layer_norm_plain(h),
                                   add_scalar(sc, S(1))), sh);
    };
    auto h = add(x, mul_rowvec(attn(modulate(x, shift1, scale1)), gate1));
    return add(h, mul_rowvec(mlp(modulate(h, shift2, scale2)), gate2));
  }
};

// frames [T,D] -> [T,2D]: the frame and its delta to the previous frame.
// Deltas make token boundaries and pattern steps visible to mean pooling.
template <class S>
Tensor<S> frame_features(const Tensor<float>& frames) {
  int64_t t = frames.rows(), d = frames.cols();
  auto out = Tensor<S>::zeros({t, 2 * d});
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = 0; j < d; ++j) {
      S v = S(frames.data()[i * d + j]);
      out.data()[i * 2 * d + j] = v;
      out.data()[i * 2 * d + d + j] =
          i > 0 ? v - S(frames.data()[(i - 1) * d + j]) : S(0);
    }
  return out;
}

// Fixed sinusoidal positional table, [T, dim]
template <class S>
Tensor<S> sinusoidal_positions(int64_t t, int64_t dim) {
  auto out = Tensor<S>::zeros({t, dim});
  int64_t half = dim / 2;
  for (int64_t p = 0; p < t; ++p)
    for (int64_t i = 0; i < half; ++i) {
      double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
      out.data()[p * dim + 2 * i] = S(std::sin(double(p) * freq));
      out.data()[p * dim + 2 * i + 1] = S(std::cos(double(p) * freq));
    }
  return out;
}

// Sinusoidal embedding of a scalar time t in [0,1], shape [1, dim]
template <class S>
Tensor<S> timestep_embedding(S t, int64_t dim) {
  auto out = Tensor<S>::zeros({1, dim});
  int64_t half = dim / 2;
  double x = double(t) * 1000.0;
  for (int64_t i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
    out.data()[2 * i] = S(std::sin(x * freq));
    out.data()[2 * i + 1] = S(std::cos(x * freq));
  }
  return out;
}

}  // namespace flowtts
