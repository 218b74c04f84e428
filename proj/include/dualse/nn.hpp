#pragma once

// Model building blocks: parameter registry, initializers, conv/linear/norm
// layers, snake activation, and the RoPE transformer block.

#include <memory>
#include <string>
#include <vector>

#include "dualse/ops.hpp"
#include "dualse/rng.hpp"
#include "dualse/tensor.hpp"

namespace dualse::nn {

using ag::Tensor;

template <typename S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
  bool decay = true;  // rank-1 parameters (biases, gains) are excluded from weight decay
};

template <typename S>
class Module {
 public:
  virtual ~Module() = default;
  virtual void collect_params(const std::string& prefix, std::vector<NamedParam<S>>& out) const = 0;

  std::vector<NamedParam<S>> parameters(const std::string& prefix = "") const {
    std::vector<NamedParam<S>> out;
    collect_params(prefix, out);
    return out;
  }

  int64_t num_params() const {
    int64_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  void zero_grad() const {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }
};

template <typename S>
Tensor<S> uniform_init(ag::Shape shape, double bound, RandomStream& rs) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape), true);
  for (auto& v : t.data()) v = static_cast<S>(rs.uniform(-bound, bound));
  return t;
}

// ---------------------------------------------------------------------------

template <typename S>
class Linear : public Module<S> {
 public:
  Linear(int64_t in, int64_t out, RandomStream& rs)
      : w_(uniform_init<S>({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rs)),
        b_(uniform_init<S>({out}, 1.0 / std::sqrt(static_cast<double>(in)), rs)) {}

  Tensor<S> forward(const Tensor<S>& x) const {  // x [N, in]
    return ag::add_rowvec(ag::matmul(x, w_), b_);
  }

  void collect_params(const std::string& p, std::vector<NamedParam<S>>& out) const override {
    out.push_back({p + "w", w_, true});
    out.push_back({p + "b", b_, false});
  }

 private:
  Tensor<S> w_, b_;
};

// 1-D convolution layer; optionally weight-normalized (v, g parameterization).
template <typename S>
class Conv1d : public Module<S> {
 public:
  Conv1d(int64_t cin, int64_t cout, int64_t k, int64_t stride, RandomStream& rs,
         bool weight_normed = false, int64_t pad_l = -1, int64_t pad_r = -1)
      : stride_(stride), weight_normed_(weight_normed) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k));
    v_ = uniform_init<S>({cout, cin, k}, bound, rs);
    b_ = uniform_init<S>({cout}, bound, rs);
    if (pad_l < 0) {  // "same" for stride 1, exact T/stride for strided convs
      const int64_t total = (stride == 1) ? k - 1 : k - stride;
      pad_l_ = (total + 1) / 2;
      pad_r_ = total - pad_l_;
    } else {
      pad_l_ = pad_l;
      pad_r_ = pad_r < 0 ? pad_l : pad_r;
    }
    if (weight_normed_) {
      g_ = Tensor<S>::zeros({cout}, true);
      for (int64_t c = 0; c < cout; ++c) {
        S n2 = S(0);
        for (int64_t i = 0; i < cin * k; ++i) {
          const S v = v_.data()[c * cin * k + i];
          n2 += v * v;
        }
        g_.data()[c] = std::sqrt(n2);
      }
    }
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    const Tensor<S> w = weight_normed_ ? ag::weight_norm(v_, g_) : v_;
    return ag::conv1d(x, w, b_, stride_, pad_l_, pad_r_);
  }

  void collect_params(const std::string& p, std::vector<NamedParam<S>>& out) const override {
    out.push_back({p + "w", v_, true});
    if (weight_normed_) out.push_back({p + "g", g_, false});
    out.push_back({p + "b", b_, false});
  }

 private:
  Tensor<S> v_, g_, b_;
  int64_t stride_, pad_l_ = 0, pad_r_ = 0;
  bool weight_normed_;
};

// Transposed 1-D convolution with kernel 2*stride: exact stride-fold upsampling.
template <typename S>
class ConvTranspose1d : public Module<S> {
 public:
  ConvTranspose1d(int64_t cin, int64_t cout, int64_t k, int64_t stride, RandomStream& rs)
      : stride_(stride) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k));
    w_ = uniform_init<S>({cin, cout, k}, bound, rs);
    b_ = uniform_init<S>({cout}, bound, rs);
    const int64_t total = k - stride;
    pad_l_ = (total + 1) / 2;
    pad_r_ = total - pad_l_;
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    return ag::conv_transpose1d(x, w_, b_, stride_, pad_l_, pad_r_);
  }

  void collect_params(const std::string& p, std::vector<NamedParam<S>>& out) const override {
    out.push_back({p + "w", w_, true});
    out.push_back({p + "b", b_, false});
  }

 private:
  Tensor<S> w_, b_;
  int64_t stride_, pad_l_, pad_r_;
};

template <typename S>
class Conv2d : public Module<S> {
 public:
  Conv2d(int64_t cin, int64_t cout, std::pair<int64_t, int64_t> k,
         std::pair<int64_t, int64_t> stride, std::pair<int64_t, int64_t> pad, RandomStream& rs,
         bool weight_normed = true)
      : kh_(k.first), kw_(k.second), sh_(stride.first), sw_(stride.second), ph_(pad.first),
        pw_(pad.second), weight_normed_(weight_normed) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * kh_ * kw_));
    v_ = uniform_init<S>({cout, cin, kh_, kw_}, bound, rs);
    b_ = uniform_init<S>({cout}, bound, rs);
    if (weight_normed_) {
      g_ = Tensor<S>::zeros({cout}, true);
      const int64_t per = cin * kh_ * kw_;
      for (int64_t c = 0; c < cout; ++c) {
        S n2 = S(0);
        for (int64_t i = 0; i < per; ++i) {
          const S v = v_.data()[c * per + i];
          n2 += v * v;
        }
        g_.data()[c] = std::sqrt(n2);
      }
    }
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    const Tensor<S> w = weight_normed_ ? ag::weight_norm(v_, g_) : v_;
    return ag::conv2d(x, w, b_, sh_, sw_, ph_, pw_);
  }

  void collect_params(const std::string& p, std::vector<NamedParam<S>>& out) const override {
    out.push_back({p + "w", v_, true});
    if (weight_normed_) out.push_back({p + "g", g_, false});
    out.push_back({p + "b", b_, false});
  }

 private:
  Tensor<S> v_, g_, b_;
  int64_t kh_, kw_, sh_, sw_, ph_, pw_;
  bool weight_normed_;
};

template <typename S>
class LayerNorm : public Module<S> {
 public:
  explicit LayerNorm(int64_t dim) {
    gamma_ = Tensor<S>::full({dim}, S(1));
    gamma_.set_requires_grad(true);
    beta_ = Tensor<S>::zeros({dim}, true);
  }

  Tensor<S> forward(const Tensor<S>& x) const { return ag::layer_norm(x, gamma_, beta_); }

  void collect_params(const std::string& p, std::vector<NamedParam<S>>& out) const override {
    out.push_back({p + "gamma", gamma_, false});
    out.push_back({p + "beta", beta_, false});
  }

 private:
  Tensor<S> gamma_, beta_;
};

template <typename S>
class Snake : public Module<S> {
 public:
  explicit Snake(int64_t channels) {
    alpha_ = Tensor<S>::full({channels}, S(1));
    alpha_.set_requires_grad(true);
  }

  Tensor<S> forward(const Tensor<S>& x) const { return ag::snake(x, alpha_); }

  void collect_params(const std::string& p, std::vector<NamedParam<S>>& out) const override {
    out.push_back({p + "alpha", alpha_, false});
  }

 private:
  Tensor<S> alpha_;
};

// ---------------------------------------------------------------------------
// RoPE self-attention transformer block (pre-norm residual).
// ---------------------------------------------------------------------------

template <typename S>
class SelfAttention : public Module<S> {
 public:
  SelfAttention(int64_t dim, int64_t heads, double rope_base, RandomStream& rs)
      : dim_(dim), heads_(heads), rope_base_(rope_base),
        qkv_(dim, 3 * dim, rs), proj_(dim, dim, rs) {
    if (dim % heads != 0 || (dim / heads) % 2 != 0) {
      throw std::invalid_argument("attention: dim must split into heads with even head size");
    }
  }

  Tensor<S> forward(const Tensor<S>& x) const {  // x [B, L, M]
    const int64_t B = x.dim(0), L = x.dim(1), M = x.dim(2);
    const int64_t H = heads_, Dh = M / H;
    auto qkv = qkv_.forward(ag::reshape(x, {B * L, M}));  // [B*L, 3M]
    auto split = ag::reshape(qkv, {B, L, 3, H, Dh});
    auto take = [&](int64_t idx) {
      auto t = ag::slice(split, 2, idx, 1);               // [B, L, 1, H, Dh]
      t = ag::reshape(t, {B, L, H, Dh});
      t = ag::permute(t, {0, 2, 1, 3});                   // [B, H, L, Dh]
      return ag::reshape(t, {B * H, L, Dh});
    };
    auto q = ag::rope(take(0), rope_base_);
    auto k = ag::rope(take(1), rope_base_);
    auto v = take(2);

    auto scores = ag::mul_scalar(ag::bmm(q, ag::transpose_last2(k)),
                                 1.0 / std::sqrt(static_cast<double>(Dh)));
    auto probs = ag::softmax_lastdim(scores);
    auto ctx = ag::bmm(probs, v);                         // [B*H, L, Dh]
    ctx = ag::permute(ag::reshape(ctx, {B, H, L, Dh}), {0, 2, 1, 3});
    auto out = proj_.forward(ag::reshape(ctx, {B * L, M}));
    return ag::reshape(out, {B, L, M});
  }

  void collect_params(const std::string& p, std::vector<NamedParam<S>>& out) const override {
    qkv_.collect_params(p + "qkv.", out);
    proj_.collect_params(p + "proj.", out);
  }

 private:
  int64_t dim_, heads_;
  double rope_base_;
  Linear<S> qkv_, proj_;
};

template <typename S>
class TransformerBlock : public Module<S> {
 public:
  TransformerBlock(int64_t dim, int64_t heads, int64_t ff_dim, double rope_base, RandomStream& rs)
      : ln1_(dim), ln2_(dim), attn_(dim, heads, rope_base, rs), ff1_(dim, ff_dim, rs),
        ff2_(ff_dim, dim, rs) {}

  Tensor<S> forward(const Tensor<S>& x) const {  // [B, L, M]
    auto h = ag::add(x, attn_.forward(ln1_.forward(x)));
    const int64_t B = h.dim(0), L = h.dim(1), M = h.dim(2);
    auto f = ff2_.forward(ag::gelu(ff1_.forward(ag::reshape(ln2_.forward(h), {B * L, M}))));
    return ag::add(h, ag::reshape(f, {B, L, M}));
  }

  void collect_params(const std::string& p, std::vector<NamedParam<S>>& out) const override {
    ln1_.collect_params(p + "ln1.", out);
    attn_.collect_params(p + "attn.", out);
    ln2_.collect_params(p + "ln2.", out);
    ff1_.collect_params(p + "ff1.", out);
    ff2_.collect_params(p + "ff2.", out);
  }

 private:
  LayerNorm<S> ln1_, ln2_;
  SelfAttention<S> attn_;
  Linear<S> ff1_, ff2_;
};

}  // namespace dualse::nn
