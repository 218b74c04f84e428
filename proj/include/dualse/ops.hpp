#pragma once

// Structured ops on top of the autograd core: GEMM-backed linear algebra,
// im2col convolutions, attention pieces (softmax, RoPE), layer norm, weight
// norm, and a differentiable STFT.

#include <complex>

#include "dualse/fft.hpp"
#include "dualse/gemm.hpp"
#include "dualse/tensor.hpp"

namespace dualse::ag {

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: need [m,k]x[k,n], got " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> out = Tensor<S>::zeros({m, n});
  gemm(false, false, m, n, k, S(1), a.data().data(), k, b.data().data(), n, S(0),
       out.data().data(), n);
  out.attach({a, b}, "matmul", [a, b, m, n, k](Node<S>* self) {
    const auto& g = self->grad;
    if (a.requires_grad()) {
      gemm(false, true, m, k, n, S(1), g.data(), n, b.data().data(), n, S(1), a.grad().data(), k);
    }
    if (b.requires_grad()) {
      gemm(true, false, k, n, m, S(1), a.data().data(), k, g.data(), n, S(1), b.grad().data(), n);
    }
  });
  return out;
}

template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw std::invalid_argument("bmm: need [B,m,k]x[B,k,n], got " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const int64_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor<S> out = Tensor<S>::zeros({bs, m, n});
  for (int64_t i = 0; i < bs; ++i) {
    gemm(false, false, m, n, k, S(1), a.data().data() + i * m * k, k,
         b.data().data() + i * k * n, n, S(0), out.data().data() + i * m * n, n);
  }
  out.attach({a, b}, "bmm", [a, b, bs, m, n, k](Node<S>* self) {
    const auto& g = self->grad;
    for (int64_t i = 0; i < bs; ++i) {
      const S* gi = g.data() + i * m * n;
      if (a.requires_grad()) {
        gemm(false, true, m, k, n, S(1), gi, n, b.data().data() + i * k * n, n, S(1),
             a.grad().data() + i * m * k, k);
      }
      if (b.requires_grad()) {
        gemm(true, false, k, n, m, S(1), a.data().data() + i * m * k, k, gi, n, S(1),
             b.grad().data() + i * k * n, n);
      }
    }
  });
  return out;
}

template <typename S>
Tensor<S> transpose_last2(const Tensor<S>& a) {
  const int nd = a.ndim();
  if (nd < 2) throw std::invalid_argument("transpose_last2: rank < 2");
  std::vector<int> axes(nd);
  for (int i = 0; i < nd; ++i) axes[i] = i;
  std::swap(axes[nd - 1], axes[nd - 2]);
  return permute(a, axes);
}

// ---------------------------------------------------------------------------
// Convolutions (im2col + GEMM)
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void im2col_1d(const S* x, int64_t c_in, int64_t t_in, int64_t k, int64_t stride,
               int64_t pad_l, int64_t t_out, S* col) {
  // col is [c_in*k, t_out]
  for (int64_t c = 0; c < c_in; ++c) {
    const S* xc = x + c * t_in;
    for (int64_t kk = 0; kk < k; ++kk) {
      S* row = col + (c * k + kk) * t_out;
      for (int64_t t = 0; t < t_out; ++t) {
        const int64_t src = t * stride + kk - pad_l;
        row[t] = (src >= 0 && src < t_in) ? xc[src] : S(0);
      }
    }
  }
}

template <typename S>
void col2im_add_1d(const S* col, int64_t c_in, int64_t t_in, int64_t k, int64_t stride,
                   int64_t pad_l, int64_t t_out, S* x) {
  for (int64_t c = 0; c < c_in; ++c) {
    S* xc = x + c * t_in;
    for (int64_t kk = 0; kk < k; ++kk) {
      const S* row = col + (c * k + kk) * t_out;
      for (int64_t t = 0; t < t_out; ++t) {
        const int64_t dst = t * stride + kk - pad_l;
        if (dst >= 0 && dst < t_in) xc[dst] += row[t];
      }
    }
  }
}

template <typename S>
void im2col_2d(const S* x, int64_t c_in, int64_t h, int64_t w, int64_t kh, int64_t kw,
               int64_t sh, int64_t sw, int64_t ph, int64_t pw, int64_t ho, int64_t wo,
               S* col) {
  // col is [c_in*kh*kw, ho*wo]
  for (int64_t c = 0; c < c_in; ++c) {
    for (int64_t a = 0; a < kh; ++a) {
      for (int64_t b = 0; b < kw; ++b) {
        S* row = col + ((c * kh + a) * kw + b) * (ho * wo);
        for (int64_t i = 0; i < ho; ++i) {
          const int64_t src_i = i * sh + a - ph;
          for (int64_t j = 0; j < wo; ++j) {
            const int64_t src_j = j * sw + b - pw;
            row[i * wo + j] = (src_i >= 0 && src_i < h && src_j >= 0 && src_j < w)
                                  ? x[(c * h + src_i) * w + src_j]
                                  : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_add_2d(const S* col, int64_t c_in, int64_t h, int64_t w, int64_t kh, int64_t kw,
                   int64_t sh, int64_t sw, int64_t ph, int64_t pw, int64_t ho, int64_t wo,
                   S* x) {
  for (int64_t c = 0; c < c_in; ++c) {
    for (int64_t a = 0; a < kh; ++a) {
      for (int64_t b = 0; b < kw; ++b) {
        const S* row = col + ((c * kh + a) * kw + b) * (ho * wo);
        for (int64_t i = 0; i < ho; ++i) {
          const int64_t dst_i = i * sh + a - ph;
          if (dst_i < 0 || dst_i >= h) continue;
          for (int64_t j = 0; j < wo; ++j) {
            const int64_t dst_j = j * sw + b - pw;
            if (dst_j >= 0 && dst_j < w) x[(c * h + dst_i) * w + dst_j] += row[i * wo + j];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x [B, C, T], w [Co, C, K], optional bias [Co].
template <typename S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                 int64_t stride, int64_t pad_l, int64_t pad_r) {
  if (x.ndim() != 3 || w.ndim() != 3 || x.dim(1) != w.dim(1)) {
    throw std::invalid_argument("conv1d: expect x [B,C,T], w [Co,C,K]");
  }
  const int64_t B = x.dim(0), C = x.dim(1), T = x.dim(2);
  const int64_t Co = w.dim(0), K = w.dim(2);
  const int64_t To = (T + pad_l + pad_r - K) / stride + 1;
  if (To < 1) throw std::invalid_argument("conv1d: output would be empty");
  const bool has_bias = bias.defined();

  Tensor<S> out = Tensor<S>::zeros({B, Co, To});
  {
    std::vector<S> col(static_cast<size_t>(C * K * To));
    for (int64_t b = 0; b < B; ++b) {
      detail::im2col_1d(x.data().data() + b * C * T, C, T, K, stride, pad_l, To, col.data());
      gemm(false, false, Co, To, C * K, S(1), w.data().data(), C * K, col.data(), To, S(0),
           out.data().data() + b * Co * To, To);
      if (has_bias) {
        S* ob = out.data().data() + b * Co * To;
        for (int64_t co = 0; co < Co; ++co) {
          const S bv = bias.data()[co];
          for (int64_t t = 0; t < To; ++t) ob[co * To + t] += bv;
        }
      }
    }
  }
  std::vector<Tensor<S>> parents = has_bias ? std::vector<Tensor<S>>{x, w, bias}
                                            : std::vector<Tensor<S>>{x, w};
  out.attach(parents, "conv1d",
             [x, w, bias, B, C, T, Co, K, To, stride, pad_l, has_bias](Node<S>* self) {
    const auto& g = self->grad;
    std::vector<S> col(static_cast<size_t>(C * K * To));
    std::vector<S> dcol(static_cast<size_t>(C * K * To));
    for (int64_t b = 0; b < B; ++b) {
      const S* gb = g.data() + b * Co * To;
      if (w.requires_grad()) {
        detail::im2col_1d(x.data().data() + b * C * T, C, T, K, stride, pad_l, To, col.data());
        gemm(false, true, Co, C * K, To, S(1), gb, To, col.data(), To, S(1), w.grad().data(),
             C * K);
      }
      if (has_bias && bias.requires_grad()) {
        auto& gbias = bias.grad();
        for (int64_t co = 0; co < Co; ++co) {
          S acc = S(0);
          for (int64_t t = 0; t < To; ++t) acc += gb[co * To + t];
          gbias[co] += acc;
        }
      }
      if (x.requires_grad()) {
        gemm(true, false, C * K, To, Co, S(1), w.data().data(), C * K, gb, To, S(0),
             dcol.data(), To);
        detail::col2im_add_1d(dcol.data(), C, T, K, stride, pad_l, To,
                              x.grad().data() + b * C * T);
      }
    }
  });
  return out;
}

// x [B, Cin, L], w [Cin, Co, K]; output [B, Co, (L-1)*stride + K - pad_l - pad_r].
template <typename S>
Tensor<S> conv_transpose1d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                           int64_t stride, int64_t pad_l, int64_t pad_r) {
  if (x.ndim() != 3 || w.ndim() != 3 || x.dim(1) != w.dim(0)) {
    throw std::invalid_argument("conv_transpose1d: expect x [B,Cin,L], w [Cin,Co,K]");
  }
  const int64_t B = x.dim(0), Ci = x.dim(1), L = x.dim(2);
  const int64_t Co = w.dim(1), K = w.dim(2);
  const int64_t To = (L - 1) * stride + K - pad_l - pad_r;
  if (To < 1) throw std::invalid_argument("conv_transpose1d: output would be empty");
  const bool has_bias = bias.defined();

  // Rearranged weight Wr[(co*K + k), ci] = w[ci, co, k].
  auto rearrange = [Ci, Co, K](const std::vector<S>& src, std::vector<S>& dst) {
    dst.resize(static_cast<size_t>(Co * K * Ci));
    for (int64_t ci = 0; ci < Ci; ++ci) {
      for (int64_t co = 0; co < Co; ++co) {
        for (int64_t k = 0; k < K; ++k) {
          dst[(co * K + k) * Ci + ci] = src[(ci * Co + co) * K + k];
        }
      }
    }
  };

  Tensor<S> out = Tensor<S>::zeros({B, Co, To});
  {
    std::vector<S> wr;
    rearrange(w.data(), wr);
    std::vector<S> cols(static_cast<size_t>(Co * K * L));
    for (int64_t b = 0; b < B; ++b) {
      gemm(false, false, Co * K, L, Ci, S(1), wr.data(), Ci, x.data().data() + b * Ci * L, L,
           S(0), cols.data(), L);
      S* ob = out.data().data() + b * Co * To;
      for (int64_t co = 0; co < Co; ++co) {
        for (int64_t k = 0; k < K; ++k) {
          const S* row = cols.data() + (co * K + k) * L;
          for (int64_t l = 0; l < L; ++l) {
            const int64_t t = l * stride + k - pad_l;
            if (t >= 0 && t < To) ob[co * To + t] += row[l];
          }
        }
        if (has_bias) {
          const S bv = bias.data()[co];
          for (int64_t t = 0; t < To; ++t) ob[co * To + t] += bv;
        }
      }
    }
  }
  std::vector<Tensor<S>> parents = has_bias ? std::vector<Tensor<S>>{x, w, bias}
                                            : std::vector<Tensor<S>>{x, w};
  out.attach(parents, "conv_transpose1d",
             [x, w, bias, rearrange, B, Ci, L, Co, K, To, stride, pad_l, has_bias](Node<S>* self) {
    const auto& g = self->grad;
    std::vector<S> wr;
    rearrange(w.data(), wr);
    std::vector<S> dcols(static_cast<size_t>(Co * K * L));
    std::vector<S> dwr(w.requires_grad() ? static_cast<size_t>(Co * K * Ci) : 0, S(0));
    for (int64_t b = 0; b < B; ++b) {
      const S* gb = g.data() + b * Co * To;
      // Gather dcols from dy.
      for (int64_t co = 0; co < Co; ++co) {
        for (int64_t k = 0; k < K; ++k) {
          S* row = dcols.data() + (co * K + k) * L;
          for (int64_t l = 0; l < L; ++l) {
            const int64_t t = l * stride + k - pad_l;
            row[l] = (t >= 0 && t < To) ? gb[co * To + t] : S(0);
          }
        }
      }
      if (x.requires_grad()) {
        gemm(true, false, Ci, L, Co * K, S(1), wr.data(), Ci, dcols.data(), L, S(1),
             x.grad().data() + b * Ci * L, L);
      }
      if (w.requires_grad()) {
        gemm(false, true, Co * K, Ci, L, S(1), dcols.data(), L, x.data().data() + b * Ci * L, L,
             S(1), dwr.data(), Ci);
      }
      if (has_bias && bias.requires_grad()) {
        auto& gbias = bias.grad();
        for (int64_t co = 0; co < Co; ++co) {
          S acc = S(0);
          for (int64_t t = 0; t < To; ++t) acc += gb[co * To + t];
          gbias[co] += acc;
        }
      }
    }
    if (w.requires_grad()) {
      auto& gw = w.grad();
      for (int64_t ci = 0; ci < Ci; ++ci) {
        for (int64_t co = 0; co < Co; ++co) {
          for (int64_t k = 0; k < K; ++k) {
            gw[(ci * Co + co) * K + k] += dwr[(co * K + k) * Ci + ci];
          }
        }
      }
    }
  });
  return out;
}

// x [B, C, H, W], w [Co, C, Kh, Kw].
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias, int64_t sh,
                 int64_t sw, int64_t ph, int64_t pw) {
  if (x.ndim() != 4 || w.ndim() != 4 || x.dim(1) != w.dim(1)) {
    throw std::invalid_argument("conv2d: expect x [B,C,H,W], w [Co,C,Kh,Kw]");
  }
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Co = w.dim(0), Kh = w.dim(2), Kw = w.dim(3);
  const int64_t Ho = (H + 2 * ph - Kh) / sh + 1;
  const int64_t Wo = (W + 2 * pw - Kw) / sw + 1;
  if (Ho < 1 || Wo < 1) throw std::invalid_argument("conv2d: output would be empty");
  const bool has_bias = bias.defined();
  const int64_t ck = C * Kh * Kw, hw = Ho * Wo;

  Tensor<S> out = Tensor<S>::zeros({B, Co, Ho, Wo});
  {
    std::vector<S> col(static_cast<size_t>(ck * hw));
    for (int64_t b = 0; b < B; ++b) {
      detail::im2col_2d(x.data().data() + b * C * H * W, C, H, W, Kh, Kw, sh, sw, ph, pw, Ho,
                        Wo, col.data());
      gemm(false, false, Co, hw, ck, S(1), w.data().data(), ck, col.data(), hw, S(0),
           out.data().data() + b * Co * hw, hw);
      if (has_bias) {
        S* ob = out.data().data() + b * Co * hw;
        for (int64_t co = 0; co < Co; ++co) {
          const S bv = bias.data()[co];
          for (int64_t t = 0; t < hw; ++t) ob[co * hw + t] += bv;
        }
      }
    }
  }
  std::vector<Tensor<S>> parents = has_bias ? std::vector<Tensor<S>>{x, w, bias}
                                            : std::vector<Tensor<S>>{x, w};
  out.attach(parents, "conv2d",
             [x, w, bias, B, C, H, W, Co, Kh, Kw, sh, sw, ph, pw, Ho, Wo, ck, hw,
              has_bias](Node<S>* self) {
    const auto& g = self->grad;
    std::vector<S> col(static_cast<size_t>(ck * hw));
    std::vector<S> dcol(static_cast<size_t>(ck * hw));
    for (int64_t b = 0; b < B; ++b) {
      const S* gb = g.data() + b * Co * hw;
      if (w.requires_grad()) {
        detail::im2col_2d(x.data().data() + b * C * H * W, C, H, W, Kh, Kw, sh, sw, ph, pw, Ho,
                          Wo, col.data());
        gemm(false, true, Co, ck, hw, S(1), gb, hw, col.data(), hw, S(1), w.grad().data(), ck);
      }
      if (has_bias && bias.requires_grad()) {
        auto& gbias = bias.grad();
        for (int64_t co = 0; co < Co; ++co) {
          S acc = S(0);
          for (int64_t t = 0; t < hw; ++t) acc += gb[co * hw + t];
          gbias[co] += acc;
        }
      }
      if (x.requires_grad()) {
        gemm(true, false, ck, hw, Co, S(1), w.data().data(), ck, gb, hw, S(0), dcol.data(), hw);
        detail::col2im_add_2d(dcol.data(), C, H, W, Kh, Kw, sh, sw, ph, pw, Ho, Wo,
                              x.grad().data() + b * C * H * W);
      }
    }
  });
  return out;
}

// Reflect padding along the last axis (no edge duplication).
template <typename S>
Tensor<S> reflect_pad_last(const Tensor<S>& x, int64_t pl, int64_t pr) {
  const int nd = x.ndim();
  const int64_t T = x.shape()[nd - 1];
  if (pl >= T || pr >= T) throw std::invalid_argument("reflect_pad_last: pad >= length");
  Shape out_shape = x.shape();
  out_shape[nd - 1] = T + pl + pr;
  const int64_t To = out_shape[nd - 1];
  const int64_t rows = x.numel() / T;
  auto src_index = [T](int64_t i) {
    if (i < 0) return -i;
    if (i >= T) return 2 * (T - 1) - i;
    return i;
  };
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const auto& xv = x.data();
  auto& ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xp = xv.data() + r * T;
    S* op = ov.data() + r * To;
    for (int64_t i = 0; i < To; ++i) op[i] = xp[src_index(i - pl)];
  }
  out.attach({x}, "reflect_pad_last", [x, rows, T, To, pl, src_index](Node<S>* self) {
    const auto& g = self->grad;
    auto& gx = x.grad();
    for (int64_t r = 0; r < rows; ++r) {
      const S* gp = g.data() + r * To;
      S* xp = gx.data() + r * T;
      for (int64_t i = 0; i < To; ++i) xp[src_index(i - pl)] += gp[i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization / attention
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     double eps = 1e-5) {
  const int64_t d = x.shape()[x.ndim() - 1];
  if (gamma.numel() != d || beta.numel() != d) {
    throw std::invalid_argument("layer_norm: gamma/beta must be [D]");
  }
  const int64_t rows = x.numel() / d;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  auto mu = std::make_shared<std::vector<S>>(rows);
  auto rstd = std::make_shared<std::vector<S>>(rows);
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  auto& ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xp = xv.data() + r * d;
    S m = S(0);
    for (int64_t i = 0; i < d; ++i) m += xp[i];
    m /= static_cast<S>(d);
    S var = S(0);
    for (int64_t i = 0; i < d; ++i) var += (xp[i] - m) * (xp[i] - m);
    var /= static_cast<S>(d);
    const S rs = S(1) / std::sqrt(var + static_cast<S>(eps));
    (*mu)[r] = m;
    (*rstd)[r] = rs;
    S* op = ov.data() + r * d;
    for (int64_t i = 0; i < d; ++i) op[i] = gv[i] * (xp[i] - m) * rs + bv[i];
  }
  out.attach({x, gamma, beta}, "layer_norm", [x, gamma, beta, mu, rstd, rows, d](Node<S>* self) {
    const auto& g = self->grad;
    const auto& xv2 = x.data();
    const auto& gv2 = gamma.data();
    for (int64_t r = 0; r < rows; ++r) {
      const S* xp = xv2.data() + r * d;
      const S* gp = g.data() + r * d;
      const S m = (*mu)[r], rs = (*rstd)[r];
      if (gamma.requires_grad() || beta.requires_grad()) {
        auto& gg = gamma.grad();
        auto& gb = beta.grad();
        for (int64_t i = 0; i < d; ++i) {
          gg[i] += gp[i] * (xp[i] - m) * rs;
          gb[i] += gp[i];
        }
      }
      if (x.requires_grad()) {
        // dx = rs * (h - mean(h) - xhat * mean(h*xhat)), h = g*gamma
        S mean_h = S(0), mean_hx = S(0);
        for (int64_t i = 0; i < d; ++i) {
          const S h = gp[i] * gv2[i];
          const S xh = (xp[i] - m) * rs;
          mean_h += h;
          mean_hx += h * xh;
        }
        mean_h /= static_cast<S>(d);
        mean_hx /= static_cast<S>(d);
        S* gx = x.grad().data() + r * d;
        for (int64_t i = 0; i < d; ++i) {
          const S h = gp[i] * gv2[i];
          const S xh = (xp[i] - m) * rs;
          gx[i] += rs * (h - mean_h - xh * mean_hx);
        }
      }
    }
  });
  return out;
}

template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  const int64_t d = x.shape()[x.ndim() - 1];
  const int64_t rows = x.numel() / d;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* xp = xv.data() + r * d;
    S* op = ov.data() + r * d;
    S mx = xp[0];
    for (int64_t i = 1; i < d; ++i) mx = std::max(mx, xp[i]);
    S z = S(0);
    for (int64_t i = 0; i < d; ++i) {
      op[i] = std::exp(xp[i] - mx);
      z += op[i];
    }
    const S inv = S(1) / z;
    for (int64_t i = 0; i < d; ++i) op[i] *= inv;
  }
  out.attach({x}, "softmax", [x, rows, d](Node<S>* self) {
    const auto& g = self->grad;
    const auto& yv = self->value;
    auto& gx = x.grad();
    for (int64_t r = 0; r < rows; ++r) {
      const S* gp = g.data() + r * d;
      const S* yp = yv.data() + r * d;
      S dot = S(0);
      for (int64_t i = 0; i < d; ++i) dot += gp[i] * yp[i];
      S* gxp = gx.data() + r * d;
      for (int64_t i = 0; i < d; ++i) gxp[i] += yp[i] * (gp[i] - dot);
    }
  });
  return out;
}

// Rotary positional embedding over the last two dims [L, D] (D even): pairs
// (2i, 2i+1) rotated by theta = pos * base^(-2i/D). Norm-preserving per row.
template <typename S>
Tensor<S> rope(const Tensor<S>& x, double base = 10000.0, int64_t pos_offset = 0) {
  const int nd = x.ndim();
  if (nd < 2) throw std::invalid_argument("rope: rank < 2");
  const int64_t d = x.shape()[nd - 1];
  const int64_t l = x.shape()[nd - 2];
  if (d % 2 != 0) throw std::invalid_argument("rope: head dimension must be even");
  const int64_t batch = x.numel() / (l * d);
  const int64_t half = d / 2;

  auto cs = std::make_shared<std::vector<S>>(static_cast<size_t>(l * half * 2));
  for (int64_t p = 0; p < l; ++p) {
    for (int64_t i = 0; i < half; ++i) {
      const double theta = static_cast<double>(p + pos_offset) *
                           std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      (*cs)[(p * half + i) * 2] = static_cast<S>(std::cos(theta));
      (*cs)[(p * half + i) * 2 + 1] = static_cast<S>(std::sin(theta));
    }
  }

  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const auto& xv = x.data();
  auto& ov = out.data();
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t p = 0; p < l; ++p) {
      const S* xp = xv.data() + (b * l + p) * d;
      S* op = ov.data() + (b * l + p) * d;
      for (int64_t i = 0; i < half; ++i) {
        const S c = (*cs)[(p * half + i) * 2];
        const S s = (*cs)[(p * half + i) * 2 + 1];
        op[2 * i] = xp[2 * i] * c - xp[2 * i + 1] * s;
        op[2 * i + 1] = xp[2 * i] * s + xp[2 * i + 1] * c;
      }
    }
  }
  out.attach({x}, "rope", [x, cs, batch, l, d, half](Node<S>* self) {
    const auto& g = self->grad;
    auto& gx = x.grad();
    for (int64_t b = 0; b < batch; ++b) {
      for (int64_t p = 0; p < l; ++p) {
        const S* gp = g.data() + (b * l + p) * d;
        S* gxp = gx.data() + (b * l + p) * d;
        for (int64_t i = 0; i < half; ++i) {
          const S c = (*cs)[(p * half + i) * 2];
          const S s = (*cs)[(p * half + i) * 2 + 1];
          gxp[2 * i] += gp[2 * i] * c + gp[2 * i + 1] * s;
          gxp[2 * i + 1] += -gp[2 * i] * s + gp[2 * i + 1] * c;
        }
      }
    }
  });
  return out;
}

// Weight normalization: w = g * v / ||v|| with the norm over each leading-dim
// slice of v. v is [Co, ...], g is [Co].
template <typename S>
Tensor<S> weight_norm(const Tensor<S>& v, const Tensor<S>& g) {
  const int64_t co = v.dim(0);
  if (g.numel() != co) throw std::invalid_argument("weight_norm: g must be [Co]");
  const int64_t per = v.numel() / co;
  Tensor<S> out = Tensor<S>::zeros(v.shape());
  auto norms = std::make_shared<std::vector<S>>(co);
  const auto& vv = v.data();
  const auto& gv = g.data();
  auto& ov = out.data();
  for (int64_t c = 0; c < co; ++c) {
    const S* vp = vv.data() + c * per;
    S n2 = S(0);
    for (int64_t i = 0; i < per; ++i) n2 += vp[i] * vp[i];
    const S n = std::sqrt(n2) + S(1e-12);
    (*norms)[c] = n;
    const S scale = gv[c] / n;
    S* op = ov.data() + c * per;
    for (int64_t i = 0; i < per; ++i) op[i] = scale * vp[i];
  }
  out.attach({v, g}, "weight_norm", [v, g, norms, co, per](Node<S>* self) {
    const auto& gr = self->grad;
    const auto& vv2 = v.data();
    const auto& gv2 = g.data();
    for (int64_t c = 0; c < co; ++c) {
      const S* vp = vv2.data() + c * per;
      const S* gp = gr.data() + c * per;
      const S n = (*norms)[c];
      S dot = S(0);
      for (int64_t i = 0; i < per; ++i) dot += gp[i] * vp[i];
      if (g.requires_grad()) g.grad()[c] += dot / n;
      if (v.requires_grad()) {
        const S scale = gv2[c] / n;
        const S corr = dot / (n * n);
        S* gvp = v.grad().data() + c * per;
        for (int64_t i = 0; i < per; ++i) gvp[i] += scale * (gp[i] - corr * vp[i]);
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable STFT
// ---------------------------------------------------------------------------

// x [B, T] -> [B, 2, bins, frames] (channel 0 = real, 1 = imag). Hann window,
// reflect center padding; same frame rule as dualse::stft. window_size must be
// a power of two.
template <typename S>
Tensor<S> stft_tensor(const Tensor<S>& x, int64_t window_size, int64_t hop) {
  if (x.ndim() != 2) throw std::invalid_argument("stft_tensor: expect [B, T]");
  if (!is_power_of_two(window_size)) {
    throw std::invalid_argument("stft_tensor: window must be a power of two");
  }
  const int64_t B = x.dim(0), T = x.dim(1);
  if (T < window_size / 2 + 1) {
    throw std::invalid_argument("stft_tensor: signal too short for window " +
                                std::to_string(window_size));
  }
  const int64_t bins = window_size / 2 + 1;
  const int64_t frames = 1 + (T + 2 * (window_size / 2) - window_size) / hop;

  auto window = std::make_shared<std::vector<S>>(static_cast<size_t>(window_size));
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  for (int64_t i = 0; i < window_size; ++i) {
    (*window)[i] = static_cast<S>(0.5 * (1.0 - std::cos(kTwoPi * i / window_size)));
  }
  auto reflect = [T](int64_t i) {
    if (T == 1) return int64_t{0};
    const int64_t period = 2 * (T - 1);
    i = ((i % period) + period) % period;
    return i < T ? i : period - i;
  };

  Tensor<S> out = Tensor<S>::zeros({B, 2, bins, frames});
  const auto& xv = x.data();
  auto& ov = out.data();
  std::vector<std::complex<S>> buf(static_cast<size_t>(window_size));
  const int64_t offset = -(window_size / 2);
  for (int64_t b = 0; b < B; ++b) {
    const S* xp = xv.data() + b * T;
    S* re = ov.data() + b * 2 * bins * frames;
    S* im = re + bins * frames;
    for (int64_t f = 0; f < frames; ++f) {
      const int64_t start = offset + f * hop;
      for (int64_t i = 0; i < window_size; ++i) {
        buf[i] = {(*window)[i] * xp[reflect(start + i)], S(0)};
      }
      fft_radix2(buf.data(), window_size, -1);
      for (int64_t k = 0; k < bins; ++k) {
        re[k * frames + f] = buf[k].real();
        im[k * frames + f] = buf[k].imag();
      }
    }
  }
  out.attach({x}, "stft",
             [x, window, reflect, B, T, bins, frames, window_size, hop, offset](Node<S>* self) {
    const auto& g = self->grad;
    auto& gx = x.grad();
    std::vector<std::complex<S>> buf(static_cast<size_t>(window_size));
    for (int64_t b = 0; b < B; ++b) {
      const S* gre = g.data() + b * 2 * bins * frames;
      const S* gim = gre + bins * frames;
      S* gxp = gx.data() + b * T;
      for (int64_t f = 0; f < frames; ++f) {
        // Adjoint of the one-sided DFT: zero-pad grads past Nyquist, run the
        // reverse-direction FFT, take the real part.
        for (int64_t k = 0; k < bins; ++k) buf[k] = {gre[k * frames + f], gim[k * frames + f]};
        for (int64_t k = bins; k < window_size; ++k) buf[k] = {S(0), S(0)};
        fft_radix2(buf.data(), window_size, +1);
        const int64_t start = offset + f * hop;
        for (int64_t i = 0; i < window_size; ++i) {
          gxp[reflect(start + i)] += (*window)[i] * buf[i].real();
        }
      }
    }
  });
  return out;
}

// Applies a fixed (non-trainable) filterbank W [M, F] to x [B, F, T].
template <typename S>
Tensor<S> apply_filterbank(std::shared_ptr<const std::vector<S>> w, int64_t m, int64_t f,
                           const Tensor<S>& x) {
  if (x.ndim() != 3 || x.dim(1) != f) {
    throw std::invalid_argument("apply_filterbank: expect x [B, F, T]");
  }
  const int64_t B = x.dim(0), T = x.dim(2);
  Tensor<S> out = Tensor<S>::zeros({B, m, T});
  for (int64_t b = 0; b < B; ++b) {
    gemm(false, false, m, T, f, S(1), w->data(), f, x.data().data() + b * f * T, T, S(0),
         out.data().data() + b * m * T, T);
  }
  out.attach({x}, "apply_filterbank", [x, w, m, f, B, T](Node<S>* self) {
    const auto& g = self->grad;
    for (int64_t b = 0; b < B; ++b) {
      gemm(true, false, f, T, m, S(1), w->data(), f, g.data() + b * m * T, T, S(1),
           x.grad().data() + b * f * T, T);
    }
  });
  return out;
}

}  // namespace dualse::ag
