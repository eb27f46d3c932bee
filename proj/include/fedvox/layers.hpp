#pragma once

// 2D layer primitives with hand-derived backward rules. All activations are
// NCHW row-major. Convolutions are stride-1 "same" with odd kernels; the
// forward/backward GEMMs run on Eigen maps with the im2col buffer chunked so
// peak memory stays bounded at any resolution.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "fedvox/params.hpp"
#include "fedvox/tensor.hpp"

namespace fedvox {

struct Conv2dDims {
  int64_t N = 0, C = 0, H = 0, W = 0, F = 0, k = 0;
};

template <typename S>
struct Conv2dCtx {
  Tensor<S> input;
  Conv2dDims dims;
};

namespace detail {

// Chunking is by output rows so every (c, ki, kj) slot of the col buffer is a
// contiguous run of whole image rows. ~16 MB of f32 col buffer at most.
inline int64_t conv_chunk_rows(int64_t ckk, int64_t H, int64_t W) {
  const int64_t budget = int64_t(4) << 20;
  return std::max<int64_t>(1, std::min(H, budget / std::max<int64_t>(1, ckk * W)));
}

// col is row-major (ckk x nrows*W): one row per kernel tap, filled with
// shifted image rows; out-of-image taps are zero (same padding).
template <typename S>
void im2col_rows(const S* x, int64_t C, int64_t H, int64_t W, int64_t k, int64_t oh0,
                 int64_t nrows, S* col) {
  const int64_t pad = k / 2;
  for (int64_t c = 0; c < C; ++c) {
    const S* plane = x + c * H * W;
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj) {
        const int64_t shift = kj - pad;
        const int64_t lead = std::max<int64_t>(0, -shift);
        const int64_t span = W - std::abs(shift);
        S* dst = col + ((c * k + ki) * k + kj) * nrows * W;
        for (int64_t r = 0; r < nrows; ++r, dst += W) {
          const int64_t ih = oh0 + r - pad + ki;
          if (ih < 0 || ih >= H) {
            std::fill_n(dst, W, S(0));
            continue;
          }
          if (lead) std::fill_n(dst, lead, S(0));
          std::copy_n(plane + ih * W + std::max<int64_t>(0, shift), span, dst + lead);
          if (shift > 0) std::fill_n(dst + lead + span, shift, S(0));
        }
      }
    }
  }
}

// Transpose of im2col_rows: accumulates the column gradient into gx.
template <typename S>
void col2im_rows(const S* col, int64_t C, int64_t H, int64_t W, int64_t k, int64_t oh0,
                 int64_t nrows, S* gx) {
  const int64_t pad = k / 2;
  for (int64_t c = 0; c < C; ++c) {
    S* plane = gx + c * H * W;
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj) {
        const int64_t shift = kj - pad;
        const int64_t lead = std::max<int64_t>(0, -shift);
        const int64_t span = W - std::abs(shift);
        const S* src = col + ((c * k + ki) * k + kj) * nrows * W;
        for (int64_t r = 0; r < nrows; ++r, src += W) {
          const int64_t ih = oh0 + r - pad + ki;
          if (ih < 0 || ih >= H) continue;
          S* row = plane + ih * W + std::max<int64_t>(0, shift);
          const S* s = src + lead;
          for (int64_t i = 0; i < span; ++i) row[i] += s[i];
        }
      }
    }
  }
}

}  // namespace detail

// x [N,C,H,W], w [F,C,k,k], b [F] -> [N,F,H,W].
template <typename S>
Tensor<S> conv2d_forward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                         Conv2dCtx<S>* ctx = nullptr) {
  FV_CHECK(x.shape.size() == 4, "conv2d: input must be NCHW, rank ", x.shape.size());
  FV_CHECK(w.shape.size() == 4, "conv2d: weight must be FCkk, rank ", w.shape.size());
  const int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int64_t F = w.shape[0], k = w.shape[2];
  FV_CHECK(w.shape[1] == C, "conv2d: weight expects ", w.shape[1], " input channels, got ", C);
  FV_CHECK(w.shape[3] == k && (k % 2) == 1, "conv2d: kernel must be odd square, got ",
           w.shape[2], "x", w.shape[3]);
  FV_CHECK(b.shape.size() == 1 && b.shape[0] == F, "conv2d: bias length must equal filter count");

  Tensor<S> y({N, F, H, W});
  const int64_t ckk = C * k * k;
  const int64_t hw = H * W;
  const int64_t rows_per_chunk = detail::conv_chunk_rows(ckk, H, W);
  ConstMatrixMapRM<S> wm(w.ptr(), F, ckk);
  std::vector<S> colbuf(static_cast<size_t>(ckk * rows_per_chunk * W));

  for (int64_t n = 0; n < N; ++n) {
    const S* xs = x.ptr() + n * C * hw;
    MatrixMapRM<S> ym(y.ptr() + n * F * hw, F, hw);
    for (int64_t oh0 = 0; oh0 < H; oh0 += rows_per_chunk) {
      const int64_t nrows = std::min(rows_per_chunk, H - oh0);
      detail::im2col_rows(xs, C, H, W, k, oh0, nrows, colbuf.data());
      ConstMatrixMapRM<S> col(colbuf.data(), ckk, nrows * W);
      ym.middleCols(oh0 * W, nrows * W).noalias() = wm * col;
    }
    for (int64_t f = 0; f < F; ++f) ym.row(f).array() += b.data[static_cast<size_t>(f)];
  }

  if (ctx) {
    ctx->input = x;
    ctx->dims = {N, C, H, W, F, k};
  }
  return y;
}

// Accumulates into grad_w / grad_b, returns grad wrt input.
template <typename S>
Tensor<S> conv2d_backward(const Tensor<S>& grad_out, const Conv2dCtx<S>& ctx, const Tensor<S>& w,
                          Tensor<S>& grad_w, Tensor<S>& grad_b) {
  const auto& d = ctx.dims;
  FV_CHECK(grad_out.shape == std::vector<int64_t>({d.N, d.F, d.H, d.W}),
           "conv2d_backward: grad_out shape mismatch");
  const int64_t ckk = d.C * d.k * d.k;
  const int64_t hw = d.H * d.W;
  const int64_t rows_per_chunk = detail::conv_chunk_rows(ckk, d.H, d.W);

  Tensor<S> grad_x({d.N, d.C, d.H, d.W});
  ConstMatrixMapRM<S> wm(w.ptr(), d.F, ckk);
  MatrixMapRM<S> gwm(grad_w.ptr(), d.F, ckk);
  std::vector<S> colbuf(static_cast<size_t>(ckk * rows_per_chunk * d.W));
  std::vector<S> gcolbuf(static_cast<size_t>(ckk * rows_per_chunk * d.W));

  for (int64_t n = 0; n < d.N; ++n) {
    const S* xs = ctx.input.ptr() + n * d.C * hw;
    ConstMatrixMapRM<S> gym(grad_out.ptr() + n * d.F * hw, d.F, hw);
    S* gxs = grad_x.ptr() + n * d.C * hw;
    for (int64_t oh0 = 0; oh0 < d.H; oh0 += rows_per_chunk) {
      const int64_t nrows = std::min(rows_per_chunk, d.H - oh0);
      detail::im2col_rows(xs, d.C, d.H, d.W, d.k, oh0, nrows, colbuf.data());
      ConstMatrixMapRM<S> col(colbuf.data(), ckk, nrows * d.W);
      auto gy_chunk = gym.middleCols(oh0 * d.W, nrows * d.W);
      gwm.noalias() += gy_chunk * col.transpose();
      MatrixMapRM<S> gcol(gcolbuf.data(), ckk, nrows * d.W);
      gcol.noalias() = wm.transpose() * gy_chunk;
      detail::col2im_rows(gcolbuf.data(), d.C, d.H, d.W, d.k, oh0, nrows, gxs);
    }
    for (int64_t f = 0; f < d.F; ++f) grad_b.data[static_cast<size_t>(f)] += gym.row(f).sum();
  }
  return grad_x;
}

// ---------------------------------------------------------------------------

template <typename S>
struct BatchNormCtx {
  Tensor<S> input;
  std::vector<S> mean, inv_std;  // batch stats in train mode, running-derived in eval
  bool training = true;
};

// Normalizes with biased batch variance; running_var is updated with the
// unbiased estimate. momentum follows the convention
// running <- (1 - momentum) * running + momentum * batch.
template <typename S>
Tensor<S> batchnorm2d_forward(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                              Tensor<S>& running_mean, Tensor<S>& running_var, bool training,
                              double momentum, double eps, BatchNormCtx<S>* ctx = nullptr) {
  FV_CHECK(x.shape.size() == 4, "batchnorm2d: input must be NCHW");
  const int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  FV_CHECK(gamma.numel() == C && beta.numel() == C && running_mean.numel() == C &&
               running_var.numel() == C,
           "batchnorm2d: parameter length must equal channel count ", C);
  const int64_t hw = H * W;
  const int64_t n_per_c = N * hw;

  Tensor<S> y(x.shape);
  std::vector<S> mean(static_cast<size_t>(C)), inv_std(static_cast<size_t>(C));

  for (int64_t c = 0; c < C; ++c) {
    S mu, var;
    if (training) {
      S sum = S(0), sumsq = S(0);
      for (int64_t n = 0; n < N; ++n) {
        ConstArrayMap<S> plane(x.ptr() + (n * C + c) * hw, hw);
        sum += plane.sum();
        sumsq += plane.square().sum();
      }
      mu = sum / S(n_per_c);
      var = sumsq / S(n_per_c) - mu * mu;
      if (var < S(0)) var = S(0);
      const S unbiased = n_per_c > 1 ? var * S(n_per_c) / S(n_per_c - 1) : var;
      running_mean.data[c] = S((1.0 - momentum)) * running_mean.data[c] + S(momentum) * mu;
      running_var.data[c] = S((1.0 - momentum)) * running_var.data[c] + S(momentum) * unbiased;
    } else {
      mu = running_mean.data[c];
      var = running_var.data[c];
    }
    const S istd = S(1) / std::sqrt(var + S(eps));
    mean[c] = mu;
    inv_std[c] = istd;
    const S g = gamma.data[c], bt = beta.data[c];
    for (int64_t n = 0; n < N; ++n) {
      ConstArrayMap<S> xin(x.ptr() + (n * C + c) * hw, hw);
      ArrayMap<S> yout(y.ptr() + (n * C + c) * hw, hw);
      yout = (xin - mu) * (g * istd) + bt;
    }
  }

  if (ctx) {
    ctx->input = x;
    ctx->mean = std::move(mean);
    ctx->inv_std = std::move(inv_std);
    ctx->training = training;
  }
  return y;
}

template <typename S>
Tensor<S> batchnorm2d_backward(const Tensor<S>& grad_out, const BatchNormCtx<S>& ctx,
                               const Tensor<S>& gamma, Tensor<S>& grad_gamma,
                               Tensor<S>& grad_beta) {
  const auto& x = ctx.input;
  const int64_t N = x.shape[0], C = x.shape[1], hw = x.shape[2] * x.shape[3];
  const int64_t n_per_c = N * hw;
  Tensor<S> grad_x(x.shape);

  for (int64_t c = 0; c < C; ++c) {
    const S mu = ctx.mean[c], istd = ctx.inv_std[c], g = gamma.data[c];
    S dbeta = S(0), dgamma = S(0);
    for (int64_t n = 0; n < N; ++n) {
      ConstArrayMap<S> dy(grad_out.ptr() + (n * C + c) * hw, hw);
      ConstArrayMap<S> xin(x.ptr() + (n * C + c) * hw, hw);
      dbeta += dy.sum();
      dgamma += (dy * (xin - mu) * istd).sum();
    }
    grad_beta.data[c] += dbeta;
    grad_gamma.data[c] += dgamma;
    if (ctx.training) {
      const S k1 = dbeta / S(n_per_c);
      const S k2 = dgamma / S(n_per_c);
      for (int64_t n = 0; n < N; ++n) {
        ConstArrayMap<S> dy(grad_out.ptr() + (n * C + c) * hw, hw);
        ConstArrayMap<S> xin(x.ptr() + (n * C + c) * hw, hw);
        ArrayMap<S> dx(grad_x.ptr() + (n * C + c) * hw, hw);
        dx = (g * istd) * (dy - k1 - (xin - mu) * istd * k2);
      }
    } else {
      for (int64_t n = 0; n < N; ++n) {
        ConstArrayMap<S> dy(grad_out.ptr() + (n * C + c) * hw, hw);
        ArrayMap<S> dx(grad_x.ptr() + (n * C + c) * hw, hw);
        dx = dy * (g * istd);
      }
    }
  }
  return grad_x;
}

// ---------------------------------------------------------------------------

template <typename S>
struct ReluCtx {
  Tensor<S> output;
};

template <typename S>
Tensor<S> relu_forward(const Tensor<S>& x, ReluCtx<S>* ctx = nullptr) {
  Tensor<S> y(x.shape);
  y.flat() = x.flat().max(S(0));
  if (ctx) ctx->output = y;
  return y;
}

template <typename S>
Tensor<S> relu_backward(const Tensor<S>& grad_out, const ReluCtx<S>& ctx) {
  Tensor<S> gx(grad_out.shape);
  gx.flat() = (ctx.output.flat() > S(0)).select(grad_out.flat(), S(0));
  return gx;
}

// ---------------------------------------------------------------------------

struct MaxPoolCtx {
  std::vector<int64_t> argmax;  // absolute input offsets; ties go to the first max
  std::vector<int64_t> in_shape;
};

// 2x2, stride 2. H and W must be even.
template <typename S>
Tensor<S> maxpool2d_forward(const Tensor<S>& x, MaxPoolCtx* ctx = nullptr) {
  FV_CHECK(x.shape.size() == 4, "maxpool2d: input must be NCHW");
  const int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  FV_CHECK(H % 2 == 0, "maxpool2d: height ", H, " not divisible by 2");
  FV_CHECK(W % 2 == 0, "maxpool2d: width ", W, " not divisible by 2");
  const int64_t Ho = H / 2, Wo = W / 2;
  Tensor<S> y({N, C, Ho, Wo});
  std::vector<int64_t> argmax(static_cast<size_t>(y.numel()));

  int64_t o = 0;
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const S* plane = x.ptr() + nc * H * W;
    for (int64_t oh = 0; oh < Ho; ++oh) {
      for (int64_t ow = 0; ow < Wo; ++ow) {
        const int64_t base = (2 * oh) * W + 2 * ow;
        int64_t best = base;
        S bv = plane[base];
        const int64_t cand[3] = {base + 1, base + W, base + W + 1};
        for (int64_t idx : cand) {
          if (plane[idx] > bv) {
            bv = plane[idx];
            best = idx;
          }
        }
        y.data[static_cast<size_t>(o)] = bv;
        argmax[static_cast<size_t>(o)] = nc * H * W + best;
        ++o;
      }
    }
  }
  if (ctx) {
    ctx->argmax = std::move(argmax);
    ctx->in_shape = {N, C, H, W};
  }
  return y;
}

template <typename S>
Tensor<S> maxpool2d_backward(const Tensor<S>& grad_out, const MaxPoolCtx& ctx) {
  Tensor<S> gx(ctx.in_shape);
  for (int64_t i = 0; i < grad_out.numel(); ++i) {
    gx.data[static_cast<size_t>(ctx.argmax[static_cast<size_t>(i)])] += grad_out.data[static_cast<size_t>(i)];
  }
  return gx;
}

// ---------------------------------------------------------------------------

// Nearest-neighbour x2.
template <typename S>
Tensor<S> upsample2d_forward(const Tensor<S>& x) {
  FV_CHECK(x.shape.size() == 4, "upsample2d: input must be NCHW");
  const int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  Tensor<S> y({N, C, 2 * H, 2 * W});
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const S* in = x.ptr() + nc * H * W;
    S* out = y.ptr() + nc * 4 * H * W;
    for (int64_t h = 0; h < 2 * H; ++h) {
      const S* src = in + (h / 2) * W;
      S* dst = out + h * 2 * W;
      for (int64_t w = 0; w < W; ++w) {
        dst[2 * w] = src[w];
        dst[2 * w + 1] = src[w];
      }
    }
  }
  return y;
}

// Each input cell receives the sum of its 2x2 replica gradients.
template <typename S>
Tensor<S> upsample2d_backward(const Tensor<S>& grad_out) {
  FV_CHECK(grad_out.shape.size() == 4 && grad_out.shape[2] % 2 == 0 && grad_out.shape[3] % 2 == 0,
           "upsample2d_backward: grad shape must have even H and W");
  const int64_t N = grad_out.shape[0], C = grad_out.shape[1];
  const int64_t H = grad_out.shape[2] / 2, W = grad_out.shape[3] / 2;
  Tensor<S> gx({N, C, H, W});
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const S* g = grad_out.ptr() + nc * 4 * H * W;
    S* out = gx.ptr() + nc * H * W;
    for (int64_t h = 0; h < H; ++h) {
      const S* r0 = g + (2 * h) * 2 * W;
      const S* r1 = g + (2 * h + 1) * 2 * W;
      S* dst = out + h * W;
      for (int64_t w = 0; w < W; ++w) {
        dst[w] = r0[2 * w] + r0[2 * w + 1] + r1[2 * w] + r1[2 * w + 1];
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------

// Channel concat of two NCHW tensors with equal N, H, W.
template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  FV_CHECK(a.shape.size() == 4 && b.shape.size() == 4 && a.shape[0] == b.shape[0] &&
               a.shape[2] == b.shape[2] && a.shape[3] == b.shape[3],
           "concat_channels: N/H/W mismatch");
  const int64_t N = a.shape[0], Ca = a.shape[1], Cb = b.shape[1];
  const int64_t hw = a.shape[2] * a.shape[3];
  Tensor<S> y({N, Ca + Cb, a.shape[2], a.shape[3]});
  for (int64_t n = 0; n < N; ++n) {
    std::copy_n(a.ptr() + n * Ca * hw, Ca * hw, y.ptr() + n * (Ca + Cb) * hw);
    std::copy_n(b.ptr() + n * Cb * hw, Cb * hw, y.ptr() + n * (Ca + Cb) * hw + Ca * hw);
  }
  return y;
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> split_channels(const Tensor<S>& g, int64_t Ca) {
  const int64_t N = g.shape[0], C = g.shape[1], Cb = C - Ca;
  const int64_t hw = g.shape[2] * g.shape[3];
  Tensor<S> ga({N, Ca, g.shape[2], g.shape[3]});
  Tensor<S> gb({N, Cb, g.shape[2], g.shape[3]});
  for (int64_t n = 0; n < N; ++n) {
    std::copy_n(g.ptr() + n * C * hw, Ca * hw, ga.ptr() + n * Ca * hw);
    std::copy_n(g.ptr() + n * C * hw + Ca * hw, Cb * hw, gb.ptr() + n * Cb * hw);
  }
  return {std::move(ga), std::move(gb)};
}

// ---------------------------------------------------------------------------

template <typename S>
struct L1LossCtx {
  Tensor<S> diff;  // pred - target
};

// Mean absolute error over all elements.
template <typename S>
S l1_loss(const Tensor<S>& pred, const Tensor<S>& target, L1LossCtx<S>* ctx = nullptr) {
  FV_CHECK(pred.shape == target.shape, "l1_loss: shape mismatch");
  Tensor<S> diff(pred.shape);
  diff.flat() = pred.flat() - target.flat();
  const S loss = diff.flat().abs().sum() / S(diff.numel());
  if (ctx) ctx->diff = std::move(diff);
  return loss;
}

// d/dpred mean|pred - target| = sign(pred - target) / n, sign(0) = 0.
template <typename S>
Tensor<S> l1_loss_backward(const L1LossCtx<S>& ctx) {
  Tensor<S> g(ctx.diff.shape);
  const S inv_n = S(1) / S(ctx.diff.numel());
  for (int64_t i = 0; i < g.numel(); ++i) {
    const S d = ctx.diff.data[static_cast<size_t>(i)];
    g.data[static_cast<size_t>(i)] = d > S(0) ? inv_n : (d < S(0) ? -inv_n : S(0));
  }
  return g;
}

// ---------------------------------------------------------------------------

// (mu/2) * ||w - w_ref||^2 over a flattened parameter vector; the gradient
// mu * (w - w_ref) is accumulated into grad.
template <typename S>
S prox_penalty(const std::vector<S>& w, const std::vector<S>& w_ref, S mu, std::vector<S>& grad) {
  FV_CHECK(w.size() == w_ref.size() && w.size() == grad.size(),
           "prox_penalty: length mismatch");
  FV_CHECK(mu >= S(0), "prox_penalty: mu must be >= 0, got ", mu);
  S acc = S(0);
  for (size_t i = 0; i < w.size(); ++i) {
    const S d = w[i] - w_ref[i];
    acc += d * d;
    grad[i] += mu * d;
  }
  return (mu / S(2)) * acc;
}

// Per-tensor variant used inside local training.
template <typename S>
S prox_penalty_accumulate(const Tensor<S>& value, const Tensor<S>& anchor, S mu, Tensor<S>& grad) {
  FV_CHECK(value.shape == anchor.shape, "prox_penalty: anchor shape mismatch");
  S acc = S(0);
  for (int64_t i = 0; i < value.numel(); ++i) {
    const S d = value.data[static_cast<size_t>(i)] - anchor.data[static_cast<size_t>(i)];
    acc += d * d;
    grad.data[static_cast<size_t>(i)] += mu * d;
  }
  return (mu / S(2)) * acc;
}

// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename S>
struct AdamState {
  Tensor<S> m, v;
  int64_t step = 0;
  AdamConfig cfg;

  AdamState() = default;
  AdamState(const std::vector<int64_t>& shape, AdamConfig c)
      : m(Tensor<S>::zeros(shape)), v(Tensor<S>::zeros(shape)), cfg(c) {}
};

// Bias-corrected Adam. Aborts on non-finite gradients, naming the parameter.
template <typename S>
void adam_step(Parameter<S>& p, AdamState<S>& st, const std::string& name) {
  FV_RUNTIME_CHECK(p.grad.all_finite(), "adam_step: non-finite gradient in parameter '", name, "'");
  st.step += 1;
  const S b1 = S(st.cfg.beta1), b2 = S(st.cfg.beta2);
  const S bc1 = S(1) - std::pow(b1, S(st.step));
  const S bc2 = S(1) - std::pow(b2, S(st.step));
  const S lr = S(st.cfg.lr), eps = S(st.cfg.eps);
  for (int64_t i = 0; i < p.value.numel(); ++i) {
    const size_t j = static_cast<size_t>(i);
    const S g = p.grad.data[j];
    st.m.data[j] = b1 * st.m.data[j] + (S(1) - b1) * g;
    st.v.data[j] = b2 * st.v.data[j] + (S(1) - b2) * g * g;
    const S mhat = st.m.data[j] / bc1;
    const S vhat = st.v.data[j] / bc2;
    p.value.data[j] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

}  // namespace fedvox
