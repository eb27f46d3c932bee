#pragma once

// Residual U-Net for 2D slice translation. Encoder: stem conv + per-level
// residual blocks with max-pool descent that doubles filters via a 3x3 conv;
// decoder: nearest upsample, long-skip concatenation, one fusing conv that
// halves filters, then residual blocks; final 1x1 projection to one channel.
// Residual blocks are conv-BN-ReLU twice plus an identity shortcut, so block
// input and output channel counts are always equal.

#include <cstdint>
#include <string>
#include <vector>

#include "fedvox/layers.hpp"
#include "fedvox/params.hpp"
#include "fedvox/rng.hpp"

namespace fedvox {

struct UNetConfig {
  int64_t input_size = 64;
  int64_t depth = 3;           // number of pool/upsample levels
  int64_t base_channels = 8;
  int64_t stem_kernel = 7;
  int64_t blocks_per_level = 1;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  static UNetConfig desk() { return UNetConfig{64, 3, 8, 7, 1}; }
  static UNetConfig paper() { return UNetConfig{256, 5, 32, 7, 1}; }

  void validate() const {
    FV_CHECK(depth >= 1, "unet: depth must be >= 1, got ", depth);
    FV_CHECK(base_channels >= 1, "unet: base_channels must be >= 1");
    FV_CHECK(blocks_per_level >= 1, "unet: blocks_per_level must be >= 1");
    FV_CHECK(stem_kernel >= 1 && stem_kernel % 2 == 1, "unet: stem_kernel must be odd, got ",
             stem_kernel);
    FV_CHECK(input_size >= (int64_t(1) << depth), "unet: input_size ", input_size,
             " too small for depth ", depth);
    FV_CHECK(input_size % (int64_t(1) << depth) == 0, "unet: input_size ", input_size,
             " not divisible by 2^depth = ", (int64_t(1) << depth));
  }
};

template <typename S>
struct ConvUnit {
  Parameter<S> w, b;
  std::string name;

  void init(int64_t F, int64_t C, int64_t k, int32_t conv_index, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(C * k * k));  // Kaiming uniform, fan-in
    w = Parameter<S>(Tensor<S>({F, C, k, k}), LayerTag{ParamKind::ConvWeight, conv_index});
    for (auto& v : w.value.data) v = S(rng.uniform(-bound, bound));
    b = Parameter<S>(Tensor<S>({F}), LayerTag{ParamKind::ConvBias, conv_index});
  }
};

template <typename S>
struct BNUnit {
  Parameter<S> gamma, beta, running_mean, running_var;

  void init(int64_t C, int32_t conv_index) {
    gamma = Parameter<S>(Tensor<S>::full({C}, S(1)), LayerTag{ParamKind::BNGamma, conv_index});
    beta = Parameter<S>(Tensor<S>::zeros({C}), LayerTag{ParamKind::BNBeta, conv_index});
    running_mean =
        Parameter<S>(Tensor<S>::zeros({C}), LayerTag{ParamKind::BNRunningMean, conv_index});
    running_var =
        Parameter<S>(Tensor<S>::full({C}, S(1)), LayerTag{ParamKind::BNRunningVar, conv_index});
  }
};

// conv -> BN -> ReLU
template <typename S>
struct ConvBN {
  ConvUnit<S> conv;
  BNUnit<S> bn;
};

template <typename S>
struct ResBlock {
  ConvBN<S> c1, c2;
};

template <typename S>
struct ConvBNCtx {
  Conv2dCtx<S> conv;
  BatchNormCtx<S> bn;
  ReluCtx<S> relu;
};

template <typename S>
struct BlockCtx {
  ConvBNCtx<S> a, b;
};

template <typename S>
struct UNetTape {
  ConvBNCtx<S> stem;
  std::vector<std::vector<BlockCtx<S>>> enc;
  std::vector<MaxPoolCtx> pool;
  std::vector<ConvBNCtx<S>> descend;
  std::vector<BlockCtx<S>> bottleneck;
  std::vector<ConvBNCtx<S>> fuse;
  std::vector<std::vector<BlockCtx<S>>> dec;
  Conv2dCtx<S> final_conv;
};

template <typename S>
class UNet {
 public:
  UNetConfig cfg;

  UNet(UNetConfig config, uint64_t init_seed) : cfg(config) {
    cfg.validate();
    Rng rng(hash_u64(init_seed, stream::kInit));
    int32_t ordinal = 0;
    const int64_t B = cfg.base_channels;

    make_convbn(stem_, 1, B, cfg.stem_kernel, "stem", ordinal, rng);
    enc_.resize(cfg.depth);
    descend_.resize(cfg.depth);
    for (int64_t l = 0; l < cfg.depth; ++l) {
      const int64_t ch = B << l;
      enc_[l].resize(cfg.blocks_per_level);
      for (int64_t i = 0; i < cfg.blocks_per_level; ++i) {
        make_block(enc_[l][i], ch, cat("enc", l, ".block", i), ordinal, rng);
      }
      make_convbn(descend_[l], ch, ch * 2, 3, cat("desc", l), ordinal, rng);
    }
    bottleneck_.resize(cfg.blocks_per_level);
    for (int64_t i = 0; i < cfg.blocks_per_level; ++i) {
      make_block(bottleneck_[i], B << cfg.depth, cat("bott.block", i), ordinal, rng);
    }
    fuse_.resize(cfg.depth);
    dec_.resize(cfg.depth);
    for (int64_t l = cfg.depth - 1; l >= 0; --l) {
      const int64_t ch = B << l;
      make_convbn(fuse_[l], ch * 2 + ch, ch, 3, cat("dec", l, ".fuse"), ordinal, rng);
      dec_[l].resize(cfg.blocks_per_level);
      for (int64_t i = 0; i < cfg.blocks_per_level; ++i) {
        make_block(dec_[l][i], ch, cat("dec", l, ".block", i), ordinal, rng);
      }
    }
    final_.init(1, B, 1, ordinal++, rng);
    final_.name = "final";
    census_ = ordinal;
  }

  int64_t conv_census() const { return census_; }

  // training=true fills tape (required for backward) and updates BN running
  // stats; training=false uses running stats and leaves them untouched.
  Tensor<S> forward(const Tensor<S>& x, bool training, UNetTape<S>* tape = nullptr) {
    FV_CHECK(x.shape.size() == 4 && x.shape[1] == 1, "unet: input must be Nx1xHxW");
    FV_CHECK(x.shape[2] == x.shape[3], "unet: input must be square, got ", x.shape[2], "x",
             x.shape[3]);
    FV_CHECK(x.shape[2] % (int64_t(1) << cfg.depth) == 0, "unet: spatial extent ", x.shape[2],
             " not divisible by 2^depth = ", (int64_t(1) << cfg.depth));
    FV_CHECK(!training || tape, "unet: training forward requires a tape");

    if (tape) {
      tape->enc.assign(cfg.depth, {});
      tape->pool.assign(cfg.depth, {});
      tape->descend.assign(cfg.depth, {});
      tape->bottleneck.assign(cfg.blocks_per_level, {});
      tape->fuse.assign(cfg.depth, {});
      tape->dec.assign(cfg.depth, {});
    }

    std::vector<Tensor<S>> skips(cfg.depth);
    Tensor<S> h = convbn_fwd(stem_, x, training, tape ? &tape->stem : nullptr);
    for (int64_t l = 0; l < cfg.depth; ++l) {
      if (tape) tape->enc[l].resize(cfg.blocks_per_level);
      for (int64_t i = 0; i < cfg.blocks_per_level; ++i) {
        h = block_fwd(enc_[l][i], h, training, tape ? &tape->enc[l][i] : nullptr);
      }
      skips[l] = h;
      h = maxpool2d_forward(h, tape ? &tape->pool[l] : nullptr);
      h = convbn_fwd(descend_[l], h, training, tape ? &tape->descend[l] : nullptr);
    }
    for (int64_t i = 0; i < cfg.blocks_per_level; ++i) {
      h = block_fwd(bottleneck_[i], h, training, tape ? &tape->bottleneck[i] : nullptr);
    }
    for (int64_t l = cfg.depth - 1; l >= 0; --l) {
      h = upsample2d_forward(h);
      h = concat_channels(h, skips[l]);
      h = convbn_fwd(fuse_[l], h, training, tape ? &tape->fuse[l] : nullptr);
      if (tape) tape->dec[l].resize(cfg.blocks_per_level);
      for (int64_t i = 0; i < cfg.blocks_per_level; ++i) {
        h = block_fwd(dec_[l][i], h, training, tape ? &tape->dec[l][i] : nullptr);
      }
    }
    return conv2d_forward(h, final_.w.value, final_.b.value, tape ? &tape->final_conv : nullptr);
  }

  // Accumulates parameter gradients; returns grad wrt the input batch.
  // Long-skip gradients from the decoder are held aside and added where the
  // encoder forked (before pooling).
  Tensor<S> backward(const UNetTape<S>& tape, const Tensor<S>& grad_out) {
    std::vector<Tensor<S>> skip_grad(cfg.depth);
    Tensor<S> g = conv2d_backward(grad_out, tape.final_conv, final_.w.value, final_.w.grad,
                                  final_.b.grad);
    for (int64_t l = 0; l < cfg.depth; ++l) {
      for (int64_t i = cfg.blocks_per_level - 1; i >= 0; --i) {
        g = block_bwd(dec_[l][i], tape.dec[l][i], g);
      }
      g = convbn_bwd(fuse_[l], tape.fuse[l], g);
      auto [g_up, g_skip] = split_channels(g, (cfg.base_channels << l) * 2);
      skip_grad[l] = std::move(g_skip);
      g = upsample2d_backward(g_up);
    }
    for (int64_t i = cfg.blocks_per_level - 1; i >= 0; --i) {
      g = block_bwd(bottleneck_[i], tape.bottleneck[i], g);
    }
    for (int64_t l = cfg.depth - 1; l >= 0; --l) {
      g = convbn_bwd(descend_[l], tape.descend[l], g);
      g = maxpool2d_backward(g, tape.pool[l]);
      g.flat() += skip_grad[l].flat();
      for (int64_t i = cfg.blocks_per_level - 1; i >= 0; --i) {
        g = block_bwd(enc_[l][i], tape.enc[l][i], g);
      }
    }
    return convbn_bwd(stem_, tape.stem, g);
  }

  // Fixed walk order; defines NamedParameterSet construction order.
  template <typename Fn>
  void for_each_param(Fn&& fn) {
    visit_convbn(stem_, fn);
    for (auto& level : enc_)
      for (auto& blk : level) visit_block(blk, fn);
    for (int64_t l = 0; l < cfg.depth; ++l) visit_convbn(descend_[l], fn);
    for (auto& blk : bottleneck_) visit_block(blk, fn);
    for (int64_t l = cfg.depth - 1; l >= 0; --l) {
      visit_convbn(fuse_[l], fn);
      for (auto& blk : dec_[l]) visit_block(blk, fn);
    }
    fn(final_.name + ".weight", final_.w);
    fn(final_.name + ".bias", final_.b);
  }

  NamedParameterSet<S> flatten() {
    NamedParameterSet<S> set;
    for_each_param([&](const std::string& name, Parameter<S>& p) { set.append(name, p); });
    return set;
  }

  // Strict full load: entry order, names, and shapes must match exactly.
  void unflatten(const NamedParameterSet<S>& set) {
    size_t i = 0;
    for_each_param([&](const std::string& name, Parameter<S>& p) {
      FV_CHECK(i < set.items.size(), "unflatten: parameter set too short at '", name, "'");
      const auto& item = set.items[i];
      FV_CHECK(item.first == name, "unflatten: expected parameter '", name, "', got '",
               item.first, "'");
      FV_CHECK(item.second.value.shape == p.value.shape, "unflatten: shape mismatch for '", name,
               "'");
      p.value = item.second.value;
      ++i;
    });
    FV_CHECK(i == set.items.size(), "unflatten: parameter set has ", set.items.size(),
             " entries, model expects ", i);
  }

  // Partial load for filtered broadcasts: every entry present must match an
  // existing parameter by name and shape; absent entries keep local values.
  void load_present(const NamedParameterSet<S>& set) {
    size_t loaded = 0;
    for (const auto& item : set.items) {
      bool found = false;
      for_each_param([&](const std::string& name, Parameter<S>& p) {
        if (name == item.first) {
          FV_CHECK(item.second.value.shape == p.value.shape,
                   "load_present: shape mismatch for '", name, "'");
          p.value = item.second.value;
          found = true;
        }
      });
      FV_CHECK(found, "load_present: unknown parameter '", item.first, "'");
      ++loaded;
    }
    (void)loaded;
  }

  void zero_grad() {
    for_each_param([](const std::string&, Parameter<S>& p) { p.zero_grad(); });
  }

 private:
  void make_convbn(ConvBN<S>& unit, int64_t C, int64_t F, int64_t k, const std::string& name,
                   int32_t& ordinal, Rng& rng) {
    unit.conv.init(F, C, k, ordinal, rng);
    unit.conv.name = name;
    unit.bn.init(F, ordinal);
    ++ordinal;
  }

  void make_block(ResBlock<S>& blk, int64_t ch, const std::string& name, int32_t& ordinal,
                  Rng& rng) {
    make_convbn(blk.c1, ch, ch, 3, name + ".conv1", ordinal, rng);
    make_convbn(blk.c2, ch, ch, 3, name + ".conv2", ordinal, rng);
  }

  Tensor<S> convbn_fwd(ConvBN<S>& u, const Tensor<S>& x, bool training, ConvBNCtx<S>* ctx) {
    Tensor<S> h = conv2d_forward(x, u.conv.w.value, u.conv.b.value, ctx ? &ctx->conv : nullptr);
    h = batchnorm2d_forward(h, u.bn.gamma.value, u.bn.beta.value, u.bn.running_mean.value,
                            u.bn.running_var.value, training, cfg.bn_momentum, cfg.bn_eps,
                            ctx ? &ctx->bn : nullptr);
    return relu_forward(h, ctx ? &ctx->relu : nullptr);
  }

  Tensor<S> convbn_bwd(ConvBN<S>& u, const ConvBNCtx<S>& ctx, const Tensor<S>& g) {
    Tensor<S> h = relu_backward(g, ctx.relu);
    h = batchnorm2d_backward(h, ctx.bn, u.bn.gamma.value, u.bn.gamma.grad, u.bn.beta.grad);
    return conv2d_backward(h, ctx.conv, u.conv.w.value, u.conv.w.grad, u.conv.b.grad);
  }

  Tensor<S> block_fwd(ResBlock<S>& blk, const Tensor<S>& x, bool training, BlockCtx<S>* ctx) {
    Tensor<S> h = convbn_fwd(blk.c1, x, training, ctx ? &ctx->a : nullptr);
    h = convbn_fwd(blk.c2, h, training, ctx ? &ctx->b : nullptr);
    h.flat() += x.flat();  // identity shortcut
    return h;
  }

  Tensor<S> block_bwd(ResBlock<S>& blk, const BlockCtx<S>& ctx, const Tensor<S>& g) {
    Tensor<S> h = convbn_bwd(blk.c2, ctx.b, g);
    h = convbn_bwd(blk.c1, ctx.a, h);
    h.flat() += g.flat();  // shortcut gradient
    return h;
  }

  template <typename Fn>
  void visit_convbn(ConvBN<S>& u, Fn& fn) {
    fn(u.conv.name + ".weight", u.conv.w);
    fn(u.conv.name + ".bias", u.conv.b);
    fn(u.conv.name + ".bn.gamma", u.bn.gamma);
    fn(u.conv.name + ".bn.beta", u.bn.beta);
    fn(u.conv.name + ".bn.running_mean", u.bn.running_mean);
    fn(u.conv.name + ".bn.running_var", u.bn.running_var);
  }

  template <typename Fn>
  void visit_block(ResBlock<S>& blk, Fn& fn) {
    visit_convbn(blk.c1, fn);
    visit_convbn(blk.c2, fn);
  }

  ConvBN<S> stem_;
  std::vector<std::vector<ResBlock<S>>> enc_;
  std::vector<ConvBN<S>> descend_;
  std::vector<ResBlock<S>> bottleneck_;
  std::vector<ConvBN<S>> fuse_;
  std::vector<std::vector<ResBlock<S>>> dec_;
  ConvUnit<S> final_;
  int32_t census_ = 0;
};

}  // namespace fedvox
