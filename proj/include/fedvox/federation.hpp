#pragma once

// Cross-silo federation primitives: strategy configuration, server-side
// aggregation rules (sample-weighted averaging, server momentum, adaptive
// server steps, batch-norm-local broadcasts), and client-side local training.
// Aggregation consumes updates in ascending client_id order so results never
// depend on completion order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "fedvox/common.hpp"
#include "fedvox/layers.hpp"
#include "fedvox/params.hpp"
#include "fedvox/rng.hpp"
#include "fedvox/slicing.hpp"
#include "fedvox/unet.hpp"

namespace fedvox {

enum class Strategy : int32_t {
  kFedAvg = 0,
  kFedAvgM = 1,
  kFedProx = 2,
  kFedYogi = 3,
  kFedBN = 4,
};

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kFedAvg: return "fedavg";
    case Strategy::kFedAvgM: return "fedavgm";
    case Strategy::kFedProx: return "fedprox";
    case Strategy::kFedYogi: return "fedyogi";
    case Strategy::kFedBN: return "fedbn";
  }
  fail_config("invalid strategy");
}

inline Strategy parse_strategy(const std::string& s) {
  for (Strategy k : {Strategy::kFedAvg, Strategy::kFedAvgM, Strategy::kFedProx,
                     Strategy::kFedYogi, Strategy::kFedBN}) {
    if (s == strategy_name(k)) return k;
  }
  fail_config(cat("unknown aggregation strategy '", s,
                  "' (valid: fedavg, fedavgm, fedprox, fedyogi, fedbn)"));
}

struct FederationConfig {
  Strategy strategy = Strategy::kFedAvg;
  int64_t rounds = 10;
  int64_t local_epochs = 1;
  int64_t batch_size = 32;
  AdamConfig adam;               // client optimizer, reset every round
  double mu = 1.0;               // proximal coefficient (fedprox only)
  double server_lr = 1.0;        // fedavgm eta_s
  double server_momentum = 0.9;  // fedavgm beta
  double yogi_eta = 0.03;
  double yogi_beta1 = 0.6;
  double yogi_beta2 = 0.6;
  double yogi_tau = 0.01;

  void validate() const {
    FV_CHECK(rounds >= 1, "federation: rounds must be >= 1, got ", rounds);
    FV_CHECK(local_epochs >= 1, "federation: local_epochs must be >= 1, got ", local_epochs);
    FV_CHECK(batch_size >= 1, "federation: batch_size must be >= 1, got ", batch_size);
    FV_CHECK(adam.lr > 0, "federation: client learning rate must be positive");
    FV_CHECK(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1,
             "federation: Adam betas must lie in [0,1)");
    FV_CHECK(adam.eps > 0, "federation: Adam eps must be positive");
    FV_CHECK(mu >= 0, "federation: mu must be >= 0, got ", mu);
    FV_CHECK(server_lr > 0, "federation: server_lr must be positive, got ", server_lr);
    FV_CHECK(server_momentum >= 0 && server_momentum < 1,
             "federation: server_momentum must lie in [0,1), got ", server_momentum);
    FV_CHECK(yogi_eta > 0, "federation: yogi_eta must be positive");
    FV_CHECK(yogi_beta1 >= 0 && yogi_beta1 < 1 && yogi_beta2 >= 0 && yogi_beta2 < 1,
             "federation: yogi betas must lie in [0,1)");
    FV_CHECK(yogi_tau > 0, "federation: yogi_tau must be positive");
  }
};

using ModelState = NamedParameterSet<float>;

struct ClientUpdate {
  int64_t client_id = 0;
  int64_t n_samples = 0;   // training samples in one local epoch
  double train_loss = 0.0;
  ModelState state;        // post-training weights
};

namespace detail {

inline void check_same_layout(const ModelState& a, const ModelState& b, const char* what) {
  FV_CHECK(a.items.size() == b.items.size(), what, ": parameter count mismatch (",
           a.items.size(), " vs ", b.items.size(), ")");
  for (size_t i = 0; i < a.items.size(); ++i) {
    FV_CHECK(a.items[i].first == b.items[i].first, what, ": parameter name mismatch at entry ",
             i, " ('", a.items[i].first, "' vs '", b.items[i].first, "')");
    FV_CHECK(a.items[i].second.value.shape == b.items[i].second.value.shape,
             what, ": shape mismatch for '", a.items[i].first, "'");
  }
}

// Ascending client_id; duplicate ids rejected.
inline std::vector<size_t> sorted_update_order(const std::vector<ClientUpdate>& updates) {
  std::vector<size_t> order(updates.size());
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return updates[a].client_id < updates[b].client_id;
  });
  for (size_t i = 1; i < order.size(); ++i) {
    FV_CHECK(updates[order[i - 1]].client_id != updates[order[i]].client_id,
             "fed_avg: duplicate client id ", updates[order[i]].client_id);
  }
  return order;
}

}  // namespace detail

// Sample-weighted average sum_k (n_k / n) * w_k, accumulated per element in
// double over clients in ascending id order, rounded to float once.
inline ModelState fed_avg(const std::vector<ClientUpdate>& updates) {
  FV_CHECK(!updates.empty(), "fed_avg: no client updates");
  const std::vector<size_t> order = detail::sorted_update_order(updates);
  int64_t total = 0;
  for (const ClientUpdate& u : updates) {
    FV_CHECK(u.n_samples >= 1, "fed_avg: client ", u.client_id, " reports ", u.n_samples,
             " samples");
    total += u.n_samples;
  }
  const ModelState& ref = updates[order[0]].state;
  for (size_t i = 1; i < order.size(); ++i) {
    detail::check_same_layout(ref, updates[order[i]].state, "fed_avg");
  }

  ModelState out;
  std::vector<double> acc;
  for (size_t j = 0; j < ref.items.size(); ++j) {
    const Parameter<float>& rp = ref.items[j].second;
    acc.assign(size_t(rp.value.numel()), 0.0);
    for (size_t oi : order) {
      const ClientUpdate& u = updates[oi];
      const double wk = double(u.n_samples) / double(total);
      const Tensor<float>& src = u.state.items[j].second.value;
      for (size_t i = 0; i < acc.size(); ++i) acc[i] += wk * double(src.data[i]);
    }
    Parameter<float> p(Tensor<float>(rp.value.shape), rp.tag);
    for (size_t i = 0; i < acc.size(); ++i) p.value.data[i] = float(acc[i]);
    out.append(ref.items[j].first, std::move(p));
  }
  return out;
}

// Server-side optimizer state, kept in double so rounds of accumulation do
// not drift through float storage. Sized lazily on first use.
struct ServerOptState {
  std::vector<std::vector<double>> m, v;
};

namespace detail {

inline void init_opt_buffers(ServerOptState& opt, const ModelState& state, bool need_v,
                             double v_fill) {
  if (opt.m.empty()) {
    opt.m.resize(state.items.size());
    for (size_t j = 0; j < state.items.size(); ++j) {
      opt.m[j].assign(size_t(state.items[j].second.value.numel()), 0.0);
    }
    if (need_v) {
      opt.v.resize(state.items.size());
      for (size_t j = 0; j < state.items.size(); ++j) {
        opt.v[j].assign(size_t(state.items[j].second.value.numel()), v_fill);
      }
    }
  }
  FV_CHECK(opt.m.size() == state.items.size() && (!need_v || opt.v.size() == state.items.size()),
           "server_update: optimizer state does not match the model layout");
}

}  // namespace detail

// Applies one server round: replaces `state` with the post-aggregation
// global weights.
//   fedavg/fedprox/fedbn: state <- avg.
//   fedavgm: v <- beta*v + (state - avg), applied in the grouped form
//            state <- (1-eta)*state + eta*avg - (eta*beta)*v_prev, which
//            reduces bit-exactly to `avg` at beta=0, eta=1.
//   fedyogi: sign-based adaptive second moment with m0 = 0, v0 = tau^2.
inline void server_update(ModelState& state, ServerOptState& opt, const ModelState& avg,
                          const FederationConfig& cfg) {
  cfg.validate();
  detail::check_same_layout(state, avg, "server_update");
  switch (cfg.strategy) {
    case Strategy::kFedAvg:
    case Strategy::kFedProx:
    case Strategy::kFedBN: {
      for (size_t j = 0; j < state.items.size(); ++j) {
        state.items[j].second.value = avg.items[j].second.value;
      }
      return;
    }
    case Strategy::kFedAvgM: {
      detail::init_opt_buffers(opt, state, false, 0.0);
      const double eta = cfg.server_lr, beta = cfg.server_momentum;
      for (size_t j = 0; j < state.items.size(); ++j) {
        Tensor<float>& w = state.items[j].second.value;
        const Tensor<float>& a = avg.items[j].second.value;
        std::vector<double>& v = opt.m[j];
        for (size_t i = 0; i < v.size(); ++i) {
          const double wd = double(w.data[i]), ad = double(a.data[i]), vd = v[i];
          const double next = (1.0 - eta) * wd + eta * ad - (eta * beta) * vd;
          v[i] = beta * vd + (wd - ad);
          w.data[i] = float(next);
        }
      }
      return;
    }
    case Strategy::kFedYogi: {
      detail::init_opt_buffers(opt, state, true, cfg.yogi_tau * cfg.yogi_tau);
      const double eta = cfg.yogi_eta, b1 = cfg.yogi_beta1, b2 = cfg.yogi_beta2,
                   tau = cfg.yogi_tau;
      for (size_t j = 0; j < state.items.size(); ++j) {
        Tensor<float>& w = state.items[j].second.value;
        const Tensor<float>& a = avg.items[j].second.value;
        for (size_t i = 0; i < size_t(w.numel()); ++i) {
          const double wd = double(w.data[i]);
          const double d = double(a.data[i]) - wd;
          double& m = opt.m[j][i];
          double& vv = opt.v[j][i];
          m = b1 * m + (1.0 - b1) * d;
          const double dd = d * d;
          const double s = vv > dd ? 1.0 : (vv < dd ? -1.0 : 0.0);
          vv -= (1.0 - b2) * dd * s;
          w.data[i] = float(wd + eta * m / (std::sqrt(vv) + tau));
        }
      }
      return;
    }
  }
  fail_config("invalid strategy");
}

// The broadcast payload. Under fedbn every batch-norm entry (affine and
// running statistics) stays local to the clients; everything else is shared.
inline ModelState filter_for_broadcast(const ModelState& full, Strategy strategy) {
  if (strategy != Strategy::kFedBN) return full;
  ModelState out;
  for (const auto& [name, p] : full.items) {
    if (!is_batchnorm(p.tag.kind)) out.append(name, p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Client-side local training.

struct LocalTrainStats {
  int64_t n_samples = 0;  // examples per epoch (the aggregation weight)
  double mean_loss = 0.0;  // sample-weighted local objective over all epochs
};

namespace detail {

inline Tensor<float> crop_patch(const Tensor<float>& img, int64_t oy, int64_t ox, int64_t p) {
  FV_CHECK(img.shape.size() == 3 && img.shape[0] == 1, "crop_patch: expected [1,H,W]");
  FV_CHECK(oy >= 0 && ox >= 0 && oy + p <= img.shape[1] && ox + p <= img.shape[2],
           "crop_patch: ", p, "x", p, " patch at (", oy, ",", ox, ") leaves the ",
           img.shape[1], "x", img.shape[2], " slice");
  Tensor<float> out({1, p, p});
  const int64_t W = img.shape[2];
  for (int64_t y = 0; y < p; ++y) {
    std::copy_n(&img.data[size_t((oy + y) * W + ox)], size_t(p), &out.data[size_t(y * p)]);
  }
  return out;
}

}  // namespace detail

// One round of local training: fresh Adam state, seeded epoch plans and
// augmentation draws, optional proximal pull toward the received weights.
// The proximal anchor is the model state at entry (the broadcast weights).
inline LocalTrainStats local_train(UNet<float>& model, const std::vector<SliceRecord>& records,
                                   const Paradigm& paradigm, AugmentPipeline augmentation,
                                   const FederationConfig& cfg, uint64_t round_seed,
                                   int64_t round, int64_t client_id) {
  cfg.validate();
  const bool prox = cfg.strategy == Strategy::kFedProx && cfg.mu > 0.0;

  std::vector<Tensor<float>> anchors;
  if (prox) {
    model.for_each_param([&](const std::string&, Parameter<float>& p) {
      anchors.push_back(is_trainable(p.tag.kind) ? p.value : Tensor<float>());
    });
  }

  std::vector<AdamState<float>> adam;
  model.for_each_param([&](const std::string&, Parameter<float>& p) {
    adam.emplace_back(p.value.shape, cfg.adam);
  });

  double loss_weighted = 0.0;
  int64_t samples_seen = 0, n_epoch = 0;
  uint64_t sample_counter = 0;

  for (int64_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    const auto batches =
        make_epoch_batches(records, paradigm, cfg.batch_size, hash_u64(round_seed, uint64_t(epoch)));
    if (epoch == 0) {
      for (const auto& b : batches) n_epoch += int64_t(b.size());
    }
    for (const auto& batch : batches) {
      const int64_t B = int64_t(batch.size());
      int64_t H = 0, W = 0;
      Tensor<float> x, t;
      for (int64_t b = 0; b < B; ++b) {
        const BatchEntry& e = batch[size_t(b)];
        const SliceRecord* rec = &records[size_t(e.record)];
        SliceRecord held;
        if (augmentation != AugmentPipeline::kNone) {
          held = augment(*rec, augmentation,
                         hash_u64(round_seed, stream::kAugment, sample_counter));
          rec = &held;
        }
        ++sample_counter;
        Tensor<float> mi = rec->mri, ci = rec->ct;
        if (paradigm.kind == Paradigm::Kind::kPatches2D) {
          mi = detail::crop_patch(rec->mri, e.origin[0], e.origin[1], paradigm.patch_size);
          ci = detail::crop_patch(rec->ct, e.origin[0], e.origin[1], paradigm.patch_size);
        }
        if (b == 0) {
          H = mi.shape[1];
          W = mi.shape[2];
          x = Tensor<float>({B, 1, H, W});
          t = Tensor<float>({B, 1, H, W});
        }
        FV_CHECK(mi.shape[1] == H && mi.shape[2] == W,
                 "local_train: inconsistent slice shapes within a batch");
        std::copy(mi.data.begin(), mi.data.end(), x.data.begin() + b * H * W);
        std::copy(ci.data.begin(), ci.data.end(), t.data.begin() + b * H * W);
      }

      model.zero_grad();
      UNetTape<float> tape;
      const Tensor<float> pred = model.forward(x, true, &tape);
      L1LossCtx<float> lctx;
      double loss = double(l1_loss(pred, t, &lctx));
      model.backward(tape, l1_loss_backward(lctx));
      if (prox) {
        size_t pi = 0;
        model.for_each_param([&](const std::string&, Parameter<float>& p) {
          if (is_trainable(p.tag.kind)) {
            loss += double(prox_penalty_accumulate(p.value, anchors[pi], float(cfg.mu), p.grad));
          }
          ++pi;
        });
      }
      FV_RUNTIME_CHECK(std::isfinite(loss),
                       "federated training diverged: non-finite loss at round ", round,
                       ", client ", client_id);
      size_t pi = 0;
      model.for_each_param([&](const std::string& name, Parameter<float>& p) {
        if (is_trainable(p.tag.kind)) adam_step(p, adam[pi], name);
        ++pi;
      });
      loss_weighted += loss * double(B);
      samples_seen += B;
    }
  }
  return {n_epoch, loss_weighted / double(samples_seen)};
}

}  // namespace fedvox
