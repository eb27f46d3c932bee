#pragma once

// End-to-end federated experiment: dataset preparation from centre
// specifications, volumetric inference (per-plane voting or patch overlap
// averaging), and the round loop broadcast -> local training -> aggregation
// -> evaluation. Everything is a pure function of the experiment config, so
// a rerun reproduces every number bit for bit.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "fedvox/common.hpp"
#include "fedvox/federation.hpp"
#include "fedvox/metrics.hpp"
#include "fedvox/phantom.hpp"
#include "fedvox/preprocess.hpp"
#include "fedvox/slicing.hpp"
#include "fedvox/unet.hpp"

namespace fedvox {

struct ExperimentConfig {
  uint64_t seed = 1;
  std::vector<CentreSpec> train_centres;
  CentreSpec unseen_centre;
  PreprocessConfig preprocess;
  UNetConfig model = UNetConfig::desk();
  FederationConfig fed;
  Paradigm paradigm;
  AugmentPipeline augmentation = AugmentPipeline::kMinimal;
  MetricConfig metrics;
  int64_t infer_batch = 16;
  int64_t patch_stride = 16;     // patch tiling step at inference
  bool full_unseen_eval = false;  // default: the unseen centre's test split

  void validate() const {
    FV_CHECK(!train_centres.empty(), "experiment: at least one training centre required");
    for (const CentreSpec& c : train_centres) c.validate();
    unseen_centre.validate();
    for (size_t i = 0; i < train_centres.size(); ++i) {
      FV_CHECK(train_centres[i].centre_id != unseen_centre.centre_id,
               "experiment: unseen centre id '", unseen_centre.centre_id,
               "' also appears among training centres");
      for (size_t j = i + 1; j < train_centres.size(); ++j) {
        FV_CHECK(train_centres[i].centre_id != train_centres[j].centre_id,
                 "experiment: duplicate centre id '", train_centres[i].centre_id, "'");
      }
    }
    preprocess.validate();
    model.validate();
    fed.validate();
    paradigm.validate();
    metrics.validate();
    FV_CHECK(infer_batch >= 1, "experiment: infer_batch must be >= 1, got ", infer_batch);
    const int64_t train_extent = paradigm.kind == Paradigm::Kind::kPatches2D
                                     ? paradigm.patch_size
                                     : preprocess.target_dim;
    FV_CHECK(model.input_size == train_extent, "experiment: model input_size ",
             model.input_size, " must equal the training extent ", train_extent);
    if (paradigm.kind == Paradigm::Kind::kPatches2D) {
      FV_CHECK(patch_stride >= 1 && patch_stride <= paradigm.patch_size,
               "experiment: patch_stride must lie in [1, patch_size], got ", patch_stride);
      FV_CHECK(paradigm.patch_size <= preprocess.target_dim,
               "experiment: patch_size ", paradigm.patch_size, " exceeds the volume extent ",
               preprocess.target_dim);
    }
  }
};

// Ground truth kept volumetrically for evaluation; MRI is the network input
// space, CT stays in HU.
struct EvalPatient {
  std::string centre_id;
  int64_t patient_id = 0;
  Volume<float> mri;
  Volume<float> ct_hu;
  Volume<float> mask;
};

struct ClientData {
  int64_t client_id = 0;
  std::string centre_id;
  std::vector<SliceRecord> train;  // all three planes; CT normalized to [0,1]
  std::vector<EvalPatient> val;
};

struct FederatedDataset {
  std::vector<ClientData> clients;
  std::vector<EvalPatient> unseen;
};

// Generates, preprocesses, and slices every centre. Training patients become
// slice records over all three planes (the paradigm selects from them);
// validation and unseen patients stay volumetric.
inline FederatedDataset prepare_dataset(const ExperimentConfig& cfg) {
  cfg.validate();
  FederatedDataset out;
  int64_t next_client = 0;
  for (const CentreSpec& spec : cfg.train_centres) {
    const CentreCohort cohort = generate_centre(spec, cfg.seed);
    ClientData cd;
    cd.client_id = next_client++;
    cd.centre_id = spec.centre_id;
    for (int64_t pi : cohort.train_idx) {
      const PhantomPair& pp = cohort.patients[size_t(pi)];
      PreprocessedPatient pre = preprocess_patient(pp.mri, pp.ct, pp.mask, cfg.preprocess);
      const Volume<float> ct_norm = from_hu(pre.ct);
      for (Plane pl : {Plane::kAxial, Plane::kCoronal, Plane::kSagittal}) {
        auto recs = extract_slices(pre.mri, ct_norm, pi, pl);
        cd.train.insert(cd.train.end(), std::make_move_iterator(recs.begin()),
                        std::make_move_iterator(recs.end()));
      }
    }
    for (int64_t pi : cohort.val_idx) {
      const PhantomPair& pp = cohort.patients[size_t(pi)];
      PreprocessedPatient pre = preprocess_patient(pp.mri, pp.ct, pp.mask, cfg.preprocess);
      cd.val.push_back(EvalPatient{spec.centre_id, pi, std::move(pre.mri), std::move(pre.ct),
                                   std::move(pre.mask)});
    }
    out.clients.push_back(std::move(cd));
  }

  const CentreCohort un = generate_centre(cfg.unseen_centre, cfg.seed);
  std::vector<int64_t> idx = un.test_idx;
  if (cfg.full_unseen_eval) {
    idx.clear();
    for (int64_t i = 0; i < cfg.unseen_centre.n_patients; ++i) idx.push_back(i);
  }
  for (int64_t pi : idx) {
    const PhantomPair& pp = un.patients[size_t(pi)];
    PreprocessedPatient pre = preprocess_patient(pp.mri, pp.ct, pp.mask, cfg.preprocess);
    out.unseen.push_back(EvalPatient{cfg.unseen_centre.centre_id, pi, std::move(pre.mri),
                                     std::move(pre.ct), std::move(pre.mask)});
  }
  return out;
}

namespace detail {

// Batched eval-mode forward of [1,H,W] inputs.
inline std::vector<Tensor<float>> predict_slices(UNet<float>& model,
                                                 const std::vector<Tensor<float>>& inputs,
                                                 int64_t batch) {
  std::vector<Tensor<float>> out;
  out.reserve(inputs.size());
  for (size_t i0 = 0; i0 < inputs.size(); i0 += size_t(batch)) {
    const size_t i1 = std::min(inputs.size(), i0 + size_t(batch));
    const int64_t B = int64_t(i1 - i0);
    const int64_t H = inputs[i0].shape[1], W = inputs[i0].shape[2];
    Tensor<float> x({B, 1, H, W});
    for (int64_t b = 0; b < B; ++b) {
      const Tensor<float>& in = inputs[i0 + size_t(b)];
      FV_CHECK(in.shape == inputs[i0].shape, "predict_slices: ragged input shapes");
      std::copy(in.data.begin(), in.data.end(), x.data.begin() + b * H * W);
    }
    const Tensor<float> y = model.forward(x, false, nullptr);
    for (int64_t b = 0; b < B; ++b) {
      Tensor<float> s({1, H, W});
      std::copy(y.data.begin() + b * H * W, y.data.begin() + (b + 1) * H * W, s.data.begin());
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace detail

// Translates one MRI volume into an HU volume. Full-slice paradigms predict
// every plane and take the voxelwise median of the three HU reconstructions;
// the patch paradigm tiles every slice of every plane and divides one global
// sum/hit accumulator before a single HU conversion.
inline Volume<float> infer_hu(const std::vector<UNet<float>*>& models, bool per_plane,
                              const Volume<float>& mri, const Paradigm& paradigm,
                              int64_t infer_batch, int64_t patch_stride) {
  FV_CHECK(per_plane ? models.size() == 3 : models.size() == 1,
           "infer_hu: expected ", per_plane ? 3 : 1, " models, got ", models.size());

  if (paradigm.kind == Paradigm::Kind::kPatches2D) {
    const int64_t p = paradigm.patch_size;
    std::vector<double> sum(mri.data.size(), 0.0);
    std::vector<int32_t> hits(mri.data.size(), 0);
    for (int pi = 0; pi < 3; ++pi) {
      const Plane pl = Plane(pi);
      UNet<float>& m = per_plane ? *models[size_t(pi)] : *models[0];
      const SliceShape ss = slice_shape(mri.dims, pl);
      const auto grid = patch_grid(ss.height, ss.width, p, patch_stride);
      for (int64_t k = 0; k < ss.count; ++k) {
        Tensor<float> sl({1, ss.height, ss.width});
        for (int64_t h = 0; h < ss.height; ++h) {
          for (int64_t w = 0; w < ss.width; ++w) {
            const auto v = detail::voxel_of(pl, k, h, w);
            sl.data[size_t(h * ss.width + w)] = mri.data[size_t(mri.index(v[0], v[1], v[2]))];
          }
        }
        std::vector<Tensor<float>> ins;
        ins.reserve(grid.size());
        for (const auto& o : grid) ins.push_back(detail::crop_patch(sl, o[0], o[1], p));
        const auto preds = detail::predict_slices(m, ins, infer_batch);
        for (size_t g = 0; g < grid.size(); ++g) {
          for (int64_t y = 0; y < p; ++y) {
            for (int64_t x = 0; x < p; ++x) {
              const auto v = detail::voxel_of(pl, k, grid[g][0] + y, grid[g][1] + x);
              const size_t vi = size_t(mri.index(v[0], v[1], v[2]));
              sum[vi] += double(preds[g].data[size_t(y * p + x)]);
              hits[vi] += 1;
            }
          }
        }
      }
    }
    Volume<float> merged(mri.dims, mri.spacing, Modality::CT);
    for (size_t i = 0; i < merged.data.size(); ++i) {
      FV_RUNTIME_CHECK(hits[i] > 0, "infer_hu: uncovered voxel at linear index ", i);
      merged.data[i] = float(sum[i] / double(hits[i]));
    }
    return to_hu(merged);
  }

  std::array<Volume<float>, 3> per;
  for (int pi = 0; pi < 3; ++pi) {
    const Plane pl = Plane(pi);
    UNet<float>& m = per_plane ? *models[size_t(pi)] : *models[0];
    auto recs = extract_slices(mri, mri, 0, pl);
    std::vector<Tensor<float>> ins;
    ins.reserve(recs.size());
    for (auto& r : recs) ins.push_back(std::move(r.mri));
    auto preds = detail::predict_slices(m, ins, infer_batch);
    for (size_t k = 0; k < recs.size(); ++k) recs[k].ct = std::move(preds[k]);
    per[size_t(pi)] = to_hu(reconstruct_volume(recs, pl, Modality::CT));
  }
  return median_vote(per[0], per[1], per[2]);
}

inline PatientMetrics evaluate_patient(const std::vector<UNet<float>*>& models, bool per_plane,
                                       const EvalPatient& ep, const ExperimentConfig& cfg) {
  const Volume<float> pred =
      infer_hu(models, per_plane, ep.mri, cfg.paradigm, cfg.infer_batch, cfg.patch_stride);
  PatientMetrics pm;
  pm.patient_id = ep.patient_id;
  pm.mae = mae(ep.ct_hu, pred, ep.mask, cfg.metrics.mask_policy);
  pm.ssim = ssim(ep.ct_hu, pred, cfg.metrics);
  pm.psnr = psnr(ep.ct_hu, pred, ep.mask, cfg.metrics);
  return pm;
}

// ---------------------------------------------------------------------------
// Round loop.

struct RoundRecord {
  int64_t round = 0;  // 0 = freshly initialized baseline
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> client_loss;
  CohortSummary val;     // pooled client validation patients
  CohortSummary unseen;  // unseen-centre patients (server model)
};

struct ExperimentResult {
  bool per_plane_models = false;
  std::vector<RoundRecord> rounds;       // fed.rounds + 1 entries
  std::vector<ModelState> final_states;  // one per model (three for 2d_plus)
  std::vector<ModelState> best_states;
  int64_t best_round = 0;
  double best_unseen_mae = std::numeric_limits<double>::infinity();
};

using RoundCallback = std::function<void(const RoundRecord&)>;

// Clients train sequentially but all order-sensitive state is derived from
// hashed per-(model, client, round) seeds and aggregation sorts by client id,
// so the result is invariant to scheduling.
//   - Client validation uses each client's own post-broadcast model (equal to
//     the global model except under fedbn, where BN entries stay personal).
//   - The unseen centre always uses the server model.
//   - "Best" = lowest unseen median MAE, baseline round included.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const FederatedDataset& data,
                                       const RoundCallback& on_round = {}) {
  cfg.validate();
  FV_CHECK(!data.clients.empty(), "experiment: dataset has no clients");
  for (const ClientData& c : data.clients) {
    FV_CHECK(!c.train.empty(), "experiment: client ", c.client_id, " (centre ", c.centre_id,
             ") has no training slices");
  }
  FV_CHECK(!data.unseen.empty(), "experiment: no unseen-centre evaluation patients");

  const bool per_plane = cfg.paradigm.kind == Paradigm::Kind::kTwoDPlus;
  const int64_t n_models = per_plane ? 3 : 1;

  std::vector<uint64_t> model_seed(static_cast<size_t>(n_models));
  std::vector<Paradigm> model_paradigm(static_cast<size_t>(n_models));
  for (int64_t m = 0; m < n_models; ++m) {
    model_seed[size_t(m)] =
        per_plane ? hash_u64(cfg.seed, stream::kPlane, uint64_t(m)) : cfg.seed;
    model_paradigm[size_t(m)] =
        per_plane ? Paradigm::two_d_plus(Plane(int32_t(m))) : cfg.paradigm;
  }

  std::vector<UNet<float>> servers;
  servers.reserve(size_t(n_models));
  std::vector<ServerOptState> opt(static_cast<size_t>(n_models));
  for (int64_t m = 0; m < n_models; ++m) servers.emplace_back(cfg.model, model_seed[size_t(m)]);

  // Client models persist across rounds; identical init makes round-1
  // broadcasts total even under the fedbn filter.
  std::vector<std::vector<UNet<float>>> clients(data.clients.size());
  for (size_t k = 0; k < data.clients.size(); ++k) {
    clients[k].reserve(size_t(n_models));
    for (int64_t m = 0; m < n_models; ++m) clients[k].emplace_back(cfg.model, model_seed[size_t(m)]);
  }

  ExperimentResult res;
  res.per_plane_models = per_plane;

  auto broadcast_all = [&]() {
    for (int64_t m = 0; m < n_models; ++m) {
      const ModelState payload =
          filter_for_broadcast(servers[size_t(m)].flatten(), cfg.fed.strategy);
      for (size_t k = 0; k < clients.size(); ++k) clients[k][size_t(m)].load_present(payload);
    }
  };

  auto eval_round = [&](int64_t round, double loss, std::vector<double> closs) {
    RoundRecord rr;
    rr.round = round;
    rr.train_loss = loss;
    rr.client_loss = std::move(closs);

    std::vector<PatientMetrics> val_all;
    for (size_t k = 0; k < data.clients.size(); ++k) {
      std::vector<UNet<float>*> ms;
      for (int64_t m = 0; m < n_models; ++m) ms.push_back(&clients[k][size_t(m)]);
      for (const EvalPatient& ep : data.clients[k].val) {
        val_all.push_back(evaluate_patient(ms, per_plane, ep, cfg));
      }
    }
    rr.val = summarize(val_all);

    std::vector<UNet<float>*> sm;
    for (int64_t m = 0; m < n_models; ++m) sm.push_back(&servers[size_t(m)]);
    std::vector<PatientMetrics> un;
    for (const EvalPatient& ep : data.unseen) {
      un.push_back(evaluate_patient(sm, per_plane, ep, cfg));
    }
    rr.unseen = summarize(un);

    if (rr.unseen.mae.median < res.best_unseen_mae) {
      res.best_unseen_mae = rr.unseen.mae.median;
      res.best_round = round;
      res.best_states.clear();
      for (int64_t m = 0; m < n_models; ++m) res.best_states.push_back(servers[size_t(m)].flatten());
    }
    if (on_round) on_round(rr);
    res.rounds.push_back(std::move(rr));
  };

  broadcast_all();
  eval_round(0, std::numeric_limits<double>::quiet_NaN(), {});

  for (int64_t round = 1; round <= cfg.fed.rounds; ++round) {
    double loss_acc = 0.0;
    int64_t n_acc = 0;
    std::vector<double> closs(data.clients.size(), 0.0);
    std::vector<int64_t> cn(data.clients.size(), 0);

    for (int64_t m = 0; m < n_models; ++m) {
      std::vector<ClientUpdate> updates;
      updates.reserve(data.clients.size());
      for (size_t k = 0; k < data.clients.size(); ++k) {
        const ClientData& cd = data.clients[k];
        const uint64_t round_seed =
            hash_u64(model_seed[size_t(m)], stream::kClient, uint64_t(cd.client_id),
                     uint64_t(round));
        const LocalTrainStats st =
            local_train(clients[k][size_t(m)], cd.train, model_paradigm[size_t(m)],
                        cfg.augmentation, cfg.fed, round_seed, round, cd.client_id);
        ClientUpdate u;
        u.client_id = cd.client_id;
        u.n_samples = st.n_samples;
        u.train_loss = st.mean_loss;
        u.state = clients[k][size_t(m)].flatten();
        updates.push_back(std::move(u));
        loss_acc += st.mean_loss * double(st.n_samples);
        n_acc += st.n_samples;
        closs[k] += st.mean_loss * double(st.n_samples);
        cn[k] += st.n_samples;
      }
      const ModelState avg = fed_avg(updates);
      ModelState sstate = servers[size_t(m)].flatten();
      server_update(sstate, opt[size_t(m)], avg, cfg.fed);
      servers[size_t(m)].unflatten(sstate);
    }

    for (size_t k = 0; k < closs.size(); ++k) closs[k] /= double(cn[k]);
    broadcast_all();
    eval_round(round, loss_acc / double(n_acc), std::move(closs));
  }

  for (int64_t m = 0; m < n_models; ++m) res.final_states.push_back(servers[size_t(m)].flatten());
  return res;
}

}  // namespace fedvox
