#pragma once

// JSON round-trip for the experiment configuration. Parsing is strict:
// unknown keys are rejected so typos fail instead of silently using defaults.
// Serialization emits every field (sorted keys), so the emitted form fully
// pins an experiment and embeds verbatim into checkpoints.

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>

#include "json.hpp"

#include "fedvox/experiment.hpp"

namespace fedvox {

using Json = nlohmann::json;

inline const char* paradigm_kind_name(Paradigm::Kind k) {
  switch (k) {
    case Paradigm::Kind::kRandomMulti2D: return "random_multi_2d";
    case Paradigm::Kind::kMulti2D: return "multi_2d";
    case Paradigm::Kind::kTwoDPlus: return "2d_plus";
    case Paradigm::Kind::kPatches2D: return "patches_2d";
  }
  fail_config("invalid paradigm kind");
}

inline Paradigm::Kind parse_paradigm_kind(const std::string& s) {
  for (Paradigm::Kind k : {Paradigm::Kind::kRandomMulti2D, Paradigm::Kind::kMulti2D,
                           Paradigm::Kind::kTwoDPlus, Paradigm::Kind::kPatches2D}) {
    if (s == paradigm_kind_name(k)) return k;
  }
  fail_config(cat("config: unknown paradigm kind '", s,
                  "' (valid: random_multi_2d, multi_2d, 2d_plus, patches_2d)"));
}

inline Plane parse_plane(const std::string& s) {
  for (Plane p : {Plane::kAxial, Plane::kCoronal, Plane::kSagittal}) {
    if (s == plane_name(p)) return p;
  }
  fail_config(cat("config: unknown plane '", s, "' (valid: axial, coronal, sagittal)"));
}

inline const char* augmentation_name(AugmentPipeline a) {
  switch (a) {
    case AugmentPipeline::kNone: return "none";
    case AugmentPipeline::kMinimal: return "minimal";
    case AugmentPipeline::kExtended: return "extended";
  }
  fail_config("invalid augmentation pipeline");
}

inline AugmentPipeline parse_augmentation(const std::string& s) {
  for (AugmentPipeline a :
       {AugmentPipeline::kNone, AugmentPipeline::kMinimal, AugmentPipeline::kExtended}) {
    if (s == augmentation_name(a)) return a;
  }
  fail_config(cat("config: unknown augmentation '", s, "' (valid: none, minimal, extended)"));
}

inline MaskPolicy parse_mask_policy(const std::string& s) {
  for (MaskPolicy m : {MaskPolicy::kBodyMask, MaskPolicy::kFullVolume}) {
    if (s == mask_policy_name(m)) return m;
  }
  fail_config(cat("config: unknown mask policy '", s, "' (valid: body-mask, full-volume)"));
}

namespace detail {

inline void require_known_keys(const Json& j, const char* ctx,
                               std::initializer_list<const char*> keys) {
  FV_CHECK(j.is_object(), "config: ", ctx, " must be a JSON object");
  for (const auto& item : j.items()) {
    const bool known = std::any_of(keys.begin(), keys.end(), [&](const char* k) {
      return item.key() == k;
    });
    FV_CHECK(known, "config: unknown key '", item.key(), "' in ", ctx);
  }
}

template <typename T>
void assign_if(const Json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Centre specifications. Accepts "A" (preset), or an object with optional
// "preset" plus field overrides.

inline CentreSpec centre_from_json(const Json& j) {
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    FV_CHECK(s.size() == 1, "config: centre preset must be a single letter A..E, got '", s, "'");
    return CentreSpec::preset(s[0]);
  }
  detail::require_known_keys(
      j, "centre",
      {"preset", "centre_id", "n_patients", "grid_dim", "voxel_size", "noise_sigma",
       "bias_amplitude", "bias_smoothness", "fov_cut_fraction", "ct_slice_thickness_factor",
       "contrast_gain", "contrast_offset", "axis_perm"});
  CentreSpec s;
  if (j.contains("preset")) {
    const std::string p = j.at("preset").get<std::string>();
    FV_CHECK(p.size() == 1, "config: centre preset must be a single letter A..E, got '", p, "'");
    s = CentreSpec::preset(p[0]);
  }
  detail::assign_if(j, "centre_id", s.centre_id);
  detail::assign_if(j, "n_patients", s.n_patients);
  detail::assign_if(j, "grid_dim", s.grid_dim);
  detail::assign_if(j, "voxel_size", s.voxel_size);
  detail::assign_if(j, "noise_sigma", s.noise_sigma);
  detail::assign_if(j, "bias_amplitude", s.bias_amplitude);
  detail::assign_if(j, "bias_smoothness", s.bias_smoothness);
  detail::assign_if(j, "fov_cut_fraction", s.fov_cut_fraction);
  detail::assign_if(j, "ct_slice_thickness_factor", s.ct_slice_thickness_factor);
  detail::assign_if(j, "contrast_gain", s.contrast_gain);
  detail::assign_if(j, "contrast_offset", s.contrast_offset);
  if (j.contains("axis_perm")) {
    const auto a = j.at("axis_perm").get<std::vector<int32_t>>();
    FV_CHECK(a.size() == 3, "config: axis_perm must have 3 entries");
    std::copy(a.begin(), a.end(), s.axis_perm.begin());
  }
  return s;
}

inline Json centre_to_json(const CentreSpec& s) {
  Json j;
  j["centre_id"] = s.centre_id;
  j["n_patients"] = s.n_patients;
  j["grid_dim"] = s.grid_dim;
  j["voxel_size"] = s.voxel_size;
  j["noise_sigma"] = s.noise_sigma;
  j["bias_amplitude"] = s.bias_amplitude;
  j["bias_smoothness"] = s.bias_smoothness;
  j["fov_cut_fraction"] = s.fov_cut_fraction;
  j["ct_slice_thickness_factor"] = s.ct_slice_thickness_factor;
  j["contrast_gain"] = s.contrast_gain;
  j["contrast_offset"] = s.contrast_offset;
  j["axis_perm"] = std::vector<int32_t>(s.axis_perm.begin(), s.axis_perm.end());
  return j;
}

// ---------------------------------------------------------------------------
// Experiment configuration.

inline ExperimentConfig experiment_from_json(const Json& j) {
  try {
    detail::require_known_keys(
        j, "experiment config",
        {"seed", "train_centres", "unseen_centre", "preprocess", "model", "federation",
         "paradigm", "augmentation", "metrics", "infer_batch", "patch_stride",
         "full_unseen_eval"});
    ExperimentConfig c;
    detail::assign_if(j, "seed", c.seed);

    FV_CHECK(j.contains("train_centres"), "config: train_centres is required");
    FV_CHECK(j.at("train_centres").is_array() && !j.at("train_centres").empty(),
             "config: train_centres must be a non-empty array");
    for (const Json& e : j.at("train_centres")) c.train_centres.push_back(centre_from_json(e));
    FV_CHECK(j.contains("unseen_centre"), "config: unseen_centre is required");
    c.unseen_centre = centre_from_json(j.at("unseen_centre"));

    if (j.contains("preprocess")) {
      const Json& p = j.at("preprocess");
      detail::require_known_keys(p, "preprocess",
                                 {"target_dim", "crop_dims", "target_voxel", "bias_poly_degree",
                                  "bias_iters", "bias_ridge"});
      c.preprocess = PreprocessConfig::for_target(p.value("target_dim", int64_t(64)));
      if (p.contains("crop_dims")) {
        const auto a = p.at("crop_dims").get<std::vector<int64_t>>();
        FV_CHECK(a.size() == 3, "config: crop_dims must have 3 entries");
        std::copy(a.begin(), a.end(), c.preprocess.crop_dims.begin());
      }
      detail::assign_if(p, "target_voxel", c.preprocess.target_voxel);
      detail::assign_if(p, "bias_poly_degree", c.preprocess.bias_poly_degree);
      detail::assign_if(p, "bias_iters", c.preprocess.bias_iters);
      detail::assign_if(p, "bias_ridge", c.preprocess.bias_ridge);
    }

    if (j.contains("model")) {
      const Json& m = j.at("model");
      detail::require_known_keys(m, "model",
                                 {"input_size", "depth", "base_channels", "stem_kernel",
                                  "blocks_per_level", "bn_momentum", "bn_eps"});
      detail::assign_if(m, "input_size", c.model.input_size);
      detail::assign_if(m, "depth", c.model.depth);
      detail::assign_if(m, "base_channels", c.model.base_channels);
      detail::assign_if(m, "stem_kernel", c.model.stem_kernel);
      detail::assign_if(m, "blocks_per_level", c.model.blocks_per_level);
      detail::assign_if(m, "bn_momentum", c.model.bn_momentum);
      detail::assign_if(m, "bn_eps", c.model.bn_eps);
    }

    if (j.contains("federation")) {
      const Json& f = j.at("federation");
      detail::require_known_keys(f, "federation",
                                 {"strategy", "rounds", "local_epochs", "batch_size", "adam",
                                  "mu", "server_lr", "server_momentum", "yogi"});
      if (f.contains("strategy")) c.fed.strategy = parse_strategy(f.at("strategy").get<std::string>());
      detail::assign_if(f, "rounds", c.fed.rounds);
      detail::assign_if(f, "local_epochs", c.fed.local_epochs);
      detail::assign_if(f, "batch_size", c.fed.batch_size);
      if (f.contains("adam")) {
        const Json& a = f.at("adam");
        detail::require_known_keys(a, "adam", {"lr", "beta1", "beta2", "eps"});
        detail::assign_if(a, "lr", c.fed.adam.lr);
        detail::assign_if(a, "beta1", c.fed.adam.beta1);
        detail::assign_if(a, "beta2", c.fed.adam.beta2);
        detail::assign_if(a, "eps", c.fed.adam.eps);
      }
      detail::assign_if(f, "mu", c.fed.mu);
      detail::assign_if(f, "server_lr", c.fed.server_lr);
      detail::assign_if(f, "server_momentum", c.fed.server_momentum);
      if (f.contains("yogi")) {
        const Json& y = f.at("yogi");
        detail::require_known_keys(y, "yogi", {"eta", "beta1", "beta2", "tau"});
        detail::assign_if(y, "eta", c.fed.yogi_eta);
        detail::assign_if(y, "beta1", c.fed.yogi_beta1);
        detail::assign_if(y, "beta2", c.fed.yogi_beta2);
        detail::assign_if(y, "tau", c.fed.yogi_tau);
      }
    }

    if (j.contains("paradigm")) {
      const Json& p = j.at("paradigm");
      detail::require_known_keys(p, "paradigm",
                                 {"kind", "plane", "patch_size", "patches_per_slice"});
      if (p.contains("kind")) c.paradigm.kind = parse_paradigm_kind(p.at("kind").get<std::string>());
      if (p.contains("plane")) c.paradigm.plane = parse_plane(p.at("plane").get<std::string>());
      detail::assign_if(p, "patch_size", c.paradigm.patch_size);
      detail::assign_if(p, "patches_per_slice", c.paradigm.patches_per_slice);
    }

    if (j.contains("augmentation")) {
      c.augmentation = parse_augmentation(j.at("augmentation").get<std::string>());
    }

    if (j.contains("metrics")) {
      const Json& m = j.at("metrics");
      detail::require_known_keys(
          m, "metrics", {"k1", "k2", "dynamic_range", "window", "max_ct", "mask_policy"});
      detail::assign_if(m, "k1", c.metrics.k1);
      detail::assign_if(m, "k2", c.metrics.k2);
      detail::assign_if(m, "dynamic_range", c.metrics.L);
      detail::assign_if(m, "window", c.metrics.window);
      detail::assign_if(m, "max_ct", c.metrics.max_ct);
      if (m.contains("mask_policy")) {
        c.metrics.mask_policy = parse_mask_policy(m.at("mask_policy").get<std::string>());
      }
    }

    detail::assign_if(j, "infer_batch", c.infer_batch);
    detail::assign_if(j, "patch_stride", c.patch_stride);
    detail::assign_if(j, "full_unseen_eval", c.full_unseen_eval);

    c.validate();
    return c;
  } catch (const Json::exception& e) {
    fail_config(cat("config: ", e.what()));
  }
}

inline Json experiment_to_json(const ExperimentConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["train_centres"] = Json::array();
  for (const CentreSpec& s : c.train_centres) j["train_centres"].push_back(centre_to_json(s));
  j["unseen_centre"] = centre_to_json(c.unseen_centre);
  j["preprocess"] = {{"target_dim", c.preprocess.target_dim},
                     {"crop_dims", std::vector<int64_t>(c.preprocess.crop_dims.begin(),
                                                        c.preprocess.crop_dims.end())},
                     {"target_voxel", c.preprocess.target_voxel},
                     {"bias_poly_degree", c.preprocess.bias_poly_degree},
                     {"bias_iters", c.preprocess.bias_iters},
                     {"bias_ridge", c.preprocess.bias_ridge}};
  j["model"] = {{"input_size", c.model.input_size},
                {"depth", c.model.depth},
                {"base_channels", c.model.base_channels},
                {"stem_kernel", c.model.stem_kernel},
                {"blocks_per_level", c.model.blocks_per_level},
                {"bn_momentum", c.model.bn_momentum},
                {"bn_eps", c.model.bn_eps}};
  j["federation"] = {{"strategy", strategy_name(c.fed.strategy)},
                     {"rounds", c.fed.rounds},
                     {"local_epochs", c.fed.local_epochs},
                     {"batch_size", c.fed.batch_size},
                     {"adam",
                      {{"lr", c.fed.adam.lr},
                       {"beta1", c.fed.adam.beta1},
                       {"beta2", c.fed.adam.beta2},
                       {"eps", c.fed.adam.eps}}},
                     {"mu", c.fed.mu},
                     {"server_lr", c.fed.server_lr},
                     {"server_momentum", c.fed.server_momentum},
                     {"yogi",
                      {{"eta", c.fed.yogi_eta},
                       {"beta1", c.fed.yogi_beta1},
                       {"beta2", c.fed.yogi_beta2},
                       {"tau", c.fed.yogi_tau}}}};
  j["paradigm"] = {{"kind", paradigm_kind_name(c.paradigm.kind)},
                   {"plane", plane_name(c.paradigm.plane)},
                   {"patch_size", c.paradigm.patch_size},
                   {"patches_per_slice", c.paradigm.patches_per_slice}};
  j["augmentation"] = augmentation_name(c.augmentation);
  j["metrics"] = {{"k1", c.metrics.k1},
                  {"k2", c.metrics.k2},
                  {"dynamic_range", c.metrics.L},
                  {"window", c.metrics.window},
                  {"max_ct", c.metrics.max_ct},
                  {"mask_policy", mask_policy_name(c.metrics.mask_policy)}};
  j["infer_batch"] = c.infer_batch;
  j["patch_stride"] = c.patch_stride;
  j["full_unseen_eval"] = c.full_unseen_eval;
  return j;
}

inline Json parse_json_file(const std::filesystem::path& p) {
  std::ifstream f(p);
  FV_CHECK(f.is_open(), "cannot open config file: ", p.string());
  try {
    return Json::parse(f);
  } catch (const Json::exception& e) {
    fail_config(cat("config: invalid JSON in ", p.string(), ": ", e.what()));
  }
}

}  // namespace fedvox
