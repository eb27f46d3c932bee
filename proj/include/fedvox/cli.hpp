#pragma once

// Command-line front end. Subcommands: gen-data, preprocess, train, evaluate,
// compare-strategies. Exit codes: 0 success, 2 configuration or usage error,
// 3 runtime failure (I/O, corrupt files, diverged training). Report files
// contain no timestamps or environment echoes, so rerunning a command with
// the same inputs reproduces them byte for byte.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fedvox/config.hpp"
#include "fedvox/experiment.hpp"
#include "fedvox/io.hpp"

namespace fedvox {

// Relative output paths land under $FEDVOX_OUTPUT_DIR when it is set.
inline std::filesystem::path resolve_out_dir(const std::string& out) {
  FV_CHECK(!out.empty(), "output path must not be empty");
  std::filesystem::path p(out);
  if (p.is_absolute()) return p;
  if (const char* env = std::getenv("FEDVOX_OUTPUT_DIR"); env && *env) {
    return std::filesystem::path(env) / p;
  }
  return p;
}

namespace cli_detail {

inline std::string patient_dir_name(int64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "patient_%03lld", static_cast<long long>(i));
  return buf;
}

inline std::string join_ids(const std::vector<int64_t>& v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) os << (i ? " " : "") << v[i];
  return os.str();
}

// --- gen-data ---------------------------------------------------------------

struct GenDataOpts {
  std::string centre;
  uint64_t seed = 1;
  std::string out = "data";
  int64_t patients = 0;  // 0 = preset default
  int64_t grid = 0;
};

inline void run_gen_data(const GenDataOpts& o) {
  FV_CHECK(o.centre.size() == 1, "gen-data: --centre expects a single letter A..E, got '",
           o.centre, "'");
  CentreSpec spec = CentreSpec::preset(o.centre[0]);
  if (o.patients > 0) spec.n_patients = o.patients;
  if (o.grid > 0) spec.grid_dim = o.grid;
  spec.validate();

  const CentreCohort cohort = generate_centre(spec, o.seed);
  const std::filesystem::path dir = resolve_out_dir(o.out) / ("centre_" + spec.centre_id);
  std::filesystem::create_directories(dir);
  for (size_t i = 0; i < cohort.patients.size(); ++i) {
    const std::filesystem::path pd = dir / patient_dir_name(int64_t(i));
    std::filesystem::create_directories(pd);
    save_volume(pd / "mri", cohort.patients[i].mri);
    save_volume(pd / "ct", cohort.patients[i].ct);
    save_volume(pd / "mask", cohort.patients[i].mask);
  }
  std::ostringstream manifest;
  manifest << "centre " << spec.centre_id << '\n'
           << "seed " << o.seed << '\n'
           << "patients " << spec.n_patients << '\n'
           << "grid " << spec.grid_dim << '\n'
           << "train " << join_ids(cohort.train_idx) << '\n'
           << "val " << join_ids(cohort.val_idx) << '\n'
           << "test " << join_ids(cohort.test_idx) << '\n';
  write_text_file(dir / "cohort.txt", manifest.str());
  std::cout << "wrote " << cohort.patients.size() << " patients to " << dir.string() << "\n";
}

// --- preprocess --------------------------------------------------------------

struct PreprocessOpts {
  std::string in;
  std::string out = "preprocessed";
  int64_t target = 64;
};

inline void run_preprocess(const PreprocessOpts& o) {
  const std::filesystem::path src(o.in);
  FV_CHECK(std::filesystem::is_directory(src), "preprocess: input directory not found: ",
           src.string());
  std::vector<std::filesystem::path> patient_dirs;
  for (const auto& e : std::filesystem::directory_iterator(src)) {
    if (e.is_directory() && e.path().filename().string().rfind("patient_", 0) == 0) {
      patient_dirs.push_back(e.path());
    }
  }
  FV_CHECK(!patient_dirs.empty(), "preprocess: no patient_* directories in ", src.string());
  std::sort(patient_dirs.begin(), patient_dirs.end());

  const PreprocessConfig cfg = PreprocessConfig::for_target(o.target);
  const std::filesystem::path outdir = resolve_out_dir(o.out);
  for (const auto& pd : patient_dirs) {
    const Volume<float> mri = load_volume(pd / "mri");
    const Volume<float> ct = load_volume(pd / "ct");
    const Volume<float> mask = load_volume(pd / "mask");
    const PreprocessedPatient pre = preprocess_patient(mri, ct, mask, cfg);
    const std::filesystem::path od = outdir / pd.filename();
    std::filesystem::create_directories(od);
    save_volume(od / "mri", pre.mri);
    save_volume(od / "ct", pre.ct);
    save_volume(od / "mask", pre.mask);
    write_text_file(od / "flags.txt",
                    cat("mri_was_constant ", pre.mri_was_constant ? 1 : 0, "\n"));
  }
  std::cout << "preprocessed " << patient_dirs.size() << " patients to " << outdir.string()
            << "\n";
}

// --- report writers ----------------------------------------------------------

inline std::string rounds_csv(const ExperimentResult& res, size_t n_clients) {
  std::ostringstream os;
  os << "round,train_loss";
  for (size_t k = 0; k < n_clients; ++k) os << ",client" << k << "_loss";
  for (const char* grp : {"val", "unseen"}) {
    for (const char* met : {"mae", "ssim", "psnr"}) {
      os << ',' << grp << '_' << met << "_median" << ',' << grp << '_' << met << "_q1" << ','
         << grp << '_' << met << "_q3";
    }
  }
  os << '\n';
  for (const RoundRecord& rr : res.rounds) {
    os << rr.round << ',' << fmt_num(rr.train_loss);
    for (size_t k = 0; k < n_clients; ++k) {
      os << ','
         << fmt_num(k < rr.client_loss.size() ? rr.client_loss[k]
                                              : std::numeric_limits<double>::quiet_NaN());
    }
    for (const CohortSummary* grp : {&rr.val, &rr.unseen}) {
      for (const MetricSummary* m : {&grp->mae, &grp->ssim, &grp->psnr}) {
        os << ',' << fmt_num(m->median) << ',' << fmt_num(m->q1) << ',' << fmt_num(m->q3);
      }
    }
    os << '\n';
  }
  return os.str();
}

inline Json summary_json(const MetricSummary& m) {
  return {{"median", m.median}, {"q1", m.q1}, {"q3", m.q3}};
}

inline Json summary_json(const CohortSummary& c) {
  return {{"mae", summary_json(c.mae)},
          {"ssim", summary_json(c.ssim)},
          {"psnr", summary_json(c.psnr)}};
}

inline Json experiment_summary_json(const ExperimentConfig& cfg, const FederatedDataset& data,
                                    const ExperimentResult& res) {
  Json s;
  s["config"] = experiment_to_json(cfg);
  s["clients"] = Json::array();
  for (const ClientData& c : data.clients) {
    s["clients"].push_back({{"id", c.client_id},
                            {"centre", c.centre_id},
                            {"train_slices", c.train.size()},
                            {"val_patients", c.val.size()}});
  }
  s["unseen_patients"] = data.unseen.size();
  s["rounds_completed"] = res.rounds.size() - 1;
  s["per_plane_models"] = res.per_plane_models;
  s["best_round"] = res.best_round;
  s["best_unseen"] = summary_json(res.rounds[size_t(res.best_round)].unseen);
  s["final_unseen"] = summary_json(res.rounds.back().unseen);
  s["final_val"] = summary_json(res.rounds.back().val);
  return s;
}

// --- train -------------------------------------------------------------------

struct TrainOpts {
  std::string config;
  std::string out = "run";
};

inline void run_train(const TrainOpts& o) {
  const ExperimentConfig cfg = experiment_from_json(parse_json_file(o.config));
  const std::filesystem::path dir = resolve_out_dir(o.out);
  std::filesystem::create_directories(dir);

  const FederatedDataset data = prepare_dataset(cfg);
  for (const ClientData& c : data.clients) {
    std::cout << "client " << c.client_id << " (centre " << c.centre_id << "): "
              << c.train.size() << " training slices, " << c.val.size()
              << " validation patients\n";
  }
  std::cout << "unseen centre " << cfg.unseen_centre.centre_id << ": " << data.unseen.size()
            << " evaluation patients\n";

  const int64_t total = cfg.fed.rounds;
  const ExperimentResult res = run_experiment(cfg, data, [&](const RoundRecord& rr) {
    std::cout << "round " << rr.round << "/" << total;
    if (rr.round > 0) std::cout << "  train_loss " << fmt_num(rr.train_loss);
    std::cout << "  val_mae " << fmt_num(rr.val.mae.median) << "  unseen_mae "
              << fmt_num(rr.unseen.mae.median) << "\n";
  });

  const Json cfg_json = experiment_to_json(cfg);
  write_text_file(dir / "config.json", cfg_json.dump(2) + "\n");
  write_text_file(dir / "rounds.csv", rounds_csv(res, data.clients.size()));
  write_text_file(dir / "summary.json", experiment_summary_json(cfg, data, res).dump(2) + "\n");
  CheckpointData ck;
  ck.config_json = cfg_json.dump();
  ck.per_plane_models = res.per_plane_models;
  ck.best_round = res.best_round;
  ck.best_unseen_mae = res.best_unseen_mae;
  ck.final_states = res.final_states;
  ck.best_states = res.best_states;
  save_checkpoint(dir / "model.ckpt", ck);

  std::cout << "best round " << res.best_round << " (unseen median MAE "
            << fmt_num(res.best_unseen_mae) << ")\noutputs in " << dir.string() << "\n";
}

// --- evaluate ----------------------------------------------------------------

struct EvaluateOpts {
  std::string checkpoint;
  std::string centre;  // empty = the stored unseen centre
  std::string which = "best";
  bool full = false;
  std::string out;  // empty = print only
};

inline void run_evaluate(const EvaluateOpts& o) {
  const CheckpointData ck = load_checkpoint(o.checkpoint);
  Json jc;
  try {
    jc = Json::parse(ck.config_json);
  } catch (const Json::exception& e) {
    fail_runtime(cat("checkpoint: embedded config is not valid JSON: ", e.what()));
  }
  const ExperimentConfig cfg = experiment_from_json(jc);

  CentreSpec spec;
  if (o.centre.empty() || o.centre == cfg.unseen_centre.centre_id) {
    spec = cfg.unseen_centre;
  } else {
    bool found = false;
    for (const CentreSpec& s : cfg.train_centres) {
      if (s.centre_id == o.centre) {
        spec = s;
        found = true;
        break;
      }
    }
    if (!found) {
      FV_CHECK(o.centre.size() == 1,
               "evaluate: --centre must name a centre from the checkpointed config or a preset "
               "letter A..E, got '", o.centre, "'");
      spec = CentreSpec::preset(o.centre[0]);
    }
  }

  const auto& states = o.which == "final" ? ck.final_states : ck.best_states;
  std::vector<UNet<float>> models;
  models.reserve(states.size());
  std::vector<UNet<float>*> model_ptrs;
  for (const auto& st : states) {
    models.emplace_back(cfg.model, 0);
    models.back().unflatten(st);
  }
  for (auto& m : models) model_ptrs.push_back(&m);

  const CentreCohort cohort = generate_centre(spec, cfg.seed);
  std::vector<int64_t> idx = cohort.test_idx;
  if (o.full) {
    idx.clear();
    for (int64_t i = 0; i < spec.n_patients; ++i) idx.push_back(i);
  }

  std::cout << "evaluating " << o.which << " model on centre " << spec.centre_id << " ("
            << idx.size() << " patients, " << (o.full ? "all" : "test split") << ")\n";
  std::vector<PatientMetrics> all;
  for (int64_t pi : idx) {
    const PhantomPair& pp = cohort.patients[size_t(pi)];
    const PreprocessedPatient pre = preprocess_patient(pp.mri, pp.ct, pp.mask, cfg.preprocess);
    const EvalPatient ep{spec.centre_id, pi, pre.mri, pre.ct, pre.mask};
    all.push_back(evaluate_patient(model_ptrs, ck.per_plane_models, ep, cfg));
    const PatientMetrics& pm = all.back();
    std::cout << "patient " << pm.patient_id << "  mae " << fmt_num(pm.mae) << "  ssim "
              << fmt_num(pm.ssim) << "  psnr " << fmt_num(pm.psnr) << "\n";
  }
  const CohortSummary sum = summarize(all);
  std::cout << "median  mae " << fmt_num(sum.mae.median) << "  ssim " << fmt_num(sum.ssim.median)
            << "  psnr " << fmt_num(sum.psnr.median) << "\n";

  if (!o.out.empty()) {
    const std::filesystem::path dir = resolve_out_dir(o.out);
    std::filesystem::create_directories(dir);
    Json r;
    r["which"] = o.which;
    r["centre"] = spec.centre_id;
    r["full_cohort"] = o.full;
    r["patients"] = Json::array();
    for (const PatientMetrics& pm : all) {
      r["patients"].push_back(
          {{"id", pm.patient_id}, {"mae", pm.mae}, {"ssim", pm.ssim}, {"psnr", pm.psnr}});
    }
    r["summary"] = summary_json(sum);
    write_text_file(dir / "evaluation.json", r.dump(2) + "\n");
    std::cout << "wrote " << (dir / "evaluation.json").string() << "\n";
  }
}

// --- compare-strategies --------------------------------------------------------

struct CompareOpts {
  std::string config;
  std::string out = "comparison";
  int64_t repeats = 5;
  std::string strategies;  // comma list; empty = all five
};

struct RepeatRow {
  Strategy strategy;
  int64_t repeat;
  uint64_t seed;
  int64_t best_round;
  double best_mae;
  double final_mae;
  double final_ssim;
};

inline void run_compare(const CompareOpts& o) {
  FV_CHECK(o.repeats >= 1, "compare-strategies: --repeats must be >= 1, got ", o.repeats);
  std::vector<Strategy> strategies;
  if (o.strategies.empty()) {
    strategies = {Strategy::kFedAvg, Strategy::kFedAvgM, Strategy::kFedProx, Strategy::kFedYogi,
                  Strategy::kFedBN};
  } else {
    std::istringstream ss(o.strategies);
    std::string tok;
    while (std::getline(ss, tok, ',')) strategies.push_back(parse_strategy(tok));
    FV_CHECK(!strategies.empty(), "compare-strategies: --strategies list is empty");
  }

  const ExperimentConfig base = experiment_from_json(parse_json_file(o.config));
  std::vector<RepeatRow> rows;
  for (int64_t r = 0; r < o.repeats; ++r) {
    ExperimentConfig cfg = base;
    cfg.seed = hash_u64(base.seed, stream::kRepeat, uint64_t(r));
    // the dataset depends only on the seed, so all strategies share it: paired runs
    const FederatedDataset data = prepare_dataset(cfg);
    for (Strategy s : strategies) {
      cfg.fed.strategy = s;
      const ExperimentResult res = run_experiment(cfg, data);
      rows.push_back({s, r, cfg.seed, res.best_round, res.best_unseen_mae,
                      res.rounds.back().unseen.mae.median, res.rounds.back().unseen.ssim.median});
      std::cout << strategy_name(s) << "  repeat " << r << "  best_mae "
                << fmt_num(res.best_unseen_mae) << " (round " << res.best_round << ")\n";
    }
  }

  const std::filesystem::path dir = resolve_out_dir(o.out);
  std::filesystem::create_directories(dir);

  std::ostringstream rep;
  rep << "strategy,repeat,seed,best_round,best_mae,final_mae,final_ssim\n";
  for (Strategy s : strategies) {
    for (const RepeatRow& row : rows) {
      if (row.strategy != s) continue;
      rep << strategy_name(s) << ',' << row.repeat << ',' << row.seed << ',' << row.best_round
          << ',' << fmt_num(row.best_mae) << ',' << fmt_num(row.final_mae) << ','
          << fmt_num(row.final_ssim) << '\n';
    }
  }
  write_text_file(dir / "strategy_repeats.csv", rep.str());

  auto mean_of = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / double(v.size());
  };
  auto sample_std = [&](const std::vector<double>& v, double m) {
    if (v.size() < 2) return 0.0;
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / double(v.size() - 1));
  };

  std::ostringstream agg;
  agg << "strategy,repeats,best_mae_mean,best_mae_std,final_mae_mean,final_mae_std,"
         "final_ssim_mean\n";
  for (Strategy s : strategies) {
    std::vector<double> best, fin, ssim;
    for (const RepeatRow& row : rows) {
      if (row.strategy != s) continue;
      best.push_back(row.best_mae);
      fin.push_back(row.final_mae);
      ssim.push_back(row.final_ssim);
    }
    const double bm = mean_of(best), fm = mean_of(fin);
    agg << strategy_name(s) << ',' << best.size() << ',' << fmt_num(bm) << ','
        << fmt_num(sample_std(best, bm)) << ',' << fmt_num(fm) << ','
        << fmt_num(sample_std(fin, fm)) << ',' << fmt_num(mean_of(ssim)) << '\n';
  }
  write_text_file(dir / "strategies.csv", agg.str());
  std::cout << "outputs in " << dir.string() << "\n";
}

}  // namespace cli_detail

inline int cli_main(int argc, const char* const* argv) {
  CLI::App app{"deterministic cross-silo federated MRI-to-CT simulation workbench"};
  app.require_subcommand(1);

  cli_detail::GenDataOpts gen;
  CLI::App* cgen = app.add_subcommand("gen-data", "generate one centre's phantom cohort");
  cgen->add_option("--centre", gen.centre, "centre preset letter A..E")->required();
  cgen->add_option("--seed", gen.seed, "master seed (default 1)");
  cgen->add_option("--out", gen.out, "output directory (default data)");
  cgen->add_option("--patients", gen.patients, "override patient count");
  cgen->add_option("--grid", gen.grid, "override grid dimension");
  cgen->callback([&] { cli_detail::run_gen_data(gen); });

  cli_detail::PreprocessOpts pre;
  CLI::App* cpre = app.add_subcommand("preprocess", "harmonize one centre's raw volumes");
  cpre->add_option("--in", pre.in, "centre directory with patient_* subdirectories")->required();
  cpre->add_option("--out", pre.out, "output directory (default preprocessed)");
  cpre->add_option("--target", pre.target, "cubic output extent (default 64)");
  cpre->callback([&] { cli_detail::run_preprocess(pre); });

  cli_detail::TrainOpts tr;
  CLI::App* ctr = app.add_subcommand("train", "run a federated training experiment");
  ctr->add_option("--config", tr.config, "experiment config JSON file")->required();
  ctr->add_option("--out", tr.out, "output directory (default run)");
  ctr->callback([&] { cli_detail::run_train(tr); });

  cli_detail::EvaluateOpts ev;
  CLI::App* cev = app.add_subcommand("evaluate", "evaluate a checkpointed model on a centre");
  cev->add_option("--checkpoint", ev.checkpoint, "checkpoint file from train")->required();
  cev->add_option("--centre", ev.centre,
                  "centre id from the stored config, or a preset letter (default: unseen centre)");
  cev->add_option("--which", ev.which, "model selection: best or final (default best)")
      ->check(CLI::IsMember({"best", "final"}));
  cev->add_flag("--full", ev.full, "evaluate every patient, not just the test split");
  cev->add_option("--out", ev.out, "directory for evaluation.json (default: print only)");
  cev->callback([&] { cli_detail::run_evaluate(ev); });

  cli_detail::CompareOpts cmp;
  CLI::App* ccmp =
      app.add_subcommand("compare-strategies", "run repeated experiments across strategies");
  ccmp->add_option("--config", cmp.config, "experiment config JSON file")->required();
  ccmp->add_option("--out", cmp.out, "output directory (default comparison)");
  ccmp->add_option("--repeats", cmp.repeats, "seeded repeats per strategy (default 5)");
  ccmp->add_option("--strategies", cmp.strategies,
                   "comma-separated subset (default: all five)");
  ccmp->callback([&] { cli_detail::run_compare(cmp); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

inline int cli_main(const std::vector<std::string>& args) {
  std::vector<std::string> full;
  full.reserve(args.size() + 1);
  full.push_back("fedvox");
  full.insert(full.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  argv.reserve(full.size());
  for (const std::string& s : full) argv.push_back(s.c_str());
  return cli_main(int(argv.size()), argv.data());
}

}  // namespace fedvox
