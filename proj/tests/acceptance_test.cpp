// Acceptance gate: every shipped guarantee checked at its stated tolerance,
// one [PASS]/[FAIL] line per criterion. Exit code is the number of failures.
//
// Run all criteria (the default) or a subset by number:
//   acceptance_test          # criteria 1..10
//   acceptance_test 2 5 10   # just those
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <set>
#include <string>
#include <vector>

#include "fedvox/cli.hpp"
#include "support/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace fedvox;

namespace {

int g_failures = 0;

void report(int num, const char* what, bool ok, const std::string& detail) {
  std::printf("[%s] criterion %2d: %s%s%s\n", ok ? "PASS" : "FAIL", num, what,
              detail.empty() ? "" : " -- ", detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor<double> projection_like(const Tensor<double>& y, Rng& rng) {
  Tensor<double> r(y.shape);
  for (auto& v : r.data) v = rng.uniform(-1.0, 1.0);
  return r;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) acc += a.data[i] * b.data[i];
  return acc;
}

// --------------------------------------------------------------------------
// 1. Gradient correctness: every layer in f64 against central finite
//    differences (per-layer < 1e-6), plus the full micro network (< 1e-4),
//    all inside a two-minute budget.
void criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  using testsupport::max_rel_error_fd;
  using testsupport::random_tensor;
  using testsupport::random_tensor_off_kink;
  double worst_layer = 0.0;

  for (uint64_t seed = 0; seed < 3; ++seed) {
    // convolution (1x1 and 3x3 kernels)
    for (int64_t k : {int64_t(1), int64_t(3)}) {
      Rng rng(hash_u64(0xaccc01, seed, uint64_t(k)));
      auto x = random_tensor({2, 3, 6, 5}, rng);
      auto w = random_tensor({4, 3, k, k}, rng);
      auto b = random_tensor({4}, rng);
      auto r = projection_like(conv2d_forward(x, w, b), rng);
      Conv2dCtx<double> ctx;
      conv2d_forward(x, w, b, &ctx);
      Tensor<double> gw = Tensor<double>::zeros(w.shape), gb = Tensor<double>::zeros(b.shape);
      auto gx = conv2d_backward(r, ctx, w, gw, gb);
      auto loss = [&]() { return dot(conv2d_forward(x, w, b), r); };
      worst_layer =
          std::max(worst_layer, max_rel_error_fd({&x, &w, &b}, {&gx, &gw, &gb}, loss, rng, 12));
    }

    // batch normalization, training mode (batch statistics)
    {
      Rng rng(hash_u64(0xaccc02, seed));
      auto x = random_tensor({3, 2, 4, 4}, rng);
      auto gamma = random_tensor({2}, rng, 0.5, 1.5);
      auto beta = random_tensor({2}, rng);
      Tensor<double> rm = Tensor<double>::zeros({2});
      Tensor<double> rv = Tensor<double>::full({2}, 1.0);
      Tensor<double> r;
      {
        auto rm2 = rm, rv2 = rv;
        r = projection_like(batchnorm2d_forward(x, gamma, beta, rm2, rv2, true, 0.1, 1e-5), rng);
      }
      BatchNormCtx<double> ctx;
      {
        auto rm2 = rm, rv2 = rv;
        batchnorm2d_forward(x, gamma, beta, rm2, rv2, true, 0.1, 1e-5, &ctx);
      }
      Tensor<double> gg = Tensor<double>::zeros({2}), gb = Tensor<double>::zeros({2});
      auto gx = batchnorm2d_backward(r, ctx, gamma, gg, gb);
      auto loss = [&]() {
        auto rm2 = rm, rv2 = rv;
        return dot(batchnorm2d_forward(x, gamma, beta, rm2, rv2, true, 0.1, 1e-5), r);
      };
      worst_layer = std::max(
          worst_layer, max_rel_error_fd({&x, &gamma, &beta}, {&gx, &gg, &gb}, loss, rng, 12));
    }

    // batch normalization, inference mode (running statistics)
    {
      Rng rng(hash_u64(0xaccc03, seed));
      auto x = random_tensor({2, 3, 3, 3}, rng);
      auto gamma = random_tensor({3}, rng, 0.5, 1.5);
      auto beta = random_tensor({3}, rng);
      Tensor<double> rm = random_tensor({3}, rng, -0.2, 0.2);
      Tensor<double> rv = random_tensor({3}, rng, 0.5, 1.5);
      BatchNormCtx<double> ctx;
      auto y = batchnorm2d_forward(x, gamma, beta, rm, rv, false, 0.1, 1e-5, &ctx);
      auto r = projection_like(y, rng);
      Tensor<double> gg = Tensor<double>::zeros({3}), gb = Tensor<double>::zeros({3});
      auto gx = batchnorm2d_backward(r, ctx, gamma, gg, gb);
      auto loss = [&]() {
        return dot(batchnorm2d_forward(x, gamma, beta, rm, rv, false, 0.1, 1e-5), r);
      };
      worst_layer = std::max(
          worst_layer, max_rel_error_fd({&x, &gamma, &beta}, {&gx, &gg, &gb}, loss, rng, 12));
    }

    // rectifier (inputs kept away from the kink)
    {
      Rng rng(hash_u64(0xaccc04, seed));
      auto x = random_tensor_off_kink({2, 2, 4, 4}, rng);
      ReluCtx<double> ctx;
      auto y = relu_forward(x, &ctx);
      auto r = projection_like(y, rng);
      auto gx = relu_backward(r, ctx);
      auto loss = [&]() { return dot(relu_forward(x), r); };
      worst_layer = std::max(worst_layer, max_rel_error_fd({&x}, {&gx}, loss, rng, 12));
    }

    // max pooling (continuous random inputs; ties have measure zero)
    {
      Rng rng(hash_u64(0xaccc05, seed));
      auto x = random_tensor({2, 2, 6, 4}, rng);
      MaxPoolCtx ctx;
      auto y = maxpool2d_forward(x, &ctx);
      auto r = projection_like(y, rng);
      auto gx = maxpool2d_backward(r, ctx);
      auto loss = [&]() { return dot(maxpool2d_forward(x), r); };
      worst_layer = std::max(worst_layer, max_rel_error_fd({&x}, {&gx}, loss, rng, 12));
    }

    // nearest-neighbour upsampling
    {
      Rng rng(hash_u64(0xaccc06, seed));
      auto x = random_tensor({2, 3, 3, 4}, rng);
      auto y = upsample2d_forward(x);
      auto r = projection_like(y, rng);
      auto gx = upsample2d_backward(r);
      auto loss = [&]() { return dot(upsample2d_forward(x), r); };
      worst_layer = std::max(worst_layer, max_rel_error_fd({&x}, {&gx}, loss, rng, 12));
    }

    // channel concatenation / split
    {
      Rng rng(hash_u64(0xaccc07, seed));
      auto a = random_tensor({2, 2, 3, 3}, rng);
      auto b = random_tensor({2, 3, 3, 3}, rng);
      auto r = projection_like(concat_channels(a, b), rng);
      auto [ga, gb] = split_channels(r, a.shape[1]);
      auto loss = [&]() { return dot(concat_channels(a, b), r); };
      worst_layer = std::max(worst_layer, max_rel_error_fd({&a, &b}, {&ga, &gb}, loss, rng, 12));
    }

    // mean absolute error loss (targets offset away from the kink)
    {
      Rng rng(hash_u64(0xaccc08, seed));
      auto pred = random_tensor({2, 1, 4, 4}, rng);
      auto target = pred;
      for (auto& v : target.data) v += (rng.uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0) * rng.uniform(0.05, 0.5);
      L1LossCtx<double> lctx;
      l1_loss(pred, target, &lctx);
      auto gx = l1_loss_backward(lctx);
      auto loss = [&]() { return l1_loss(pred, target); };
      worst_layer = std::max(worst_layer, max_rel_error_fd({&pred}, {&gx}, loss, rng, 12));
    }

    // proximal penalty
    {
      Rng rng(hash_u64(0xaccc09, seed));
      auto value = random_tensor({20}, rng);
      auto anchor = random_tensor({20}, rng);
      Tensor<double> grad = Tensor<double>::zeros({20});
      prox_penalty_accumulate(value, anchor, 0.7, grad);
      auto loss = [&]() {
        Tensor<double> sink = Tensor<double>::zeros({20});
        return prox_penalty_accumulate(value, anchor, 0.7, sink);
      };
      worst_layer = std::max(worst_layer, max_rel_error_fd({&value}, {&grad}, loss, rng, 12));
    }
  }

  // full micro network end to end
  double worst_net = 0.0;
  {
    UNetConfig cfg{8, 2, 2, 3, 1};
    UNet<double> net(cfg, 21);
    Tensor<double> x({2, 1, 8, 8});
    Tensor<double> target({2, 1, 8, 8});
    Rng rng(31);
    for (auto& v : x.data) v = rng.uniform(-1.0, 1.0);
    for (auto& v : target.data) v = rng.uniform(-1.0, 1.0);

    std::vector<Tensor<double>*> vars;
    std::vector<const Tensor<double>*> analytic;
    net.for_each_param([&](const std::string&, Parameter<double>& p) {
      if (is_trainable(p.tag.kind)) {
        vars.push_back(&p.value);
        analytic.push_back(&p.grad);
      }
    });

    auto loss = [&]() -> double {
      UNetTape<double> tape;
      Tensor<double> y = net.forward(x, true, &tape);
      return l1_loss(y, target);
    };

    net.zero_grad();
    UNetTape<double> tape;
    Tensor<double> y = net.forward(x, true, &tape);
    L1LossCtx<double> lctx;
    l1_loss(y, target, &lctx);
    Tensor<double> gx = net.backward(tape, l1_loss_backward(lctx));
    vars.push_back(&x);
    analytic.push_back(&gx);

    Rng pick(77);
    worst_net = testsupport::max_rel_error_fd(vars, analytic, loss, pick, 6, 1e-5);
  }

  const double el = seconds_since(t0);
  report(1, "layer and network gradients match finite differences",
         worst_layer < 1e-6 && worst_net < 1e-4 && el < 120.0,
         fmt("max layer rel err %.2e (<1e-6), full net %.2e (<1e-4), %.1f s (<120)", worst_layer,
             worst_net, el));
}

// --------------------------------------------------------------------------
// 2. Aggregation exactness: weighted averaging against a brute-force f64
//    oracle (bitwise, K = 2/4/8); server momentum at beta 0 and unit lr
//    bit-identical to plain averaging; the adaptive server optimizer against
//    a hand-unrolled two-round scalar recurrence to 1e-12.
ModelState random_state(uint64_t seed,
                        const std::vector<std::pair<std::string, std::vector<int64_t>>>& layout) {
  Rng rng(seed);
  ModelState s;
  for (const auto& [name, shape] : layout) {
    Parameter<float> p{Tensor<float>(shape)};
    for (auto& v : p.value.data) v = float(rng.uniform(-1.0, 1.0));
    s.append(name, std::move(p));
  }
  return s;
}

void criterion2() {
  const std::vector<std::pair<std::string, std::vector<int64_t>>> layout = {
      {"a.weight", {3, 2}}, {"a.bias", {4}}, {"b.weight", {2, 2, 2}}};

  // (a) brute-force oracle: element-outer, client-inner, f64 accumulation
  bool avg_ok = true;
  for (int k : {2, 4, 8}) {
    std::vector<ClientUpdate> ups;
    int64_t total = 0;
    for (int c = 0; c < k; ++c) {
      ClientUpdate u;
      u.client_id = c;
      u.n_samples = 1 + (7 * c + int64_t(k)) % 9;
      u.state = random_state(hash_u64(0xa660, uint64_t(k), uint64_t(c)), layout);
      total += u.n_samples;
      ups.push_back(std::move(u));
    }
    const ModelState got = fed_avg(ups);
    for (size_t j = 0; j < layout.size() && avg_ok; ++j) {
      for (size_t i = 0; i < got.items[j].second.value.data.size(); ++i) {
        double acc = 0.0;
        for (const auto& u : ups)
          acc += (double(u.n_samples) / double(total)) *
                 double(u.state.items[j].second.value.data[i]);
        if (got.items[j].second.value.data[i] != float(acc)) {
          avg_ok = false;
          break;
        }
      }
    }
  }

  // (b) momentum with beta = 0, lr = 1: state must equal the plain average
  bool avgm_ok = true;
  {
    FederationConfig fc;
    fc.strategy = Strategy::kFedAvgM;
    fc.server_lr = 1.0;
    fc.server_momentum = 0.0;
    ModelState state = random_state(99, layout);
    ServerOptState opt;
    for (uint64_t r = 0; r < 2; ++r) {
      std::vector<ClientUpdate> ups;
      for (int c = 0; c < 3; ++c) {
        ClientUpdate u;
        u.client_id = c;
        u.n_samples = c + 1 + int64_t(r);
        u.state = random_state(hash_u64(500 + r, uint64_t(c)), layout);
        ups.push_back(std::move(u));
      }
      const ModelState avg = fed_avg(ups);
      server_update(state, opt, avg, fc);
      avgm_ok = avgm_ok && bit_equal(state, avg);
    }
  }

  // (c) adaptive optimizer vs a hand-unrolled scalar recurrence (two rounds):
  //     d = a - w;  m = b1*m + (1-b1)*d;  v -= (1-b2)*d^2*sign(v - d^2);
  //     w = float(w + eta*m/(sqrt(v)+tau)),  m0 = 0, v0 = tau^2.
  double yogi_delta = 0.0;
  {
    const std::vector<float> w0 = {0.5f, -0.25f, 1.0f, 0.0f, 2.0f};
    const std::vector<float> a1 = {0.6f, -0.35f, 1.001f, 0.0f, 0.5f};
    const std::vector<float> a2 = {0.55f, -0.2f, 1.002f, 0.1f, 0.75f};
    FederationConfig fc;
    fc.strategy = Strategy::kFedYogi;  // eta .03, beta1/beta2 .6, tau .01

    auto one_param = [](const std::vector<float>& v) {
      ModelState s;
      Parameter<float> p{Tensor<float>({int64_t(v.size())})};
      std::copy(v.begin(), v.end(), p.value.data.begin());
      s.append("w", std::move(p));
      return s;
    };
    ModelState state = one_param(w0);
    ServerOptState opt;
    server_update(state, opt, one_param(a1), fc);
    server_update(state, opt, one_param(a2), fc);

    const double eta = fc.yogi_eta, b1 = fc.yogi_beta1, b2 = fc.yogi_beta2, tau = fc.yogi_tau;
    for (size_t i = 0; i < w0.size(); ++i) {
      // round 1, fully unrolled
      double w = double(w0[i]);
      double d1 = double(a1[i]) - w;
      double m1 = (1.0 - b1) * d1;
      double v1 = tau * tau;
      v1 -= (1.0 - b2) * d1 * d1 * ((v1 - d1 * d1) > 0 ? 1.0 : ((v1 - d1 * d1) < 0 ? -1.0 : 0.0));
      w = double(float(w + eta * m1 / (std::sqrt(v1) + tau)));
      // round 2, fully unrolled
      double d2 = double(a2[i]) - w;
      double m2 = b1 * m1 + (1.0 - b1) * d2;
      double v2 = v1;
      v2 -= (1.0 - b2) * d2 * d2 * ((v2 - d2 * d2) > 0 ? 1.0 : ((v2 - d2 * d2) < 0 ? -1.0 : 0.0));
      w = double(float(w + eta * m2 / (std::sqrt(v2) + tau)));
      yogi_delta =
          std::max(yogi_delta, std::abs(double(state.items[0].second.value.data[i]) - w));
    }
  }

  report(2, "aggregation matches exact oracles",
         avg_ok && avgm_ok && yogi_delta <= 1e-12,
         fmt("weighted sum bitwise for K=2,4,8: %s; beta-0 momentum == plain average: %s; "
             "adaptive two-round recurrence delta %.1e (<=1e-12)",
             avg_ok ? "yes" : "NO", avgm_ok ? "yes" : "NO", yogi_delta));
}

// --------------------------------------------------------------------------
// Shared small experiment config (16^3 volumes, 2 clients; fast).
CentreSpec small_centre(const char* id, double bias_amp, double noise) {
  CentreSpec s;
  s.centre_id = id;
  s.n_patients = 5;
  s.grid_dim = 16;
  s.bias_amplitude = bias_amp;
  s.noise_sigma = noise;
  return s;
}

ExperimentConfig small_config() {
  ExperimentConfig cfg;
  cfg.seed = 11;
  cfg.train_centres = {small_centre("P", 0.05, 0.01), small_centre("Q", 0.08, 0.02)};
  cfg.unseen_centre = small_centre("U", 0.06, 0.015);
  cfg.preprocess = PreprocessConfig::for_target(16);
  cfg.model = UNetConfig{16, 2, 4, 5, 1};
  cfg.fed.rounds = 2;
  cfg.fed.batch_size = 16;
  cfg.paradigm = Paradigm::random_multi_2d();
  cfg.augmentation = AugmentPipeline::kNone;
  cfg.infer_batch = 16;
  return cfg;
}

// 3. Zero proximal weight: a full 3-round federated run under the proximal
//    strategy with mu = 0 is bit-identical to the plain-averaging strategy,
//    whose code path never touches the proximal term.
void criterion3() {
  ExperimentConfig prox_cfg = small_config();
  prox_cfg.fed.rounds = 3;
  prox_cfg.fed.strategy = Strategy::kFedProx;
  prox_cfg.fed.mu = 0.0;
  ExperimentConfig avg_cfg = prox_cfg;
  avg_cfg.fed.strategy = Strategy::kFedAvg;

  const FederatedDataset data = prepare_dataset(prox_cfg);
  const ExperimentResult a = run_experiment(prox_cfg, data);
  const ExperimentResult b = run_experiment(avg_cfg, data);

  bool same = a.final_states.size() == b.final_states.size();
  for (size_t m = 0; same && m < a.final_states.size(); ++m)
    same = bit_equal(a.final_states[m], b.final_states[m]);
  bool losses = a.rounds.size() == b.rounds.size();
  for (size_t r = 0; losses && r < a.rounds.size(); ++r) {
    losses = (a.rounds[r].train_loss == b.rounds[r].train_loss) ||
             (std::isnan(a.rounds[r].train_loss) && std::isnan(b.rounds[r].train_loss));
  }
  int64_t n_params = 0;
  if (!a.final_states.empty())
    for (const auto& it : a.final_states[0].items) n_params += it.second.value.numel();

  report(3, "zero proximal weight reproduces plain averaging bitwise", same && losses,
         fmt("3 rounds, %" PRId64 " parameters bitwise equal, per-round losses identical",
             n_params));
}

// --------------------------------------------------------------------------
// 4. Batch-norm locality: the broadcast payload under the asymmetric strategy
//    carries no batch-norm entries, while the server aggregate keeps all.
void criterion4() {
  UNet<float> net(UNetConfig{16, 2, 4, 5, 1}, 3);
  ModelState full;
  net.for_each_param([&](const std::string& name, Parameter<float>& p) {
    full.append(name, Parameter<float>(p.value, p.tag));
  });
  int64_t full_bn = 0, full_n = int64_t(full.items.size());
  for (const auto& it : full.items)
    if (is_batchnorm(it.second.tag.kind)) ++full_bn;

  const ModelState payload = filter_for_broadcast(full, Strategy::kFedBN);
  int64_t payload_bn = 0;
  for (const auto& it : payload.items)
    if (is_batchnorm(it.second.tag.kind)) ++payload_bn;

  std::vector<ClientUpdate> ups(2);
  for (int c = 0; c < 2; ++c) {
    ups[c].client_id = c;
    ups[c].n_samples = c + 1;
    UNet<float> other(UNetConfig{16, 2, 4, 5, 1}, uint64_t(10 + c));
    other.for_each_param([&](const std::string& name, Parameter<float>& p) {
      ups[c].state.append(name, Parameter<float>(p.value, p.tag));
    });
  }
  const ModelState agg = fed_avg(ups);
  int64_t agg_bn = 0;
  for (const auto& it : agg.items)
    if (is_batchnorm(it.second.tag.kind)) ++agg_bn;

  const bool ok = full_bn > 0 && payload_bn == 0 &&
                  int64_t(payload.items.size()) == 2 * net.conv_census() &&
                  agg_bn == full_bn && int64_t(agg.items.size()) == full_n;
  report(4, "batch-norm state stays client-local under fedbn", ok,
         fmt("broadcast %zu entries (0 of %" PRId64 " batch-norm), aggregate keeps all %" PRId64,
             payload.items.size(), full_bn, agg_bn));
}

// --------------------------------------------------------------------------
// 5. Voting and metric oracles on random inputs, plus two exact closed forms.
Volume<float> random_hu_volume(uint64_t seed, std::array<int64_t, 3> dims) {
  Volume<float> v(dims, {1, 1, 1}, Modality::CT);
  Rng rng(seed);
  for (auto& x : v.data) x = float(rng.uniform(-1000.0, 3000.0));
  return v;
}

void criterion5() {
  const std::array<int64_t, 3> d{8, 8, 8};
  const Volume<float> a = random_hu_volume(0x51, d);
  const Volume<float> b = random_hu_volume(0x52, d);
  Volume<float> mask(d, {1, 1, 1}, Modality::Mask);
  {
    Rng rng(0x53);
    int64_t ones = 0;
    for (auto& m : mask.data) {
      m = rng.uniform(0.0, 1.0) < 0.6 ? 1.0f : 0.0f;
      ones += m > 0;
    }
    if (ones == 0) mask.data[0] = 1.0f;
  }
  double worst = 0.0;

  // mean absolute error, both region policies
  for (MaskPolicy pol : {MaskPolicy::kBodyMask, MaskPolicy::kFullVolume}) {
    double sum = 0.0;
    int64_t n = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
      if (pol == MaskPolicy::kBodyMask && mask.data[size_t(i)] == 0.0f) continue;
      sum += std::abs(double(a.data[size_t(i)]) - double(b.data[size_t(i)]));
      ++n;
    }
    worst = std::max(worst, std::abs(mae(a, b, mask, pol) - sum / double(n)));
  }

  // peak signal-to-noise ratio
  {
    MetricConfig cfg;
    cfg.mask_policy = MaskPolicy::kFullVolume;
    double sq = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
      const double e = double(a.data[size_t(i)]) - double(b.data[size_t(i)]);
      sq += e * e;
    }
    const double want = 10.0 * std::log10(cfg.max_ct * cfg.max_ct / (sq / double(a.numel())));
    worst = std::max(worst, std::abs(psnr(a, b, mask, cfg) - want));
  }

  // windowed structural similarity against direct summation
  {
    MetricConfig cfg;  // window 7, L 4000
    const int64_t w = cfg.window;
    const double c1 = (cfg.k1 * cfg.L) * (cfg.k1 * cfg.L);
    const double c2 = (cfg.k2 * cfg.L) * (cfg.k2 * cfg.L);
    const double m = double(w * w * w);
    double acc = 0.0;
    int64_t count = 0;
    for (int64_t z0 = 0; z0 + w <= d[2]; ++z0)
      for (int64_t y0 = 0; y0 + w <= d[1]; ++y0)
        for (int64_t x0 = 0; x0 + w <= d[0]; ++x0) {
          double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
          for (int64_t z = z0; z < z0 + w; ++z)
            for (int64_t y = y0; y < y0 + w; ++y)
              for (int64_t x = x0; x < x0 + w; ++x) {
                const double u = a.at(x, y, z), v = b.at(x, y, z);
                sx += u;
                sy += v;
                sxx += u * u;
                syy += v * v;
                sxy += u * v;
              }
          const double mx = sx / m, my = sy / m;
          const double vx = sxx / m - mx * mx, vy = syy / m - my * my;
          const double cov = sxy / m - mx * my;
          acc += ((2 * mx * my + c1) * (2 * cov + c2)) /
                 ((mx * mx + my * my + c1) * (vx + vy + c2));
          ++count;
        }
    worst = std::max(worst, std::abs(ssim(a, b, cfg) - acc / double(count)));
  }

  // per-voxel median of three reconstructions
  {
    const Volume<float> c = random_hu_volume(0x54, d);
    const Volume<float> got = median_vote(a, b, c);
    for (int64_t i = 0; i < a.numel(); ++i) {
      const float x = a.data[size_t(i)], y = b.data[size_t(i)], z = c.data[size_t(i)];
      const float mid = std::max(std::min(x, y), std::min(std::max(x, y), z));
      worst = std::max(worst, double(std::abs(got.data[size_t(i)] - mid)));
    }
  }

  // overlap-averaged patch reconstruction on an 8x8 canvas
  {
    auto origins = patch_grid(8, 8, 3, 2);
    origins.push_back({1, 2});
    origins.push_back({4, 4});
    origins.push_back({0, 5});
    Rng rng(0x55);
    std::vector<Tensor<float>> patches;
    for (size_t p = 0; p < origins.size(); ++p) {
      Tensor<float> t({1, 3, 3});
      for (auto& v : t.data) v = float(rng.uniform(-1.0, 1.0));
      patches.push_back(std::move(t));
    }
    const Tensor<float> got = overlap_average(patches, origins, 8, 8);
    std::vector<double> sum(64, 0.0);
    std::vector<int> hits(64, 0);
    for (size_t p = 0; p < origins.size(); ++p)
      for (int64_t y = 0; y < 3; ++y)
        for (int64_t x = 0; x < 3; ++x) {
          const size_t i = size_t((origins[p][0] + y) * 8 + origins[p][1] + x);
          sum[i] += double(patches[p].data[size_t(y * 3 + x)]);
          hits[i] += 1;
        }
    for (size_t i = 0; i < 64; ++i)
      worst = std::max(worst, double(std::abs(got.data[i] - float(sum[i] / double(hits[i])))));
  }

  // exact closed forms
  bool ssim_self = ssim(a, a, MetricConfig{}) == 1.0;
  bool psnr_forty;
  {
    Volume<float> zeros(d, {1, 1, 1}, Modality::CT);
    Volume<float> tens = zeros;
    std::fill(tens.data.begin(), tens.data.end(), 10.0f);
    Volume<float> ones(d, {1, 1, 1}, Modality::Mask);
    std::fill(ones.data.begin(), ones.data.end(), 1.0f);
    MetricConfig cfg;
    cfg.max_ct = 1000.0;
    cfg.mask_policy = MaskPolicy::kFullVolume;
    psnr_forty = psnr(zeros, tens, ones, cfg) == 40.0;
  }

  report(5, "voting, similarity, and error metrics match naive references",
         worst < 1e-10 && ssim_self && psnr_forty,
         fmt("max |delta| vs naive %.1e (<1e-10); self-similarity == 1: %s; 40 dB closed form "
             "exact: %s",
             worst, ssim_self ? "yes" : "NO", psnr_forty ? "yes" : "NO"));
}

// --------------------------------------------------------------------------
// 6. Preprocessing contract: cubic output dimensions, exact padding
//    constants per modality, and bias correction that strictly reduces the
//    masked error against the known clean image on 20 seeded phantoms.
double masked_mae_vol(const Volume<float>& x, const Volume<float>& y, const Volume<float>& m) {
  double sum = 0.0;
  int64_t n = 0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    if (m.data[size_t(i)] == 0.0f) continue;
    sum += std::abs(double(x.data[size_t(i)]) - double(y.data[size_t(i)]));
    ++n;
  }
  return sum / double(n);
}

void criterion6() {
  // (a) cubic output for a thick-slice, axis-permuted acquisition
  bool dims_ok = true;
  {
    CentreSpec s = CentreSpec::preset('B');
    s.grid_dim = 32;
    const PhantomPair p = generate_phantom(5, s);
    const PreprocessConfig pc = PreprocessConfig::for_target(32);
    const PreprocessedPatient pre = preprocess_patient(p.mri, p.ct, p.mask, pc);
    const std::array<int64_t, 3> want{32, 32, 32};
    dims_ok = pre.mri.dims == want && pre.ct.dims == want && pre.mask.dims == want;
  }

  // (b) padding constants, voxelwise
  bool pad_ok = true;
  {
    const PreprocessConfig pc = PreprocessConfig::for_target(16);
    for (Modality mod : {Modality::CT, Modality::MR}) {
      Volume<float> v({10, 12, 9}, {1, 1, 1}, mod);
      std::fill(v.data.begin(), v.data.end(), 500.0f);
      const Volume<float> out = crop_resize_pad(v, pc);
      const float pad = mod == Modality::CT ? -1000.0f : 0.0f;
      std::array<int64_t, 3> off;
      for (int k = 0; k < 3; ++k) off[size_t(k)] = (16 - v.dims[size_t(k)]) / 2;
      for (int64_t z = 0; z < 16 && pad_ok; ++z)
        for (int64_t y = 0; y < 16 && pad_ok; ++y)
          for (int64_t x = 0; x < 16 && pad_ok; ++x) {
            const bool inside = x >= off[0] && x < off[0] + v.dims[0] && y >= off[1] &&
                                y < off[1] + v.dims[1] && z >= off[2] && z < off[2] + v.dims[2];
            pad_ok = out.at(x, y, z) == (inside ? 500.0f : pad);
          }
    }
  }

  // (c) bias correction strictly improves 20 seeded phantoms
  int improved = 0;
  {
    CentreSpec clean;
    clean.centre_id = "T";
    CentreSpec biased = clean;
    biased.bias_amplitude = 0.15;
    biased.bias_smoothness = 1.2;
    biased.noise_sigma = 0.01;
    for (uint64_t seed = 1; seed <= 20; ++seed) {
      const PhantomPair pc = generate_phantom(seed, clean);
      const PhantomPair pb = generate_phantom(seed, biased);
      const BiasCorrection bc = bias_correct(pb.mri, pb.mask, PreprocessConfig{});
      const double before = masked_mae_vol(pb.mri, pc.mri, pc.mask);
      const double after = masked_mae_vol(bc.corrected, pc.mri, pc.mask);
      if (after < before) ++improved;
    }
  }

  report(6, "preprocessing emits padded cubic volumes and reduces bias error",
         dims_ok && pad_ok && improved == 20,
         fmt("cubic dims: %s; pad constants -1000/0 voxelwise: %s; bias correction improves "
             "%d/20 phantoms",
             dims_ok ? "yes" : "NO", pad_ok ? "yes" : "NO", improved));
}

// --------------------------------------------------------------------------
// 7. Structural fidelity of the full-scale preset: 34 convolutional layers
//    and 256x256 shape preservation.
void criterion7() {
  UNet<float> net(UNetConfig::paper(), 1);
  const int64_t census = net.conv_census();
  Tensor<float> x({1, 1, 256, 256});
  Rng rng(9);
  for (auto& v : x.data) v = float(rng.uniform(0.0, 1.0));
  const Tensor<float> y = net.forward(x, false);
  const bool shape_ok = y.shape == x.shape;
  report(7, "full-scale network structure (34 convolutions, shape preserving)",
         census == 34 && shape_ok,
         fmt("conv census %" PRId64 " (want 34); 256x256 in -> %" PRId64 "x%" PRId64 " out",
             census, y.shape[2], y.shape[3]));
}

// --------------------------------------------------------------------------
// 8 + 9. Desk-scale end-to-end study. Shared runs:
//   - five seeded repeats of centres A-D (unseen E), 64^3, tiny model,
//     10 rounds;
//   - arms per repeat: proximal strategy with the pooled-plane paradigm,
//     proximal with the plane-blocked paradigm, and plain averaging with the
//     pooled-plane paradigm. Pairing shares one dataset per seed.
constexpr int64_t kDeskLocalEpochs = 5;
constexpr int64_t kDeskBatch = 8;
constexpr double kDeskLr = 1e-3;

ExperimentConfig desk_config(uint64_t seed, Strategy strat, double mu, Paradigm::Kind kind) {
  ExperimentConfig c;
  c.seed = seed;
  c.train_centres = {CentreSpec::preset('A'), CentreSpec::preset('B'), CentreSpec::preset('C'),
                     CentreSpec::preset('D')};
  c.unseen_centre = CentreSpec::preset('E');
  c.preprocess = PreprocessConfig::for_target(64);
  c.model = UNetConfig::desk();
  c.fed.strategy = strat;
  c.fed.mu = mu;
  c.fed.rounds = 10;
  c.fed.local_epochs = kDeskLocalEpochs;
  c.fed.batch_size = kDeskBatch;
  c.fed.adam.lr = kDeskLr;
  c.paradigm = kind == Paradigm::Kind::kMulti2D ? Paradigm::multi_2d()
                                                : Paradigm::random_multi_2d();
  c.augmentation = AugmentPipeline::kMinimal;
  return c;
}

struct ArmOutcome {
  double baseline = 0.0;  // round-0 unseen median MAE
  double best = 0.0;      // best-round unseen median MAE
  int64_t best_round = 0;
};

ArmOutcome run_arm(const ExperimentConfig& cfg, const FederatedDataset& data) {
  const ExperimentResult res = run_experiment(cfg, data);
  return {res.rounds[0].unseen.mae.median, res.best_unseen_mae, res.best_round};
}

void criteria8and9() {
  constexpr int kRepeats = 5;
  std::vector<ArmOutcome> prox_rand, prox_multi, avg_rand;
  double elapsed_first = 0.0;

  for (int r = 0; r < kRepeats; ++r) {
    const uint64_t seed = uint64_t(r + 1);
    const ExperimentConfig cfg_pr = desk_config(seed, Strategy::kFedProx, 3.0,
                                                Paradigm::Kind::kRandomMulti2D);
    const auto t0 = std::chrono::steady_clock::now();
    const FederatedDataset data = prepare_dataset(cfg_pr);
    prox_rand.push_back(run_arm(cfg_pr, data));
    if (r == 0) elapsed_first = seconds_since(t0);
    prox_multi.push_back(
        run_arm(desk_config(seed, Strategy::kFedProx, 3.0, Paradigm::Kind::kMulti2D), data));
    avg_rand.push_back(
        run_arm(desk_config(seed, Strategy::kFedAvg, 0.0, Paradigm::Kind::kRandomMulti2D), data));
    std::printf("  repeat %d: pooled-plane proximal %.0f -> %.0f HU (best round %" PRId64
                "); plane-blocked %.0f; plain averaging best round %" PRId64 "\n",
                r + 1, prox_rand.back().baseline, prox_rand.back().best,
                prox_rand.back().best_round, prox_multi.back().best, avg_rand.back().best_round);
    std::fflush(stdout);
  }

  int wins = 0;
  for (int r = 0; r < kRepeats; ++r)
    if (prox_rand[size_t(r)].best <= prox_multi[size_t(r)].best) ++wins;

  const double ratio = prox_rand[0].best / prox_rand[0].baseline;
  const bool ok8 = elapsed_first < 900.0 && ratio <= 0.5 && wins >= 4;
  report(8, "desk-scale federated run halves the unseen-centre error", ok8,
         fmt("%.0f -> %.0f HU (%.0f%% of baseline, need <=50%%) in %.1f min (<15); pooled-plane "
             "wins %d/5 (need >=4)",
             prox_rand[0].baseline, prox_rand[0].best, 100.0 * ratio, elapsed_first / 60.0,
             wins));

  auto mean_std = [](const std::vector<ArmOutcome>& v) {
    double mean = 0.0;
    for (const auto& o : v) mean += double(o.best_round);
    mean /= double(v.size());
    double var = 0.0;
    for (const auto& o : v) var += (double(o.best_round) - mean) * (double(o.best_round) - mean);
    const double sd = v.size() > 1 ? std::sqrt(var / double(v.size() - 1)) : 0.0;
    return std::pair<double, double>(mean, sd);
  };
  const auto [pm, ps] = mean_std(prox_rand);
  const auto [am, as] = mean_std(avg_rand);
  std::printf("  strategy          best round (mean +/- std, %d repeats)\n", kRepeats);
  std::printf("  prox-averaging    %.1f +/- %.1f\n", pm, ps);
  std::printf("  plain averaging   %.1f +/- %.1f\n", am, as);
  std::fflush(stdout);
  report(9, "proximal strategy reaches its best round no later on average", pm <= am,
         fmt("best round %.1f +/- %.1f vs %.1f +/- %.1f over %d paired repeats", pm, ps, am, as,
             kRepeats));
}

// --------------------------------------------------------------------------
// 10. Determinism: rerunning the training command from the same config file
//     produces byte-identical logs and checkpoints.
void criterion10() {
  const fs::path root = fs::temp_directory_path() / "fedvox_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path cfg_path = root / "config.json";
  write_text_file(cfg_path.string(), R"({
  "seed": 11,
  "train_centres": [
    {"centre_id": "P", "grid_dim": 16, "n_patients": 5, "noise_sigma": 0.01, "bias_amplitude": 0.05},
    {"centre_id": "Q", "grid_dim": 16, "n_patients": 5, "noise_sigma": 0.02, "bias_amplitude": 0.08}
  ],
  "unseen_centre": {"centre_id": "U", "grid_dim": 16, "n_patients": 5, "noise_sigma": 0.015, "bias_amplitude": 0.06},
  "preprocess": {"target_dim": 16},
  "model": {"input_size": 16, "depth": 2, "base_channels": 4, "stem_kernel": 5},
  "federation": {"rounds": 2, "batch_size": 16},
  "paradigm": {"kind": "random_multi_2d"},
  "augmentation": "none",
  "infer_batch": 16
}
)");
  const fs::path out_a = root / "a", out_b = root / "b";
  int rc_a, rc_b;
  {
    // run the command-line entry point quietly
    std::ostringstream sink;
    std::streambuf* prev = std::cout.rdbuf(sink.rdbuf());
    rc_a = cli_main({"train", "--config", cfg_path.string(), "--out", out_a.string()});
    rc_b = cli_main({"train", "--config", cfg_path.string(), "--out", out_b.string()});
    std::cout.rdbuf(prev);
  }

  bool identical = rc_a == 0 && rc_b == 0;
  size_t ckpt_bytes = 0;
  for (const char* name : {"config.json", "rounds.csv", "summary.json", "model.ckpt"}) {
    if (!identical) break;
    const std::string va = read_text_file((out_a / name).string());
    const std::string vb = read_text_file((out_b / name).string());
    identical = va == vb;
    if (std::strcmp(name, "model.ckpt") == 0) ckpt_bytes = va.size();
  }
  fs::remove_all(root);
  report(10, "experiment artifacts are byte-identical across reruns", identical,
         fmt("config.json, rounds.csv, summary.json, model.ckpt (%zu bytes) all equal", ckpt_bytes));
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> which;
  for (int i = 1; i < argc; ++i) which.insert(std::atoi(argv[i]));
  auto want = [&](int n) { return which.empty() || which.count(n) > 0; };

  std::printf("acceptance gate (%s)\n", which.empty() ? "all criteria" : "selected criteria");
  std::fflush(stdout);
  const auto t0 = std::chrono::steady_clock::now();

  struct Entry {
    int num;
    void (*fn)();
  };
  const Entry entries[] = {{1, criterion1}, {2, criterion2},  {3, criterion3},
                           {4, criterion4}, {5, criterion5},  {6, criterion6},
                           {7, criterion7}, {8, criteria8and9}, {10, criterion10}};
  int ran = 0;
  for (const Entry& e : entries) {
    const bool run9 = e.num == 8 && (want(8) || want(9));
    if (!run9 && !want(e.num)) continue;
    ran += e.num == 8 ? 2 : 1;
    try {
      e.fn();
    } catch (const std::exception& ex) {
      report(e.num, "criterion body threw", false, ex.what());
      if (e.num == 8) report(9, "criterion body threw", false, ex.what());
    }
  }

  std::printf("%d/%d criteria passed in %.1f min\n", ran - g_failures, ran,
              seconds_since(t0) / 60.0);
  return g_failures == 0 ? 0 : 1;
}
