// Acceptance suite: one pass/fail line per criterion, exit code 0 only when
// every criterion holds. Run from the build directory; artifacts are written
// under ./acceptance_tmp.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "actflow/trainer.hpp"
#include "testutil.hpp"

using namespace actflow;
using testutil::check_gradients;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

std::string g_detail;

void detail(const std::string& s) { g_detail = s; }

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path tmp_root() { return "acceptance_tmp"; }

// --- criterion 1: gradient fidelity -----------------------------------------

bool criterion_gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  double worst = 0.0;

  {  // every primitive, randomized shapes
    const int n = 1 + rng.uniform_int(16), d = 1 + rng.uniform_int(16),
              k = 1 + rng.uniform_int(16);
    Tensor x = random_tensor({n, d}, rng);
    Tensor y = random_tensor({n, d}, rng);
    Tensor v = random_tensor({d}, rng);
    Tensor probe = random_tensor({n, d}, rng);
    auto ps = [&](Tensor t) { return sum(mul(t, probe)); };

    std::vector<std::pair<const char*, testutil::ScalarGraph>> cases;
    cases.emplace_back("add", [&](Tape&, std::vector<Tensor>& in) { return ps(add(in[0], in[1])); });
    cases.emplace_back("sub", [&](Tape&, std::vector<Tensor>& in) { return ps(sub(in[0], in[1])); });
    cases.emplace_back("mul", [&](Tape&, std::vector<Tensor>& in) { return ps(mul(in[0], in[1])); });
    for (auto& [name, graph] : cases)
      worst = std::max(worst, check_gradients(graph, {x, y}).max_rel_err);

    worst = std::max(worst, check_gradients([&](Tape&, std::vector<Tensor>& in) {
                       return ps(mul_rowvec(add_rowvec(in[0], in[1]), in[2]));
                     },
                     {x, v, random_tensor({d}, rng)}).max_rel_err);
    worst = std::max(worst, check_gradients([&](Tape&, std::vector<Tensor>& in) {
                       return ps(layer_norm_mod(in[0], in[1], in[2]));
                     },
                     {x, random_tensor({d}, rng, 0.3), random_tensor({d}, rng, 0.3)}).max_rel_err);
    worst = std::max(worst, check_gradients([&](Tape&, std::vector<Tensor>& in) {
                       return ps(softmax_rows(in[0]));
                     }, {x}).max_rel_err);
    worst = std::max(worst, check_gradients([&](Tape&, std::vector<Tensor>& in) {
                       return ps(gelu(in[0]));
                     }, {x}).max_rel_err);
    worst = std::max(worst, check_gradients([&](Tape&, std::vector<Tensor>& in) {
                       return sum_squares(slice_cols(slice_rows(in[0], 0, n), 0, d));
                     }, {x}).max_rel_err);
    worst = std::max(worst, check_gradients([&](Tape&, std::vector<Tensor>& in) {
                       std::vector<Tensor> parts{in[0], in[0]};
                       std::vector<Tensor> sides{concat_rows(parts), concat_rows(parts)};
                       return l2_norm(concat_cols(sides));
                     }, {x}).max_rel_err);
    worst = std::max(worst, check_gradients([&](Tape&, std::vector<Tensor>& in) {
                       return add(mse(in[0], y), add(mean(in[0]), sum(reshape(in[0], {d, n}))));
                     }, {x}).max_rel_err);
    // stop_gradient is deliberately absent here: it disagrees with numeric
    // differentiation by contract and is checked exactly in criterion 6.
    worst = std::max(worst, check_gradients([&](Tape&, std::vector<Tensor>& in) {
                       return sum_squares(scale(in[0], -1.3));
                     }, {x}).max_rel_err);
    std::vector<int> row_ids{0, n - 1, 0};
    worst = std::max(worst, check_gradients([&](Tape&, std::vector<Tensor>& in) {
                       return sum_squares(gather_rows(in[0], row_ids));
                     }, {x}).max_rel_err);
    {
      const int ad = 8, heads = 2;
      std::vector<Tensor> attn_in{random_tensor({5, ad}, rng, 0.5)};
      for (int i = 0; i < 4; ++i) {
        attn_in.push_back(random_tensor({ad, ad}, rng, 0.3));
        attn_in.push_back(random_tensor({ad}, rng, 0.1));
      }
      worst = std::max(worst, check_gradients([&](Tape&, std::vector<Tensor>& in) {
                         return sum_squares(self_attention(in[0], in[1], in[2], in[3], in[4],
                                                           in[5], in[6], in[7], in[8], heads));
                       }, attn_in, 1e-5, 4).max_rel_err);
    }
    for (bool ta : {false, true})
      for (bool tb : {false, true}) {
        Tensor a = ta ? random_tensor({k, n}, rng) : random_tensor({n, k}, rng);
        Tensor b = tb ? random_tensor({d, k}, rng) : random_tensor({k, d}, rng);
        worst = std::max(worst, check_gradients([&](Tape&, std::vector<Tensor>& in) {
                           return ps(matmul(in[0], in[1], ta, tb));
                         }, {a, b}).max_rel_err);
      }
  }

  {  // a full tiny-policy loss
    PolicyConfig pc;
    pc.d = 16;
    pc.n_heads = 2;
    pc.n_enc_layers = 2;
    pc.n_dit_layers = 2;
    pc.chunk_len = 4;
    pc.view_feature_dim = 8;
    pc.vocab_size = 12;
    pc.max_lang_tokens = 8;
    PolicyNet net(pc);
    Rng prng(7);
    ParamSet params = init_policy_params(pc, prng);
    Observation obs{random_tensor({pc.n_views, pc.view_feature_dim}, prng),
                    random_tensor({pc.state_dim}, prng)};
    std::vector<int> ids{1, 5, 3};
    Tensor a_gt = random_tensor({pc.chunk_len, pc.action_dim}, prng, 0.5);
    Tensor eps = random_tensor({pc.chunk_len, pc.action_dim}, prng);
    EvolutionSample path = make_path_sample(a_gt, eps, 0.45);

    std::vector<std::string> names;
    std::vector<Tensor> inputs;
    for (const auto& [name, t] : params.items()) {
      names.push_back(name);
      inputs.push_back(t);
    }
    inputs.push_back(obs.robot_state);
    auto report = check_gradients(
        [&](Tape&, std::vector<Tensor>& leaves) {
          ParamSet bound;
          for (std::size_t i = 0; i < names.size(); ++i) bound.add(names[i], leaves[i]);
          Tensor q = leaves[names.size()];
          Observation o{obs.view_features, q};
          SemanticFeatures f = net.encode_semantics(ids, o, bound);
          Tensor v = net.predict_velocity(f, path.a_tau, q, path.tau, bound);
          return fm_residual_loss(v, path.v_gt);
        },
        inputs, 1e-5, 2, Rng(55));
    worst = std::max(worst, report.max_rel_err);
  }

  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  char buf[128];
  std::snprintf(buf, sizeof(buf), "max rel err %.2e, %.1f s", worst, secs);
  detail(buf);
  return worst <= 1e-4 && secs < 60.0;
}

// --- criterion 2: path identities --------------------------------------------

bool criterion_path_identities() {
  Rng rng(202);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    Tensor a_gt = random_tensor({8, 3}, rng);
    Tensor eps = random_tensor({8, 3}, rng);
    worst = std::max(worst, max_abs_diff(make_path_sample(a_gt, eps, 1.0).a_tau, a_gt));
    worst = std::max(worst, max_abs_diff(make_path_sample(a_gt, eps, 0.0).a_tau, eps));
    const double t1 = rng.uniform(), t2 = rng.uniform();
    worst = std::max(worst, max_abs_diff(make_path_sample(a_gt, eps, t1).v_gt,
                                         make_path_sample(a_gt, eps, t2).v_gt));
  }
  char buf[64];
  std::snprintf(buf, sizeof(buf), "max deviation %.2e over 1000 samples", worst);
  detail(buf);
  return worst <= 1e-12;
}

// --- criterion 3: sampler law -------------------------------------------------

bool criterion_sampler_law() {
  TimestepSamplerConfig cfg;
  Rng rng(303);
  const int n = 1'000'000;
  std::vector<double> draws(static_cast<std::size_t>(n));
  double mean = 0.0;
  for (int i = 0; i < n; ++i) {
    draws[static_cast<std::size_t>(i)] = sample_timestep(rng, cfg);
    mean += draws[static_cast<std::size_t>(i)];
  }
  mean /= n;
  std::sort(draws.begin(), draws.end());
  double ks = 0.0;
  for (int i = 0; i < n; ++i) {
    const double f = 1.0 - std::pow(1.0 - draws[static_cast<std::size_t>(i)] / cfg.cutoff, 1.5);
    ks = std::max({ks, std::abs(f - static_cast<double>(i) / n),
                   std::abs(f - static_cast<double>(i + 1) / n)});
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "mean %.5f (target 0.3996), KS %.5f", mean, ks);
  detail(buf);
  return std::abs(mean - 0.3996) <= 1e-3 && ks < 0.002;
}

// --- criterion 4: Euler exactness ----------------------------------------------

bool criterion_euler_exactness() {
  Rng data_rng(404);
  Tensor a_gt = random_tensor({6, 3}, data_rng);
  double worst = 0.0;
  bool calls_ok = true;
  for (int k : {1, 4, 8}) {
    Rng rng(505);
    Rng init_rng(505);
    Tensor init = randn({6, 3}, init_rng);
    int calls = 0;
    auto field = [&](const Tensor&, double) {
      ++calls;
      return sub(a_gt, init);
    };
    Tensor out = integrate_euler(field, {6, 3}, InferenceConfig{k}, rng);
    worst = std::max(worst, max_abs_diff(out, a_gt));
    calls_ok = calls_ok && calls == k;
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "max endpoint error %.2e, call counts %s", worst,
                calls_ok ? "exact" : "WRONG");
  detail(buf);
  return worst <= 1e-9 && calls_ok;
}

// --- criterion 5: OC geometry ---------------------------------------------------

bool criterion_oc_geometry() {
  OCConfig cfg;  // alpha = 0.01, eps_adv = 0.03
  Rng rng(606);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    Tensor v = random_tensor({2, 6}, rng, 0.5);
    Tensor q = random_tensor({5}, rng, 0.5);
    Tensor gv = random_tensor({2, 6}, rng);
    Tensor gq = random_tensor({5}, rng);
    PerturbResult r = oc_perturb(v, q, gv, gq, cfg);
    worst = std::max(worst, std::abs(l2_norm_value(sub(r.v_tilde, v)) -
                                     std::min(cfg.alpha, cfg.eps_adv * l2_norm_value(v))));
    worst = std::max(worst, std::abs(l2_norm_value(sub(r.q_tilde, q)) -
                                     std::min(cfg.alpha, cfg.eps_adv * l2_norm_value(q))));
  }
  Tensor v = random_tensor({2, 6}, rng);
  Tensor q = random_tensor({5}, rng);
  PerturbResult guard = oc_perturb(v, q, Tensor::zeros({2, 6}), Tensor::zeros({5}), cfg);
  const bool guard_ok = guard.eta_v == 0.0 && guard.eta_q == 0.0 &&
                        max_abs_diff(guard.v_tilde, v) == 0.0 &&
                        max_abs_diff(guard.q_tilde, q) == 0.0;
  char buf[96];
  std::snprintf(buf, sizeof(buf), "max norm error %.2e, zero-grad guard %s", worst,
                guard_ok ? "intact" : "BROKEN");
  detail(buf);
  return worst <= 1e-9 && guard_ok;
}

// --- criterion 6: stop-gradient contract -----------------------------------------

bool criterion_stop_gradient() {
  Rng rng(707);
  // (a) the OC loss sends no gradient into the clean branch
  Tape tape;
  Tensor c1 = tape.leaf(random_tensor({4, 3}, rng));
  Tensor c2 = tape.leaf(random_tensor({4, 3}, rng));
  Tensor p1 = tape.leaf(random_tensor({4, 3}, rng));
  Tensor p2 = tape.leaf(random_tensor({4, 3}, rng));
  GradientRecord g = tape.backward(oc_loss(p1, p2, c1, c2), {c1, c2});
  const bool clean_zero =
      l2_norm_value(g.at(c1)) == 0.0 && l2_norm_value(g.at(c2)) == 0.0;

  // (b) graph reuse vs clean-forward recompute give identical parameter grads
  PolicyConfig pc;
  pc.d = 16;
  pc.n_heads = 2;
  pc.n_enc_layers = 1;
  pc.n_dit_layers = 1;
  pc.chunk_len = 4;
  pc.view_feature_dim = 8;
  pc.vocab_size = 12;
  PolicyNet net(pc);
  Rng prng(11);
  ParamSet params = init_policy_params(pc, prng);
  Observation obs{random_tensor({pc.n_views, pc.view_feature_dim}, prng),
                  random_tensor({pc.state_dim}, prng)};
  StepInputs inputs;
  inputs.token_ids = {1, 2, 3};
  inputs.obs = &obs;
  inputs.a_gt = random_tensor({pc.chunk_len, pc.action_dim}, prng, 0.5);

  auto grads_for = [&](GradStrategy strategy) {
    StepConfig cfg;
    cfg.strategy = strategy;
    AdaptiveWeightState st;
    Tape t;
    Rng path_rng(77);
    ConsistencyBatch b = assemble_training_step(net, params, t, inputs, path_rng, cfg, st);
    std::vector<Tensor> wrt;
    for (const auto& [n2, p] : b.bound_params.items()) wrt.push_back(p);
    GradientRecord rec = t.backward(b.l_total_node, wrt);
    std::vector<Tensor> out;
    for (const Tensor& w : wrt) out.push_back(rec.at(w));
    return out;
  };
  std::vector<Tensor> a = grads_for(GradStrategy::reuse);
  std::vector<Tensor> b = grads_for(GradStrategy::recompute);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, max_abs_diff(a[i], b[i]));

  char buf[96];
  std::snprintf(buf, sizeof(buf), "clean-branch grad %s, strategy gap %.2e",
                clean_zero ? "zero" : "NONZERO", worst);
  detail(buf);
  return clean_zero && worst <= 1e-10;
}

// --- criterion 7: adaptive weight oracle --------------------------------------

bool criterion_lambda_oracle() {
  AdaptiveWeightState first;
  const double lambda1 = update_adaptive_weight(first, 0.0);
  const bool hand_ok = std::abs(lambda1 - 1.0 / 96.0) <= 1e-15;

  AdaptiveWeightState st;
  double ema = 100.0;
  Rng rng(808);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double l = 30.0 * rng.uniform();
    const double lambda = update_adaptive_weight(st, l);
    ema = 0.95 * ema + 0.05 * l;
    worst = std::max(worst, std::abs(lambda - 1.0 / (1.0 + ema)));
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "lambda_1 %s, 1000-step gap %.2e",
                hand_ok ? "= 1/96" : "WRONG", worst);
  detail(buf);
  return hand_ok && worst <= 1e-12;
}

// --- criterion 8: paraphrase filters -------------------------------------------

bool criterion_paraphrase_filters() {
  const std::string original = "turn on the stove and put the moka pot on it";
  struct Case {
    const char* text;
    FilterStatus want;
  };
  // 49 candidates + the original = a 50-entry pool covering every rule.
  const std::vector<Case> cases{
      {"The user wants the stove turned on", FilterStatus::normalized},
      {"The user wants the moka pot heated", FilterStatus::normalized},
      {"The user wants", FilterStatus::dropped_length},  // normalizes to "I want"
      {"The user wants the stove turned on", FilterStatus::dropped_duplicate},
      {"heat the moka pot using the stove", FilterStatus::kept},
      {"sorry, I cannot comply", FilterStatus::dropped_refusal},
      {"Sorry, no rewrite available", FilterStatus::dropped_refusal},
      {"  sorry about this request", FilterStatus::dropped_refusal},
      {"I cannot rewrite that command", FilterStatus::dropped_refusal},
      {"i cannot help with the stove", FilterStatus::dropped_refusal},
      {"I don't understand the instruction", FilterStatus::dropped_refusal},
      {"I DON'T know how to say it", FilterStatus::dropped_refusal},
      {"unable to produce a rewrite", FilterStatus::dropped_refusal},
      {"Unable to comply", FilterStatus::dropped_refusal},
      {"error: generation failed", FilterStatus::dropped_refusal},
      {"ERROR IN GENERATION", FilterStatus::dropped_refusal},
      {"", FilterStatus::dropped_length},
      {"ok", FilterStatus::dropped_length},
      {"please", FilterStatus::dropped_length},
      {"1234567", FilterStatus::dropped_length},
      {"12345678", FilterStatus::kept},  // exactly eight characters survives
      {"turn on the stove and put the moka pot on it", FilterStatus::dropped_duplicate},
      {"activate the stove and place the moka pot on it", FilterStatus::kept},
      {"activate the stove and place the moka pot on it", FilterStatus::dropped_duplicate},
      {"I want the stove turned on", FilterStatus::dropped_duplicate},  // collides post-norm
      {"could you please turn on the stove", FilterStatus::kept},
      {"warm the pot on the stove", FilterStatus::kept},
      {"the goal is to brew with the moka pot", FilterStatus::kept},
      {"prepare a beverage using the moka pot", FilterStatus::kept},
      {"switch the burner on and set the pot there", FilterStatus::kept},
      {"the core objective is heating the pot", FilterStatus::kept},
      {"start the stove then position the moka pot", FilterStatus::kept},
      {"make the stove hot and place the pot", FilterStatus::kept},
      {"set the pot on a lit burner", FilterStatus::kept},
      {"heat source on, pot on top", FilterStatus::kept},
      {"place the moka pot over the flame", FilterStatus::kept},
      {"light the stove and put the pot on", FilterStatus::kept},
      {"I need the burner lit and the pot on it", FilterStatus::kept},
      {"get the coffee maker heating", FilterStatus::kept},
      {"turn the stove on; pot goes on top", FilterStatus::kept},
      {"brew coffee by heating the moka pot", FilterStatus::kept},
      {"the pot belongs on the hot stove", FilterStatus::kept},
      {"make it so the pot is being heated", FilterStatus::kept},
      {"stove on, then moka pot on the stove", FilterStatus::kept},
      {"please heat the moka pot on the stove", FilterStatus::kept},
      {"warm the pot on the stove", FilterStatus::dropped_duplicate},
      {"The user wants a hot moka pot", FilterStatus::normalized},
      {"I want a hot moka pot", FilterStatus::dropped_duplicate},  // collides post-norm
      {"put the pot on the stove after lighting it", FilterStatus::kept},
  };

  CandidatePool pool;
  pool.items.push_back(RewriteCandidate{original, 0, 0, FilterStatus::kept});
  int idx = 0;
  for (const Case& c : cases) pool.items.push_back(RewriteCandidate{c.text, 1 + idx++ % 7, 0, FilterStatus::kept});
  if (pool.items.size() != 50) {
    detail("fixture is not 50 candidates");
    return false;
  }

  FilterResult result = filter_and_dedup(pool);
  bool ok = result.report.size() == 50 && result.report[0].status == FilterStatus::kept;
  int mismatch = -1;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    if (result.report[i + 1].status != cases[i].want) {
      ok = false;
      mismatch = static_cast<int>(i);
      break;
    }
  }

  // Bit-exact expected texts for the normalization rule.
  ok = ok && result.instructions.paraphrases.size() >= 3 &&
       result.instructions.paraphrases[0] == "I want the stove turned on" &&
       result.instructions.paraphrases[1] == "I want the moka pot heated" &&
       result.instructions.original == original;

  // Reconciliation: |pool| = |kept| + sum of drops.
  int kept = 0, dropped = 0;
  for (const RewriteCandidate& c : result.report)
    (c.status == FilterStatus::kept || c.status == FilterStatus::normalized ? kept : dropped)++;
  ok = ok && kept + dropped == 50 &&
       kept == 1 + static_cast<int>(result.instructions.paraphrases.size());

  // Idempotence: filtering the kept set again changes nothing.
  CandidatePool again;
  again.items.push_back(RewriteCandidate{result.instructions.original, 0, 0, FilterStatus::kept});
  int k = 0;
  for (const std::string& p : result.instructions.paraphrases)
    again.items.push_back(RewriteCandidate{p, 1, k++, FilterStatus::kept});
  FilterResult twice = filter_and_dedup(again);
  ok = ok && twice.instructions.original == result.instructions.original &&
       twice.instructions.paraphrases == result.instructions.paraphrases;

  char buf[128];
  if (mismatch >= 0)
    std::snprintf(buf, sizeof(buf), "status mismatch at fixture %d ('%s')", mismatch,
                  cases[static_cast<std::size_t>(mismatch)].text);
  else
    std::snprintf(buf, sizeof(buf), "50-candidate fixture exact, %d kept, idempotent", kept);
  detail(buf);
  return ok;
}

// --- criterion 9: determinism ----------------------------------------------------

TrainConfig tiny_config(const std::string& data, const std::string& out_dir) {
  TrainConfig cfg;
  cfg.train_data = data;
  cfg.out_dir = out_dir;
  cfg.seed = 11;
  cfg.batch_size = 2;
  cfg.total_steps = 6;
  cfg.policy.d = 16;
  cfg.policy.n_heads = 2;
  cfg.policy.n_enc_layers = 1;
  cfg.policy.n_dit_layers = 1;
  cfg.policy.chunk_len = 4;
  cfg.inference.steps = 2;
  return cfg;
}

bool criterion_determinism() {
  const auto root = tmp_root() / "determinism";
  std::filesystem::create_directories(root);
  const std::string raw = (root / "raw.jsonl").string();
  gen_data(raw, {default_tasks()[0], default_tasks()[1]},
           {PerturbationSpec{PerturbAxis::noise, 0, 0}}, 3, 99);
  const std::string data = (root / "data.jsonl").string();
  FallbackRewriter client(5);
  RewriterConfig rcfg;
  expand_dataset_instructions(raw, data, (root / "report.jsonl").string(), client, rcfg, 15, 7);

  TrainResult r1 = train(tiny_config(data, (root / "a").string()));
  TrainResult r2 = train(tiny_config(data, (root / "b").string()));
  const bool same_logs = slurp(r1.metrics_path) == slurp(r2.metrics_path);

  TrainConfig full = tiny_config(data, (root / "full").string());
  full.checkpoint_every = 3;
  TrainResult rf = train(full);
  TrainConfig rest = tiny_config(data, (root / "resumed").string());
  rest.checkpoint_every = 3;
  TrainResult rr = train(rest, (root / "full" / "checkpoint_3.bin").string());

  auto lines = [](const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) out.push_back(line);
    return out;
  };
  std::vector<std::string> lf = lines(slurp(rf.metrics_path));
  std::vector<std::string> lr = lines(slurp(rr.metrics_path));
  const bool resume_ok = lf.size() == 7 && lr.size() == 4 && lr[1] == lf[4] && lr[2] == lf[5] &&
                         lr[3] == lf[6];

  detail(std::string("repeat logs ") + (same_logs ? "identical" : "DIFFER") + ", resume trace " +
         (resume_ok ? "identical" : "DIFFERS"));
  return same_logs && resume_ok;
}

// --- criterion 10: desk-scale ablation --------------------------------------------

bool criterion_ablation() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto root = tmp_root() / "ablation";
  std::filesystem::create_directories(root);

  const std::string raw = (root / "raw.jsonl").string();
  gen_data(raw, default_tasks(), {PerturbationSpec{PerturbAxis::noise, 0, 0}}, 40, 1);
  const std::string data = (root / "data.jsonl").string();
  FallbackRewriter client(0);
  RewriterConfig rcfg;
  expand_dataset_instructions(raw, data, (root / "report.jsonl").string(), client, rcfg, 15, 2);

  TrainConfig base;
  base.train_data = data;
  base.batch_size = 12;
  base.total_steps = 2200;
  base.peak_lr = 2e-3;
  base.policy.d = 32;
  base.policy.n_heads = 4;
  base.policy.n_enc_layers = 2;
  base.policy.n_dit_layers = 2;
  base.policy.chunk_len = 4;
  base.trials_per_cell = 12;
  base.eval_level = 2;
  base.threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));

  ResultsTable table = run_ablation(base, {1, 2, 3}, (root / "rows").string());
  std::printf("%s", table.to_csv().c_str());

  bool rows_ok = table.rows.size() == 5;
  for (const AblationRow& row : table.rows) rows_ok = rows_ok && !row.failed;
  const double lang_margin =
      table.rows.back().rates[static_cast<int>(PerturbAxis::language)] -
      table.rows.front().rates[static_cast<int>(PerturbAxis::language)];
  const double total_margin = table.rows.back().total - table.rows.front().total;
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "language %+.1f (need >= +10), total %+.1f (need >= +3), %.0f s wall", lang_margin,
                total_margin, secs);
  detail(buf);
  return rows_ok && lang_margin >= 10.0 && total_margin >= 3.0 && secs < 3600.0;
}

// --- criterion 11: metric exactness -------------------------------------------------

bool criterion_metric_exactness() {
  EvalReport report;
  Rng rng(909);
  int total_succ = 0, total_n = 0;
  for (int i = 0; i < kAxisCount; ++i) {
    const int n = 1 + rng.uniform_int(40);
    const int s = rng.uniform_int(n + 1);
    report.per_axis[static_cast<std::size_t>(i)] = {s, n};
    total_succ += s;
    total_n += n;
  }
  report.total = {total_succ, total_n};

  bool ok = true;
  int axis_sum = 0;
  for (int i = 0; i < kAxisCount; ++i) {
    const EvalCell& cell = report.per_axis[static_cast<std::size_t>(i)];
    ok = ok && cell.rate() == 100.0 * cell.n_succ / cell.n_total;
    ok = ok && cell.rate() >= 0.0 && cell.rate() <= 100.0;
    axis_sum += cell.n_succ;
  }
  ok = ok && axis_sum == report.total.n_succ;
  ok = ok && report.total.rate() == 100.0 * total_succ / total_n;
  ok = ok && EvalCell{6, 10}.rate() == 60.0 && EvalCell{10, 10}.rate() == 100.0 &&
       EvalCell{0, 10}.rate() == 0.0;
  detail(ok ? "rates exact, counts reconcile" : "metric identity violated");
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    std::function<bool()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient fidelity", criterion_gradient_fidelity},
      {2, "path identities", criterion_path_identities},
      {3, "sampler law", criterion_sampler_law},
      {4, "Euler exactness", criterion_euler_exactness},
      {5, "OC geometry", criterion_oc_geometry},
      {6, "stop-gradient contract", criterion_stop_gradient},
      {7, "adaptive weight oracle", criterion_lambda_oracle},
      {8, "paraphrase filters", criterion_paraphrase_filters},
      {9, "determinism", criterion_determinism},
      {10, "desk-scale ablation", criterion_ablation},
      {11, "metric exactness", criterion_metric_exactness},
  };

  int only = -1;
  if (argc > 1) only = std::atoi(argv[1]);

  std::filesystem::remove_all(tmp_root());
  std::filesystem::create_directories(tmp_root());

  int failures = 0;
  for (const Criterion& c : criteria) {
    if (only > 0 && c.id != only) continue;
    g_detail.clear();
    bool ok = false;
    try {
      ok = c.run();
    } catch (const std::exception& e) {
      g_detail = std::string("exception: ") + e.what();
    }
    std::printf("[%s] criterion %2d: %s — %s\n", ok ? "PASS" : "FAIL", c.id, c.name,
                g_detail.c_str());
    std::fflush(stdout);
    failures += ok ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
