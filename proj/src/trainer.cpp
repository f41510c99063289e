#include "actflow/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <json.hpp>

#include "actflow/parallel.hpp"

namespace actflow {

double lr_at(std::int64_t step, std::int64_t total_steps, double warmup_frac, double peak_lr) {
  if (step < 1 || step > total_steps)
    throw std::invalid_argument("lr_at: step " + std::to_string(step) + " outside [1, " +
                                std::to_string(total_steps) + "]");
  const auto warmup = std::max<std::int64_t>(
      1, static_cast<std::int64_t>(std::llround(warmup_frac * static_cast<double>(total_steps))));
  if (step <= warmup)
    return peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const double progress = static_cast<double>(step - warmup) /
                          static_cast<double>(std::max<std::int64_t>(1, total_steps - warmup));
  return peak_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

AdamW::AdamW(const ParamSet& params, OptimizerConfig cfg) : cfg_(cfg) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto& [name, t] : params.items()) {
    m_.push_back(Tensor::zeros(t.shape()));
    v_.push_back(Tensor::zeros(t.shape()));
  }
}

void AdamW::restore(std::vector<Tensor> m, std::vector<Tensor> v, std::int64_t t) {
  if (m.size() != m_.size() || v.size() != v_.size())
    throw std::invalid_argument("AdamW::restore: moment count mismatch");
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = t;
}

void AdamW::step(ParamSet& params, const std::vector<Tensor>& grads, double lr,
                 const std::vector<char>& trainable) {
  if (grads.size() != params.size() || trainable.size() != params.size())
    throw std::invalid_argument("AdamW::step: gradient list misaligned with parameters");

  double clip_scale = 1.0;
  if (cfg_.clip_norm > 0.0) {
    double sq = 0.0;
    for (std::size_t p = 0; p < grads.size(); ++p) {
      if (!trainable[p]) continue;
      const Tensor& g = grads[p];
      for (std::int64_t i = 0; i < g.size(); ++i) sq += g.data()[i] * g.data()[i];
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) clip_scale = cfg_.clip_norm / norm;
  }

  t_ += 1;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!trainable[p]) continue;
    Tensor& theta = params.items()[p].second;
    Tensor& m = m_[p];
    Tensor& v = v_[p];
    const Tensor& g = grads[p];
    for (std::int64_t i = 0; i < theta.size(); ++i) {
      const double gi = g.data()[i] * clip_scale;
      m.data()[i] = cfg_.beta1 * m.data()[i] + (1.0 - cfg_.beta1) * gi;
      v.data()[i] = cfg_.beta2 * v.data()[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = m.data()[i] / bc1;
      const double vhat = v.data()[i] / bc2;
      theta.data()[i] -=
          lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * theta.data()[i]);
    }
  }
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (total_steps < 1) throw std::invalid_argument("config: total_steps must be >= 1");
  if (!(warmup_frac > 0.0 && warmup_frac < 1.0))
    throw std::invalid_argument("config: warmup_frac must lie in (0, 1)");
  if (threads < 1) throw std::invalid_argument("config: threads must be >= 1");
  if (train_data.empty()) throw std::invalid_argument("config: train_data is required");
  if (trials_per_cell < 1) throw std::invalid_argument("config: trials_per_cell must be >= 1");
  if (eval_level < 0 || eval_level > 3)
    throw std::invalid_argument("config: eval_level must lie in [0, 3]");
}

namespace {

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true" || value == "yes") return true;
  if (value == "0" || value == "false" || value == "no") return false;
  throw std::invalid_argument("config: key '" + key + "' expects a boolean, got '" + value + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void apply_config_key(TrainConfig& cfg, const std::string& key, const std::string& value) {
  auto to_i = [&] { return std::stoi(value); };
  auto to_i64 = [&] { return static_cast<std::uint64_t>(std::stoull(value)); };
  auto to_d = [&] { return std::stod(value); };

  if (key == "seed") cfg.seed = to_i64();
  else if (key == "batch_size") cfg.batch_size = to_i();
  else if (key == "total_steps") cfg.total_steps = to_i();
  else if (key == "peak_lr") cfg.peak_lr = to_d();
  else if (key == "warmup_frac") cfg.warmup_frac = to_d();
  else if (key == "beta1") cfg.opt.beta1 = to_d();
  else if (key == "beta2") cfg.opt.beta2 = to_d();
  else if (key == "adam_eps") cfg.opt.eps = to_d();
  else if (key == "weight_decay") cfg.opt.weight_decay = to_d();
  else if (key == "clip_norm") cfg.opt.clip_norm = to_d();
  else if (key == "alpha") cfg.oc.alpha = to_d();
  else if (key == "eps_adv") cfg.oc.eps_adv = to_d();
  else if (key == "grad_floor") cfg.oc.grad_floor = to_d();
  else if (key == "timestep_cutoff") cfg.timestep.cutoff = to_d();
  else if (key == "d") cfg.policy.d = to_i();
  else if (key == "n_enc_layers") cfg.policy.n_enc_layers = to_i();
  else if (key == "n_dit_layers") cfg.policy.n_dit_layers = to_i();
  else if (key == "n_heads") cfg.policy.n_heads = to_i();
  else if (key == "chunk_len") cfg.policy.chunk_len = to_i();
  else if (key == "tokens_per_view") cfg.policy.tokens_per_view = to_i();
  else if (key == "max_lang_tokens") cfg.policy.max_lang_tokens = to_i();
  else if (key == "freeze_enc_layers") cfg.policy.freeze_enc_layers = to_i();
  else if (key == "ic") cfg.ic = parse_bool(key, value);
  else if (key == "ec") cfg.ec = parse_bool(key, value);
  else if (key == "oc") cfg.oc_on = parse_bool(key, value);
  else if (key == "grad_strategy") {
    if (value == "reuse") cfg.strategy = GradStrategy::reuse;
    else if (value == "recompute") cfg.strategy = GradStrategy::recompute;
    else throw std::invalid_argument("config: grad_strategy must be reuse or recompute");
  }
  else if (key == "l_ema_init") cfg.l_ema_init = to_d();
  else if (key == "gamma") cfg.gamma = to_d();
  else if (key == "k_steps") cfg.inference.steps = to_i();
  else if (key == "train_data") cfg.train_data = value;
  else if (key == "out_dir") cfg.out_dir = value;
  else if (key == "checkpoint_every") cfg.checkpoint_every = to_i();
  else if (key == "threads") cfg.threads = to_i();
  else if (key == "trials_per_cell") cfg.trials_per_cell = to_i();
  else if (key == "eval_level") cfg.eval_level = to_i();
  else if (key == "eval_seed") cfg.eval_seed = to_i64();
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

TrainConfig parse_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
  TrainConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: line " + std::to_string(line_no) +
                               " is not 'key = value': '" + line + "'");
    try {
      apply_config_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::exception& e) {
      throw std::runtime_error("config: line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return cfg;
}

// --- checkpointing ---------------------------------------------------------

void save_checkpoint(const std::string& path, const CheckpointState& state) {
  Archive a;
  for (const auto& [k, v] : state.policy.to_kv()) a.set("policy." + k, v);
  a.set("step", std::to_string(state.step));
  a.set("seed", std::to_string(state.seed));
  a.set("vocab_hash", std::to_string(state.vocab_hash));
  a.set("opt_t", std::to_string(state.opt_t));
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", state.weight.l_ema);
  a.set("l_ema", buf);
  std::snprintf(buf, sizeof(buf), "%.17g", state.weight.gamma);
  a.set("gamma", buf);
  a.set("weight_step", std::to_string(state.weight.step));

  const auto& items = state.params.items();
  for (const auto& [name, t] : items) a.tensors.emplace_back("param/" + name, t);
  for (std::size_t p = 0; p < items.size(); ++p)
    a.tensors.emplace_back("opt_m/" + items[p].first, state.opt_m[p]);
  for (std::size_t p = 0; p < items.size(); ++p)
    a.tensors.emplace_back("opt_v/" + items[p].first, state.opt_v[p]);
  a.write(path);
}

CheckpointState load_checkpoint(const std::string& path) {
  Archive a = Archive::read(path);
  CheckpointState st;
  std::vector<std::pair<std::string, std::string>> policy_kv;
  for (const auto& [k, v] : a.header)
    if (k.rfind("policy.", 0) == 0) policy_kv.emplace_back(k.substr(7), v);
  st.policy = PolicyConfig::from_kv(policy_kv);
  st.step = std::stoll(a.at("step"));
  st.seed = std::stoull(a.at("seed"));
  st.vocab_hash = std::stoull(a.at("vocab_hash"));
  st.opt_t = std::stoll(a.at("opt_t"));
  st.weight.l_ema = std::stod(a.at("l_ema"));
  st.weight.gamma = std::stod(a.at("gamma"));
  st.weight.step = std::stoll(a.at("weight_step"));

  for (const auto& [name, t] : a.tensors) {
    if (name.rfind("param/", 0) == 0) st.params.add(name.substr(6), t);
  }
  for (const auto& [name, t] : st.params.items()) {
    st.opt_m.push_back(a.tensor("opt_m/" + name));
    st.opt_v.push_back(a.tensor("opt_v/" + name));
  }
  return st;
}

// --- training ----------------------------------------------------------------

namespace {

Tensor chunk_from(const Trajectory& traj, int t, int chunk_len, int action_dim) {
  Tensor a = Tensor::zeros({chunk_len, action_dim});
  const int n = static_cast<int>(traj.steps.size());
  for (int r = 0; r < chunk_len; ++r) {
    const int src = std::min(t + r, n - 1);  // repeat the final action past the end
    for (int c = 0; c < action_dim; ++c)
      a.data()[static_cast<std::size_t>(r) * action_dim + c] =
          traj.steps[static_cast<std::size_t>(src)].action[static_cast<std::size_t>(c)];
  }
  return a;
}

std::string format_metric(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

TrainResult train(const TrainConfig& cfg_in, const std::string& resume_from) {
  TrainConfig cfg = cfg_in;
  cfg.validate();

  std::vector<Trajectory> data = read_trajectories(cfg.train_data);
  if (data.empty()) throw std::runtime_error("train: dataset '" + cfg.train_data + "' is empty");
  for (const Trajectory& t : data)
    if (t.steps.empty())
      throw std::runtime_error("train: dataset '" + cfg.train_data +
                               "' contains an empty trajectory");
  Vocab vocab = build_vocab(data);

  PolicyConfig pc = cfg.policy;
  const Observation& probe_obs = data[0].steps[0].obs;
  pc.n_views = probe_obs.view_features.dim(0);
  pc.view_feature_dim = probe_obs.view_features.dim(1);
  pc.state_dim = probe_obs.robot_state.dim(0);
  pc.action_dim = static_cast<int>(data[0].steps[0].action.size());
  pc.vocab_size = vocab.size();
  pc.validate();
  PolicyNet net(pc);

  struct Window {
    int traj;
    int t;
  };
  std::vector<Window> windows;
  for (int i = 0; i < static_cast<int>(data.size()); ++i)
    for (int t = 0; t < static_cast<int>(data[static_cast<std::size_t>(i)].steps.size()); ++t)
      windows.push_back({i, t});

  // Training-side instruction views and a token cache; held-out paraphrases
  // never enter the sampling pool.
  std::vector<InstructionSet> train_views;
  train_views.reserve(data.size());
  std::unordered_map<std::string, std::vector<int>> token_cache;
  for (const Trajectory& traj : data) {
    InstructionSet view = training_instruction_view(traj.instructions);
    token_cache.emplace(view.original, vocab.encode(view.original));
    for (const std::string& p : view.paraphrases) token_cache.emplace(p, vocab.encode(p));
    train_views.push_back(std::move(view));
  }

  Rng init_rng = Rng(cfg.seed).split(0x12171);
  ParamSet params = init_policy_params(pc, init_rng);
  AdamW opt(params, cfg.opt);
  AdaptiveWeightState weight{cfg.l_ema_init, cfg.gamma, 0};
  std::int64_t start_step = 0;

  if (!resume_from.empty()) {
    CheckpointState st = load_checkpoint(resume_from);
    if (st.vocab_hash != vocab.hash())
      throw std::runtime_error("train: checkpoint field vocab_hash does not match dataset '" +
                               cfg.train_data + "'");
    for (const auto& [k, v] : st.policy.to_kv()) {
      for (const auto& [k2, v2] : pc.to_kv())
        if (k == k2 && v != v2)
          throw std::runtime_error("train: checkpoint field policy." + k +
                                   " (=" + v + ") does not match config (=" + v2 + ")");
    }
    params = std::move(st.params);
    opt.restore(std::move(st.opt_m), std::move(st.opt_v), st.opt_t);
    weight = st.weight;
    start_step = st.step;
  }

  std::vector<char> trainable(params.size(), 1);
  for (int l = 0; l < pc.freeze_enc_layers; ++l) {
    const std::string prefix = "enc.layer" + std::to_string(l) + ".";
    for (std::size_t p = 0; p < params.size(); ++p)
      if (params.items()[p].first.rfind(prefix, 0) == 0) trainable[p] = 0;
  }

  std::filesystem::create_directories(cfg.out_dir);
  const std::string metrics_path = cfg.out_dir + "/metrics.csv";
  std::ofstream metrics(metrics_path, std::ios::binary);
  if (!metrics) throw std::runtime_error("train: cannot open '" + metrics_path + "'");
  metrics << "step,l_clean,l_pert,l_sft,l_ec,l_oc,lambda,l_total,lr\n";

  StepConfig step_cfg;
  step_cfg.oc = cfg.oc;
  step_cfg.timestep = cfg.timestep;
  step_cfg.toggles.ic = cfg.ic;
  step_cfg.toggles.ec = cfg.ec;
  step_cfg.toggles.oc = cfg.oc_on;
  step_cfg.strategy = cfg.strategy;

  const int batch = cfg.batch_size;
  std::string last_checkpoint;

  auto save_state = [&](const std::string& path, std::int64_t step) {
    CheckpointState st;
    st.policy = pc;
    st.params = params;
    st.opt_m = opt.first_moments();
    st.opt_v = opt.second_moments();
    st.opt_t = opt.step_count();
    st.weight = weight;
    st.step = step;
    st.seed = cfg.seed;
    st.vocab_hash = vocab.hash();
    save_checkpoint(path, st);
    last_checkpoint = path;
  };

  TrainResult result;
  for (std::int64_t j = start_step + 1; j <= cfg.total_steps; ++j) {
    Rng pick_rng = Rng(cfg.seed).split(0xDA7AULL).split(static_cast<std::uint64_t>(j));
    std::vector<Window> chosen(static_cast<std::size_t>(batch));
    for (int e = 0; e < batch; ++e)
      chosen[static_cast<std::size_t>(e)] =
          windows[static_cast<std::size_t>(pick_rng.uniform_int(static_cast<int>(windows.size())))];

    std::vector<std::unique_ptr<Tape>> tapes(static_cast<std::size_t>(batch));
    std::vector<ConsistencyBatch> plans(static_cast<std::size_t>(batch));
    std::vector<std::string> errors(static_cast<std::size_t>(batch));

    parallel_for(batch, cfg.threads, [&](int e) {
      try {
        const Window& w = chosen[static_cast<std::size_t>(e)];
        const Trajectory& traj = data[static_cast<std::size_t>(w.traj)];
        const InstructionSet& view = train_views[static_cast<std::size_t>(w.traj)];

        const std::string* text = &traj.instructions.original;
        if (cfg.ic && view.n_lang() > 1) {
          Rng ic_rng = Rng(cfg.seed)
                           .split(0x1C09ULL)
                           .split(static_cast<std::uint64_t>(j))
                           .split(static_cast<std::uint64_t>(e));
          text = &sample_instruction(view, ic_rng);
        }

        StepInputs inputs;
        inputs.token_ids = token_cache.at(*text);
        inputs.obs = &traj.steps[static_cast<std::size_t>(w.t)].obs;
        inputs.a_gt = chunk_from(traj, w.t, pc.chunk_len, pc.action_dim);

        tapes[static_cast<std::size_t>(e)] = std::make_unique<Tape>();
        Rng path_rng = Rng(cfg.seed)
                           .split(0xBA7BULL)
                           .split(static_cast<std::uint64_t>(j))
                           .split(static_cast<std::uint64_t>(e));
        plans[static_cast<std::size_t>(e)] = build_consistency_forward(
            net, params, *tapes[static_cast<std::size_t>(e)], inputs, path_rng, step_cfg);
      } catch (const std::exception& ex) {
        errors[static_cast<std::size_t>(e)] = ex.what();
      }
    });
    for (int e = 0; e < batch; ++e)
      if (!errors[static_cast<std::size_t>(e)].empty())
        throw std::runtime_error("train: step " + std::to_string(j) + ", batch element " +
                                 std::to_string(e) + ": " + errors[static_cast<std::size_t>(e)]);

    double l_clean = 0, l_pert = 0, l_sft = 0, l_ec = 0, l_oc = 0;
    for (int e = 0; e < batch; ++e) {
      const ConsistencyBatch& b = plans[static_cast<std::size_t>(e)];
      l_clean += b.l_clean;
      l_pert += b.l_pert;
      l_sft += b.l_sft;
      l_ec += b.l_ec;
      l_oc += b.l_oc;
    }
    l_clean /= batch;
    l_pert /= batch;
    l_sft /= batch;
    l_ec /= batch;
    l_oc /= batch;
    if (!std::isfinite(l_clean))
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(j) +
                               (last_checkpoint.empty()
                                    ? std::string("; no checkpoint written yet")
                                    : "; last good checkpoint retained at " + last_checkpoint));

    // One EMA update per step, fed by the batch-mean clean loss.
    const double lambda = update_adaptive_weight(weight, l_clean);

    std::vector<std::vector<Tensor>> grads(static_cast<std::size_t>(batch));
    parallel_for(batch, cfg.threads, [&](int e) {
      try {
        ConsistencyBatch& b = plans[static_cast<std::size_t>(e)];
        b.lambda = lambda;
        b.l_total_node = b.l_c_node.defined() ? add(b.l_sft_node, scale(b.l_c_node, lambda))
                                              : b.l_sft_node;
        b.l_total = b.l_total_node.item();
        std::vector<Tensor> wrt;
        wrt.reserve(b.bound_params.size());
        for (const auto& [name, t] : b.bound_params.items()) wrt.push_back(t);
        GradientRecord rec =
            tapes[static_cast<std::size_t>(e)]->backward(b.l_total_node, wrt);
        auto& ge = grads[static_cast<std::size_t>(e)];
        ge.reserve(wrt.size());
        for (const Tensor& w : wrt) ge.push_back(rec.at(w));
      } catch (const std::exception& ex) {
        errors[static_cast<std::size_t>(e)] = ex.what();
      }
    });
    for (int e = 0; e < batch; ++e)
      if (!errors[static_cast<std::size_t>(e)].empty())
        throw std::runtime_error("train: step " + std::to_string(j) + ", backward of element " +
                                 std::to_string(e) + ": " + errors[static_cast<std::size_t>(e)]);

    double l_total = 0;
    for (int e = 0; e < batch; ++e) l_total += plans[static_cast<std::size_t>(e)].l_total;
    l_total /= batch;
    if (!std::isfinite(l_total))
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(j) +
                               (last_checkpoint.empty()
                                    ? std::string("; no checkpoint written yet")
                                    : "; last good checkpoint retained at " + last_checkpoint));

    std::vector<Tensor> mean_grads;
    mean_grads.reserve(params.size());
    const double inv_b = 1.0 / static_cast<double>(batch);
    for (std::size_t p = 0; p < params.size(); ++p) {
      Tensor acc = Tensor::zeros(params.items()[p].second.shape());
      for (int e = 0; e < batch; ++e) {
        const Tensor& g = grads[static_cast<std::size_t>(e)][p];
        for (std::int64_t i = 0; i < acc.size(); ++i) acc.data()[i] += g.data()[i];
      }
      for (std::int64_t i = 0; i < acc.size(); ++i) acc.data()[i] *= inv_b;
      mean_grads.push_back(std::move(acc));
    }

    for (int e = 0; e < batch; ++e) {
      plans[static_cast<std::size_t>(e)] = ConsistencyBatch{};
      tapes[static_cast<std::size_t>(e)].reset();
      grads[static_cast<std::size_t>(e)].clear();
    }

    const double lr = lr_at(j, cfg.total_steps, cfg.warmup_frac, cfg.peak_lr);
    opt.step(params, mean_grads, lr, trainable);

    metrics << j << ',' << format_metric(l_clean) << ',' << format_metric(l_pert) << ','
            << format_metric(l_sft) << ',' << format_metric(l_ec) << ',' << format_metric(l_oc)
            << ',' << format_metric(lambda) << ',' << format_metric(l_total) << ','
            << format_metric(lr) << '\n';

    if (cfg.checkpoint_every > 0 && j % cfg.checkpoint_every == 0 && j != cfg.total_steps)
      save_state(cfg.out_dir + "/checkpoint_" + std::to_string(j) + ".bin", j);
    result.final_l_total = l_total;
    result.steps_run = j;
  }

  save_state(cfg.out_dir + "/checkpoint_final.bin", cfg.total_steps);
  metrics.flush();
  result.checkpoint_path = last_checkpoint;
  result.metrics_path = metrics_path;
  return result;
}

// --- evaluation and ablation -------------------------------------------------

EvalReport evaluate(const std::string& checkpoint_path, const std::string& dataset_path,
                    int level, int trials_per_cell, std::uint64_t eval_seed, int k_steps,
                    int threads) {
  CheckpointState st = load_checkpoint(checkpoint_path);
  std::vector<Trajectory> data = read_trajectories(dataset_path);
  EvalInstructions instructions = eval_instructions_from(data);
  const std::uint64_t vh = Vocab::from_words(instructions.vocab).hash();
  if (vh != st.vocab_hash)
    throw std::runtime_error("evaluate: checkpoint field vocab_hash does not match dataset '" +
                             dataset_path + "'");

  EvalSuite suite;
  for (const TaskSpec& t : default_tasks())
    if (instructions.per_task.count(t.task_id)) suite.tasks.push_back(t);
  if (suite.tasks.empty())
    throw std::runtime_error("evaluate: dataset '" + dataset_path +
                             "' names no known benchmark tasks");
  for (int axis = 0; axis < kAxisCount; ++axis)
    suite.perturbations.push_back(
        PerturbationSpec{static_cast<PerturbAxis>(axis), level, eval_seed});
  suite.trials_per_cell = trials_per_cell;
  suite.inference.steps = k_steps;
  suite.seed = eval_seed;
  suite.threads = threads;

  PolicyNet net(st.policy);
  Environment env;
  return evaluate_policy(net, st.params, env, suite, instructions);
}

std::string ResultsTable::to_csv() const {
  auto flag = [](bool b) { return b ? "1" : "0"; };
  char buf[32];
  std::string out = "IC,EC,OC,Camera,Robot,Language,Light,Background,Noise,Layout,Total\n";
  for (const AblationRow& row : rows) {
    out += flag(row.ic);
    out += ',';
    out += flag(row.ec);
    out += ',';
    out += flag(row.oc);
    for (int i = 0; i < kAxisCount; ++i) {
      out += ',';
      if (row.failed) out += "FAIL";
      else {
        std::snprintf(buf, sizeof(buf), "%.1f", row.rates[static_cast<std::size_t>(i)]);
        out += buf;
      }
    }
    out += ',';
    if (row.failed) out += "FAIL";
    else {
      std::snprintf(buf, sizeof(buf), "%.1f", row.total);
      out += buf;
    }
    out += '\n';
  }
  if (!rows.empty() && !rows.front().failed) {
    out += "IC,EC,OC,dCamera,dRobot,dLanguage,dLight,dBackground,dNoise,dLayout,dTotal\n";
    const AblationRow& base = rows.front();
    for (std::size_t r = 1; r < rows.size(); ++r) {
      const AblationRow& row = rows[r];
      out += flag(row.ic);
      out += ',';
      out += flag(row.ec);
      out += ',';
      out += flag(row.oc);
      for (int i = 0; i < kAxisCount; ++i) {
        out += ',';
        if (row.failed) out += "FAIL";
        else {
          std::snprintf(buf, sizeof(buf), "%+.1f",
                        row.rates[static_cast<std::size_t>(i)] -
                            base.rates[static_cast<std::size_t>(i)]);
          out += buf;
        }
      }
      out += ',';
      if (row.failed) out += "FAIL";
      else {
        std::snprintf(buf, sizeof(buf), "%+.1f", row.total - base.total);
        out += buf;
      }
      out += '\n';
    }
  }
  return out;
}

ResultsTable run_ablation(const TrainConfig& base, const std::vector<std::uint64_t>& seeds,
                          const std::string& out_dir) {
  if (seeds.empty()) throw std::invalid_argument("run_ablation: no seeds");
  struct RowSpec {
    bool ic, ec, oc;
  };
  const std::array<RowSpec, 5> grid{{{false, false, false},
                                     {false, true, false},
                                     {true, true, false},
                                     {false, true, true},
                                     {true, true, true}}};
  std::filesystem::create_directories(out_dir);

  ResultsTable table;
  for (std::size_t r = 0; r < grid.size(); ++r) {
    AblationRow row;
    row.ic = grid[r].ic;
    row.ec = grid[r].ec;
    row.oc = grid[r].oc;
    std::array<double, kAxisCount> rate_sum{};
    double total_sum = 0.0;
    try {
      for (std::size_t s = 0; s < seeds.size(); ++s) {
        TrainConfig cfg = base;
        cfg.seed = seeds[s];
        cfg.ic = row.ic;
        cfg.ec = row.ec;
        cfg.oc_on = row.oc;
        cfg.out_dir = out_dir + "/row" + std::to_string(r) + "_seed" + std::to_string(s);
        TrainResult tr = train(cfg);
        EvalReport rep = evaluate(tr.checkpoint_path, cfg.train_data, cfg.eval_level,
                                  cfg.trials_per_cell, cfg.eval_seed + s, cfg.inference.steps,
                                  cfg.threads);
        for (int i = 0; i < kAxisCount; ++i)
          rate_sum[static_cast<std::size_t>(i)] += rep.per_axis[static_cast<std::size_t>(i)].rate();
        total_sum += rep.total.rate();
      }
      for (int i = 0; i < kAxisCount; ++i)
        row.rates[static_cast<std::size_t>(i)] =
            rate_sum[static_cast<std::size_t>(i)] / static_cast<double>(seeds.size());
      row.total = total_sum / static_cast<double>(seeds.size());
    } catch (const std::exception& e) {
      row.failed = true;
      std::fprintf(stderr, "ablation row %zu failed: %s\n", r, e.what());
    }
    table.rows.push_back(row);
  }

  std::ofstream out(out_dir + "/ablation.csv", std::ios::binary);
  out << table.to_csv();
  return table;
}

GenDataSummary gen_data(const std::string& out_path, const std::vector<TaskSpec>& tasks,
                        const std::vector<PerturbationSpec>& grid, int per_cell,
                        std::uint64_t seed) {
  if (tasks.empty()) throw std::invalid_argument("gen_data: no tasks");
  if (grid.empty()) throw std::invalid_argument("gen_data: empty perturbation grid");
  Environment env;
  std::vector<Trajectory> all;
  GenDataSummary summary;
  std::uint64_t cell = 0;
  for (const TaskSpec& task : tasks) {
    for (const PerturbationSpec& pert : grid) {
      Rng rng = Rng(seed).split(cell++);
      std::vector<Trajectory> demos = collect_demonstrations(env, task, pert, per_cell, rng);
      summary.per_cell.emplace_back(task.task_id + "/" + to_string(pert.axis) + "/" +
                                        std::to_string(pert.level),
                                    static_cast<int>(demos.size()));
      summary.total += static_cast<int>(demos.size());
      all.insert(all.end(), std::make_move_iterator(demos.begin()),
                 std::make_move_iterator(demos.end()));
    }
  }
  write_trajectories(out_path, all);
  return summary;
}

ParaphraseSummary expand_dataset_instructions(const std::string& in_path,
                                              const std::string& out_path,
                                              const std::string& report_path,
                                              RewriterClient& client, const RewriterConfig& cfg,
                                              int cap, std::uint64_t seed) {
  std::vector<Trajectory> data = read_trajectories(in_path);
  std::ofstream report(report_path, std::ios::binary);
  if (!report)
    throw std::runtime_error("expand_dataset_instructions: cannot open '" + report_path + "'");

  ParaphraseSummary summary;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Rng rng = Rng(seed).split(i);
    ParaphraseOutcome out =
        paraphrase_instruction(client, data[i].instructions.original, cfg, cap, rng);
    data[i].instructions = out.instructions;
    summary.trajectories += 1;
    summary.client_failures += out.client_failures;
    for (const RewriteCandidate& c : out.report) {
      const bool kept =
          c.status == FilterStatus::kept || c.status == FilterStatus::normalized;
      summary.kept_total += kept ? 1 : 0;
      summary.dropped_total += kept ? 0 : 1;
      nlohmann::json line{{"trajectory", i},
                          {"task_id", data[i].task_id},
                          {"style_id", c.style_id},
                          {"sample_index", c.sample_index},
                          {"status", to_string(c.status)},
                          {"text", c.text}};
      report << line.dump() << '\n';
    }
  }
  write_trajectories(out_path, data);
  return summary;
}

}  // namespace actflow
