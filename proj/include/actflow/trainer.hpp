#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "actflow/bench.hpp"
#include "actflow/checkpoint.hpp"
#include "actflow/consistency.hpp"
#include "actflow/dataset.hpp"
#include "actflow/paraphrase.hpp"
#include "actflow/policy.hpp"

namespace actflow {

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // global-norm gradient clip; <= 0 disables
};

// Linear warmup to the peak over the first warmup fraction of training, then
// cosine decay to exactly zero at the final step. Steps are 1-indexed.
double lr_at(std::int64_t step, std::int64_t total_steps, double warmup_frac, double peak_lr);

// Decoupled-weight-decay adaptive-moment optimizer over a ParamSet.
class AdamW {
 public:
  AdamW(const ParamSet& params, OptimizerConfig cfg);

  // grads are aligned with params.items(); frozen entries are skipped.
  void step(ParamSet& params, const std::vector<Tensor>& grads, double lr,
            const std::vector<char>& trainable);

  std::int64_t step_count() const { return t_; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  void restore(std::vector<Tensor> m, std::vector<Tensor> v, std::int64_t t);

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::int64_t t_ = 0;
};

struct TrainConfig {
  std::uint64_t seed = 0;
  int batch_size = 8;
  int total_steps = 1000;
  double peak_lr = 1e-4;
  double warmup_frac = 0.05;
  OptimizerConfig opt;
  OCConfig oc;
  TimestepSamplerConfig timestep;
  PolicyConfig policy;
  InferenceConfig inference;  // Euler steps for evaluation
  bool ic = true;
  bool ec = true;
  bool oc_on = true;
  GradStrategy strategy = GradStrategy::reuse;
  double l_ema_init = 100.0;
  double gamma = 0.95;

  std::string train_data;
  std::string out_dir = "run";
  int checkpoint_every = 0;  // extra checkpoints every n steps; final always
  int threads = 1;

  // Evaluation defaults shared by `eval` and `ablate`.
  int trials_per_cell = 10;
  int eval_level = 2;
  std::uint64_t eval_seed = 1;

  void validate() const;
};

// Flat key = value configuration file; '#' starts a comment. Unknown keys
// are errors. Returns the defaults overlaid with the file's settings.
TrainConfig parse_train_config(const std::string& path);
void apply_config_key(TrainConfig& cfg, const std::string& key, const std::string& value);

struct TrainResult {
  std::string checkpoint_path;
  std::string metrics_path;
  double final_l_total = 0.0;
  std::int64_t steps_run = 0;
};

// Full training loop: IC-resolved instruction sampling, the consistency step
// per batch element, one shared EMA/weight update per step, AdamW under the
// warmup-cosine schedule, CSV metrics, and periodic checkpoints. A non-finite
// loss aborts with the last written checkpoint retained.
TrainResult train(const TrainConfig& cfg, const std::string& resume_from = "");

// Trainer checkpoint contents, exposed for the CLI and tests.
struct CheckpointState {
  PolicyConfig policy;
  ParamSet params;
  std::vector<Tensor> opt_m, opt_v;
  std::int64_t opt_t = 0;
  AdaptiveWeightState weight;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  std::uint64_t vocab_hash = 0;
};
void save_checkpoint(const std::string& path, const CheckpointState& state);
CheckpointState load_checkpoint(const std::string& path);

// Evaluation over the seven-axis suite at one magnitude level, with
// instructions and vocabulary sourced from the dataset file.
EvalReport evaluate(const std::string& checkpoint_path, const std::string& dataset_path,
                    int level, int trials_per_cell, std::uint64_t eval_seed, int k_steps,
                    int threads);

struct AblationRow {
  bool ic = false, ec = false, oc = false;
  bool failed = false;
  std::array<double, kAxisCount> rates{};  // mean over seeds, percent
  double total = 0.0;
};

struct ResultsTable {
  std::vector<AblationRow> rows;  // {none}, {EC}, {IC,EC}, {EC,OC}, {IC,EC,OC}
  std::string to_csv() const;     // includes per-row deltas against row 0
};

// Trains and evaluates the five toggle rows with matched seeds and budgets.
// A row failure marks the row and the table stays partial.
ResultsTable run_ablation(const TrainConfig& base, const std::vector<std::uint64_t>& seeds,
                          const std::string& out_dir);

struct GenDataSummary {
  std::vector<std::pair<std::string, int>> per_cell;  // "task/axis/level" -> count
  int total = 0;
};

// Expert demonstrations for every (task, perturbation) cell, written in the
// trajectory format.
GenDataSummary gen_data(const std::string& out_path, const std::vector<TaskSpec>& tasks,
                        const std::vector<PerturbationSpec>& grid, int per_cell,
                        std::uint64_t seed);

struct ParaphraseSummary {
  int trajectories = 0;
  int kept_total = 0;
  int dropped_total = 0;
  int client_failures = 0;
};

// Expands every trajectory's instruction list through the rewrite pipeline
// and writes a sidecar report with one line per candidate.
ParaphraseSummary expand_dataset_instructions(const std::string& in_path,
                                              const std::string& out_path,
                                              const std::string& report_path,
                                              RewriterClient& client, const RewriterConfig& cfg,
                                              int cap, std::uint64_t seed);

}  // namespace actflow
