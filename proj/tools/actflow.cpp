// Command-line front end: dataset generation, instruction paraphrasing,
// training, evaluation, and the consistency ablation grid.

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "actflow/trainer.hpp"

namespace {

using namespace actflow;

std::vector<std::string> split_csv(const std::string& text) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : text) {
    if (c == ',') {
      if (!cur.empty()) parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) parts.push_back(cur);
  return parts;
}

// Grid entries look like "noise:0" or "camera:2".
std::vector<PerturbationSpec> parse_grid(const std::vector<std::string>& entries,
                                         std::uint64_t seed) {
  std::vector<PerturbationSpec> grid;
  for (const std::string& entry : entries) {
    const auto colon = entry.find(':');
    if (colon == std::string::npos)
      throw std::invalid_argument("grid entry '" + entry + "' must be axis:level");
    PerturbationSpec spec;
    spec.axis = axis_from_string(entry.substr(0, colon));
    spec.level = std::stoi(entry.substr(colon + 1));
    spec.seed = seed;
    grid.push_back(spec);
  }
  return grid;
}

TrainConfig load_config(const std::string& config_path,
                        const std::vector<std::string>& overrides) {
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : parse_train_config(config_path);
  for (const std::string& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    apply_config_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

int default_threads() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

int run_gen_data(const std::string& out, const std::string& task_filter,
                 const std::vector<std::string>& grid_entries, int per_cell,
                 std::uint64_t seed) {
  std::vector<TaskSpec> tasks;
  if (task_filter == "all") {
    tasks = default_tasks();
  } else {
    for (const std::string& id : split_csv(task_filter)) {
      bool found = false;
      for (const TaskSpec& t : default_tasks()) {
        if (t.task_id == id) {
          tasks.push_back(t);
          found = true;
        }
      }
      if (!found) throw std::invalid_argument("unknown task id '" + id + "'");
    }
  }
  const std::vector<PerturbationSpec> grid =
      parse_grid(grid_entries.empty() ? std::vector<std::string>{"noise:0"} : grid_entries, seed);
  GenDataSummary summary = gen_data(out, tasks, grid, per_cell, seed);
  for (const auto& [cell, count] : summary.per_cell)
    std::printf("%-40s %d\n", cell.c_str(), count);
  std::printf("total trajectories: %d -> %s\n", summary.total, out.c_str());
  return 0;
}

int run_paraphrase(const std::string& in, const std::string& out, const std::string& report,
                   const std::string& backend, int cap, int samples, double temperature,
                   double top_p, int max_new_tokens, std::uint64_t seed) {
  std::unique_ptr<RewriterClient> client = make_rewriter(backend, seed);
  RewriterConfig cfg;
  cfg.samples_per_template = samples;
  cfg.temperature = temperature;
  cfg.top_p = top_p;
  cfg.max_new_tokens = max_new_tokens;
  ParaphraseSummary summary =
      expand_dataset_instructions(in, out, report, *client, cfg, cap, seed);
  std::printf("trajectories: %d  kept: %d  dropped: %d  client failures: %d\n",
              summary.trajectories, summary.kept_total, summary.dropped_total,
              summary.client_failures);
  std::printf("expanded dataset: %s\nfilter report: %s\n", out.c_str(), report.c_str());
  return 0;
}

int run_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& resume) {
  TrainConfig cfg = load_config(config_path, overrides);
  TrainResult result = train(cfg, resume);
  std::printf("trained %lld steps, final total loss %.6f\n",
              static_cast<long long>(result.steps_run), result.final_l_total);
  std::printf("checkpoint: %s\nmetrics: %s\n", result.checkpoint_path.c_str(),
              result.metrics_path.c_str());
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& data, int level, int trials,
             std::uint64_t seed, int k, int threads, const std::string& out) {
  EvalReport report = evaluate(checkpoint, data, level, trials, seed, k, threads);
  const std::string csv = report.to_csv();
  std::printf("%s", csv.c_str());
  if (!out.empty()) {
    std::ofstream f(out, std::ios::binary);
    f << csv;
    std::printf("report written to %s\n", out.c_str());
  }
  return 0;
}

int run_ablate(const std::string& config_path, const std::vector<std::string>& overrides,
               const std::string& seeds_csv, const std::string& out_dir) {
  TrainConfig base = load_config(config_path, overrides);
  std::vector<std::uint64_t> seeds;
  for (const std::string& s : split_csv(seeds_csv)) seeds.push_back(std::stoull(s));
  ResultsTable table = run_ablation(base, seeds, out_dir);
  std::printf("%s", table.to_csv().c_str());
  std::printf("table written to %s/ablation.csv\n", out_dir.c_str());
  for (const AblationRow& row : table.rows)
    if (row.failed) return 1;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flow-matching action policy trainer with consistency regularisation"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Collect scripted-expert demonstrations");
  std::string gen_out = "data.jsonl", gen_tasks = "all";
  std::vector<std::string> gen_grid;
  int gen_per_cell = 40;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "output dataset path");
  gen->add_option("--tasks", gen_tasks, "comma-separated task ids, or 'all'");
  gen->add_option("--grid", gen_grid, "perturbation cells as axis:level (default noise:0)");
  gen->add_option("--per-cell", gen_per_cell, "demonstrations per (task, cell)");
  gen->add_option("--seed", gen_seed, "collection seed");

  // paraphrase
  auto* par = app.add_subcommand("paraphrase", "Expand instruction lists through the rewriter");
  std::string par_in, par_out = "data_paraphrased.jsonl", par_report = "paraphrase_report.jsonl";
  std::string par_backend = "fallback";
  int par_cap = 15, par_samples = 5, par_max_tokens = 512;
  double par_temperature = 0.7, par_top_p = 0.9;
  std::uint64_t par_seed = 0;
  par->add_option("--in", par_in, "input dataset")->required();
  par->add_option("--out", par_out, "expanded dataset path");
  par->add_option("--report", par_report, "per-candidate filter report path");
  par->add_option("--backend", par_backend,
                  "'fallback' or an http endpoint (token from ACTFLOW_REWRITER_TOKEN)");
  par->add_option("--cap", par_cap, "max paraphrases kept per trajectory");
  par->add_option("--samples", par_samples, "candidates per prompt template");
  par->add_option("--temperature", par_temperature, "decoding temperature");
  par->add_option("--top-p", par_top_p, "nucleus sampling threshold");
  par->add_option("--max-new-tokens", par_max_tokens, "generation length limit");
  par->add_option("--seed", par_seed, "subsampling seed");

  // train
  auto* tr = app.add_subcommand("train", "Train a policy");
  std::string tr_config, tr_resume;
  std::vector<std::string> tr_set;
  tr->add_option("--config", tr_config, "key = value config file");
  tr->add_option("--set", tr_set, "config overrides as key=value");
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint over the perturbation suite");
  std::string ev_ckpt, ev_data, ev_out;
  int ev_level = 2, ev_trials = 10, ev_k = 8, ev_threads = default_threads();
  std::uint64_t ev_seed = 1;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data, "dataset supplying instructions and vocabulary")->required();
  ev->add_option("--level", ev_level, "perturbation magnitude level (0-3)");
  ev->add_option("--trials", ev_trials, "episodes per (task, axis) cell");
  ev->add_option("--seed", ev_seed, "evaluation seed");
  ev->add_option("--k", ev_k, "Euler integration steps");
  ev->add_option("--threads", ev_threads, "parallel rollout workers");
  ev->add_option("--out", ev_out, "also write the report CSV here");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train and evaluate the five consistency rows");
  std::string ab_config, ab_seeds = "1,2,3", ab_out = "ablation";
  std::vector<std::string> ab_set;
  ab->add_option("--config", ab_config, "key = value config file");
  ab->add_option("--set", ab_set, "config overrides as key=value");
  ab->add_option("--seeds", ab_seeds, "comma-separated training seeds");
  ab->add_option("--out-dir", ab_out, "output directory for rows and the table");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return run_gen_data(gen_out, gen_tasks, gen_grid, gen_per_cell, gen_seed);
    if (par->parsed())
      return run_paraphrase(par_in, par_out, par_report, par_backend, par_cap, par_samples,
                            par_temperature, par_top_p, par_max_tokens, par_seed);
    if (tr->parsed()) return run_train(tr_config, tr_set, tr_resume);
    if (ev->parsed())
      return run_eval(ev_ckpt, ev_data, ev_level, ev_trials, ev_seed, ev_k, ev_threads, ev_out);
    if (ab->parsed()) return run_ablate(ab_config, ab_set, ab_seeds, ab_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
