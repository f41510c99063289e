#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "actflow/flow.hpp"
#include "actflow/policy.hpp"
#include "actflow/rng.hpp"
#include "actflow/tensor.hpp"

namespace actflow {

// A trajectory's original instruction plus its paraphrases. Index 0 is the
// original; raw texts must be unique.
struct InstructionSet {
  std::string original;
  std::vector<std::string> paraphrases;

  int n_lang() const { return 1 + static_cast<int>(paraphrases.size()); }
  const std::string& at(int i) const {
    return i == 0 ? original : paraphrases[static_cast<std::size_t>(i - 1)];
  }
  void validate() const;  // throws on empty original or duplicate texts
};

int sample_instruction_index(const InstructionSet& set, Rng& rng);
const std::string& sample_instruction(const InstructionSet& set, Rng& rng);

// L2 agreement between two velocity predictions on the same path; gradients
// flow into both arguments.
Tensor ec_loss(const Tensor& v1, const Tensor& v2);

struct OCConfig {
  double alpha = 0.01;      // perturbation step size
  double eps_adv = 0.03;    // relative budget
  double grad_floor = 1e-12;  // below this gradient norm, inputs pass through
};

// Gradient-direction perturbation with magnitude min(alpha, eps_adv * |x|).
// Directions are constants: no gradient flows through them. Inputs whose
// gradient norm is under grad_floor are returned unchanged with eta = 0.
struct PerturbResult {
  Tensor v_tilde;
  Tensor q_tilde;
  double eta_v = 0.0;
  double eta_q = 0.0;
};
PerturbResult oc_perturb(const Tensor& v_t, const Tensor& q_t, const Tensor& grad_v,
                         const Tensor& grad_q, const OCConfig& cfg);

// 0.5 * sum_i |v_pert_i - sg(v_clean_i)|^2; gradients reach only the
// perturbed branch.
Tensor oc_loss(const Tensor& v_pert_1, const Tensor& v_pert_2, const Tensor& v_clean_1,
               const Tensor& v_clean_2);

struct SupervisedLosses {
  Tensor clean;  // 0.5 * sum_i |v_clean_i - v_gt|^2
  Tensor pert;
  Tensor sft;    // their mean
};
SupervisedLosses supervised_losses(const Tensor& v_clean_1, const Tensor& v_clean_2,
                                   const Tensor& v_pert_1, const Tensor& v_pert_2,
                                   const Tensor& v_gt);

// EMA of the clean supervised loss and the derived weight. The update runs
// first, then the weight for the current step is read: lambda_j depends on
// the step's own clean loss.
struct AdaptiveWeightState {
  double l_ema = 100.0;
  double gamma = 0.95;
  std::int64_t step = 0;

  double lambda() const { return 1.0 / (1.0 + l_ema); }
};
double update_adaptive_weight(AdaptiveWeightState& state, double l_clean);

struct ConsistencyToggles {
  bool ic = true;
  bool ec = true;
  bool oc = true;
  // Test hook: force the consistency weight instead of reading the EMA.
  std::optional<double> lambda_override;
};

// How OC input gradients are obtained: by reusing the recorded clean forward
// or by recomputing it on a scratch tape. Both must produce identical
// parameter gradients.
enum class GradStrategy { reuse, recompute };

struct StepConfig {
  OCConfig oc;
  TimestepSamplerConfig timestep;
  ConsistencyToggles toggles;
  GradStrategy strategy = GradStrategy::reuse;
};

struct StepInputs {
  std::vector<int> token_ids;   // instruction already resolved (IC sampling)
  const Observation* obs = nullptr;
  Tensor a_gt;                  // (L, d_a) expert chunk
};

// Everything one consistency step produces: paired timesteps, the four
// velocity predictions, the loss breakdown, and the graph handles the
// caller needs to run the parameter backward pass.
struct ConsistencyBatch {
  double tau1 = 0.0, tau2 = 0.0;
  Tensor noise;  // shared across both timesteps
  Tensor v_clean_1, v_clean_2, v_pert_1, v_pert_2;
  Tensor q_leaf;
  SemanticFeatures features;
  ParamSet bound_params;

  Tensor l_clean_node, l_pert_node, l_sft_node, l_ec_node, l_oc_node, l_c_node, l_total_node;

  double l_clean = 0.0, l_pert = 0.0, l_sft = 0.0, l_ec = 0.0, l_oc = 0.0, l_c = 0.0,
         l_total = 0.0, lambda = 0.0;
  double eta_v = 0.0, eta_q = 0.0;
};

// Forward graph for one sample without the weight update; the trainer uses
// this to share one EMA update across a batch.
ConsistencyBatch build_consistency_forward(const PolicyNet& net, const ParamSet& raw_params,
                                           Tape& tape, const StepInputs& in, Rng& path_rng,
                                           const StepConfig& cfg);

// Attaches the weighted total to a built forward: updates the EMA with
// l_clean_value, then l_total = l_sft + lambda * l_c.
void attach_total(ConsistencyBatch& batch, AdaptiveWeightState& state, double l_clean_value,
                  const ConsistencyToggles& toggles);

// The canonical single-sample training step: forward graph, EMA update, and
// weighted total, in the fixed stage order. Sub-operation failures carry the
// stage name.
ConsistencyBatch assemble_training_step(const PolicyNet& net, const ParamSet& raw_params,
                                        Tape& tape, const StepInputs& in, Rng& path_rng,
                                        const StepConfig& cfg, AdaptiveWeightState& state);

}  // namespace actflow
