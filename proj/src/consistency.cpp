#include "actflow/consistency.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace actflow {

void InstructionSet::validate() const {
  if (original.empty())
    throw std::invalid_argument("InstructionSet: original instruction is empty");
  std::unordered_set<std::string> seen{original};
  for (const std::string& p : paraphrases)
    if (!seen.insert(p).second)
      throw std::invalid_argument("InstructionSet: duplicate raw text '" + p + "'");
}

int sample_instruction_index(const InstructionSet& set, Rng& rng) {
  set.validate();
  return rng.uniform_int(set.n_lang());
}

const std::string& sample_instruction(const InstructionSet& set, Rng& rng) {
  return set.at(sample_instruction_index(set, rng));
}

Tensor ec_loss(const Tensor& v1, const Tensor& v2) {
  if (v1.shape() != v2.shape())
    throw std::invalid_argument("ec_loss: shape mismatch " + shape_str(v1.shape()) + " vs " +
                                shape_str(v2.shape()));
  return sum_squares(sub(v1, v2));
}

namespace {

// x + eta * g / |g|, with the direction treated as a constant.
Tensor nudge(const Tensor& x, const Tensor& grad, double grad_norm, double eta) {
  Tensor dir = Tensor::zeros(grad.shape());
  const double c = eta / grad_norm;
  for (std::int64_t i = 0; i < grad.size(); ++i) dir.data()[i] = c * grad.data()[i];
  return add(x, dir);
}

}  // namespace

PerturbResult oc_perturb(const Tensor& v_t, const Tensor& q_t, const Tensor& grad_v,
                         const Tensor& grad_q, const OCConfig& cfg) {
  if (grad_v.shape() != v_t.shape())
    throw std::invalid_argument("oc_perturb: grad_v shape " + shape_str(grad_v.shape()) +
                                " does not match v_t " + shape_str(v_t.shape()));
  if (grad_q.shape() != q_t.shape())
    throw std::invalid_argument("oc_perturb: grad_q shape " + shape_str(grad_q.shape()) +
                                " does not match q_t " + shape_str(q_t.shape()));

  PerturbResult out;
  const double gv = l2_norm_value(grad_v);
  if (gv < cfg.grad_floor) {
    out.v_tilde = v_t;
    out.eta_v = 0.0;
  } else {
    out.eta_v = std::min(cfg.alpha, cfg.eps_adv * l2_norm_value(v_t));
    out.v_tilde = nudge(v_t, grad_v, gv, out.eta_v);
  }
  const double gq = l2_norm_value(grad_q);
  if (gq < cfg.grad_floor) {
    out.q_tilde = q_t;
    out.eta_q = 0.0;
  } else {
    out.eta_q = std::min(cfg.alpha, cfg.eps_adv * l2_norm_value(q_t));
    out.q_tilde = nudge(q_t, grad_q, gq, out.eta_q);
  }
  return out;
}

Tensor oc_loss(const Tensor& v_pert_1, const Tensor& v_pert_2, const Tensor& v_clean_1,
               const Tensor& v_clean_2) {
  if (v_pert_1.shape() != v_clean_1.shape() || v_pert_2.shape() != v_clean_2.shape())
    throw std::invalid_argument("oc_loss: mismatched velocity pair shapes");
  Tensor t1 = sum_squares(sub(v_pert_1, stop_gradient(v_clean_1)));
  Tensor t2 = sum_squares(sub(v_pert_2, stop_gradient(v_clean_2)));
  return scale(add(t1, t2), 0.5);
}

SupervisedLosses supervised_losses(const Tensor& v_clean_1, const Tensor& v_clean_2,
                                   const Tensor& v_pert_1, const Tensor& v_pert_2,
                                   const Tensor& v_gt) {
  SupervisedLosses out;
  out.clean = scale(add(fm_residual_loss(v_clean_1, v_gt), fm_residual_loss(v_clean_2, v_gt)), 0.5);
  out.pert = scale(add(fm_residual_loss(v_pert_1, v_gt), fm_residual_loss(v_pert_2, v_gt)), 0.5);
  out.sft = scale(add(out.clean, out.pert), 0.5);
  return out;
}

double update_adaptive_weight(AdaptiveWeightState& state, double l_clean) {
  if (!(l_clean >= 0.0) || !std::isfinite(l_clean))
    throw std::invalid_argument("update_adaptive_weight: clean loss must be finite and >= 0, got " +
                                std::to_string(l_clean));
  state.l_ema = state.gamma * state.l_ema + (1.0 - state.gamma) * l_clean;
  state.step += 1;
  return state.lambda();
}

namespace {

template <class Fn>
auto stage(const char* name, Fn&& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("training step stage '") + name + "': " + e.what());
  }
}

}  // namespace

ConsistencyBatch build_consistency_forward(const PolicyNet& net, const ParamSet& raw_params,
                                           Tape& tape, const StepInputs& in, Rng& path_rng,
                                           const StepConfig& cfg) {
  const PolicyConfig& pc = net.config();
  if (in.obs == nullptr) throw std::invalid_argument("consistency step: missing observation");
  const bool need_ec_graph = cfg.toggles.ec || cfg.toggles.oc;

  ConsistencyBatch b;

  // (1) Two evolution timesteps and one shared noise draw.
  stage("sample timesteps and noise", [&] {
    b.tau1 = sample_timestep(path_rng, cfg.timestep);
    b.tau2 = sample_timestep(path_rng, cfg.timestep);
    b.noise = randn({pc.chunk_len, pc.action_dim}, path_rng);
    return 0;
  });

  EvolutionSample path1 = make_path_sample(in.a_gt, b.noise, b.tau1);
  EvolutionSample path2 = make_path_sample(in.a_gt, b.noise, b.tau2);

  // (2) Clean forward passes at both timesteps over one encoding.
  b.bound_params = bind_params(&tape, raw_params);
  b.q_leaf = tape.leaf(in.obs->robot_state, true);
  stage("encode semantics", [&] {
    Observation obs{in.obs->view_features, b.q_leaf};
    b.features = net.encode_semantics(in.token_ids, obs, b.bound_params);
    return 0;
  });
  stage("clean velocity prediction", [&] {
    b.v_clean_1 = net.predict_velocity(b.features, path1.a_tau, b.q_leaf, b.tau1, b.bound_params);
    b.v_clean_2 = net.predict_velocity(b.features, path2.a_tau, b.q_leaf, b.tau2, b.bound_params);
    return 0;
  });

  // (3) Velocity agreement across the two evolution stages.
  if (need_ec_graph) {
    b.l_ec_node = stage("evolution consistency loss",
                        [&] { return ec_loss(b.v_clean_1, b.v_clean_2); });
    b.l_ec = b.l_ec_node.item();
  }

  if (cfg.toggles.oc) {
    // (4) Input gradients of the agreement loss; parameter accumulators are
    // untouched because gradients are returned, never stored.
    Tensor grad_v, grad_q;
    stage("consistency input gradients", [&] {
      if (cfg.strategy == GradStrategy::reuse) {
        GradientRecord g = tape.backward(b.l_ec_node, {b.features.visual_tokens, b.q_leaf});
        grad_v = g.at(b.features.visual_tokens);
        grad_q = g.at(b.q_leaf);
      } else {
        // Recompute the clean forward on a scratch tape and read the
        // gradients there; the main recording stays untouched.
        Tape scratch;
        ParamSet sbound = bind_params(&scratch, raw_params);
        Tensor sq = scratch.leaf(in.obs->robot_state, true);
        Observation obs{in.obs->view_features, sq};
        SemanticFeatures sf = net.encode_semantics(in.token_ids, obs, sbound);
        Tensor sv1 = net.predict_velocity(sf, path1.a_tau, sq, b.tau1, sbound);
        Tensor sv2 = net.predict_velocity(sf, path2.a_tau, sq, b.tau2, sbound);
        GradientRecord g = scratch.backward(ec_loss(sv1, sv2), {sf.visual_tokens, sq});
        grad_v = g.at(sf.visual_tokens).detached();
        grad_q = g.at(sq).detached();
      }
      return 0;
    });

    // (5) Gradient-direction perturbation of the visual tokens and state.
    PerturbResult pert = stage("observation perturbation", [&] {
      return oc_perturb(b.features.visual_tokens, b.q_leaf, grad_v, grad_q, cfg.oc);
    });
    b.eta_v = pert.eta_v;
    b.eta_q = pert.eta_q;

    // (6) Perturbed forwards reuse the same interpolants.
    stage("perturbed velocity prediction", [&] {
      SemanticFeatures fp{b.features.language_tokens, pert.v_tilde};
      b.v_pert_1 = net.predict_velocity(fp, path1.a_tau, pert.q_tilde, b.tau1, b.bound_params);
      b.v_pert_2 = net.predict_velocity(fp, path2.a_tau, pert.q_tilde, b.tau2, b.bound_params);
      return 0;
    });
  } else {
    // No perturbed branch: the perturbed predictions are the clean ones.
    b.v_pert_1 = b.v_clean_1;
    b.v_pert_2 = b.v_clean_2;
  }

  // (7) Loss assembly.
  stage("loss assembly", [&] {
    SupervisedLosses sup =
        supervised_losses(b.v_clean_1, b.v_clean_2, b.v_pert_1, b.v_pert_2, path1.v_gt);
    b.l_clean_node = sup.clean;
    b.l_pert_node = sup.pert;
    b.l_sft_node = sup.sft;
    if (cfg.toggles.oc)
      b.l_oc_node = oc_loss(b.v_pert_1, b.v_pert_2, b.v_clean_1, b.v_clean_2);

    if (cfg.toggles.ec && cfg.toggles.oc)
      b.l_c_node = scale(add(b.l_ec_node, b.l_oc_node), 0.5);
    else if (cfg.toggles.ec)
      b.l_c_node = scale(b.l_ec_node, 0.5);
    else if (cfg.toggles.oc)
      b.l_c_node = scale(b.l_oc_node, 0.5);
    return 0;
  });

  b.l_clean = b.l_clean_node.item();
  b.l_pert = b.l_pert_node.item();
  b.l_sft = b.l_sft_node.item();
  b.l_oc = b.l_oc_node.defined() ? b.l_oc_node.item() : 0.0;
  b.l_c = b.l_c_node.defined() ? b.l_c_node.item() : 0.0;
  if (!cfg.toggles.ec && !cfg.toggles.oc) b.l_ec = 0.0;
  return b;
}

void attach_total(ConsistencyBatch& b, AdaptiveWeightState& state, double l_clean_value,
                  const ConsistencyToggles& toggles) {
  // (8) EMA update first, then the weight for this step.
  const double lambda = update_adaptive_weight(state, l_clean_value);
  b.lambda = toggles.lambda_override.value_or(lambda);
  // (9) Weighted total, ready for the parameter backward pass.
  b.l_total_node =
      b.l_c_node.defined() ? add(b.l_sft_node, scale(b.l_c_node, b.lambda)) : b.l_sft_node;
  b.l_total = b.l_total_node.item();
}

ConsistencyBatch assemble_training_step(const PolicyNet& net, const ParamSet& raw_params,
                                        Tape& tape, const StepInputs& in, Rng& path_rng,
                                        const StepConfig& cfg, AdaptiveWeightState& state) {
  ConsistencyBatch b = build_consistency_forward(net, raw_params, tape, in, path_rng, cfg);
  stage("weight update and total",
        [&] { attach_total(b, state, b.l_clean, cfg.toggles); return 0; });
  return b;
}

}  // namespace actflow
