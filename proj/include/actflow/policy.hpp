#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "actflow/rng.hpp"
#include "actflow/tensor.hpp"

namespace actflow {

struct PolicyConfig {
  int d = 64;               // shared token width
  int n_enc_layers = 2;     // semantic encoder depth
  int n_dit_layers = 4;     // action generator depth
  int n_heads = 4;
  int chunk_len = 16;       // action-chunk horizon L
  int action_dim = 3;       // d_a
  int state_dim = 5;        // d_s
  int n_views = 2;          // M
  int view_feature_dim = 32;
  int tokens_per_view = 1;
  int vocab_size = 64;
  int max_lang_tokens = 24;
  int freeze_enc_layers = 0;  // first k encoder layers excluded from updates

  int n_view_tokens() const { return n_views * tokens_per_view; }
  void validate() const;  // throws std::invalid_argument on a bad field

  std::vector<std::pair<std::string, std::string>> to_kv() const;
  static PolicyConfig from_kv(const std::vector<std::pair<std::string, std::string>>& kv);
};

// One environment observation: per-view feature rows plus proprioception.
struct Observation {
  Tensor view_features;  // (M, view_feature_dim)
  Tensor robot_state;    // (d_s)
};

// Encoder output: aligned language and visual token grids of width d.
struct SemanticFeatures {
  Tensor language_tokens;  // (N_l, d)
  Tensor visual_tokens;    // (N_v, d)
};

// Ordered named tensors. Order is fixed by insertion so optimizer sweeps and
// checkpoints are deterministic.
class ParamSet {
 public:
  void add(std::string name, Tensor t);
  const Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::size_t size() const { return items_.size(); }
  std::int64_t total_elements() const;
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Fresh parameters: truncated-normal(0.02) weights, zero biases and norms.
ParamSet init_policy_params(const PolicyConfig& cfg, Rng& rng);

// Rebinds every parameter as a tracked leaf of the given tape. The returned
// set shares storage with `params`; pass tape=nullptr for plain evaluation.
ParamSet bind_params(Tape* tape, const ParamSet& params);

// Sinusoidal encoding of a timestep in [0, 1], as a (1, d) constant.
Tensor timestep_encoding(double tau, int d);

class PolicyNet {
 public:
  explicit PolicyNet(PolicyConfig cfg);

  // Maps instruction token ids and an observation to [l_t, v_t]. Token ids
  // must be < vocab_size; sequences longer than max_lang_tokens are truncated.
  SemanticFeatures encode_semantics(std::span<const int> token_ids, const Observation& obs,
                                    const ParamSet& params) const;

  // State + action tokens in the shared width-d space; the action projection
  // is additively conditioned on the sinusoidal encoding of tau.
  // Returns a (1 + L, d) grid with the state token first.
  Tensor embed_state_action(const Tensor& robot_state, const Tensor& a_tau, double tau,
                            const ParamSet& params) const;

  // Velocity prediction over the full joint token sequence; every generator
  // block modulates its normalisation from the tau encoding. Output (L, d_a).
  Tensor predict_velocity(const SemanticFeatures& features, const Tensor& a_tau,
                          const Tensor& robot_state, double tau, const ParamSet& params) const;

  const PolicyConfig& config() const { return cfg_; }

 private:
  PolicyConfig cfg_;
};

}  // namespace actflow
