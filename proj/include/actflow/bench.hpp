#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "actflow/consistency.hpp"
#include "actflow/flow.hpp"
#include "actflow/policy.hpp"
#include "actflow/rng.hpp"

namespace actflow {

// The seven evaluation perturbation dimensions. The enum order is also the
// canonical application order, so composing axes is order-independent.
enum class PerturbAxis : int {
  camera = 0,
  robot = 1,
  language = 2,
  light = 3,
  background = 4,
  noise = 5,
  layout = 6,
};
constexpr int kAxisCount = 7;
const char* to_string(PerturbAxis axis);
PerturbAxis axis_from_string(const std::string& name);  // throws on unknown names

struct PerturbationSpec {
  PerturbAxis axis = PerturbAxis::noise;
  int level = 0;  // 0..3; level 0 is the identity
  std::uint64_t seed = 0;

  bool operator==(const PerturbationSpec&) const = default;
};

struct Vec2 {
  double x = 0.0, y = 0.0;
  bool operator==(const Vec2&) const = default;
};

// A tabletop task: carry the single object into one of the named regions.
// The goal is told only by the instruction, so language grounding is load
// bearing: every task shares the same scene distribution.
struct TaskSpec {
  std::string task_id;
  int goal_region = 0;  // index into region_centers()
  std::string instruction;
  int horizon = 60;
  Vec2 spawn_lo{0.3, 0.3};
  Vec2 spawn_hi{0.7, 0.7};
};

const std::array<Vec2, 5>& region_centers();  // left, right, top, bottom, center
std::vector<TaskSpec> default_tasks();

struct SimConfig {
  double max_step = 0.05;     // displacement per unit action component
  double grab_radius = 0.1;
  double goal_radius = 0.14;

  // Observation geometry. The last background_dims feature channels are zero
  // in clean scenes and carry distractor values under the background axis.
  static constexpr int view_feature_dim = 32;
  static constexpr int informative_dims = 24;
  static constexpr int background_dims = 8;
  static constexpr int n_views = 2;
  static constexpr int state_dim = 5;
  static constexpr int action_dim = 3;  // (dx, dy, grip)

  // Axis strengths at levels 0..3.
  static double strength(int level);

  double camera_blend_max = 0.35;   // view mixing toward a fixed rotation
  double robot_offset_max = 0.18;   // agent spawn displacement
  double light_gain_max = 0.5;      // feature scale becomes 1 + gain
  double background_amp_max = 1.0;  // distractor channel amplitude
  double noise_sigma_max = 0.12;    // per-step additive observation noise
  double layout_shift_max = 0.22;   // object spawn displacement
};

struct EpisodeContext {
  TaskSpec task;
  std::vector<PerturbationSpec> perturbations;  // canonical axis order
  std::uint64_t seed = 0;
  double camera_blend = 0.0;
  double light_factor = 1.0;
  double noise_sigma = 0.0;
  std::array<double, SimConfig::background_dims> background{};
  Rng noise_stream;
};

struct WorldState {
  EpisodeContext ctx;
  Vec2 agent;
  double grip = 1.0;  // 1 open, 0 closed
  bool holding = false;
  Vec2 object;
  int t = 0;
  bool done = false;
  bool success = false;
};

struct StepOutcome {
  Observation obs;
  bool done = false;
  bool success = false;
};

class Environment {
 public:
  explicit Environment(SimConfig cfg = {});

  // Deterministic in (task, perturbations, seed). State-level axes (robot,
  // layout) act here; observation axes act in every observe() call.
  std::pair<WorldState, Observation> reset(const TaskSpec& task,
                                           std::span<const PerturbationSpec> perturbations,
                                           std::uint64_t episode_seed) const;
  std::pair<WorldState, Observation> reset(const TaskSpec& task, const PerturbationSpec& pert,
                                           std::uint64_t episode_seed) const;

  // Point-mass kinematics; actions are clipped to [-1, 1]^2 x [0, 1].
  // Non-finite actions end the episode as a failure rather than throwing.
  StepOutcome step(WorldState& state, std::span<const double> action) const;

  Observation observe(WorldState& state) const;

  // Deterministic scripted expert: approach, grab, carry, release.
  std::array<double, 3> expert_action(const WorldState& state) const;

  const SimConfig& config() const { return cfg_; }

 private:
  SimConfig cfg_;
};

struct TrajStep {
  Observation obs;
  std::array<double, SimConfig::action_dim> action{};
};

struct Trajectory {
  std::string task_id;
  std::uint64_t seed = 0;
  PerturbationSpec perturbation;
  InstructionSet instructions;
  std::vector<TrajStep> steps;
  bool success = false;
};

// n successful expert rollouts; failed attempts are retried with fresh seeds
// up to an attempt cap.
std::vector<Trajectory> collect_demonstrations(const Environment& env, const TaskSpec& task,
                                               const PerturbationSpec& pert, int n, Rng& rng,
                                               int attempt_cap_per_demo = 20);

// --- Evaluation ------------------------------------------------------------

struct EvalCell {
  int n_succ = 0;
  int n_total = 0;
  double rate() const { return n_total == 0 ? 0.0 : 100.0 * n_succ / n_total; }
};

struct EvalReport {
  std::array<EvalCell, kAxisCount> per_axis;
  EvalCell total;

  // Comma-separated table: Camera,...,Layout,Total header plus one rate row.
  std::string to_csv() const;
};

// Held-out split of the paraphrase list, by hash of the raw text. Held-out
// paraphrases are reserved for the language evaluation axis.
bool is_heldout_paraphrase(const std::string& text);
InstructionSet training_instruction_view(const InstructionSet& set);
std::vector<std::string> heldout_paraphrases(const InstructionSet& set);

struct EvalSuite {
  std::vector<TaskSpec> tasks;
  std::vector<PerturbationSpec> perturbations;
  int trials_per_cell = 10;
  InferenceConfig inference;  // K Euler steps per replanning
  std::uint64_t seed = 0;
  int threads = 1;
};

// Instruction source for evaluation rollouts: the language axis samples
// held-out paraphrases, every other axis uses the original text.
struct EvalInstructions {
  std::unordered_map<std::string, InstructionSet> per_task;
  std::vector<std::string> vocab;
};

// Open-loop rollouts: one Euler integration per chunk, executed for L steps,
// then replanned, until the episode ends.
EvalReport evaluate_policy(const PolicyNet& net, const ParamSet& params, const Environment& env,
                           const EvalSuite& suite, const EvalInstructions& instructions);

// Single rollout; exposed for tests and the CLI.
bool rollout_episode(const PolicyNet& net, const ParamSet& params, const Environment& env,
                     const TaskSpec& task, const PerturbationSpec& pert,
                     const std::vector<int>& token_ids, const InferenceConfig& inference,
                     std::uint64_t episode_seed);

}  // namespace actflow
