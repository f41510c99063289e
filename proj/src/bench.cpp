#include "actflow/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <stdexcept>

#include "actflow/parallel.hpp"
#include "actflow/text.hpp"

namespace actflow {

const char* to_string(PerturbAxis axis) {
  switch (axis) {
    case PerturbAxis::camera: return "camera";
    case PerturbAxis::robot: return "robot";
    case PerturbAxis::language: return "language";
    case PerturbAxis::light: return "light";
    case PerturbAxis::background: return "background";
    case PerturbAxis::noise: return "noise";
    case PerturbAxis::layout: return "layout";
  }
  return "unknown";
}

PerturbAxis axis_from_string(const std::string& name) {
  for (int i = 0; i < kAxisCount; ++i) {
    const auto axis = static_cast<PerturbAxis>(i);
    if (name == to_string(axis)) return axis;
  }
  throw std::invalid_argument("unknown perturbation axis '" + name + "'");
}

const std::array<Vec2, 5>& region_centers() {
  static const std::array<Vec2, 5> regions{{{0.08, 0.5},   // left bin
                                            {0.92, 0.5},   // right bin
                                            {0.5, 0.92},   // top shelf
                                            {0.5, 0.08},   // bottom tray
                                            {0.5, 0.5}}};  // center pad
  return regions;
}

std::vector<TaskSpec> default_tasks() {
  return {
      {"to_left_bin", 0, "slide the block into the left bin", 60, {0.3, 0.3}, {0.7, 0.7}},
      {"to_right_bin", 1, "move the block into the right bin", 60, {0.3, 0.3}, {0.7, 0.7}},
      {"to_top_shelf", 2, "move the block to the top shelf", 60, {0.3, 0.3}, {0.7, 0.7}},
      {"to_bottom_tray", 3, "put the block in the bottom tray", 60, {0.3, 0.3}, {0.7, 0.7}},
      {"to_center_pad", 4, "push the block onto the center pad", 60, {0.3, 0.3}, {0.7, 0.7}},
  };
}

double SimConfig::strength(int level) {
  if (level < 0 || level > 3)
    throw std::invalid_argument("perturbation level " + std::to_string(level) +
                                " outside [0, 3]");
  return static_cast<double>(level) / 3.0;
}

namespace {

constexpr int kRawDim = 6;

double dist(const Vec2& a, const Vec2& b) { return std::hypot(a.x - b.x, a.y - b.y); }
double clampd(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

// Fixed per-view projections from raw scene vectors to the informative
// feature block, plus a fixed rotation used by the camera axis. Seeded
// constants shared by every environment instance.
struct FeatureBasis {
  std::array<std::array<double, kRawDim>, SimConfig::informative_dims> proj[2];
  std::array<std::array<double, SimConfig::informative_dims>, SimConfig::informative_dims> rot;

  FeatureBasis() {
    Rng rng(0x5EEDFEA7u);
    for (int v = 0; v < 2; ++v) {
      for (auto& row : proj[v])
        for (double& x : row) x = rng.normal();
      // Orthonormal columns (scaled), so the raw scene variables stay
      // linearly recoverable from the feature block.
      for (int c = 0; c < kRawDim; ++c) {
        for (int prev = 0; prev < c; ++prev) {
          double dot = 0.0;
          for (int r = 0; r < SimConfig::informative_dims; ++r)
            dot += proj[v][static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] *
                   proj[v][static_cast<std::size_t>(r)][static_cast<std::size_t>(prev)];
          for (int r = 0; r < SimConfig::informative_dims; ++r)
            proj[v][static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] -=
                dot * proj[v][static_cast<std::size_t>(r)][static_cast<std::size_t>(prev)];
        }
        double norm = 0.0;
        for (int r = 0; r < SimConfig::informative_dims; ++r)
          norm += proj[v][static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] *
                  proj[v][static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
        norm = std::sqrt(norm);
        for (int r = 0; r < SimConfig::informative_dims; ++r)
          proj[v][static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] *= 2.0 / norm;
      }
    }

    // Random orthonormal basis via Gram-Schmidt.
    constexpr int n = SimConfig::informative_dims;
    for (int i = 0; i < n; ++i) {
      auto& ri = rot[static_cast<std::size_t>(i)];
      for (double& x : ri) x = rng.normal();
      for (int j = 0; j < i; ++j) {
        const auto& rj = rot[static_cast<std::size_t>(j)];
        double d = 0.0;
        for (int k = 0; k < n; ++k) d += ri[static_cast<std::size_t>(k)] * rj[static_cast<std::size_t>(k)];
        for (int k = 0; k < n; ++k) ri[static_cast<std::size_t>(k)] -= d * rj[static_cast<std::size_t>(k)];
      }
      double norm = 0.0;
      for (double x : ri) norm += x * x;
      norm = std::sqrt(norm);
      for (double& x : ri) x /= norm;
    }
  }
};

const FeatureBasis& basis() {
  static const FeatureBasis b;
  return b;
}

Vec2 goal_of(const TaskSpec& task) {
  if (task.goal_region < 0 || task.goal_region >= static_cast<int>(region_centers().size()))
    throw std::invalid_argument("task '" + task.task_id + "': goal region " +
                                std::to_string(task.goal_region) + " unknown");
  return region_centers()[static_cast<std::size_t>(task.goal_region)];
}

// Object spawns stay clear of the goal region so no episode starts solved.
Vec2 draw_object_spawn(const TaskSpec& task, double goal_radius, Rng& rng) {
  const Vec2 goal = goal_of(task);
  const double clearance = goal_radius + 0.06;
  Vec2 p;
  for (int attempt = 0; attempt < 16; ++attempt) {
    p.x = task.spawn_lo.x + (task.spawn_hi.x - task.spawn_lo.x) * rng.uniform();
    p.y = task.spawn_lo.y + (task.spawn_hi.y - task.spawn_lo.y) * rng.uniform();
    if (dist(p, goal) >= clearance) return p;
  }
  // Push radially out of the goal neighbourhood.
  const double d = std::max(dist(p, goal), 1e-9);
  p.x = clampd(goal.x + (p.x - goal.x) / d * clearance, 0.05, 0.95);
  p.y = clampd(goal.y + (p.y - goal.y) / d * clearance, 0.05, 0.95);
  return p;
}

}  // namespace

Environment::Environment(SimConfig cfg) : cfg_(cfg) {}

std::pair<WorldState, Observation> Environment::reset(const TaskSpec& task,
                                                      std::span<const PerturbationSpec> perts,
                                                      std::uint64_t episode_seed) const {
  WorldState s;
  s.ctx.task = task;
  s.ctx.seed = episode_seed;
  s.ctx.perturbations.assign(perts.begin(), perts.end());
  std::sort(s.ctx.perturbations.begin(), s.ctx.perturbations.end(),
            [](const PerturbationSpec& a, const PerturbationSpec& b) {
              return static_cast<int>(a.axis) < static_cast<int>(b.axis);
            });

  Rng rng(Rng::mix(episode_seed, fnv1a(task.task_id.data(), task.task_id.size())));
  s.agent.x = 0.15 + 0.7 * rng.uniform();
  s.agent.y = 0.15 + 0.7 * rng.uniform();
  s.object = draw_object_spawn(task, cfg_.goal_radius, rng);
  s.grip = 1.0;
  s.holding = false;
  s.t = 0;

  for (const PerturbationSpec& pert : s.ctx.perturbations) {
    const double strength = SimConfig::strength(pert.level);
    Rng prng(Rng::mix(Rng::mix(episode_seed, pert.seed),
                      0x9E3779B9ULL * static_cast<std::uint64_t>(pert.axis) +
                          static_cast<std::uint64_t>(pert.level)));
    switch (pert.axis) {
      case PerturbAxis::camera:
        s.ctx.camera_blend = cfg_.camera_blend_max * strength;
        break;
      case PerturbAxis::robot: {
        const double angle = 6.283185307179586 * prng.uniform();
        const double r = cfg_.robot_offset_max * strength;
        s.agent.x = clampd(s.agent.x + r * std::cos(angle), 0.05, 0.95);
        s.agent.y = clampd(s.agent.y + r * std::sin(angle), 0.05, 0.95);
        break;
      }
      case PerturbAxis::language:
        break;  // acts through instruction choice at evaluation time
      case PerturbAxis::light:
        s.ctx.light_factor = 1.0 + cfg_.light_gain_max * strength;
        break;
      case PerturbAxis::background:
        for (double& b : s.ctx.background)
          b = cfg_.background_amp_max * strength * (2.0 * prng.uniform() - 1.0);
        break;
      case PerturbAxis::noise:
        s.ctx.noise_sigma = cfg_.noise_sigma_max * strength;
        break;
      case PerturbAxis::layout: {
        const double angle = 6.283185307179586 * prng.uniform();
        const double r = cfg_.layout_shift_max * strength;
        Vec2 shifted{clampd(s.object.x + r * std::cos(angle), 0.05, 0.95),
                     clampd(s.object.y + r * std::sin(angle), 0.05, 0.95)};
        const Vec2 goal = goal_of(task);
        const double clearance = cfg_.goal_radius + 0.06;
        if (dist(shifted, goal) < clearance) {
          const double d = std::max(dist(shifted, goal), 1e-9);
          shifted.x = clampd(goal.x + (shifted.x - goal.x) / d * clearance, 0.05, 0.95);
          shifted.y = clampd(goal.y + (shifted.y - goal.y) / d * clearance, 0.05, 0.95);
        }
        s.object = shifted;
        break;
      }
    }
  }
  s.ctx.noise_stream = Rng(Rng::mix(episode_seed, 0xB0B5EEDULL));

  Observation obs = observe(s);
  return {std::move(s), std::move(obs)};
}

std::pair<WorldState, Observation> Environment::reset(const TaskSpec& task,
                                                      const PerturbationSpec& pert,
                                                      std::uint64_t episode_seed) const {
  return reset(task, std::span<const PerturbationSpec>{&pert, 1}, episode_seed);
}

Observation Environment::observe(WorldState& s) const {
  const double d_ao = dist(s.agent, s.object);
  const double inv_d = 1.0 / std::max(d_ao, 1e-6);
  const std::array<double, kRawDim> raw1{s.object.x, s.object.y, s.agent.x,
                                         s.agent.y,  d_ao,       1.0};
  // Wrist view: object offset, its unit direction, range, and grasp state.
  const std::array<double, kRawDim> raw2{s.object.x - s.agent.x,
                                         s.object.y - s.agent.y,
                                         (s.object.x - s.agent.x) * inv_d,
                                         (s.object.y - s.agent.y) * inv_d,
                                         d_ao,
                                         s.holding ? 1.0 : 0.0};

  Observation obs;
  obs.view_features = Tensor::zeros({SimConfig::n_views, SimConfig::view_feature_dim});
  const std::array<double, kRawDim>* raws[2] = {&raw1, &raw2};
  for (int v = 0; v < SimConfig::n_views; ++v) {
    std::array<double, SimConfig::informative_dims> f{};
    for (int i = 0; i < SimConfig::informative_dims; ++i) {
      double acc = 0.0;
      for (int k = 0; k < kRawDim; ++k)
        acc += basis().proj[v][static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] *
               (*raws[v])[static_cast<std::size_t>(k)];
      f[static_cast<std::size_t>(i)] = acc;
    }
    if (s.ctx.camera_blend > 0.0) {
      const double b = s.ctx.camera_blend;
      std::array<double, SimConfig::informative_dims> mixed{};
      for (int i = 0; i < SimConfig::informative_dims; ++i) {
        double acc = 0.0;
        for (int k = 0; k < SimConfig::informative_dims; ++k)
          acc += basis().rot[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] *
                 f[static_cast<std::size_t>(k)];
        mixed[static_cast<std::size_t>(i)] = (1.0 - b) * f[static_cast<std::size_t>(i)] + b * acc;
      }
      f = mixed;
    }
    double* row = obs.view_features.data() +
                  static_cast<std::size_t>(v) * SimConfig::view_feature_dim;
    for (int i = 0; i < SimConfig::informative_dims; ++i) row[i] = f[static_cast<std::size_t>(i)];
    for (int i = 0; i < SimConfig::background_dims; ++i)
      row[SimConfig::informative_dims + i] = s.ctx.background[static_cast<std::size_t>(i)];
    for (int i = 0; i < SimConfig::view_feature_dim; ++i) row[i] *= s.ctx.light_factor;
    if (s.ctx.noise_sigma > 0.0)
      for (int i = 0; i < SimConfig::view_feature_dim; ++i)
        row[i] += s.ctx.noise_sigma * s.ctx.noise_stream.normal();
  }

  obs.robot_state = Tensor::from(
      {SimConfig::state_dim},
      {s.agent.x, s.agent.y, s.grip, s.holding ? 1.0 : 0.0,
       static_cast<double>(s.t) / std::max(1, s.ctx.task.horizon)});
  return obs;
}

StepOutcome Environment::step(WorldState& s, std::span<const double> action) const {
  if (s.done) return {observe(s), s.done, s.success};
  if (action.size() != SimConfig::action_dim)
    throw std::invalid_argument("step: action must have " +
                                std::to_string(SimConfig::action_dim) + " components, got " +
                                std::to_string(action.size()));

  bool finite = true;
  for (double a : action)
    if (!std::isfinite(a)) finite = false;
  if (!finite) {
    // A broken controller ends the episode as a failure, not a crash.
    s.done = true;
    s.success = false;
    return {observe(s), true, false};
  }

  s.agent.x = clampd(s.agent.x + cfg_.max_step * clampd(action[0], -1.0, 1.0), 0.0, 1.0);
  s.agent.y = clampd(s.agent.y + cfg_.max_step * clampd(action[1], -1.0, 1.0), 0.0, 1.0);
  s.grip = clampd(action[2], 0.0, 1.0);

  // Grasp hysteresis: closing below 0.5 grabs, releasing needs a decisive
  // opening past 0.75.
  if (s.holding && s.grip > 0.75) s.holding = false;
  if (!s.holding && s.grip < 0.5 && dist(s.agent, s.object) <= cfg_.grab_radius)
    s.holding = true;
  if (s.holding) s.object = s.agent;

  s.t += 1;
  if (dist(s.object, goal_of(s.ctx.task)) <= cfg_.goal_radius) {
    s.done = true;
    s.success = true;
  } else if (s.t >= s.ctx.task.horizon) {
    s.done = true;
    s.success = false;
  }
  return {observe(s), s.done, s.success};
}

std::array<double, 3> Environment::expert_action(const WorldState& s) const {
  const Vec2 goal = goal_of(s.ctx.task);
  auto clamp_unit = [&](double v) { return clampd(v / cfg_.max_step, -1.0, 1.0); };

  if (s.holding) {
    if (dist(s.object, goal) <= cfg_.goal_radius * 0.5) return {0.0, 0.0, 1.0};  // release
    return {clamp_unit(0.6 * (goal.x - s.agent.x)), clamp_unit(0.6 * (goal.y - s.agent.y)), 0.0};
  }
  // Proportional approach that decelerates near the object, closing the grip
  // early; the wide, smooth grasp window suits cloned-action jitter.
  const double d = dist(s.agent, s.object);
  const double ax = clamp_unit(0.6 * (s.object.x - s.agent.x));
  const double ay = clamp_unit(0.6 * (s.object.y - s.agent.y));
  const double grip = d <= cfg_.grab_radius * 2.0 ? 0.0 : 1.0;
  return {ax, ay, grip};
}

std::vector<Trajectory> collect_demonstrations(const Environment& env, const TaskSpec& task,
                                               const PerturbationSpec& pert, int n, Rng& rng,
                                               int attempt_cap_per_demo) {
  if (n < 1) throw std::invalid_argument("collect_demonstrations: n must be >= 1");
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    bool recorded = false;
    for (int attempt = 0; attempt < attempt_cap_per_demo && !recorded; ++attempt) {
      const std::uint64_t seed = rng.next_u64();
      auto [state, obs] = env.reset(task, pert, seed);
      Trajectory traj;
      traj.task_id = task.task_id;
      traj.seed = seed;
      traj.perturbation = pert;
      traj.instructions.original = task.instruction;
      while (!state.done) {
        TrajStep step;
        step.obs = obs;
        step.action = env.expert_action(state);
        StepOutcome res = env.step(state, step.action);
        traj.steps.push_back(std::move(step));
        obs = std::move(res.obs);
      }
      traj.success = state.success;
      if (traj.success) {
        out.push_back(std::move(traj));
        recorded = true;
      }
    }
    if (!recorded)
      throw std::runtime_error("collect_demonstrations: expert failed on task '" + task.task_id +
                               "' under axis '" + to_string(pert.axis) + "' level " +
                               std::to_string(pert.level) + " after " +
                               std::to_string(attempt_cap_per_demo) + " attempts");
  }
  return out;
}

std::string EvalReport::to_csv() const {
  std::string out = "Camera,Robot,Language,Light,Background,Noise,Layout,Total\n";
  char buf[32];
  for (int i = 0; i < kAxisCount; ++i) {
    std::snprintf(buf, sizeof(buf), "%.1f", per_axis[static_cast<std::size_t>(i)].rate());
    out += buf;
    out += ',';
  }
  std::snprintf(buf, sizeof(buf), "%.1f", total.rate());
  out += buf;
  out += '\n';
  return out;
}

bool is_heldout_paraphrase(const std::string& text) {
  return fnv1a(text.data(), text.size()) % 4 == 0;
}

InstructionSet training_instruction_view(const InstructionSet& set) {
  InstructionSet view;
  view.original = set.original;
  for (const std::string& p : set.paraphrases)
    if (!is_heldout_paraphrase(p)) view.paraphrases.push_back(p);
  return view;
}

std::vector<std::string> heldout_paraphrases(const InstructionSet& set) {
  std::vector<std::string> held;
  for (const std::string& p : set.paraphrases)
    if (is_heldout_paraphrase(p)) held.push_back(p);
  return held;
}

bool rollout_episode(const PolicyNet& net, const ParamSet& params, const Environment& env,
                     const TaskSpec& task, const PerturbationSpec& pert,
                     const std::vector<int>& token_ids, const InferenceConfig& inference,
                     std::uint64_t episode_seed) {
  auto [state, obs] = env.reset(task, pert, episode_seed);
  Rng sample_rng = Rng(episode_seed).split(0xE0E0);
  int replan = 0;
  while (!state.done) {
    SemanticFeatures feats = net.encode_semantics(token_ids, obs, params);
    Rng chunk_rng = sample_rng.split(static_cast<std::uint64_t>(replan++));
    Tensor chunk =
        integrate_euler(net, params, feats, obs.robot_state, inference, chunk_rng);
    const auto action_dim = static_cast<std::size_t>(net.config().action_dim);
    for (int row = 0; row < net.config().chunk_len && !state.done; ++row) {
      const double* a = chunk.data() + static_cast<std::size_t>(row) * action_dim;
      StepOutcome res = env.step(state, std::span<const double>{a, action_dim});
      obs = std::move(res.obs);
    }
  }
  return state.success;
}

EvalReport evaluate_policy(const PolicyNet& net, const ParamSet& params, const Environment& env,
                           const EvalSuite& suite, const EvalInstructions& instructions) {
  if (suite.tasks.empty() || suite.perturbations.empty())
    throw std::invalid_argument("evaluate_policy: empty evaluation suite");

  std::unordered_map<std::string, int> word_ids;
  for (std::size_t i = 0; i < instructions.vocab.size(); ++i)
    word_ids.emplace(instructions.vocab[i], static_cast<int>(i));
  auto encode_text = [&](const std::string& text) {
    std::vector<int> ids;
    for (const std::string& w : split_tokens(text)) {
      auto it = word_ids.find(w);
      if (it == word_ids.end())
        throw std::invalid_argument("evaluate_policy: word '" + w + "' missing from vocabulary");
      ids.push_back(it->second);
    }
    return ids;
  };

  struct Episode {
    int axis;
    const TaskSpec* task;
    const PerturbationSpec* pert;
    std::uint64_t seed;
    std::vector<int> token_ids;
  };
  std::vector<Episode> episodes;
  for (const PerturbationSpec& pert : suite.perturbations) {
    for (const TaskSpec& task : suite.tasks) {
      for (int trial = 0; trial < suite.trials_per_cell; ++trial) {
        Episode ep;
        ep.axis = static_cast<int>(pert.axis);
        ep.task = &task;
        ep.pert = &pert;
        std::uint64_t h = fnv1a(task.task_id.data(), task.task_id.size());
        h = Rng::mix(h, static_cast<std::uint64_t>(pert.axis) * 1000003ULL +
                            static_cast<std::uint64_t>(pert.level));
        ep.seed = Rng::mix(Rng::mix(suite.seed, h), static_cast<std::uint64_t>(trial));

        std::string text = task.instruction;
        if (pert.axis == PerturbAxis::language && pert.level > 0) {
          auto it = instructions.per_task.find(task.task_id);
          if (it != instructions.per_task.end()) {
            std::vector<std::string> held = heldout_paraphrases(it->second);
            if (!held.empty()) {
              Rng pick(Rng::mix(ep.seed, 0x1A66));
              text = held[static_cast<std::size_t>(pick.uniform_int(
                  static_cast<int>(held.size())))];
            }
          }
        }
        ep.token_ids = encode_text(text);
        episodes.push_back(std::move(ep));
      }
    }
  }

  std::vector<char> success(episodes.size(), 0);
  parallel_for(static_cast<int>(episodes.size()), suite.threads, [&](int i) {
    const Episode& ep = episodes[static_cast<std::size_t>(i)];
    success[static_cast<std::size_t>(i)] =
        rollout_episode(net, params, env, *ep.task, *ep.pert, ep.token_ids, suite.inference,
                        ep.seed)
            ? 1
            : 0;
  });

  EvalReport report;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    EvalCell& cell = report.per_axis[static_cast<std::size_t>(episodes[i].axis)];
    cell.n_total += 1;
    report.total.n_total += 1;
    if (success[i]) {
      cell.n_succ += 1;
      report.total.n_succ += 1;
    }
  }
  return report;
}

}  // namespace actflow
