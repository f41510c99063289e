#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "actflow/bench.hpp"
#include "actflow/dataset.hpp"
#include "actflow/rng.hpp"
#include "testutil.hpp"

using namespace actflow;
using testutil::max_abs_diff;

namespace {

TaskSpec task_by_id(const std::string& id) {
  for (TaskSpec& t : default_tasks())
    if (t.task_id == id) return t;
  throw std::runtime_error("no task " + id);
}

bool states_equal(const WorldState& a, const WorldState& b) {
  return a.agent == b.agent && a.object == b.object && a.grip == b.grip &&
         a.holding == b.holding && a.t == b.t;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("reset is deterministic and perturbation-aware") {
  Environment env;
  TaskSpec task = task_by_id("to_left_bin");

  SUBCASE("identity perturbation, same seed, identical observation") {
    PerturbationSpec pert{PerturbAxis::noise, 0, 0};
    auto [s1, o1] = env.reset(task, pert, 77);
    auto [s2, o2] = env.reset(task, pert, 77);
    CHECK(states_equal(s1, s2));
    CHECK(max_abs_diff(o1.view_features, o2.view_features) == 0.0);
    CHECK(max_abs_diff(o1.robot_state, o2.robot_state) == 0.0);
  }
  SUBCASE("zero-magnitude noise equals the identity") {
    auto [s1, o1] = env.reset(task, PerturbationSpec{PerturbAxis::noise, 0, 5}, 78);
    auto [s2, o2] = env.reset(task, PerturbationSpec{PerturbAxis::camera, 0, 9}, 78);
    CHECK(states_equal(s1, s2));
    CHECK(max_abs_diff(o1.view_features, o2.view_features) == 0.0);
  }
  SUBCASE("light scales every view feature by one positive factor") {
    auto [s0, clean] = env.reset(task, PerturbationSpec{PerturbAxis::noise, 0, 0}, 79);
    auto [s1, lit] = env.reset(task, PerturbationSpec{PerturbAxis::light, 3, 0}, 79);
    const double factor = 1.0 + env.config().light_gain_max;  // level 3 strength = 1
    for (std::int64_t i = 0; i < clean.view_features.size(); ++i)
      CHECK(lit.view_features.data()[i] ==
            doctest::Approx(factor * clean.view_features.data()[i]));
  }
  SUBCASE("unknown axis name rejected") {
    CHECK_THROWS_AS(axis_from_string("weather"), std::invalid_argument);
    CHECK(axis_from_string("layout") == PerturbAxis::layout);
  }
  SUBCASE("object never spawns inside its goal region") {
    for (const TaskSpec& t : default_tasks()) {
      for (std::uint64_t seed = 0; seed < 200; ++seed) {
        auto [s, o] = env.reset(t, PerturbationSpec{PerturbAxis::noise, 0, 0}, seed);
        const Vec2 goal = region_centers()[static_cast<std::size_t>(t.goal_region)];
        const double d = std::hypot(s.object.x - goal.x, s.object.y - goal.y);
        CHECK(d > env.config().goal_radius);
      }
    }
  }
}

TEST_CASE("commuting perturbation pairs") {
  Environment env;
  TaskSpec task = task_by_id("to_top_shelf");
  auto compare = [&](PerturbAxis a, int la, PerturbAxis b, int lb) {
    PerturbationSpec pa{a, la, 3}, pb{b, lb, 4};
    std::vector<PerturbationSpec> order1{pa, pb}, order2{pb, pa};
    auto [s1, o1] = env.reset(task, order1, 321);
    auto [s2, o2] = env.reset(task, order2, 321);
    CHECK(states_equal(s1, s2));
    CHECK(max_abs_diff(o1.view_features, o2.view_features) == 0.0);
    CHECK(max_abs_diff(o1.robot_state, o2.robot_state) == 0.0);
  };
  compare(PerturbAxis::light, 2, PerturbAxis::noise, 2);
  compare(PerturbAxis::light, 3, PerturbAxis::layout, 2);
}

TEST_CASE("step dynamics") {
  Environment env;
  TaskSpec task = task_by_id("to_right_bin");
  PerturbationSpec none{PerturbAxis::noise, 0, 0};

  SUBCASE("an inert policy fails at the horizon") {
    auto [state, obs] = env.reset(task, none, 11);
    const double zero[3] = {0.0, 0.0, 0.0};
    StepOutcome last{};
    while (!state.done) last = env.step(state, zero);
    CHECK(last.done);
    CHECK_FALSE(last.success);
    CHECK(state.t == task.horizon);
  }
  SUBCASE("the scripted expert succeeds before the horizon") {
    auto [state, obs] = env.reset(task, none, 12);
    while (!state.done) {
      auto a = env.expert_action(state);
      env.step(state, a);
    }
    CHECK(state.success);
    CHECK(state.t < task.horizon);
  }
  SUBCASE("dynamics replay exactly") {
    auto [s1, o1] = env.reset(task, none, 13);
    auto [s2, o2] = env.reset(task, none, 13);
    Rng rng(14);
    for (int i = 0; i < 30 && !s1.done; ++i) {
      double a[3] = {2.0 * rng.uniform() - 1.0, 2.0 * rng.uniform() - 1.0, rng.uniform()};
      StepOutcome r1 = env.step(s1, a);
      StepOutcome r2 = env.step(s2, a);
      CHECK(max_abs_diff(r1.obs.view_features, r2.obs.view_features) == 0.0);
      CHECK(states_equal(s1, s2));
    }
  }
  SUBCASE("non-finite actions record a failure instead of crashing") {
    auto [state, obs] = env.reset(task, none, 15);
    const double bad[3] = {std::nan(""), 0.0, 0.0};
    StepOutcome r = env.step(state, bad);
    CHECK(r.done);
    CHECK_FALSE(r.success);
  }
}

TEST_CASE("expert is perfect on clean resets") {
  Environment env;
  int successes = 0;
  int budget_ok = 0;
  for (const TaskSpec& task : default_tasks()) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      auto [state, obs] = env.reset(task, PerturbationSpec{PerturbAxis::noise, 0, 0}, seed);
      while (!state.done) {
        auto a = env.expert_action(state);
        env.step(state, a);
      }
      successes += state.success ? 1 : 0;
      budget_ok += state.t < task.horizon ? 1 : 0;
    }
  }
  CHECK(successes == 1000);
  CHECK(budget_ok == 1000);
}

TEST_CASE("observations stay finite across the perturbation grid") {
  Environment env;
  TaskSpec task = task_by_id("to_center_pad");
  for (int axis = 0; axis < kAxisCount; ++axis) {
    for (int level = 0; level <= 3; ++level) {
      PerturbationSpec pert{static_cast<PerturbAxis>(axis), level, 7};
      auto [state, obs] = env.reset(task, pert, 99);
      CHECK(obs.view_features.all_finite());
      CHECK(obs.robot_state.all_finite());
      for (int i = 0; i < 5; ++i) {
        auto a = env.expert_action(state);
        StepOutcome r = env.step(state, a);
        CHECK(r.obs.view_features.all_finite());
      }
    }
  }
}

TEST_CASE("demonstration collection") {
  Environment env;
  TaskSpec task = task_by_id("to_bottom_tray");
  PerturbationSpec none{PerturbAxis::noise, 0, 0};
  Rng rng(21);
  std::vector<Trajectory> demos = collect_demonstrations(env, task, none, 25, rng);
  CHECK(demos.size() == 25);
  for (const Trajectory& t : demos) {
    CHECK(t.success);
    CHECK(t.task_id == task.task_id);
    CHECK(static_cast<int>(t.steps.size()) <= task.horizon);
    CHECK(t.instructions.original == task.instruction);
  }

  SUBCASE("an unreachable goal exhausts the attempt cap with a named error") {
    TaskSpec impossible = task;
    impossible.horizon = 2;  // the goal clearance needs several steps
    Rng r(9);
    try {
      collect_demonstrations(env, impossible, none, 1, r, 5);
      FAIL("expected an attempt-cap error");
    } catch (const std::runtime_error& e) {
      const std::string msg = e.what();
      CHECK(msg.find(task.task_id) != std::string::npos);
      CHECK(msg.find("noise") != std::string::npos);
    }
  }

  SUBCASE("seeded collection replays byte-for-byte") {
    Rng r1(33), r2(33);
    std::vector<Trajectory> a = collect_demonstrations(env, task, none, 3, r1);
    std::vector<Trajectory> b = collect_demonstrations(env, task, none, 3, r2);
    const char* fa = "bench_replay_a.jsonl";
    const char* fb = "bench_replay_b.jsonl";
    write_trajectories(fa, a);
    write_trajectories(fb, b);
    CHECK(slurp(fa) == slurp(fb));
    std::remove(fa);
    std::remove(fb);
  }
}

TEST_CASE("evaluation report arithmetic") {
  EvalReport report;
  report.per_axis[0] = {10, 10};
  report.per_axis[1] = {6, 10};
  report.per_axis[2] = {0, 10};
  for (int i = 0; i < 3; ++i) {
    report.total.n_succ += report.per_axis[static_cast<std::size_t>(i)].n_succ;
    report.total.n_total += report.per_axis[static_cast<std::size_t>(i)].n_total;
  }
  CHECK(report.per_axis[0].rate() == 100.0);
  CHECK(report.per_axis[1].rate() == 60.0);
  CHECK(report.per_axis[2].rate() == 0.0);
  CHECK(report.total.n_succ == 16);
  CHECK(report.total.rate() == doctest::Approx(100.0 * 16 / 30));
  const std::string csv = report.to_csv();
  CHECK(csv.find("Camera,Robot,Language,Light,Background,Noise,Layout,Total") == 0);
  CHECK(csv.find("100.0,60.0,0.0") != std::string::npos);
}

TEST_CASE("held-out split is stable and partitions paraphrases") {
  InstructionSet set{"move the block", {}};
  for (int i = 0; i < 40; ++i) set.paraphrases.push_back("variant number " + std::to_string(i));
  InstructionSet train = training_instruction_view(set);
  std::vector<std::string> held = heldout_paraphrases(set);
  CHECK(train.paraphrases.size() + held.size() == set.paraphrases.size());
  CHECK(!held.empty());
  CHECK(!train.paraphrases.empty());
  for (const std::string& h : held) CHECK(is_heldout_paraphrase(h));
  for (const std::string& t : train.paraphrases) CHECK_FALSE(is_heldout_paraphrase(t));
}

TEST_CASE("policy evaluation on a tiny untrained policy") {
  Environment env;
  PolicyConfig pc;
  pc.d = 16;
  pc.n_heads = 2;
  pc.n_enc_layers = 1;
  pc.n_dit_layers = 1;
  pc.chunk_len = 8;
  pc.view_feature_dim = SimConfig::view_feature_dim;
  pc.n_views = SimConfig::n_views;
  pc.state_dim = SimConfig::state_dim;
  pc.action_dim = SimConfig::action_dim;

  std::vector<Trajectory> demos;
  Environment env2;
  Rng crng(5);
  for (const TaskSpec& task : default_tasks()) {
    PerturbationSpec none{PerturbAxis::noise, 0, 0};
    auto d = collect_demonstrations(env2, task, none, 1, crng);
    demos.insert(demos.end(), d.begin(), d.end());
  }
  EvalInstructions instructions = eval_instructions_from(demos);
  pc.vocab_size = static_cast<int>(instructions.vocab.size());

  PolicyNet net(pc);
  Rng prng(17);
  ParamSet params = init_policy_params(pc, prng);

  EvalSuite suite;
  suite.tasks = {task_by_id("to_left_bin"), task_by_id("to_right_bin")};
  suite.perturbations = {PerturbationSpec{PerturbAxis::noise, 0, 0},
                         PerturbationSpec{PerturbAxis::language, 2, 0}};
  suite.trials_per_cell = 2;
  suite.seed = 7;

  EvalReport report = evaluate_policy(net, params, env, suite, instructions);
  const auto& noise_cell = report.per_axis[static_cast<int>(PerturbAxis::noise)];
  const auto& lang_cell = report.per_axis[static_cast<int>(PerturbAxis::language)];
  CHECK(noise_cell.n_total == 4);
  CHECK(lang_cell.n_total == 4);
  CHECK(report.total.n_total == 8);
  CHECK(report.total.n_succ == noise_cell.n_succ + lang_cell.n_succ);
  // An untrained policy is below the scripted expert's 100%.
  CHECK(report.total.rate() < 100.0);

  SUBCASE("repeated evaluation is identical") {
    EvalReport again = evaluate_policy(net, params, env, suite, instructions);
    CHECK(again.total.n_succ == report.total.n_succ);
    for (int i = 0; i < kAxisCount; ++i)
      CHECK(again.per_axis[static_cast<std::size_t>(i)].n_succ ==
            report.per_axis[static_cast<std::size_t>(i)].n_succ);
  }
}

TEST_CASE("trajectory files round-trip bit-exactly") {
  Environment env;
  Rng rng(44);
  std::vector<Trajectory> demos;
  for (const TaskSpec& task : {task_by_id("to_left_bin"), task_by_id("to_center_pad")}) {
    PerturbationSpec pert{PerturbAxis::layout, 2, 9};
    auto d = collect_demonstrations(env, task, pert, 2, rng);
    demos.insert(demos.end(), d.begin(), d.end());
  }
  demos[0].instructions.paraphrases = {"please move the block over", "I want the block moved"};

  const char* path1 = "bench_roundtrip_1.jsonl";
  const char* path2 = "bench_roundtrip_2.jsonl";
  write_trajectories(path1, demos);
  std::vector<Trajectory> parsed = read_trajectories(path1);
  REQUIRE(parsed.size() == demos.size());
  for (std::size_t i = 0; i < demos.size(); ++i) {
    CHECK(parsed[i].task_id == demos[i].task_id);
    CHECK(parsed[i].seed == demos[i].seed);
    CHECK(parsed[i].perturbation == demos[i].perturbation);
    CHECK(parsed[i].success == demos[i].success);
    CHECK(parsed[i].instructions.original == demos[i].instructions.original);
    CHECK(parsed[i].instructions.paraphrases == demos[i].instructions.paraphrases);
    REQUIRE(parsed[i].steps.size() == demos[i].steps.size());
    for (std::size_t k = 0; k < demos[i].steps.size(); ++k) {
      CHECK(max_abs_diff(parsed[i].steps[k].obs.view_features,
                         demos[i].steps[k].obs.view_features) == 0.0);
      CHECK(max_abs_diff(parsed[i].steps[k].obs.robot_state,
                         demos[i].steps[k].obs.robot_state) == 0.0);
      CHECK(parsed[i].steps[k].action == demos[i].steps[k].action);
    }
  }
  // write(parse(write(x))) is byte-identical.
  write_trajectories(path2, parsed);
  CHECK(slurp(path1) == slurp(path2));
  std::remove(path1);
  std::remove(path2);

  SUBCASE("parse errors name the line") {
    const char* bad = "bench_bad.jsonl";
    {
      std::ofstream out(bad);
      out << R"({"task_id":"x","seed":1,"perturbation":{"axis":"noise","level":0,"seed":0},)"
          << R"("success":true,"instructions":["ok instruction"],"steps":[]})" << "\n";
      out << "{not json}\n";
    }
    try {
      read_trajectories(bad);
      FAIL("expected parse error");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    std::remove(bad);
  }
}
