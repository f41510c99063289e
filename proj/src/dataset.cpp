#include "actflow/dataset.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace actflow {

namespace {

void append_number(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

void append_array(std::string& out, const double* values, int n) {
  out += '[';
  for (int i = 0; i < n; ++i) {
    if (i) out += ',';
    append_number(out, values[i]);
  }
  out += ']';
}

std::string quoted(const std::string& s) { return nlohmann::json(s).dump(); }

Tensor tensor_from_json(const nlohmann::json& rows, const char* field) {
  if (!rows.is_array() || rows.empty())
    throw std::runtime_error(std::string(field) + " must be a non-empty array");
  if (rows[0].is_array()) {
    const int n = static_cast<int>(rows.size());
    const int d = static_cast<int>(rows[0].size());
    Tensor t = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i) {
      if (static_cast<int>(rows[static_cast<std::size_t>(i)].size()) != d)
        throw std::runtime_error(std::string(field) + " rows have uneven lengths");
      for (int j = 0; j < d; ++j)
        t.data()[static_cast<std::size_t>(i) * d + j] =
            rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)].get<double>();
    }
    return t;
  }
  const int n = static_cast<int>(rows.size());
  Tensor t = Tensor::zeros({n});
  for (int i = 0; i < n; ++i) t.data()[i] = rows[static_cast<std::size_t>(i)].get<double>();
  return t;
}

}  // namespace

void write_trajectories(const std::string& path, std::span<const Trajectory> trajectories) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_trajectories: cannot open '" + path + "'");
  std::string line;
  for (const Trajectory& traj : trajectories) {
    line.clear();
    line += "{\"task_id\":" + quoted(traj.task_id);
    line += ",\"seed\":" + std::to_string(traj.seed);
    line += ",\"perturbation\":{\"axis\":" + quoted(to_string(traj.perturbation.axis));
    line += ",\"level\":" + std::to_string(traj.perturbation.level);
    line += ",\"seed\":" + std::to_string(traj.perturbation.seed) + "}";
    line += ",\"success\":";
    line += traj.success ? "true" : "false";
    line += ",\"instructions\":[";
    line += quoted(traj.instructions.original);
    for (const std::string& p : traj.instructions.paraphrases) {
      line += ',';
      line += quoted(p);
    }
    line += "],\"steps\":[";
    for (std::size_t i = 0; i < traj.steps.size(); ++i) {
      const TrajStep& step = traj.steps[i];
      if (i) line += ',';
      line += "{\"views\":[";
      const int n_views = step.obs.view_features.dim(0);
      const int fdim = step.obs.view_features.dim(1);
      for (int v = 0; v < n_views; ++v) {
        if (v) line += ',';
        append_array(line, step.obs.view_features.data() + static_cast<std::size_t>(v) * fdim,
                     fdim);
      }
      line += "],\"state\":";
      append_array(line, step.obs.robot_state.data(),
                   static_cast<int>(step.obs.robot_state.size()));
      line += ",\"action\":";
      append_array(line, step.action.data(), static_cast<int>(step.action.size()));
      line += '}';
    }
    line += "]}\n";
    out << line;
  }
  if (!out) throw std::runtime_error("write_trajectories: write to '" + path + "' failed");
}

std::vector<Trajectory> read_trajectories(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_trajectories: cannot open '" + path + "'");
  std::vector<Trajectory> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      Trajectory traj;
      traj.task_id = j.at("task_id").get<std::string>();
      traj.seed = j.at("seed").get<std::uint64_t>();
      const auto& pert = j.at("perturbation");
      traj.perturbation.axis = axis_from_string(pert.at("axis").get<std::string>());
      traj.perturbation.level = pert.at("level").get<int>();
      traj.perturbation.seed = pert.at("seed").get<std::uint64_t>();
      traj.success = j.at("success").get<bool>();
      const auto& instr = j.at("instructions");
      if (!instr.is_array() || instr.empty())
        throw std::runtime_error("instructions must be a non-empty array");
      traj.instructions.original = instr[0].get<std::string>();
      for (std::size_t i = 1; i < instr.size(); ++i)
        traj.instructions.paraphrases.push_back(instr[i].get<std::string>());
      for (const auto& js : j.at("steps")) {
        TrajStep step;
        step.obs.view_features = tensor_from_json(js.at("views"), "views");
        step.obs.robot_state = tensor_from_json(js.at("state"), "state");
        const auto& act = js.at("action");
        if (act.size() != step.action.size())
          throw std::runtime_error("action must have " + std::to_string(step.action.size()) +
                                   " components");
        for (std::size_t k = 0; k < step.action.size(); ++k)
          step.action[k] = act[k].get<double>();
        traj.steps.push_back(std::move(step));
      }
      out.push_back(std::move(traj));
    } catch (const std::exception& e) {
      throw std::runtime_error("dataset parse error at line " + std::to_string(line_no) + " of '" +
                               path + "': " + e.what());
    }
  }
  return out;
}

Vocab build_vocab(std::span<const Trajectory> trajectories) {
  std::vector<std::string> texts;
  for (const Trajectory& t : trajectories) {
    texts.push_back(t.instructions.original);
    for (const std::string& p : t.instructions.paraphrases) texts.push_back(p);
  }
  return Vocab::build(texts);
}

EvalInstructions eval_instructions_from(std::span<const Trajectory> trajectories) {
  EvalInstructions out;
  out.vocab = build_vocab(trajectories).words();
  for (const Trajectory& t : trajectories) {
    InstructionSet& set = out.per_task[t.task_id];
    if (set.original.empty()) set.original = t.instructions.original;
    for (const std::string& p : t.instructions.paraphrases) {
      bool duplicate = p == set.original;
      for (const std::string& existing : set.paraphrases)
        if (existing == p) duplicate = true;
      if (!duplicate) set.paraphrases.push_back(p);
    }
  }
  return out;
}

}  // namespace actflow
