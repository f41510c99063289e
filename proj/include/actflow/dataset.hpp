#pragma once

#include <span>
#include <string>
#include <vector>

#include "actflow/bench.hpp"
#include "actflow/text.hpp"

namespace actflow {

// Line-oriented trajectory store: one JSON record per line with fields
// {task_id, seed, perturbation, success, instructions, steps}. Numbers are
// written with 17 significant digits so parse(write(x)) == x bit-exactly.
void write_trajectories(const std::string& path, std::span<const Trajectory> trajectories);
std::vector<Trajectory> read_trajectories(const std::string& path);

// Vocabulary over every instruction text in the dataset (originals and all
// paraphrases), so evaluation-time encoding can never go out of vocabulary.
Vocab build_vocab(std::span<const Trajectory> trajectories);

EvalInstructions eval_instructions_from(std::span<const Trajectory> trajectories);

}  // namespace actflow
