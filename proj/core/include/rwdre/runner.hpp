#pragma once

#include <string>
#include <vector>

#include "rwdre/config.hpp"

namespace rwdre {

struct RunResult {
  std::vector<std::string> artifacts;  // file names written into out_dir
  bool bound_violated = false;         // a checked bound failed; artifacts are kept
};

// Executes one experiment. All artifacts are computed in memory first and
// written atomically at the end, so a failed run leaves no partial files.
// The manifest echoes the canonical config; re-running it reproduces every
// artifact byte for byte apart from the manifest's wall-clock entry.
RunResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir);

}  // namespace rwdre
