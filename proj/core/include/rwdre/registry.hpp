#pragma once

#include <span>
#include <string>

namespace rwdre {

struct ExperimentInfo {
  std::string name;
  std::string summary;  // one line for the listing
  std::string claim;    // the quantitative statement the run checks
};

// The fixed set of runnable experiments, in listing order.
std::span<const ExperimentInfo> experiment_registry();

// nullptr when no experiment has that name.
const ExperimentInfo* find_experiment(const std::string& name);

}  // namespace rwdre
