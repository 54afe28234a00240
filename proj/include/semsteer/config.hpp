#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "semsteer/bench.hpp"
#include "semsteer/policy.hpp"
#include "semsteer/worldsim.hpp"

namespace semsteer {

struct EvalConfig {
  std::vector<std::string> suite;  // variant names; empty means the default suite
  int episodes = 200;
  double gamma = 1.0;
  int steps = 10;
  DecodeHead head = DecodeHead::Discrete;
  bool guided = true;
  double scene_bias = 0.9;
  int n_distractors = 2;
  std::vector<double> gammas = kDefaultGammaGrid;
  std::vector<int> steps_grid = kDefaultStepsGrid;

  SuiteSpec suite_spec(std::uint64_t seed) const;
};

struct ConsistencyConfig {
  int n_states = 200;
  int k = 8;
};

/// Whole-run configuration file. Sections: data, train, eval, ood, consistency.
/// Every section and key is optional; unknown ones are rejected.
struct RunConfig {
  BiasedDatasetConfig data{};
  TrainConfig train{};
  EvalConfig eval{};
  OodSpec ood{};
  ConsistencyConfig consistency{};

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);
};

std::vector<PerturbationSpec> parse_suite(const std::vector<std::string>& names);
std::vector<std::string> split_list(const std::string& comma_list);

}  // namespace semsteer
