#include "semsteer/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "semsteer/format.hpp"

namespace semsteer {

std::vector<std::string> split_list(const std::string& comma_list) {
  std::vector<std::string> out;
  std::stringstream ss(comma_list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::vector<PerturbationSpec> parse_suite(const std::vector<std::string>& names) {
  if (names.empty()) return default_suite();
  std::vector<PerturbationSpec> out;
  for (const auto& n : names) {
    if (n == "default") {
      for (const auto& v : default_suite()) out.push_back(v);
    } else if (n == "rewrite") {
      for (const auto& v : rewrite_suite()) out.push_back(v);
    } else {
      out.push_back(PerturbationSpec::from_name(n));
    }
  }
  return out;
}

SuiteSpec EvalConfig::suite_spec(std::uint64_t seed) const {
  SuiteSpec s;
  s.variants = parse_suite(suite);
  s.episodes_per_variant = episodes;
  s.steering.gamma = gamma;
  s.steering.denoise_steps = steps;
  s.steering.head = head;
  s.steering.guided = guided;
  s.steering.seed = seed;
  s.seed = seed;
  s.scene_bias = scene_bias;
  s.n_distractors = n_distractors;
  s.validate();
  return s;
}

namespace {

nlohmann::json data_to_json(const BiasedDatasetConfig& d) {
  return {{"n_episodes", d.n_episodes}, {"distractor_bias", d.distractor_bias}, {"n_distractors", d.n_distractors},
          {"seed", d.seed},             {"grid_size", d.grid_size},             {"horizon", d.horizon}};
}

BiasedDatasetConfig data_from_json(const nlohmann::json& j) {
  require_known_keys(j, {"n_episodes", "distractor_bias", "n_distractors", "seed", "grid_size", "horizon"}, "data");
  BiasedDatasetConfig d;
  d.n_episodes = j.value("n_episodes", d.n_episodes);
  d.distractor_bias = j.value("distractor_bias", d.distractor_bias);
  d.n_distractors = j.value("n_distractors", d.n_distractors);
  d.seed = j.value("seed", d.seed);
  d.grid_size = j.value("grid_size", d.grid_size);
  d.horizon = j.value("horizon", d.horizon);
  d.validate();
  return d;
}

nlohmann::json eval_to_json(const EvalConfig& e) {
  return {{"suite", e.suite},
          {"episodes", e.episodes},
          {"gamma", e.gamma},
          {"steps", e.steps},
          {"head", to_string(e.head)},
          {"guided", e.guided},
          {"scene_bias", e.scene_bias},
          {"n_distractors", e.n_distractors},
          {"gammas", e.gammas},
          {"steps_grid", e.steps_grid}};
}

EvalConfig eval_from_json(const nlohmann::json& j) {
  require_known_keys(j,
                     {"suite", "episodes", "gamma", "steps", "head", "guided", "scene_bias", "n_distractors", "gammas",
                      "steps_grid"},
                     "eval");
  EvalConfig e;
  if (j.contains("suite")) {
    const auto& s = j.at("suite");
    e.suite = s.is_string() ? split_list(s.get<std::string>()) : s.get<std::vector<std::string>>();
  }
  e.episodes = j.value("episodes", e.episodes);
  e.gamma = j.value("gamma", e.gamma);
  e.steps = j.value("steps", e.steps);
  if (j.contains("head")) e.head = decode_head_from_string(j.at("head").get<std::string>());
  e.guided = j.value("guided", e.guided);
  e.scene_bias = j.value("scene_bias", e.scene_bias);
  e.n_distractors = j.value("n_distractors", e.n_distractors);
  e.gammas = j.value("gammas", e.gammas);
  e.steps_grid = j.value("steps_grid", e.steps_grid);
  e.suite_spec(0);
  return e;
}

nlohmann::json ood_to_json(const OodSpec& o) {
  nlohmann::json holdouts = nlohmann::json::array();
  for (const auto& h : o.holdout_intents) holdouts.push_back(to_json(h));
  return {{"holdouts", holdouts},
          {"pretrain_steps", o.pretrain_steps},
          {"adaptation_demos", o.adaptation_demos},
          {"adaptation_steps", o.adaptation_steps},
          {"eval_episodes", o.eval_episodes},
          {"seed", o.seed},
          {"adaptation_peak_lr", o.adaptation_peak_lr},
          {"adaptation_final_lr", o.adaptation_final_lr}};
}

OodSpec ood_from_json(const nlohmann::json& j) {
  require_known_keys(j,
                     {"holdouts", "pretrain_steps", "adaptation_demos", "adaptation_steps", "eval_episodes", "seed",
                      "adaptation_peak_lr", "adaptation_final_lr"},
                     "ood");
  OodSpec o;
  if (j.contains("holdouts")) {
    o.holdout_intents.clear();
    for (const auto& h : j.at("holdouts")) o.holdout_intents.push_back(intent_from_json(h));
  }
  o.pretrain_steps = j.value("pretrain_steps", o.pretrain_steps);
  o.adaptation_demos = j.value("adaptation_demos", o.adaptation_demos);
  o.adaptation_steps = j.value("adaptation_steps", o.adaptation_steps);
  o.eval_episodes = j.value("eval_episodes", o.eval_episodes);
  o.seed = j.value("seed", o.seed);
  o.adaptation_peak_lr = j.value("adaptation_peak_lr", o.adaptation_peak_lr);
  o.adaptation_final_lr = j.value("adaptation_final_lr", o.adaptation_final_lr);
  o.validate();
  return o;
}

}  // namespace

nlohmann::json RunConfig::to_json() const {
  return {{"data", data_to_json(data)},
          {"train", train.to_json()},
          {"eval", eval_to_json(eval)},
          {"ood", ood_to_json(ood)},
          {"consistency", {{"n_states", consistency.n_states}, {"k", consistency.k}}}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  require_known_keys(j, {"data", "train", "eval", "ood", "consistency"}, "config");
  RunConfig c;
  if (j.contains("data")) c.data = data_from_json(j.at("data"));
  if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
  if (j.contains("eval")) c.eval = eval_from_json(j.at("eval"));
  if (j.contains("ood")) c.ood = ood_from_json(j.at("ood"));
  if (j.contains("consistency")) {
    const auto& s = j.at("consistency");
    require_known_keys(s, {"n_states", "k"}, "consistency");
    c.consistency.n_states = s.value("n_states", c.consistency.n_states);
    c.consistency.k = s.value("k", c.consistency.k);
    if (c.consistency.n_states < 1 || c.consistency.k < 2) {
      throw std::invalid_argument("consistency: need n_states >= 1 and k >= 2");
    }
  }
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("config '" + path + "': " + e.what());
  }
  try {
    return from_json(j);
  } catch (const std::exception& e) {
    throw std::runtime_error("config '" + path + "': " + e.what());
  }
}

}  // namespace semsteer
