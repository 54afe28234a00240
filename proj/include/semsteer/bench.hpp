#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "semsteer/lang.hpp"
#include "semsteer/policy.hpp"
#include "semsteer/steering.hpp"
#include "semsteer/worldsim.hpp"

namespace semsteer {

/// Anything that can drive an episode. Returns the primitives to execute next
/// (one for the discrete head, H for a decoded chunk).
class EpisodePolicy {
 public:
  virtual ~EpisodePolicy() = default;
  virtual std::vector<PrimitiveKind> next_actions(const Scene& scene, const Instruction& instruction,
                                                  std::uint64_t seed) const = 0;
};

/// Trained model decoded through the steering module. Flow chunks are
/// quantized entry by entry against the scene they will be executed in.
class ModelPolicy : public EpisodePolicy {
 public:
  ModelPolicy(const PolicyModel& model, SteeringConfig cfg);
  std::vector<PrimitiveKind> next_actions(const Scene& scene, const Instruction& instruction,
                                          std::uint64_t seed) const override;
  const SteeringConfig& steering() const { return cfg_; }

 private:
  const PolicyModel& model_;
  SteeringConfig cfg_;
};

/// Scripted expert reading the intent off the instruction; unparseable
/// instructions produce a noop.
class ExpertPolicy : public EpisodePolicy {
 public:
  explicit ExpertPolicy(const Grammar& g = Grammar::builtin()) : grammar_(g) {}
  std::vector<PrimitiveKind> next_actions(const Scene& scene, const Instruction& instruction,
                                          std::uint64_t seed) const override;

 private:
  const Grammar& grammar_;
};

class RandomPolicy : public EpisodePolicy {
 public:
  std::vector<PrimitiveKind> next_actions(const Scene& scene, const Instruction& instruction,
                                          std::uint64_t seed) const override;
};

struct EpisodeResult {
  bool success = false;
  int steps_used = 0;
  /// At least 90% of the executed primitives left the scene unchanged.
  bool inaction = false;
};

inline constexpr double kInactionFraction = 0.9;

/// Decode-step loop until success or the 50-step budget.
EpisodeResult run_episode(const EpisodePolicy& policy, const Scene& scene, const Intent& intent,
                          const Instruction& instruction, std::uint64_t seed);

struct SuiteSpec {
  std::vector<PerturbationSpec> variants = default_suite();
  int episodes_per_variant = 200;
  /// Empty means all 64 intents.
  std::vector<Intent> intents;
  SteeringConfig steering{};
  std::uint64_t seed = 0;
  double scene_bias = 0.9;
  int n_distractors = 2;

  void validate() const;
};

struct ReportRow {
  std::string variant;
  int successes = 0;
  int n = 0;
  int inaction = 0;
  double sr() const { return n == 0 ? 0.0 : static_cast<double>(successes) / n; }
};

struct ReportTable {
  std::string model;
  double gamma = 1.0;
  int steps = 10;
  std::string head = "discrete";
  std::uint64_t seed = 0;
  std::vector<ReportRow> rows;

  /// Arithmetic mean of the row success rates.
  double average() const;
  const ReportRow& row(const std::string& variant) const;
};

/// Scene, intent and instruction for one episode slot of a suite. Shared
/// across variants so rows are paired.
struct EpisodeSetup {
  Intent intent;
  Scene scene;
  Instruction instruction;
};
EpisodeSetup suite_episode(const SuiteSpec& spec, int index, const Grammar& g = Grammar::builtin());

ReportTable run_suite(const EpisodePolicy& policy, const SuiteSpec& spec, const std::string& model_name,
                      const Grammar& g = Grammar::builtin());
/// Builds a ModelPolicy from spec.steering.
ReportTable run_suite(const PolicyModel& model, const SuiteSpec& spec, const std::string& model_name,
                      const Grammar& g = Grammar::builtin());

inline const std::vector<double> kDefaultGammaGrid{1.0, 1.25, 1.5, 1.75, 2.0, 3.0};
inline const std::vector<int> kDefaultStepsGrid{5, 10, 15, 20};

/// One table per (gamma, steps) point, gamma-major.
std::vector<ReportTable> ablation_sweep(const PolicyModel& model, const std::vector<double>& gammas,
                                        const std::vector<int>& steps_list, const SuiteSpec& spec,
                                        const std::string& model_name, const Grammar& g = Grammar::builtin());

struct OodSpec {
  std::vector<Intent> holdout_intents = default_holdouts();
  int pretrain_steps = 5000;
  int adaptation_demos = 20;
  std::vector<int> adaptation_steps{10, 100, 1000};
  int eval_episodes = 100;
  std::uint64_t seed = 0;
  double adaptation_peak_lr = 1e-3;
  double adaptation_final_lr = 1e-4;

  static std::vector<Intent> default_holdouts();
  void validate() const;
};

struct OodBudgetResult {
  int steps = 0;
  /// One entry per holdout intent, in spec order.
  std::vector<double> task_sr;
  double mean_sr = 0.0;
};

struct OodReport {
  std::string mode;
  std::vector<Intent> holdouts;
  std::vector<OodBudgetResult> budgets;
  nlohmann::json to_json() const;
};

/// Intents that keep both holdout objects and zones in the retained set.
std::vector<Intent> retained_intents(const std::vector<Intent>& holdouts);

/// Pretrains on retained intents, then fine-tunes a copy per budget on the
/// holdout demonstrations and evaluates each holdout intent separately.
OodReport ood_protocol(const OodSpec& spec, const TrainConfig& train_cfg, const BiasedDatasetConfig& data_cfg,
                       const Grammar& g = Grammar::builtin());

/// Evaluation on explicit intents with origin instructions.
double intent_success_rate(const PolicyModel& model, const Intent& intent, int episodes, std::uint64_t seed,
                           const SteeringConfig& steering, const BiasedDatasetConfig& scene_cfg,
                           const Grammar& g = Grammar::builtin());

double js_divergence(const std::vector<double>& p, const std::vector<double>& q);

/// Mean pairwise Jensen-Shannon divergence of the discrete decode distribution
/// across K paraphrases, averaged over n_states sampled (scene, intent) pairs.
double paraphrase_consistency(const ConditionalScorer& scorer, const Vocabulary& vocab, int n_states, int k,
                              std::uint64_t seed, const SteeringConfig& steering = {},
                              const Grammar& g = Grammar::builtin());

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct ReportRecord {
  std::string model;
  std::string variant;
  double gamma = 1.0;
  int steps = 0;
  double sr = 0.0;
  int n = 0;
  std::uint64_t seed = 0;
};

std::vector<ReportRecord> to_records(const std::vector<ReportTable>& tables);
std::string records_to_csv(const std::vector<ReportRecord>& records);
std::vector<ReportRecord> records_from_csv(const std::string& text);

nlohmann::json summary_json(const std::vector<ReportTable>& tables);

/// Line chart of SR against x (gamma or steps), one series per variant.
std::string line_chart_svg(const std::vector<ReportRecord>& records, bool x_is_gamma, const std::string& title);
/// Bar chart of per-variant SR, one group per table.
std::string bar_chart_svg(const std::vector<ReportTable>& tables, const std::string& title);

/// Writes report.csv, summary.json and the SVG charts into out_dir.
std::vector<std::string> emit_report(const std::vector<ReportTable>& tables, const std::string& out_dir);

}  // namespace semsteer
