#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "semsteer/lang.hpp"
#include "semsteer/nn.hpp"
#include "semsteer/worldsim.hpp"

namespace semsteer {

/// Language condition for one forward pass. nullopt is the null condition,
/// which is not the same thing as a blank (all-PAD) instruction.
using Condition = std::optional<TokenSeq>;

inline const Condition kNullCondition = std::nullopt;

/// Anything that produces conditional action scores and flow velocities.
/// PolicyModel is the real implementation; tests substitute stubs.
class ConditionalScorer {
 public:
  virtual ~ConditionalScorer() = default;
  /// Logits over the 7 primitive kinds.
  virtual std::vector<double> score(const Scene& scene, const Condition& condition) const = 0;
  /// Velocity over the flattened (H x 3) chunk at flow time tau.
  virtual std::vector<double> flow_velocity(const Scene& scene, const Condition& condition,
                                            std::span<const double> chunk_state, double tau) const = 0;
  virtual int chunk_width() const = 0;
};

// ---------------------------------------------------------------------------
// Scene features
// ---------------------------------------------------------------------------

struct FeatureLayout {
  int max_slots = 4;

  static constexpr int kSlotWidth = 17;
  static constexpr int kZoneWidth = 7;
  static constexpr int kGlobalWidth = 3;
  int width() const { return max_slots * kSlotWidth + kNumDestinations * kZoneWidth + kGlobalWidth; }
};

/// Fixed-width scene encoding. Objects fill slots nearest-first, ordered by
/// (distance to gripper, x, y), so object ids never influence the result.
std::vector<double> featurize(const Scene& scene, const FeatureLayout& layout);

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct PolicyConfig {
  int d = 32;
  int visual_hidden = 64;
  int head_hidden = 64;
  int horizon = 4;
  int max_slots = 4;
  /// Scale of the initial weights of both heads; 0 gives all-zero heads.
  double head_init_scale = 1.0;

  nlohmann::json to_json() const;
  static PolicyConfig from_json(const nlohmann::json& j);
};

/// One supervised example: scene features plus the expert labels and the
/// flow-matching noise draw used for it.
struct TrainExample {
  std::vector<double> features;
  Intent intent;
  TokenSeq instruction;
  int target_primitive = 0;
  std::vector<double> target_chunk;  // flattened H x 3
  std::vector<double> noise;         // flow start point, same width as target_chunk
  double tau = 0.5;
};

enum class LossHeads { Discrete, Flow, Both };

/// Per-condition losses for one example, accumulating gradients scaled by grad_weight.
class RealizationLossModel {
 public:
  virtual ~RealizationLossModel() = default;
  virtual std::vector<double> realization_losses(const TrainExample& example, std::span<const Condition> conditions,
                                                 double grad_weight, LossHeads heads) = 0;
};

/// Heads read [phi, psi, attend(objects, psi), attend(zones, psi)]. The
/// attention read-outs are the interaction terms between the two modalities.
inline constexpr int kFusionWidth = 4;

class PolicyModel : public ConditionalScorer, public RealizationLossModel {
 public:
  PolicyModel() = default;
  PolicyModel(const PolicyConfig& config, Vocabulary vocab, std::uint64_t seed);

  const PolicyConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }
  int feature_width() const { return layout_.width(); }

  std::vector<double> embed_visual(const Scene& scene) const;
  std::vector<double> embed_visual_features(std::span<const double> features) const;
  std::vector<double> embed_language(const Condition& condition) const;

  std::vector<double> score(const Scene& scene, const Condition& condition) const override;
  std::vector<double> flow_velocity(const Scene& scene, const Condition& condition,
                                    std::span<const double> chunk_state, double tau) const override;
  int chunk_width() const override { return 3 * config_.horizon; }

  std::vector<double> realization_losses(const TrainExample& example, std::span<const Condition> conditions,
                                         double grad_weight, LossHeads heads) override;

  nlohmann::json to_json() const;
  /// Builds the model from a checkpoint section (config, vocabulary, tensors).
  static PolicyModel from_json(const nlohmann::json& j);

 private:
  struct VisualCache {
    nn::MlpCache scene;
    nn::MlpCache slots;
    nn::Tensor slot_embed;  // slots x d
    std::vector<bool> present;
    nn::MlpCache zones;
    nn::Tensor zone_embed;  // destinations x d
    std::vector<bool> zone_present;
  };
  struct Attention {
    std::vector<double> query;
    std::vector<double> weights;  // per slot, zero for empty slots
    std::vector<double> pooled;
  };

  void bind();
  nn::Tensor visual_forward(std::span<const double> features, VisualCache& cache) const;
  void visual_backward(const VisualCache& cache, const nn::Tensor& dphi, const nn::Tensor& dslot_embed,
                       const nn::Tensor& dzone_embed);
  Attention attend(const nn::Tensor& keys, const std::vector<bool>& present, int query,
                   std::span<const double> psi) const;
  void attend_backward(const nn::Tensor& keys, const std::vector<bool>& present, int query,
                       std::span<const double> psi, const Attention& a, std::span<const double> dpooled,
                       nn::Tensor& dkeys, std::span<double> dpsi);
  std::vector<double> head_input(std::span<const double> phi, std::span<const double> psi, const Attention& objects,
                                 const Attention& zones) const;

  PolicyConfig config_;
  Vocabulary vocab_;
  FeatureLayout layout_;
  nn::ParamSet params_;
  nn::Mlp visual_;
  nn::Mlp slot_encoder_;
  nn::Mlp zone_encoder_;
  nn::Mlp discrete_head_;
  nn::Mlp flow_head_;
  int token_embedding_ = -1;
  int null_embedding_ = -1;
  int query_ = -1;
  int zone_query_ = -1;
  nn::Tensor positions_;
};

/// Sinusoidal position table (max_len x d).
nn::Tensor sinusoidal_positions(int max_len, int d);

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Cross-entropy weight is 1; the flow term is the per-component mean squared
/// error against the straight-line target (data - noise), weight 1.
double mle_loss(RealizationLossModel& model, std::span<const TrainExample> batch, std::span<const Condition> conditions,
                LossHeads heads = LossHeads::Both);

/// Supplies the K conditions for one example. The default draws the grammar
/// neighborhood of the example's intent.
using NeighborhoodFn = std::function<std::vector<Condition>(const TrainExample&, int k, std::uint64_t seed)>;

NeighborhoodFn grammar_neighborhood(const Vocabulary& vocab, const Grammar& g = Grammar::builtin());

/// Monte Carlo average over K realizations per example, then over the batch.
double expected_semantic_loss(RealizationLossModel& model, std::span<const TrainExample> batch, int k,
                              std::uint64_t seed, const NeighborhoodFn& neighborhood,
                              LossHeads heads = LossHeads::Both);

// ---------------------------------------------------------------------------
// Data and training
// ---------------------------------------------------------------------------

struct Episode {
  Intent intent;
  Instruction instruction;
  Trajectory trajectory;
};

struct DatasetSummary {
  int written = 0;
  int skipped = 0;
  double target_nearest_fraction = 0.0;
};

/// Per-episode records; episodes whose expert fails are skipped and counted.
std::vector<Episode> generate_episodes(const BiasedDatasetConfig& cfg, const Grammar& g = Grammar::builtin(),
                                       const std::vector<Intent>& intents = Intent::all(),
                                       DatasetSummary* summary = nullptr);
nlohmann::json episode_to_json(const Episode& e);
Episode episode_from_json(const nlohmann::json& j);

/// JSONL dataset file, one episode per line with schema version "v": 1.
DatasetSummary generate_dataset(const BiasedDatasetConfig& cfg, const std::string& path,
                                const Grammar& g = Grammar::builtin(),
                                const std::vector<Intent>& intents = Intent::all());
std::vector<Episode> read_dataset(const std::string& path);

/// Every primitive step of every episode, labelled with the expert primitive
/// and the next H chunk entries.
std::vector<TrainExample> build_examples(std::span<const Episode> episodes, const Vocabulary& vocab,
                                         const FeatureLayout& layout, int horizon);

enum class TrainMode { Mle, Mcsi };
std::string_view to_string(TrainMode m);
TrainMode train_mode_from_string(std::string_view s);

struct TrainConfig {
  TrainMode mode = TrainMode::Mle;
  int k = 8;
  double cond_dropout = 0.1;
  nn::ScheduleConfig schedule{};
  double ema_decay = nn::kDefaultEmaDecay;
  std::uint64_t seed = 0;
  int batch_size = 64;
  /// Draw a fresh neighborhood every step; otherwise one fixed draw per example.
  bool resample_neighborhoods = true;
  PolicyConfig model{};

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct LossPoint {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainedPolicy {
  PolicyModel raw;
  PolicyModel ema;
  TrainConfig config;
  std::vector<LossPoint> curve;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kDivergenceLoss = 1e3;

/// Runs schedule.total_steps optimizer steps. When `init` is given training
/// starts from its weights (fine-tuning); its vocabulary must match.
/// Throws TrainingError on divergence or non-finite values, after writing the
/// current parameters to `dump_path` when non-empty.
TrainedPolicy train(std::span<const Episode> episodes, const TrainConfig& cfg, const Grammar& g = Grammar::builtin(),
                    const PolicyModel* init = nullptr, const std::string& dump_path = "");

void write_loss_csv(const TrainedPolicy& t, const std::string& path);

/// Versioned checkpoint: raw and EMA tensors, vocabulary, schedule, config hash.
void save_checkpoint(const TrainedPolicy& t, const std::string& path);
TrainedPolicy load_checkpoint(const std::string& path);
std::string config_hash(const TrainConfig& cfg);

}  // namespace semsteer
