#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace semsteer {

// ---------------------------------------------------------------------------
// Intent vocabulary
// ---------------------------------------------------------------------------

enum class Verb : int { Put = 0 };
enum class Color : int { Red = 0, Green, Blue, Yellow };
enum class Shape : int { Cube = 0, Ball, Mug, Bottle };
enum class Destination : int { LeftPad = 0, RightPad, TopShelf, Bin };

inline constexpr int kNumColors = 4;
inline constexpr int kNumShapes = 4;
inline constexpr int kNumDestinations = 4;
inline constexpr int kNumIntents = kNumColors * kNumShapes * kNumDestinations;

std::string_view to_string(Verb v);
std::string_view to_string(Color c);
std::string_view to_string(Shape s);
std::string_view to_string(Destination d);
Color color_from_string(std::string_view s);
Shape shape_from_string(std::string_view s);
Destination destination_from_string(std::string_view s);

/// The latent task: which object goes where.
struct Intent {
  Verb verb = Verb::Put;
  Color color = Color::Red;
  Shape shape = Shape::Cube;
  Destination destination = Destination::Bin;

  /// Dense index in [0, 64).
  int index() const;
  static Intent from_index(int index);
  static std::vector<Intent> all();

  friend bool operator==(const Intent&, const Intent&) = default;
};

std::string describe(const Intent& z);

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

struct Cell {
  int x = 0;
  int y = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

inline int manhattan(Cell a, Cell b) { return std::abs(a.x - b.x) + std::abs(a.y - b.y); }

struct SceneObject {
  int id = 0;
  Color color = Color::Red;
  Shape shape = Shape::Cube;
  Cell cell;
  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

using ZoneMap = std::array<std::vector<Cell>, kNumDestinations>;

/// Default zone layout: three cells centred on each edge.
/// Left/right pads on the side walls, shelf on the top row, bin on the bottom row.
ZoneMap default_zones(int grid_size);

struct Scene {
  int grid_size = 7;
  std::vector<SceneObject> objects;
  Cell gripper;
  std::optional<int> held;
  ZoneMap zones;
  int step_count = 0;

  const SceneObject* object_at(Cell c) const;
  const SceneObject* object_by_id(int id) const;
  const SceneObject* find(Color color, Shape shape) const;
  bool in_bounds(Cell c) const;
  bool in_zone(Destination d, Cell c) const;
  bool in_any_zone(Cell c) const;

  /// Throws std::logic_error naming the violated invariant.
  void validate() const;

  friend bool operator==(const Scene&, const Scene&) = default;
};

/// Id of the object nearest the gripper (Manhattan), ties to the lowest id.
std::optional<int> nearest_object(const Scene& scene);

// ---------------------------------------------------------------------------
// Actions
// ---------------------------------------------------------------------------

enum class PrimitiveKind : int { Up = 0, Down, Left, Right, Grasp, Release, Noop };
inline constexpr int kNumPrimitives = 7;

std::string_view to_string(PrimitiveKind k);

/// One continuous chunk entry; components in [-1, 1].
/// grip encodes the desired gripper state after the entry: +1 closed, -1 open.
struct ChunkEntry {
  double dx = 0.0;
  double dy = 0.0;
  double grip = -1.0;
  friend bool operator==(const ChunkEntry&, const ChunkEntry&) = default;
};

struct ActionChunk {
  std::vector<ChunkEntry> entries;

  int horizon() const { return static_cast<int>(entries.size()); }
  /// Row-major (H x 3) flattening.
  std::vector<double> flatten() const;
  static ActionChunk unflatten(const std::vector<double>& flat);
  void clamp();
};

ChunkEntry encode_primitive(PrimitiveKind kind, bool holding_after);

/// Nearest primitive to a continuous entry given the current gripper state.
/// Inverse of encode_primitive on the lattice points it emits.
PrimitiveKind quantize(const ChunkEntry& entry, bool holding);

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// Primitive steps allowed per evaluation episode.
inline constexpr int kEpisodeBudget = 50;

/// Apply one primitive. Never fails: inapplicable actions leave the scene
/// unchanged except for step_count. A holding gripper cannot move onto
/// another object's cell.
Scene step(const Scene& scene, PrimitiveKind action);

/// True iff the intent's target lies inside its destination zone and is not held.
/// Throws std::invalid_argument when the target is absent.
bool check_success(const Scene& scene, const Intent& intent);

struct BiasedDatasetConfig {
  int n_episodes = 2000;
  double distractor_bias = 0.9;
  int n_distractors = 2;
  std::uint64_t seed = 0;
  int grid_size = 7;
  int horizon = 4;

  void validate() const;
};

/// Place the target and distractors. With probability distractor_bias the
/// target is the object nearest the gripper. Throws std::invalid_argument when
/// the objects cannot fit.
Scene init_scene(const Intent& intent, const BiasedDatasetConfig& cfg, std::uint64_t episode_seed);

// ---------------------------------------------------------------------------
// Scripted expert
// ---------------------------------------------------------------------------

class ExpertFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Greedy shortest-path plan: approach, grasp, carry, release.
/// Empty when the intent is already satisfied.
std::vector<PrimitiveKind> expert_plan(const Scene& scene, const Intent& intent,
                                       int step_budget = kEpisodeBudget);

struct Frame {
  Scene scene;
  ActionChunk chunk;
};

struct Trajectory {
  Intent intent;
  std::vector<Frame> frames;
  bool success = false;
};

Trajectory expert_rollout(const Scene& scene, const Intent& intent, int horizon);

/// Replays every chunk from the first snapshot; returns the final scene.
/// Throws std::logic_error if an intermediate snapshot is not reproduced.
Scene replay(const Trajectory& trajectory);

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

nlohmann::json to_json(const Intent& z);
Intent intent_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Scene& s);
Scene scene_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ActionChunk& c);
ActionChunk chunk_from_json(const nlohmann::json& j);

}  // namespace semsteer
