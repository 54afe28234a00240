#include "semsteer/worldsim.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

#include "semsteer/rng.hpp"

namespace semsteer {

namespace {

constexpr std::array<std::string_view, kNumColors> kColorNames{"red", "green", "blue", "yellow"};
constexpr std::array<std::string_view, kNumShapes> kShapeNames{"cube", "ball", "mug", "bottle"};
constexpr std::array<std::string_view, kNumDestinations> kDestinationNames{"left-pad", "right-pad",
                                                                         "top-shelf", "bin"};
constexpr std::array<std::string_view, kNumPrimitives> kPrimitiveNames{
    "up", "down", "left", "right", "grasp", "release", "noop"};

template <typename E, std::size_t N>
E lookup(const std::array<std::string_view, N>& names, std::string_view s, const char* what) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == s) return static_cast<E>(i);
  }
  throw std::invalid_argument(std::string("unknown ") + what + ": '" + std::string(s) + "'");
}

Cell moved(Cell c, PrimitiveKind k) {
  switch (k) {
    case PrimitiveKind::Up: return {c.x, c.y + 1};
    case PrimitiveKind::Down: return {c.x, c.y - 1};
    case PrimitiveKind::Left: return {c.x - 1, c.y};
    case PrimitiveKind::Right: return {c.x + 1, c.y};
    default: return c;
  }
}

bool is_move(PrimitiveKind k) {
  return k == PrimitiveKind::Up || k == PrimitiveKind::Down || k == PrimitiveKind::Left ||
         k == PrimitiveKind::Right;
}

}  // namespace

std::string_view to_string(Verb) { return "put"; }
std::string_view to_string(Color c) { return kColorNames[static_cast<int>(c)]; }
std::string_view to_string(Shape s) { return kShapeNames[static_cast<int>(s)]; }
std::string_view to_string(Destination d) { return kDestinationNames[static_cast<int>(d)]; }
std::string_view to_string(PrimitiveKind k) { return kPrimitiveNames[static_cast<int>(k)]; }

Color color_from_string(std::string_view s) { return lookup<Color>(kColorNames, s, "color"); }
Shape shape_from_string(std::string_view s) { return lookup<Shape>(kShapeNames, s, "shape"); }
Destination destination_from_string(std::string_view s) {
  return lookup<Destination>(kDestinationNames, s, "destination");
}

int Intent::index() const {
  return (static_cast<int>(color) * kNumShapes + static_cast<int>(shape)) * kNumDestinations +
         static_cast<int>(destination);
}

Intent Intent::from_index(int index) {
  if (index < 0 || index >= kNumIntents) throw std::out_of_range("intent index out of range");
  Intent z;
  z.destination = static_cast<Destination>(index % kNumDestinations);
  index /= kNumDestinations;
  z.shape = static_cast<Shape>(index % kNumShapes);
  z.color = static_cast<Color>(index / kNumShapes);
  return z;
}

std::vector<Intent> Intent::all() {
  std::vector<Intent> out;
  out.reserve(kNumIntents);
  for (int i = 0; i < kNumIntents; ++i) out.push_back(from_index(i));
  return out;
}

std::string describe(const Intent& z) {
  return "(" + std::string(to_string(z.verb)) + "," + std::string(to_string(z.color)) + "," +
         std::string(to_string(z.shape)) + "," + std::string(to_string(z.destination)) + ")";
}

ZoneMap default_zones(int n) {
  const int mid = n / 2;
  ZoneMap zones;
  for (int k = mid - 1; k <= mid + 1; ++k) {
    zones[static_cast<int>(Destination::LeftPad)].push_back({0, k});
    zones[static_cast<int>(Destination::RightPad)].push_back({n - 1, k});
    zones[static_cast<int>(Destination::TopShelf)].push_back({k, n - 1});
    zones[static_cast<int>(Destination::Bin)].push_back({k, 0});
  }
  return zones;
}

const SceneObject* Scene::object_at(Cell c) const {
  for (const auto& o : objects) {
    if (o.cell == c) return &o;
  }
  return nullptr;
}

const SceneObject* Scene::object_by_id(int id) const {
  for (const auto& o : objects) {
    if (o.id == id) return &o;
  }
  return nullptr;
}

const SceneObject* Scene::find(Color color, Shape shape) const {
  for (const auto& o : objects) {
    if (o.color == color && o.shape == shape) return &o;
  }
  return nullptr;
}

bool Scene::in_bounds(Cell c) const {
  return c.x >= 0 && c.y >= 0 && c.x < grid_size && c.y < grid_size;
}

bool Scene::in_zone(Destination d, Cell c) const {
  const auto& cells = zones[static_cast<int>(d)];
  return std::find(cells.begin(), cells.end(), c) != cells.end();
}

bool Scene::in_any_zone(Cell c) const {
  for (int d = 0; d < kNumDestinations; ++d) {
    if (in_zone(static_cast<Destination>(d), c)) return true;
  }
  return false;
}

void Scene::validate() const {
  if (!in_bounds(gripper)) throw std::logic_error("scene: gripper out of bounds");
  for (std::size_t i = 0; i < objects.size(); ++i) {
    if (!in_bounds(objects[i].cell)) throw std::logic_error("scene: object out of bounds");
    for (std::size_t j = i + 1; j < objects.size(); ++j) {
      if (objects[i].cell == objects[j].cell) throw std::logic_error("scene: two objects share a cell");
      if (objects[i].id == objects[j].id) throw std::logic_error("scene: duplicate object id");
    }
  }
  if (held) {
    const auto* o = object_by_id(*held);
    if (o == nullptr) throw std::logic_error("scene: held id not present");
    if (!(o->cell == gripper)) throw std::logic_error("scene: held object not at gripper");
  }
}

std::optional<int> nearest_object(const Scene& scene) {
  std::optional<int> best;
  int best_dist = std::numeric_limits<int>::max();
  for (const auto& o : scene.objects) {
    const int d = manhattan(o.cell, scene.gripper);
    if (d < best_dist || (d == best_dist && o.id < *best)) {
      best = o.id;
      best_dist = d;
    }
  }
  return best;
}

std::vector<double> ActionChunk::flatten() const {
  std::vector<double> out;
  out.reserve(entries.size() * 3);
  for (const auto& e : entries) {
    out.push_back(e.dx);
    out.push_back(e.dy);
    out.push_back(e.grip);
  }
  return out;
}

ActionChunk ActionChunk::unflatten(const std::vector<double>& flat) {
  if (flat.size() % 3 != 0) throw std::invalid_argument("chunk: flat length not a multiple of 3");
  ActionChunk c;
  for (std::size_t i = 0; i < flat.size(); i += 3) c.entries.push_back({flat[i], flat[i + 1], flat[i + 2]});
  return c;
}

void ActionChunk::clamp() {
  for (auto& e : entries) {
    e.dx = std::clamp(e.dx, -1.0, 1.0);
    e.dy = std::clamp(e.dy, -1.0, 1.0);
    e.grip = std::clamp(e.grip, -1.0, 1.0);
  }
}

ChunkEntry encode_primitive(PrimitiveKind kind, bool holding_after) {
  const double g = holding_after ? 1.0 : -1.0;
  switch (kind) {
    case PrimitiveKind::Up: return {0.0, 1.0, g};
    case PrimitiveKind::Down: return {0.0, -1.0, g};
    case PrimitiveKind::Left: return {-1.0, 0.0, g};
    case PrimitiveKind::Right: return {1.0, 0.0, g};
    case PrimitiveKind::Grasp: return {0.0, 0.0, 1.0};
    case PrimitiveKind::Release: return {0.0, 0.0, -1.0};
    case PrimitiveKind::Noop: return {0.0, 0.0, g};
  }
  return {0.0, 0.0, g};
}

PrimitiveKind quantize(const ChunkEntry& e, bool holding) {
  const double ax = std::abs(e.dx);
  const double ay = std::abs(e.dy);
  if (std::max(ax, ay) >= 0.5) {
    if (ax >= ay) return e.dx > 0 ? PrimitiveKind::Right : PrimitiveKind::Left;
    return e.dy > 0 ? PrimitiveKind::Up : PrimitiveKind::Down;
  }
  if (!holding && e.grip > 0.0) return PrimitiveKind::Grasp;
  if (holding && e.grip < 0.0) return PrimitiveKind::Release;
  return PrimitiveKind::Noop;
}

Scene step(const Scene& scene, PrimitiveKind action) {
  Scene next = scene;
  next.step_count += 1;
  if (is_move(action)) {
    Cell target = moved(scene.gripper, action);
    if (!scene.in_bounds(target)) return next;
    if (scene.held) {
      const auto* blocker = scene.object_at(target);
      if (blocker != nullptr && blocker->id != *scene.held) return next;
      for (auto& o : next.objects) {
        if (o.id == *scene.held) o.cell = target;
      }
    }
    next.gripper = target;
  } else if (action == PrimitiveKind::Grasp) {
    if (!scene.held) {
      if (const auto* o = scene.object_at(scene.gripper)) next.held = o->id;
    }
  } else if (action == PrimitiveKind::Release) {
    next.held.reset();
  }
  return next;
}

bool check_success(const Scene& scene, const Intent& intent) {
  const auto* target = scene.find(intent.color, intent.shape);
  if (target == nullptr) {
    throw std::invalid_argument("check_success: target " + describe(intent) + " absent from scene");
  }
  if (scene.held && *scene.held == target->id) return false;
  return scene.in_zone(intent.destination, target->cell);
}

void BiasedDatasetConfig::validate() const {
  if (n_episodes < 0) throw std::invalid_argument("n_episodes must be >= 0");
  if (!(distractor_bias >= 0.0 && distractor_bias <= 1.0)) {
    throw std::invalid_argument("distractor_bias must lie in [0, 1]");
  }
  if (n_distractors < 0) throw std::invalid_argument("n_distractors must be >= 0");
  if (n_distractors + 1 > kNumColors * kNumShapes) {
    throw std::invalid_argument("n_distractors exceeds the number of distinct objects");
  }
  if (grid_size < 3) throw std::invalid_argument("grid_size must be >= 3");
  if (horizon < 1) throw std::invalid_argument("horizon must be >= 1");
}

Scene init_scene(const Intent& intent, const BiasedDatasetConfig& cfg, std::uint64_t episode_seed) {
  cfg.validate();
  Scene scene;
  scene.grid_size = cfg.grid_size;
  scene.zones = default_zones(cfg.grid_size);

  std::vector<Cell> free_cells;
  for (int y = 0; y < cfg.grid_size; ++y) {
    for (int x = 0; x < cfg.grid_size; ++x) {
      if (!scene.in_any_zone({x, y})) free_cells.push_back({x, y});
    }
  }
  const int n_objects = cfg.n_distractors + 1;
  if (n_objects > static_cast<int>(free_cells.size())) {
    throw std::invalid_argument("init_scene: " + std::to_string(n_objects) + " objects exceed " +
                                std::to_string(free_cells.size()) + " free cells");
  }

  Rng rng(episode_seed);
  const bool want_target_nearest = rng.bernoulli(cfg.distractor_bias);
  if (!want_target_nearest && cfg.n_distractors == 0) {
    throw std::invalid_argument("init_scene: distractor_bias < 1 needs at least one distractor");
  }

  // Distinct (color, shape) pairs for the distractors, none equal to the target's.
  std::vector<int> pairs;
  const int target_pair = static_cast<int>(intent.color) * kNumShapes + static_cast<int>(intent.shape);
  for (int p = 0; p < kNumColors * kNumShapes; ++p) {
    if (p != target_pair) pairs.push_back(p);
  }
  rng.shuffle(pairs);

  std::vector<int> ids(n_objects);
  for (int i = 0; i < n_objects; ++i) ids[i] = i;
  rng.shuffle(ids);
  const int target_id = ids[0];

  scene.objects.resize(n_objects);
  for (int i = 0; i < n_objects; ++i) {
    auto& o = scene.objects[i];
    o.id = ids[i];
    if (i == 0) {
      o.color = intent.color;
      o.shape = intent.shape;
    } else {
      o.color = static_cast<Color>(pairs[i - 1] / kNumShapes);
      o.shape = static_cast<Shape>(pairs[i - 1] % kNumShapes);
    }
  }
  std::sort(scene.objects.begin(), scene.objects.end(),
            [](const SceneObject& a, const SceneObject& b) { return a.id < b.id; });

  for (int attempt = 0; attempt < 100000; ++attempt) {
    std::vector<Cell> cells = free_cells;
    rng.shuffle(cells);
    for (int i = 0; i < n_objects; ++i) scene.objects[i].cell = cells[i];
    std::vector<Cell> gripper_cells;
    for (int y = 0; y < cfg.grid_size; ++y) {
      for (int x = 0; x < cfg.grid_size; ++x) {
        if (scene.object_at({x, y}) == nullptr) gripper_cells.push_back({x, y});
      }
    }
    if (gripper_cells.empty()) continue;
    scene.gripper = rng.pick(gripper_cells);
    if ((nearest_object(scene) == target_id) == want_target_nearest) {
      scene.validate();
      return scene;
    }
  }
  throw std::invalid_argument("init_scene: could not satisfy the nearest-object constraint");
}

namespace {

// BFS distances to `goal` over in-bounds cells not in `blocked`.
std::vector<int> distance_field(const Scene& scene, Cell goal, const std::vector<Cell>& blocked) {
  const int n = scene.grid_size;
  std::vector<int> dist(n * n, -1);
  auto is_blocked = [&](Cell c) {
    return std::find(blocked.begin(), blocked.end(), c) != blocked.end();
  };
  if (is_blocked(goal)) return dist;
  std::deque<Cell> queue{goal};
  dist[goal.y * n + goal.x] = 0;
  while (!queue.empty()) {
    const Cell c = queue.front();
    queue.pop_front();
    for (auto k : {PrimitiveKind::Right, PrimitiveKind::Left, PrimitiveKind::Up, PrimitiveKind::Down}) {
      const Cell nb = moved(c, k);
      if (!scene.in_bounds(nb) || is_blocked(nb) || dist[nb.y * n + nb.x] >= 0) continue;
      dist[nb.y * n + nb.x] = dist[c.y * n + c.x] + 1;
      queue.push_back(nb);
    }
  }
  return dist;
}

// Moves from `from` to `goal`: horizontal first whenever that shortens the path.
std::vector<PrimitiveKind> path_moves(const Scene& scene, Cell from, Cell goal,
                                      const std::vector<Cell>& blocked) {
  const int n = scene.grid_size;
  const auto dist = distance_field(scene, goal, blocked);
  if (dist[from.y * n + from.x] < 0) throw ExpertFailure("expert: destination unreachable");
  std::vector<PrimitiveKind> moves;
  Cell c = from;
  while (!(c == goal)) {
    const int here = dist[c.y * n + c.x];
    std::vector<PrimitiveKind> order;
    if (goal.x > c.x) order.push_back(PrimitiveKind::Right);
    if (goal.x < c.x) order.push_back(PrimitiveKind::Left);
    if (goal.y > c.y) order.push_back(PrimitiveKind::Up);
    if (goal.y < c.y) order.push_back(PrimitiveKind::Down);
    for (auto k : {PrimitiveKind::Right, PrimitiveKind::Left, PrimitiveKind::Up, PrimitiveKind::Down}) {
      if (std::find(order.begin(), order.end(), k) == order.end()) order.push_back(k);
    }
    bool advanced = false;
    for (auto k : order) {
      const Cell nb = moved(c, k);
      if (scene.in_bounds(nb) && dist[nb.y * n + nb.x] == here - 1) {
        moves.push_back(k);
        c = nb;
        advanced = true;
        break;
      }
    }
    if (!advanced) throw ExpertFailure("expert: distance field inconsistent");
  }
  return moves;
}

}  // namespace

std::vector<PrimitiveKind> expert_plan(const Scene& scene, const Intent& intent, int step_budget) {
  std::vector<PrimitiveKind> plan;
  if (check_success(scene, intent)) return plan;
  const int target_id = scene.find(intent.color, intent.shape)->id;

  Scene s = scene;
  auto run = [&](PrimitiveKind k) {
    plan.push_back(k);
    s = step(s, k);
  };

  if (s.held && *s.held != target_id) run(PrimitiveKind::Release);
  if (!s.held) {
    const Cell target_cell = s.object_by_id(target_id)->cell;
    for (auto k : path_moves(s, s.gripper, target_cell, {})) run(k);
    run(PrimitiveKind::Grasp);
  }

  // Carry to the reachable free zone cell with the shortest path.
  std::vector<Cell> blocked;
  for (const auto& o : s.objects) {
    if (o.id != target_id) blocked.push_back(o.cell);
  }
  const int n = s.grid_size;
  std::optional<Cell> goal;
  int best = std::numeric_limits<int>::max();
  for (const Cell& zc : s.zones[static_cast<int>(intent.destination)]) {
    const auto dist = distance_field(s, zc, blocked);
    const int d = dist[s.gripper.y * n + s.gripper.x];
    if (d >= 0 && d < best) {
      best = d;
      goal = zc;
    }
  }
  if (!goal) throw ExpertFailure("expert: no free cell in " + std::string(to_string(intent.destination)));
  for (auto k : path_moves(s, s.gripper, *goal, blocked)) run(k);
  run(PrimitiveKind::Release);

  if (static_cast<int>(plan.size()) > step_budget) {
    throw ExpertFailure("expert: plan of " + std::to_string(plan.size()) + " steps exceeds budget " +
                        std::to_string(step_budget));
  }
  return plan;
}

Trajectory expert_rollout(const Scene& scene, const Intent& intent, int horizon) {
  if (horizon < 1) throw std::invalid_argument("expert_rollout: horizon must be >= 1");
  Trajectory traj;
  traj.intent = intent;
  const auto plan = expert_plan(scene, intent);

  Scene s = scene;
  if (plan.empty()) {
    Frame f{s, {}};
    for (int i = 0; i < horizon; ++i) f.chunk.entries.push_back(encode_primitive(PrimitiveKind::Noop, s.held.has_value()));
    traj.frames.push_back(std::move(f));
    traj.success = true;
    return traj;
  }

  for (std::size_t start = 0; start < plan.size(); start += horizon) {
    Frame f{s, {}};
    for (int i = 0; i < horizon; ++i) {
      const std::size_t idx = start + i;
      const PrimitiveKind k = idx < plan.size() ? plan[idx] : PrimitiveKind::Noop;
      s = step(s, k);
      f.chunk.entries.push_back(encode_primitive(k, s.held.has_value()));
    }
    traj.frames.push_back(std::move(f));
  }
  traj.success = check_success(s, intent);
  return traj;
}

Scene replay(const Trajectory& trajectory) {
  if (trajectory.frames.empty()) throw std::invalid_argument("replay: empty trajectory");
  Scene s = trajectory.frames.front().scene;
  for (std::size_t i = 0; i < trajectory.frames.size(); ++i) {
    if (!(s == trajectory.frames[i].scene)) {
      throw std::logic_error("replay: snapshot " + std::to_string(i) + " not reproduced");
    }
    for (const auto& e : trajectory.frames[i].chunk.entries) s = step(s, quantize(e, s.held.has_value()));
  }
  return s;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

nlohmann::json to_json(const Intent& z) {
  return {{"verb", to_string(z.verb)},
          {"color", to_string(z.color)},
          {"shape", to_string(z.shape)},
          {"destination", to_string(z.destination)}};
}

Intent intent_from_json(const nlohmann::json& j) {
  Intent z;
  if (j.at("verb").get<std::string>() != "put") throw std::invalid_argument("intent: unknown verb");
  z.color = color_from_string(j.at("color").get<std::string>());
  z.shape = shape_from_string(j.at("shape").get<std::string>());
  z.destination = destination_from_string(j.at("destination").get<std::string>());
  return z;
}

nlohmann::json to_json(const Scene& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : s.objects) {
    objs.push_back({{"id", o.id},
                    {"color", to_string(o.color)},
                    {"shape", to_string(o.shape)},
                    {"cell", {o.cell.x, o.cell.y}}});
  }
  nlohmann::json zones = nlohmann::json::object();
  for (int d = 0; d < kNumDestinations; ++d) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : s.zones[d]) cells.push_back({c.x, c.y});
    zones[std::string(to_string(static_cast<Destination>(d)))] = cells;
  }
  return {{"grid_size", s.grid_size},
          {"objects", objs},
          {"gripper", {s.gripper.x, s.gripper.y}},
          {"held", s.held ? nlohmann::json(*s.held) : nlohmann::json(nullptr)},
          {"zones", zones},
          {"step_count", s.step_count}};
}

Scene scene_from_json(const nlohmann::json& j) {
  Scene s;
  s.grid_size = j.at("grid_size").get<int>();
  for (const auto& o : j.at("objects")) {
    s.objects.push_back({o.at("id").get<int>(), color_from_string(o.at("color").get<std::string>()),
                         shape_from_string(o.at("shape").get<std::string>()),
                         {o.at("cell").at(0).get<int>(), o.at("cell").at(1).get<int>()}});
  }
  s.gripper = {j.at("gripper").at(0).get<int>(), j.at("gripper").at(1).get<int>()};
  if (!j.at("held").is_null()) s.held = j.at("held").get<int>();
  for (int d = 0; d < kNumDestinations; ++d) {
    for (const auto& c : j.at("zones").at(std::string(to_string(static_cast<Destination>(d))))) {
      s.zones[d].push_back({c.at(0).get<int>(), c.at(1).get<int>()});
    }
  }
  s.step_count = j.at("step_count").get<int>();
  s.validate();
  return s;
}

nlohmann::json to_json(const ActionChunk& c) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& e : c.entries) out.push_back({e.dx, e.dy, e.grip});
  return out;
}

ActionChunk chunk_from_json(const nlohmann::json& j) {
  ActionChunk c;
  for (const auto& e : j) c.entries.push_back({e.at(0).get<double>(), e.at(1).get<double>(), e.at(2).get<double>()});
  return c;
}

}  // namespace semsteer
