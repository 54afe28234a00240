#include "semsteer/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "semsteer/format.hpp"
#include "semsteer/rng.hpp"

namespace semsteer {

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

namespace {

void push_offset(std::vector<double>& out, int dx, int dy, double norm) {
  out.push_back(dx / norm);
  out.push_back(dy / norm);
  out.push_back(dx > 0 ? 1.0 : 0.0);
  out.push_back(dx < 0 ? 1.0 : 0.0);
  out.push_back(dy > 0 ? 1.0 : 0.0);
  out.push_back(dy < 0 ? 1.0 : 0.0);
}

}  // namespace

std::vector<double> featurize(const Scene& scene, const FeatureLayout& layout) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(layout.width()));
  const double norm = std::max(scene.grid_size - 1, 1);
  const Cell g = scene.gripper;

  std::vector<const SceneObject*> order;
  for (const auto& o : scene.objects) order.push_back(&o);
  std::sort(order.begin(), order.end(), [&](const SceneObject* a, const SceneObject* b) {
    const int da = manhattan(a->cell, g), db = manhattan(b->cell, g);
    if (da != db) return da < db;
    if (a->cell.x != b->cell.x) return a->cell.x < b->cell.x;
    return a->cell.y < b->cell.y;
  });

  for (int s = 0; s < layout.max_slots; ++s) {
    if (s >= static_cast<int>(order.size())) {
      out.insert(out.end(), FeatureLayout::kSlotWidth, 0.0);
      continue;
    }
    const SceneObject& o = *order[static_cast<std::size_t>(s)];
    out.push_back(1.0);
    for (int c = 0; c < kNumColors; ++c) out.push_back(static_cast<int>(o.color) == c ? 1.0 : 0.0);
    for (int k = 0; k < kNumShapes; ++k) out.push_back(static_cast<int>(o.shape) == k ? 1.0 : 0.0);
    const int dx = o.cell.x - g.x, dy = o.cell.y - g.y;
    push_offset(out, dx, dy, norm);
    out.push_back(dx == 0 && dy == 0 ? 1.0 : 0.0);
    out.push_back(scene.held && *scene.held == o.id ? 1.0 : 0.0);
  }

  for (int d = 0; d < kNumDestinations; ++d) {
    const auto& cells = scene.zones[static_cast<std::size_t>(d)];
    const Cell* best = nullptr;
    int best_dist = 0;
    bool best_free = false;
    for (const auto& c : cells) {
      const auto* occupant = scene.object_at(c);
      const bool free = occupant == nullptr || (scene.held && occupant->id == *scene.held);
      const int dist = manhattan(c, g);
      if (best == nullptr || (free && !best_free) || (free == best_free && dist < best_dist)) {
        best = &c;
        best_dist = dist;
        best_free = free;
      }
    }
    if (best == nullptr) {
      out.insert(out.end(), FeatureLayout::kZoneWidth, 0.0);
      continue;
    }
    push_offset(out, best->x - g.x, best->y - g.y, norm);
    out.push_back(scene.in_zone(static_cast<Destination>(d), g) ? 1.0 : 0.0);
  }

  out.push_back(scene.held ? 1.0 : 0.0);
  out.push_back(g.x / norm);
  out.push_back(g.y / norm);
  return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

namespace {
constexpr double kEmbeddingInit = 0.5;
/// Zone features plus a one-hot of the destination.
constexpr int kZoneInputWidth = FeatureLayout::kZoneWidth + kNumDestinations;
}

nlohmann::json PolicyConfig::to_json() const {
  return {{"d", d},
          {"visual_hidden", visual_hidden},
          {"head_hidden", head_hidden},
          {"horizon", horizon},
          {"max_slots", max_slots},
          {"head_init_scale", head_init_scale}};
}

PolicyConfig PolicyConfig::from_json(const nlohmann::json& j) {
  require_known_keys(j, {"d", "visual_hidden", "head_hidden", "horizon", "max_slots", "head_init_scale"}, "model");
  PolicyConfig c;
  c.d = j.value("d", c.d);
  c.visual_hidden = j.value("visual_hidden", c.visual_hidden);
  c.head_hidden = j.value("head_hidden", c.head_hidden);
  c.horizon = j.value("horizon", c.horizon);
  c.max_slots = j.value("max_slots", c.max_slots);
  c.head_init_scale = j.value("head_init_scale", c.head_init_scale);
  if (c.d < 1 || c.visual_hidden < 1 || c.head_hidden < 1 || c.horizon < 1 || c.max_slots < 1) {
    throw std::invalid_argument("model: widths must be positive");
  }
  return c;
}

nn::Tensor sinusoidal_positions(int max_len, int d) {
  nn::Tensor p({max_len, d});
  for (int pos = 0; pos < max_len; ++pos) {
    for (int i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / d);
      p.at(pos, i) = (i % 2 == 0 ? std::sin(pos * rate) : std::cos(pos * rate));
    }
  }
  return p;
}

PolicyModel::PolicyModel(const PolicyConfig& config, Vocabulary vocab, std::uint64_t seed)
    : config_(config), vocab_(std::move(vocab)) {
  layout_.max_slots = config_.max_slots;
  const int d = config_.d;
  const int chunk = 3 * config_.horizon;
  visual_ = nn::Mlp({{"visual.hidden", layout_.width(), config_.visual_hidden, nn::Activation::Tanh},
                     {"visual.out", config_.visual_hidden, d, nn::Activation::Identity}});
  slot_encoder_ = nn::Mlp({{"visual.slot_hidden", FeatureLayout::kSlotWidth, config_.visual_hidden, nn::Activation::Tanh},
                           {"visual.slot_out", config_.visual_hidden, d, nn::Activation::Identity}});
  zone_encoder_ = nn::Mlp({{"visual.zone_hidden", kZoneInputWidth, config_.visual_hidden, nn::Activation::Tanh},
                           {"visual.zone_out", config_.visual_hidden, d, nn::Activation::Identity}});
  discrete_head_ = nn::Mlp({{"discrete.hidden", kFusionWidth * d, config_.head_hidden, nn::Activation::Tanh},
                            {"discrete.out", config_.head_hidden, kNumPrimitives, nn::Activation::Identity}});
  flow_head_ = nn::Mlp({{"flow.hidden", kFusionWidth * d + chunk + 1, config_.head_hidden, nn::Activation::Tanh},
                        {"flow.out", config_.head_hidden, chunk, nn::Activation::Identity}});

  Rng rng(derive_seed(seed, 0));
  nn::Tensor emb({vocab_.size(), d});
  for (auto& x : emb.data) x = kEmbeddingInit * rng.normal();
  params_.add("language.token_embedding", std::move(emb));
  params_.add("language.null_embedding", nn::Tensor({d}));
  visual_.init(params_, derive_seed(seed, 1));
  params_.add("fusion.query", nn::Tensor({d, d}));
  slot_encoder_.init(params_, derive_seed(seed, 4));
  params_.add("fusion.zone_query", nn::Tensor({d, d}));
  zone_encoder_.init(params_, derive_seed(seed, 5));
  discrete_head_.init(params_, derive_seed(seed, 2), config_.head_init_scale);
  flow_head_.init(params_, derive_seed(seed, 3), config_.head_init_scale);
  // The null embedding, both queries and the psi rows of both heads start at zero.
  for (const char* name : {"discrete.hidden.w", "flow.hidden.w"}) {
    auto& w = params_.value(name);
    for (int r = d; r < 2 * d; ++r) {
      for (auto& x : w.row(r)) x = 0.0;
    }
  }
  bind();
}

void PolicyModel::bind() {
  layout_.max_slots = config_.max_slots;
  visual_.bind(params_);
  slot_encoder_.bind(params_);
  zone_encoder_.bind(params_);
  discrete_head_.bind(params_);
  flow_head_.bind(params_);
  token_embedding_ = params_.index_of("language.token_embedding");
  null_embedding_ = params_.index_of("language.null_embedding");
  query_ = params_.index_of("fusion.query");
  zone_query_ = params_.index_of("fusion.zone_query");
  positions_ = sinusoidal_positions(vocab_.max_len(), config_.d);
}

nn::Tensor PolicyModel::visual_forward(std::span<const double> features, VisualCache& cache) const {
  if (static_cast<int>(features.size()) != layout_.width()) {
    throw nn::ShapeError("embed_visual: feature width " + std::to_string(features.size()) + ", expected " +
                         std::to_string(layout_.width()));
  }
  nn::Tensor phi =
      visual_.forward(params_, nn::Tensor({1, layout_.width()}, std::vector<double>(features.begin(), features.end())),
                      cache.scene);
  // Shared per-slot encoder; its outputs are summed into phi and kept as the
  // keys/values the language query attends over.
  const int slots = layout_.max_slots;
  const auto slot_block = features.first(static_cast<std::size_t>(slots * FeatureLayout::kSlotWidth));
  cache.slot_embed = slot_encoder_.forward(
      params_, nn::Tensor({slots, FeatureLayout::kSlotWidth}, std::vector<double>(slot_block.begin(), slot_block.end())),
      cache.slots);
  cache.present.assign(static_cast<std::size_t>(slots), false);
  for (int s = 0; s < slots; ++s) {
    if (features[static_cast<std::size_t>(s * FeatureLayout::kSlotWidth)] == 0.0) continue;
    cache.present[static_cast<std::size_t>(s)] = true;
    const auto row = cache.slot_embed.row(s);
    for (std::size_t i = 0; i < row.size(); ++i) phi.data[i] += row[i];
  }
  nn::Tensor zone_in({kNumDestinations, kZoneInputWidth});
  const std::size_t zone_offset = static_cast<std::size_t>(slots * FeatureLayout::kSlotWidth);
  for (int z = 0; z < kNumDestinations; ++z) {
    auto row = zone_in.row(z);
    for (int i = 0; i < FeatureLayout::kZoneWidth; ++i) {
      row[static_cast<std::size_t>(i)] = features[zone_offset + static_cast<std::size_t>(z * FeatureLayout::kZoneWidth + i)];
    }
    row[static_cast<std::size_t>(FeatureLayout::kZoneWidth + z)] = 1.0;
  }
  cache.zone_embed = zone_encoder_.forward(params_, zone_in, cache.zones);
  cache.zone_present.assign(static_cast<std::size_t>(kNumDestinations), true);
  return phi;
}

void PolicyModel::visual_backward(const VisualCache& cache, const nn::Tensor& dphi, const nn::Tensor& dslot_embed,
                                  const nn::Tensor& dzone_embed) {
  visual_.backward(params_, cache.scene, dphi);
  const int slots = layout_.max_slots;
  nn::Tensor dslots({slots, config_.d});
  for (int s = 0; s < slots; ++s) {
    if (!cache.present[static_cast<std::size_t>(s)]) continue;
    auto row = dslots.row(s);
    const auto extra = dslot_embed.row(s);
    for (std::size_t i = 0; i < row.size(); ++i) row[i] = dphi.data[i] + extra[i];
  }
  slot_encoder_.backward(params_, cache.slots, dslots);
  zone_encoder_.backward(params_, cache.zones, dzone_embed);
}

std::vector<double> PolicyModel::embed_visual_features(std::span<const double> features) const {
  VisualCache cache;
  return visual_forward(features, cache).data;
}

std::vector<double> PolicyModel::embed_visual(const Scene& scene) const {
  return embed_visual_features(featurize(scene, layout_));
}

std::vector<double> PolicyModel::embed_language(const Condition& condition) const {
  const int d = config_.d;
  if (!condition) return params_.value(null_embedding_).data;
  std::vector<double> psi(static_cast<std::size_t>(d), 0.0);
  const auto& emb = params_.value(token_embedding_);
  int n = 0;
  for (std::size_t t = 0; t < condition->ids.size() && static_cast<int>(t) < vocab_.max_len(); ++t) {
    const int id = condition->ids[t];
    if (id == kPadId) continue;
    if (id < 0 || id >= vocab_.size()) throw std::out_of_range("embed_language: token id out of range");
    const auto e = emb.row(id);
    const auto p = positions_.row(static_cast<int>(t));
    for (int i = 0; i < d; ++i) psi[static_cast<std::size_t>(i)] += std::tanh(e[static_cast<std::size_t>(i)] + p[static_cast<std::size_t>(i)]);
    ++n;
  }
  if (n > 0) {
    for (auto& x : psi) x /= n;
  }
  return psi;
}

PolicyModel::Attention PolicyModel::attend(const nn::Tensor& keys, const std::vector<bool>& present, int query,
                                           std::span<const double> psi) const {
  const int d = config_.d;
  const int slots = static_cast<int>(present.size());
  const auto& wq = params_.value(query);
  Attention a;
  a.query.assign(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < d; ++i) {
    double acc = 0.0;
    for (int j = 0; j < d; ++j) acc += wq.at(i, j) * psi[static_cast<std::size_t>(j)];
    a.query[static_cast<std::size_t>(i)] = acc;
  }
  a.weights.assign(static_cast<std::size_t>(slots), 0.0);
  double top = -std::numeric_limits<double>::infinity();
  for (int s = 0; s < slots; ++s) {
    if (!present[static_cast<std::size_t>(s)]) continue;
    const auto u = keys.row(s);
    double e = 0.0;
    for (int i = 0; i < d; ++i) e += a.query[static_cast<std::size_t>(i)] * u[static_cast<std::size_t>(i)];
    a.weights[static_cast<std::size_t>(s)] = e;
    top = std::max(top, e);
  }
  double z = 0.0;
  for (int s = 0; s < slots; ++s) {
    auto& w = a.weights[static_cast<std::size_t>(s)];
    w = present[static_cast<std::size_t>(s)] ? std::exp(w - top) : 0.0;
    z += w;
  }
  a.pooled.assign(static_cast<std::size_t>(d), 0.0);
  if (z == 0.0) return a;
  for (int s = 0; s < slots; ++s) {
    auto& w = a.weights[static_cast<std::size_t>(s)];
    w /= z;
    const auto u = keys.row(s);
    for (int i = 0; i < d; ++i) a.pooled[static_cast<std::size_t>(i)] += w * u[static_cast<std::size_t>(i)];
  }
  return a;
}

void PolicyModel::attend_backward(const nn::Tensor& keys, const std::vector<bool>& present, int query,
                                  std::span<const double> psi, const Attention& a, std::span<const double> dpooled,
                                  nn::Tensor& dkeys, std::span<double> dpsi) {
  const int d = config_.d;
  const int slots = static_cast<int>(present.size());
  std::vector<double> dw(static_cast<std::size_t>(slots), 0.0);
  double mean = 0.0;
  for (int s = 0; s < slots; ++s) {
    if (!present[static_cast<std::size_t>(s)]) continue;
    const auto u = keys.row(s);
    auto du = dkeys.row(s);
    const double w = a.weights[static_cast<std::size_t>(s)];
    double g = 0.0;
    for (int i = 0; i < d; ++i) {
      g += dpooled[static_cast<std::size_t>(i)] * u[static_cast<std::size_t>(i)];
      du[static_cast<std::size_t>(i)] += w * dpooled[static_cast<std::size_t>(i)];
    }
    dw[static_cast<std::size_t>(s)] = g;
    mean += w * g;
  }
  std::vector<double> dquery(static_cast<std::size_t>(d), 0.0);
  for (int s = 0; s < slots; ++s) {
    if (!present[static_cast<std::size_t>(s)]) continue;
    const double de = a.weights[static_cast<std::size_t>(s)] * (dw[static_cast<std::size_t>(s)] - mean);
    const auto u = keys.row(s);
    auto du = dkeys.row(s);
    for (int i = 0; i < d; ++i) {
      dquery[static_cast<std::size_t>(i)] += de * u[static_cast<std::size_t>(i)];
      du[static_cast<std::size_t>(i)] += de * a.query[static_cast<std::size_t>(i)];
    }
  }
  const auto& wq = params_.value(query);
  auto& gq = params_.grad(query);
  for (int i = 0; i < d; ++i) {
    const double g = dquery[static_cast<std::size_t>(i)];
    for (int j = 0; j < d; ++j) {
      gq.at(i, j) += g * psi[static_cast<std::size_t>(j)];
      dpsi[static_cast<std::size_t>(j)] += g * wq.at(i, j);
    }
  }
}

std::vector<double> PolicyModel::head_input(std::span<const double> phi, std::span<const double> psi,
                                            const Attention& objects, const Attention& zones) const {
  std::vector<double> in(phi.begin(), phi.end());
  in.insert(in.end(), psi.begin(), psi.end());
  in.insert(in.end(), objects.pooled.begin(), objects.pooled.end());
  in.insert(in.end(), zones.pooled.begin(), zones.pooled.end());
  return in;
}

std::vector<double> PolicyModel::score(const Scene& scene, const Condition& condition) const {
  VisualCache visual;
  const auto phi = visual_forward(featurize(scene, layout_), visual);
  const auto psi = embed_language(condition);
  const auto objects = attend(visual.slot_embed, visual.present, query_, psi);
  const auto zones = attend(visual.zone_embed, visual.zone_present, zone_query_, psi);
  nn::MlpCache cache;
  return discrete_head_
      .forward(params_, nn::Tensor({1, kFusionWidth * config_.d}, head_input(phi.data, psi, objects, zones)), cache)
      .data;
}

std::vector<double> PolicyModel::flow_velocity(const Scene& scene, const Condition& condition,
                                               std::span<const double> chunk_state, double tau) const {
  if (static_cast<int>(chunk_state.size()) != chunk_width()) {
    throw nn::ShapeError("flow_velocity: chunk width " + std::to_string(chunk_state.size()) + ", expected " +
                         std::to_string(chunk_width()));
  }
  VisualCache visual;
  const auto phi = visual_forward(featurize(scene, layout_), visual);
  const auto psi = embed_language(condition);
  const auto objects = attend(visual.slot_embed, visual.present, query_, psi);
  const auto zones = attend(visual.zone_embed, visual.zone_present, zone_query_, psi);
  auto in = head_input(phi.data, psi, objects, zones);
  in.insert(in.end(), chunk_state.begin(), chunk_state.end());
  in.push_back(tau);
  nn::MlpCache cache;
  const int width = static_cast<int>(in.size());
  return flow_head_.forward(params_, nn::Tensor({1, width}, std::move(in)), cache).data;
}

std::vector<double> PolicyModel::realization_losses(const TrainExample& ex, std::span<const Condition> conditions,
                                                    double grad_weight, LossHeads heads) {
  const int d = config_.d;
  const int chunk = chunk_width();
  const bool use_discrete = heads != LossHeads::Flow;
  const bool use_flow = heads != LossHeads::Discrete;

  VisualCache visual_cache;
  const nn::Tensor phi = visual_forward(ex.features, visual_cache);
  nn::Tensor dphi({1, d});
  nn::Tensor dslot_embed({layout_.max_slots, d});
  nn::Tensor dzone_embed({kNumDestinations, d});

  std::vector<double> x_tau, velocity_target;
  if (use_flow) {
    if (static_cast<int>(ex.target_chunk.size()) != chunk || static_cast<int>(ex.noise.size()) != chunk) {
      throw nn::ShapeError("flow loss: target chunk / noise width mismatch");
    }
    for (int i = 0; i < chunk; ++i) {
      const auto k = static_cast<std::size_t>(i);
      x_tau.push_back((1.0 - ex.tau) * ex.noise[k] + ex.tau * ex.target_chunk[k]);
      velocity_target.push_back(ex.target_chunk[k] - ex.noise[k]);
    }
  }

  auto& emb = params_.value(token_embedding_);
  auto& emb_grad = params_.grad(token_embedding_);
  std::vector<double> losses;
  losses.reserve(conditions.size());
  for (const auto& condition : conditions) {
    const auto psi = embed_language(condition);
    const auto objects = attend(visual_cache.slot_embed, visual_cache.present, query_, psi);
    const auto zones = attend(visual_cache.zone_embed, visual_cache.zone_present, zone_query_, psi);
    std::vector<double> dpsi(static_cast<std::size_t>(d), 0.0);
    std::vector<double> dpooled(static_cast<std::size_t>(d), 0.0);
    std::vector<double> dzones(static_cast<std::size_t>(d), 0.0);
    double loss = 0.0;
    // Splits the head-input gradient into its phi / psi / pooled blocks.
    auto scatter = [&](const nn::Tensor& din) {
      for (int i = 0; i < d; ++i) {
        const auto k = static_cast<std::size_t>(i);
        dphi.data[k] += din.data[k];
        dpsi[k] += din.data[static_cast<std::size_t>(d) + k];
        dpooled[k] += din.data[static_cast<std::size_t>(2 * d) + k];
        dzones[k] += din.data[static_cast<std::size_t>(3 * d) + k];
      }
    };

    if (use_discrete) {
      nn::MlpCache cache;
      const nn::Tensor logits =
          discrete_head_.forward(params_, nn::Tensor({1, kFusionWidth * d}, head_input(phi.data, psi, objects, zones)), cache);
      nn::Tensor dlogits;
      const int target = ex.target_primitive;
      loss += nn::softmax_cross_entropy(logits, std::span<const int>(&target, 1), &dlogits);
      for (auto& g : dlogits.data) g *= grad_weight;
      scatter(discrete_head_.backward(params_, cache, dlogits));
    }
    if (use_flow) {
      auto in = head_input(phi.data, psi, objects, zones);
      in.insert(in.end(), x_tau.begin(), x_tau.end());
      in.push_back(ex.tau);
      nn::MlpCache cache;
      const int width = static_cast<int>(in.size());
      const nn::Tensor v = flow_head_.forward(params_, nn::Tensor({1, width}, std::move(in)), cache);
      nn::Tensor dv({1, chunk});
      double sq = 0.0;
      for (int i = 0; i < chunk; ++i) {
        const auto k = static_cast<std::size_t>(i);
        const double diff = v.data[k] - velocity_target[k];
        sq += diff * diff;
        dv.data[k] = 2.0 * diff / chunk * grad_weight;
      }
      loss += sq / chunk;
      scatter(flow_head_.backward(params_, cache, dv));
    }
    attend_backward(visual_cache.slot_embed, visual_cache.present, query_, psi, objects, dpooled, dslot_embed, dpsi);
    attend_backward(visual_cache.zone_embed, visual_cache.zone_present, zone_query_, psi, zones, dzones, dzone_embed,
                    dpsi);

    if (!condition) {
      auto& g = params_.grad(null_embedding_).data;
      for (int i = 0; i < d; ++i) g[static_cast<std::size_t>(i)] += dpsi[static_cast<std::size_t>(i)];
    } else {
      int n = 0;
      for (int id : condition->ids) n += id != kPadId ? 1 : 0;
      n = std::min(n, vocab_.max_len());
      if (n > 0) {
        for (std::size_t t = 0; t < condition->ids.size() && static_cast<int>(t) < vocab_.max_len(); ++t) {
          const int id = condition->ids[t];
          if (id == kPadId) continue;
          const auto e = emb.row(id);
          auto ge = emb_grad.row(id);
          const auto p = positions_.row(static_cast<int>(t));
          for (int i = 0; i < d; ++i) {
            const auto k = static_cast<std::size_t>(i);
            const double h = std::tanh(e[k] + p[k]);
            ge[k] += dpsi[k] * (1.0 - h * h) / n;
          }
        }
      }
    }
    losses.push_back(loss);
  }
  visual_backward(visual_cache, dphi, dslot_embed, dzone_embed);
  return losses;
}

nlohmann::json PolicyModel::to_json() const {
  return {{"config", config_.to_json()},
          {"vocab", vocab_.words()},
          {"max_len", vocab_.max_len()},
          {"params", params_.to_json()}};
}

PolicyModel PolicyModel::from_json(const nlohmann::json& j) {
  const PolicyConfig cfg = PolicyConfig::from_json(j.at("config"));
  Vocabulary vocab(j.at("vocab").get<std::vector<std::string>>(), j.at("max_len").get<int>());
  PolicyModel m(cfg, std::move(vocab), 0);
  m.params_.load_json(j.at("params"));
  m.bind();
  return m;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

double mle_loss(RealizationLossModel& model, std::span<const TrainExample> batch, std::span<const Condition> conditions,
                LossHeads heads) {
  if (batch.empty()) throw std::invalid_argument("mle_loss: empty batch");
  if (conditions.size() != batch.size()) throw std::invalid_argument("mle_loss: one condition per example required");
  const double b = static_cast<double>(batch.size());
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto losses = model.realization_losses(batch[i], conditions.subspan(i, 1), 1.0 / b, heads);
    total += losses.front();
  }
  const double loss = total / b;
  if (!std::isfinite(loss)) throw nn::NonFiniteError("mle_loss: non-finite loss");
  return loss;
}

NeighborhoodFn grammar_neighborhood(const Vocabulary& vocab, const Grammar& g) {
  return [&vocab, &g](const TrainExample& ex, int k, std::uint64_t seed) {
    const auto nb = neighborhood(ex.intent, k, seed, g);
    std::vector<Condition> out;
    out.reserve(nb.instructions.size());
    for (const auto& l : nb.instructions) out.emplace_back(vocab.tokenize(l));
    return out;
  };
}

double expected_semantic_loss(RealizationLossModel& model, std::span<const TrainExample> batch, int k,
                              std::uint64_t seed, const NeighborhoodFn& nb, LossHeads heads) {
  if (k < 1) throw std::invalid_argument("expected_semantic_loss: K must be >= 1");
  if (batch.empty()) throw std::invalid_argument("expected_semantic_loss: empty batch");
  const double b = static_cast<double>(batch.size());
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto conditions = nb(batch[i], k, derive_seed(seed, i));
    if (static_cast<int>(conditions.size()) != k) throw std::logic_error("neighborhood returned the wrong size");
    const auto losses = model.realization_losses(batch[i], conditions, 1.0 / (b * k), heads);
    double sum = 0.0;
    for (double l : losses) sum += l;
    total += sum / k;
  }
  const double loss = total / b;
  if (!std::isfinite(loss)) throw nn::NonFiniteError("expected_semantic_loss: non-finite loss");
  return loss;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

std::vector<Episode> generate_episodes(const BiasedDatasetConfig& cfg, const Grammar& g,
                                       const std::vector<Intent>& intents, DatasetSummary* summary) {
  cfg.validate();
  if (intents.empty()) throw std::invalid_argument("generate_episodes: empty intent list");
  std::vector<Episode> out;
  DatasetSummary s;
  int nearest = 0;
  for (int i = 0; i < cfg.n_episodes; ++i) {
    const std::uint64_t es = derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
    Rng rng(es);
    const Intent z = intents[rng.below(intents.size())];
    const Scene scene = init_scene(z, cfg, derive_seed(es, 2));
    try {
      Episode e{z, realize(z, derive_seed(es, 1), g), expert_rollout(scene, z, cfg.horizon)};
      if (nearest_object(scene) == scene.find(z.color, z.shape)->id) ++nearest;
      out.push_back(std::move(e));
      ++s.written;
    } catch (const ExpertFailure&) {
      ++s.skipped;
    }
  }
  s.target_nearest_fraction = s.written > 0 ? static_cast<double>(nearest) / s.written : 0.0;
  if (summary != nullptr) *summary = s;
  return out;
}

nlohmann::json episode_to_json(const Episode& e) {
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : e.trajectory.frames) frames.push_back({{"scene", to_json(f.scene)}, {"chunk", to_json(f.chunk)}});
  return {{"v", 1},
          {"intent", to_json(e.intent)},
          {"instruction", e.instruction.text},
          {"frames", frames},
          {"success", e.trajectory.success}};
}

Episode episode_from_json(const nlohmann::json& j) {
  if (j.at("v").get<int>() != 1) throw std::invalid_argument("dataset: unsupported record version");
  Episode e;
  e.intent = intent_from_json(j.at("intent"));
  e.instruction = Instruction(j.at("instruction").get<std::string>());
  e.trajectory.intent = e.intent;
  for (const auto& f : j.at("frames")) {
    e.trajectory.frames.push_back({scene_from_json(f.at("scene")), chunk_from_json(f.at("chunk"))});
  }
  e.trajectory.success = j.value("success", true);
  return e;
}

DatasetSummary generate_dataset(const BiasedDatasetConfig& cfg, const std::string& path, const Grammar& g,
                                const std::vector<Intent>& intents) {
  DatasetSummary summary;
  const auto episodes = generate_episodes(cfg, g, intents, &summary);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write dataset file '" + path + "'");
  for (const auto& e : episodes) out << episode_to_json(e).dump() << '\n';
  if (!out) throw std::runtime_error("write failed for dataset file '" + path + "'");
  return summary;
}

std::vector<Episode> read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset file '" + path + "'");
  std::vector<Episode> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(episode_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& ex) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return out;
}

std::vector<TrainExample> build_examples(std::span<const Episode> episodes, const Vocabulary& vocab,
                                         const FeatureLayout& layout, int horizon) {
  std::vector<TrainExample> out;
  for (const auto& ep : episodes) {
    if (ep.trajectory.frames.empty()) continue;
    std::vector<ChunkEntry> entries;
    for (const auto& f : ep.trajectory.frames) entries.insert(entries.end(), f.chunk.entries.begin(), f.chunk.entries.end());
    const TokenSeq tokens = vocab.tokenize(ep.instruction);

    Scene s = ep.trajectory.frames.front().scene;
    std::vector<Scene> states;
    std::vector<PrimitiveKind> actions;
    for (const auto& e : entries) {
      const PrimitiveKind k = quantize(e, s.held.has_value());
      states.push_back(s);
      actions.push_back(k);
      s = step(s, k);
    }
    const ChunkEntry pad = encode_primitive(PrimitiveKind::Noop, s.held.has_value());
    for (std::size_t t = 0; t < entries.size(); ++t) {
      TrainExample ex;
      ex.features = featurize(states[t], layout);
      ex.intent = ep.intent;
      ex.instruction = tokens;
      ex.target_primitive = static_cast<int>(actions[t]);
      for (int h = 0; h < horizon; ++h) {
        const ChunkEntry& c = t + static_cast<std::size_t>(h) < entries.size() ? entries[t + static_cast<std::size_t>(h)] : pad;
        ex.target_chunk.insert(ex.target_chunk.end(), {c.dx, c.dy, c.grip});
      }
      ex.noise.assign(ex.target_chunk.size(), 0.0);
      out.push_back(std::move(ex));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

std::string_view to_string(TrainMode m) { return m == TrainMode::Mle ? "mle" : "mcsi"; }

TrainMode train_mode_from_string(std::string_view s) {
  if (s == "mle") return TrainMode::Mle;
  if (s == "mcsi") return TrainMode::Mcsi;
  throw std::invalid_argument("unknown training mode '" + std::string(s) + "' (expected mle or mcsi)");
}

void TrainConfig::validate() const {
  schedule.validate();
  if (!(cond_dropout >= 0.0 && cond_dropout < 1.0) && !(cond_dropout == 1.0)) {
    throw std::invalid_argument("train: cond_dropout must lie in [0, 1]");
  }
  if (mode == TrainMode::Mcsi && k < 1) throw std::invalid_argument("train: K must be >= 1 for mcsi");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw std::invalid_argument("train: ema_decay must lie in [0, 1)");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"mode", to_string(mode)},
          {"k", k},
          {"cond_dropout", cond_dropout},
          {"warmup_steps", schedule.warmup_steps},
          {"peak_lr", schedule.peak_lr},
          {"final_lr", schedule.final_lr},
          {"total_steps", schedule.total_steps},
          {"ema_decay", ema_decay},
          {"seed", seed},
          {"batch_size", batch_size},
          {"resample_neighborhoods", resample_neighborhoods},
          {"model", model.to_json()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  require_known_keys(j,
                     {"mode", "k", "cond_dropout", "warmup_steps", "peak_lr", "final_lr", "total_steps", "ema_decay",
                      "seed", "batch_size", "resample_neighborhoods", "model"},
                     "train");
  TrainConfig c;
  if (j.contains("mode")) c.mode = train_mode_from_string(j.at("mode").get<std::string>());
  c.k = j.value("k", c.k);
  c.cond_dropout = j.value("cond_dropout", c.cond_dropout);
  c.schedule.warmup_steps = j.value("warmup_steps", c.schedule.warmup_steps);
  c.schedule.peak_lr = j.value("peak_lr", c.schedule.peak_lr);
  c.schedule.final_lr = j.value("final_lr", c.schedule.final_lr);
  c.schedule.total_steps = j.value("total_steps", c.schedule.total_steps);
  c.ema_decay = j.value("ema_decay", c.ema_decay);
  c.seed = j.value("seed", c.seed);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.resample_neighborhoods = j.value("resample_neighborhoods", c.resample_neighborhoods);
  if (j.contains("model")) c.model = PolicyConfig::from_json(j.at("model"));
  c.validate();
  return c;
}

std::string config_hash(const TrainConfig& cfg) { return hex64(hash_name(cfg.to_json().dump())); }

namespace {

void dump_params(const PolicyModel& m, const std::string& path, int step, double loss) {
  if (path.empty()) return;
  std::ofstream out(path);
  out << nlohmann::json{{"step", step}, {"loss", loss}, {"model", m.to_json()}}.dump() << '\n';
}

}  // namespace

TrainedPolicy train(std::span<const Episode> episodes, const TrainConfig& cfg, const Grammar& g,
                    const PolicyModel* init, const std::string& dump_path) {
  cfg.validate();
  if (episodes.empty()) throw std::invalid_argument("train: empty dataset");

  TrainedPolicy result;
  result.config = cfg;
  result.raw = init != nullptr ? *init : PolicyModel(cfg.model, Vocabulary::from_grammar(g), derive_seed(cfg.seed, 1));
  if (init != nullptr) result.config.model = init->config();
  PolicyModel& model = result.raw;
  const auto examples = build_examples(episodes, model.vocab(), FeatureLayout{model.config().max_slots},
                                       model.config().horizon);
  if (examples.empty()) throw std::invalid_argument("train: dataset holds no steps");
  result.ema = model;

  const auto nb = grammar_neighborhood(model.vocab(), g);
  const std::uint64_t step_stream = derive_seed(cfg.seed, 2);
  const std::uint64_t fixed_nb_stream = derive_seed(cfg.seed, 3);
  nn::AdamState adam;
  const int batch_size = cfg.batch_size;
  const int chunk = model.chunk_width();

  std::vector<TrainExample> batch(static_cast<std::size_t>(batch_size));
  std::vector<std::size_t> picked(static_cast<std::size_t>(batch_size));
  std::vector<bool> dropped(static_cast<std::size_t>(batch_size));

  for (int step = 0; step < cfg.schedule.total_steps; ++step) {
    Rng rng(derive_seed(step_stream, static_cast<std::uint64_t>(step)));
    for (int b = 0; b < batch_size; ++b) {
      const auto i = static_cast<std::size_t>(b);
      picked[i] = rng.below(examples.size());
      batch[i] = examples[picked[i]];
      for (int c = 0; c < chunk; ++c) batch[i].noise[static_cast<std::size_t>(c)] = rng.normal();
      batch[i].tau = rng.uniform();
      dropped[i] = rng.bernoulli(cfg.cond_dropout);
    }
    const std::uint64_t loss_seed = rng.next_u64();

    model.params().zero_grad();
    double loss = 0.0;
    if (cfg.mode == TrainMode::Mle) {
      std::vector<Condition> conditions;
      for (int b = 0; b < batch_size; ++b) {
        const auto i = static_cast<std::size_t>(b);
        conditions.push_back(dropped[i] ? kNullCondition : Condition(batch[i].instruction));
      }
      loss = mle_loss(model, batch, conditions);
    } else {
      std::size_t cursor = 0;
      const NeighborhoodFn with_dropout = [&](const TrainExample& ex, int k, std::uint64_t seed) {
        const std::size_t i = cursor++;
        if (dropped[i]) return std::vector<Condition>(static_cast<std::size_t>(k), kNullCondition);
        const std::uint64_t s = cfg.resample_neighborhoods ? seed : derive_seed(fixed_nb_stream, picked[i]);
        return nb(ex, k, s);
      };
      loss = expected_semantic_loss(model, batch, cfg.k, loss_seed, with_dropout);
    }
    if (!std::isfinite(loss) || loss > kDivergenceLoss) {
      dump_params(model, dump_path, step, loss);
      throw TrainingError("training diverged at step " + std::to_string(step) + " (loss " + format_double(loss) + ")");
    }
    try {
      nn::opt_step(model.params(), step, cfg.schedule, adam);
    } catch (const nn::NonFiniteError& e) {
      dump_params(model, dump_path, step, loss);
      throw TrainingError(std::string("step ") + std::to_string(step) + ": " + e.what());
    }
    // EMA warm-up: the effective decay ramps toward ema_decay over the first steps.
    const double warm = (1.0 + step) / (10.0 + step);
    nn::ema_update(result.ema.params(), model.params(), std::min(cfg.ema_decay, warm));
    result.curve.push_back({step, loss, cfg.schedule.lr(step)});
  }
  return result;
}

void write_loss_csv(const TrainedPolicy& t, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write loss csv '" + path + "'");
  out << "step,loss,lr,mode\n";
  for (const auto& p : t.curve) {
    out << p.step << ',' << format_double(p.loss) << ',' << format_double(p.lr) << ',' << to_string(t.config.mode) << '\n';
  }
}

void save_checkpoint(const TrainedPolicy& t, const std::string& path) {
  nlohmann::json j{{"v", 1},
                   {"kind", "semsteer-policy"},
                   {"config_hash", config_hash(t.config)},
                   {"train_config", t.config.to_json()},
                   {"schedule",
                    {{"warmup_steps", t.config.schedule.warmup_steps},
                     {"peak_lr", t.config.schedule.peak_lr},
                     {"final_lr", t.config.schedule.final_lr},
                     {"total_steps", t.config.schedule.total_steps}}},
                   {"parameter_count", t.raw.params().scalar_count()},
                   {"vocab_size", t.raw.vocab().size()},
                   {"model", t.raw.to_json()},
                   {"ema", t.ema.params().to_json()}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  out << j.dump() << '\n';
  if (!out) throw std::runtime_error("write failed for checkpoint '" + path + "'");
}

TrainedPolicy load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  const auto j = nlohmann::json::parse(in);
  if (j.at("v").get<int>() != 1) throw std::runtime_error("checkpoint '" + path + "': unsupported version");
  TrainedPolicy t;
  t.config = TrainConfig::from_json(j.at("train_config"));
  t.raw = PolicyModel::from_json(j.at("model"));
  t.ema = t.raw;
  t.ema.params().load_json(j.at("ema"));
  if (config_hash(t.config) != j.at("config_hash").get<std::string>()) {
    throw std::runtime_error("checkpoint '" + path + "': config hash mismatch");
  }
  return t;
}

}  // namespace semsteer
