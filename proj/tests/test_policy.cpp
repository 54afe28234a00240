#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "semsteer/policy.hpp"
#include "semsteer/rng.hpp"

using namespace semsteer;
namespace fs = std::filesystem;

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::from_grammar(Grammar::builtin());
  return v;
}

PolicyModel make_model(std::uint64_t seed, double head_scale = 1.0) {
  PolicyConfig c;
  c.head_init_scale = head_scale;
  return PolicyModel(c, vocab(), seed);
}

std::vector<TrainExample> sample_batch(std::uint64_t seed, std::size_t n) {
  BiasedDatasetConfig dc;
  dc.n_episodes = 6;
  dc.seed = seed;
  const auto episodes = generate_episodes(dc);
  auto ex = build_examples(episodes, vocab(), FeatureLayout{}, 4);
  ex.resize(std::min(n, ex.size()));
  Rng rng(derive_seed(seed, 77));
  for (auto& e : ex) {
    for (auto& x : e.noise) x = rng.normal();
    e.tau = rng.uniform();
  }
  return ex;
}

std::vector<Condition> instruction_conditions(const std::vector<TrainExample>& batch) {
  std::vector<Condition> c;
  for (const auto& e : batch) c.emplace_back(e.instruction);
  return c;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("semsteer_test_policy_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

/// Returns fixed per-realization losses, recording the gradient weight.
class FixedLosses : public RealizationLossModel {
 public:
  std::vector<double> values;
  double last_weight = 0.0;
  std::vector<double> realization_losses(const TrainExample&, std::span<const Condition> conditions, double w,
                                         LossHeads) override {
    last_weight = w;
    return std::vector<double>(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(conditions.size()));
  }
};

}  // namespace

TEST_CASE("featurize is id-free") {
  const Intent z{Verb::Put, Color::Red, Shape::Cube, Destination::Bin};
  const Scene s = init_scene(z, BiasedDatasetConfig{}, 3);
  Scene swapped = s;
  std::swap(swapped.objects[1].id, swapped.objects[2].id);
  std::swap(swapped.objects[1], swapped.objects[2]);
  const FeatureLayout layout;
  CHECK(featurize(s, layout) == featurize(swapped, layout));
  CHECK(static_cast<int>(featurize(s, layout).size()) == layout.width());
  const PolicyModel m = make_model(1);
  CHECK(m.embed_visual(s) == m.embed_visual(swapped));
}

TEST_CASE("visual embedding is deterministic and finite on 1000 scenes") {
  const PolicyModel m = make_model(2);
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const Intent z = Intent::from_index(static_cast<int>(seed % 64));
    Scene s = init_scene(z, BiasedDatasetConfig{}, seed);
    if (seed % 3 == 0) s = step(step(s, PrimitiveKind::Left), PrimitiveKind::Grasp);
    const auto phi = m.embed_visual(s);
    CHECK(static_cast<int>(phi.size()) == m.config().d);
    for (double x : phi) CHECK(std::isfinite(x));
    if (seed < 10) CHECK(phi == m.embed_visual(s));
  }
}

TEST_CASE("language embedding conventions") {
  const PolicyModel m = make_model(3);
  CHECK(m.embed_language(kNullCondition) == m.params().value("language.null_embedding").data);
  const auto blank = m.embed_language(vocab().tokenize(Instruction("")));
  CHECK(blank == std::vector<double>(static_cast<std::size_t>(m.config().d), 0.0));
  const auto a = m.embed_language(vocab().tokenize(Instruction("put the red cube")));
  const auto b = m.embed_language(vocab().tokenize(Instruction("cube the put red")));
  CHECK(a != b);
}

TEST_CASE("language embedding is the mean of squashed token plus position rows") {
  const PolicyModel m = make_model(4);
  const TokenSeq t = vocab().tokenize(Instruction("put the red cube"));
  const auto& emb = m.params().value("language.token_embedding");
  const auto pos = sinusoidal_positions(vocab().max_len(), m.config().d);
  const auto psi = m.embed_language(t);
  for (int i = 0; i < m.config().d; ++i) {
    double acc = 0.0;
    for (int p = 0; p < 4; ++p) acc += std::tanh(emb.at(t.ids[static_cast<std::size_t>(p)], i) + pos.at(p, i));
    CHECK(std::abs(psi[static_cast<std::size_t>(i)] - acc / 4.0) < 1e-12);
  }
}

TEST_CASE("zero heads give uniform logits and zero velocity") {
  const PolicyModel m = make_model(5, 0.0);
  const Scene s = init_scene(Intent{}, BiasedDatasetConfig{}, 1);
  const auto logits = m.score(s, vocab().tokenize(Instruction("put the red cube in the bin")));
  for (double x : logits) CHECK(x == logits.front());
  const std::vector<double> x(12, 0.3);
  for (double v : m.flow_velocity(s, kNullCondition, x, 0.5)) CHECK(v == 0.0);
}

TEST_CASE("score is deterministic and the null pass varies with the scene") {
  const PolicyModel m = make_model(6);
  const Scene a = init_scene(Intent{}, BiasedDatasetConfig{}, 1);
  const Scene b = init_scene(Intent{}, BiasedDatasetConfig{}, 2);
  CHECK(m.score(a, kNullCondition) == m.score(a, kNullCondition));
  CHECK(m.score(a, kNullCondition) != m.score(b, kNullCondition));
  CHECK(m.score(a, kNullCondition).size() == 7);
}

TEST_CASE("mle loss of uniform logits is ln 7") {
  PolicyModel m = make_model(7, 0.0);
  const auto batch = sample_batch(1, 8);
  const auto conds = instruction_conditions(batch);
  CHECK(std::abs(mle_loss(m, batch, conds, LossHeads::Discrete) - std::log(7.0)) < 1e-12);
  CHECK_THROWS(mle_loss(m, std::span<const TrainExample>{}, std::span<const Condition>{}));
}

TEST_CASE("flow loss is zero when the target velocity is exact") {
  PolicyModel m = make_model(8, 0.0);
  auto batch = sample_batch(2, 4);
  for (auto& e : batch) e.noise = e.target_chunk;
  CHECK(mle_loss(m, batch, instruction_conditions(batch), LossHeads::Flow) == 0.0);
}

TEST_CASE("expected semantic loss averages fixed per-realization losses") {
  FixedLosses stub;
  stub.values = {1.0, 2.0, 3.0};
  const auto batch = sample_batch(3, 1);
  const NeighborhoodFn three = [](const TrainExample& e, int k, std::uint64_t) {
    return std::vector<Condition>(static_cast<std::size_t>(k), Condition(e.instruction));
  };
  CHECK(expected_semantic_loss(stub, batch, 3, 0, three) == 2.0);
  CHECK(stub.last_weight == doctest::Approx(1.0 / 3.0));
  CHECK_THROWS(expected_semantic_loss(stub, batch, 0, 0, three));
}

TEST_CASE("expected semantic loss with K=1 on the original realization equals mle loss") {
  for (std::uint64_t seed : {1, 2, 3}) {
    PolicyModel m = make_model(seed);
    const auto batch = sample_batch(seed, 6);
    const NeighborhoodFn pinned = [](const TrainExample& e, int, std::uint64_t) {
      return std::vector<Condition>{Condition(e.instruction)};
    };
    for (auto heads : {LossHeads::Discrete, LossHeads::Flow, LossHeads::Both}) {
      m.params().zero_grad();
      const double mle = mle_loss(m, batch, instruction_conditions(batch), heads);
      const auto g_mle = m.params();
      m.params().zero_grad();
      const double esl = expected_semantic_loss(m, batch, 1, 9, pinned, heads);
      CHECK(std::abs(mle - esl) <= 1e-12);
      for (int i = 0; i < m.params().count(); ++i) CHECK(m.params().grad(i).data == g_mle.grad(i).data);
    }
  }
}

TEST_CASE("gradients of both losses pass finite differences on both heads") {
  for (std::uint64_t seed : {11, 12, 13}) {
    PolicyModel m = make_model(seed);
    const auto batch = sample_batch(seed, 4);
    auto conds = instruction_conditions(batch);
    conds[1] = kNullCondition;
    const auto nb = grammar_neighborhood(vocab());
    for (auto heads : {LossHeads::Discrete, LossHeads::Flow}) {
      const nn::LossFn mle = [&](nn::ParamSet&) { return mle_loss(m, batch, conds, heads); };
      CHECK(nn::fd_check(m.params(), mle, 1e-5, 200, seed).max_relative_error < 1e-4);
      const nn::LossFn esl = [&](nn::ParamSet&) { return expected_semantic_loss(m, batch, 3, seed, nb, heads); };
      CHECK(nn::fd_check(m.params(), esl, 1e-5, 200, seed + 1).max_relative_error < 1e-4);
    }
  }
}

TEST_CASE("generate_dataset is byte-identical and calibrated") {
  const fs::path dir = temp_dir("dataset");
  BiasedDatasetConfig cfg;
  cfg.n_episodes = 500;
  cfg.seed = 4;
  const auto summary = generate_dataset(cfg, (dir / "a.jsonl").string());
  generate_dataset(cfg, (dir / "b.jsonl").string());
  CHECK(read_file(dir / "a.jsonl") == read_file(dir / "b.jsonl"));
  CHECK(summary.target_nearest_fraction >= 0.86);
  CHECK(summary.target_nearest_fraction <= 0.94);
  const auto episodes = read_dataset((dir / "a.jsonl").string());
  CHECK(static_cast<int>(episodes.size()) == summary.written);
  for (const auto& e : episodes) CHECK(parses_to(e.instruction, e.intent));
  cfg.n_episodes = 0;
  generate_dataset(cfg, (dir / "empty.jsonl").string());
  CHECK(read_file(dir / "empty.jsonl").empty());
  CHECK_THROWS(read_dataset((dir / "missing.jsonl").string()));
  fs::remove_all(dir);
}

TEST_CASE("build_examples labels replay the expert") {
  BiasedDatasetConfig dc;
  dc.n_episodes = 5;
  const auto episodes = generate_episodes(dc);
  const auto ex = build_examples(episodes, vocab(), FeatureLayout{}, 4);
  std::size_t total = 0;
  for (const auto& e : episodes) total += 4 * e.trajectory.frames.size();
  CHECK(ex.size() == total);
  for (const auto& e : ex) {
    CHECK(e.target_chunk.size() == 12);
    CHECK(e.target_primitive >= 0);
    CHECK(e.target_primitive < kNumPrimitives);
  }
}

TEST_CASE("train config json is strict and round trips") {
  TrainConfig c;
  c.mode = TrainMode::Mcsi;
  c.k = 4;
  c.seed = 9;
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  auto j = c.to_json();
  j["lr"] = 0.1;
  CHECK_THROWS(TrainConfig::from_json(j));
  CHECK_THROWS(TrainConfig::from_json(nlohmann::json{{"mode", "sgd"}}));
  CHECK_THROWS(TrainConfig::from_json(nlohmann::json{{"mode", "mcsi"}, {"k", 0}}));
  CHECK_THROWS(TrainConfig::from_json(nlohmann::json{{"model", {{"width", 3}}}}));
}

TEST_CASE("short training is deterministic and checkpoints round trip") {
  BiasedDatasetConfig dc;
  dc.n_episodes = 40;
  const auto episodes = generate_episodes(dc);
  TrainConfig cfg;
  cfg.schedule = {10, 3e-3, 3e-4, 60};
  cfg.batch_size = 16;
  const auto a = train(episodes, cfg);
  const auto b = train(episodes, cfg);
  CHECK(a.raw.params() == b.raw.params());
  CHECK(a.ema.params() == b.ema.params());
  CHECK(a.curve.size() == 60);
  CHECK(!(a.raw.params() == a.ema.params()));
  const auto blank = a.ema.embed_language(vocab().tokenize(Instruction("")));
  CHECK(blank == std::vector<double>(static_cast<std::size_t>(a.ema.config().d), 0.0));
  CHECK(blank != a.ema.embed_language(kNullCondition));

  const fs::path dir = temp_dir("ckpt");
  save_checkpoint(a, (dir / "c.json").string());
  const auto loaded = load_checkpoint((dir / "c.json").string());
  CHECK(loaded.raw.params() == a.raw.params());
  CHECK(loaded.ema.params() == a.ema.params());
  CHECK(config_hash(loaded.config) == config_hash(a.config));
  save_checkpoint(loaded, (dir / "d.json").string());
  CHECK(read_file(dir / "c.json") == read_file(dir / "d.json"));
  write_loss_csv(a, (dir / "loss.csv").string());
  CHECK(read_file(dir / "loss.csv").rfind("step,loss,lr,mode\n0,", 0) == 0);
  fs::remove_all(dir);
}

TEST_CASE("mcsi training runs and differs from mle") {
  BiasedDatasetConfig dc;
  dc.n_episodes = 20;
  const auto episodes = generate_episodes(dc);
  TrainConfig cfg;
  cfg.schedule = {5, 3e-3, 3e-4, 20};
  cfg.batch_size = 8;
  const auto mle = train(episodes, cfg);
  cfg.mode = TrainMode::Mcsi;
  cfg.k = 3;
  const auto mcsi = train(episodes, cfg);
  CHECK(!(mle.raw.params() == mcsi.raw.params()));
  cfg.resample_neighborhoods = false;
  const auto fixed = train(episodes, cfg);
  CHECK(!(fixed.raw.params() == mcsi.raw.params()));
}

TEST_CASE("full condition dropout yields a condition-blind model") {
  BiasedDatasetConfig dc;
  dc.n_episodes = 30;
  const auto episodes = generate_episodes(dc);
  TrainConfig cfg;
  cfg.cond_dropout = 1.0;
  cfg.schedule = {10, 3e-3, 3e-4, 80};
  cfg.batch_size = 16;
  const auto t = train(episodes, cfg);
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const Intent z = Intent::from_index(static_cast<int>(s % 64));
    const Scene scene = init_scene(z, BiasedDatasetConfig{}, s);
    const auto prior = t.ema.score(scene, kNullCondition);
    for (const char* text : {"put the red cube in the bin", "", "do something"}) {
      const auto c = t.ema.score(scene, vocab().tokenize(Instruction(text)));
      for (std::size_t i = 0; i < c.size(); ++i) worst = std::max(worst, std::abs(c[i] - prior[i]));
    }
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("divergence halts training with a state dump") {
  BiasedDatasetConfig dc;
  dc.n_episodes = 10;
  const auto episodes = generate_episodes(dc);
  TrainConfig cfg;
  cfg.schedule = {0, 1e6, 1e5, 200};
  cfg.batch_size = 8;
  const fs::path dir = temp_dir("diverge");
  const std::string dump = (dir / "state.json").string();
  CHECK_THROWS_AS(train(episodes, cfg, Grammar::builtin(), nullptr, dump), TrainingError);
  CHECK(fs::exists(dump));
  fs::remove_all(dir);
}
