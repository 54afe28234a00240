#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "semsteer/config.hpp"

using namespace semsteer;
namespace fs = std::filesystem;

namespace {

std::string write_temp(const std::string& name, const std::string& text) {
  const fs::path p = fs::temp_directory_path() / name;
  std::ofstream(p) << text;
  return p.string();
}

}  // namespace

TEST_CASE("empty config gives defaults") {
  const RunConfig c = RunConfig::from_json(nlohmann::json::object());
  CHECK(c.eval.episodes == 200);
  CHECK(c.eval.gamma == 1.0);
  CHECK(c.consistency.k == 8);
  CHECK(c.ood.adaptation_steps == std::vector<int>{10, 100, 1000});
}

TEST_CASE("config round trips through json") {
  RunConfig c;
  c.data.n_episodes = 123;
  c.train.mode = TrainMode::Mcsi;
  c.train.k = 4;
  c.eval.gamma = 1.5;
  c.eval.head = DecodeHead::Flow;
  c.eval.suite = {"origin", "m4"};
  c.ood.pretrain_steps = 77;
  c.consistency.n_states = 9;
  const nlohmann::json j = c.to_json();
  CHECK(RunConfig::from_json(j).to_json() == j);
}

TEST_CASE("unknown keys are rejected in every section") {
  CHECK_THROWS(RunConfig::from_json({{"bogus", 1}}));
  CHECK_THROWS(RunConfig::from_json({{"data", {{"n_episode", 10}}}}));
  CHECK_THROWS(RunConfig::from_json({{"train", {{"learning_rate", 0.1}}}}));
  CHECK_THROWS(RunConfig::from_json({{"eval", {{"gama", 1.5}}}}));
  CHECK_THROWS(RunConfig::from_json({{"ood", {{"budget", 10}}}}));
  CHECK_THROWS(RunConfig::from_json({{"consistency", {{"K", 8}}}}));
}

TEST_CASE("invalid values are rejected") {
  CHECK_THROWS(RunConfig::from_json({{"eval", {{"gamma", -1.0}}}}));
  CHECK_THROWS(RunConfig::from_json({{"eval", {{"suite", "origin,m3"}}}}));
  CHECK_THROWS(RunConfig::from_json({{"eval", {{"head", "beam"}}}}));
  CHECK_THROWS(RunConfig::from_json({{"consistency", {{"k", 1}}}}));
  CHECK_THROWS(RunConfig::from_json({{"data", {{"distractor_bias", 1.5}}}}));
}

TEST_CASE("load reads comments and reports the path on error") {
  const auto good = write_temp("semsteer_cfg_good.json", "{\n // comment\n \"eval\": {\"gamma\": 1.25}\n}\n");
  CHECK(RunConfig::load(good).eval.gamma == 1.25);
  const auto bad = write_temp("semsteer_cfg_bad.json", "{\"eval\": {\"gama\": 1.25}}");
  try {
    RunConfig::load(bad);
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("semsteer_cfg_bad.json") != std::string::npos);
    CHECK(std::string(e.what()).find("gama") != std::string::npos);
  }
  CHECK_THROWS(RunConfig::load("/nonexistent/semsteer.json"));
  fs::remove(good);
  fs::remove(bad);
}

TEST_CASE("split_list trims and drops empties") {
  CHECK(split_list("origin, m2 ,,rand") == std::vector<std::string>{"origin", "m2", "rand"});
  CHECK(split_list("").empty());
}

TEST_CASE("parse_suite expands groups") {
  CHECK(parse_suite({}).size() == 9);
  CHECK(parse_suite({"default"}).size() == 9);
  CHECK(parse_suite({"rewrite"}).size() == rewrite_suite().size());
  const auto s = parse_suite({"origin", "m6"});
  REQUIRE(s.size() == 2);
  CHECK(s[1].mask_rate == 0.6);
  CHECK_THROWS(parse_suite({"nope"}));
}

TEST_CASE("suite spec copies eval settings") {
  EvalConfig e;
  e.suite = {"origin"};
  e.episodes = 7;
  e.gamma = 1.5;
  const SuiteSpec s = e.suite_spec(3);
  CHECK(s.variants.size() == 1);
  CHECK(s.episodes_per_variant == 7);
  CHECK(s.steering.gamma == 1.5);
  CHECK(s.seed == 3);
  e.episodes = 0;
  CHECK_THROWS(e.suite_spec(0));
}
