#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "semsteer/bench.hpp"
#include "semsteer/rng.hpp"

using namespace semsteer;
namespace fs = std::filesystem;

namespace {

class NoopPolicy : public EpisodePolicy {
 public:
  std::vector<PrimitiveKind> next_actions(const Scene&, const Instruction&, std::uint64_t) const override {
    return {PrimitiveKind::Noop};
  }
};

/// Ignores the condition entirely.
class BlindScorer : public ConditionalScorer {
 public:
  std::vector<double> score(const Scene& s, const Condition&) const override {
    return {static_cast<double>(s.gripper.x), 0.5, -1.0, 0.0, 2.0, 0.0, 0.1};
  }
  std::vector<double> flow_velocity(const Scene&, const Condition&, std::span<const double> x,
                                    double) const override {
    return std::vector<double>(x.size(), 0.0);
  }
  int chunk_width() const override { return 12; }
};

PolicyModel random_model(std::uint64_t seed) {
  PolicyModel m(PolicyConfig{}, Vocabulary::from_grammar(Grammar::builtin()), seed);
  Rng rng(derive_seed(seed, 77));
  for (int i = 0; i < m.params().count(); ++i) {
    for (auto& x : m.params().value(i).data) x += 0.3 * rng.normal();
  }
  return m;
}

SuiteSpec small_suite(int episodes) {
  SuiteSpec s;
  s.episodes_per_variant = episodes;
  s.seed = 5;
  return s;
}

/// Minimal well-formedness check: balanced tags, quoted attributes, one root.
bool well_formed_xml(const std::string& text) {
  std::vector<std::string> stack;
  int roots = 0;
  std::size_t i = 0;
  while ((i = text.find('<', i)) != std::string::npos) {
    const std::size_t close = text.find('>', i);
    if (close == std::string::npos) return false;
    std::string tag = text.substr(i + 1, close - i - 1);
    i = close + 1;
    if (tag.empty()) return false;
    if (tag[0] == '?' || tag[0] == '!') continue;
    if (std::count(tag.begin(), tag.end(), '"') % 2 != 0) return false;
    if (tag[0] == '/') {
      if (stack.empty() || stack.back() != tag.substr(1)) return false;
      stack.pop_back();
      continue;
    }
    const bool self_closing = tag.back() == '/';
    const std::string name = tag.substr(0, tag.find_first_of(" \t\n/"));
    if (stack.empty()) ++roots;
    if (!self_closing) stack.push_back(name);
  }
  return stack.empty() && roots == 1;
}

Grammar single_phrasing_grammar() {
  Grammar g = Grammar::builtin();
  g.paraphrase_templates.resize(1);
  g.verbs.resize(1);
  for (auto& c : g.colors) c.resize(1);
  for (auto& s : g.shapes) s.resize(1);
  for (auto& z : g.zones) {
    z.nouns.resize(1);
    z.preps.resize(1);
  }
  return g;
}

}  // namespace

TEST_CASE("expert solves every origin episode") {
  const ExpertPolicy expert;
  const SuiteSpec spec = small_suite(200);
  int ok = 0;
  for (int i = 0; i < 200; ++i) {
    const auto e = suite_episode(spec, i);
    ok += run_episode(expert, e.scene, e.intent, e.instruction, static_cast<std::uint64_t>(i)).success;
  }
  CHECK(ok == 200);
}

TEST_CASE("random policy rarely succeeds") {
  const RandomPolicy random;
  const SuiteSpec spec = small_suite(200);
  int ok = 0;
  for (int i = 0; i < 200; ++i) {
    const auto e = suite_episode(spec, i);
    ok += run_episode(random, e.scene, e.intent, e.instruction, static_cast<std::uint64_t>(i)).success;
  }
  CHECK(static_cast<double>(ok) / 200.0 < 0.1);
}

TEST_CASE("noop policy is flagged as inaction") {
  const NoopPolicy noop;
  const auto e = suite_episode(small_suite(1), 0);
  const auto r = run_episode(noop, e.scene, e.intent, e.instruction, 0);
  CHECK_FALSE(r.success);
  CHECK(r.inaction);
  CHECK(r.steps_used == 50);
  CHECK_FALSE(run_episode(ExpertPolicy{}, e.scene, e.intent, e.instruction, 0).inaction);
}

TEST_CASE("episodes are deterministic") {
  const PolicyModel model = random_model(3);
  SteeringConfig cfg;
  cfg.gamma = 1.5;
  const ModelPolicy policy(model, cfg);
  const auto e = suite_episode(small_suite(1), 4);
  const auto a = run_episode(policy, e.scene, e.intent, e.instruction, 9);
  const auto b = run_episode(policy, e.scene, e.intent, e.instruction, 9);
  CHECK(a.success == b.success);
  CHECK(a.steps_used == b.steps_used);
  CHECK(a.inaction == b.inaction);
}

TEST_CASE("expert suite on origin has success rate one") {
  SuiteSpec spec = small_suite(50);
  spec.variants = {PerturbationSpec::from_name("origin")};
  const auto t = run_suite(ExpertPolicy{}, spec, "expert");
  REQUIRE(t.rows.size() == 1);
  CHECK(t.rows[0].sr() == 1.0);
  CHECK(t.rows[0].n == 50);
}

TEST_CASE("suite average is the mean of its rows") {
  const auto t = run_suite(ExpertPolicy{}, small_suite(20), "expert");
  REQUIRE(t.rows.size() == 9);
  double sum = 0.0;
  for (const auto& r : t.rows) sum += r.sr();
  CHECK(std::abs(t.average() - sum / 9.0) <= 1e-12);
  CHECK(t.row("blank").sr() == 0.0);
  CHECK(t.row("multi").sr() == 1.0);
  CHECK_THROWS(t.row("m3"));
}

TEST_CASE("variant rows do not depend on the other variants") {
  const PolicyModel model = random_model(4);
  SuiteSpec full = small_suite(12);
  const auto all = run_suite(model, full, "m");
  for (const char* name : {"rand", "m4", "multi"}) {
    SuiteSpec one = full;
    one.variants = {PerturbationSpec::from_name(name)};
    const auto t = run_suite(model, one, "m");
    CHECK(t.rows[0].successes == all.row(name).successes);
    CHECK(t.rows[0].inaction == all.row(name).inaction);
  }
}

TEST_CASE("suite validation") {
  SuiteSpec s = small_suite(0);
  CHECK_THROWS(s.validate());
  s = small_suite(1);
  s.variants.clear();
  CHECK_THROWS(s.validate());
  s = small_suite(1);
  s.variants.push_back(PerturbationSpec::from_name("origin"));
  CHECK_THROWS(s.validate());
}

TEST_CASE("gamma one row equals the unguided baseline") {
  const PolicyModel model = random_model(6);
  for (auto head : {DecodeHead::Discrete, DecodeHead::Flow}) {
    SuiteSpec spec = small_suite(10);
    spec.steering.head = head;
    spec.steering.gamma = 1.0;
    const auto guided = run_suite(model, spec, "m");
    spec.steering.guided = false;
    const auto plain = run_suite(model, spec, "m");
    for (std::size_t r = 0; r < guided.rows.size(); ++r) {
      CHECK(guided.rows[r].successes == plain.rows[r].successes);
      CHECK(guided.rows[r].inaction == plain.rows[r].inaction);
    }
  }
}

TEST_CASE("ablation grid emits one table per point") {
  const PolicyModel model = random_model(7);
  SuiteSpec spec = small_suite(2);
  spec.variants = {PerturbationSpec::from_name("origin")};
  spec.steering.head = DecodeHead::Flow;
  const auto tables = ablation_sweep(model, kDefaultGammaGrid, kDefaultStepsGrid, spec, "m");
  REQUIRE(tables.size() == 24);
  CHECK(tables[0].gamma == 1.0);
  CHECK(tables[0].steps == 5);
  CHECK(tables[5].gamma == 1.25);
  CHECK(tables[5].steps == 10);
  CHECK(tables[23].gamma == 3.0);
  CHECK(tables[23].steps == 20);
  CHECK_THROWS(ablation_sweep(model, {}, kDefaultStepsGrid, spec, "m"));
}

TEST_CASE("csv round trip is byte identical") {
  const auto t = run_suite(ExpertPolicy{}, small_suite(5), "expert");
  ReportTable t2 = t;
  t2.gamma = 1.5;
  t2.model = "other";
  const auto records = to_records({t, t2});
  CHECK(records.size() == 18);
  const std::string csv = records_to_csv(records);
  CHECK(records_to_csv(records_from_csv(csv)) == csv);
  const std::string header = records_to_csv({});
  CHECK(std::count(header.begin(), header.end(), '\n') == 1);
  CHECK(records_from_csv(header).empty());
  CHECK_THROWS(records_from_csv("not,a,header\n"));
  ReportTable bad = t;
  bad.model = "a,b";
  CHECK_THROWS(records_to_csv(to_records({bad})));
}

TEST_CASE("charts are well formed svg") {
  const auto t = run_suite(ExpertPolicy{}, small_suite(5), "expert");
  ReportTable t2 = t;
  t2.gamma = 2.0;
  const auto records = to_records({t, t2});
  const auto line = line_chart_svg(records, true, "sr vs gamma");
  CHECK(well_formed_xml(line));
  CHECK(line.find("<svg") != std::string::npos);
  CHECK(well_formed_xml(bar_chart_svg({t, t2}, "bars")));
  CHECK(well_formed_xml(line_chart_svg({}, false, "empty")));
  CHECK_FALSE(well_formed_xml("<svg><g></svg>"));
}

TEST_CASE("emit_report writes csv, summary and charts") {
  const fs::path dir = fs::temp_directory_path() / "semsteer_report_test";
  fs::remove_all(dir);
  const auto t = run_suite(ExpertPolicy{}, small_suite(3), "expert");
  const auto files = emit_report({t}, dir.string());
  CHECK(fs::exists(dir / "report.csv"));
  CHECK(fs::exists(dir / "summary.json"));
  for (const auto& f : files) CHECK(fs::exists(f));
  std::ifstream in(dir / "report.csv");
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == records_to_csv(to_records({t})));
  fs::remove_all(dir);
}

TEST_CASE("js divergence by hand") {
  CHECK(js_divergence({0.5, 0.5}, {0.5, 0.5}) == 0.0);
  CHECK(std::abs(js_divergence({1.0, 0.0}, {0.0, 1.0}) - std::log(2.0)) < 1e-12);
  const std::vector<double> p{0.7, 0.2, 0.1};
  const std::vector<double> q{0.1, 0.3, 0.6};
  const double m0 = 0.4;
  const double m1 = 0.25;
  const double m2 = 0.35;
  const double expect = 0.5 * (0.7 * std::log(0.7 / m0) + 0.2 * std::log(0.2 / m1) + 0.1 * std::log(0.1 / m2)) +
                        0.5 * (0.1 * std::log(0.1 / m0) + 0.3 * std::log(0.3 / m1) + 0.6 * std::log(0.6 / m2));
  CHECK(std::abs(js_divergence(p, q) - expect) < 1e-12);
  CHECK(js_divergence(p, q) == js_divergence(q, p));
  CHECK_THROWS(js_divergence({1.0}, {0.5, 0.5}));
}

TEST_CASE("consistency is zero for a condition blind scorer") {
  const Vocabulary vocab = Vocabulary::from_grammar(Grammar::builtin());
  CHECK(paraphrase_consistency(BlindScorer{}, vocab, 20, 8, 1) == 0.0);
  CHECK_THROWS(paraphrase_consistency(BlindScorer{}, vocab, 20, 1, 1));
}

TEST_CASE("consistency is zero when all paraphrases are identical") {
  const Grammar g = single_phrasing_grammar();
  const PolicyModel model = random_model(8);
  CHECK(paraphrase_consistency(model, model.vocab(), 20, 8, 2, {}, g) == 0.0);
  CHECK(paraphrase_consistency(model, model.vocab(), 20, 8, 2) > 0.0);
}

TEST_CASE("ood holdouts are compositional shifts") {
  const auto holdouts = OodSpec::default_holdouts();
  const auto kept = retained_intents(holdouts);
  CHECK(kept.size() == 62);
  for (const auto& h : holdouts) CHECK(std::find(kept.begin(), kept.end(), h) == kept.end());
  OodSpec spec;
  CHECK_NOTHROW(spec.validate());
  spec.holdout_intents.clear();
  for (int d = 0; d < kNumDestinations; ++d) {
    spec.holdout_intents.push_back(Intent{Verb::Put, Color::Red, Shape::Cube, static_cast<Destination>(d)});
  }
  CHECK_THROWS(spec.validate());
  spec = OodSpec{};
  spec.adaptation_steps = {-1};
  CHECK_THROWS(spec.validate());
}

TEST_CASE("ood protocol reports one score per holdout and budget") {
  OodSpec spec;
  spec.pretrain_steps = 20;
  spec.adaptation_demos = 4;
  spec.adaptation_steps = {0, 5};
  spec.eval_episodes = 3;
  TrainConfig train;
  train.batch_size = 8;
  train.schedule.warmup_steps = 2;
  BiasedDatasetConfig data;
  data.n_episodes = 40;
  const auto report = ood_protocol(spec, train, data);
  REQUIRE(report.budgets.size() == 2);
  for (const auto& b : report.budgets) {
    REQUIRE(b.task_sr.size() == 2);
    CHECK(std::abs(b.mean_sr - 0.5 * (b.task_sr[0] + b.task_sr[1])) < 1e-12);
  }
  CHECK(report.to_json().at("mode") == "mle");
}
