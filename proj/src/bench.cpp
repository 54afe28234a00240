#include "semsteer/bench.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "semsteer/format.hpp"
#include "semsteer/rng.hpp"

namespace semsteer {

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

ModelPolicy::ModelPolicy(const PolicyModel& model, SteeringConfig cfg) : model_(model), cfg_(cfg) { cfg_.validate(); }

std::vector<PrimitiveKind> ModelPolicy::next_actions(const Scene& scene, const Instruction& instruction,
                                                     std::uint64_t seed) const {
  const Condition cond = model_.vocab().tokenize(instruction);
  if (cfg_.head == DecodeHead::Discrete) return {decode_discrete(model_, scene, cond, cfg_).action};

  SteeringConfig c = cfg_;
  c.seed = derive_seed(cfg_.seed, seed);
  const ActionChunk chunk = decode_flow(model_, scene, cond, c);
  std::vector<PrimitiveKind> out;
  Scene s = scene;
  for (const auto& e : chunk.entries) {
    const PrimitiveKind k = quantize(e, s.held.has_value());
    out.push_back(k);
    s = step(s, k);
  }
  return out;
}

std::vector<PrimitiveKind> ExpertPolicy::next_actions(const Scene& scene, const Instruction& instruction,
                                                      std::uint64_t) const {
  const auto parsed = parse(instruction, grammar_);
  if (!std::holds_alternative<Intent>(parsed)) return {PrimitiveKind::Noop};
  const Intent& z = std::get<Intent>(parsed);
  if (scene.find(z.color, z.shape) == nullptr) return {PrimitiveKind::Noop};
  try {
    auto plan = expert_plan(scene, z, kEpisodeBudget);
    if (plan.empty()) return {PrimitiveKind::Noop};
    return plan;
  } catch (const ExpertFailure&) {
    return {PrimitiveKind::Noop};
  }
}

std::vector<PrimitiveKind> RandomPolicy::next_actions(const Scene&, const Instruction&, std::uint64_t seed) const {
  Rng rng(seed);
  return {static_cast<PrimitiveKind>(rng.below(kNumPrimitives))};
}

// ---------------------------------------------------------------------------
// Episodes and suites
// ---------------------------------------------------------------------------

namespace {

bool same_state(const Scene& a, const Scene& b) {
  return a.gripper == b.gripper && a.held == b.held && a.objects == b.objects;
}

}  // namespace

EpisodeResult run_episode(const EpisodePolicy& policy, const Scene& scene, const Intent& intent,
                          const Instruction& instruction, std::uint64_t seed) {
  EpisodeResult r;
  Scene s = scene;
  if (check_success(s, intent)) {
    r.success = true;
    return r;
  }
  int idle = 0;
  for (std::uint64_t call = 0; r.steps_used < kEpisodeBudget; ++call) {
    auto actions = policy.next_actions(s, instruction, derive_seed(seed, call));
    if (actions.empty()) actions.push_back(PrimitiveKind::Noop);
    for (const PrimitiveKind a : actions) {
      if (r.steps_used >= kEpisodeBudget) break;
      Scene next = step(s, a);
      if (same_state(s, next)) ++idle;
      s = std::move(next);
      ++r.steps_used;
      if (check_success(s, intent)) {
        r.success = true;
        break;
      }
    }
    if (r.success) break;
  }
  r.inaction = r.steps_used > 0 && idle >= kInactionFraction * r.steps_used;
  return r;
}

void SuiteSpec::validate() const {
  if (episodes_per_variant < 1) throw std::invalid_argument("suite: episodes_per_variant must be >= 1");
  if (variants.empty()) throw std::invalid_argument("suite: no variants");
  std::set<std::string> names;
  for (const auto& v : variants) {
    v.validate();
    if (!names.insert(v.name()).second) throw std::invalid_argument("suite: duplicate variant '" + v.name() + "'");
  }
  if (!(scene_bias >= 0.0 && scene_bias <= 1.0)) throw std::invalid_argument("suite: scene_bias must be in [0, 1]");
  steering.validate();
}

double ReportTable::average() const {
  if (rows.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : rows) s += r.sr();
  return s / static_cast<double>(rows.size());
}

const ReportRow& ReportTable::row(const std::string& variant) const {
  for (const auto& r : rows) {
    if (r.variant == variant) return r;
  }
  throw std::out_of_range("report table has no variant '" + variant + "'");
}

EpisodeSetup suite_episode(const SuiteSpec& spec, int index, const Grammar& g) {
  const auto& intents = spec.intents.empty() ? Intent::all() : spec.intents;
  const std::uint64_t es = derive_seed(spec.seed, static_cast<std::uint64_t>(index));
  Rng rng(es);
  EpisodeSetup e;
  e.intent = intents[rng.below(intents.size())];
  BiasedDatasetConfig scene_cfg;
  scene_cfg.distractor_bias = spec.scene_bias;
  scene_cfg.n_distractors = spec.n_distractors;
  e.scene = init_scene(e.intent, scene_cfg, derive_seed(es, 2));
  e.instruction = realize(e.intent, derive_seed(es, 1), g);
  return e;
}

ReportTable run_suite(const EpisodePolicy& policy, const SuiteSpec& spec, const std::string& model_name,
                      const Grammar& g) {
  spec.validate();
  ReportTable t;
  t.model = model_name;
  t.gamma = spec.steering.gamma;
  t.steps = spec.steering.denoise_steps;
  t.head = std::string(to_string(spec.steering.head));
  t.seed = spec.seed;

  std::vector<EpisodeSetup> setups;
  setups.reserve(static_cast<std::size_t>(spec.episodes_per_variant));
  for (int i = 0; i < spec.episodes_per_variant; ++i) setups.push_back(suite_episode(spec, i, g));

  for (const auto& variant : spec.variants) {
    ReportRow row;
    row.variant = variant.name();
    const std::uint64_t vs = derive_seed(spec.seed, hash_name(row.variant));
    for (int i = 0; i < spec.episodes_per_variant; ++i) {
      const auto& e = setups[static_cast<std::size_t>(i)];
      const auto idx = static_cast<std::uint64_t>(i);
      const Instruction l = perturb(e.instruction, variant, derive_seed(vs, idx), g);
      const auto r = run_episode(policy, e.scene, e.intent, l, derive_seed(derive_seed(spec.seed, idx), 3));
      ++row.n;
      if (r.success) ++row.successes;
      if (r.inaction) ++row.inaction;
    }
    t.rows.push_back(row);
  }
  return t;
}

ReportTable run_suite(const PolicyModel& model, const SuiteSpec& spec, const std::string& model_name,
                      const Grammar& g) {
  const ModelPolicy policy(model, spec.steering);
  return run_suite(policy, spec, model_name, g);
}

std::vector<ReportTable> ablation_sweep(const PolicyModel& model, const std::vector<double>& gammas,
                                        const std::vector<int>& steps_list, const SuiteSpec& spec,
                                        const std::string& model_name, const Grammar& g) {
  if (gammas.empty() || steps_list.empty()) throw std::invalid_argument("ablation_sweep: empty grid");
  std::vector<ReportTable> out;
  for (const double gamma : gammas) {
    for (const int steps : steps_list) {
      SuiteSpec s = spec;
      s.steering.gamma = gamma;
      s.steering.denoise_steps = steps;
      out.push_back(run_suite(model, s, model_name, g));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// OOD protocol
// ---------------------------------------------------------------------------

std::vector<Intent> OodSpec::default_holdouts() {
  return {Intent{Verb::Put, Color::Red, Shape::Cube, Destination::Bin},
          Intent{Verb::Put, Color::Blue, Shape::Mug, Destination::TopShelf}};
}

std::vector<Intent> retained_intents(const std::vector<Intent>& holdouts) {
  std::vector<Intent> out;
  for (const auto& z : Intent::all()) {
    if (std::find(holdouts.begin(), holdouts.end(), z) == holdouts.end()) out.push_back(z);
  }
  return out;
}

void OodSpec::validate() const {
  if (holdout_intents.empty()) throw std::invalid_argument("ood: no holdout intents");
  const auto kept = retained_intents(holdout_intents);
  for (const auto& h : holdout_intents) {
    const bool object_seen = std::any_of(kept.begin(), kept.end(), [&](const Intent& z) {
      return z.color == h.color && z.shape == h.shape;
    });
    const bool zone_seen =
        std::any_of(kept.begin(), kept.end(), [&](const Intent& z) { return z.destination == h.destination; });
    if (!object_seen || !zone_seen) {
      throw std::invalid_argument("ood: holdout '" + describe(h) + "' is not a compositional shift");
    }
  }
  if (pretrain_steps < 1) throw std::invalid_argument("ood: pretrain_steps must be >= 1");
  if (adaptation_demos < 1) throw std::invalid_argument("ood: adaptation_demos must be >= 1");
  if (eval_episodes < 1) throw std::invalid_argument("ood: eval_episodes must be >= 1");
  for (const int s : adaptation_steps) {
    if (s < 0) throw std::invalid_argument("ood: adaptation steps must be >= 0");
  }
}

nlohmann::json OodReport::to_json() const {
  nlohmann::json j;
  j["mode"] = mode;
  j["holdouts"] = nlohmann::json::array();
  for (const auto& h : holdouts) j["holdouts"].push_back(describe(h));
  j["budgets"] = nlohmann::json::array();
  for (const auto& b : budgets) j["budgets"].push_back({{"steps", b.steps}, {"task_sr", b.task_sr}, {"mean_sr", b.mean_sr}});
  return j;
}

double intent_success_rate(const PolicyModel& model, const Intent& intent, int episodes, std::uint64_t seed,
                           const SteeringConfig& steering, const BiasedDatasetConfig& scene_cfg, const Grammar& g) {
  const ModelPolicy policy(model, steering);
  int wins = 0;
  for (int i = 0; i < episodes; ++i) {
    const std::uint64_t es = derive_seed(seed, static_cast<std::uint64_t>(i));
    const Scene scene = init_scene(intent, scene_cfg, derive_seed(es, 2));
    const Instruction l = realize(intent, derive_seed(es, 1), g);
    if (run_episode(policy, scene, intent, l, derive_seed(es, 3)).success) ++wins;
  }
  return static_cast<double>(wins) / episodes;
}

OodReport ood_protocol(const OodSpec& spec, const TrainConfig& train_cfg, const BiasedDatasetConfig& data_cfg,
                       const Grammar& g) {
  spec.validate();
  OodReport report;
  report.mode = std::string(to_string(train_cfg.mode));
  report.holdouts = spec.holdout_intents;

  BiasedDatasetConfig pre_data = data_cfg;
  pre_data.seed = derive_seed(spec.seed, 1);
  const auto pre_episodes = generate_episodes(pre_data, g, retained_intents(spec.holdout_intents));
  TrainConfig pre_cfg = train_cfg;
  pre_cfg.seed = derive_seed(spec.seed, 2);
  pre_cfg.schedule.total_steps = spec.pretrain_steps;
  pre_cfg.schedule.warmup_steps = std::min(pre_cfg.schedule.warmup_steps, spec.pretrain_steps);
  const TrainedPolicy pre = train(pre_episodes, pre_cfg, g);

  BiasedDatasetConfig demo_data = data_cfg;
  demo_data.n_episodes = spec.adaptation_demos;
  demo_data.seed = derive_seed(spec.seed, 3);
  const auto demos = generate_episodes(demo_data, g, spec.holdout_intents);

  BiasedDatasetConfig scene_cfg = data_cfg;
  const SteeringConfig steering{};
  for (const int budget : spec.adaptation_steps) {
    OodBudgetResult res;
    res.steps = budget;
    TrainedPolicy adapted;
    const PolicyModel* evaluated = &pre.ema;
    if (budget > 0) {
      TrainConfig ft = train_cfg;
      ft.seed = derive_seed(spec.seed, 4 + static_cast<std::uint64_t>(budget));
      ft.schedule.total_steps = budget;
      ft.schedule.warmup_steps = budget / 10;
      ft.schedule.peak_lr = spec.adaptation_peak_lr;
      ft.schedule.final_lr = spec.adaptation_final_lr;
      adapted = train(demos, ft, g, &pre.ema);
      evaluated = &adapted.ema;
    }
    for (std::size_t h = 0; h < spec.holdout_intents.size(); ++h) {
      res.task_sr.push_back(intent_success_rate(*evaluated, spec.holdout_intents[h], spec.eval_episodes,
                                                derive_seed(derive_seed(spec.seed, 5), h), steering, scene_cfg, g));
    }
    double sum = 0.0;
    for (const double v : res.task_sr) sum += v;
    res.mean_sr = sum / static_cast<double>(res.task_sr.size());
    report.budgets.push_back(std::move(res));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Paraphrase consistency
// ---------------------------------------------------------------------------

double js_divergence(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw std::invalid_argument("js_divergence: size mismatch");
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) d += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0.0) d += 0.5 * q[i] * std::log(q[i] / m);
  }
  return std::max(0.0, d);
}

double paraphrase_consistency(const ConditionalScorer& scorer, const Vocabulary& vocab, int n_states, int k,
                              std::uint64_t seed, const SteeringConfig& steering, const Grammar& g) {
  if (k < 2) throw std::invalid_argument("paraphrase_consistency: K must be >= 2");
  if (n_states < 1) throw std::invalid_argument("paraphrase_consistency: n_states must be >= 1");
  BiasedDatasetConfig scene_cfg;
  double total = 0.0;
  for (int i = 0; i < n_states; ++i) {
    const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(i));
    Rng rng(s);
    const Intent z = Intent::all()[rng.below(kNumIntents)];
    const Scene scene = init_scene(z, scene_cfg, derive_seed(s, 1));
    const auto nb = neighborhood(z, k, derive_seed(s, 2), g);
    std::vector<std::vector<double>> dists;
    for (const auto& l : nb.instructions) {
      dists.push_back(decode_discrete(scorer, scene, Condition(vocab.tokenize(l)), steering).distribution.probs);
    }
    double pair_sum = 0.0;
    int pairs = 0;
    for (std::size_t a = 0; a < dists.size(); ++a) {
      for (std::size_t b = a + 1; b < dists.size(); ++b) {
        pair_sum += js_divergence(dists[a], dists[b]);
        ++pairs;
      }
    }
    total += pair_sum / pairs;
  }
  return total / n_states;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

std::vector<ReportRecord> to_records(const std::vector<ReportTable>& tables) {
  std::vector<ReportRecord> out;
  for (const auto& t : tables) {
    for (const auto& r : t.rows) out.push_back({t.model, r.variant, t.gamma, t.steps, r.sr(), r.n, t.seed});
  }
  return out;
}

namespace {

void check_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") != std::string::npos) {
    throw std::invalid_argument("report field '" + s + "' contains a CSV delimiter");
  }
}

constexpr const char* kCsvHeader = "model,variant,gamma,steps,sr,n,seed";

}  // namespace

std::string records_to_csv(const std::vector<ReportRecord>& records) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& r : records) {
    check_field(r.model);
    check_field(r.variant);
    out += r.model + ',' + r.variant + ',' + format_double(r.gamma) + ',' + std::to_string(r.steps) + ',' +
           format_double(r.sr) + ',' + std::to_string(r.n) + ',' + std::to_string(r.seed) + '\n';
  }
  return out;
}

std::vector<ReportRecord> records_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw std::runtime_error("report csv: bad header");
  std::vector<ReportRecord> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 7) throw std::runtime_error("report csv line " + std::to_string(lineno) + ": expected 7 fields");
    ReportRecord r;
    r.model = f[0];
    r.variant = f[1];
    r.gamma = parse_double(f[2]);
    r.steps = std::stoi(f[3]);
    r.sr = parse_double(f[4]);
    r.n = std::stoi(f[5]);
    r.seed = std::stoull(f[6]);
    out.push_back(std::move(r));
  }
  return out;
}

nlohmann::json summary_json(const std::vector<ReportTable>& tables) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& t : tables) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : t.rows) {
      rows.push_back({{"variant", r.variant}, {"successes", r.successes}, {"n", r.n}, {"sr", r.sr()},
                      {"inaction", r.inaction}});
    }
    j.push_back({{"model", t.model},
                 {"gamma", t.gamma},
                 {"steps", t.steps},
                 {"head", t.head},
                 {"seed", t.seed},
                 {"average", t.average()},
                 {"rows", rows}});
  }
  return j;
}

namespace {

constexpr int kWidth = 640;
constexpr int kHeight = 400;
constexpr int kMargin = 50;
const std::vector<std::string> kPalette{"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                        "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string xml_escape(const std::string& s) {
  std::string out;
  for (const char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string svg_open(const std::string& title) {
  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(kWidth) + "\" height=\"" +
       std::to_string(kHeight) + "\" viewBox=\"0 0 " + std::to_string(kWidth) + " " + std::to_string(kHeight) + "\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + std::to_string(kWidth / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" +
       xml_escape(title) + "</text>\n";
  const int bottom = kHeight - kMargin;
  s += "<line x1=\"" + std::to_string(kMargin) + "\" y1=\"" + std::to_string(bottom) + "\" x2=\"" +
       std::to_string(kWidth - kMargin) + "\" y2=\"" + std::to_string(bottom) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + std::to_string(kMargin) + "\" y1=\"" + std::to_string(kMargin) + "\" x2=\"" +
       std::to_string(kMargin) + "\" y2=\"" + std::to_string(bottom) + "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0;
    const double y = bottom - v * (bottom - kMargin);
    s += "<text x=\"" + std::to_string(kMargin - 6) + "\" y=\"" + fmt(y + 4) +
         "\" text-anchor=\"end\" font-size=\"10\">" + fmt(v) + "</text>\n";
  }
  return s;
}

double y_of(double sr) {
  const int bottom = kHeight - kMargin;
  return bottom - sr * (bottom - kMargin);
}

}  // namespace

std::string line_chart_svg(const std::vector<ReportRecord>& records, bool x_is_gamma, const std::string& title) {
  // Series per (model, variant); points sharing an x are averaged.
  std::map<std::pair<std::string, std::string>, std::map<double, std::pair<double, int>>> series;
  std::set<double> xs;
  for (const auto& r : records) {
    const double x = x_is_gamma ? r.gamma : static_cast<double>(r.steps);
    auto& p = series[{r.model, r.variant}][x];
    p.first += r.sr;
    p.second += 1;
    xs.insert(x);
  }
  std::string s = svg_open(title);
  const double x_lo = xs.empty() ? 0.0 : *xs.begin();
  const double x_hi = xs.empty() ? 1.0 : *xs.rbegin();
  const double span = x_hi > x_lo ? x_hi - x_lo : 1.0;
  auto x_of = [&](double x) { return kMargin + (x - x_lo) / span * (kWidth - 3 * kMargin); };
  for (const double x : xs) {
    s += "<text x=\"" + fmt(x_of(x)) + "\" y=\"" + std::to_string(kHeight - kMargin + 16) +
         "\" text-anchor=\"middle\" font-size=\"10\">" + format_double(x) + "</text>\n";
  }
  s += "<text x=\"" + std::to_string(kWidth / 2) + "\" y=\"" + std::to_string(kHeight - 10) +
       "\" text-anchor=\"middle\" font-size=\"12\">" + (x_is_gamma ? "steering coefficient" : "denoising steps") +
       "</text>\n";
  std::size_t idx = 0;
  for (const auto& [key, pts] : series) {
    const std::string& color = kPalette[idx % kPalette.size()];
    std::string path;
    for (const auto& [x, acc] : pts) {
      path += (path.empty() ? "" : " ") + fmt(x_of(x)) + "," + fmt(y_of(acc.first / acc.second));
    }
    s += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\" points=\"" + path + "\"/>\n";
    const double ly = kMargin + 14.0 * static_cast<double>(idx);
    s += "<text x=\"" + std::to_string(kWidth - 2 * kMargin + 5) + "\" y=\"" + fmt(ly) + "\" font-size=\"10\" fill=\"" +
         color + "\">" + xml_escape(key.first + "/" + key.second) + "</text>\n";
    ++idx;
  }
  s += "</svg>\n";
  return s;
}

std::string bar_chart_svg(const std::vector<ReportTable>& tables, const std::string& title) {
  std::string s = svg_open(title);
  std::vector<std::string> variants;
  for (const auto& t : tables) {
    for (const auto& r : t.rows) {
      if (std::find(variants.begin(), variants.end(), r.variant) == variants.end()) variants.push_back(r.variant);
    }
  }
  const double group_w = variants.empty() ? 1.0 : static_cast<double>(kWidth - 3 * kMargin) / variants.size();
  const double bar_w = tables.empty() ? 1.0 : 0.8 * group_w / tables.size();
  for (std::size_t v = 0; v < variants.size(); ++v) {
    const double gx = kMargin + group_w * v;
    s += "<text x=\"" + fmt(gx + group_w / 2) + "\" y=\"" + std::to_string(kHeight - kMargin + 16) +
         "\" text-anchor=\"middle\" font-size=\"10\">" + xml_escape(variants[v]) + "</text>\n";
    for (std::size_t t = 0; t < tables.size(); ++t) {
      const auto& rows = tables[t].rows;
      const auto it = std::find_if(rows.begin(), rows.end(), [&](const ReportRow& r) { return r.variant == variants[v]; });
      if (it == rows.end()) continue;
      const double y = y_of(it->sr());
      s += "<rect x=\"" + fmt(gx + 0.1 * group_w + bar_w * t) + "\" y=\"" + fmt(y) + "\" width=\"" + fmt(bar_w) +
           "\" height=\"" + fmt(kHeight - kMargin - y) + "\" fill=\"" + kPalette[t % kPalette.size()] + "\"/>\n";
    }
  }
  for (std::size_t t = 0; t < tables.size(); ++t) {
    const auto& tb = tables[t];
    const std::string label = tb.model + " g=" + format_double(tb.gamma) + " steps=" + std::to_string(tb.steps);
    s += "<text x=\"" + std::to_string(kWidth - 2 * kMargin + 5) + "\" y=\"" + fmt(kMargin + 14.0 * t) +
         "\" font-size=\"10\" fill=\"" + kPalette[t % kPalette.size()] + "\">" + xml_escape(label) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

namespace {

void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
  out << content;
  if (!out) throw std::runtime_error("write failed for '" + p.string() + "'");
}

}  // namespace

std::vector<std::string> emit_report(const std::vector<ReportTable>& tables, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  std::vector<std::string> written;
  const auto records = to_records(tables);
  write_file(dir / "report.csv", records_to_csv(records));
  written.push_back((dir / "report.csv").string());
  write_file(dir / "summary.json", summary_json(tables).dump(2) + "\n");
  written.push_back((dir / "summary.json").string());
  write_file(dir / "sr_by_variant.svg", bar_chart_svg(tables, "success rate per variant"));
  written.push_back((dir / "sr_by_variant.svg").string());

  std::set<double> gammas;
  std::set<int> steps;
  for (const auto& r : records) {
    gammas.insert(r.gamma);
    steps.insert(r.steps);
  }
  if (gammas.size() > 1) {
    write_file(dir / "sr_vs_gamma.svg", line_chart_svg(records, true, "success rate vs steering coefficient"));
    written.push_back((dir / "sr_vs_gamma.svg").string());
  }
  if (steps.size() > 1) {
    write_file(dir / "sr_vs_steps.svg", line_chart_svg(records, false, "success rate vs denoising steps"));
    written.push_back((dir / "sr_vs_steps.svg").string());
  }
  return written;
}

}  // namespace semsteer
