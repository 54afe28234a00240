// Command-line front end: dataset generation, training, evaluation, sweeps,
// OOD transfer, the linear oracle, paraphrase consistency and reports.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "semsteer/bench.hpp"
#include "semsteer/config.hpp"
#include "semsteer/format.hpp"
#include "semsteer/linear_oracle.hpp"

namespace fs = std::filesystem;
using namespace semsteer;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string checkpoint;
  std::string suite;
  std::optional<double> gamma;
  std::optional<int> steps;
  std::string head;
  std::optional<int> episodes;
  bool raw = false;
  std::string data;
  std::vector<std::string> inputs;
};

RunConfig resolve(const CommonOptions& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  if (o.seed) {
    c.data.seed = *o.seed;
    c.train.seed = *o.seed;
    c.ood.seed = *o.seed;
  }
  if (!o.suite.empty()) c.eval.suite = split_list(o.suite);
  if (o.gamma) c.eval.gamma = *o.gamma;
  if (o.steps) c.eval.steps = *o.steps;
  if (!o.head.empty()) c.eval.head = decode_head_from_string(o.head);
  if (o.episodes) c.eval.episodes = *o.episodes;
  return c;
}

std::uint64_t eval_seed(const CommonOptions& o) { return o.seed.value_or(0); }

void write_text(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path().empty() ? fs::path(".") : p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
  out << s;
}

std::string model_label(const TrainedPolicy& t, const CommonOptions& o) {
  std::string label = std::string(to_string(t.config.mode));
  if (o.raw) label += "-raw";
  return label;
}

const PolicyModel& pick(const TrainedPolicy& t, const CommonOptions& o) { return o.raw ? t.raw : t.ema; }

TrainedPolicy require_checkpoint(const CommonOptions& o) {
  if (o.checkpoint.empty()) throw std::invalid_argument("--checkpoint is required");
  return load_checkpoint(o.checkpoint);
}

int cmd_gen_data(const CommonOptions& o) {
  const RunConfig c = resolve(o);
  const fs::path path = fs::path(o.out) / "dataset.jsonl";
  fs::create_directories(o.out);
  const auto s = generate_dataset(c.data, path.string());
  std::cout << "wrote " << s.written << " episodes to " << path.string() << " (skipped " << s.skipped
            << ", target-nearest " << format_double(s.target_nearest_fraction) << ")\n";
  return 0;
}

int cmd_train(const CommonOptions& o) {
  const RunConfig c = resolve(o);
  fs::create_directories(o.out);
  const auto episodes = o.data.empty() ? generate_episodes(c.data) : read_dataset(o.data);
  const fs::path dump = fs::path(o.out) / "diverged_state.json";
  const auto t = train(episodes, c.train, Grammar::builtin(), nullptr, dump.string());
  save_checkpoint(t, (fs::path(o.out) / "checkpoint.json").string());
  write_loss_csv(t, (fs::path(o.out) / "loss.csv").string());
  std::cout << "trained " << to_string(c.train.mode) << " for " << c.train.schedule.total_steps
            << " steps; final loss " << format_double(t.curve.back().loss) << "\n";
  return 0;
}

void print_table(const ReportTable& t) {
  std::cout << t.model << " gamma=" << format_double(t.gamma) << " steps=" << t.steps << " head=" << t.head << "\n";
  for (const auto& r : t.rows) {
    std::cout << "  " << r.variant << ": " << r.successes << "/" << r.n << " = " << format_double(r.sr()) << "\n";
  }
  std::cout << "  average: " << format_double(t.average()) << "\n";
}

int cmd_eval(const CommonOptions& o) {
  const RunConfig c = resolve(o);
  const auto t = require_checkpoint(o);
  const auto table = run_suite(pick(t, o), c.eval.suite_spec(eval_seed(o)), model_label(t, o));
  print_table(table);
  emit_report({table}, o.out);
  return 0;
}

int cmd_sweep(const CommonOptions& o) {
  const RunConfig c = resolve(o);
  const auto t = require_checkpoint(o);
  auto gammas = c.eval.gammas;
  auto steps = c.eval.steps_grid;
  if (o.gamma) gammas = {*o.gamma};
  if (o.steps) steps = {*o.steps};
  const auto tables = ablation_sweep(pick(t, o), gammas, steps, c.eval.suite_spec(eval_seed(o)), model_label(t, o));
  for (const auto& tb : tables) print_table(tb);
  emit_report(tables, o.out);
  return 0;
}

int cmd_ood(const CommonOptions& o) {
  const RunConfig c = resolve(o);
  const auto report = ood_protocol(c.ood, c.train, c.data);
  fs::create_directories(o.out);
  write_text(fs::path(o.out) / "ood.json", report.to_json().dump(2) + "\n");
  std::string csv = "mode,steps,task,sr\n";
  for (const auto& b : report.budgets) {
    for (std::size_t h = 0; h < b.task_sr.size(); ++h) {
      csv += report.mode + ',' + std::to_string(b.steps) + ',' + describe(report.holdouts[h]) + ',' +
             format_double(b.task_sr[h]) + '\n';
    }
    csv += report.mode + ',' + std::to_string(b.steps) + ",mean," + format_double(b.mean_sr) + '\n';
  }
  write_text(fs::path(o.out) / "ood.csv", csv);
  std::cout << csv;
  return 0;
}

int cmd_oracle(const CommonOptions& o) {
  OracleOptions opt;
  opt.seed = eval_seed(o);
  const auto report = run_oracle_checks(opt);
  write_text(fs::path(o.out) / "oracle.json", report.dump(2) + "\n");
  std::cout << report.dump(2) << "\n";
  return report["pass"].get<bool>() ? 0 : 1;
}

int cmd_consistency(const CommonOptions& o) {
  const RunConfig c = resolve(o);
  const auto t = require_checkpoint(o);
  const auto& m = pick(t, o);
  SteeringConfig steering;
  steering.gamma = c.eval.gamma;
  const double js = paraphrase_consistency(m, m.vocab(), c.consistency.n_states, c.consistency.k, eval_seed(o), steering);
  const nlohmann::json j{{"model", model_label(t, o)},
                         {"n_states", c.consistency.n_states},
                         {"k", c.consistency.k},
                         {"gamma", c.eval.gamma},
                         {"mean_pairwise_js", js}};
  write_text(fs::path(o.out) / "consistency.json", j.dump(2) + "\n");
  std::cout << j.dump(2) << "\n";
  return 0;
}

// Rebuilds tables from one or more report CSVs and re-emits the report.
int cmd_report(const CommonOptions& o) {
  if (o.inputs.empty()) throw std::invalid_argument("report: pass one or more report CSV files");
  std::vector<ReportTable> tables;
  std::map<std::tuple<std::string, double, int, std::uint64_t>, std::size_t> index;
  for (const auto& path : o.inputs) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    for (const auto& r : records_from_csv(text)) {
      const auto key = std::make_tuple(r.model, r.gamma, r.steps, r.seed);
      auto it = index.find(key);
      if (it == index.end()) {
        ReportTable t;
        t.model = r.model;
        t.gamma = r.gamma;
        t.steps = r.steps;
        t.seed = r.seed;
        it = index.emplace(key, tables.size()).first;
        tables.push_back(std::move(t));
      }
      tables[it->second].rows.push_back({r.variant, static_cast<int>(std::lround(r.sr * r.n)), r.n, 0});
    }
  }
  for (const auto& p : emit_report(tables, o.out)) std::cout << "wrote " << p << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Residual semantic steering testbed"};
  app.require_subcommand(1);
  CommonOptions o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON config file (sections data, train, eval, ood, consistency)")
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Master seed; overrides the seeds in the config");
    sub->add_option("--out", o.out, "Output directory")->capture_default_str();
  };
  auto add_eval = [&](CLI::App* sub) {
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint written by train")->check(CLI::ExistingFile);
    sub->add_option("--suite", o.suite, "Comma list of variants (origin, multi, blank, rand, m2..m8, simple, r0..r4, "
                                        "default, rewrite)");
    sub->add_option("--gamma", o.gamma, "Steering coefficient");
    sub->add_option("--steps", o.steps, "Denoising steps for the flow head");
    sub->add_option("--head", o.head, "Decode head: discrete or flow");
    sub->add_option("--episodes", o.episodes, "Episodes per variant");
    sub->add_flag("--raw", o.raw, "Use the raw weights instead of the EMA weights");
  };

  auto* gen = app.add_subcommand("gen-data", "Write a biased expert dataset (dataset.jsonl)");
  add_common(gen);
  auto* tr = app.add_subcommand("train", "Train a policy (checkpoint.json, loss.csv)");
  add_common(tr);
  tr->add_option("--data", o.data, "Dataset JSONL; generated from the config when omitted")->check(CLI::ExistingFile);
  auto* ev = app.add_subcommand("eval", "Run a perturbation suite");
  add_common(ev);
  add_eval(ev);
  auto* sw = app.add_subcommand("sweep", "Steering coefficient x denoising steps ablation");
  add_common(sw);
  add_eval(sw);
  auto* ood = app.add_subcommand("ood", "Holdout pretraining and few-shot adaptation");
  add_common(ood);
  auto* orc = app.add_subcommand("oracle", "Linear-oracle checks (exit status 1 on failure)");
  add_common(orc);
  auto* con = app.add_subcommand("consistency", "Mean pairwise JS divergence across paraphrases");
  add_common(con);
  add_eval(con);
  auto* rep = app.add_subcommand("report", "Re-emit charts and summary from report CSVs");
  add_common(rep);
  rep->add_option("inputs", o.inputs, "Report CSV files")->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  try {
    if (gen->parsed()) return cmd_gen_data(o);
    if (tr->parsed()) return cmd_train(o);
    if (ev->parsed()) return cmd_eval(o);
    if (sw->parsed()) return cmd_sweep(o);
    if (ood->parsed()) return cmd_ood(o);
    if (orc->parsed()) return cmd_oracle(o);
    if (con->parsed()) return cmd_consistency(o);
    if (rep->parsed()) return cmd_report(o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
