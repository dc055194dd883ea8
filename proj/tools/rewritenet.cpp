// rewritenet command-line driver.
//
// Exit codes: 0 ok, 1 usage, 2 data or config problem, 3 training aborted.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <rewritenet/rewritenet.hpp>

namespace fs = std::filesystem;
using namespace rewritenet;

namespace {

constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kRuntime = 3;

/// Default parent for run directories: $REWRITENET_RUNS, else ./runs.
fs::path runs_root() {
  if (const char* env = std::getenv("REWRITENET_RUNS"); env && *env) return env;
  return "runs";
}

fs::path default_run_dir(const std::string& config, const std::string& suffix = "") {
  return runs_root() / (fs::path(config).stem().string() + suffix);
}

struct GenArgs {
  std::string task = "compression";
  std::string split = "all";
  std::string out;
  std::size_t train_size = 10000, test_size = 1000;
  GenOptions opt;
};

int run_gen_data(const GenArgs& a) {
  const Task task = parse_task(a.task);
  const fs::path out = a.out.empty() ? fs::path("data") / to_string(task) : fs::path(a.out);
  fs::create_directories(out);
  std::vector<std::pair<std::string, std::size_t>> parts;
  if (a.split == "all" || a.split == "train") parts.emplace_back("train", a.train_size);
  if (a.split == "all" || a.split == "valid") parts.emplace_back("valid", a.opt.valid_size);
  if (a.split == "all" || a.split == "test") parts.emplace_back("test", a.test_size);
  if (parts.empty()) throw ConfigError("gen-data: --split must be train, valid, test or all");
  for (const auto& [name, n] : parts) {
    const auto ds = gen_task_split(task, name, n, a.opt);
    write_dataset(out / (name + ".tsv"), ds);
    std::cout << name << ": " << ds.size() << " records -> " << (out / (name + ".tsv")).string() << "\n";
  }
  return 0;
}

int run_train(const std::string& config, std::string out, const std::string& data_dir) {
  auto kv = KvConfig::load(config);
  if (!data_dir.empty()) kv.set("data_dir", data_dir);
  const auto cfg = TrainConfig::from_kv(kv);
  const fs::path run = out.empty() ? default_run_dir(config) : fs::path(out);
  const auto data = load_task_data(cfg.data_dir);
  const auto res = train(cfg, data, run, [](const std::string& l) { std::cout << l << std::endl; });
  std::cout << "best valid_em " << std::fixed << std::setprecision(4) << res.best_valid_em << " at step "
            << res.best_step << "\n";
  if (!data.test.empty()) {
    const auto model = load_model(res.best_checkpoint);
    const auto ev = evaluate(model, data.test);
    write_predictions(run / "test_predictions.tsv", data.test, ev.predictions);
    std::cout << "test_em " << std::fixed << std::setprecision(4) << ev.em << "\n";
    std::ofstream(run / "test_em.txt") << std::fixed << std::setprecision(4) << ev.em << "\n";
  }
  std::cout << "checkpoint " << res.best_checkpoint.string() << "\n";
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& data, std::string predictions, std::size_t limit) {
  const auto model = load_model(checkpoint);
  const auto ds = read_dataset(data);
  const auto ev = evaluate(model, ds, limit);
  if (predictions.empty()) predictions = (fs::path(checkpoint).parent_path() / "predictions.tsv").string();
  const Dataset scored(ds.begin(), ds.begin() + static_cast<std::ptrdiff_t>(ev.predictions.size()));
  write_predictions(predictions, scored, ev.predictions);
  std::cout << "em " << std::fixed << std::setprecision(4) << ev.em << " (" << ev.predictions.size()
            << " records)\npredictions " << predictions << "\n";
  return 0;
}

std::string describe(const std::vector<TokenMatch>& row, const Vocab& vocab) {
  if (row.empty()) return "(empty)";
  std::ostringstream os;
  for (std::size_t i = 0; i < row.size(); ++i) {
    os << (i ? " " : "") << vocab.name(row[i].token) << "(" << std::fixed << std::setprecision(2)
       << row[i].similarity << ")";
  }
  return os.str();
}

int run_inspect(const std::string& checkpoint, const std::string& data, std::size_t limit, bool fired_only) {
  const auto model = load_model(checkpoint);
  std::vector<TokenIds> sources;
  if (!data.empty()) {
    const auto ds = read_dataset(data);
    for (const auto& r : encode_dataset(model.vocab(), ds)) {
      if (limit && sources.size() >= limit) break;
      sources.push_back(r.src);
    }
  }
  const auto reports = inspect_rules(model, sources);
  std::cout << "layer rule fires  pattern -> replacement\n";
  for (const auto& r : reports) {
    if (fired_only && r.fires == 0) continue;
    std::cout << std::setw(5) << r.layer << std::setw(5) << r.rule << std::setw(7) << r.fires << "  "
              << describe(r.pattern, model.vocab()) << " -> " << describe(r.replacement, model.vocab()) << "\n";
  }
  return 0;
}

int run_flops(const std::string& kind, std::size_t n, std::size_t d, std::size_t batch, const FlopParams& p) {
  const auto r = flops_estimate(parse_model_kind(kind), n, d, batch, p);
  std::cout << "model " << to_string(r.kind) << "\nn " << r.n << "\nd " << r.d << "\nbatch " << r.batch;
  if (r.kind == ModelKind::rewritenet) std::cout << "\nR " << r.R << "\nLp " << r.Lp;
  std::cout << "\nflops " << std::setprecision(6) << r.flops << "\ngflops " << std::fixed << std::setprecision(4)
            << r.flops / 1e9 << "\n";
  return 0;
}

int run_fst_check(const std::string& file, std::size_t max_len, double temperature) {
  const auto fst = load_fst(file);
  FstCompileOptions opt;
  opt.temperature = temperature;
  const auto rep = fst_check(fst, max_len, opt);
  for (const auto& m : rep.mismatches) std::cout << "mismatch: " << m << "\n";
  std::cout << (rep.pass() ? "PASS" : "FAIL") << " " << rep.matched << "/" << rep.checked << " inputs up to length "
            << max_len;
  if (rep.undefined) std::cout << " (" << rep.undefined << " rejected by the machine)";
  std::cout << "\n";
  return rep.pass() ? 0 : kRuntime;
}

int run_sweep(const std::string& axis_name, const std::string& config, std::string out,
              std::vector<std::string> values, std::int64_t steps) {
  const auto axis = parse_sweep_axis(axis_name);
  auto base = TrainConfig::load(config);
  if (steps > 0) base.steps = steps;
  if (values.empty()) values = default_sweep_values(axis);
  const fs::path dir = out.empty() ? default_run_dir(config, "-sweep-" + axis_name) : fs::path(out);
  fs::create_directories(dir);
  const auto data = load_task_data(base.data_dir);
  const auto rows = ablation_sweep(base, data, axis, values, dir);
  const auto table = sweep_table(rows);
  std::cout << table;
  std::ofstream(dir / "sweep.txt") << table;
  std::ofstream(dir / "sweep.jsonl") << sweep_jsonl(rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rewritenet: neural parallel string rewriting"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "generate train/valid/test TSV files");
  g->add_option("--task", gen.task, "reversal | scan | compression")->required();
  g->add_option("--split", gen.split, "train | valid | test | all")->capture_default_str();
  g->add_option("--out", gen.out, "output directory (default data/<task>)");
  g->add_option("--seed", gen.opt.seed)->capture_default_str();
  g->add_option("--train-size", gen.train_size)->capture_default_str();
  g->add_option("--valid-size", gen.opt.valid_size)->capture_default_str();
  g->add_option("--test-size", gen.test_size)->capture_default_str();
  g->add_option("--min-len", gen.opt.min_len, "reversal: 10, compression: 1");
  g->add_option("--max-len", gen.opt.max_len, "reversal: 30, compression: 20");
  g->add_option("--vocab-size", gen.opt.vocab_size, "reversal only")->capture_default_str();
  g->add_option("--max-train-action-len", gen.opt.max_train_action_len, "scan length-split threshold")
      ->capture_default_str();
  g->add_flag("--include-cascades", gen.opt.include_cascades, "compression: keep strings with cascades");

  std::string config, out, data, checkpoint, predictions;
  std::size_t limit = 0;
  auto* t = app.add_subcommand("train", "train a model from a config file");
  t->add_option("--config", config)->required()->check(CLI::ExistingFile);
  t->add_option("--out", out, "run directory (default $REWRITENET_RUNS/<config name>)");
  t->add_option("--data", data, "override data_dir");

  auto* e = app.add_subcommand("eval", "exact match of a checkpoint on a dataset");
  e->add_option("--checkpoint", checkpoint)->required();
  e->add_option("--data", data)->required();
  e->add_option("--predictions", predictions, "default: predictions.tsv next to the checkpoint");
  e->add_option("--limit", limit, "score only the first N records");

  bool fired_only = false;
  auto* ir = app.add_subcommand("inspect-rules", "decode learned rules and count fires");
  ir->add_option("--checkpoint", checkpoint)->required();
  ir->add_option("--data", data, "count fires over these sources");
  ir->add_option("--limit", limit, "use only the first N records");
  ir->add_flag("--fired-only", fired_only, "hide rules that never fired");

  std::string kind = "rewritenet";
  std::size_t n = 20, d = 128, batch = 64;
  FlopParams fp;
  auto* f = app.add_subcommand("flops", "analytic forward FLOPs for one batch");
  f->add_option("--model", kind, "rewritenet | transformer | lstm")->capture_default_str();
  f->add_option("--n", n)->capture_default_str();
  f->add_option("--d", d)->capture_default_str();
  f->add_option("--batch", batch)->capture_default_str();
  f->add_option("--rules", fp.rules)->capture_default_str();
  f->add_option("--pattern-len", fp.pattern_len)->capture_default_str();
  f->add_option("--layers", fp.layers)->capture_default_str();
  f->add_option("--sinkhorn-iters", fp.sinkhorn_iters)->capture_default_str();
  f->add_option("--vocab", fp.vocab)->capture_default_str();

  std::string fst_file;
  std::size_t max_len = 8;
  double temperature = 0.1;
  auto* fc = app.add_subcommand("fst-check", "compile an FST and compare on every input up to --max-len");
  fc->add_option("--fst", fst_file)->required();
  fc->add_option("--max-len", max_len)->capture_default_str();
  fc->add_option("--temperature", temperature)->capture_default_str();

  std::string axis;
  std::vector<std::string> values;
  std::int64_t steps = 0;
  auto* s = app.add_subcommand("sweep", "one training run per ablation cell");
  s->add_option("--axis", axis, "rules | layers | residuals")->required();
  s->add_option("--config", config)->required()->check(CLI::ExistingFile);
  s->add_option("--values", values, "cells (default rules 4 16 32 64, layers 1 2 4 8, residuals on off)");
  s->add_option("--steps", steps, "override steps per cell");
  s->add_option("--out", out, "sweep directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    if (*g) return run_gen_data(gen);
    if (*t) return run_train(config, out, data);
    if (*e) return run_eval(checkpoint, data, predictions, limit);
    if (*ir) return run_inspect(checkpoint, data, limit, fired_only);
    if (*f) return run_flops(kind, n, d, batch, fp);
    if (*fc) return run_fst_check(fst_file, max_len, temperature);
    if (*s) return run_sweep(axis, config, out, values, steps);
  } catch (const TrainingAborted& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kRuntime;
  } catch (const NumericError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kRuntime;
  } catch (const DataError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kData;
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kData;
  } catch (const ShapeError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kData;
  } catch (const std::filesystem::filesystem_error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kData;
  }
  return kUsage;
}
