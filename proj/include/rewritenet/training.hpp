#pragma once

// Training loop, evaluation, model files, FLOP accounting and ablation sweeps.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rewritenet/checkpoint.hpp"
#include "rewritenet/error.hpp"
#include "rewritenet/kvconfig.hpp"
#include "rewritenet/model.hpp"
#include "rewritenet/optim.hpp"
#include "rewritenet/rng.hpp"
#include "rewritenet/tasks.hpp"

namespace rewritenet {

namespace fs = std::filesystem;

/// Raised when the loss or a gradient stops being finite; the offending
/// batch has already been dumped next to the metrics log.
class TrainingAborted : public NumericError {
 public:
  using NumericError::NumericError;
};

struct TrainConfig {
  Task task = Task::compression;
  std::string data_dir = "data/compression";
  std::int64_t steps = 20000;
  std::int64_t batch_size = 64;
  AdamConfig adam;
  std::int64_t eval_every = 500;
  std::int64_t eval_limit = 0;  // cap on validation records per evaluation, 0 = all
  std::string checkpoint_dir;   // empty = the run directory
  std::uint64_t seed = 0;
  double clip_norm = 1.0;
  LossKind loss = LossKind::aligned;
  double loss_delta = 1.0;
  double stop_at_valid_em = 2.0;  // stop once validation EM reaches this; > 1 never stops
  bool log_wall_time = false;
  ModelConfig model;

  void validate() const {
    if (steps < 1) throw ConfigError("train: steps must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (eval_every < 1) throw ConfigError("train: eval_every must be >= 1");
    if (eval_limit < 0) throw ConfigError("train: eval_limit must be >= 0");
    if (!(clip_norm >= 0.0)) throw ConfigError("train: clip_norm must be >= 0");
    if (!(loss_delta > 0.0)) throw ConfigError("train: loss_delta must be > 0");
    adam.validate();
    model.validate();
  }

  /// Model vocabulary defaults to the task's symbols when the config omits it.
  static TrainConfig from_kv(KvConfig kv) {
    TrainConfig c;
    c.task = parse_task(kv.get_string("task", "compression"));
    if (!kv.has("vocab")) {
      std::string v;
      for (const auto& s : task_symbols(c.task)) v += (v.empty() ? "" : " ") + s;
      kv.set("vocab", v);
    }
    c.data_dir = kv.get_string("data_dir", "data/" + to_string(c.task));
    c.steps = kv.get_int("steps", 20000);
    c.batch_size = kv.get_int("batch_size", 64);
    c.adam.learning_rate = kv.get_double("learning_rate", 1e-4);
    c.adam.beta1 = kv.get_double("beta1", 0.9);
    c.adam.beta2 = kv.get_double("beta2", 0.999);
    c.adam.epsilon = kv.get_double("epsilon", 1e-8);
    c.eval_every = kv.get_int("eval_every", 500);
    c.eval_limit = kv.get_int("eval_limit", 0);
    c.checkpoint_dir = kv.get_string("checkpoint_dir", "");
    c.seed = kv.get_uint("seed", 0);
    c.clip_norm = kv.get_double("clip_norm", 1.0);
    c.loss = parse_loss_kind(kv.get_string("loss", "aligned"));
    c.loss_delta = kv.get_double("loss_delta", 1.0);
    c.stop_at_valid_em = kv.get_double("stop_at_valid_em", 2.0);
    c.log_wall_time = kv.get_bool("log_wall_time", false);
    c.model = ModelConfig::from_kv(kv);
    kv.finish();
    c.validate();
    return c;
  }

  static TrainConfig load(const fs::path& path) { return from_kv(KvConfig::load(path)); }

  KvConfig to_kv() const {
    KvConfig kv;
    kv.set("task", to_string(task));
    kv.set("data_dir", data_dir);
    kv.set("steps", std::to_string(steps));
    kv.set("batch_size", std::to_string(batch_size));
    kv.set("learning_rate", format_double(adam.learning_rate));
    kv.set("beta1", format_double(adam.beta1));
    kv.set("beta2", format_double(adam.beta2));
    kv.set("epsilon", format_double(adam.epsilon));
    kv.set("eval_every", std::to_string(eval_every));
    kv.set("eval_limit", std::to_string(eval_limit));
    kv.set("checkpoint_dir", checkpoint_dir);
    kv.set("seed", std::to_string(seed));
    kv.set("clip_norm", format_double(clip_norm));
    kv.set("loss", to_string(loss));
    kv.set("loss_delta", format_double(loss_delta));
    kv.set("stop_at_valid_em", format_double(stop_at_valid_em));
    kv.set("log_wall_time", log_wall_time ? "true" : "false");
    model.to_kv(kv);
    return kv;
  }
};

// ---------------------------------------------------------------- model files

inline fs::path model_config_path(const fs::path& checkpoint) { return checkpoint.string() + ".cfg"; }

/// Writes parameters, Adam state and the model config next to each other.
inline void save_model(const Model& model, const fs::path& checkpoint) {
  save_checkpoint(model.parameters(), checkpoint);
  KvConfig kv;
  model.config().to_kv(kv);
  std::ofstream os(model_config_path(checkpoint));
  if (!os) throw DataError("cannot write model config: " + model_config_path(checkpoint).string());
  os << kv.to_string();
}

inline Model load_model(const fs::path& checkpoint) {
  const auto cfg_path = model_config_path(checkpoint);
  if (!fs::exists(cfg_path)) throw DataError("model config not found: " + cfg_path.string());
  auto kv = KvConfig::load(cfg_path);
  auto mc = ModelConfig::from_kv(kv);
  kv.finish();
  Model model(mc, 0);
  load_checkpoint(model.parameters(), checkpoint);
  return model;
}

// ---------------------------------------------------------------- evaluation

struct EncodedRecord {
  TokenIds src, tgt;
};

inline std::vector<EncodedRecord> encode_dataset(const Vocab& vocab, const Dataset& data) {
  std::vector<EncodedRecord> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    try {
      out.push_back({vocab.encode(data[i].src), vocab.encode(data[i].tgt)});
    } catch (const DataError& e) {
      throw DataError("record " + std::to_string(i + 1) + ": " + e.what() + " (vocabulary mismatch)");
    }
  }
  return out;
}

struct EvalResult {
  double em = 0.0;
  std::vector<Tokens> predictions;
  std::size_t truncated = 0;
};

/// Noise and dropout off. `limit` > 0 scores only the first `limit` records.
inline EvalResult evaluate(const Model& model, const Dataset& data, std::size_t limit = 0) {
  if (data.empty()) throw DataError("evaluate: empty dataset");
  const std::size_t n = limit > 0 ? std::min(limit, data.size()) : data.size();
  const Dataset head(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(n));
  const auto enc = encode_dataset(model.vocab(), head);
  EvalResult r;
  std::vector<Tokens> tgts;
  for (std::size_t i = 0; i < n; ++i) {
    const auto fr = model_forward(model, enc[i].src);
    r.truncated += fr.truncated ? 1 : 0;
    r.predictions.push_back(model.vocab().decode(fr.prediction));
    tgts.push_back(head[i].tgt);
  }
  r.em = corpus_em(r.predictions, tgts);
  return r;
}

inline void write_predictions(const fs::path& path, const Dataset& data, const std::vector<Tokens>& preds) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write predictions: " + path.string());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    os << join_tokens(data[i].src) << '\t' << join_tokens(preds[i]) << '\t' << join_tokens(data[i].tgt) << '\n';
  }
}

// ---------------------------------------------------------------- training

struct TrainResult {
  double best_valid_em = -1.0;
  std::int64_t best_step = 0;
  std::int64_t steps_run = 0;
  double last_loss = 0.0;
  fs::path best_checkpoint;
  fs::path metrics_log;
  std::vector<std::string> log_lines;
};

struct TrainData {
  Dataset train, valid, test;
};

inline TrainData load_task_data(const fs::path& dir) {
  TrainData d;
  for (const char* name : {"train", "valid"}) {
    const auto p = dir / (std::string(name) + ".tsv");
    if (!fs::exists(p)) throw DataError("dataset file missing: " + p.string());
  }
  d.train = read_dataset(dir / "train.tsv");
  d.valid = read_dataset(dir / "valid.tsv");
  if (fs::exists(dir / "test.tsv")) d.test = read_dataset(dir / "test.tsv");
  if (d.train.empty()) throw DataError("training set is empty: " + (dir / "train.tsv").string());
  if (d.valid.empty()) throw DataError("validation set is empty: " + (dir / "valid.tsv").string());
  return d;
}

namespace detail {

inline std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

inline void dump_nan_batch(const fs::path& path, std::int64_t step, const Dataset& batch, const std::string& what) {
  std::ofstream os(path);
  os << "# non-finite value at step " << step << ": " << what << "\n";
  for (const auto& r : batch) os << join_tokens(r.src) << '\t' << join_tokens(r.tgt) << '\n';
}

}  // namespace detail

/// Minibatch Adam on the configured loss. Writes config.cfg before the first
/// step, appends `step loss valid_em wall_ms` to metrics.log every
/// eval_every steps and keeps the checkpoint with the best validation EM.
/// `progress` (optional) receives each log line.
inline TrainResult train(const TrainConfig& cfg, const TrainData& data, const fs::path& run_dir,
                         const std::function<void(const std::string&)>& progress = {}) {
  cfg.validate();
  fs::create_directories(run_dir);
  {
    std::ofstream os(run_dir / "config.cfg");
    if (!os) throw DataError("cannot write run config in " + run_dir.string());
    os << cfg.to_kv().to_string();
  }
  const fs::path ckpt_dir = cfg.checkpoint_dir.empty() ? run_dir : fs::path(cfg.checkpoint_dir);
  fs::create_directories(ckpt_dir);

  Model model(cfg.model, Rng::derive(cfg.seed, 0));
  Rng batch_rng(Rng::derive(cfg.seed, 1));
  Rng noise_rng(Rng::derive(cfg.seed, 2));
  const auto train_enc = encode_dataset(model.vocab(), data.train);
  encode_dataset(model.vocab(), data.valid);  // vocabulary check up front

  TrainResult res;
  res.best_checkpoint = ckpt_dir / "best.ckpt";
  res.metrics_log = run_dir / "metrics.log";
  std::ofstream log(res.metrics_log);
  if (!log) throw DataError("cannot write metrics log in " + run_dir.string());

  const auto t0 = std::chrono::steady_clock::now();
  double loss_sum = 0.0;
  std::int64_t loss_count = 0;
  auto& params = model.parameters();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  std::vector<std::size_t> batch(bs);

  for (std::int64_t step = 1; step <= cfg.steps; ++step) {
    for (auto& b : batch) {
      b = static_cast<std::size_t>(batch_rng.integer(0, static_cast<std::int64_t>(train_enc.size()) - 1));
    }
    params.zero_grad();
    double batch_loss = 0.0;
    try {
      for (auto b : batch) {
        ForwardOptions fo;
        fo.training = true;
        fo.rng = &noise_rng;
        const auto fr = model_forward(model, train_enc[b].src, fo);
        const Tensor loss = ops::scale(sequence_loss(model, fr, train_enc[b].tgt, cfg.loss, cfg.loss_delta),
                                       1.0 / static_cast<double>(bs));
        batch_loss += loss.item();
        backward(loss);
      }
      if (!std::isfinite(batch_loss)) throw NumericError("loss is not finite");
      if (cfg.clip_norm > 0.0) clip_grad_norm(params, cfg.clip_norm);
      adam_step(params, cfg.adam);
      for (const auto& [name, p] : params.parameters()) {
        for (double v : p.data()) {
          if (!std::isfinite(v)) throw NumericError("parameter " + name + " is not finite after update");
        }
      }
    } catch (const NumericError& e) {
      Dataset dump;
      for (auto b : batch) dump.push_back(data.train[b]);
      detail::dump_nan_batch(run_dir / "nan_dump.txt", step, dump, e.what());
      throw TrainingAborted("training aborted at step " + std::to_string(step) + ": " + e.what() +
                            " (batch written to " + (run_dir / "nan_dump.txt").string() + ")");
    }
    loss_sum += batch_loss;
    ++loss_count;
    res.steps_run = step;
    res.last_loss = batch_loss;

    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      const auto ev = evaluate(model, data.valid, static_cast<std::size_t>(cfg.eval_limit));
      const double mean_loss = loss_sum / static_cast<double>(loss_count);
      loss_sum = 0.0;
      loss_count = 0;
      const auto wall = cfg.log_wall_time
                            ? std::chrono::duration_cast<std::chrono::milliseconds>(
                                  std::chrono::steady_clock::now() - t0)
                                  .count()
                            : 0;
      const std::string line = std::to_string(step) + " " + detail::fixed(mean_loss, 6) + " " +
                               detail::fixed(ev.em, 4) + " " + std::to_string(wall);
      log << line << '\n' << std::flush;
      res.log_lines.push_back(line);
      if (progress) progress(line);
      if (ev.em > res.best_valid_em) {
        res.best_valid_em = ev.em;
        res.best_step = step;
        save_model(model, res.best_checkpoint);
      }
      if (ev.em >= cfg.stop_at_valid_em) break;
    }
  }
  return res;
}

inline TrainResult train(const TrainConfig& cfg, const fs::path& run_dir,
                         const std::function<void(const std::string&)>& progress = {}) {
  return train(cfg, load_task_data(cfg.data_dir), run_dir, progress);
}

// ---------------------------------------------------------------- FLOPs

enum class ModelKind { rewritenet, transformer, lstm };

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "rewritenet") return ModelKind::rewritenet;
  if (s == "transformer") return ModelKind::transformer;
  if (s == "lstm") return ModelKind::lstm;
  throw ConfigError("unknown model kind '" + s + "' (expected rewritenet, transformer or lstm)");
}

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::rewritenet: return "rewritenet";
    case ModelKind::transformer: return "transformer";
    case ModelKind::lstm: return "lstm";
  }
  return "?";
}

struct FlopParams {
  std::size_t layers = 4;  // K for rewritenet; encoder and decoder depth for the baselines is 2
  std::size_t rules = 32;
  std::size_t pattern_len = 2;
  std::size_t sinkhorn_iters = 10;
  std::size_t vocab = 20;
  std::size_t heads = 4;
  std::size_t ffn = 512;
  std::size_t baseline_layers = 2;
  std::size_t hidden = 256;
};

struct FlopReport {
  ModelKind kind = ModelKind::rewritenet;
  std::size_t n = 0, d = 0, R = 0, Lp = 0, batch = 0;
  double flops = 0.0;
  double attention_flops = 0.0;  // part that grows with n^2 (transformer only)
};

/// Forward-pass FLOPs for one batch, counting a multiply-add as 2. Output
/// length is taken equal to n.
///   rewritenet, per layer and sequence: matching 2nR*Lp*d, Sinkhorn
///     iters*n*(R+1)*4, layer norm 8nd, rewrite 3nd; plus tied output
///     logits 2n*V*d.
///   transformer: per token, encoder layer 8d^2 + 4d*ffn + 4nd, decoder layer
///     16d^2 + 4d*ffn + 8nd, output 2d*V.
///   lstm: 2-layer bidirectional encoder and 2-layer decoder, 8h(in+h) per
///     cell step, dot attention 4nh, output 2h*V.
inline FlopReport flops_estimate(ModelKind kind, std::size_t n, std::size_t d, std::size_t batch,
                                 const FlopParams& p = {}) {
  if (n < 1 || d < 1 || batch < 1) throw ConfigError("flops: n, d and batch must be positive");
  FlopReport r;
  r.kind = kind;
  r.n = n;
  r.d = d;
  r.batch = batch;
  r.R = p.rules;
  r.Lp = p.pattern_len;
  const double N = static_cast<double>(n), D = static_cast<double>(d), B = static_cast<double>(batch);
  const double V = static_cast<double>(p.vocab);
  switch (kind) {
    case ModelKind::rewritenet: {
      const double R = static_cast<double>(p.rules), Lp = static_cast<double>(p.pattern_len);
      const double per_layer = 2.0 * N * R * Lp * D + static_cast<double>(p.sinkhorn_iters) * N * (R + 1.0) * 4.0 +
                               8.0 * N * D + 3.0 * N * D;
      r.flops = B * (static_cast<double>(p.layers) * per_layer + 2.0 * N * V * D);
      break;
    }
    case ModelKind::transformer: {
      const double L = static_cast<double>(p.baseline_layers), F = static_cast<double>(p.ffn);
      const double enc = L * (8.0 * D * D + 4.0 * D * F);
      const double dec = L * (16.0 * D * D + 4.0 * D * F);
      const double attn = L * (4.0 * N * D) + L * (8.0 * N * D);
      r.attention_flops = B * N * attn;
      r.flops = B * N * (enc + dec + 2.0 * D * V) + r.attention_flops;
      break;
    }
    case ModelKind::lstm: {
      const double H = static_cast<double>(p.hidden);
      const auto cell = [&](double in) { return 8.0 * H * (in + H); };
      const double enc = 2.0 * cell(D) + 2.0 * cell(2.0 * H);
      const double dec = cell(D) + cell(H) + 4.0 * N * H + 2.0 * H * V;
      r.attention_flops = B * N * 4.0 * N * H;
      r.flops = B * N * (enc + dec);
      break;
    }
  }
  return r;
}

// ---------------------------------------------------------------- ablations

enum class SweepAxis { rules, layers, residuals };

inline SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "rules") return SweepAxis::rules;
  if (s == "layers") return SweepAxis::layers;
  if (s == "residuals") return SweepAxis::residuals;
  throw ConfigError("unknown sweep axis '" + s + "' (expected rules, layers or residuals)");
}

inline std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::rules: return "rules";
    case SweepAxis::layers: return "layers";
    case SweepAxis::residuals: return "residuals";
  }
  return "?";
}

inline std::vector<std::string> default_sweep_values(SweepAxis a) {
  switch (a) {
    case SweepAxis::rules: return {"4", "16", "32", "64"};
    case SweepAxis::layers: return {"1", "2", "4", "8"};
    case SweepAxis::residuals: return {"on", "off"};
  }
  return {};
}

struct SweepRow {
  std::string axis, value;
  double valid_em = 0.0;
  double test_em = 0.0;
  bool test_scored = false;
  std::int64_t steps = 0;
  bool nan_free = true;
};

/// The base config with one axis changed. For layers, extra layers repeat
/// the first layer's shape and the last layer's shape stays at the top.
inline TrainConfig sweep_cell(const TrainConfig& base, SweepAxis axis, const std::string& value) {
  TrainConfig c = base;
  auto as_count = [&](const std::string& v) {
    try {
      const long x = std::stol(v);
      if (x < 1) throw ConfigError("sweep: value must be >= 1, got " + v);
      return static_cast<std::size_t>(x);
    } catch (const std::logic_error&) {
      throw ConfigError("sweep: value must be an integer, got '" + v + "'");
    }
  };
  switch (axis) {
    case SweepAxis::rules:
      for (auto& l : c.model.layers) l.R = as_count(value);
      break;
    case SweepAxis::layers: {
      const std::size_t K = as_count(value);
      const auto first = base.model.layers.front();
      const auto last = base.model.layers.back();
      c.model.layers.assign(K, first);
      c.model.layers.back() = last;
      break;
    }
    case SweepAxis::residuals:
      if (value != "on" && value != "off") throw ConfigError("sweep: residuals takes on/off, got '" + value + "'");
      c.model.residual = value == "on";
      break;
  }
  return c;
}

inline std::vector<SweepRow> ablation_sweep(const TrainConfig& base, const TrainData& data, SweepAxis axis,
                                            const std::vector<std::string>& values, const fs::path& out_dir,
                                            const std::function<void(const std::string&)>& progress = {}) {
  std::vector<SweepRow> rows;
  for (const auto& v : values) {
    const auto cfg = sweep_cell(base, axis, v);
    SweepRow row{to_string(axis), v};
    const auto cell_dir = out_dir / (to_string(axis) + "-" + v);
    try {
      const auto res = train(cfg, data, cell_dir, progress);
      row.valid_em = res.best_valid_em;
      row.steps = res.steps_run;
      if (!data.test.empty()) {
        row.test_em = evaluate(load_model(res.best_checkpoint), data.test).em;
        row.test_scored = true;
      }
    } catch (const TrainingAborted&) {
      row.nan_free = false;
    }
    rows.push_back(row);
  }
  return rows;
}

inline std::string sweep_table(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "setting" << std::setw(8) << "value" << std::setw(10) << "valid_em"
     << std::setw(10) << "test_em" << std::setw(8) << "steps" << "nan_free\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(12) << r.axis << std::setw(8) << r.value << std::setw(10)
       << detail::fixed(r.valid_em, 4) << std::setw(10) << (r.test_scored ? detail::fixed(r.test_em, 4) : "-")
       << std::setw(8) << r.steps << (r.nan_free ? "yes" : "no") << "\n";
  }
  return os.str();
}

inline std::string sweep_jsonl(const std::vector<SweepRow>& rows) {
  std::string out;
  for (const auto& r : rows) {
    nlohmann::json j{{"axis", r.axis},       {"value", r.value},   {"valid_em", r.valid_em},
                     {"steps", r.steps},     {"nan_free", r.nan_free}};
    j["test_em"] = r.test_scored ? nlohmann::json(r.test_em) : nlohmann::json(nullptr);
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace rewritenet
