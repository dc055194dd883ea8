#pragma once

// Stacked rewrite layers between a learned token embedding and tied output
// logits, plus the training losses and the rule inspector.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "rewritenet/assignment.hpp"
#include "rewritenet/error.hpp"
#include "rewritenet/kvconfig.hpp"
#include "rewritenet/optim.hpp"
#include "rewritenet/rewrite_layer.hpp"
#include "rewritenet/rng.hpp"
#include "rewritenet/tensor.hpp"

namespace rewritenet {

using TokenIds = std::vector<std::size_t>;

class Vocab {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kEos = 1;
  static constexpr const char* kPadName = "<pad>";
  static constexpr const char* kEosName = "<eos>";

  Vocab() : Vocab(std::vector<std::string>{}) {}

  /// `symbols` excludes the two reserved tokens, which always take ids 0 and 1.
  explicit Vocab(const std::vector<std::string>& symbols) {
    add(kPadName);
    add(kEosName);
    for (const auto& s : symbols) {
      if (s == kPadName || s == kEosName) continue;
      if (index_.count(s)) throw ConfigError("vocab: duplicate token '" + s + "'");
      add(s);
    }
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& t) const { return index_.count(t) != 0; }

  std::size_t id(const std::string& t) const {
    auto it = index_.find(t);
    if (it == index_.end()) throw DataError("token '" + t + "' is not in the vocabulary");
    return it->second;
  }

  const std::string& name(std::size_t id) const {
    if (id >= tokens_.size()) throw DataError("token id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }

  TokenIds encode(const std::vector<std::string>& toks) const {
    TokenIds out;
    out.reserve(toks.size());
    for (const auto& t : toks) out.push_back(id(t));
    return out;
  }

  std::vector<std::string> decode(const TokenIds& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (auto i : ids) out.push_back(name(i));
    return out;
  }

  /// Tokens other than the reserved two, in id order.
  std::vector<std::string> symbols() const { return {tokens_.begin() + 2, tokens_.end()}; }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  void add(const std::string& t) {
    index_[t] = tokens_.size();
    tokens_.push_back(t);
  }
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct LayerShape {
  std::size_t R = 32, Lp = 2, Lq = 1;
  friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

struct ModelConfig {
  Vocab vocab;
  std::size_t d = 64;
  std::vector<LayerShape> layers{4, LayerShape{}};
  bool residual = true;
  double dropout = 0.2;
  double temperature = 1.0;
  int sinkhorn_iters = 10;
  bool gumbel = true;
  std::size_t max_output_len = 64;
  double copy_bias_init = 1.0;
  double embedding_init_sd = 1.0;

  /// K == 0 is accepted here only when `allow_empty` (degenerate test models).
  void validate(bool allow_empty = false) const {
    if (layers.empty() && !allow_empty) throw ConfigError("model: layers must be >= 1");
    if (d < 1) throw ConfigError("model: d must be >= 1");
    if (max_output_len < 1) throw ConfigError("model: max_output_len must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout must be in [0,1)");
    if (!(temperature > 0.0)) throw ConfigError("model: temperature must be > 0");
    if (sinkhorn_iters < 1) throw ConfigError("model: sinkhorn_iters must be >= 1");
    for (const auto& l : layers) {
      if (l.R < 1) throw ConfigError("model: rules per layer must be >= 1");
      if (l.Lp < 1) throw ConfigError("model: pattern length must be >= 1");
    }
  }

  LayerConfig layer_config(std::size_t k) const {
    LayerConfig lc;
    lc.d = d;
    lc.R = layers.at(k).R;
    lc.Lp = layers.at(k).Lp;
    lc.Lq = layers.at(k).Lq;
    lc.residual_enabled = residual;
    lc.dropout = dropout;
    lc.assignment.temperature = temperature;
    lc.assignment.sinkhorn_iters = sinkhorn_iters;
    lc.assignment.gumbel_enabled = gumbel;
    return lc;
  }

  /// Reads the model keys from `kv`. Layer shapes come either from the
  /// uniform keys (layers, rules, pattern_len, replacement_len) or from
  /// layer_shapes = "R:Lp:Lq,R:Lp:Lq,...".
  static ModelConfig from_kv(KvConfig& kv) {
    ModelConfig c;
    c.vocab = Vocab(kv.get_list("vocab", {}));
    c.d = static_cast<std::size_t>(kv.get_int("d", 64));
    const auto K = kv.get_int("layers", 4);
    const auto R = kv.get_int("rules", 32);
    const auto Lp = kv.get_int("pattern_len", 2);
    const auto Lq = kv.get_int("replacement_len", 1);
    if (K < 0 || R < 1 || Lp < 1 || Lq < 0) throw ConfigError("model: layer dimensions out of range");
    const auto shapes = kv.get_string("layer_shapes", "");
    c.layers.clear();
    if (shapes.empty()) {
      c.layers.assign(static_cast<std::size_t>(K),
                      LayerShape{static_cast<std::size_t>(R), static_cast<std::size_t>(Lp),
                                 static_cast<std::size_t>(Lq)});
    } else {
      std::istringstream is(shapes);
      std::string item;
      while (std::getline(is, item, ',')) {
        LayerShape s;
        char c1 = 0, c2 = 0;
        long r = 0, p = 0, q = 0;
        std::istringstream one(detail::trim(item));
        if (!(one >> r >> c1 >> p >> c2 >> q) || c1 != ':' || c2 != ':' || r < 1 || p < 1 || q < 0) {
          throw ConfigError("model: bad layer_shapes entry '" + item + "' (want R:Lp:Lq)");
        }
        s.R = static_cast<std::size_t>(r);
        s.Lp = static_cast<std::size_t>(p);
        s.Lq = static_cast<std::size_t>(q);
        c.layers.push_back(s);
      }
      if (kv.has("layers") && c.layers.size() != static_cast<std::size_t>(K)) {
        throw ConfigError("model: layers = " + std::to_string(K) + " but layer_shapes lists " +
                          std::to_string(c.layers.size()));
      }
    }
    c.residual = kv.get_bool("residual", true);
    c.dropout = kv.get_double("dropout", 0.2);
    c.temperature = kv.get_double("temperature", 1.0);
    c.sinkhorn_iters = static_cast<int>(kv.get_int("sinkhorn_iters", 10));
    c.gumbel = kv.get_bool("gumbel", true);
    c.max_output_len = static_cast<std::size_t>(kv.get_int("max_output_len", 64));
    c.copy_bias_init = kv.get_double("copy_bias_init", 1.0);
    c.embedding_init_sd = kv.get_double("embedding_init_sd", 1.0);
    c.validate();
    return c;
  }

  void to_kv(KvConfig& kv) const {
    std::string v;
    for (const auto& s : vocab.symbols()) v += (v.empty() ? "" : " ") + s;
    kv.set("vocab", v);
    kv.set("d", std::to_string(d));
    kv.set("layers", std::to_string(layers.size()));
    std::string shapes;
    for (const auto& l : layers) {
      if (!shapes.empty()) shapes += ",";
      shapes += std::to_string(l.R) + ":" + std::to_string(l.Lp) + ":" + std::to_string(l.Lq);
    }
    kv.set("layer_shapes", shapes);
    kv.set("residual", residual ? "true" : "false");
    kv.set("dropout", format_double(dropout));
    kv.set("temperature", format_double(temperature));
    kv.set("sinkhorn_iters", std::to_string(sinkhorn_iters));
    kv.set("gumbel", gumbel ? "true" : "false");
    kv.set("max_output_len", std::to_string(max_output_len));
    kv.set("copy_bias_init", format_double(copy_bias_init));
    kv.set("embedding_init_sd", format_double(embedding_init_sd));
  }
};

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed, bool allow_empty = false) : cfg_(std::move(cfg)) {
    cfg_.validate(allow_empty);
    Rng rng(seed);
    const std::size_t d = cfg_.d, V = cfg_.vocab.size();
    const double rule_sd = 1.0 / std::sqrt(static_cast<double>(d));
    params_.add("embedding", Tensor::randn({V, d}, cfg_.embedding_init_sd, rng));
    params_.add("final_norm.gain", Tensor::full({d}, 1.0));
    params_.add("final_norm.bias", Tensor::zeros({d}));
    for (std::size_t k = 0; k < cfg_.layers.size(); ++k) {
      const auto& s = cfg_.layers[k];
      const auto p = prefix(k);
      params_.add(p + "norm.gain", Tensor::full({d}, 1.0));
      params_.add(p + "norm.bias", Tensor::zeros({d}));
      params_.add(p + "patterns", Tensor::randn({s.R, s.Lp, d}, rule_sd, rng));
      params_.add(p + "replacements", Tensor::randn({s.R, s.Lq, d}, rule_sd, rng));
      params_.add(p + "copy_bias", Tensor::scalar(cfg_.copy_bias_init));
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }
  const Vocab& vocab() const { return cfg_.vocab; }
  std::size_t num_layers() const { return cfg_.layers.size(); }
  ParameterRegistry& parameters() { return params_; }
  const ParameterRegistry& parameters() const { return params_; }

  const Tensor& embedding() const { return params_.get("embedding"); }

  LayerParams layer(std::size_t k) const {
    const auto p = prefix(k);
    const auto& s = cfg_.layers.at(k);
    LayerParams lp;
    lp.norm_gain = params_.get(p + "norm.gain");
    lp.norm_bias = params_.get(p + "norm.bias");
    lp.bank.patterns = params_.get(p + "patterns");
    lp.bank.replacements = params_.get(p + "replacements");
    lp.bank.copy_bias = params_.get(p + "copy_bias");
    lp.bank.R = s.R;
    lp.bank.Lp = s.Lp;
    lp.bank.Lq = s.Lq;
    return lp;
  }

  static std::string prefix(std::size_t k) { return "layers." + std::to_string(k) + "."; }

 private:
  ModelConfig cfg_;
  ParameterRegistry params_;
};

struct GateRef {
  std::size_t layer = 0, row = 0, col = 0;
};

/// An output row traced back to the source positions it covers and to the
/// gate entries it passed through.
struct RowTrace {
  std::size_t begin = 0, end = 0;
  std::vector<GateRef> chain;
};

struct DeletionTrace {
  std::size_t begin = 0, end = 0;
  GateRef gate;
};

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;
  const std::vector<std::vector<Fire>>* frozen = nullptr;  // per layer
  bool soft_gates = false;
  ColumnPolicy policy = ColumnPolicy::capped_free_last;
};

struct ForwardResult {
  Tensor logits;        // m x |vocab|, undefined when m == 0
  TokenIds argmax;      // per output row
  TokenIds prediction;  // cut at the first EOS, PAD removed, at most max_output_len rows read
  bool truncated = false;
  std::size_t source_len = 0;  // including the appended EOS
  std::vector<LayerOutput> layers;
  std::vector<RowTrace> rows;
  std::vector<DeletionTrace> deletions;

  std::vector<std::vector<Fire>> structure() const {
    std::vector<std::vector<Fire>> out;
    for (const auto& l : layers) out.push_back(l.matched ? l.assignment.applied : std::vector<Fire>{});
    return out;
  }
};

/// Reads predicted ids up to the first EOS, dropping PAD.
inline TokenIds strip_prediction(const TokenIds& ids) {
  TokenIds out;
  for (auto t : ids) {
    if (t == Vocab::kEos) break;
    if (t != Vocab::kPad) out.push_back(t);
  }
  return out;
}

/// `source` excludes EOS; it is appended here.
inline ForwardResult model_forward(const Model& model, const TokenIds& source,
                                   const ForwardOptions& opts = {}) {
  const auto& cfg = model.config();
  const std::size_t V = cfg.vocab.size(), d = cfg.d;
  for (auto t : source) {
    if (t >= V) throw DataError("token id " + std::to_string(t) + " is outside the vocabulary");
  }
  if (opts.frozen && opts.frozen->size() != model.num_layers()) {
    throw ShapeError("model_forward: frozen structure has " + std::to_string(opts.frozen->size()) +
                     " layers, model has " + std::to_string(model.num_layers()));
  }
  TokenIds ids = source;
  ids.push_back(Vocab::kEos);

  ForwardResult out;
  out.source_len = ids.size();
  Tensor X = ops::gather_rows(model.embedding(), ids);
  std::vector<RowTrace> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) rows[i] = {i, i + 1, {}};

  for (std::size_t k = 0; k < model.num_layers(); ++k) {
    if (X.rows() == 0) {
      LayerOutput empty;
      empty.Y = X;
      out.layers.push_back(std::move(empty));
      continue;
    }
    LayerOptions lo;
    lo.training = opts.training;
    lo.rng = opts.rng;
    lo.soft_gates = opts.soft_gates;
    lo.policy = opts.policy;
    if (opts.frozen) lo.frozen = &(*opts.frozen)[k];
    auto lout = layer_forward(X, cfg.layer_config(k), model.layer(k), lo);

    std::vector<RowTrace> next;
    next.reserve(lout.rewrite.origins.size());
    for (const auto& o : lout.rewrite.origins) {
      RowTrace t;
      t.begin = rows[o.begin].begin;
      t.end = rows[o.end - 1].end;
      if (!o.rewritten) t.chain = rows[o.begin].chain;
      if (o.gated) t.chain.push_back({k, o.position, o.column});
      next.push_back(std::move(t));
    }
    for (const auto& del : lout.rewrite.deletions) {
      out.deletions.push_back({rows[del.begin].begin, rows[del.end - 1].end, {k, del.position, del.column}});
    }
    rows = std::move(next);
    X = lout.Y;
    out.layers.push_back(std::move(lout));
  }

  out.rows = std::move(rows);
  const std::size_t m = X.rows();
  if (m > 0) {
    const Tensor Z = ops::layer_norm(X, model.parameters().get("final_norm.gain"),
                                     model.parameters().get("final_norm.bias"));
    out.logits = ops::scale(ops::matmul_transposed(Z, model.embedding()),
                            1.0 / std::sqrt(static_cast<double>(d)));
    out.argmax.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      std::size_t best = 0;
      for (std::size_t v = 1; v < V; ++v)
        if (out.logits.at(i, v) > out.logits.at(i, best)) best = v;
      out.argmax[i] = best;
    }
  }
  out.truncated = m > cfg.max_output_len;
  TokenIds visible(out.argmax.begin(),
                   out.argmax.begin() + static_cast<std::ptrdiff_t>(std::min(m, cfg.max_output_len)));
  out.prediction = strip_prediction(visible);
  return out;
}

enum class LossKind { aligned, positional };

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "aligned") return LossKind::aligned;
  if (s == "positional") return LossKind::positional;
  throw ConfigError("unknown loss '" + s + "' (expected aligned or positional)");
}

inline std::string to_string(LossKind k) { return k == LossKind::aligned ? "aligned" : "positional"; }

/// Mean cross-entropy with output and EOS-terminated target both padded to
/// max_output_len. Missing output rows contribute uniform logits.
inline Tensor positional_loss(const Model& model, const ForwardResult& fr, const TokenIds& target) {
  const auto& cfg = model.config();
  const std::size_t L = cfg.max_output_len, V = cfg.vocab.size();
  TokenIds t = target;
  t.push_back(Vocab::kEos);
  if (t.size() > L) t.resize(L);
  const std::size_t m = fr.logits.defined() ? fr.logits.rows() : 0;
  const std::size_t used = std::min(m, t.size());
  std::vector<Tensor> parts;
  if (used > 0) {
    TokenIds first(used);
    for (std::size_t i = 0; i < used; ++i) first[i] = i;
    parts.push_back(ops::gather_rows(fr.logits, first));
  }
  if (used < t.size()) parts.push_back(Tensor::zeros({t.size() - used, V}));
  const Tensor logits = ops::concat_rows(parts, V);
  return ops::cross_entropy(logits, t, std::vector<bool>(t.size(), true));
}

/// Edit-distance alignment between output rows and the EOS-terminated
/// target. Aligned pairs pay cross-entropy; an unmatched output row pays
/// `delta` times the mean of the gate values it passed through; an unmatched
/// target token pays `delta` times the gates of deletions that removed source
/// material at that point (or a constant when nothing was deleted there).
/// Normalized by the target length including EOS.
///
/// `path` (optional) receives the chosen edit operations; when it already
/// holds a path, that path is charged instead of a fresh alignment, which
/// makes the loss smooth for gradient checks.
using AlignmentPath = std::vector<char>;

inline Tensor aligned_loss(const ForwardResult& fr, const TokenIds& target, double delta,
                           AlignmentPath* path = nullptr) {
  TokenIds t = target;
  t.push_back(Vocab::kEos);
  const std::size_t T = t.size();
  const std::size_t m = fr.logits.defined() ? fr.logits.rows() : 0;
  const std::size_t V = m > 0 ? fr.logits.cols() : 0;

  // token cross-entropy table
  std::vector<double> lse(m);
  for (std::size_t a = 0; a < m; ++a) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, fr.logits.at(a, v));
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v) z += std::exp(fr.logits.at(a, v) - mx);
    lse[a] = mx + std::log(z);
  }
  auto ce = [&](std::size_t a, std::size_t b) { return lse[a] - fr.logits.at(a, t[b]); };

  constexpr double inf = std::numeric_limits<double>::infinity();
  const std::size_t W = T + 1;
  std::vector<double> D((m + 1) * W, inf);
  std::vector<char> back((m + 1) * W, 0);
  D[0] = 0.0;
  for (std::size_t a = 0; a <= m; ++a) {
    for (std::size_t b = 0; b <= T; ++b) {
      if (a == 0 && b == 0) continue;
      double best = inf;
      char arg = 0;
      if (a > 0 && b > 0 && D[(a - 1) * W + b - 1] + ce(a - 1, b - 1) < best) {
        best = D[(a - 1) * W + b - 1] + ce(a - 1, b - 1);
        arg = 'm';
      }
      if (a > 0 && D[(a - 1) * W + b] + delta < best) {
        best = D[(a - 1) * W + b] + delta;
        arg = 'd';
      }
      if (b > 0 && D[a * W + b - 1] + delta < best) {
        best = D[a * W + b - 1] + delta;
        arg = 's';
      }
      D[a * W + b] = best;
      back[a * W + b] = arg;
    }
  }

  TokenIds ce_targets(m, 0);
  std::vector<bool> ce_include(m, false);
  std::size_t matched = 0;
  double constant = 0.0;
  std::vector<std::vector<ops::WeightedEntry>> charges(fr.layers.size());
  auto charge = [&](const GateRef& g, double w) { charges[g.layer].push_back({g.row, g.col, w}); };

  const bool replay = path && !path->empty();
  if (path && !replay) path->clear();
  std::size_t a = m, b = T, step = 0;
  while (a > 0 || b > 0) {
    char op = back[a * W + b];
    if (replay) {
      if (step >= path->size()) throw ShapeError("aligned_loss: frozen path is too short");
      op = (*path)[step];
      if ((op == 'm' && (a == 0 || b == 0)) || (op == 'd' && a == 0) || (op == 's' && b == 0)) {
        throw ShapeError("aligned_loss: frozen path does not fit this output");
      }
    } else if (path) {
      path->push_back(op);
    }
    ++step;
    if (op == 'm') {
      ce_targets[a - 1] = t[b - 1];
      ce_include[a - 1] = true;
      ++matched;
      --a;
      --b;
    } else if (op == 'd') {
      const auto& chain = fr.rows[a - 1].chain;
      if (chain.empty()) {
        constant += delta;
      } else {
        for (const auto& g : chain) charge(g, delta / static_cast<double>(chain.size()));
      }
      --a;
    } else {
      // source positions between output rows a-1 and a
      const std::size_t lo = a > 0 ? fr.rows[a - 1].end : 0;
      const std::size_t hi = a < m ? fr.rows[a].begin : fr.source_len;
      bool any = false;
      for (const auto& del : fr.deletions) {
        if (del.begin >= lo && del.end <= hi) {
          charge(del.gate, delta);
          any = true;
        }
      }
      if (!any) constant += delta;
      --b;
    }
  }

  Tensor total = Tensor::scalar(constant);
  if (matched > 0) {
    total = ops::add(total, ops::scale(ops::cross_entropy(fr.logits, ce_targets, ce_include),
                                       static_cast<double>(matched)));
  }
  for (std::size_t k = 0; k < charges.size(); ++k) {
    if (charges[k].empty()) continue;
    total = ops::add(total, ops::select_sum(fr.layers[k].assignment.gate, charges[k]));
  }
  return ops::scale(total, 1.0 / static_cast<double>(T));
}

inline Tensor sequence_loss(const Model& model, const ForwardResult& fr, const TokenIds& target,
                            LossKind kind, double delta = 1.0, AlignmentPath* path = nullptr) {
  return kind == LossKind::aligned ? aligned_loss(fr, target, delta, path)
                                   : positional_loss(model, fr, target);
}

struct TokenMatch {
  std::size_t token = 0;
  double similarity = 0.0;
};

struct RuleReport {
  std::size_t layer = 0, rule = 0;
  std::vector<TokenMatch> pattern;
  std::vector<TokenMatch> replacement;
  std::size_t fires = 0;
};

/// Nearest embedding row by cosine similarity; ties go to the lowest id.
inline TokenMatch nearest_token(std::span<const double> v, const Tensor& embedding) {
  const std::size_t V = embedding.rows(), d = embedding.cols();
  double vn = 0.0;
  for (double x : v) vn += x * x;
  vn = std::sqrt(vn);
  TokenMatch best{0, -std::numeric_limits<double>::infinity()};
  for (std::size_t t = 0; t < V; ++t) {
    double dot = 0.0, en = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += v[j] * embedding.at(t, j);
      en += embedding.at(t, j) * embedding.at(t, j);
    }
    const double denom = vn * std::sqrt(en);
    const double sim = denom > 0.0 ? dot / denom : 0.0;
    if (sim > best.similarity) best = {t, sim};
  }
  return best;
}

/// Decodes every pattern and replacement row of every layer and counts how
/// often each rule fires (noise off) over `sources`.
inline std::vector<RuleReport> inspect_rules(const Model& model, const std::vector<TokenIds>& sources = {}) {
  const auto& E = model.embedding();
  const std::size_t d = model.config().d;
  std::vector<RuleReport> out;
  std::vector<std::size_t> base(model.num_layers());
  for (std::size_t k = 0; k < model.num_layers(); ++k) {
    base[k] = out.size();
    const auto lp = model.layer(k);
    for (std::size_t r = 0; r < lp.bank.R; ++r) {
      RuleReport rep;
      rep.layer = k;
      rep.rule = r;
      for (std::size_t i = 0; i < lp.bank.Lp; ++i)
        rep.pattern.push_back(nearest_token(lp.bank.patterns.data().subspan((r * lp.bank.Lp + i) * d, d), E));
      for (std::size_t i = 0; i < lp.bank.Lq; ++i)
        rep.replacement.push_back(
            nearest_token(lp.bank.replacements.data().subspan((r * lp.bank.Lq + i) * d, d), E));
      out.push_back(std::move(rep));
    }
  }
  for (const auto& src : sources) {
    const auto fr = model_forward(model, src);
    for (std::size_t k = 0; k < fr.layers.size(); ++k) {
      if (!fr.layers[k].matched) continue;
      for (const auto& f : fr.layers[k].assignment.fires()) ++out[base[k] + f.column].fires;
    }
  }
  return out;
}

}  // namespace rewritenet
