#pragma once

// Compiles a deterministic FST into a rewrite-model whose layers simulate it.
//
// The encoded sequence carries the machine state in a dedicated carrier
// token placed in front of the next unread symbol:
//
//   <state:s0> a1 a2 ... an <eos>
//
// Each transition (s, a, s', b) becomes a rule with a two-row pattern
// [carrier(s); a] and a two-row replacement [b; carrier(s')], so one layer
// emits one output symbol and moves the carrier one step to the right. A
// stack of K >= n identical layers therefore runs the whole machine; once the
// carrier reaches <eos> no rule matches and later layers copy.
//
// Tokens use orthogonal one-hot embeddings. Patterns are scaled copies of the
// layer-normalized one-hots so a full match scores 8, a half match about 4,
// and the copy bias of 6 sits in between.

#include <cmath>
#include <string>
#include <vector>

#include "rewritenet/discrete.hpp"
#include "rewritenet/error.hpp"
#include "rewritenet/model.hpp"

namespace rewritenet {

inline std::string carrier_token(const std::string& state) { return "<state:" + state + ">"; }

class FstCodec {
 public:
  FstCodec(const Fst& fst, Vocab vocab) : vocab_(std::move(vocab)), inputs_(fst.input_alphabet()) {
    initial_ = vocab_.id(carrier_token(fst.initial()));
    for (const auto& s : fst.states()) carriers_.insert(vocab_.id(carrier_token(s)));
  }

  TokenIds encode(const std::vector<std::string>& symbols) const {
    TokenIds out{initial_};
    for (const auto& a : symbols) {
      if (!inputs_.count(a)) throw DataError("symbol '" + a + "' is not in the transducer's input alphabet");
      out.push_back(vocab_.id(a));
    }
    return out;
  }

  /// Drops carriers; expects an already EOS-stripped prediction.
  std::vector<std::string> decode(const TokenIds& ids) const {
    std::vector<std::string> out;
    for (auto t : ids) {
      if (carriers_.count(t)) continue;
      out.push_back(vocab_.name(t));
    }
    return out;
  }

 private:
  Vocab vocab_;
  std::set<std::string> inputs_;
  std::size_t initial_ = 0;
  std::set<std::size_t> carriers_;
};

struct CompiledFst {
  Model model;
  FstCodec codec;
};

struct FstCompileOptions {
  std::size_t layers = 8;      // K; must be >= the longest input to transduce
  std::size_t d = 0;           // 0 picks the smallest workable width
  double temperature = 0.1;
  double copy_bias = 6.0;
};

inline CompiledFst compile_fst_to_rulebank(const Fst& fst, const FstCompileOptions& opt = {}) {
  if (fst.transitions().empty()) throw ConfigError("fst has no transitions");
  std::set<std::string> symbol_set = fst.input_alphabet();
  symbol_set.insert(fst.output_alphabet().begin(), fst.output_alphabet().end());
  std::vector<std::string> symbols(symbol_set.begin(), symbol_set.end());
  for (const auto& s : fst.states()) symbols.push_back(carrier_token(s));

  Vocab vocab(symbols);
  const std::size_t V = vocab.size();
  const std::size_t d = opt.d == 0 ? V : opt.d;
  if (d < V) {
    throw ConfigError("fst compile: d = " + std::to_string(d) + " is too small for " + std::to_string(V) +
                      " orthogonal channels (" + std::to_string(fst.states().size()) + " states, " +
                      std::to_string(symbol_set.size()) + " symbols, 2 reserved)");
  }
  if (opt.layers < 1) throw ConfigError("fst compile: layers must be >= 1");

  ModelConfig cfg;
  cfg.vocab = vocab;
  cfg.d = d;
  const std::size_t R = fst.transitions().size();
  cfg.layers.assign(opt.layers, LayerShape{R, 2, 2});
  cfg.residual = true;
  cfg.dropout = 0.0;
  cfg.temperature = opt.temperature;
  cfg.gumbel = false;
  cfg.max_output_len = 2 * opt.layers + 4;
  cfg.copy_bias_init = opt.copy_bias;
  Model model(cfg, 0);

  auto& params = model.parameters();
  auto E = params.get("embedding").mutable_data();
  std::fill(E.begin(), E.end(), 0.0);
  for (std::size_t t = 0; t < V; ++t) E[t * d + t] = 1.0;

  // layer norm of a one-hot row, scaled
  const double mean = 1.0 / static_cast<double>(d);
  const double sd = std::sqrt(mean - mean * mean + 1e-5);
  const double c = 4.0 / std::sqrt(static_cast<double>(d));
  auto pattern_row = [&](std::span<double> dst, std::size_t token) {
    for (std::size_t j = 0; j < d; ++j) dst[j] = c * (((j == token) ? 1.0 : 0.0) - mean) / sd;
  };
  auto onehot_row = [&](std::span<double> dst, std::size_t token) {
    for (std::size_t j = 0; j < d; ++j) dst[j] = (j == token) ? 1.0 : 0.0;
  };

  for (std::size_t k = 0; k < opt.layers; ++k) {
    const auto p = Model::prefix(k);
    auto P = params.get(p + "patterns").mutable_data();
    auto Q = params.get(p + "replacements").mutable_data();
    for (std::size_t r = 0; r < R; ++r) {
      const auto& tr = fst.transitions()[r];
      pattern_row(P.subspan((r * 2 + 0) * d, d), vocab.id(carrier_token(tr.from)));
      pattern_row(P.subspan((r * 2 + 1) * d, d), vocab.id(tr.input));
      onehot_row(Q.subspan((r * 2 + 0) * d, d), vocab.id(tr.output));
      onehot_row(Q.subspan((r * 2 + 1) * d, d), vocab.id(carrier_token(tr.to)));
    }
  }
  FstCodec codec(fst, vocab);
  return {std::move(model), std::move(codec)};
}

/// Runs the compiled model on a symbol string (noise off) and decodes.
inline std::vector<std::string> run_compiled(const CompiledFst& c, const std::vector<std::string>& input) {
  const auto fr = model_forward(c.model, c.codec.encode(input));
  return c.codec.decode(fr.prediction);
}

struct FstCheckReport {
  std::size_t checked = 0;
  std::size_t matched = 0;
  std::size_t undefined = 0;  // inputs the machine itself rejects
  std::vector<std::string> mismatches;  // first few, for diagnostics

  bool pass() const { return checked > 0 && matched == checked; }
};

/// Compares the compiled model with fst_transduce on every input string of
/// length 0..max_len over the input alphabet.
inline FstCheckReport fst_check(const Fst& fst, std::size_t max_len, FstCompileOptions opt = {}) {
  opt.layers = std::max<std::size_t>(opt.layers, std::max<std::size_t>(max_len, 1));
  const auto compiled = compile_fst_to_rulebank(fst, opt);
  const std::vector<std::string> alphabet(fst.input_alphabet().begin(), fst.input_alphabet().end());
  FstCheckReport rep;
  std::vector<std::size_t> digits;
  for (std::size_t len = 0; len <= max_len; ++len) {
    digits.assign(len, 0);
    while (true) {
      std::vector<std::string> input(len);
      for (std::size_t i = 0; i < len; ++i) input[i] = alphabet[digits[i]];
      std::vector<std::string> expected;
      bool defined = true;
      try {
        expected = fst_transduce(fst, input);
      } catch (const DataError&) {
        defined = false;
      }
      if (defined) {
        ++rep.checked;
        const auto got = run_compiled(compiled, input);
        if (got == expected) {
          ++rep.matched;
        } else if (rep.mismatches.size() < 5) {
          std::string msg;
          for (const auto& s : input) msg += s + " ";
          msg += "=> ";
          for (const auto& s : got) msg += s + " ";
          msg += "(want ";
          for (const auto& s : expected) msg += s + " ";
          msg += ")";
          rep.mismatches.push_back(msg);
        }
      } else {
        ++rep.undefined;
      }
      std::size_t pos = 0;
      while (pos < len && ++digits[pos] == alphabet.size()) digits[pos++] = 0;
      if (pos == len) break;
    }
  }
  return rep;
}

}  // namespace rewritenet
