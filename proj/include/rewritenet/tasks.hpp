#pragma once

// Dataset generators for the three benchmarks, exact-match scoring, and the
// tab-separated dataset format.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rewritenet/discrete.hpp"
#include "rewritenet/error.hpp"
#include "rewritenet/kvconfig.hpp"
#include "rewritenet/rng.hpp"

namespace rewritenet {

using Tokens = std::vector<std::string>;

struct DatasetRecord {
  Tokens src;
  Tokens tgt;
  bool cascade_free = true;
  friend bool operator==(const DatasetRecord& a, const DatasetRecord& b) {
    return a.src == b.src && a.tgt == b.tgt;
  }
};

using Dataset = std::vector<DatasetRecord>;

enum class Task { reversal, scan, compression };

inline Task parse_task(const std::string& s) {
  if (s == "reversal") return Task::reversal;
  if (s == "scan") return Task::scan;
  if (s == "compression") return Task::compression;
  throw ConfigError("unknown task '" + s + "' (expected reversal, scan or compression)");
}

inline std::string to_string(Task t) {
  switch (t) {
    case Task::reversal: return "reversal";
    case Task::scan: return "scan";
    case Task::compression: return "compression";
  }
  return "?";
}

// ---------------------------------------------------------------- reversal

inline Tokens reversal_symbols(std::size_t vocab_size = 64) {
  Tokens out;
  for (std::size_t i = 0; i < vocab_size; ++i) out.push_back(std::to_string(i));
  return out;
}

/// Sequences of distinct integers with lengths in [min_len, max_len]; the
/// target is the reversed source.
inline Dataset gen_reversal(std::size_t min_len, std::size_t max_len, std::size_t vocab_size,
                            std::size_t n_samples, std::uint64_t seed) {
  if (min_len < 1 || min_len > max_len) throw ConfigError("reversal: need 1 <= min_len <= max_len");
  if (vocab_size < max_len) {
    throw ConfigError("reversal: vocab_size " + std::to_string(vocab_size) + " < max_len " +
                      std::to_string(max_len) + " cannot give distinct tokens");
  }
  Rng rng(seed);
  std::vector<std::size_t> pool(vocab_size);
  Dataset out;
  out.reserve(n_samples);
  for (std::size_t s = 0; s < n_samples; ++s) {
    const auto len = static_cast<std::size_t>(
        rng.integer(static_cast<std::int64_t>(min_len), static_cast<std::int64_t>(max_len)));
    for (std::size_t i = 0; i < vocab_size; ++i) pool[i] = i;
    // partial Fisher-Yates
    for (std::size_t i = 0; i < len; ++i) {
      const auto j = static_cast<std::size_t>(
          rng.integer(static_cast<std::int64_t>(i), static_cast<std::int64_t>(vocab_size - 1)));
      std::swap(pool[i], pool[j]);
    }
    DatasetRecord r;
    for (std::size_t i = 0; i < len; ++i) r.src.push_back(std::to_string(pool[i]));
    r.tgt.assign(r.src.rbegin(), r.src.rend());
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------- compression

inline const std::vector<StringRule>& compression_rules() {
  static const std::vector<StringRule> rules{{{"A", "B", "C"}, {}}};
  return rules;
}

/// True when one removal pass leaves no "A B C" behind.
inline bool is_cascade_free(const Tokens& src) {
  const auto once = rewrite_pass(src, compression_rules());
  return rewrite_pass(once, compression_rules()) == once;
}

/// Uniform strings over {A, B, C}. Targets remove "A B C" in one pass. With
/// include_cascades false, strings whose removal exposes a new occurrence are
/// redrawn.
inline Dataset gen_compression(std::size_t min_len, std::size_t max_len, std::size_t n_samples,
                               std::uint64_t seed, bool include_cascades = false) {
  if (min_len < 1 || min_len > max_len) throw ConfigError("compression: need 1 <= min_len <= max_len");
  static const char* letters[] = {"A", "B", "C"};
  Rng rng(seed);
  Dataset out;
  out.reserve(n_samples);
  while (out.size() < n_samples) {
    const auto len = static_cast<std::size_t>(
        rng.integer(static_cast<std::int64_t>(min_len), static_cast<std::int64_t>(max_len)));
    DatasetRecord r;
    for (std::size_t i = 0; i < len; ++i) r.src.push_back(letters[rng.integer(0, 2)]);
    r.cascade_free = is_cascade_free(r.src);
    if (!r.cascade_free && !include_cascades) continue;
    r.tgt = rewrite_pass(r.src, compression_rules());
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------- SCAN-like

// Grammar (no "turn"):
//   C -> S | S and S | S after S
//   S -> V | V twice | V thrice
//   V -> U | U D | U opposite D | U around D
//   U -> walk | run | jump | look      D -> left | right
// Semantics: "U D" is ACTION DIR, "opposite" doubles the direction token,
// "around" repeats ACTION DIR four times, "after" runs the second clause first.

inline const Tokens& scan_actions() {
  static const Tokens v{"walk", "run", "jump", "look"};
  return v;
}

inline Tokens scan_symbols() {
  return {"walk", "run", "jump", "look", "left", "right", "opposite", "around", "twice", "thrice",
          "and",  "after", "WALK", "RUN", "JUMP", "LOOK", "LEFT", "RIGHT"};
}

namespace detail {

inline std::string upper(const std::string& s) {
  std::string u = s;
  for (auto& c : u) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return u;
}

inline Tokens interpret_verb_phrase(const Tokens& w, std::size_t b, std::size_t e) {
  const auto bad = [&] {
    std::string s;
    for (std::size_t i = b; i < e; ++i) s += w[i] + " ";
    return DataError("scan: cannot interpret '" + s + "'");
  };
  if (e <= b || e - b > 3) throw bad();
  const auto& acts = scan_actions();
  if (std::find(acts.begin(), acts.end(), w[b]) == acts.end()) throw bad();
  const auto act = upper(w[b]);
  auto is_dir = [](const std::string& s) { return s == "left" || s == "right"; };
  const std::size_t n = e - b;
  if (n == 1) return {act};
  if (n == 2) {
    if (!is_dir(w[b + 1])) throw bad();
    return {act, upper(w[b + 1])};
  }
  if (!is_dir(w[b + 2])) throw bad();
  const auto dir = upper(w[b + 2]);
  if (w[b + 1] == "opposite") return {act, dir, dir};
  if (w[b + 1] == "around") {
    Tokens out;
    for (int i = 0; i < 4; ++i) {
      out.push_back(act);
      out.push_back(dir);
    }
    return out;
  }
  throw bad();
}

inline Tokens interpret_clause(const Tokens& w, std::size_t b, std::size_t e) {
  if (e > b && (w[e - 1] == "twice" || w[e - 1] == "thrice")) {
    const int times = w[e - 1] == "twice" ? 2 : 3;
    const auto once = interpret_verb_phrase(w, b, e - 1);
    Tokens out;
    for (int i = 0; i < times; ++i) out.insert(out.end(), once.begin(), once.end());
    return out;
  }
  return interpret_verb_phrase(w, b, e);
}

}  // namespace detail

/// Compositional interpreter for the command grammar above.
inline Tokens scan_interpret(const Tokens& cmd) {
  for (std::size_t i = 0; i < cmd.size(); ++i) {
    if (cmd[i] == "and" || cmd[i] == "after") {
      auto first = detail::interpret_clause(cmd, 0, i);
      auto second = detail::interpret_clause(cmd, i + 1, cmd.size());
      if (cmd[i] == "after") std::swap(first, second);
      first.insert(first.end(), second.begin(), second.end());
      return first;
    }
  }
  return detail::interpret_clause(cmd, 0, cmd.size());
}

/// Every command of the grammar, in a fixed order.
inline std::vector<Tokens> scan_all_commands() {
  std::vector<Tokens> verbs;
  for (const auto& u : scan_actions()) {
    verbs.push_back({u});
    for (const char* d : {"left", "right"}) {
      verbs.push_back({u, d});
      verbs.push_back({u, "opposite", d});
      verbs.push_back({u, "around", d});
    }
  }
  std::vector<Tokens> clauses;
  for (const auto& v : verbs) {
    clauses.push_back(v);
    for (const char* m : {"twice", "thrice"}) {
      auto c = v;
      c.push_back(m);
      clauses.push_back(c);
    }
  }
  std::vector<Tokens> out = clauses;
  for (const char* conj : {"and", "after"}) {
    for (const auto& a : clauses)
      for (const auto& b : clauses) {
        Tokens c = a;
        c.push_back(conj);
        c.insert(c.end(), b.begin(), b.end());
        out.push_back(std::move(c));
      }
  }
  return out;
}

struct SplitSpec {
  std::string name = "train";              // train | valid | test
  std::size_t max_train_action_len = 22;   // train/valid: target length <= this; test: > this
  std::size_t size = 0;                    // 0 = everything available
  std::uint64_t seed = 0;
  std::size_t valid_reserve = 1000;        // short commands held out for valid
};

struct ScanSplits {
  Dataset train, valid, test;
};

/// Length split. Commands with target length <= threshold are shuffled once
/// (seeded) and cut into disjoint train and valid parts; longer ones form test.
inline ScanSplits gen_scan_splits(std::size_t max_train_action_len, std::size_t train_size,
                                  std::size_t valid_size, std::size_t test_size, std::uint64_t seed) {
  Dataset short_pool, long_pool;
  for (auto& cmd : scan_all_commands()) {
    DatasetRecord r{cmd, scan_interpret(cmd), true};
    (r.tgt.size() <= max_train_action_len ? short_pool : long_pool).push_back(std::move(r));
  }
  Rng rng(seed);
  std::shuffle(short_pool.begin(), short_pool.end(), rng.engine());
  std::shuffle(long_pool.begin(), long_pool.end(), rng.engine());
  auto take = [](const Dataset& pool, std::size_t from, std::size_t want) {
    const std::size_t b = std::min(from, pool.size());
    const std::size_t e = want == 0 ? pool.size() : std::min(pool.size(), b + want);
    return Dataset(pool.begin() + static_cast<std::ptrdiff_t>(b), pool.begin() + static_cast<std::ptrdiff_t>(e));
  };
  ScanSplits s;
  const std::size_t valid_n = valid_size == 0 ? short_pool.size() / 10 : valid_size;
  s.valid = take(short_pool, 0, valid_n);
  s.train = take(short_pool, s.valid.size(), train_size);
  s.test = take(long_pool, 0, test_size);
  return s;
}

inline Dataset gen_scan(const SplitSpec& split) {
  auto s = gen_scan_splits(split.max_train_action_len, 0, split.valid_reserve, 0, split.seed);
  Dataset* part = nullptr;
  if (split.name == "train") part = &s.train;
  if (split.name == "valid") part = &s.valid;
  if (split.name == "test") part = &s.test;
  if (!part) throw ConfigError("scan: unknown split '" + split.name + "'");
  if (split.size > 0 && part->size() > split.size) part->resize(split.size);
  return *part;
}

/// Generator settings shared by all splits of one task.
struct GenOptions {
  std::uint64_t seed = 0;
  std::size_t min_len = 0, max_len = 0;  // 0 = task default
  std::size_t vocab_size = 64;
  std::size_t max_train_action_len = 22;
  std::size_t valid_size = 1000;  // also the SCAN valid reserve
  bool include_cascades = false;
};

/// One named split (train, valid or test). Each split draws from its own
/// stream of the seed so split sizes can change independently.
inline Dataset gen_task_split(Task task, const std::string& split, std::size_t n, const GenOptions& o) {
  if (split != "train" && split != "valid" && split != "test") {
    throw ConfigError("unknown split '" + split + "' (expected train, valid or test)");
  }
  const std::uint64_t stream = split == "train" ? 0 : split == "valid" ? 1 : 2;
  const auto seed = Rng::derive(o.seed, stream);
  switch (task) {
    case Task::compression:
      return gen_compression(o.min_len ? o.min_len : 1, o.max_len ? o.max_len : 20, n, seed, o.include_cascades);
    case Task::reversal:
      return gen_reversal(o.min_len ? o.min_len : 10, o.max_len ? o.max_len : 30, o.vocab_size, n, seed);
    case Task::scan: {
      SplitSpec s;
      s.name = split;
      s.max_train_action_len = o.max_train_action_len;
      s.size = n;
      s.seed = o.seed;
      s.valid_reserve = o.valid_size;
      return gen_scan(s);
    }
  }
  return {};
}

// ---------------------------------------------------------------- scoring

/// Removes PAD and everything from the first EOS on.
inline Tokens strip_tokens(const Tokens& t) {
  Tokens out;
  for (const auto& s : t) {
    if (s == "<eos>") break;
    if (s != "<pad>") out.push_back(s);
  }
  return out;
}

inline bool exact_match(const Tokens& pred, const Tokens& tgt) {
  return strip_tokens(pred) == strip_tokens(tgt);
}

inline double corpus_em(const std::vector<Tokens>& preds, const std::vector<Tokens>& tgts) {
  if (preds.size() != tgts.size()) {
    throw DataError("corpus_em: " + std::to_string(preds.size()) + " predictions for " +
                    std::to_string(tgts.size()) + " targets");
  }
  if (preds.empty()) throw DataError("corpus_em: empty corpus");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += exact_match(preds[i], tgts[i]) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

// ---------------------------------------------------------------- files

inline std::string join_tokens(const Tokens& t) {
  std::string s;
  for (std::size_t i = 0; i < t.size(); ++i) s += (i ? " " : "") + t[i];
  return s;
}

inline void write_dataset(const std::filesystem::path& path, const Dataset& records) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write dataset: " + path.string());
  for (const auto& r : records) os << join_tokens(r.src) << '\t' << join_tokens(r.tgt) << '\n';
  if (!os) throw DataError("failed writing dataset: " + path.string());
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open dataset: " + path.string());
  Dataset out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": missing TAB between source and target");
    }
    if (line.find('\t', tab + 1) != std::string::npos) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": more than one TAB");
    }
    DatasetRecord r;
    r.src = detail::split_ws(line.substr(0, tab));
    r.tgt = detail::split_ws(line.substr(tab + 1));
    out.push_back(std::move(r));
  }
  return out;
}

inline Tokens task_symbols(Task t) {
  switch (t) {
    case Task::reversal: return reversal_symbols(64);
    case Task::scan: return scan_symbols();
    case Task::compression: return {"A", "B", "C"};
  }
  return {};
}

}  // namespace rewritenet
