#pragma once

// Symbolic counterparts of the neural layer: exact-match parallel rewriting
// and deterministic finite-state transducers, plus their text formats.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rewritenet/error.hpp"
#include "rewritenet/kvconfig.hpp"

namespace rewritenet {

template <typename Token>
struct DiscreteRule {
  std::vector<Token> pattern;
  std::vector<Token> replacement;
};

template <typename Token>
struct PassResult {
  std::vector<Token> tokens;
  std::size_t fires = 0;
};

/// One left-to-right pass. At each position the lowest-index rule whose
/// pattern matches fires and the pointer skips the pattern; otherwise the
/// token is copied. Output of a fire is never re-examined in the same pass.
template <typename Token>
PassResult<Token> rewrite_pass_counted(const std::vector<Token>& tokens,
                                       const std::vector<DiscreteRule<Token>>& rules) {
  for (const auto& r : rules) {
    if (r.pattern.empty()) throw std::invalid_argument("rewrite_pass: empty pattern");
  }
  PassResult<Token> out;
  std::size_t i = 0;
  while (i < tokens.size()) {
    const DiscreteRule<Token>* hit = nullptr;
    for (const auto& r : rules) {
      if (i + r.pattern.size() > tokens.size()) continue;
      if (std::equal(r.pattern.begin(), r.pattern.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i))) {
        hit = &r;
        break;
      }
    }
    if (hit) {
      out.tokens.insert(out.tokens.end(), hit->replacement.begin(), hit->replacement.end());
      i += hit->pattern.size();
      ++out.fires;
    } else {
      out.tokens.push_back(tokens[i++]);
    }
  }
  return out;
}

template <typename Token>
std::vector<Token> rewrite_pass(const std::vector<Token>& tokens,
                                const std::vector<DiscreteRule<Token>>& rules) {
  return rewrite_pass_counted(tokens, rules).tokens;
}

/// Repeats rewrite_pass until nothing changes or `max_passes` passes ran.
template <typename Token>
std::vector<Token> iterated_rewrite(std::vector<Token> tokens,
                                    const std::vector<DiscreteRule<Token>>& rules, int max_passes) {
  if (max_passes < 1) throw std::invalid_argument("iterated_rewrite: max_passes must be >= 1");
  for (int p = 0; p < max_passes; ++p) {
    auto next = rewrite_pass(tokens, rules);
    if (next == tokens) break;
    tokens = std::move(next);
  }
  return tokens;
}

using StringRule = DiscreteRule<std::string>;

/// One rule per line: `pattern tokens -> replacement tokens`. Blank lines and
/// '#' comments are skipped. The replacement may be empty.
inline std::vector<StringRule> parse_rules(const std::string& text, const std::string& origin = "<rules>") {
  std::vector<StringRule> rules;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto arrow = t.find("->");
    if (arrow == std::string::npos) {
      throw DataError(origin + ":" + std::to_string(lineno) + ": expected 'pattern -> replacement'");
    }
    StringRule r{detail::split_ws(t.substr(0, arrow)), detail::split_ws(t.substr(arrow + 2))};
    if (r.pattern.empty()) throw DataError(origin + ":" + std::to_string(lineno) + ": empty pattern");
    rules.push_back(std::move(r));
  }
  return rules;
}

inline std::vector<StringRule> load_rules(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open rule file: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_rules(ss.str(), path.string());
}

struct FstTransition {
  std::string from, input, to, output;
};

/// Deterministic transducer over string-named states and symbols.
class Fst {
 public:
  Fst() = default;
  explicit Fst(std::string initial) : initial_(std::move(initial)) { add_state(initial_); }

  void add_transition(const std::string& s, const std::string& a, const std::string& s2,
                      const std::string& b) {
    const auto key = std::make_pair(s, a);
    if (table_.count(key)) {
      throw DataError("fst is not deterministic: two transitions from (" + s + ", " + a + ")");
    }
    table_[key] = transitions_.size();
    transitions_.push_back({s, a, s2, b});
    add_state(s);
    add_state(s2);
    inputs_.insert(a);
    outputs_.insert(b);
  }

  const std::string& initial() const { return initial_; }
  const std::vector<std::string>& states() const { return states_; }
  const std::set<std::string>& input_alphabet() const { return inputs_; }
  const std::set<std::string>& output_alphabet() const { return outputs_; }
  const std::vector<FstTransition>& transitions() const { return transitions_; }

  const FstTransition* find(const std::string& s, const std::string& a) const {
    auto it = table_.find({s, a});
    return it == table_.end() ? nullptr : &transitions_[it->second];
  }

 private:
  void add_state(const std::string& s) {
    if (std::find(states_.begin(), states_.end(), s) == states_.end()) states_.push_back(s);
  }

  std::string initial_;
  std::vector<std::string> states_;
  std::set<std::string> inputs_, outputs_;
  std::vector<FstTransition> transitions_;
  std::map<std::pair<std::string, std::string>, std::size_t> table_;
};

/// Runs the machine from its initial state, emitting one symbol per input.
inline std::vector<std::string> fst_transduce(const Fst& fst, const std::vector<std::string>& input) {
  std::vector<std::string> out;
  out.reserve(input.size());
  std::string state = fst.initial();
  for (const auto& a : input) {
    const auto* t = fst.find(state, a);
    if (!t) throw DataError("fst has no transition from state '" + state + "' on '" + a + "'");
    out.push_back(t->output);
    state = t->to;
  }
  return out;
}

/// Header `states <k> init <s0>` then one `s a s' b` line per transition.
inline Fst parse_fst(const std::string& text, const std::string& origin = "<fst>") {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  std::size_t declared = 0;
  bool have_header = false;
  Fst fst;
  while (std::getline(is, line)) {
    ++lineno;
    const auto t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto f = detail::split_ws(t);
    const auto where = origin + ":" + std::to_string(lineno) + ": ";
    if (!have_header) {
      if (f.size() != 4 || f[0] != "states" || f[2] != "init") {
        throw DataError(where + "expected header 'states <k> init <s0>'");
      }
      try {
        declared = std::stoul(f[1]);
      } catch (const std::logic_error&) {
        throw DataError(where + "state count must be an integer");
      }
      fst = Fst(f[3]);
      have_header = true;
      continue;
    }
    if (f.size() != 4) throw DataError(where + "expected 's a s2 b'");
    fst.add_transition(f[0], f[1], f[2], f[3]);
  }
  if (!have_header) throw DataError(origin + ": missing header");
  if (fst.states().size() > declared) {
    throw DataError(origin + ": header declares " + std::to_string(declared) + " states, transitions use " +
                    std::to_string(fst.states().size()));
  }
  return fst;
}

inline Fst load_fst(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open fst file: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_fst(ss.str(), path.string());
}

}  // namespace rewritenet
