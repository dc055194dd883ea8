#pragma once

// Checks shared by the unit tests and the acceptance binary.

#include <cmath>
#include <string>
#include <vector>

#include <rewritenet/rewritenet.hpp>

namespace rewritenet::checks {

/// One random oracle case: a string over a small alphabet, a bank of rules
/// sharing Lp/Lq, and the assignment the discrete pass makes. The string is
/// embedded one-hot, scored, resolved without noise and rewritten; the row
/// argmaxes must spell rewrite_pass's output. Returns an empty string on
/// agreement, otherwise a description of the mismatch.
inline std::string oracle_case(Rng& rng) {
  const std::size_t A = static_cast<std::size_t>(rng.integer(2, 4));
  const std::size_t n = static_cast<std::size_t>(rng.integer(1, 20));
  const std::size_t Lp = static_cast<std::size_t>(rng.integer(1, 3));
  const std::size_t Lq = static_cast<std::size_t>(rng.integer(0, 3));
  const std::size_t R = static_cast<std::size_t>(rng.integer(1, 3));
  auto sym = [&] { return static_cast<int>(rng.integer(0, static_cast<std::int64_t>(A) - 1)); };

  std::vector<int> s(n);
  for (auto& t : s) t = sym();
  std::vector<DiscreteRule<int>> rules(R);
  for (std::size_t r = 0; r < R; ++r) {
    // half of the patterns are lifted from the string so fires are common
    if (n >= Lp && rng.uniform() < 0.5) {
      const auto at = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(n - Lp)));
      rules[r].pattern.assign(s.begin() + static_cast<std::ptrdiff_t>(at),
                              s.begin() + static_cast<std::ptrdiff_t>(at + Lp));
    } else {
      for (std::size_t k = 0; k < Lp; ++k) rules[r].pattern.push_back(sym());
    }
    for (std::size_t k = 0; k < Lq; ++k) rules[r].replacement.push_back(sym());
  }
  const auto expected = rewrite_pass(s, rules);

  const std::size_t d = A;
  std::vector<double> h(n * d, 0.0), p(R * Lp * d, 0.0), q(R * Lq * d, 0.0);
  for (std::size_t i = 0; i < n; ++i) h[i * d + static_cast<std::size_t>(s[i])] = 1.0;
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t k = 0; k < Lp; ++k) p[(r * Lp + k) * d + static_cast<std::size_t>(rules[r].pattern[k])] = 1.0;
    for (std::size_t k = 0; k < Lq; ++k)
      q[(r * Lq + k) * d + static_cast<std::size_t>(rules[r].replacement[k])] = 1.0;
  }
  RuleBank bank;
  bank.patterns = Tensor({R, Lp, d}, p);
  bank.replacements = Tensor({R, Lq, d}, q);
  // a full match scores Lp/sqrt(d); anything less scores at most (Lp-1)/sqrt(d)
  bank.copy_bias = Tensor::scalar((static_cast<double>(Lp) - 0.5) / std::sqrt(static_cast<double>(d)));
  bank.R = R;
  bank.Lp = Lp;
  bank.Lq = Lq;
  const Tensor H({n, d}, h);

  std::vector<Fire> applied;
  Tensor gate;
  if (n >= Lp) {
    const auto S = match_scores(H, bank);
    const auto scores = ops::concat_cols(S, ops::repeat_rows(bank.copy_bias, S.rows()));
    AssignmentConfig cfg;
    cfg.temperature = 0.01;
    cfg.gumbel_enabled = false;
    Rng unused(0);
    const auto res = resolve_conflicts(scores, Lp, cfg, unused);
    applied = res.applied;
    gate = res.gate;
  }
  const auto out = apply_rewrites(H, applied, bank, gate);

  std::vector<int> got;
  for (std::size_t i = 0; i < out.Y.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < d; ++j)
      if (out.Y.at(i, j) > out.Y.at(i, best)) best = j;
    if (std::abs(out.Y.at(i, best) - 1.0) > 1e-12) return "row " + std::to_string(i) + " is not one-hot";
    got.push_back(static_cast<int>(best));
  }
  const std::size_t fires = rewrite_pass_counted(s, rules).fires;
  if (out.Y.rows() != n + fires * Lq - fires * Lp) return "length bookkeeping";
  if (got != expected) {
    auto str = [](const std::vector<int>& v) {
      std::string o;
      for (int x : v) o += std::to_string(x);
      return o;
    };
    return "input " + str(s) + " expected " + str(expected) + " got " + str(got);
  }
  return "";
}

/// Relative finite-difference error of the full-model training loss with
/// the assignment structure and edit alignment frozen and soft gates, at d=8, R=4, K=2, n=6.
inline double model_gradcheck(std::uint64_t seed, LossKind loss = LossKind::aligned) {
  ModelConfig cfg;
  cfg.vocab = Vocab({"a", "b", "c", "d"});
  cfg.d = 8;
  cfg.layers = {LayerShape{4, 2, 1}, LayerShape{4, 1, 1}};
  cfg.dropout = 0.0;
  cfg.max_output_len = 12;
  Model model(cfg, seed);
  Rng rng(seed + 1000);
  TokenIds src(5), tgt(4);  // n = 6 with the EOS
  for (auto& t : src) t = static_cast<std::size_t>(rng.integer(2, 5));
  for (auto& t : tgt) t = static_cast<std::size_t>(rng.integer(2, 5));

  ForwardOptions fo;
  fo.training = false;
  const auto structure = model_forward(model, src, fo).structure();
  fo.frozen = &structure;
  fo.soft_gates = true;
  // the edit alignment is part of the frozen structure
  AlignmentPath path;
  sequence_loss(model, model_forward(model, src, fo), tgt, loss, 1.0, &path);
  auto f = [&] { return sequence_loss(model, model_forward(model, src, fo), tgt, loss, 1.0, &path); };
  std::vector<Tensor> params;
  for (auto& [_, p] : model.parameters().parameters()) params.push_back(p);
  return finite_diff_check(f, params);
}

}  // namespace rewritenet::checks
