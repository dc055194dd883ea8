#pragma once

// Conflict resolution between overlapping rule matches: Gumbel perturbation,
// log-space Sinkhorn normalization, greedy non-overlapping hard decoding and
// the straight-through gate that carries the soft gradient.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "rewritenet/error.hpp"
#include "rewritenet/rng.hpp"
#include "rewritenet/tensor.hpp"

namespace rewritenet {

struct AssignmentConfig {
  double temperature = 1.0;
  int sinkhorn_iters = 10;
  bool gumbel_enabled = true;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("assignment: temperature must be > 0");
    if (sinkhorn_iters < 1) throw ConfigError("assignment: sinkhorn_iters must be >= 1");
  }
};

/// How column normalization treats the columns of the score matrix.
///   balanced: every column is scaled to sum to 1 (classic Sinkhorn-Knopp).
///   capped_free_last: a column is scaled down only when its mass exceeds 1,
///     and the last (copy) column is never column-normalized. A rule may then
///     fire at several positions while copy stays available to every row.
enum class ColumnPolicy { balanced, capped_free_last };

/// One row of the decoded assignment: the column chosen at `position`.
/// `column == copy_column` means no rule fires there.
struct Fire {
  std::size_t position = 0;
  std::size_t column = 0;
  friend bool operator==(const Fire&, const Fire&) = default;
};

/// S' = S + G with G ~ Gumbel(0, 1) i.i.d.; S itself when noise is disabled.
inline Tensor gumbel_perturb(const Tensor& scores, const AssignmentConfig& cfg, Rng& rng) {
  if (!cfg.gumbel_enabled) return scores;
  std::vector<double> noise(scores.numel());
  for (auto& g : noise) g = -std::log(-std::log(rng.uniform()));
  return ops::add(scores, Tensor(scores.shape(), std::move(noise)));
}

/// Seeded from cfg.rng_seed; identical seeds give bit-identical output.
inline Tensor gumbel_perturb(const Tensor& scores, const AssignmentConfig& cfg) {
  Rng rng(cfg.rng_seed);
  return gumbel_perturb(scores, cfg, rng);
}

/// exp(S'/tau) normalized by alternating row and column passes, `iters`
/// times, finishing with a row pass so rows sum to exactly 1. All arithmetic
/// happens on logarithms; the op is differentiable through every pass.
inline Tensor sinkhorn_normalize(const Tensor& logits, double tau, int iters,
                                 ColumnPolicy policy = ColumnPolicy::balanced) {
  if (logits.rank() != 2) throw ShapeError("sinkhorn_normalize: expected a matrix");
  if (!(tau > 0.0)) throw ShapeError("sinkhorn_normalize: temperature must be > 0");
  if (iters < 1) throw ShapeError("sinkhorn_normalize: iters must be >= 1");
  const std::size_t n = logits.rows(), c = logits.cols();
  const std::size_t normalized_cols =
      (policy == ColumnPolicy::capped_free_last && c > 0) ? c - 1 : c;

  std::vector<double> L(n * c);
  for (std::size_t i = 0; i < L.size(); ++i) L[i] = logits[i] / tau;

  // Post-normalization log matrices for the backward pass, plus which columns
  // each column pass actually rescaled.
  std::vector<std::vector<double>> row_steps, col_steps;
  std::vector<std::vector<char>> col_active;

  auto row_pass = [&] {
    for (std::size_t i = 0; i < n; ++i) {
      double* r = L.data() + i * c;
      const double mx = *std::max_element(r, r + c);
      double z = 0.0;
      for (std::size_t j = 0; j < c; ++j) z += std::exp(r[j] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t j = 0; j < c; ++j) r[j] -= lse;
    }
    row_steps.push_back(L);
  };
  auto col_pass = [&] {
    std::vector<char> active(c, 0);
    for (std::size_t j = 0; j < normalized_cols; ++j) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, L[i * c + j]);
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i) z += std::exp(L[i * c + j] - mx);
      const double lse = mx + std::log(z);
      if (policy == ColumnPolicy::capped_free_last && lse <= 0.0) continue;
      active[j] = 1;
      for (std::size_t i = 0; i < n; ++i) L[i * c + j] -= lse;
    }
    col_steps.push_back(L);
    col_active.push_back(std::move(active));
  };

  for (int it = 0; it < iters; ++it) {
    row_pass();
    col_pass();
  }
  row_pass();

  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(L[i]);

  return make_op(
      logits.shape(), out, {logits},
      [logits, out, row_steps = std::move(row_steps), col_steps = std::move(col_steps),
       col_active = std::move(col_active), n, c, tau, iters](const std::vector<double>& g) mutable {
        // d/dL of sum g * exp(L_final)
        std::vector<double> d(n * c);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * out[i];
        auto back_row = [&](const std::vector<double>& y) {
          for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < c; ++j) s += d[i * c + j];
            for (std::size_t j = 0; j < c; ++j) d[i * c + j] -= std::exp(y[i * c + j]) * s;
          }
        };
        auto back_col = [&](const std::vector<double>& y, const std::vector<char>& active) {
          for (std::size_t j = 0; j < c; ++j) {
            if (!active[j]) continue;
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += d[i * c + j];
            for (std::size_t i = 0; i < n; ++i) d[i * c + j] -= std::exp(y[i * c + j]) * s;
          }
        };
        back_row(row_steps.back());
        for (int it = iters - 1; it >= 0; --it) {
          back_col(col_steps[static_cast<std::size_t>(it)], col_active[static_cast<std::size_t>(it)]);
          back_row(row_steps[static_cast<std::size_t>(it)]);
        }
        auto gl = logits.grad_buffer();
        for (std::size_t i = 0; i < d.size(); ++i) gl[i] += d[i] / tau;
      },
      "sinkhorn_normalize");
}

struct HardAssignment {
  Tensor hard;                // 0/1 matrix, one 1 per row
  std::vector<Fire> applied;  // one entry per row, sorted by position
  std::size_t copy_column = 0;

  /// Non-copy entries only.
  std::vector<Fire> fires() const {
    std::vector<Fire> out;
    for (const auto& f : applied)
      if (f.column != copy_column) out.push_back(f);
    return out;
  }
};

/// Builds the 0/1 matrix for a given list of per-row choices.
inline Tensor assignment_matrix(const std::vector<Fire>& applied, std::size_t rows,
                                std::size_t cols) {
  std::vector<double> m(rows * cols, 0.0);
  for (const auto& f : applied) m[f.position * cols + f.column] = 1.0;
  return Tensor({rows, cols}, std::move(m));
}

/// Greedy left-to-right decoding of a row-stochastic matrix whose last
/// column is the copy column. At each uncovered row the argmax column is
/// chosen (copy wins ties, then the lowest rule index); a rule choice covers
/// the next `pattern_len` positions, whose rows are forced to copy.
inline HardAssignment hard_decode(const Tensor& soft, std::size_t pattern_len) {
  if (soft.rank() != 2 || soft.cols() < 1) throw ShapeError("hard_decode: expected a matrix");
  if (pattern_len < 1) throw ShapeError("hard_decode: pattern length must be >= 1");
  const std::size_t n = soft.rows(), c = soft.cols(), copy = c - 1;
  HardAssignment out;
  out.copy_column = copy;
  out.applied.reserve(n);
  std::size_t covered_until = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = copy;
    if (i >= covered_until) {
      double best_value = soft.at(i, copy);
      for (std::size_t r = 0; r < copy; ++r) {
        if (soft.at(i, r) > best_value) {
          best_value = soft.at(i, r);
          best = r;
        }
      }
      if (best != copy) covered_until = i + pattern_len;
    }
    out.applied.push_back({i, best});
  }
  out.hard = assignment_matrix(out.applied, n, c);
  return out;
}

/// Value equal to `hard`; the gradient flows to `soft` unchanged
/// (hard + soft - stop_gradient(soft)).
inline Tensor straight_through_gate(const Tensor& hard, const Tensor& soft) {
  if (hard.shape() != soft.shape()) {
    throw ShapeError("straight_through_gate: shape mismatch " + shape_string(hard.shape()) +
                     " vs " + shape_string(soft.shape()));
  }
  std::vector<double> value(hard.data().begin(), hard.data().end());
  return make_op(hard.shape(), std::move(value), {soft},
                 [soft](const std::vector<double>& g) mutable {
                   auto gs = soft.grad_buffer();
                   for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
                 },
                 "straight_through_gate");
}

struct AssignmentResult {
  Tensor scores;     // S, including the copy column
  Tensor perturbed;  // S'
  Tensor soft;       // M~
  Tensor hard;       // M
  Tensor gate;       // forward value M (or M~ on the soft path), gradient to M~
  std::vector<Fire> applied;
  std::size_t copy_column = 0;

  std::vector<Fire> fires() const {
    std::vector<Fire> out;
    for (const auto& f : applied)
      if (f.column != copy_column) out.push_back(f);
    return out;
  }
};

struct ResolveOptions {
  bool training = false;  // Gumbel noise only while training
  ColumnPolicy policy = ColumnPolicy::capped_free_last;
  // Reuse a previously decoded structure instead of decoding (gradient checks).
  const std::vector<Fire>* frozen = nullptr;
  // Gate takes the soft value instead of the hard one, making the whole
  // forward a smooth function of the scores.
  bool soft_gates = false;
};

/// Full pipeline: perturb, normalize, decode, gate.
inline AssignmentResult resolve_conflicts(const Tensor& scores, std::size_t pattern_len,
                                          const AssignmentConfig& cfg, Rng& rng,
                                          const ResolveOptions& opts = {}) {
  cfg.validate();
  AssignmentResult out;
  out.scores = scores;
  out.perturbed = (opts.training && cfg.gumbel_enabled) ? gumbel_perturb(scores, cfg, rng) : scores;
  out.soft = sinkhorn_normalize(out.perturbed, cfg.temperature, cfg.sinkhorn_iters, opts.policy);
  out.copy_column = scores.cols() - 1;
  if (opts.frozen) {
    if (opts.frozen->size() != scores.rows()) {
      throw ShapeError("resolve_conflicts: frozen structure has " +
                       std::to_string(opts.frozen->size()) + " rows, scores have " +
                       std::to_string(scores.rows()));
    }
    out.applied = *opts.frozen;
    out.hard = assignment_matrix(out.applied, scores.rows(), scores.cols());
  } else {
    auto decoded = hard_decode(out.soft, pattern_len);
    out.applied = std::move(decoded.applied);
    out.hard = decoded.hard;
  }
  out.gate = opts.soft_gates ? out.soft : straight_through_gate(out.hard, out.soft);
  return out;
}

}  // namespace rewritenet
