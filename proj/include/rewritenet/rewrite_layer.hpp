#pragma once

// A single rewrite layer: layer norm, convolutional pattern matching against
// a rule bank, conflict resolution, then variable-length rewriting of the
// sequence with a residual on rows that were copied through.

#include <cmath>
#include <string>
#include <vector>

#include "rewritenet/assignment.hpp"
#include "rewritenet/error.hpp"
#include "rewritenet/rng.hpp"
#include "rewritenet/tensor.hpp"

namespace rewritenet {

struct RuleBank {
  Tensor patterns;      // R x Lp x d
  Tensor replacements;  // R x Lq x d (Lq may be 0)
  Tensor copy_bias;     // {1}
  std::size_t R = 0, Lp = 0, Lq = 0;

  std::size_t d() const { return patterns.dim(2); }

  void validate() const {
    if (R < 1) throw ConfigError("rule bank: R must be >= 1");
    if (Lp < 1) throw ConfigError("rule bank: Lp must be >= 1");
    if (patterns.shape() != Shape{R, Lp, patterns.dim(2)})
      throw ShapeError("rule bank: patterns have shape " + shape_string(patterns.shape()));
    if (replacements.shape() != Shape{R, Lq, patterns.dim(2)})
      throw ShapeError("rule bank: replacements have shape " + shape_string(replacements.shape()));
    if (copy_bias.numel() != 1) throw ShapeError("rule bank: copy_bias must be a scalar");
  }
};

struct LayerConfig {
  std::size_t d = 64;
  std::size_t R = 32;
  std::size_t Lp = 2;
  std::size_t Lq = 1;
  bool residual_enabled = true;
  AssignmentConfig assignment;
  double dropout = 0.0;

  void validate() const {
    if (d < 1) throw ConfigError("layer: d must be >= 1");
    if (R < 1) throw ConfigError("layer: R must be >= 1");
    if (Lp < 1) throw ConfigError("layer: Lp must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("layer: dropout must be in [0,1)");
    assignment.validate();
  }
};

/// Layer parameters: the pre-norm affine pair plus the rule bank.
struct LayerParams {
  Tensor norm_gain;
  Tensor norm_bias;
  RuleBank bank;
};

/// S[i, r] = sum_k <X[i+k], P[r, k]> / sqrt(d), shape (n - Lp + 1) x R.
inline Tensor match_scores(const Tensor& X, const RuleBank& bank) {
  if (X.rank() != 2) throw ShapeError("match_scores: expected a matrix, got " + shape_string(X.shape()));
  if (X.rows() < bank.Lp) {
    throw ShapeError("match_scores: sequence of length " + std::to_string(X.rows()) +
                     " is shorter than pattern length " + std::to_string(bank.Lp));
  }
  return ops::scale(ops::conv1d_valid(X, bank.patterns),
                    1.0 / std::sqrt(static_cast<double>(X.cols())));
}

/// Where an output row came from. `begin`/`end` index input rows.
struct RowOrigin {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool rewritten = false;
  std::size_t position = 0;  // row of the gate matrix (== begin)
  std::size_t column = 0;    // rule index, or the copy column
  bool gated = false;        // false for tail rows that have no gate entry
};

/// A fire of a deletion rule (Lq == 0). It emits no rows; it sits in the gap
/// before output row `gap`.
struct Deletion {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t position = 0;
  std::size_t column = 0;
  std::size_t gap = 0;
};

struct RewriteResult {
  Tensor Y;
  std::vector<RowOrigin> origins;  // one per output row
  std::vector<Deletion> deletions;
  std::size_t fires = 0;
};

/// Builds the output sequence left to right. A rule r chosen at row i emits
/// Lq rows gate[i,r] * q_r[k] + (1 - gate[i,r]) * mean(H[i .. i+Lp-1]) and
/// skips Lp input rows; a copy emits gate[i,copy] * H[i]. Rows past the last
/// window (i > n - Lp) have no gate and are copied with weight 1. `gate` may be
/// undefined when no window exists.
inline RewriteResult apply_rewrites(const Tensor& H, const std::vector<Fire>& applied,
                                    const RuleBank& bank, const Tensor& gate) {
  if (H.rank() != 2) throw ShapeError("apply_rewrites: expected a matrix, got " + shape_string(H.shape()));
  const std::size_t n = H.rows(), d = H.cols(), Lp = bank.Lp, Lq = bank.Lq;
  const std::size_t windows = n >= Lp ? n - Lp + 1 : 0;
  const std::size_t copy = bank.R;
  if (applied.size() != windows) {
    throw ShapeError("apply_rewrites: " + std::to_string(applied.size()) +
                     " assignment rows for " + std::to_string(windows) + " windows");
  }
  if (windows > 0 && (!gate.defined() || gate.shape() != Shape{windows, bank.R + 1})) {
    throw ShapeError("apply_rewrites: gate shape mismatch, expected [" + std::to_string(windows) +
                     "," + std::to_string(bank.R + 1) + "]");
  }
  if (bank.replacements.dim(2) != d) {
    throw ShapeError("apply_rewrites: shape mismatch " + shape_string(H.shape()) + " vs " +
                     shape_string(bank.replacements.shape()));
  }

  RewriteResult out;
  std::vector<double> y;
  y.reserve(n * d);
  const auto Hd = H.data();
  const auto Qd = bank.replacements.data();
  std::size_t i = 0;
  while (i < n) {
    const bool has_gate = i < windows;
    const std::size_t col = has_gate ? applied[i].column : copy;
    if (col > copy) throw ShapeError("apply_rewrites: column out of range");
    if (col != copy) {
      const double g = gate.at(i, col);
      std::vector<double> mean(d, 0.0);
      for (std::size_t k = 0; k < Lp; ++k)
        for (std::size_t j = 0; j < d; ++j) mean[j] += Hd[(i + k) * d + j];
      for (auto& v : mean) v /= static_cast<double>(Lp);
      if (Lq == 0) {
        out.deletions.push_back({i, i + Lp, i, col, out.origins.size()});
      }
      for (std::size_t k = 0; k < Lq; ++k) {
        const double* q = Qd.data() + (col * Lq + k) * d;
        for (std::size_t j = 0; j < d; ++j) y.push_back(g * q[j] + (1.0 - g) * mean[j]);
        out.origins.push_back({i, i + Lp, true, i, col, true});
      }
      ++out.fires;
      i += Lp;
    } else {
      const double g = has_gate ? gate.at(i, copy) : 1.0;
      for (std::size_t j = 0; j < d; ++j) y.push_back(g * Hd[i * d + j]);
      out.origins.push_back({i, i + 1, false, i, copy, has_gate});
      ++i;
    }
  }

  const std::size_t m = out.origins.size();
  std::vector<Tensor> parents{H, bank.replacements};
  if (gate.defined()) parents.push_back(gate);
  out.Y = make_op(
      {m, d}, std::move(y), parents,
      [H, Q = bank.replacements, gate, origins = out.origins, d, Lp, Lq,
       copy](const std::vector<double>& g) mutable {
        const auto Hd = H.data();
        const auto Qd = Q.data();
        std::span<double> gh, gq, gg;
        if (H.requires_grad()) gh = H.grad_buffer();
        if (Q.requires_grad() && Q.numel() > 0) gq = Q.grad_buffer();
        if (gate.defined() && gate.requires_grad()) gg = gate.grad_buffer();
        const std::size_t gate_cols = copy + 1;
        std::size_t row = 0;
        while (row < origins.size()) {
          const auto& o = origins[row];
          if (!o.rewritten) {
            const double gv = o.gated ? gate.at(o.position, copy) : 1.0;
            const double* dy = g.data() + row * d;
            const double* h = Hd.data() + o.begin * d;
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              if (!gh.empty()) gh[o.begin * d + j] += gv * dy[j];
              dot += dy[j] * h[j];
            }
            if (o.gated && !gg.empty()) gg[o.position * gate_cols + copy] += dot;
            ++row;
            continue;
          }
          // Lq consecutive rows of one fire
          const double gv = gate.at(o.position, o.column);
          std::vector<double> mean(d, 0.0);
          for (std::size_t k = 0; k < Lp; ++k)
            for (std::size_t j = 0; j < d; ++j) mean[j] += Hd[(o.begin + k) * d + j];
          for (auto& v : mean) v /= static_cast<double>(Lp);
          std::vector<double> dmean(d, 0.0);
          double dgate = 0.0;
          for (std::size_t k = 0; k < Lq; ++k, ++row) {
            const double* dy = g.data() + row * d;
            const double* q = Qd.data() + (o.column * Lq + k) * d;
            for (std::size_t j = 0; j < d; ++j) {
              if (!gq.empty()) gq[(o.column * Lq + k) * d + j] += gv * dy[j];
              dmean[j] += (1.0 - gv) * dy[j];
              dgate += dy[j] * (q[j] - mean[j]);
            }
          }
          if (!gh.empty()) {
            for (std::size_t k = 0; k < Lp; ++k)
              for (std::size_t j = 0; j < d; ++j)
                gh[(o.begin + k) * d + j] += dmean[j] / static_cast<double>(Lp);
          }
          if (!gg.empty()) gg[o.position * gate_cols + o.column] += dgate;
        }
      },
      "apply_rewrites");
  return out;
}

/// Y[r] += X[origin(r)] for every copied output row.
inline Tensor add_copy_residual(const Tensor& Y, const Tensor& X, const std::vector<RowOrigin>& origins) {
  if (Y.rows() != origins.size() || Y.cols() != X.cols()) {
    throw ShapeError("add_copy_residual: shape mismatch " + shape_string(Y.shape()) + " vs " +
                     shape_string(X.shape()));
  }
  const std::size_t d = Y.cols();
  std::vector<double> out(Y.data().begin(), Y.data().end());
  for (std::size_t r = 0; r < origins.size(); ++r) {
    if (origins[r].rewritten) continue;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] += X.at(origins[r].begin, j);
  }
  return make_op(Y.shape(), std::move(out), {Y, X},
                 [Y, X, origins, d](const std::vector<double>& g) mutable {
                   if (Y.requires_grad()) {
                     auto gy = Y.grad_buffer();
                     for (std::size_t i = 0; i < g.size(); ++i) gy[i] += g[i];
                   }
                   if (X.requires_grad()) {
                     auto gx = X.grad_buffer();
                     for (std::size_t r = 0; r < origins.size(); ++r) {
                       if (origins[r].rewritten) continue;
                       for (std::size_t j = 0; j < d; ++j) gx[origins[r].begin * d + j] += g[r * d + j];
                     }
                   }
                 },
                 "add_copy_residual");
}

struct LayerOptions {
  bool training = false;
  Rng* rng = nullptr;                   // Gumbel noise and dropout; required when training
  const std::vector<Fire>* frozen = nullptr;
  bool soft_gates = false;
  ColumnPolicy policy = ColumnPolicy::capped_free_last;
};

struct LayerOutput {
  Tensor Y;
  Tensor H;                      // normalized input
  bool matched = false;          // false when n < Lp (pure copy)
  AssignmentResult assignment;   // valid when matched
  RewriteResult rewrite;
};

inline LayerOutput layer_forward(const Tensor& X, const LayerConfig& cfg, const LayerParams& params,
                                 const LayerOptions& opts = {}) {
  if (X.rank() != 2 || X.cols() != cfg.d) {
    throw ShapeError("layer_forward: expected [n," + std::to_string(cfg.d) + "], got " +
                     shape_string(X.shape()));
  }
  if (X.rows() == 0) throw ShapeError("layer_forward: empty sequence");
  if (opts.training && !opts.rng) throw ConfigError("layer_forward: training needs an rng");
  const auto& bank = params.bank;

  LayerOutput out;
  out.H = ops::layer_norm(X, params.norm_gain, params.norm_bias);
  const std::size_t n = X.rows();
  std::vector<Fire> applied;
  Tensor gate;
  if (n >= bank.Lp) {
    const Tensor S = match_scores(out.H, bank);
    const Tensor scores = ops::concat_cols(S, ops::repeat_rows(bank.copy_bias, S.rows()));
    Rng fallback(cfg.assignment.rng_seed);
    ResolveOptions ro;
    ro.training = opts.training;
    ro.policy = opts.policy;
    ro.frozen = opts.frozen;
    ro.soft_gates = opts.soft_gates;
    out.assignment = resolve_conflicts(scores, bank.Lp, cfg.assignment,
                                       opts.rng ? *opts.rng : fallback, ro);
    out.matched = true;
    applied = out.assignment.applied;
    gate = out.assignment.gate;
  } else if (opts.frozen && !opts.frozen->empty()) {
    throw ShapeError("layer_forward: frozen structure given for a sequence without windows");
  }
  out.rewrite = apply_rewrites(out.H, applied, bank, gate);
  Tensor Y = out.rewrite.Y;
  if (cfg.dropout > 0.0 && opts.training && Y.rows() > 0) {
    std::vector<bool> mask(Y.rows());
    for (std::size_t r = 0; r < mask.size(); ++r) mask[r] = out.rewrite.origins[r].rewritten;
    Y = ops::dropout(Y, cfg.dropout, *opts.rng, true, mask);
  }
  if (cfg.residual_enabled && Y.rows() > 0) Y = add_copy_residual(Y, X, out.rewrite.origins);
  out.Y = Y;
  return out;
}

}  // namespace rewritenet
