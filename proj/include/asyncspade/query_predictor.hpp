// Copyright 2026 The AsyncSpade Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <deque>
#include <span>
#include <string>
#include <vector>

#include "asyncspade/errors.hpp"
#include "asyncspade/linalg.hpp"

namespace asyncspade {

// Sliding buffer of the most recent per-head query vectors, oldest first.
// Every push carries all (batch, head) vectors of one decoding step.
class QueryWindow {
 public:
  QueryWindow(std::size_t capacity, std::size_t batch, std::size_t heads, std::size_t head_dim)
      : capacity_(capacity), batch_(batch), heads_(heads), head_dim_(head_dim) {
    if (capacity == 0) throw ValidationError("QueryWindow: capacity must be >= 1");
  }

  /// q is laid out (batch, head, dim); evicts the oldest step once full.
  void push(std::span<const float> q) {
    if (q.size() != batch_ * heads_ * head_dim_) {
      throw ShapeError("QueryWindow::push: got " + std::to_string(q.size()) + " values, expected " +
                       std::to_string(batch_ * heads_ * head_dim_));
    }
    if (entries_.size() == capacity_) entries_.pop_front();
    entries_.emplace_back(q.begin(), q.end());
  }

  std::size_t length() const noexcept { return entries_.size(); }
  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t batch() const noexcept { return batch_; }
  std::size_t heads() const noexcept { return heads_; }
  std::size_t head_dim() const noexcept { return head_dim_; }

  /// i = 0 is the oldest retained step.
  std::span<const float> entry(std::size_t b, std::size_t h, std::size_t i) const {
    return {entries_.at(i).data() + (b * heads_ + h) * head_dim_, head_dim_};
  }

  std::span<const float> newest(std::size_t b, std::size_t h) const { return entry(b, h, length() - 1); }

 private:
  std::size_t capacity_;
  std::size_t batch_;
  std::size_t heads_;
  std::size_t head_dim_;
  std::deque<std::vector<float>> entries_;
};

enum class EpsilonMode { kAbsolute, kRelative };
enum class WeightSign { kPositive, kNegated };
enum class AssemblyMode { kMaskedShared, kPerWindow };

struct RegressionConfig {
  std::size_t window = 16;
  // Absolute ridge term, or the factor applied to mean(diag(Q Q^T)) in relative mode.
  double epsilon = 1e-2;
  EpsilonMode epsilon_mode = EpsilonMode::kRelative;
  WeightSign weight_sign = WeightSign::kPositive;
  AssemblyMode assembly_mode = AssemblyMode::kMaskedShared;

  void validate() const {
    if (window < 1) throw ValidationError("RegressionConfig: window must be >= 1");
    if (!(epsilon >= 0.0)) throw ValidationError("RegressionConfig: epsilon must be nonnegative");
    if (epsilon_mode == EpsilonMode::kAbsolute && epsilon == 0.0) {
      throw ValidationError("RegressionConfig: absolute epsilon must be > 0");
    }
  }
};

enum class Provenance { kAssembled, kSingleWindow, kPassthrough, kReconstruction };

inline const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::kAssembled: return "assembled";
    case Provenance::kSingleWindow: return "single-window";
    case Provenance::kPassthrough: return "passthrough";
    case Provenance::kReconstruction: return "reconstruction";
  }
  return "?";
}

/// Next-step query estimate for every (batch, head), laid out (batch, head, dim).
struct PredictedQuery {
  std::size_t batch = 0;
  std::size_t heads = 0;
  std::size_t head_dim = 0;
  std::vector<float> data;
  Provenance provenance = Provenance::kPassthrough;

  std::span<const float> head(std::size_t b, std::size_t h) const {
    return {data.data() + (b * heads + h) * head_dim, head_dim};
  }
  std::span<float> head(std::size_t b, std::size_t h) { return {data.data() + (b * heads + h) * head_dim, head_dim}; }
};

/// Ridge term actually used for a history block. Relative mode never resolves to zero:
/// an all-zero history falls back to a 1e-12 floor.
inline double resolve_epsilon(const DenseMatrix<double>& history, const RegressionConfig& cfg) {
  if (cfg.epsilon_mode == EpsilonMode::kAbsolute) return cfg.epsilon;
  double diag = 0.0;
  for (std::size_t i = 0; i < history.rows(); ++i) {
    for (double x : history.row(i)) diag += x * x;
  }
  diag /= static_cast<double>(std::max<std::size_t>(history.rows(), 1));
  return std::max(cfg.epsilon * diag, 1e-12);
}

/// Raw (pre-softmax) ridge weights: (H H^T + eps I)^{-1} H target.
/// history is k x D with one historical query per row.
inline std::vector<double> solve_ridge_weights(const DenseMatrix<double>& history, std::span<const double> target,
                                               double epsilon) {
  const std::size_t k = history.rows();
  if (k == 0) throw InsufficientHistoryError("solve_ridge_weights: empty history");
  if (target.size() != history.cols()) throw ShapeError("solve_ridge_weights: target dimension mismatch");
  if (!(epsilon > 0.0)) throw ValidationError("solve_ridge_weights: epsilon must be > 0");

  DenseMatrix<double> gram = matmul(history, history, Transpose::kYes);
  for (std::size_t i = 0; i < k; ++i) gram(i, i) += epsilon;
  DenseMatrix<double> rhs(k, 1);
  for (std::size_t i = 0; i < k; ++i) {
    double acc = 0.0;
    auto r = history.row(i);
    for (std::size_t d = 0; d < target.size(); ++d) acc += r[d] * target[d];
    rhs(i, 0) = acc;
  }
  DenseMatrix<double> x = solve_spd(gram, rhs);
  return {x.data().begin(), x.data().end()};
}

inline std::vector<double> normalize_weights(std::span<const double> raw, WeightSign sign = WeightSign::kPositive) {
  if (sign == WeightSign::kPositive) return softmax(raw);
  std::vector<double> neg(raw.begin(), raw.end());
  for (double& x : neg) x = -x;
  return softmax(neg);
}

namespace detail {

// Window rows for one (batch, head), converted to double, oldest first.
inline std::vector<std::vector<double>> head_rows(const QueryWindow& w, std::size_t b, std::size_t h) {
  std::vector<std::vector<double>> rows(w.length());
  for (std::size_t i = 0; i < w.length(); ++i) {
    auto e = w.entry(b, h, i);
    rows[i].assign(e.begin(), e.end());
  }
  return rows;
}

inline DenseMatrix<double> stack_rows(const std::vector<std::vector<double>>& rows, std::size_t first,
                                      std::size_t count) {
  const std::size_t dim = rows.empty() ? 0 : rows.front().size();
  std::vector<double> data;
  data.reserve(count * dim);
  for (std::size_t i = first; i < first + count; ++i) data.insert(data.end(), rows[i].begin(), rows[i].end());
  return DenseMatrix<double>(count, dim, std::move(data));
}

// Regress the newest row from the `k` rows before it; returns normalized weights.
inline std::vector<double> regress_suffix(const std::vector<std::vector<double>>& rows, std::size_t k,
                                          const RegressionConfig& cfg) {
  const std::size_t m = rows.size() - 1;
  DenseMatrix<double> hist = stack_rows(rows, m - k, k);
  const double eps = resolve_epsilon(hist, cfg);
  std::vector<double> raw = solve_ridge_weights(hist, rows[m], eps);
  return normalize_weights(raw, cfg.weight_sign);
}

// sum_j w[j] * rows[first + j]
inline void accumulate_weighted(const std::vector<std::vector<double>>& rows, std::size_t first,
                                std::span<const double> w, std::vector<double>& acc) {
  for (std::size_t j = 0; j < w.size(); ++j) {
    const auto& r = rows[first + j];
    for (std::size_t d = 0; d < acc.size(); ++d) acc[d] += w[j] * r[d];
  }
}

inline std::vector<double> single_window_head(const std::vector<std::vector<double>>& rows,
                                              const RegressionConfig& cfg) {
  const std::size_t m = rows.size() - 1;
  std::vector<double> w = regress_suffix(rows, m, cfg);
  std::vector<double> acc(rows.front().size(), 0.0);
  // weight of Q_{t-i} is applied to Q_{t+1-i}
  accumulate_weighted(rows, 1, w, acc);
  return acc;
}

inline std::vector<double> per_window_head(const std::vector<std::vector<double>>& rows, const RegressionConfig& cfg) {
  const std::size_t m = rows.size() - 1;
  std::vector<double> acc(rows.front().size(), 0.0);
  for (std::size_t k = 1; k <= m; ++k) {
    std::vector<double> w = regress_suffix(rows, k, cfg);
    accumulate_weighted(rows, m - k + 1, w, acc);
  }
  for (double& x : acc) x /= static_cast<double>(m);
  return acc;
}

inline std::vector<double> masked_shared_head(const std::vector<std::vector<double>>& rows,
                                              const RegressionConfig& cfg) {
  const std::size_t m = rows.size() - 1;
  DenseMatrix<double> hist = stack_rows(rows, 0, m);
  std::vector<double> raw = solve_ridge_weights(hist, rows[m], resolve_epsilon(hist, cfg));
  if (cfg.weight_sign == WeightSign::kNegated) {
    for (double& x : raw) x = -x;
  }
  std::vector<double> acc(rows.front().size(), 0.0);
  std::vector<bool> mask(m, false);
  // Row k keeps the k most recent history columns; unmasking proceeds from the newest backwards.
  for (std::size_t k = 1; k <= m; ++k) {
    mask[m - k] = true;
    std::vector<double> w = softmax(raw, mask);
    accumulate_weighted(rows, m - k + 1, std::span<const double>(w).subspan(m - k), acc);
  }
  for (double& x : acc) x /= static_cast<double>(m);
  return acc;
}

template <typename HeadFn>
PredictedQuery predict_each_head(const QueryWindow& window, Provenance provenance, HeadFn&& fn) {
  PredictedQuery out{window.batch(), window.heads(), window.head_dim(),
                     std::vector<float>(window.batch() * window.heads() * window.head_dim()), provenance};
  for (std::size_t b = 0; b < window.batch(); ++b) {
    for (std::size_t h = 0; h < window.heads(); ++h) {
      std::vector<double> v = fn(head_rows(window, b, h));
      auto dst = out.head(b, h);
      for (std::size_t d = 0; d < v.size(); ++d) dst[d] = static_cast<float>(v[d]);
    }
  }
  return out;
}

inline void require_history(const QueryWindow& window, const char* who) {
  if (window.length() < 2) {
    throw InsufficientHistoryError(std::string(who) + ": window holds " + std::to_string(window.length()) +
                                   " queries, need at least 2");
  }
}

}  // namespace detail

/// One regression over the whole window, weights applied to the one-step-shifted window.
inline PredictedQuery predict_single_window(const QueryWindow& window, const RegressionConfig& cfg) {
  cfg.validate();
  detail::require_history(window, "predict_single_window");
  return detail::predict_each_head(window, Provenance::kSingleWindow,
                                   [&](const auto& rows) { return detail::single_window_head(rows, cfg); });
}

/// Average of the shifted predictions from every history length 1..m (m = window length - 1).
///
/// kPerWindow solves m independent regressions. kMaskedShared solves once over the full
/// history and re-normalizes the most recent k raw weights for candidate k, which is the
/// batched realization: one solve, a lower-triangular mask over the broadcast weights, a
/// row-wise softmax over the unmasked entries, then a mean over rows.
inline PredictedQuery predict_assembled(const QueryWindow& window, const RegressionConfig& cfg) {
  cfg.validate();
  detail::require_history(window, "predict_assembled");
  return detail::predict_each_head(window, Provenance::kAssembled, [&](const auto& rows) {
    return cfg.assembly_mode == AssemblyMode::kPerWindow ? detail::per_window_head(rows, cfg)
                                                         : detail::masked_shared_head(rows, cfg);
  });
}

/// Non-predictive reference: regress the newest query from its history and apply the
/// weights back onto that same history (no shift).
inline PredictedQuery reconstruct_unshifted(const QueryWindow& window, const RegressionConfig& cfg) {
  cfg.validate();
  detail::require_history(window, "reconstruct_unshifted");
  return detail::predict_each_head(window, Provenance::kReconstruction, [&](const auto& rows) {
    const std::size_t m = rows.size() - 1;
    std::vector<double> w = detail::regress_suffix(rows, m, cfg);
    std::vector<double> acc(rows.front().size(), 0.0);
    detail::accumulate_weighted(rows, 0, w, acc);
    return acc;
  });
}

enum class PredictorKind { kSingleWindow, kAssembled };

/// Predictor entry point used by the cache rank. Until the window holds two queries the
/// newest query is returned verbatim.
inline PredictedQuery predict_next_query(const QueryWindow& window, const RegressionConfig& cfg,
                                         PredictorKind kind = PredictorKind::kAssembled) {
  if (window.length() == 0) throw InsufficientHistoryError("predict_next_query: empty window");
  if (window.length() < 2) {
    PredictedQuery out{window.batch(), window.heads(), window.head_dim(), {}, Provenance::kPassthrough};
    out.data.reserve(window.batch() * window.heads() * window.head_dim());
    for (std::size_t b = 0; b < window.batch(); ++b) {
      for (std::size_t h = 0; h < window.heads(); ++h) {
        auto e = window.newest(b, h);
        out.data.insert(out.data.end(), e.begin(), e.end());
      }
    }
    return out;
  }
  return kind == PredictorKind::kAssembled ? predict_assembled(window, cfg) : predict_single_window(window, cfg);
}

}  // namespace asyncspade
