#pragma once

// Cluster -> digit assignment from sum supervision.
//
// Every example contributes one linear equation over the k cluster variables:
//   sum_c A[e][c] * v_c = s_e,  A[e][c] = sum of positional weights of the cells whose image is in c.
// A batch is solved for the digit vector v in {0..9}^k minimising sum_e |A[e] . v - s_e| by exact
// depth-first branch and bound; the corpus-level answer is the batch solution that satisfies the
// most equations over the whole corpus.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "digitsum/clustering.hpp"
#include "digitsum/dataset.hpp"
#include "digitsum/error.hpp"

namespace digitsum {

inline constexpr int max_digit = 9;

struct BatchSystem {
  int k = 0;
  std::vector<std::int64_t> coefficients;  // rows() x k, row-major
  std::vector<std::int64_t> targets;

  std::size_t rows() const noexcept { return targets.size(); }
  std::int64_t at(std::size_t e, int c) const { return coefficients[e * static_cast<std::size_t>(k) + c]; }
  std::int64_t& at(std::size_t e, int c) { return coefficients[e * static_cast<std::size_t>(k) + c]; }

  std::int64_t column_mass(int c) const {
    std::int64_t m = 0;
    for (std::size_t e = 0; e < rows(); ++e) m += at(e, c);
    return m;
  }

  // A[e] . digits
  std::int64_t evaluate(std::size_t e, std::span<const int> digits) const {
    std::int64_t v = 0;
    for (int c = 0; c < k; ++c) v += at(e, c) * digits[c];
    return v;
  }

  std::int64_t l1_residual(std::span<const int> digits) const {
    std::int64_t r = 0;
    for (std::size_t e = 0; e < rows(); ++e) r += std::abs(evaluate(e, digits) - targets[e]);
    return r;
  }

  std::int64_t satisfied(std::span<const int> digits) const {
    std::int64_t n = 0;
    for (std::size_t e = 0; e < rows(); ++e) n += evaluate(e, digits) == targets[e];
    return n;
  }
};

struct DigitAssignment {
  std::vector<int> digits;           // digits[c] in [0,9]
  std::int64_t objective = 0;        // L1 residual on the batch it was solved on
  std::int64_t satisfied_count = 0;  // examples satisfied exactly (batch or corpus, see producer)
  std::int64_t corpus_residual = 0;  // L1 residual over the whole corpus (solve_corpus only)
  std::int64_t batch_index = 0;
  std::int64_t nodes = 0;            // branch-and-bound nodes expanded
};

inline BatchSystem build_batch_system(std::span<const Example> examples, std::span<const std::int32_t> cluster_of,
                                      int k) {
  BatchSystem sys;
  sys.k = k;
  sys.coefficients.assign(examples.size() * static_cast<std::size_t>(k), 0);
  sys.targets.reserve(examples.size());
  for (std::size_t e = 0; e < examples.size(); ++e) {
    const auto& ex = examples[e];
    for (std::size_t cell = 0; cell < ex.cells(); ++cell) {
      const ImageId id = ex.ids[cell];
      if (id >= cluster_of.size()) {
        throw consistency_error("image " + std::to_string(id) + " has no cluster (model covers " +
                                std::to_string(cluster_of.size()) + " images)");
      }
      sys.at(e, cluster_of[id]) += ex.weight(cell);
    }
    sys.targets.push_back(ex.sum);
  }
  return sys;
}

inline BatchSystem build_batch_system(std::span<const Example> examples, const ClusterModel& model) {
  return build_batch_system(examples, model.assignment, model.k);
}

namespace detail {

inline std::int64_t interval_distance(std::int64_t target, std::int64_t lo, std::int64_t hi) {
  if (target < lo) return lo - target;
  if (target > hi) return target - hi;
  return 0;
}

class BranchAndBound {
 public:
  explicit BranchAndBound(const BatchSystem& sys) : sys_(sys), k_(sys.k) {
    columns_.resize(static_cast<std::size_t>(k_));
    for (std::size_t e = 0; e < sys.rows(); ++e) {
      for (int c = 0; c < k_; ++c) {
        if (sys.at(e, c) != 0) columns_[static_cast<std::size_t>(c)].push_back({e, sys.at(e, c)});
      }
    }
    order_.resize(static_cast<std::size_t>(k_));
    std::iota(order_.begin(), order_.end(), 0);
    std::vector<std::int64_t> mass(static_cast<std::size_t>(k_));
    for (int c = 0; c < k_; ++c) mass[static_cast<std::size_t>(c)] = sys.column_mass(c);
    std::stable_sort(order_.begin(), order_.end(),
                     [&](int a, int b) { return mass[static_cast<std::size_t>(a)] > mass[static_cast<std::size_t>(b)]; });

    fixed_.assign(sys.rows(), 0);
    free_.assign(sys.rows(), 0);
    for (std::size_t e = 0; e < sys.rows(); ++e) {
      for (int c = 0; c < k_; ++c) free_[e] += sys.at(e, c);
    }
    bound_ = 0;
    for (std::size_t e = 0; e < sys.rows(); ++e) bound_ += row_bound(e);
    digits_.assign(static_cast<std::size_t>(k_), -1);
    point_.assign(static_cast<std::size_t>(k_), 0.5 * max_digit);
    residual_.assign(sys.rows(), 0.0);
    sign_.assign(sys.rows(), 0);
  }

  DigitAssignment solve() {
    seed_incumbent();
    search(0);
    DigitAssignment out;
    out.digits = best_;
    out.objective = best_cost_;
    out.satisfied_count = sys_.satisfied(best_);
    out.nodes = nodes_;
    return out;
  }

 private:
  struct Entry {
    std::size_t row;
    std::int64_t coef;
  };

  std::int64_t row_bound(std::size_t e) const {
    return interval_distance(sys_.targets[e], fixed_[e], fixed_[e] + max_digit * free_[e]);
  }

  // Coordinate descent from all zeros; only provides a starting incumbent.
  void seed_incumbent() {
    std::vector<int> v(static_cast<std::size_t>(k_), 0);
    std::int64_t cost = sys_.l1_residual(v);
    for (bool improved = true; improved;) {
      improved = false;
      for (int c = 0; c < k_; ++c) {
        const int keep = v[static_cast<std::size_t>(c)];
        for (int d = 0; d <= max_digit; ++d) {
          if (d == keep) continue;
          v[static_cast<std::size_t>(c)] = d;
          const std::int64_t trial = sys_.l1_residual(v);
          if (trial < cost || (trial == cost && d < keep)) {
            cost = trial;
            improved = true;
            break;
          }
          v[static_cast<std::size_t>(c)] = keep;
        }
      }
    }
    best_ = v;
    best_cost_ = cost;
  }

  // Lexicographically smallest completion of the current partial assignment (free digits = 0)
  // compared with the incumbent.
  bool incumbent_not_after_completions() const {
    for (int c = 0; c < k_; ++c) {
      const int lowest = std::max(digits_[static_cast<std::size_t>(c)], 0);
      if (best_[static_cast<std::size_t>(c)] != lowest) return best_[static_cast<std::size_t>(c)] < lowest;
    }
    return true;
  }

  bool prune(std::int64_t bound) const {
    if (bound > best_cost_) return true;
    return bound == best_cost_ && incumbent_not_after_completions();
  }

  std::int64_t child_bound(int c, int v) const {
    std::int64_t b = bound_;
    for (const auto& [e, a] : columns_[static_cast<std::size_t>(c)]) {
      b -= row_bound(e);
      const std::int64_t lo = fixed_[e] + a * v;
      b += interval_distance(sys_.targets[e], lo, lo + max_digit * (free_[e] - a));
    }
    return b;
  }

  void apply(int c, int v, int sign) {
    for (const auto& [e, a] : columns_[static_cast<std::size_t>(c)]) {
      bound_ -= row_bound(e);
      fixed_[e] += sign * a * v;
      free_[e] -= sign * a;
      bound_ += row_bound(e);
    }
  }

  // Weak duality for min sum_e |A v - r| over the box: for any y in [-1, 1]^m,
  //   sum_e |(A v)_e - r_e| >= y.(A v - r) >= -y.r + sum_{free c} min(0, 9 (A^T y)_c).
  // y is the sign pattern of the residual at a continuous point refined by coordinate descent
  // (weighted medians), warm-started from the previous node. Integer y keeps the bound exact.
  std::int64_t dual_bound() {
    const std::size_t m = sys_.rows();
    for (std::size_t e = 0; e < m; ++e) residual_[e] = static_cast<double>(fixed_[e] - sys_.targets[e]);
    for (int c = 0; c < k_; ++c) {
      auto& p = point_[static_cast<std::size_t>(c)];
      if (digits_[static_cast<std::size_t>(c)] >= 0) p = digits_[static_cast<std::size_t>(c)];
      else for (const auto& [e, a] : columns_[static_cast<std::size_t>(c)]) residual_[e] += static_cast<double>(a) * p;
    }
    for (int sweep = 0; sweep < 2; ++sweep) {
      for (int c = 0; c < k_; ++c) {
        if (digits_[static_cast<std::size_t>(c)] >= 0) continue;
        const auto& col = columns_[static_cast<std::size_t>(c)];
        auto& p = point_[static_cast<std::size_t>(c)];
        knots_.clear();
        double total = 0;
        for (const auto& [e, a] : col) {
          const double w = static_cast<double>(a);
          knots_.push_back({p - residual_[e] / w, w});
          total += w;
        }
        std::sort(knots_.begin(), knots_.end());
        double next = knots_.empty() ? p : knots_.back().first, acc = 0;
        for (const auto& [t, w] : knots_) {
          acc += w;
          if (2 * acc >= total) {
            next = t;
            break;
          }
        }
        next = std::clamp(next, 0.0, static_cast<double>(max_digit));
        for (const auto& [e, a] : col) residual_[e] += static_cast<double>(a) * (next - p);
        p = next;
      }
    }
    std::int64_t bound = 0;
    for (std::size_t e = 0; e < m; ++e) {
      const double tol = 1e-9 * (1.0 + std::abs(static_cast<double>(sys_.targets[e])));
      const int y = residual_[e] > tol ? 1 : (residual_[e] < -tol ? -1 : 0);
      sign_[e] = y;
      bound += y * (fixed_[e] - sys_.targets[e]);
    }
    for (int c = 0; c < k_; ++c) {
      if (digits_[static_cast<std::size_t>(c)] >= 0) continue;
      std::int64_t g = 0;
      for (const auto& [e, a] : columns_[static_cast<std::size_t>(c)]) g += sign_[e] * a;
      bound += std::min<std::int64_t>(0, max_digit * g);
    }
    return bound;
  }

  void search(std::size_t depth) {
    ++nodes_;
    if (depth == order_.size()) {
      // All variables fixed: the bound is the exact objective.
      if (bound_ < best_cost_ || (bound_ == best_cost_ && digits_ < best_)) {
        best_cost_ = bound_;
        best_ = digits_;
      }
      return;
    }
    if (depth + 1 < order_.size() && prune(std::max(bound_, dual_bound()))) return;
    const int c = order_[depth];
    std::array<std::pair<std::int64_t, int>, max_digit + 1> children{};
    for (int v = 0; v <= max_digit; ++v) children[static_cast<std::size_t>(v)] = {child_bound(c, v), v};
    std::stable_sort(children.begin(), children.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [bound, v] : children) {
      digits_[static_cast<std::size_t>(c)] = v;
      if (prune(bound)) continue;
      apply(c, v, +1);
      search(depth + 1);
      apply(c, v, -1);
    }
    digits_[static_cast<std::size_t>(c)] = -1;
  }

  const BatchSystem& sys_;
  int k_;
  std::vector<std::vector<Entry>> columns_;
  std::vector<int> order_;
  std::vector<std::int64_t> fixed_;
  std::vector<std::int64_t> free_;
  std::int64_t bound_ = 0;
  std::vector<int> digits_;
  std::vector<int> best_;
  std::int64_t best_cost_ = std::numeric_limits<std::int64_t>::max();
  std::int64_t nodes_ = 0;
  std::vector<double> point_;
  std::vector<double> residual_;
  std::vector<int> sign_;
  std::vector<std::pair<double, double>> knots_;
};

}  // namespace detail

// Lower bound on the objective of every completion of `partial` (nullopt = free variable): each
// example contributes the distance from its target to the interval its equation can still reach.
inline std::int64_t partial_lower_bound(const BatchSystem& sys, std::span<const std::optional<int>> partial) {
  if (partial.size() != static_cast<std::size_t>(sys.k)) throw argument_error("partial assignment has wrong length");
  std::int64_t total = 0;
  for (std::size_t e = 0; e < sys.rows(); ++e) {
    std::int64_t fixed = 0, free = 0;
    for (int c = 0; c < sys.k; ++c) {
      if (partial[static_cast<std::size_t>(c)]) fixed += sys.at(e, c) * *partial[static_cast<std::size_t>(c)];
      else free += sys.at(e, c);
    }
    total += detail::interval_distance(sys.targets[e], fixed, fixed + max_digit * free);
  }
  return total;
}

// Global minimiser of the L1 residual; ties resolve to the lexicographically smallest digit vector.
inline DigitAssignment solve_batch(const BatchSystem& sys) {
  if (sys.k < 1 || sys.k > 10) throw argument_error("solver supports 1..10 cluster variables");
  if (sys.coefficients.size() != sys.rows() * static_cast<std::size_t>(sys.k)) {
    throw shape_error("coefficient matrix does not match row count");
  }
  return detail::BranchAndBound(sys).solve();
}

inline std::int64_t count_satisfied(std::span<const int> digits, const Corpus& corpus, const ClusterModel& model) {
  return build_batch_system(corpus.examples, model).satisfied(digits);
}

inline std::int64_t count_satisfied(const DigitAssignment& a, const Corpus& corpus, const ClusterModel& model) {
  return count_satisfied(a.digits, corpus, model);
}

// Solves contiguous batches of `batch_size` examples independently and keeps the candidate with the
// most corpus-wide satisfied equations (ties: lower corpus residual, then lower batch index).
inline DigitAssignment solve_corpus(const Corpus& corpus, const ClusterModel& model, int batch_size) {
  if (corpus.empty()) throw argument_error("cannot assign digits from an empty corpus");
  if (batch_size < 1) throw argument_error("batch size must be >= 1");

  const BatchSystem full = build_batch_system(corpus.examples, model);
  const std::span<const Example> all(corpus.examples);
  std::optional<DigitAssignment> winner;
  std::int64_t total_nodes = 0;
  std::vector<std::pair<std::vector<int>, std::pair<std::int64_t, std::int64_t>>> scored;

  for (std::size_t start = 0, b = 0; start < all.size(); start += static_cast<std::size_t>(batch_size), ++b) {
    const std::size_t len = std::min(static_cast<std::size_t>(batch_size), all.size() - start);
    DigitAssignment cand = solve_batch(build_batch_system(all.subspan(start, len), model));
    total_nodes += cand.nodes;
    cand.batch_index = static_cast<std::int64_t>(b);

    auto hit = std::find_if(scored.begin(), scored.end(), [&](const auto& s) { return s.first == cand.digits; });
    if (hit == scored.end()) {
      scored.push_back({cand.digits, {full.satisfied(cand.digits), full.l1_residual(cand.digits)}});
      hit = std::prev(scored.end());
    }
    cand.satisfied_count = hit->second.first;
    cand.corpus_residual = hit->second.second;

    if (!winner || cand.satisfied_count > winner->satisfied_count ||
        (cand.satisfied_count == winner->satisfied_count && cand.corpus_residual < winner->corpus_residual)) {
      winner = std::move(cand);
    }
  }
  winner->nodes = total_nodes;
  return *winner;
}

inline nlohmann::json to_json(const DigitAssignment& a) {
  return {{"digits", a.digits},
          {"objective", a.objective},
          {"satisfied", a.satisfied_count},
          {"batch_index", a.batch_index}};
}

inline DigitAssignment assignment_from_json(const nlohmann::json& j) {
  DigitAssignment a;
  a.digits = j.at("digits").get<std::vector<int>>();
  a.objective = j.at("objective").get<std::int64_t>();
  a.satisfied_count = j.at("satisfied").get<std::int64_t>();
  a.batch_index = j.at("batch_index").get<std::int64_t>();
  for (int d : a.digits) {
    if (d < 0 || d > max_digit) throw format_error("digit out of range in assignment");
  }
  return a;
}

}  // namespace digitsum
