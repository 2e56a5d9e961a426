#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "digitsum/dataset.hpp"
#include "digitsum/embedding.hpp"
#include "digitsum/error.hpp"
#include "digitsum/random.hpp"
#include "digitsum/tensor_io.hpp"

namespace digitsum {

struct ClusterModel {
  int k = 0;
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> centroids;  // k x dim
  std::vector<std::int32_t> assignment;                                              // per image, in [0,k)
  std::vector<double> distance;                                                      // to own centroid
  std::vector<double> inertia_history;  // within-cluster SSE after each assignment step
  int iterations = 0;

  std::size_t size() const noexcept { return assignment.size(); }
  double inertia() const { return inertia_history.empty() ? 0.0 : inertia_history.back(); }
};

struct KMeansOptions {
  int max_iter = 300;
  double tol = 1e-4;  // stop when every centroid moves less than this
  int n_init = 1;     // independent restarts; the lowest final inertia wins
};

namespace detail {

// Nearest centroid with ties to the lowest index; returns the squared distance.
inline double nearest_centroid(const EmbeddingMatrix& x, Eigen::Index row, const ClusterModel& m, int& best) {
  double best_d = std::numeric_limits<double>::infinity();
  best = 0;
  for (int c = 0; c < m.k; ++c) {
    const double d = (x.row(row) - m.centroids.row(c)).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best_d;
}

inline double assign_all(const EmbeddingMatrix& x, ClusterModel& m) {
  double sse = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    int c;
    const double d2 = nearest_centroid(x, i, m, c);
    m.assignment[static_cast<std::size_t>(i)] = c;
    m.distance[static_cast<std::size_t>(i)] = std::sqrt(d2);
    sse += d2;
  }
  return sse;
}

// k-means++ seeding: first seed uniform, then proportional to squared distance to the nearest seed.
inline std::vector<Eigen::Index> kmeanspp_seeds(const EmbeddingMatrix& x, int k, rng_type& rng) {
  const Eigen::Index n = x.rows();
  std::vector<Eigen::Index> seeds{static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(n)))};
  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  while (static_cast<int>(seeds.size()) < k) {
    const auto last = x.row(seeds.back());
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      auto& d = d2[static_cast<std::size_t>(i)];
      d = std::min(d, (x.row(i) - last).squaredNorm());
      total += d;
    }
    Eigen::Index pick = n - 1;
    if (total > 0.0) {
      const double target = uniform01(rng) * total;
      double acc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[static_cast<std::size_t>(i)];
        if (acc > target && d2[static_cast<std::size_t>(i)] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(n)));
    }
    seeds.push_back(pick);
  }
  return seeds;
}

}  // namespace detail

namespace detail {

// Lloyd iterations from k-means++ seeds. Empty clusters are reseeded to the point farthest from
// its current centroid.
inline ClusterModel lloyd(const EmbeddingMatrix& emb, int k, rng_type& rng, const KMeansOptions& opt) {
  const Eigen::Index n = emb.rows();
  ClusterModel m;
  m.k = k;
  m.centroids.resize(k, emb.cols());
  const auto seeds = kmeanspp_seeds(emb, k, rng);
  for (int c = 0; c < k; ++c) m.centroids.row(c) = emb.row(seeds[static_cast<std::size_t>(c)]);
  m.assignment.assign(static_cast<std::size_t>(n), 0);
  m.distance.assign(static_cast<std::size_t>(n), 0.0);

  Eigen::MatrixXd sums(k, emb.cols());
  std::vector<Eigen::Index> counts(static_cast<std::size_t>(k));
  for (int iter = 1; iter <= opt.max_iter; ++iter) {
    m.inertia_history.push_back(assign_all(emb, m));
    m.iterations = iter;

    // Fixed-order reduction keeps the update bitwise reproducible.
    sums.setZero();
    std::fill(counts.begin(), counts.end(), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int c = m.assignment[static_cast<std::size_t>(i)];
      sums.row(c) += emb.row(i);
      ++counts[static_cast<std::size_t>(c)];
    }
    auto next = m.centroids;
    std::vector<bool> taken(static_cast<std::size_t>(n), false);
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        next.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
        continue;
      }
      Eigen::Index far = -1;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (taken[static_cast<std::size_t>(i)]) continue;
        if (far < 0 || m.distance[static_cast<std::size_t>(i)] > m.distance[static_cast<std::size_t>(far)]) far = i;
      }
      taken[static_cast<std::size_t>(far)] = true;
      next.row(c) = emb.row(far);
    }
    const double shift = (next - m.centroids).rowwise().norm().maxCoeff();
    m.centroids = std::move(next);
    if (shift < opt.tol) break;
  }
  m.inertia_history.push_back(assign_all(emb, m));
  return m;
}

}  // namespace detail

// Best of opt.n_init restarts by final inertia; ties keep the earlier restart. Restart 0 draws from
// the same stream as a single run, so n_init=1 is plain k-means.
inline ClusterModel kmeans(const EmbeddingMatrix& emb, int k, std::uint64_t seed, const KMeansOptions& opt = {}) {
  if (k < 1) throw argument_error("k must be positive");
  if (k > emb.rows()) throw argument_error("k=" + std::to_string(k) + " exceeds point count " + std::to_string(emb.rows()));
  if (opt.max_iter < 1) throw argument_error("max_iter must be >= 1");
  if (opt.n_init < 1) throw argument_error("n_init must be >= 1");
  if (!emb.allFinite()) throw argument_error("embedding contains non-finite values");

  std::optional<ClusterModel> best;
  for (int r = 0; r < opt.n_init; ++r) {
    auto rng = make_rng(seed, 0x4b + 0x100 * static_cast<std::uint64_t>(r));
    auto m = detail::lloyd(emb, k, rng, opt);
    if (!best || m.inertia() < best->inertia()) best = std::move(m);
  }
  return *best;
}

inline ClusterModel kmeans(const EmbeddingMatrix& emb, int k, std::uint64_t seed, int max_iter, double tol) {
  return kmeans(emb, k, seed, KMeansOptions{max_iter, tol});
}

// Fraction of points that carry the majority label of their cluster.
inline double purity(std::span<const std::int32_t> assignment, int k, std::span<const Digit> labels) {
  if (assignment.size() != labels.size()) {
    throw consistency_error("assignment has " + std::to_string(assignment.size()) + " entries but labels have " +
                            std::to_string(labels.size()));
  }
  if (assignment.empty()) return 0.0;
  std::vector<std::array<std::size_t, 10>> table(static_cast<std::size_t>(k), std::array<std::size_t, 10>{});
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    ++table.at(static_cast<std::size_t>(assignment[i]))[labels[i]];
  }
  std::size_t hits = 0;
  for (const auto& row : table) hits += *std::max_element(row.begin(), row.end());
  return static_cast<double>(hits) / static_cast<double>(assignment.size());
}

inline double purity(const ClusterModel& model, std::span<const Digit> labels) {
  return purity(model.assignment, model.k, labels);
}

// Member distances of every cluster, sorted ascending.
inline std::vector<std::vector<double>> sorted_member_distances(const ClusterModel& model) {
  std::vector<std::vector<double>> out(static_cast<std::size_t>(model.k));
  for (std::size_t i = 0; i < model.size(); ++i) {
    out[static_cast<std::size_t>(model.assignment[i])].push_back(model.distance[i]);
  }
  for (auto& v : out) std::sort(v.begin(), v.end());
  return out;
}

// Linear-interpolation quantile of an ascending sample.
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw query_error("quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw argument_error("quantile level must be in [0,1]");
  if (q == 1.0) return sorted.back();
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(lo);
  if (lo + 1 >= sorted.size()) return sorted[lo];
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inline double distance_percentile(const ClusterModel& model, int cluster, double q) {
  if (cluster < 0 || cluster >= model.k) throw query_error("cluster index out of range");
  std::vector<double> members;
  for (std::size_t i = 0; i < model.size(); ++i) {
    if (model.assignment[i] == cluster) members.push_back(model.distance[i]);
  }
  if (members.empty()) throw query_error("cluster " + std::to_string(cluster) + " is empty");
  std::sort(members.begin(), members.end());
  return quantile_sorted(members, q);
}

// Centroids and distances go to a tensor file; the assignment to a flat int32 array.
inline void save_cluster_model(const std::filesystem::path& model_path, const std::filesystem::path& assignment_path,
                               const ClusterModel& model, const nlohmann::json& extra_meta = nlohmann::json::object()) {
  TensorFile file;
  file.meta = extra_meta;
  file.meta["kind"] = "cluster_model";
  file.meta["k"] = model.k;
  file.meta["iterations"] = model.iterations;
  file.meta["inertia_history"] = model.inertia_history;
  file.meta["assignment_file"] = assignment_path.filename().string();
  file.put_matrix("centroids", model.centroids);
  file.put<double>("distance", {static_cast<std::int64_t>(model.distance.size())}, model.distance);
  file.save(model_path);
  write_int_array(assignment_path, model.assignment);
}

inline ClusterModel load_cluster_model(const std::filesystem::path& model_path,
                                       const std::filesystem::path& assignment_path, nlohmann::json* meta = nullptr) {
  const auto file = TensorFile::load(model_path);
  if (file.meta.value("kind", "") != "cluster_model") throw format_error(model_path.string() + " is not a cluster model");
  ClusterModel m;
  m.k = file.meta.at("k").get<int>();
  m.iterations = file.meta.at("iterations").get<int>();
  m.inertia_history = file.meta.at("inertia_history").get<std::vector<double>>();
  m.centroids = file.get_matrix<double>("centroids");
  m.distance = file.get<double>("distance");
  m.assignment = read_int_array(assignment_path);
  if (m.assignment.size() != m.distance.size()) throw consistency_error("assignment and distance lengths differ");
  for (auto c : m.assignment) {
    if (c < 0 || c >= m.k) throw format_error("cluster index out of range in " + assignment_path.string());
  }
  if (meta) *meta = file.meta;
  return m;
}

}  // namespace digitsum
