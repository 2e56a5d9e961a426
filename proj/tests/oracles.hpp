#pragma once

// Independent reference implementations used by unit and acceptance tests.

#include <cstdint>
#include <limits>
#include <vector>

#include "digitsum/assignment.hpp"
#include "digitsum/dataset.hpp"
#include "digitsum/random.hpp"

namespace oracle {

struct Exhaustive {
  std::vector<int> digits;
  std::int64_t objective = std::numeric_limits<std::int64_t>::max();
};

// Every digit vector in lexicographic order; the first minimum wins.
inline Exhaustive enumerate(const digitsum::BatchSystem& sys) {
  Exhaustive best;
  std::vector<int> v(static_cast<std::size_t>(sys.k), 0);
  std::int64_t total = 1;
  for (int c = 0; c < sys.k; ++c) total *= 10;
  for (std::int64_t code = 0; code < total; ++code) {
    std::int64_t rest = code;
    for (int c = sys.k - 1; c >= 0; --c) {
      v[static_cast<std::size_t>(c)] = static_cast<int>(rest % 10);
      rest /= 10;
    }
    std::int64_t cost = 0;
    for (std::size_t e = 0; e < sys.rows(); ++e) {
      std::int64_t s = 0;
      for (int c = 0; c < sys.k; ++c) s += sys.at(e, c) * v[static_cast<std::size_t>(c)];
      cost += s > sys.targets[e] ? s - sys.targets[e] : sys.targets[e] - s;
    }
    if (cost < best.objective) {
      best.objective = cost;
      best.digits = v;
    }
  }
  return best;
}

// A random batch drawn like real data: `pool` images spread over k clusters, each labelled with its
// cluster's digit except for a `noise` fraction with uniformly random labels. Targets are the true
// grid sums, so the system is usually inconsistent.
struct RandomBatch {
  std::vector<digitsum::Example> examples;
  std::vector<std::int32_t> cluster_of;
  std::vector<int> cluster_digit;
  digitsum::BatchSystem system;
};

inline RandomBatch random_batch(digitsum::rng_type& rng, int k, int examples, int w, int h, double noise,
                                int pool = 200) {
  using namespace digitsum;
  RandomBatch b;
  b.cluster_digit.resize(static_cast<std::size_t>(k));
  for (auto& d : b.cluster_digit) d = static_cast<int>(uniform_index(rng, 10));
  std::vector<Digit> label(static_cast<std::size_t>(pool));
  b.cluster_of.resize(static_cast<std::size_t>(pool));
  for (int i = 0; i < pool; ++i) {
    const int c = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(k)));
    b.cluster_of[static_cast<std::size_t>(i)] = c;
    label[static_cast<std::size_t>(i)] = static_cast<Digit>(
        uniform01(rng) < noise ? uniform_index(rng, 10) : static_cast<std::uint64_t>(b.cluster_digit[static_cast<std::size_t>(c)]));
  }
  for (int e = 0; e < examples; ++e) {
    Example ex{w, h, 0, {}};
    std::vector<Digit> d;
    for (int cell = 0; cell < w * h; ++cell) {
      const auto id = static_cast<ImageId>(uniform_index(rng, static_cast<std::uint64_t>(pool)));
      ex.ids.push_back(id);
      d.push_back(label[id]);
    }
    ex.sum = grid_sum(d, w);
    b.examples.push_back(std::move(ex));
  }
  b.system = build_batch_system(b.examples, b.cluster_of, k);
  return b;
}

}  // namespace oracle
