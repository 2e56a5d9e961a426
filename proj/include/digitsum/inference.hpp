#pragma once

// Label repair by constraint propagation.
//
// Images closest to their centroid are trusted first. Whenever an example has exactly one
// untrusted image left, its equation is solved for that image, the label is overwritten and the
// image becomes trusted. Passes repeat until nothing changes, then the trusted radius grows.
// Radius r (1..5) admits images whose centroid distance is at most the (20 r)-th percentile of
// their own cluster's distances, so radius 5 admits everything.

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "digitsum/assignment.hpp"
#include "digitsum/clustering.hpp"
#include "digitsum/dataset.hpp"
#include "digitsum/error.hpp"

namespace digitsum {

enum class Provenance : std::uint8_t { cluster, radius, inferred };

struct LabelState {
  std::vector<Digit> label;
  std::vector<bool> correct;
  std::vector<Provenance> provenance;
  std::set<std::size_t> inconsistent_examples;
  std::size_t passes = 0;       // infer_correct_labels calls
  std::size_t resolutions = 0;  // successful single-unknown resolutions

  std::size_t size() const noexcept { return label.size(); }
  std::size_t correct_count() const { return static_cast<std::size_t>(std::count(correct.begin(), correct.end(), true)); }
  std::size_t count(Provenance p) const {
    return static_cast<std::size_t>(std::count(provenance.begin(), provenance.end(), p));
  }
};

inline LabelState init_labels(std::span<const std::int32_t> cluster_of, std::span<const int> digits) {
  LabelState s;
  s.label.reserve(cluster_of.size());
  for (auto c : cluster_of) {
    if (c < 0 || static_cast<std::size_t>(c) >= digits.size()) {
      throw consistency_error("assignment does not cover cluster " + std::to_string(c));
    }
    s.label.push_back(static_cast<Digit>(digits[static_cast<std::size_t>(c)]));
  }
  s.correct.assign(cluster_of.size(), false);
  s.provenance.assign(cluster_of.size(), Provenance::cluster);
  return s;
}

inline LabelState init_labels(const ClusterModel& model, const DigitAssignment& assignment) {
  return init_labels(model.assignment, assignment.digits);
}

inline std::vector<ImageId> images_within_radius(const ClusterModel& model, int radius) {
  if (radius < 1 || radius > 5) throw argument_error("radius must be in [1,5]");
  const double q = 0.2 * radius;
  const auto sorted = sorted_member_distances(model);
  std::vector<double> threshold(sorted.size(), 0.0);
  for (std::size_t c = 0; c < sorted.size(); ++c) {
    if (!sorted[c].empty()) threshold[c] = radius == 5 ? sorted[c].back() : quantile_sorted(sorted[c], q);
  }
  std::vector<ImageId> out;
  for (std::size_t i = 0; i < model.size(); ++i) {
    if (model.distance[i] <= threshold[static_cast<std::size_t>(model.assignment[i])]) {
      out.push_back(static_cast<ImageId>(i));
    }
  }
  return out;
}

// Distinct images of `ex` that are not yet trusted.
inline std::vector<ImageId> unresolved_images(const LabelState& state, const Example& ex) {
  std::vector<ImageId> out;
  for (ImageId id : ex.ids) {
    if (!state.correct[id] && std::find(out.begin(), out.end(), id) == out.end()) out.push_back(id);
  }
  return out;
}

// Solves the example's equation for `img` with every other cell at its current label. An image
// occupying several cells (possible with oversampling) has the sum of their weights as coefficient.
// Returns nullopt when the quotient is not an integer in [0,9].
inline std::optional<Digit> resolve_image_label(const LabelState& state, const Example& ex, ImageId img) {
  std::int64_t rest = ex.sum;
  std::int64_t coef = 0;
  for (std::size_t cell = 0; cell < ex.cells(); ++cell) {
    const ImageId id = ex.ids[cell];
    if (id == img) {
      coef += ex.weight(cell);
      continue;
    }
    if (!state.correct[id]) {
      throw precondition_error("example has more than one unresolved image");
    }
    rest -= static_cast<std::int64_t>(state.label[id]) * ex.weight(cell);
  }
  if (coef == 0) throw precondition_error("image " + std::to_string(img) + " does not occur in the example");
  if (rest < 0 || rest % coef != 0) return std::nullopt;
  const std::int64_t d = rest / coef;
  if (d > max_digit) return std::nullopt;
  return static_cast<Digit>(d);
}

// One pass over the corpus in order; resolutions take effect immediately.
inline bool infer_correct_labels(LabelState& state, const Corpus& corpus) {
  bool changed = false;
  ++state.passes;
  for (std::size_t e = 0; e < corpus.size(); ++e) {
    const auto& ex = corpus.examples[e];
    const auto open = unresolved_images(state, ex);
    if (open.size() != 1) continue;
    const ImageId img = open.front();
    if (const auto d = resolve_image_label(state, ex, img)) {
      state.label[img] = *d;
      state.correct[img] = true;
      state.provenance[img] = Provenance::inferred;
      ++state.resolutions;
      changed = true;
    } else {
      state.inconsistent_examples.insert(e);
    }
  }
  return changed;
}

inline void trust_radius(LabelState& state, const ClusterModel& model, int radius) {
  for (ImageId id : images_within_radius(model, radius)) {
    if (!state.correct[id]) {
      state.correct[id] = true;
      state.provenance[id] = Provenance::radius;
    }
  }
}

inline LabelState run_inference(LabelState state, const Corpus& corpus, const ClusterModel& model,
                                std::span<const int> radii = std::array{1, 2, 3, 4, 5}) {
  if (state.size() != model.size()) throw consistency_error("label state and cluster model sizes differ");
  for (int radius : radii) {
    trust_radius(state, model, radius);
    while (infer_correct_labels(state, corpus)) {
    }
  }
  return state;
}

// Inferred images carry their resolved label, all others their cluster-derived label; both live in
// state.label, so this is a copy.
inline std::vector<Digit> final_labels(const LabelState& state) { return state.label; }

inline nlohmann::json summary_json(const LabelState& state) {
  return {{"images", state.size()},
          {"correct", state.correct_count()},
          {"provenance",
           {{"cluster", state.count(Provenance::cluster)},
            {"radius", state.count(Provenance::radius)},
            {"inferred", state.count(Provenance::inferred)}}},
          {"inconsistent_examples", state.inconsistent_examples.size()},
          {"passes", state.passes},
          {"resolutions", state.resolutions}};
}

}  // namespace digitsum
