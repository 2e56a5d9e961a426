#pragma once

// Metrics that compare against held-out ground truth. This is the only place outside corpus
// construction that reads ImageStore::evaluation_labels().

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "digitsum/classifier.hpp"
#include "digitsum/clustering.hpp"
#include "digitsum/dataset.hpp"
#include "digitsum/error.hpp"

namespace digitsum {

inline double label_accuracy(std::span<const Digit> labels, const ImageStore& store) {
  const auto truth = store.evaluation_labels();
  if (labels.size() != truth.size()) {
    throw consistency_error("have " + std::to_string(labels.size()) + " labels for " + std::to_string(truth.size()) +
                            " images");
  }
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += labels[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

inline double cluster_purity(const ClusterModel& model, const ImageStore& store) {
  return purity(model, store.evaluation_labels());
}

inline double eval_classification(const CnnParams<float>& params, const ImageStore& test_store) {
  return label_accuracy(classify(params, test_store.images()).digits, test_store);
}

// Fraction of examples whose predicted digits spell exactly the supervised sum.
inline double addition_accuracy(std::span<const Digit> predicted, const Corpus& corpus) {
  if (corpus.empty()) return 0.0;
  std::size_t hits = 0;
  std::vector<Digit> digits;
  for (const auto& ex : corpus.examples) {
    digits.clear();
    for (ImageId id : ex.ids) {
      if (id >= predicted.size()) throw consistency_error("corpus references image outside the prediction set");
      digits.push_back(predicted[id]);
    }
    hits += grid_sum(digits, ex.w) == ex.sum;
  }
  return static_cast<double>(hits) / static_cast<double>(corpus.size());
}

inline double eval_addition(const CnnParams<float>& params, const Corpus& test_corpus, const ImageStore& test_store) {
  return addition_accuracy(classify(params, test_store.images()).digits, test_corpus);
}

}  // namespace digitsum
