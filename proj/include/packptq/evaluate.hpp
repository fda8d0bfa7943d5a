#pragma once

#include <cstddef>
#include <vector>

#include "packptq/dataset.hpp"
#include "packptq/model.hpp"

namespace packptq {

struct AccuracyReport {
  double top1 = 0.0;
  std::vector<double> per_class;  // NaN-free: classes absent from the set report 0
  double mean_class_accuracy = 0.0;
  std::size_t samples = 0;

  friend bool operator==(const AccuracyReport&, const AccuracyReport&) = default;
};

inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits[i * c + j] > logits[i * c + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

inline AccuracyReport accuracy_from_predictions(std::span<const int> predicted, std::span<const int> labels,
                                                std::size_t classes) {
  AccuracyReport r;
  r.samples = labels.size();
  std::vector<std::size_t> hit(classes, 0), total(classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    ++total.at(y);
    if (predicted[i] == labels[i]) {
      ++hit[y];
      ++correct;
    }
  }
  r.top1 = labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
  std::size_t present = 0;
  double sum = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    const double acc = total[c] ? static_cast<double>(hit[c]) / static_cast<double>(total[c]) : 0.0;
    r.per_class.push_back(acc);
    if (total[c]) {
      sum += acc;
      ++present;
    }
  }
  r.mean_class_accuracy = present ? sum / static_cast<double>(present) : 0.0;
  return r;
}

/// Top-1 and class-wise accuracy, evaluated in chunks to bound tape memory.
inline AccuracyReport evaluate_model(const Network& net, const LabeledSet& set, const SiteHooks& hooks = full_precision(),
                                     std::size_t chunk = 512) {
  std::vector<int> predicted;
  predicted.reserve(set.size());
  for (std::size_t first = 0; first < set.size(); first += chunk) {
    const std::size_t count = std::min(chunk, set.size() - first);
    const auto p = argmax_rows(predict_logits(net, set.inputs.rows(first, count), hooks));
    predicted.insert(predicted.end(), p.begin(), p.end());
  }
  return accuracy_from_predictions(predicted, set.labels, net.class_count);
}

}  // namespace packptq
