// Accuracy, balanced accuracy and confusion matrices.
#pragma once

#include <span>
#include <vector>

#include "facmic/attention_net.hpp"
#include "facmic/core.hpp"
#include "facmic/feature_store.hpp"
#include "facmic/losses.hpp"

namespace facmic {

/// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t k) : k_(k), counts_(k * k, 0) {}

  void add(std::size_t truth, std::size_t predicted) {
    if (truth >= k_ || predicted >= k_) throw DataError("confusion matrix: class out of range");
    ++counts_[truth * k_ + predicted];
  }

  [[nodiscard]] std::size_t k() const noexcept { return k_; }
  [[nodiscard]] std::uint64_t operator()(std::size_t truth, std::size_t predicted) const {
    return counts_[truth * k_ + predicted];
  }
  [[nodiscard]] std::uint64_t total() const noexcept {
    std::uint64_t s = 0;
    for (auto c : counts_) s += c;
    return s;
  }
  [[nodiscard]] std::uint64_t row_total(std::size_t truth) const {
    std::uint64_t s = 0;
    for (std::size_t p = 0; p < k_; ++p) s += (*this)(truth, p);
    return s;
  }

  [[nodiscard]] double accuracy() const {
    const auto n = total();
    if (n == 0) throw DataError("accuracy of an empty confusion matrix");
    std::uint64_t hits = 0;
    for (std::size_t c = 0; c < k_; ++c) hits += (*this)(c, c);
    return static_cast<double>(hits) / static_cast<double>(n);
  }

  /// Recall per class; classes with no true samples are reported as NaN.
  [[nodiscard]] std::vector<double> recalls() const {
    std::vector<double> r(k_, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t c = 0; c < k_; ++c) {
      const auto n = row_total(c);
      if (n > 0) r[c] = static_cast<double>((*this)(c, c)) / static_cast<double>(n);
    }
    return r;
  }

  /// Mean recall over classes that have at least one true sample.
  [[nodiscard]] double balanced_accuracy() const {
    double sum = 0.0;
    std::size_t seen = 0;
    for (double r : recalls()) {
      if (std::isnan(r)) continue;
      sum += r;
      ++seen;
    }
    if (seen == 0) throw DataError("balanced accuracy of an empty confusion matrix");
    return sum / static_cast<double>(seen);
  }

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

inline ConfusionMatrix confusion_from(std::span<const std::uint16_t> truth,
                                      std::span<const std::uint16_t> predicted, std::size_t k) {
  if (truth.size() != predicted.size()) throw DataError("confusion: length mismatch");
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
  return cm;
}

struct EvalResult {
  double acc = 0.0;
  double bacc = 0.0;
  ConfusionMatrix confusion{0};
};

/// Classifies the selected samples with the adapter in eval mode.
inline EvalResult evaluate(const AttentionParams& params, const FeatureDataset& ds,
                           std::span<const std::size_t> indices, double tau,
                           const AttentionConfig& cfg = {}) {
  if (indices.empty()) throw DataError("evaluate: no samples selected");
  if (params.d() != ds.d())
    throw DataError("evaluate: adapter dimension " + std::to_string(params.d()) +
                    " does not match dataset dimension " + std::to_string(ds.d()));
  const Matrix batch = gather_rows(ds.image_features, indices);
  const auto fwd = forward_eval(params, batch, cfg);
  const auto predicted = pseudo_labels(fwd.masked, ds.text_features, tau);
  std::vector<std::uint16_t> truth(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) truth[i] = ds.labels[indices[i]];
  EvalResult r;
  r.confusion = confusion_from(truth, predicted, ds.k());
  r.acc = r.confusion.accuracy();
  r.bacc = r.confusion.balanced_accuracy();
  return r;
}

}  // namespace facmic
