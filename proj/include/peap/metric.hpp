#ifndef PEAP_METRIC_HPP
#define PEAP_METRIC_HPP

#include "peap/common.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace peap {

enum class MetricKind { LogitDifference, ProbabilityDifference };

std::string to_string(MetricKind k);
MetricKind metric_kind_from_string(const std::string& s);

// Scalar function of the final-position logits.
//   LogitDifference:       mean(logit[positive]) - mean(logit[negative]); an empty
//                          negative set leaves a single (mean) logit
//   ProbabilityDifference: sum(p[positive]) - sum(p[negative]), p = softmax(logits)
struct MetricSpec {
  MetricKind kind = MetricKind::LogitDifference;
  std::vector<int> positive;
  std::vector<int> negative;

  // Throws DataError when the metric is undefined for this vocabulary.
  void check(int vocab_size) const;

  template <typename Scalar>
  Scalar evaluate(const RowVector<Scalar>& logits) const;

  template <typename Scalar>
  RowVector<Scalar> gradient(const RowVector<Scalar>& logits) const;

  MetricSpec swapped() const { return {kind, negative, positive}; }

  nlohmann::json to_json() const;
  static MetricSpec from_json(const nlohmann::json& j);
};

template <typename Scalar>
Eigen::Index argmax(const RowVector<Scalar>& logits) {
  Eigen::Index best = 0;
  logits.maxCoeff(&best);
  return best;
}

extern template float MetricSpec::evaluate<float>(const RowVector<float>&) const;
extern template double MetricSpec::evaluate<double>(const RowVector<double>&) const;
extern template RowVector<float> MetricSpec::gradient<float>(const RowVector<float>&) const;
extern template RowVector<double> MetricSpec::gradient<double>(const RowVector<double>&) const;

}  // namespace peap

#endif  // PEAP_METRIC_HPP
