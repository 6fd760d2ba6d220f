#include "peap/metric.hpp"

#include <fmt/format.h>

#include <cmath>

namespace peap {

std::string to_string(MetricKind k) {
  return k == MetricKind::LogitDifference ? "logit-difference" : "probability-difference";
}

MetricKind metric_kind_from_string(const std::string& s) {
  if (s == "logit-difference") return MetricKind::LogitDifference;
  if (s == "probability-difference") return MetricKind::ProbabilityDifference;
  throw ConfigError(fmt::format("unknown metric kind '{}'", s));
}

void MetricSpec::check(int vocab_size) const {
  if (positive.empty()) throw DataError("metric: positive answer set is empty");
  if (negative.empty() && kind == MetricKind::ProbabilityDifference)
    throw DataError("metric: negative answer set is empty");
  for (const auto* set : {&positive, &negative})
    for (int id : *set)
      if (id < 0 || id >= vocab_size)
        throw DataError(fmt::format("metric: answer token {} outside vocabulary of size {}", id, vocab_size));
}

namespace {

template <typename Scalar>
RowVector<Scalar> softmax(const RowVector<Scalar>& logits) {
  const Scalar m = logits.maxCoeff();
  RowVector<Scalar> p = (logits.array() - m).exp().matrix();
  p /= p.sum();
  return p;
}

}  // namespace

template <typename Scalar>
Scalar MetricSpec::evaluate(const RowVector<Scalar>& logits) const {
  check(static_cast<int>(logits.size()));
  if (kind == MetricKind::LogitDifference) {
    Scalar pos = 0, neg = 0;
    for (int id : positive) pos += logits[id];
    for (int id : negative) neg += logits[id];
    return pos / static_cast<Scalar>(positive.size()) - (negative.empty() ? Scalar(0) : neg / static_cast<Scalar>(negative.size()));
  }
  const auto p = softmax(logits);
  Scalar m = 0;
  for (int id : positive) m += p[id];
  for (int id : negative) m -= p[id];
  return m;
}

template <typename Scalar>
RowVector<Scalar> MetricSpec::gradient(const RowVector<Scalar>& logits) const {
  check(static_cast<int>(logits.size()));
  RowVector<Scalar> g = RowVector<Scalar>::Zero(logits.size());
  if (kind == MetricKind::LogitDifference) {
    for (int id : positive) g[id] += Scalar(1) / static_cast<Scalar>(positive.size());
    for (int id : negative) g[id] -= Scalar(1) / static_cast<Scalar>(negative.size());
    return g;
  }
  // dM/dl_j = c_j p_j - p_j * sum_i c_i p_i
  RowVector<Scalar> c = RowVector<Scalar>::Zero(logits.size());
  for (int id : positive) c[id] += 1;
  for (int id : negative) c[id] -= 1;
  const auto p = softmax(logits);
  const Scalar expected = (c.array() * p.array()).sum();
  g = (p.array() * (c.array() - expected)).matrix();
  return g;
}

template float MetricSpec::evaluate<float>(const RowVector<float>&) const;
template double MetricSpec::evaluate<double>(const RowVector<double>&) const;
template RowVector<float> MetricSpec::gradient<float>(const RowVector<float>&) const;
template RowVector<double> MetricSpec::gradient<double>(const RowVector<double>&) const;

nlohmann::json MetricSpec::to_json() const {
  return {{"kind", to_string(kind)}, {"positive", positive}, {"negative", negative}};
}

MetricSpec MetricSpec::from_json(const nlohmann::json& j) {
  MetricSpec m;
  m.kind = metric_kind_from_string(j.at("kind").get<std::string>());
  m.positive = j.at("positive").get<std::vector<int>>();
  m.negative = j.at("negative").get<std::vector<int>>();
  return m;
}

}  // namespace peap
