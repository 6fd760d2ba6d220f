#include "peap/diagnostics.hpp"

#include "peap/common.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

namespace peap {

int top_k_length(std::size_t keys, double k_percent) {
  return static_cast<int>(std::floor(k_percent / 100.0 * static_cast<double>(keys) + 1e-9));
}

std::vector<EdgeId> top_k(const AttributionTable& table, double k_percent) {
  const int L = top_k_length(table.size(), k_percent);
  if (L <= 0)
    throw DataError(fmt::format("top {}% of {} edges is an empty list", k_percent, table.size()));
  std::vector<EdgeId> ids(table.size());
  std::iota(ids.begin(), ids.end(), EdgeId{0});
  auto before = [&](EdgeId x, EdgeId y) {
    const double ax = std::abs(table[x]), ay = std::abs(table[y]);
    return ax != ay ? ax > ay : x < y;
  };
  std::partial_sort(ids.begin(), ids.begin() + L, ids.end(), before);
  ids.resize(static_cast<std::size_t>(L));
  return ids;
}

namespace {

void check_keys(const AttributionTable& a, const AttributionTable& b) {
  if (a.size() != b.size()) throw DataError(fmt::format("diagnostics: tables have {} and {} keys", a.size(), b.size()));
}

// Average ranks (1 = largest) of `values`.
std::vector<double> average_ranks(const std::vector<double>& values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return values[x] > values[y]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = (static_cast<double>(i + j) / 2.0) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) return sxx == syy ? 1.0 : 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

double ranking_difference(const AttributionTable& a, const AttributionTable& b, double k_percent) {
  check_keys(a, b);
  auto ra = top_k(a, k_percent), rb = top_k(b, k_percent);
  std::sort(ra.begin(), ra.end());
  std::sort(rb.begin(), rb.end());
  std::vector<EdgeId> common;
  std::set_intersection(ra.begin(), ra.end(), rb.begin(), rb.end(), std::back_inserter(common));
  return 1.0 - static_cast<double>(common.size()) / static_cast<double>(ra.size());
}

double rank_correlation(const AttributionTable& a, const AttributionTable& b, double k_percent, RankVariant variant) {
  check_keys(a, b);
  const auto ra = top_k(a, k_percent), rb = top_k(b, k_percent);
  std::vector<EdgeId> uni(ra);
  uni.insert(uni.end(), rb.begin(), rb.end());
  std::sort(uni.begin(), uni.end());
  uni.erase(std::unique(uni.begin(), uni.end()), uni.end());

  auto ranks_for = [&](const AttributionTable& t, const std::vector<EdgeId>& top) {
    std::vector<double> values(uni.size());
    if (variant == RankVariant::UnionScores) {
      for (std::size_t i = 0; i < uni.size(); ++i) values[i] = std::abs(t[uni[i]]);
      return average_ranks(values);
    }
    std::unordered_map<EdgeId, std::size_t> pos;
    for (std::size_t i = 0; i < top.size(); ++i) pos[top[i]] = i;
    // Keys inside the list keep their order; the rest tie below the list.
    for (std::size_t i = 0; i < uni.size(); ++i) {
      auto it = pos.find(uni[i]);
      values[i] = it == pos.end() ? -1.0 : static_cast<double>(top.size() - it->second);
    }
    return average_ranks(values);
  };
  return pearson(ranks_for(a, ra), ranks_for(b, rb));
}

DiagnosticsReport ranking_diagnostics(const AttributionTable& a, const AttributionTable& b,
                                      const std::vector<double>& k_percent, RankVariant variant) {
  DiagnosticsReport report;
  for (double k : k_percent) {
    DiagnosticsLevel lv;
    lv.k_percent = k;
    lv.list_length = top_k_length(a.size(), k);
    lv.diff = ranking_difference(a, b, k);
    lv.rho = rank_correlation(a, b, k, variant);
    report.levels.push_back(lv);
  }
  return report;
}

void add_controls(DiagnosticsReport& report, const std::vector<AttributionTable>& subsets, RankVariant variant) {
  if (subsets.size() < 2) throw DataError("control diagnostics need at least two data subsets");
  for (auto& lv : report.levels) {
    double diff = 0, rho = 0;
    int pairs = 0;
    for (std::size_t i = 0; i < subsets.size(); ++i)
      for (std::size_t j = i + 1; j < subsets.size(); ++j) {
        diff += ranking_difference(subsets[i], subsets[j], lv.k_percent);
        rho += rank_correlation(subsets[i], subsets[j], lv.k_percent, variant);
        ++pairs;
      }
    lv.diff_control = diff / pairs;
    lv.rho_control = rho / pairs;
  }
}

}  // namespace peap
