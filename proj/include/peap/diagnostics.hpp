#ifndef PEAP_DIAGNOSTICS_HPP
#define PEAP_DIAGNOSTICS_HPP

#include "peap/attribution.hpp"

#include <limits>
#include <vector>

namespace peap {

// How edges inside the union of two top-K lists are ranked for the rank correlation.
enum class RankVariant {
  AbsentLast,  // an edge outside a table's own top-K list shares that table's last rank
  UnionScores  // every union edge is ranked by its score in each table
};

struct DiagnosticsLevel {
  double k_percent = 0;
  int list_length = 0;
  double diff = 0;  // 1 - |R1 n R2| / L
  double rho = 0;   // Spearman correlation over R1 u R2
  double diff_control = std::numeric_limits<double>::quiet_NaN();
  double rho_control = std::numeric_limits<double>::quiet_NaN();
};

struct DiagnosticsReport {
  std::vector<DiagnosticsLevel> levels;
};

// Edges ordered by |score| descending, ties to the lower id; the first
// floor(k% * size) are returned. Throws DataError when that list would be empty.
std::vector<EdgeId> top_k(const AttributionTable& table, double k_percent);
int top_k_length(std::size_t keys, double k_percent);

double ranking_difference(const AttributionTable& a, const AttributionTable& b, double k_percent);
double rank_correlation(const AttributionTable& a, const AttributionTable& b, double k_percent,
                        RankVariant variant = RankVariant::AbsentLast);

// Diff and rho between two tables over the same keys at each K% level.
DiagnosticsReport ranking_diagnostics(const AttributionTable& a, const AttributionTable& b,
                                      const std::vector<double>& k_percent,
                                      RankVariant variant = RankVariant::AbsentLast);

// Fills the control columns with the mean over all pairs of per-subset tables that
// were aggregated in a single mode. Needs at least two subsets.
void add_controls(DiagnosticsReport& report, const std::vector<AttributionTable>& subsets,
                  RankVariant variant = RankVariant::AbsentLast);

}  // namespace peap

#endif  // PEAP_DIAGNOSTICS_HPP
