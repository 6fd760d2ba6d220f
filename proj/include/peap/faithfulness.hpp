#ifndef PEAP_FAITHFULNESS_HPP
#define PEAP_FAITHFULNESS_HPP

#include "peap/ablation.hpp"
#include "peap/circuit.hpp"
#include "peap/metric.hpp"
#include "peap/schema.hpp"

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace peap {

enum class AblationMode { Counterfactual, Mean };
std::string to_string(AblationMode m);
AblationMode ablation_mode_from_string(const std::string& s);

// One example as seen by the evaluator. `map` ties it to the abstract graph the
// circuit is built on: one token per span for positional circuits, the schema
// application for schema circuits, and a single span for non-positional ones.
struct EvalExample {
  std::vector<int> tokens;
  MetricSpec metric;
  SpanMap map;
};

struct FaithfulnessPoint {
  EdgeId budget = 0;
  EdgeId abstract_size = 0;
  double mean_size = 0;  // grounded edges, averaged over examples
  double soft = 0;       // F_S
  double hard = 0;       // F_H
  double correct_rate = 0;
  int examples = 0;
  int excluded = 0;  // M(full) == 0, left out of F_S only
};

struct FaithfulnessReport {
  std::string mode;
  bool with_correct_rate = false;
  std::vector<FaithfulnessPoint> points;
};

template <typename Scalar>
class FaithfulnessEvaluator {
 public:
  // Runs every clean forward pass once. `sources` holds one ablation source per example.
  FaithfulnessEvaluator(const ModelWeights<Scalar>& weights, std::vector<EvalExample> examples,
                        std::vector<AblationSource<Scalar>> sources, int jobs = 1);
  // Sources produced on demand, for datasets whose corrupted activations do not fit in
  // memory at once. `source(x)` must be deterministic.
  using SourceFn = std::function<AblationSource<Scalar>(int)>;
  FaithfulnessEvaluator(const ModelWeights<Scalar>& weights, std::vector<EvalExample> examples, SourceFn source,
                        int jobs = 1);

  // Grounds `circuit` (built on `abstract`) into every example and ablates the rest.
  FaithfulnessPoint evaluate(const Circuit& circuit, const Graph& abstract) const;

  int size() const { return static_cast<int>(examples_.size()); }
  double full_metric(int x) const { return full_metric_[static_cast<std::size_t>(x)]; }
  // Metric of every example under the ablated circuit, in example order.
  std::vector<double> ablated_metrics(const Circuit& circuit, const Graph& abstract) const;

 private:
  struct Outcome {
    double metric;
    bool same_top;
    EdgeId size;
  };
  std::vector<Outcome> run(const Circuit& circuit, const Graph& abstract) const;
  void init();

  const ModelWeights<Scalar>& weights_;
  std::vector<EvalExample> examples_;
  std::vector<AblationSource<Scalar>> sources_;
  SourceFn source_fn_;
  std::vector<Graph> graphs_;
  std::vector<double> full_metric_;
  std::vector<int> full_top_;
  int jobs_;
};

// Distinct integers spaced geometrically from lo to hi inclusive.
std::vector<EdgeId> geometric_grid(EdgeId lo, EdgeId hi, int points);

// Greedy circuits of every budget in `grid` on one aggregated table, each evaluated.
template <typename Scalar>
FaithfulnessReport faithfulness_curve(const FaithfulnessEvaluator<Scalar>& evaluator, const AttributionTable& table,
                                      const Graph& abstract, const std::vector<EdgeId>& grid);

// CSV `mean_size,F_S,F_H[,correct_rate]`, plus budget and abstract size columns at the end.
void write_report_csv(std::ostream& os, const FaithfulnessReport& report);
void save_report_csv(const std::filesystem::path& path, const FaithfulnessReport& report);
FaithfulnessReport load_report_csv(const std::filesystem::path& path);
// Line plot of F_S (solid) and F_H (dashed) against log mean size, one colour per report.
void save_report_svg(const std::filesystem::path& path, const std::vector<FaithfulnessReport>& reports,
                     const std::string& title);

extern template class FaithfulnessEvaluator<float>;
extern template class FaithfulnessEvaluator<double>;
extern template FaithfulnessReport faithfulness_curve(const FaithfulnessEvaluator<float>&, const AttributionTable&,
                                                      const Graph&, const std::vector<EdgeId>&);
extern template FaithfulnessReport faithfulness_curve(const FaithfulnessEvaluator<double>&, const AttributionTable&,
                                                      const Graph&, const std::vector<EdgeId>&);

}  // namespace peap

#endif  // PEAP_FAITHFULNESS_HPP
