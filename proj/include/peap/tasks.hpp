#ifndef PEAP_TASKS_HPP
#define PEAP_TASKS_HPP

#include "peap/metric.hpp"
#include "peap/schema.hpp"
#include "peap/tokenizer.hpp"
#include "peap/weights.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace peap {

enum class TaskKind { IOI, GreaterThan, Winobias };

// A task and its variant, written "ioi-abba", "ioi-baba", "greater-than",
// "winobias-anti-female-i", ... "winobias-pro-male-ii".
struct TaskId {
  TaskKind kind = TaskKind::GreaterThan;
  std::string variant;  // "abba" / "baba"; "" for Greater-Than; "anti-female-i" etc.

  std::string name() const;
  static TaskId parse(const std::string& s);
  bool operator==(const TaskId&) const = default;
};

struct TaskExample {
  std::string id;
  int template_id = 0;
  std::string variant;
  std::string text;
  std::string counterfactual;  // empty when the task uses mean ablation
  std::vector<int> tokens;
  std::vector<int> counter_tokens;
  MetricSpec metric;
  std::string correct, incorrect;  // display strings for the answers
  SpanMap reference;               // rule-based application of the human schema
};

struct TaskDataset {
  TaskId task;
  Schema schema;  // human schema
  std::vector<TaskExample> examples;
  std::vector<TaskExample> references;  // mean-ablation reference set, if any

  bool mean_ablation() const { return task.kind == TaskKind::Winobias; }
  int size() const { return static_cast<int>(examples.size()); }
  std::uint64_t hash() const;
};

// Word lists and templates shipped under data/lexicon.
struct Lexicon {
  std::vector<std::string> names, places, objects, gt_nouns;
  std::vector<std::string> female_professions, male_professions;
  std::vector<std::string> ioi_templates;
  struct WinobiasTemplate {
    std::string interaction, first, second;  // pronoun refers to the first / second profession
  };
  std::vector<WinobiasTemplate> winobias_templates;

  static Lexicon load(const std::filesystem::path& dir);
  static const Lexicon& shipped();
};

TaskDataset gen_greater_than(int count, std::uint64_t seed, const Tokenizer& tok = Tokenizer::gpt2(),
                             const Lexicon& lex = Lexicon::shipped());
TaskDataset gen_ioi(int count, const std::string& variant, std::uint64_t seed, const Tokenizer& tok = Tokenizer::gpt2(),
                    const Lexicon& lex = Lexicon::shipped());
// count examples sampled from templates x profession pairs, plus a 16-example
// reference set drawn evenly from the four bias types of the same template group.
TaskDataset gen_winobias(int count, const std::string& variant, std::uint64_t seed,
                         const Tokenizer& tok = Tokenizer::gpt2(), const Lexicon& lex = Lexicon::shipped());
TaskDataset generate_task(const TaskId& task, int count, std::uint64_t seed, const Tokenizer& tok = Tokenizer::gpt2(),
                          const Lexicon& lex = Lexicon::shipped());

// Every Winobias prompt of one variant (templates x profession pairs is too large, so
// one pair per template): used by generator checks.
std::vector<TaskExample> enumerate_winobias(const std::string& variant, const Tokenizer& tok = Tokenizer::gpt2(),
                                            const Lexicon& lex = Lexicon::shipped());

Schema human_schema(const TaskId& task);

enum class FilterPolicy { Correct, BiasedWrong };
enum class PredictionRule { Pairwise, Unrestricted };
FilterPolicy default_policy(const TaskId& task);
std::string to_string(FilterPolicy p);
std::string to_string(PredictionRule r);
FilterPolicy filter_policy_from_string(const std::string& s);
PredictionRule prediction_rule_from_string(const std::string& s);

// Pairwise: the metric's sign decides (correct answer set beats the other set).
// Unrestricted: the top token over the whole vocabulary must fall in the winning set.
template <typename Scalar>
bool prediction_matches(const ModelWeights<Scalar>& weights, const TaskExample& ex, FilterPolicy policy,
                        PredictionRule rule);

struct FilterResult {
  TaskDataset dataset;
  int kept = 0, total = 0;
  double rate() const { return total ? static_cast<double>(kept) / total : 0.0; }
};
template <typename Scalar>
FilterResult filter_by_model(const TaskDataset& ds, const ModelWeights<Scalar>& weights, FilterPolicy policy,
                             PredictionRule rule = PredictionRule::Pairwise, int jobs = 1);

// One JSON object per line: examples, then references (marked by "role").
void save_dataset(const std::filesystem::path& path, const TaskDataset& ds);
TaskDataset load_dataset(const std::filesystem::path& path);

extern template bool prediction_matches(const ModelWeights<float>&, const TaskExample&, FilterPolicy, PredictionRule);
extern template bool prediction_matches(const ModelWeights<double>&, const TaskExample&, FilterPolicy,
                                        PredictionRule);
extern template FilterResult filter_by_model(const TaskDataset&, const ModelWeights<float>&, FilterPolicy,
                                             PredictionRule, int);
extern template FilterResult filter_by_model(const TaskDataset&, const ModelWeights<double>&, FilterPolicy,
                                             PredictionRule, int);

}  // namespace peap

#endif  // PEAP_TASKS_HPP
