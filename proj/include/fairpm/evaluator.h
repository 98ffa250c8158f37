#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fairpm/corpus.h"
#include "fairpm/model.h"
#include "fairpm/trainer.h"
#include "json.hpp"

namespace fairpm {

enum class Task { kCriterion, kTrial };

std::string_view to_string(Task t);
Task parse_task(std::string_view s);

struct PairPrediction {
  std::string patient_id;
  std::string criterion_id;
  CriterionKind kind = CriterionKind::kInclusion;
  Label predicted = Label::kUnknown;
  Label truth = Label::kUnknown;
  // Race group, gender group.
  std::array<int, 2> groups{0, 0};

  int group(SensitiveAttribute a) const { return groups[a == SensitiveAttribute::kRace ? 0 : 1]; }
};

struct TrialPrediction {
  std::string patient_id;
  std::string trial_id;
  bool predicted_eligible = false;
  bool true_eligible = false;
  std::array<int, 2> groups{0, 0};

  int group(SensitiveAttribute a) const { return groups[a == SensitiveAttribute::kRace ? 0 : 1]; }
};

struct MetricsReport {
  Task task = Task::kCriterion;
  SensitiveAttribute attribute = SensitiveAttribute::kRace;
  double accuracy = 0.0;
  double f1 = 0.0;
  double dp = 0.0;
  double eo = 0.0;
  std::array<std::size_t, 2> group_counts{0, 0};

  bool operator==(const MetricsReport&) const = default;
};

// Highest logit wins; ties go to the earlier class.
Label argmax_label(std::span<const double> logits);

// Scores every labeled pair in the corpus.
std::vector<PairPrediction> predict_pairs(Model& model, const Corpus& corpus,
                                          const PrecomputedEmbeddings* precomputed = nullptr);
// Predictions equal to the oracle labels.
std::vector<PairPrediction> oracle_predictions(const Corpus& corpus);

// Eligible iff every inclusion criterion is predicted inclusion and no
// exclusion criterion is predicted exclusion. `predictions` must cover every
// criterion of the trial for this patient.
TrialPrediction predict_trial(const Trial& trial, std::span<const PairPrediction> predictions);
std::vector<TrialPrediction> predict_trials(const Corpus& corpus, std::span<const PairPrediction> predictions);

// Positive outcome: the prediction (or truth) favors eligibility.
bool favors_eligibility(CriterionKind kind, Label label);

double compute_dp(std::span<const PairPrediction> predictions, SensitiveAttribute attribute);
double compute_dp(std::span<const TrialPrediction> predictions, SensitiveAttribute attribute);
double compute_eo(std::span<const PairPrediction> predictions, SensitiveAttribute attribute);
double compute_eo(std::span<const TrialPrediction> predictions, SensitiveAttribute attribute);

struct AccuracyF1 {
  double accuracy = 0.0;
  double f1 = 0.0;
};
// Criterion task: macro F1 over the three classes. Trial task: binary F1 on eligible.
AccuracyF1 compute_accuracy_f1(std::span<const PairPrediction> predictions);
AccuracyF1 compute_accuracy_f1(std::span<const TrialPrediction> predictions);

MetricsReport evaluate(std::span<const PairPrediction> predictions, SensitiveAttribute attribute);
MetricsReport evaluate(std::span<const TrialPrediction> predictions, SensitiveAttribute attribute);

nlohmann::ordered_json to_json(const MetricsReport& report);
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsReport& report);

// ---- sweep ---------------------------------------------------------------------

struct SweepCell {
  double lambda = 0.0;
  std::optional<MetricsReport> criterion;
  std::optional<MetricsReport> trial;
  std::string error;
};

// One train + test evaluation per lambda, all with the base config's seed.
// A failing cell records its error and the remaining cells still run.
std::vector<SweepCell> sweep_lambda(const CorpusSplits& splits, const TrainConfig& base, std::span<const double> lambdas,
                                    int threads = 1);

struct SweepRow {
  double lambda = 0.0;
  MetricsReport report;

  bool operator==(const SweepRow&) const = default;
};

// Columns: lambda,task,attribute,accuracy,f1,dp,eo. Failed cells are skipped.
std::string sweep_table_csv(std::span<const SweepCell> cells, Task task);
std::vector<SweepRow> parse_sweep_table(std::string_view csv);

// ---- case study ----------------------------------------------------------------

struct CaseStudyRow {
  std::string trial_id;
  std::string criterion_id;
  std::string criterion_text;
  std::string patient_id;
  std::array<int, 2> groups{0, 0};
  Label baseline = Label::kUnknown;
  Label fairpm = Label::kUnknown;
  Label truth = Label::kUnknown;
};

// Pairs where the two prediction sets disagree, sorted by criterion, then by
// race group, gender group and patient.
std::vector<CaseStudyRow> case_study(const Corpus& corpus, std::span<const PairPrediction> baseline,
                                     std::span<const PairPrediction> fairpm);
std::string case_study_csv(std::span<const CaseStudyRow> rows);

}  // namespace fairpm
