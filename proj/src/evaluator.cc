#include "fairpm/evaluator.h"

#include <algorithm>
#include <atomic>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

#include "fairpm/errors.h"
#include "fairpm/io.h"

namespace fairpm {

std::string_view to_string(Task t) { return t == Task::kCriterion ? "criterion" : "trial"; }

Task parse_task(std::string_view s) {
  if (s == "criterion") return Task::kCriterion;
  if (s == "trial") return Task::kTrial;
  throw ConfigError("unknown task '" + std::string(s) + "'");
}

Label argmax_label(std::span<const double> logits) {
  if (logits.size() != static_cast<std::size_t>(kClassCount))
    throw ShapeError("argmax_label: expected 3 logits, got " + std::to_string(logits.size()));
  std::size_t best = 0;
  for (std::size_t c = 1; c < logits.size(); ++c)
    if (logits[c] > logits[best]) best = c;
  return static_cast<Label>(best);
}

std::vector<PairPrediction> predict_pairs(Model& model, const Corpus& corpus, const PrecomputedEmbeddings* precomputed) {
  const PairData data = PairData::from(corpus);
  std::vector<PairPrediction> out;
  out.reserve(data.pairs.size());
  constexpr std::size_t kChunk = 2048;
  for (std::size_t start = 0; start < data.pairs.size(); start += kChunk) {
    std::vector<std::size_t> sel(std::min(kChunk, data.pairs.size() - start));
    std::iota(sel.begin(), sel.end(), start);
    ad::Tape tape;
    PairForward fwd = forward_pairs(tape, model, data, sel, SensitiveAttribute::kRace, precomputed);
    const Tensor& logits = fwd.batch.logits.value();
    for (std::size_t r = 0; r < sel.size(); ++r) {
      const PairExample& ex = data.pairs[sel[r]];
      const double row[3] = {logits.at(r, 0), logits.at(r, 1), logits.at(r, 2)};
      out.push_back(PairPrediction{data.patients[ex.patient]->patient_id, data.criteria[ex.criterion]->criterion_id,
                                   data.criteria[ex.criterion]->kind, argmax_label(row), ex.label, ex.groups});
    }
  }
  return out;
}

std::vector<PairPrediction> oracle_predictions(const Corpus& corpus) {
  const PairData data = PairData::from(corpus);
  std::vector<PairPrediction> out;
  out.reserve(data.pairs.size());
  for (const PairExample& ex : data.pairs)
    out.push_back(PairPrediction{data.patients[ex.patient]->patient_id, data.criteria[ex.criterion]->criterion_id,
                                 data.criteria[ex.criterion]->kind, ex.label, ex.label, ex.groups});
  return out;
}

// ---- trial-level ---------------------------------------------------------------

TrialPrediction predict_trial(const Trial& trial, std::span<const PairPrediction> predictions) {
  std::map<std::string_view, const PairPrediction*> by_criterion;
  for (const auto& p : predictions) by_criterion.emplace(p.criterion_id, &p);
  TrialPrediction out;
  out.trial_id = trial.trial_id;
  out.predicted_eligible = true;
  out.true_eligible = true;
  bool first = true;
  for (const auto* list : {&trial.inclusion, &trial.exclusion}) {
    for (const Criterion& c : *list) {
      auto it = by_criterion.find(c.criterion_id);
      if (it == by_criterion.end())
        throw DataError("predict_trial: no prediction for criterion " + c.criterion_id + " of trial " + trial.trial_id);
      const PairPrediction& p = *it->second;
      if (first) {
        out.patient_id = p.patient_id;
        out.groups = p.groups;
        first = false;
      } else if (p.patient_id != out.patient_id) {
        throw DataError("predict_trial: predictions mix patients " + out.patient_id + " and " + p.patient_id);
      }
      if (c.kind == CriterionKind::kInclusion) {
        out.predicted_eligible = out.predicted_eligible && p.predicted == Label::kInclusion;
        out.true_eligible = out.true_eligible && p.truth == Label::kInclusion;
      } else {
        out.predicted_eligible = out.predicted_eligible && p.predicted != Label::kExclusion;
        out.true_eligible = out.true_eligible && p.truth != Label::kExclusion;
      }
    }
  }
  if (first) throw DataError("predict_trial: trial " + trial.trial_id + " has no criteria");
  return out;
}

std::vector<TrialPrediction> predict_trials(const Corpus& corpus, std::span<const PairPrediction> predictions) {
  std::map<std::string_view, std::vector<PairPrediction>> by_patient;
  for (const auto& p : predictions) by_patient[p.patient_id].push_back(p);
  std::vector<TrialPrediction> out;
  for (const PatientRecord& patient : corpus.patients) {
    auto it = by_patient.find(patient.patient_id);
    if (it == by_patient.end()) continue;
    for (const Trial& trial : corpus.trials) out.push_back(predict_trial(trial, it->second));
  }
  return out;
}

// ---- metrics -------------------------------------------------------------------

bool favors_eligibility(CriterionKind kind, Label label) {
  return kind == CriterionKind::kInclusion ? label == Label::kInclusion : label != Label::kExclusion;
}

namespace {

bool predicted_positive(const PairPrediction& p) { return favors_eligibility(p.kind, p.predicted); }
bool truly_positive(const PairPrediction& p) { return favors_eligibility(p.kind, p.truth); }
bool predicted_positive(const TrialPrediction& p) { return p.predicted_eligible; }
bool truly_positive(const TrialPrediction& p) { return p.true_eligible; }

template <typename P>
double dp_gap(std::span<const P> predictions, SensitiveAttribute attribute) {
  std::array<double, kGroupCount> n{}, pos{};
  for (const P& p : predictions) {
    const int g = p.group(attribute);
    n[g] += 1.0;
    if (predicted_positive(p)) pos[g] += 1.0;
  }
  for (int g = 0; g < kGroupCount; ++g)
    if (n[g] == 0.0)
      throw DataError("demographic parity: group '" + std::string(group_name(attribute, g)) + "' has no predictions");
  return std::abs(pos[0] / n[0] - pos[1] / n[1]);
}

template <typename P>
double eo_gap(std::span<const P> predictions, SensitiveAttribute attribute) {
  std::array<double, kGroupCount> n{}, hit{};
  for (const P& p : predictions) {
    if (!truly_positive(p)) continue;
    const int g = p.group(attribute);
    n[g] += 1.0;
    if (predicted_positive(p)) hit[g] += 1.0;
  }
  for (int g = 0; g < kGroupCount; ++g)
    if (n[g] == 0.0)
      throw DataError("equal opportunity: group '" + std::string(group_name(attribute, g)) +
                      "' has no truly positive instances");
  return std::abs(hit[0] / n[0] - hit[1] / n[1]);
}

// 2TP / (2TP + FP + FN); a class absent from both truth and prediction scores 1.
double f1_score(double tp, double fp, double fn) {
  const double denom = 2.0 * tp + fp + fn;
  return denom == 0.0 ? 1.0 : 2.0 * tp / denom;
}

template <typename P>
std::array<std::size_t, 2> group_counts(std::span<const P> predictions, SensitiveAttribute attribute) {
  std::array<std::size_t, 2> counts{0, 0};
  for (const P& p : predictions) ++counts[static_cast<std::size_t>(p.group(attribute))];
  return counts;
}

}  // namespace

double compute_dp(std::span<const PairPrediction> p, SensitiveAttribute a) { return dp_gap(p, a); }
double compute_dp(std::span<const TrialPrediction> p, SensitiveAttribute a) { return dp_gap(p, a); }
double compute_eo(std::span<const PairPrediction> p, SensitiveAttribute a) { return eo_gap(p, a); }
double compute_eo(std::span<const TrialPrediction> p, SensitiveAttribute a) { return eo_gap(p, a); }

AccuracyF1 compute_accuracy_f1(std::span<const PairPrediction> predictions) {
  if (predictions.empty()) throw DataError("accuracy: no predictions");
  std::array<double, kClassCount> tp{}, fp{}, fn{};
  double correct = 0.0;
  for (const auto& p : predictions) {
    const auto pc = static_cast<std::size_t>(p.predicted);
    const auto tc = static_cast<std::size_t>(p.truth);
    if (pc == tc) {
      correct += 1.0;
      tp[pc] += 1.0;
    } else {
      fp[pc] += 1.0;
      fn[tc] += 1.0;
    }
  }
  // Macro average over classes that occur in the truth or the predictions.
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < kClassCount; ++c) {
    if (tp[c] + fp[c] + fn[c] == 0.0) continue;
    sum += f1_score(tp[c], fp[c], fn[c]);
    ++present;
  }
  return AccuracyF1{correct / static_cast<double>(predictions.size()), sum / present};
}

AccuracyF1 compute_accuracy_f1(std::span<const TrialPrediction> predictions) {
  if (predictions.empty()) throw DataError("accuracy: no predictions");
  double tp = 0.0, fp = 0.0, fn = 0.0, correct = 0.0;
  for (const auto& p : predictions) {
    if (p.predicted_eligible == p.true_eligible) correct += 1.0;
    if (p.predicted_eligible && p.true_eligible) tp += 1.0;
    if (p.predicted_eligible && !p.true_eligible) fp += 1.0;
    if (!p.predicted_eligible && p.true_eligible) fn += 1.0;
  }
  return AccuracyF1{correct / static_cast<double>(predictions.size()), f1_score(tp, fp, fn)};
}

MetricsReport evaluate(std::span<const PairPrediction> predictions, SensitiveAttribute attribute) {
  AccuracyF1 af = compute_accuracy_f1(predictions);
  return MetricsReport{Task::kCriterion, attribute, af.accuracy, af.f1, compute_dp(predictions, attribute),
                       compute_eo(predictions, attribute), group_counts(predictions, attribute)};
}

MetricsReport evaluate(std::span<const TrialPrediction> predictions, SensitiveAttribute attribute) {
  AccuracyF1 af = compute_accuracy_f1(predictions);
  return MetricsReport{Task::kTrial, attribute, af.accuracy, af.f1, compute_dp(predictions, attribute),
                       compute_eo(predictions, attribute), group_counts(predictions, attribute)};
}

nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["task"] = to_string(r.task);
  j["attribute"] = to_string(r.attribute);
  j["accuracy"] = r.accuracy;
  j["f1"] = r.f1;
  j["dp"] = r.dp;
  j["eo"] = r.eo;
  j["group-counts"] = {{std::string(group_name(r.attribute, 0)), r.group_counts[0]},
                       {std::string(group_name(r.attribute, 1)), r.group_counts[1]}};
  return j;
}

std::string metrics_csv_header() { return "task,attribute,accuracy,f1,dp,eo"; }

std::string metrics_csv_row(const MetricsReport& r) {
  std::string out(to_string(r.task));
  out += ',';
  out += to_string(r.attribute);
  for (double v : {r.accuracy, r.f1, r.dp, r.eo}) {
    out += ',';
    out += format_double(v);
  }
  return out;
}

// ---- sweep ---------------------------------------------------------------------

namespace {

SweepCell run_cell(const CorpusSplits& splits, TrainConfig config, double lambda) {
  SweepCell cell;
  cell.lambda = lambda;
  try {
    config.mode = TrainMode::kFairPM;
    config.lambda_fc = lambda;
    TrainResult trained = train(splits, config);
    auto pairs = predict_pairs(trained.model, splits.test);
    auto trials = predict_trials(splits.test, pairs);
    cell.criterion = evaluate(std::span<const PairPrediction>(pairs), config.attribute);
    cell.trial = evaluate(std::span<const TrialPrediction>(trials), config.attribute);
  } catch (const Error& e) {
    cell.error = e.what();
  }
  return cell;
}

}  // namespace

std::vector<SweepCell> sweep_lambda(const CorpusSplits& splits, const TrainConfig& base, std::span<const double> lambdas,
                                    int threads) {
  if (lambdas.empty()) throw ConfigError("sweep: no lambda values");
  for (double l : lambdas)
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("sweep: lambda values must be non-negative");
  base.validate();
  std::vector<SweepCell> cells(lambdas.size());
  const auto workers = static_cast<std::size_t>(std::clamp(threads, 1, static_cast<int>(lambdas.size())));
  if (workers == 1) {
    for (std::size_t i = 0; i < lambdas.size(); ++i) cells[i] = run_cell(splits, base, lambdas[i]);
    return cells;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < lambdas.size(); i = next++) cells[i] = run_cell(splits, base, lambdas[i]);
    });
  for (auto& t : pool) t.join();
  return cells;
}

std::string sweep_table_csv(std::span<const SweepCell> cells, Task task) {
  std::string out = "lambda," + metrics_csv_header() + "\n";
  for (const auto& c : cells) {
    const auto& report = task == Task::kCriterion ? c.criterion : c.trial;
    if (!report) continue;
    out += format_double(c.lambda) + "," + metrics_csv_row(*report) + "\n";
  }
  return out;
}

std::vector<SweepRow> parse_sweep_table(std::string_view csv) {
  std::istringstream in{std::string(csv)};
  std::string line;
  if (!std::getline(in, line) || line != "lambda," + metrics_csv_header())
    throw DataError("sweep table: unexpected header");
  std::vector<SweepRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
    if (fields.size() != 7) throw DataError("sweep table line " + std::to_string(line_no) + ": expected 7 fields");
    try {
      SweepRow row;
      row.lambda = std::stod(fields[0]);
      row.report.task = parse_task(fields[1]);
      row.report.attribute = parse_attribute(fields[2]);
      row.report.accuracy = std::stod(fields[3]);
      row.report.f1 = std::stod(fields[4]);
      row.report.dp = std::stod(fields[5]);
      row.report.eo = std::stod(fields[6]);
      rows.push_back(row);
    } catch (const std::logic_error&) {
      throw DataError("sweep table line " + std::to_string(line_no) + ": malformed number");
    } catch (const ConfigError& e) {
      throw DataError("sweep table line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

// ---- case study ----------------------------------------------------------------

std::vector<CaseStudyRow> case_study(const Corpus& corpus, std::span<const PairPrediction> baseline,
                                     std::span<const PairPrediction> fairpm) {
  using Key = std::pair<std::string_view, std::string_view>;
  std::map<Key, const PairPrediction*> other;
  for (const auto& p : fairpm) other.emplace(Key{p.patient_id, p.criterion_id}, &p);
  if (other.size() != fairpm.size() || baseline.size() != fairpm.size())
    throw DataError("case study: prediction sets cover different pairs");
  CorpusIndex index(corpus);
  std::vector<CaseStudyRow> rows;
  for (const auto& b : baseline) {
    auto it = other.find(Key{b.patient_id, b.criterion_id});
    if (it == other.end())
      throw DataError("case study: pair (" + b.patient_id + ", " + b.criterion_id + ") missing from one prediction set");
    if (it->second->predicted == b.predicted) continue;
    if (!index.has_criterion(b.criterion_id)) throw DataError("case study: unknown criterion " + b.criterion_id);
    const Criterion& c = index.criterion(b.criterion_id);
    std::string text;
    for (const auto& t : c.text) text += (text.empty() ? "" : " ") + t;
    rows.push_back(CaseStudyRow{index.trial_of(b.criterion_id).trial_id, b.criterion_id, std::move(text), b.patient_id,
                                b.groups, b.predicted, it->second->predicted, b.truth});
  }
  std::sort(rows.begin(), rows.end(), [](const CaseStudyRow& a, const CaseStudyRow& b) {
    return std::tie(a.criterion_id, a.groups, a.patient_id) < std::tie(b.criterion_id, b.groups, b.patient_id);
  });
  return rows;
}

std::string case_study_csv(std::span<const CaseStudyRow> rows) {
  std::string out = "trial-id,criterion-id,criterion-text,patient-id,race,gender,baseline,fairpm,truth\n";
  for (const auto& r : rows) {
    out += r.trial_id + "," + r.criterion_id + ",\"" + r.criterion_text + "\"," + r.patient_id + ",";
    out += std::string(group_name(SensitiveAttribute::kRace, r.groups[0])) + ",";
    out += std::string(group_name(SensitiveAttribute::kGender, r.groups[1])) + ",";
    out += std::string(to_string(r.baseline)) + "," + std::string(to_string(r.fairpm)) + "," +
           std::string(to_string(r.truth)) + "\n";
  }
  return out;
}

}  // namespace fairpm
