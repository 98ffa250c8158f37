#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "fairpm/errors.h"
#include "fairpm/evaluator.h"
#include "fairpm/random.h"
#include "support/oracles.h"

using namespace fairpm;
using fairpm::testing::TableRow;

namespace {

std::vector<PairPrediction> from_table(const std::vector<TableRow>& rows) {
  std::vector<PairPrediction> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    PairPrediction p;
    p.patient_id = "P" + std::to_string(i);
    p.criterion_id = "C";
    p.kind = rows[i].criterion_inclusion ? CriterionKind::kInclusion : CriterionKind::kExclusion;
    p.predicted = static_cast<Label>(rows[i].predicted);
    p.truth = static_cast<Label>(rows[i].truth);
    p.groups = {rows[i].group, 0};
    out.push_back(p);
  }
  return out;
}

// Rows with the given favorable flags for prediction and truth, inclusion criteria only.
TableRow row(bool predicted_favorable, bool truly_favorable, int group) {
  return TableRow{true, predicted_favorable ? 0 : 2, truly_favorable ? 0 : 2, group};
}

std::vector<TableRow> random_table(Rng& rng, std::size_t n) {
  // Both groups get a truly favorable row so EO is defined.
  std::vector<TableRow> rows{row(true, true, 0), row(false, true, 1)};
  while (rows.size() < n)
    rows.push_back(TableRow{rng.bernoulli(0.5), rng.uniform_int(0, 2), rng.uniform_int(0, 2), rng.uniform_int(0, 1)});
  return rows;
}

Trial three_criterion_trial(int inclusion_count) {
  Trial t;
  t.trial_id = "T1";
  for (int i = 0; i < 3; ++i) {
    Criterion c;
    c.criterion_id = "T1-" + std::to_string(i);
    c.kind = i < inclusion_count ? CriterionKind::kInclusion : CriterionKind::kExclusion;
    (i < inclusion_count ? t.inclusion : t.exclusion).push_back(c);
  }
  return t;
}

EncoderConfig small_encoder() {
  EncoderConfig e;
  e.embed_dim = 8;
  e.z_dim = 8;
  e.conv_channels = 4;
  e.predictor_hidden = 8;
  return e;
}

}  // namespace

TEST_SUITE("evaluator") {
  TEST_CASE("argmax tie break follows class order") {
    const double tie[] = {1.0, 1.0, 0.0};
    const double later[] = {0.0, 2.0, 2.0};
    const double last[] = {0.0, 1.0, 3.0};
    CHECK(argmax_label(tie) == Label::kInclusion);
    CHECK(argmax_label(later) == Label::kExclusion);
    CHECK(argmax_label(last) == Label::kUnknown);
  }

  TEST_CASE("favors eligibility") {
    CHECK(favors_eligibility(CriterionKind::kInclusion, Label::kInclusion));
    CHECK_FALSE(favors_eligibility(CriterionKind::kInclusion, Label::kUnknown));
    CHECK_FALSE(favors_eligibility(CriterionKind::kExclusion, Label::kExclusion));
    CHECK(favors_eligibility(CriterionKind::kExclusion, Label::kUnknown));
  }

  TEST_CASE("demographic parity gap of 0.1") {
    std::vector<TableRow> rows;
    for (int i = 0; i < 10; ++i) rows.push_back(row(i < 6, true, 0));
    for (int i = 0; i < 10; ++i) rows.push_back(row(i < 5, true, 1));
    CHECK(compute_dp(from_table(rows), SensitiveAttribute::kRace) == doctest::Approx(0.1).epsilon(1e-12));

    std::vector<TableRow> same;
    for (int i = 0; i < 8; ++i) same.push_back(row(i % 2 == 0, true, i % 2));
    for (auto& r : same) r.predicted = 0;
    CHECK(compute_dp(from_table(same), SensitiveAttribute::kRace) == 0.0);
  }

  TEST_CASE("equal opportunity gap of 0.25") {
    std::vector<TableRow> rows;
    for (int i = 0; i < 4; ++i) rows.push_back(row(true, true, 0));
    for (int i = 0; i < 4; ++i) rows.push_back(row(i < 3, true, 1));
    rows.push_back(row(true, false, 1));  // false positives do not enter the TPR
    CHECK(compute_eo(from_table(rows), SensitiveAttribute::kRace) == doctest::Approx(0.25).epsilon(1e-12));

    std::vector<TableRow> equal{row(true, true, 0), row(false, true, 0), row(true, true, 1), row(false, true, 1)};
    CHECK(compute_eo(from_table(equal), SensitiveAttribute::kRace) == 0.0);
  }

  TEST_CASE("empty groups are named in the error") {
    std::vector<TableRow> rows{row(true, true, 0), row(false, true, 0)};
    try {
      compute_dp(from_table(rows), SensitiveAttribute::kRace);
      FAIL("expected an error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("others") != std::string::npos);
    }
    std::vector<TableRow> no_positive{row(true, true, 0), row(true, false, 1)};
    try {
      compute_eo(from_table(no_positive), SensitiveAttribute::kRace);
      FAIL("expected an error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("others") != std::string::npos);
    }
  }

  TEST_CASE("accuracy and macro F1") {
    std::vector<TableRow> perfect;
    for (int c = 0; c < 3; ++c) perfect.push_back(TableRow{true, c, c, c % 2});
    AccuracyF1 p = compute_accuracy_f1(from_table(perfect));
    CHECK(p.accuracy == 1.0);
    CHECK(p.f1 == 1.0);

    // Balanced three-class truth, every prediction inclusion.
    std::vector<TableRow> one_class;
    for (int c = 0; c < 3; ++c)
      for (int k = 0; k < 4; ++k) one_class.push_back(TableRow{true, 0, c, k % 2});
    AccuracyF1 o = compute_accuracy_f1(from_table(one_class));
    CHECK(o.accuracy == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(o.f1 == doctest::Approx(0.5 / 3.0).epsilon(1e-15));

    // Mixed ten-prediction set.
    const int pred[] = {0, 0, 1, 2, 1, 0, 2, 2, 1, 0};
    const int truth[] = {0, 1, 1, 2, 0, 0, 2, 1, 1, 2};
    std::vector<TableRow> mixed;
    for (int i = 0; i < 10; ++i) mixed.push_back(TableRow{i % 3 != 0, pred[i], truth[i], i % 2});
    auto expected = testing::oracle_metrics(mixed);
    AccuracyF1 m = compute_accuracy_f1(from_table(mixed));
    CHECK(m.accuracy == 0.6);
    CHECK(std::fabs(m.f1 - expected.macro_f1) <= 1e-12);
  }

  TEST_CASE("50 hand-built tables match the counting oracle") {
    Rng rng(2024);
    for (int t = 0; t < 50; ++t) {
      const auto rows = random_table(rng, t == 0 ? 20 : static_cast<std::size_t>(rng.uniform_int(6, 40)));
      const auto preds = from_table(rows);
      const auto o = testing::oracle_metrics(rows);
      MetricsReport r = evaluate(preds, SensitiveAttribute::kRace);
      CHECK(std::fabs(r.accuracy - o.accuracy) <= 1e-12);
      CHECK(std::fabs(r.f1 - o.macro_f1) <= 1e-12);
      CHECK(std::fabs(r.dp - o.dp) <= 1e-12);
      CHECK(std::fabs(r.eo - o.eo) <= 1e-12);
      CHECK(r.group_counts[0] + r.group_counts[1] == rows.size());
      for (double v : {r.accuracy, r.f1, r.dp, r.eo}) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }

      // Swapping which group is protected leaves the gaps unchanged.
      auto flipped = rows;
      for (auto& f : flipped) f.group = 1 - f.group;
      MetricsReport s = evaluate(from_table(flipped), SensitiveAttribute::kRace);
      CHECK(s.dp == doctest::Approx(r.dp).epsilon(1e-15));
      CHECK(s.eo == doctest::Approx(r.eo).epsilon(1e-15));
    }
  }

  TEST_CASE("trial metrics") {
    std::vector<TrialPrediction> t;
    auto add = [&](bool pred, bool truth, int group) {
      TrialPrediction p;
      p.patient_id = "P" + std::to_string(t.size());
      p.trial_id = "T1";
      p.predicted_eligible = pred;
      p.true_eligible = truth;
      p.groups = {group, 0};
      t.push_back(p);
    };
    add(true, true, 0);
    add(true, false, 0);
    add(false, true, 1);
    add(true, true, 1);
    MetricsReport r = evaluate(t, SensitiveAttribute::kRace);
    CHECK(r.task == Task::kTrial);
    CHECK(r.accuracy == 0.5);
    // precision 2/3, recall 2/3
    CHECK(r.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(r.dp == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(r.eo == doctest::Approx(0.5).epsilon(1e-15));
  }

  TEST_CASE("predict_trial matches the conjunction over all 27 assignments") {
    for (int inclusion_count = 0; inclusion_count <= 3; ++inclusion_count) {
      const Trial trial = three_criterion_trial(inclusion_count);
      std::vector<bool> is_inclusion;
      for (int i = 0; i < 3; ++i) is_inclusion.push_back(i < inclusion_count);
      for (int code = 0; code < 27; ++code) {
        std::vector<int> pred{code % 3, (code / 3) % 3, code / 9};
        std::vector<int> truth{(code + 1) % 3, code / 9, (code / 3) % 3};
        std::vector<PairPrediction> preds;
        for (int i = 0; i < 3; ++i) {
          PairPrediction p;
          p.patient_id = "P1";
          p.criterion_id = "T1-" + std::to_string(i);
          p.predicted = static_cast<Label>(pred[i]);
          p.truth = static_cast<Label>(truth[i]);
          preds.push_back(p);
        }
        TrialPrediction t = predict_trial(trial, preds);
        CHECK(t.predicted_eligible == testing::oracle_eligible(is_inclusion, pred));
        CHECK(t.true_eligible == testing::oracle_eligible(is_inclusion, truth));
        CHECK(t.patient_id == "P1");
      }
    }

    const Trial trial = three_criterion_trial(2);
    std::vector<PairPrediction> partial(2);
    partial[0].criterion_id = "T1-0";
    partial[1].criterion_id = "T1-1";
    try {
      predict_trial(trial, partial);
      FAIL("expected a missing-criterion error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("T1-2") != std::string::npos);
    }
  }

  TEST_CASE("oracle predictions score perfectly") {
    GeneratorConfig g;
    g.patient_count = 60;
    Corpus corpus = generate(g);
    auto preds = oracle_predictions(corpus);
    CHECK(preds.size() == corpus.pairs.size());
    MetricsReport r = evaluate(preds, SensitiveAttribute::kRace);
    CHECK(r.accuracy == 1.0);
    CHECK(r.f1 == 1.0);
    CHECK(r.eo == 0.0);
    auto trials = predict_trials(corpus, preds);
    CHECK(trials.size() == corpus.patients.size() * corpus.trials.size());
    for (const auto& t : trials) CHECK(t.predicted_eligible == t.true_eligible);
  }

  TEST_CASE("metrics serialization") {
    MetricsReport r;
    r.accuracy = 0.875;
    r.f1 = 0.5;
    r.dp = 0.125;
    r.eo = 0.0625;
    r.group_counts = {3, 5};
    CHECK(metrics_csv_header() == "task,attribute,accuracy,f1,dp,eo");
    const std::string line = metrics_csv_row(r);
    CHECK(line.rfind("criterion,race,", 0) == 0);
    auto j = to_json(r);
    CHECK(j["accuracy"] == 0.875);
    CHECK(j["task"] == "criterion");

    SweepCell a{0.0, r, std::nullopt, ""};
    SweepCell b{2.0, r, std::nullopt, ""};
    SweepCell failed{4.0, std::nullopt, std::nullopt, "diverged"};
    b.criterion->dp = 0.1 / 3.0;
    std::vector<SweepCell> cells{a, b, failed};
    const std::string csv = sweep_table_csv(cells, Task::kCriterion);
    CHECK(csv.rfind("lambda,task,attribute,accuracy,f1,dp,eo\n", 0) == 0);
    auto rows = parse_sweep_table(csv);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].lambda == 0.0);
    CHECK(rows[1].lambda == 2.0);
    CHECK(rows[1].report.dp == b.criterion->dp);
    CHECK(rows[1].report.accuracy == r.accuracy);
    CHECK_THROWS_AS(parse_sweep_table("lambda,task\n1,criterion\n"), DataError);
  }

  TEST_CASE("case study") {
    GeneratorConfig g;
    g.patient_count = 20;
    Corpus corpus = generate(g);
    auto base = oracle_predictions(corpus);
    CHECK(case_study(corpus, base, base).empty());

    auto other = base;
    other[7].predicted = other[7].predicted == Label::kInclusion ? Label::kExclusion : Label::kInclusion;
    auto rows = case_study(corpus, base, other);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].patient_id == base[7].patient_id);
    CHECK(rows[0].criterion_id == base[7].criterion_id);
    CHECK(rows[0].baseline == base[7].predicted);
    CHECK(rows[0].fairpm == other[7].predicted);
    CHECK_FALSE(rows[0].criterion_text.empty());
    const std::string csv = case_study_csv(rows);
    CHECK(csv.rfind("trial-id,criterion-id,criterion-text,patient-id,race,gender,baseline,fairpm,truth\n", 0) == 0);

    // Several disagreements come back sorted by criterion.
    auto many = base;
    for (std::size_t i = 0; i < many.size(); i += 5)
      many[i].predicted = many[i].predicted == Label::kUnknown ? Label::kInclusion : Label::kUnknown;
    auto sorted = case_study(corpus, base, many);
    CHECK(sorted.size() == (base.size() + 4) / 5);
    for (std::size_t i = 1; i < sorted.size(); ++i) CHECK(sorted[i - 1].criterion_id <= sorted[i].criterion_id);

    auto shorter = base;
    shorter.pop_back();
    CHECK_THROWS_AS(case_study(corpus, base, shorter), DataError);
  }

  TEST_CASE("sweep cells are plain training runs") {
    GeneratorConfig g;
    g.patient_count = 50;
    g.trial_count = 2;
    const CorpusSplits splits = split(generate(g), g.split_ratios, g.seed);
    TrainConfig base;
    base.encoder = small_encoder();
    base.max_epochs = 2;
    base.learning_rate = 5e-3;

    const double lambdas[] = {0.0, 1.5, 1.5, 0.0};
    auto cells = sweep_lambda(splits, base, lambdas, 2);
    REQUIRE(cells.size() == 4);
    for (const auto& c : cells) {
      CHECK(c.error.empty());
      REQUIRE(c.criterion.has_value());
      REQUIRE(c.trial.has_value());
    }
    CHECK(*cells[1].criterion == *cells[2].criterion);
    CHECK(*cells[0].criterion == *cells[3].criterion);

    TrainConfig baseline = base;
    baseline.mode = TrainMode::kBaseline;
    TrainResult r = train(splits, baseline);
    auto preds = predict_pairs(r.model, splits.test);
    CHECK(*cells[0].criterion == evaluate(preds, base.attribute));
    auto trial_preds = predict_trials(splits.test, preds);
    CHECK(*cells[0].trial == evaluate(trial_preds, base.attribute));

    TrainConfig broken = base;
    broken.optimizer = OptimizerKind::kPlainSgd;
    broken.learning_rate = 1e200;
    const double two[] = {0.0, 1.0};
    auto failed = sweep_lambda(splits, broken, two, 1);
    CHECK_FALSE(failed[0].error.empty());
    CHECK_FALSE(failed[1].error.empty());
    CHECK(sweep_table_csv(failed, Task::kCriterion) == "lambda,task,attribute,accuracy,f1,dp,eo\n");
  }
}
