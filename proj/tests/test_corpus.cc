#include <cmath>
#include <filesystem>
#include <set>
#include <string>

#include "doctest.h"
#include "fairpm/corpus.h"
#include "fairpm/errors.h"
#include "fairpm/io.h"

using namespace fairpm;

namespace {

GeneratorConfig small_config(double bias = 0.75, int patients = 120) {
  GeneratorConfig c;
  c.patient_count = patients;
  c.bias_strength = bias;
  return c;
}

PatientRecord patient_with(std::vector<Visit> visits, int age = 40) {
  PatientRecord p;
  p.patient_id = "P";
  p.visits = std::move(visits);
  p.age = age;
  return p;
}

Criterion code_criterion(CriterionKind kind, CodeCategory cat, std::vector<std::string> codes) {
  Criterion c;
  c.criterion_id = "C";
  c.kind = kind;
  c.text = {"diagnosed", "with", codes.front()};
  c.predicate.codes = CodeRule{cat, std::move(codes)};
  return c;
}

// Inclusion-label rate among inclusion-criterion pairs, per group.
std::array<std::pair<double, double>, 2> inclusion_rates(const Corpus& corpus, SensitiveAttribute attr) {
  CorpusIndex index(corpus);
  std::array<std::pair<double, double>, 2> acc{};
  for (const auto& pr : corpus.pairs) {
    if (index.criterion(pr.criterion_id).kind != CriterionKind::kInclusion) continue;
    const int g = index.patient(pr.patient_id).group(attr);
    acc[g].second += 1.0;
    if (pr.label == Label::kInclusion) acc[g].first += 1.0;
  }
  return acc;
}

}  // namespace

TEST_SUITE("corpus") {
  TEST_CASE("oracle label rules") {
    Criterion age;
    age.kind = CriterionKind::kInclusion;
    age.predicate.age = AgeRule{AgeRule::Comparison::kAtLeast, 18};
    CHECK(oracle_label(patient_with({{{CodeCategory::kDiagnosis, "d01"}}}, 20), age) == Label::kInclusion);
    CHECK(oracle_label(patient_with({{{CodeCategory::kDiagnosis, "d01"}}}, 17), age) == Label::kUnknown);

    const Criterion excl = code_criterion(CriterionKind::kExclusion, CodeCategory::kDiagnosis, {"d07"});
    CHECK(oracle_label(patient_with({{{CodeCategory::kDiagnosis, "d07"}}}), excl) == Label::kExclusion);
    CHECK(oracle_label(patient_with({{{CodeCategory::kDiagnosis, "d08"}}}), excl) == Label::kUnknown);

    const Criterion med = code_criterion(CriterionKind::kInclusion, CodeCategory::kMedication, {"m03"});
    CHECK(oracle_label(patient_with({{{CodeCategory::kDiagnosis, "d01"}}}), med) == Label::kUnknown);
    CHECK(oracle_label(patient_with({{{CodeCategory::kMedication, "m03"}}}), med) == Label::kInclusion);

    // Conjunction of code and age components.
    Criterion both = code_criterion(CriterionKind::kInclusion, CodeCategory::kDiagnosis, {"d01"});
    both.predicate.age = AgeRule{AgeRule::Comparison::kBelow, 65};
    CHECK(oracle_label(patient_with({{{CodeCategory::kDiagnosis, "d01"}}}, 40), both) == Label::kInclusion);
    CHECK(oracle_label(patient_with({{{CodeCategory::kDiagnosis, "d01"}}}, 70), both) == Label::kUnknown);

    // Total on an empty record.
    CHECK(oracle_label(patient_with({}), med) == Label::kUnknown);
  }

  TEST_CASE("default configuration splits 515/59/251") {
    GeneratorConfig config;
    Corpus corpus = generate(config);
    REQUIRE(corpus.patients.size() == 825);
    CorpusSplits s = split(corpus, config.split_ratios, config.seed);
    CHECK(s.train.patients.size() == 515);
    CHECK(s.valid.patients.size() == 59);
    CHECK(s.test.patients.size() == 251);
  }

  TEST_CASE("generated corpus invariants") {
    Corpus corpus = generate(small_config());
    CorpusIndex index(corpus);
    for (const auto& p : corpus.patients) {
      REQUIRE_FALSE(p.visits.empty());
      for (const auto& v : p.visits) CHECK_FALSE(v.empty());
    }
    std::size_t criteria = 0;
    for (const auto& t : corpus.trials) {
      CHECK_FALSE(t.inclusion.empty());
      for (const auto& c : t.inclusion) CHECK(c.kind == CriterionKind::kInclusion);
      for (const auto& c : t.exclusion) CHECK(c.kind == CriterionKind::kExclusion);
      for (const auto* list : {&t.inclusion, &t.exclusion})
        for (const auto& c : *list) CHECK_FALSE(c.text.empty());
      criteria += t.inclusion.size() + t.exclusion.size();
    }
    CHECK(corpus.pairs.size() == corpus.patients.size() * criteria);
    for (const auto& pr : corpus.pairs)
      CHECK(pr.label == oracle_label(index.patient(pr.patient_id), index.criterion(pr.criterion_id)));
  }

  TEST_CASE("generation is deterministic") {
    CHECK(serialize_corpus(generate(small_config())) == serialize_corpus(generate(small_config())));
    GeneratorConfig other = small_config();
    other.seed += 1;
    CHECK(serialize_corpus(generate(small_config())) != serialize_corpus(generate(other)));
  }

  TEST_CASE("zero bias leaves group label rates equal within three standard errors") {
    Corpus corpus = generate(small_config(0.0, 825));
    for (auto attr : {SensitiveAttribute::kRace, SensitiveAttribute::kGender}) {
      auto r = inclusion_rates(corpus, attr);
      const double p0 = r[0].first / r[0].second, p1 = r[1].first / r[1].second;
      const double pooled = (r[0].first + r[1].first) / (r[0].second + r[1].second);
      const double se = std::sqrt(pooled * (1.0 - pooled) * (1.0 / r[0].second + 1.0 / r[1].second));
      INFO(to_string(attr));
      CHECK(std::fabs(p0 - p1) <= 3.0 * se);
    }
  }

  TEST_CASE("label-rate gap is non-decreasing in bias strength") {
    for (auto attr : {SensitiveAttribute::kRace, SensitiveAttribute::kGender}) {
      double previous = -1.0;
      for (double b : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        auto r = inclusion_rates(generate(small_config(b, 400)), attr);
        const double gap = std::fabs(r[0].first / r[0].second - r[1].first / r[1].second);
        INFO(to_string(attr) << " b=" << b);
        CHECK(gap >= previous);
        previous = gap;
      }
    }
  }

  TEST_CASE("split partitions patients and keeps their pairs together") {
    Corpus corpus = generate(small_config());
    CorpusSplits s = split(corpus, {0.5, 0.2, 0.3}, 9);
    std::set<std::string> seen;
    for (const Corpus* part : {&s.train, &s.valid, &s.test}) {
      std::set<std::string> mine;
      for (const auto& p : part->patients) {
        CHECK(seen.insert(p.patient_id).second);
        mine.insert(p.patient_id);
      }
      for (const auto& pr : part->pairs) CHECK(mine.count(pr.patient_id) == 1);
      CHECK(part->trials == corpus.trials);
    }
    CHECK(seen.size() == corpus.patients.size());
    CHECK(s.train.pairs.size() + s.valid.pairs.size() + s.test.pairs.size() == corpus.pairs.size());
  }

  TEST_CASE("split edge cases") {
    Corpus corpus = generate(small_config());
    CorpusSplits all = split(corpus, {1.0, 0.0, 0.0}, 1);
    CHECK(all.train.patients.size() == corpus.patients.size());
    CHECK(all.valid.patients.empty());
    CHECK(all.test.patients.empty());

    CorpusSplits a = split(corpus, {0.6, 0.2, 0.2}, 1);
    CorpusSplits b = split(corpus, {0.6, 0.2, 0.2}, 2);
    CHECK(a.train.patients.size() == b.train.patients.size());
    CHECK(a.valid.patients.size() == b.valid.patients.size());
    CHECK(a.test.patients.size() == b.test.patients.size());
    CHECK_FALSE(a.train.patients == b.train.patients);

    CHECK_THROWS_AS(split(corpus, {0.5, 0.5, 0.5}, 1), ConfigError);
    CHECK_THROWS_AS(split(corpus, {1.2, -0.2, 0.0}, 1), ConfigError);
  }

  TEST_CASE("serialization round trip") {
    Corpus corpus = generate(small_config(0.5, 40));
    const std::string text = serialize_corpus(corpus);
    Corpus back = parse_corpus(text);
    CHECK(back == corpus);
    CHECK(serialize_corpus(back) == text);

    const auto path = std::filesystem::temp_directory_path() / "fairpm_corpus_roundtrip.jsonl";
    save_corpus(corpus, path);
    CHECK(load_corpus(path) == corpus);
    std::filesystem::remove(path);
  }

  TEST_CASE("parse errors name the line and field") {
    CHECK(parse_corpus("").patients.empty());

    std::string text = serialize_corpus(generate(small_config(0.5, 3)));
    const auto second_line = text.find('\n') + 1;
    std::string truncated = text.substr(0, second_line + 20);
    try {
      parse_corpus(truncated, "c.jsonl");
      FAIL("expected a parse error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("c.jsonl:2:") != std::string::npos);
    }

    const std::string bad = R"({"kind":"patient","patient-id":"P1","visits":[[{"category":"diagnosis","code":"d01"}]],"race":"martian","gender":"male","age":30})";
    try {
      parse_corpus(bad + "\n", "x.jsonl");
      FAIL("expected a field error");
    } catch (const DataError& e) {
      const std::string what = e.what();
      CHECK(what.find("x.jsonl:1:") != std::string::npos);
      CHECK(what.find("race") != std::string::npos);
    }
  }

  TEST_CASE("generator config validation and file loading") {
    GeneratorConfig c;
    c.race_proportions = {0.7, 0.7};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = GeneratorConfig{};
    c.bias_strength = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = GeneratorConfig{};
    c.diagnosis_vocabulary = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);

    GeneratorConfig d;
    CHECK(generator_config_from_json(nlohmann::json::parse(to_json(d).dump())) == d);
    CHECK_THROWS_AS(generator_config_from_json(nlohmann::json::parse(R"({"colour": 3})")), ConfigError);
    try {
      load_generator_config("/nonexistent/gen.json");
      FAIL("expected a missing-file error");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("/nonexistent/gen.json") != std::string::npos);
    }
  }
}
