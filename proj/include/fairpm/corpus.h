#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace fairpm {

enum class CodeCategory { kDiagnosis, kMedication, kProcedure };

struct MedicalCode {
  CodeCategory category = CodeCategory::kDiagnosis;
  std::string code;

  bool operator==(const MedicalCode&) const = default;
};

using Visit = std::vector<MedicalCode>;

enum class Race { kWhite, kOthers };
enum class Gender { kMale, kFemale };
enum class SensitiveAttribute { kRace, kGender };

// Every sensitive attribute here has exactly two groups, indexed 0 and 1.
inline constexpr int kGroupCount = 2;

struct PatientRecord {
  std::string patient_id;
  std::vector<Visit> visits;
  Race race = Race::kWhite;
  Gender gender = Gender::kMale;
  int age = 0;

  // Group index of this patient under `attribute` (white/male = 0).
  int group(SensitiveAttribute attribute) const;
  bool has_category(CodeCategory category) const;
  bool has_code(std::string_view code) const;

  bool operator==(const PatientRecord&) const = default;
};

enum class CriterionKind { kInclusion, kExclusion };

struct CodeRule {
  CodeCategory category = CodeCategory::kDiagnosis;
  // Satisfied when the record holds any of these codes.
  std::vector<std::string> codes;

  bool operator==(const CodeRule&) const = default;
};

struct AgeRule {
  enum class Comparison { kAtLeast, kBelow };
  Comparison comparison = Comparison::kAtLeast;
  int threshold = 0;

  bool operator==(const AgeRule&) const = default;
};

// Conjunction of the present components. A code rule whose category never
// appears in the record is indeterminate.
struct Predicate {
  std::optional<CodeRule> codes;
  std::optional<AgeRule> age;

  bool operator==(const Predicate&) const = default;
};

struct Criterion {
  std::string criterion_id;
  CriterionKind kind = CriterionKind::kInclusion;
  std::vector<std::string> text;
  Predicate predicate;

  bool operator==(const Criterion&) const = default;
};

struct Trial {
  std::string trial_id;
  std::vector<Criterion> inclusion;
  std::vector<Criterion> exclusion;

  bool operator==(const Trial&) const = default;
};

// Class order is fixed: it is also the logit order of the predictor.
enum class Label { kInclusion = 0, kExclusion = 1, kUnknown = 2 };
inline constexpr int kClassCount = 3;

struct LabeledPair {
  std::string patient_id;
  std::string criterion_id;
  Label label = Label::kUnknown;

  bool operator==(const LabeledPair&) const = default;
};

struct Corpus {
  std::vector<PatientRecord> patients;
  std::vector<Trial> trials;
  std::vector<LabeledPair> pairs;

  bool operator==(const Corpus& other) const {
    return patients == other.patients && trials == other.trials && pairs == other.pairs;
  }
};

// Index over a corpus for id lookups. Holds pointers into the corpus, which
// must outlive it and stay unmodified.
class CorpusIndex {
 public:
  explicit CorpusIndex(const Corpus& corpus);

  const PatientRecord& patient(std::string_view id) const;
  const Criterion& criterion(std::string_view id) const;
  const Trial& trial_of(std::string_view criterion_id) const;
  bool has_patient(std::string_view id) const;
  bool has_criterion(std::string_view id) const;

 private:
  std::map<std::string, const PatientRecord*, std::less<>> patients_;
  std::map<std::string, const Criterion*, std::less<>> criteria_;
  std::map<std::string, const Trial*, std::less<>> trial_of_;
};

struct GeneratorConfig {
  std::uint64_t seed = 20230101;
  int patient_count = 825;
  int trial_count = 6;
  int criteria_per_trial_min = 4;
  int criteria_per_trial_max = 6;
  int diagnosis_vocabulary = 24;
  int medication_vocabulary = 12;
  int procedure_vocabulary = 8;
  // (white, others) and (male, female); defaults follow the training-split demographics.
  std::array<double, 2> race_proportions{185.0 / 525.0, 340.0 / 525.0};
  std::array<double, 2> gender_proportions{308.0 / 525.0, 217.0 / 525.0};
  double bias_strength = 0.75;
  std::array<double, 3> split_ratios{0.624, 0.072, 0.304};

  void validate() const;
  bool operator==(const GeneratorConfig&) const = default;
};

struct CorpusSplits {
  Corpus train;
  Corpus valid;
  Corpus test;
};

std::string_view to_string(CodeCategory c);
std::string_view to_string(Race r);
std::string_view to_string(Gender g);
std::string_view to_string(SensitiveAttribute a);
std::string_view to_string(CriterionKind k);
std::string_view to_string(Label l);
CodeCategory parse_category(std::string_view s);
Race parse_race(std::string_view s);
Gender parse_gender(std::string_view s);
SensitiveAttribute parse_attribute(std::string_view s);
CriterionKind parse_kind(std::string_view s);
Label parse_label(std::string_view s);
std::string_view group_name(SensitiveAttribute attribute, int group);

Label oracle_label(const PatientRecord& patient, const Criterion& criterion);

Corpus generate(const GeneratorConfig& config);

// Patient-level split; every pair follows its patient. Ratios are non-negative
// and sum to one; sizes use largest-remainder rounding.
CorpusSplits split(const Corpus& corpus, std::array<double, 3> ratios, std::uint64_t seed);

// Line-delimited JSON records.
std::string serialize_corpus(const Corpus& corpus);
Corpus parse_corpus(std::string_view text, const std::string& source = "<memory>");
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);

nlohmann::ordered_json to_json(const GeneratorConfig& config);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);
GeneratorConfig load_generator_config(const std::filesystem::path& path);

}  // namespace fairpm
