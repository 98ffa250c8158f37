#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "fairpm/corpus.h"
#include "fairpm/random.h"

// Synthetic corpus generation.
//
// Every random draw is made unconditionally and in a fixed order, so two
// configs differing only in bias-strength consume the generator identically.
// A patient holds a code when its per-(patient, code) uniform falls below the
// group-dependent prevalence; raising bias-strength therefore moves each
// individual draw monotonically.
namespace fairpm {

namespace {

enum class CodeRole { kBackground, kInclusion, kExclusion };

struct CodeSpec {
  MedicalCode code;
  CodeRole role = CodeRole::kBackground;
  double prevalence = 0.0;
  // Attribute whose group 1 is disadvantaged by this code, if any.
  std::optional<SensitiveAttribute> skew;
};

constexpr double kSkewMagnitude = 0.6;
constexpr double kNoMedicationRate = 0.12;
constexpr double kNoProcedureRate = 0.2;
constexpr int kMaxVisits = 4;

std::string code_name(char prefix, int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%c%02d", prefix, i);
  return buf;
}

double group_prevalence(const CodeSpec& spec, const PatientRecord& p, double bias) {
  if (!spec.skew || spec.role == CodeRole::kBackground) return spec.prevalence;
  const double delta = bias * kSkewMagnitude;
  const bool disadvantaged = p.group(*spec.skew) == 1;
  // Disadvantaged patients hold fewer qualifying codes and more excluding ones.
  const bool raise = (spec.role == CodeRole::kExclusion) == disadvantaged;
  const double v = raise ? spec.prevalence * (1.0 + delta) : spec.prevalence * (1.0 - delta);
  return std::clamp(v, 0.0, 0.97);
}

std::vector<std::string> code_text(CriterionKind kind, const MedicalCode& code) {
  std::vector<std::string> words;
  if (kind == CriterionKind::kExclusion) words = {"excluded", "if"};
  switch (code.category) {
    case CodeCategory::kDiagnosis:
      words.insert(words.end(), {"diagnosed", "with"});
      break;
    case CodeCategory::kMedication:
      words.insert(words.end(), {"currently", "taking"});
      break;
    case CodeCategory::kProcedure:
      words.insert(words.end(), {"underwent"});
      break;
  }
  words.push_back(code.code);
  return words;
}

std::vector<std::string> age_text(int threshold, bool mention_gender) {
  const std::string n = std::to_string(threshold);
  if (mention_gender) return {"male", "or", "female", "subjects", ">=", n, "years", "of", "age"};
  return {"age", ">=", n, "years"};
}

}  // namespace

Corpus generate(const GeneratorConfig& config) {
  config.validate();
  Rng rng(config.seed);

  // Vocabulary and code roles.
  std::vector<CodeSpec> specs;
  std::map<CodeCategory, std::vector<std::size_t>> inclusion_pool, exclusion_pool, background_pool;
  const std::pair<CodeCategory, std::pair<char, int>> categories[] = {
      {CodeCategory::kDiagnosis, {'D', config.diagnosis_vocabulary}},
      {CodeCategory::kMedication, {'M', config.medication_vocabulary}},
      {CodeCategory::kProcedure, {'P', config.procedure_vocabulary}},
  };
  for (const auto& [category, naming] : categories) {
    const int n = naming.second;
    const int n_inc = std::max(1, n / 3);
    const int n_exc = n - n_inc >= 1 ? std::max(1, n / 4) : 0;
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    for (int r = 0; r < n; ++r) {
      CodeSpec spec;
      spec.code = MedicalCode{category, code_name(naming.first, order[r])};
      const double role_u = rng.uniform();
      const double prev_u = rng.uniform();
      if (r < n_inc) {
        spec.role = CodeRole::kInclusion;
        spec.prevalence = 0.45 + 0.3 * prev_u;
      } else if (r < n_inc + n_exc) {
        spec.role = CodeRole::kExclusion;
        spec.prevalence = 0.1 + 0.2 * prev_u;
      } else {
        spec.role = CodeRole::kBackground;
        spec.prevalence = 0.05 + 0.25 * prev_u;
      }
      if (spec.role != CodeRole::kBackground) {
        if (role_u < 0.5) spec.skew = SensitiveAttribute::kRace;
        else if (role_u < 0.75) spec.skew = SensitiveAttribute::kGender;
      }
      auto& pool = spec.role == CodeRole::kInclusion   ? inclusion_pool[category]
                   : spec.role == CodeRole::kExclusion ? exclusion_pool[category]
                                                       : background_pool[category];
      pool.push_back(specs.size());
      specs.push_back(std::move(spec));
    }
  }
  // Codes in a stable, name-sorted order for the per-patient draws.
  std::vector<std::size_t> spec_order(specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) spec_order[i] = i;
  std::sort(spec_order.begin(), spec_order.end(),
            [&](std::size_t a, std::size_t b) { return specs[a].code.code < specs[b].code.code; });

  std::vector<std::size_t> filler = background_pool[CodeCategory::kDiagnosis];
  if (filler.empty()) {
    for (std::size_t i = 0; i < specs.size(); ++i)
      if (specs[i].code.category == CodeCategory::kDiagnosis) filler.push_back(i);
  }

  // Trials.
  Corpus corpus;
  auto pick_category = [&](double u) {
    if (u < 0.6) return CodeCategory::kDiagnosis;
    if (u < 0.8) return CodeCategory::kMedication;
    return CodeCategory::kProcedure;
  };
  for (int t = 0; t < config.trial_count; ++t) {
    Trial trial;
    char id[32];
    std::snprintf(id, sizeof(id), "TRIAL-%02d", t);
    trial.trial_id = id;
    const int k = rng.uniform_int(config.criteria_per_trial_min, config.criteria_per_trial_max);
    const int n_inc = k == 1 ? 1 : std::clamp(k / 2 + rng.uniform_int(0, 1), 1, k);
    std::vector<std::size_t> used;
    auto draw_code = [&](std::map<CodeCategory, std::vector<std::size_t>>& pools, CodeCategory cat) {
      const auto& pool = pools[cat].empty() ? pools[CodeCategory::kDiagnosis] : pools[cat];
      std::size_t pick = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
      // Prefer codes not yet used by this trial.
      for (std::size_t tries = 0; tries < pool.size() && std::find(used.begin(), used.end(), pick) != used.end(); ++tries) {
        pick = pool[(std::find(pool.begin(), pool.end(), pick) - pool.begin() + 1) % pool.size()];
      }
      used.push_back(pick);
      return pick;
    };
    for (int i = 0; i < k; ++i) {
      const bool inclusion = i < n_inc;
      Criterion c;
      std::snprintf(id, sizeof(id), "T%02d-%c%d", t, inclusion ? 'I' : 'E', inclusion ? i : i - n_inc);
      c.criterion_id = id;
      c.kind = inclusion ? CriterionKind::kInclusion : CriterionKind::kExclusion;
      const double type_u = rng.uniform();
      const double cat_u = rng.uniform();
      const double tmpl_u = rng.uniform();
      if (inclusion && type_u < 0.2) {
        c.predicate.age = AgeRule{AgeRule::Comparison::kAtLeast, 18};
        c.text = age_text(18, tmpl_u < 0.5);
      } else {
        auto& pools = inclusion ? inclusion_pool : exclusion_pool;
        const std::size_t s = draw_code(pools, pick_category(cat_u));
        c.predicate.codes = CodeRule{specs[s].code.category, {specs[s].code.code}};
        c.text = code_text(c.kind, specs[s].code);
      }
      (inclusion ? trial.inclusion : trial.exclusion).push_back(std::move(c));
    }
    corpus.trials.push_back(std::move(trial));
  }

  // Patients.
  for (int i = 0; i < config.patient_count; ++i) {
    PatientRecord p;
    char id[32];
    std::snprintf(id, sizeof(id), "P%04d", i);
    p.patient_id = id;
    p.race = rng.uniform() < config.race_proportions[0] ? Race::kWhite : Race::kOthers;
    p.gender = rng.uniform() < config.gender_proportions[0] ? Gender::kMale : Gender::kFemale;
    p.age = static_cast<int>(std::clamp(std::lround(64.0 + 14.0 * rng.normal()), 18L, 99L));
    const bool no_medication = rng.uniform() < kNoMedicationRate;
    const bool no_procedure = rng.uniform() < kNoProcedureRate;
    const int visits = rng.uniform_int(1, kMaxVisits);
    std::vector<Visit> record(visits);
    for (std::size_t s : spec_order) {
      const double u = rng.uniform();
      const int slot = rng.uniform_int(0, visits - 1);
      const CodeSpec& spec = specs[s];
      if (spec.code.category == CodeCategory::kMedication && no_medication) continue;
      if (spec.code.category == CodeCategory::kProcedure && no_procedure) continue;
      if (u < group_prevalence(spec, p, config.bias_strength)) record[slot].push_back(spec.code);
    }
    for (auto& visit : record) {
      const std::size_t f = filler[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(filler.size()) - 1))];
      if (visit.empty()) visit.push_back(specs[f].code);
      std::sort(visit.begin(), visit.end(), [](const MedicalCode& a, const MedicalCode& b) {
        return std::tie(a.category, a.code) < std::tie(b.category, b.code);
      });
    }
    p.visits = std::move(record);
    corpus.patients.push_back(std::move(p));
  }

  // Labels.
  for (const auto& p : corpus.patients) {
    for (const auto& t : corpus.trials) {
      for (const auto* list : {&t.inclusion, &t.exclusion})
        for (const auto& c : *list) corpus.pairs.push_back(LabeledPair{p.patient_id, c.criterion_id, oracle_label(p, c)});
    }
  }
  return corpus;
}

}  // namespace fairpm
