#include "fairpm/corpus.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "fairpm/errors.h"
#include "fairpm/io.h"
#include "fairpm/random.h"

namespace fairpm {

using nlohmann::json;
using nlohmann::ordered_json;

// ---- enums -------------------------------------------------------------------

std::string_view to_string(CodeCategory c) {
  switch (c) {
    case CodeCategory::kDiagnosis: return "diagnosis";
    case CodeCategory::kMedication: return "medication";
    case CodeCategory::kProcedure: return "procedure";
  }
  return "?";
}

std::string_view to_string(Race r) { return r == Race::kWhite ? "white" : "others"; }
std::string_view to_string(Gender g) { return g == Gender::kMale ? "male" : "female"; }
std::string_view to_string(SensitiveAttribute a) { return a == SensitiveAttribute::kRace ? "race" : "gender"; }
std::string_view to_string(CriterionKind k) { return k == CriterionKind::kInclusion ? "inclusion" : "exclusion"; }

std::string_view to_string(Label l) {
  switch (l) {
    case Label::kInclusion: return "inclusion";
    case Label::kExclusion: return "exclusion";
    case Label::kUnknown: return "unknown";
  }
  return "?";
}

namespace {

[[noreturn]] void bad_value(std::string_view what, std::string_view s) {
  throw DataError("invalid " + std::string(what) + ": '" + std::string(s) + "'");
}

}  // namespace

CodeCategory parse_category(std::string_view s) {
  if (s == "diagnosis") return CodeCategory::kDiagnosis;
  if (s == "medication") return CodeCategory::kMedication;
  if (s == "procedure") return CodeCategory::kProcedure;
  bad_value("category", s);
}

Race parse_race(std::string_view s) {
  if (s == "white") return Race::kWhite;
  if (s == "others") return Race::kOthers;
  bad_value("race", s);
}

Gender parse_gender(std::string_view s) {
  if (s == "male") return Gender::kMale;
  if (s == "female") return Gender::kFemale;
  bad_value("gender", s);
}

SensitiveAttribute parse_attribute(std::string_view s) {
  if (s == "race") return SensitiveAttribute::kRace;
  if (s == "gender") return SensitiveAttribute::kGender;
  bad_value("attribute", s);
}

CriterionKind parse_kind(std::string_view s) {
  if (s == "inclusion") return CriterionKind::kInclusion;
  if (s == "exclusion") return CriterionKind::kExclusion;
  bad_value("criterion kind", s);
}

Label parse_label(std::string_view s) {
  if (s == "inclusion") return Label::kInclusion;
  if (s == "exclusion") return Label::kExclusion;
  if (s == "unknown") return Label::kUnknown;
  bad_value("label", s);
}

std::string_view group_name(SensitiveAttribute attribute, int group) {
  if (attribute == SensitiveAttribute::kRace) return to_string(group == 0 ? Race::kWhite : Race::kOthers);
  return to_string(group == 0 ? Gender::kMale : Gender::kFemale);
}

// ---- records -----------------------------------------------------------------

int PatientRecord::group(SensitiveAttribute attribute) const {
  if (attribute == SensitiveAttribute::kRace) return race == Race::kWhite ? 0 : 1;
  return gender == Gender::kMale ? 0 : 1;
}

bool PatientRecord::has_category(CodeCategory category) const {
  for (const auto& v : visits)
    for (const auto& c : v)
      if (c.category == category) return true;
  return false;
}

bool PatientRecord::has_code(std::string_view code) const {
  for (const auto& v : visits)
    for (const auto& c : v)
      if (c.code == code) return true;
  return false;
}

CorpusIndex::CorpusIndex(const Corpus& corpus) {
  for (const auto& p : corpus.patients) {
    if (!patients_.emplace(p.patient_id, &p).second) throw DataError("duplicate patient-id " + p.patient_id);
  }
  for (const auto& t : corpus.trials) {
    for (const auto* list : {&t.inclusion, &t.exclusion}) {
      for (const auto& c : *list) {
        if (!criteria_.emplace(c.criterion_id, &c).second)
          throw DataError("duplicate criterion-id " + c.criterion_id);
        trial_of_.emplace(c.criterion_id, &t);
      }
    }
  }
}

const PatientRecord& CorpusIndex::patient(std::string_view id) const {
  auto it = patients_.find(id);
  if (it == patients_.end()) throw DataError("unknown patient-id " + std::string(id));
  return *it->second;
}

const Criterion& CorpusIndex::criterion(std::string_view id) const {
  auto it = criteria_.find(id);
  if (it == criteria_.end()) throw DataError("unknown criterion-id " + std::string(id));
  return *it->second;
}

const Trial& CorpusIndex::trial_of(std::string_view criterion_id) const {
  auto it = trial_of_.find(criterion_id);
  if (it == trial_of_.end()) throw DataError("unknown criterion-id " + std::string(criterion_id));
  return *it->second;
}

bool CorpusIndex::has_patient(std::string_view id) const { return patients_.find(id) != patients_.end(); }
bool CorpusIndex::has_criterion(std::string_view id) const { return criteria_.find(id) != criteria_.end(); }

// ---- oracle ------------------------------------------------------------------

Label oracle_label(const PatientRecord& patient, const Criterion& criterion) {
  const Predicate& pred = criterion.predicate;
  bool holds = true;
  if (pred.codes) {
    if (!patient.has_category(pred.codes->category)) return Label::kUnknown;
    bool any = false;
    for (const auto& code : pred.codes->codes) {
      if (patient.has_code(code)) {
        any = true;
        break;
      }
    }
    holds = holds && any;
  }
  if (pred.age) {
    const bool ok = pred.age->comparison == AgeRule::Comparison::kAtLeast ? patient.age >= pred.age->threshold
                                                                         : patient.age < pred.age->threshold;
    holds = holds && ok;
  }
  if (!holds) return Label::kUnknown;
  return criterion.kind == CriterionKind::kInclusion ? Label::kInclusion : Label::kExclusion;
}

// ---- split -------------------------------------------------------------------

CorpusSplits split(const Corpus& corpus, std::array<double, 3> ratios, std::uint64_t seed) {
  double total = 0.0;
  for (double r : ratios) {
    if (!std::isfinite(r) || r < 0.0) throw ConfigError("split ratios must be finite and non-negative");
    total += r;
  }
  if (std::fabs(total - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");

  const std::size_t n = corpus.patients.size();
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> remainder{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = ratios[i] * static_cast<double>(n);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    remainder[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  // Largest remainder; ties go to the earlier split.
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return remainder[a] > remainder[b]; });
  for (int k = 0; assigned < n; ++k, ++assigned) counts[order[k % 3]] += 1;

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  rng.shuffle(perm);

  std::vector<int> which(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    which[perm[i]] = i < counts[0] ? 0 : (i < counts[0] + counts[1] ? 1 : 2);
  }

  CorpusSplits out;
  std::array<Corpus*, 3> parts{&out.train, &out.valid, &out.test};
  std::map<std::string, int, std::less<>> split_of;
  for (std::size_t i = 0; i < n; ++i) {
    parts[which[i]]->patients.push_back(corpus.patients[i]);
    split_of.emplace(corpus.patients[i].patient_id, which[i]);
  }
  for (auto* part : parts) part->trials = corpus.trials;
  for (const auto& pair : corpus.pairs) {
    auto it = split_of.find(pair.patient_id);
    if (it == split_of.end()) throw DataError("pair references unknown patient " + pair.patient_id);
    parts[it->second]->pairs.push_back(pair);
  }
  return out;
}

// ---- serialization -----------------------------------------------------------

namespace {

ordered_json criterion_json(const Criterion& c) {
  ordered_json pred = ordered_json::object();
  if (c.predicate.codes) {
    pred["codes"] = {{"category", to_string(c.predicate.codes->category)}, {"any-of", c.predicate.codes->codes}};
  }
  if (c.predicate.age) {
    pred["age"] = {{"comparison", c.predicate.age->comparison == AgeRule::Comparison::kAtLeast ? ">=" : "<"},
                   {"threshold", c.predicate.age->threshold}};
  }
  ordered_json j;
  j["criterion-id"] = c.criterion_id;
  j["kind"] = to_string(c.kind);
  j["text"] = c.text;
  j["oracle-predicate"] = std::move(pred);
  return j;
}

struct LineContext {
  const std::string& source;
  std::size_t line;
};

[[noreturn]] void field_error(const LineContext& ctx, std::string_view field, std::string_view why) {
  throw DataError(ctx.source + ":" + std::to_string(ctx.line) + ": field '" + std::string(field) + "' " +
                  std::string(why));
}

const json& require(const json& obj, std::string_view field, const LineContext& ctx) {
  if (!obj.is_object()) field_error(ctx, field, "expected inside an object");
  auto it = obj.find(field);
  if (it == obj.end()) field_error(ctx, field, "is missing");
  return *it;
}

std::string require_string(const json& obj, std::string_view field, const LineContext& ctx) {
  const json& v = require(obj, field, ctx);
  if (!v.is_string()) field_error(ctx, field, "must be a string");
  return v.get<std::string>();
}

template <typename F>
auto parse_enum(const json& obj, std::string_view field, const LineContext& ctx, F parse) {
  std::string s = require_string(obj, field, ctx);
  try {
    return parse(s);
  } catch (const DataError& e) {
    field_error(ctx, field, e.what());
  }
}

Criterion criterion_from_json(const json& j, const LineContext& ctx) {
  Criterion c;
  c.criterion_id = require_string(j, "criterion-id", ctx);
  c.kind = parse_enum(j, "kind", ctx, parse_kind);
  const json& text = require(j, "text", ctx);
  if (!text.is_array()) field_error(ctx, "text", "must be an array of tokens");
  for (const auto& tok : text) {
    if (!tok.is_string()) field_error(ctx, "text", "must contain only strings");
    c.text.push_back(tok.get<std::string>());
  }
  const json& pred = require(j, "oracle-predicate", ctx);
  if (!pred.is_object()) field_error(ctx, "oracle-predicate", "must be an object");
  if (auto it = pred.find("codes"); it != pred.end()) {
    CodeRule rule;
    rule.category = parse_enum(*it, "category", ctx, parse_category);
    const json& any = require(*it, "any-of", ctx);
    if (!any.is_array()) field_error(ctx, "any-of", "must be an array");
    for (const auto& code : any) {
      if (!code.is_string()) field_error(ctx, "any-of", "must contain only strings");
      rule.codes.push_back(code.get<std::string>());
    }
    c.predicate.codes = std::move(rule);
  }
  if (auto it = pred.find("age"); it != pred.end()) {
    AgeRule rule;
    std::string cmp = require_string(*it, "comparison", ctx);
    if (cmp == ">=") rule.comparison = AgeRule::Comparison::kAtLeast;
    else if (cmp == "<") rule.comparison = AgeRule::Comparison::kBelow;
    else field_error(ctx, "comparison", "must be '>=' or '<'");
    const json& th = require(*it, "threshold", ctx);
    if (!th.is_number_integer()) field_error(ctx, "threshold", "must be an integer");
    rule.threshold = th.get<int>();
    c.predicate.age = rule;
  }
  return c;
}

}  // namespace

std::string serialize_corpus(const Corpus& corpus) {
  std::string out;
  for (const auto& p : corpus.patients) {
    ordered_json j;
    j["kind"] = "patient";
    j["patient-id"] = p.patient_id;
    ordered_json visits = ordered_json::array();
    for (const auto& v : p.visits) {
      ordered_json visit = ordered_json::array();
      for (const auto& c : v) visit.push_back({{"category", to_string(c.category)}, {"code", c.code}});
      visits.push_back(std::move(visit));
    }
    j["visits"] = std::move(visits);
    j["race"] = to_string(p.race);
    j["gender"] = to_string(p.gender);
    j["age"] = p.age;
    out += j.dump();
    out += '\n';
  }
  for (const auto& t : corpus.trials) {
    ordered_json j;
    j["kind"] = "trial";
    j["trial-id"] = t.trial_id;
    j["inclusion-criteria"] = ordered_json::array();
    for (const auto& c : t.inclusion) j["inclusion-criteria"].push_back(criterion_json(c));
    j["exclusion-criteria"] = ordered_json::array();
    for (const auto& c : t.exclusion) j["exclusion-criteria"].push_back(criterion_json(c));
    out += j.dump();
    out += '\n';
  }
  for (const auto& pr : corpus.pairs) {
    ordered_json j;
    j["kind"] = "labeled-pair";
    j["patient-id"] = pr.patient_id;
    j["criterion-id"] = pr.criterion_id;
    j["label"] = to_string(pr.label);
    out += j.dump();
    out += '\n';
  }
  return out;
}

Corpus parse_corpus(std::string_view text, const std::string& source) {
  Corpus corpus;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    LineContext ctx{source, line_no};
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(source + ":" + std::to_string(line_no) + ": malformed record: " + e.what());
    }
    const std::string kind = require_string(j, "kind", ctx);
    if (kind == "patient") {
      PatientRecord p;
      p.patient_id = require_string(j, "patient-id", ctx);
      const json& visits = require(j, "visits", ctx);
      if (!visits.is_array() || visits.empty()) field_error(ctx, "visits", "must be a non-empty array");
      for (const auto& v : visits) {
        if (!v.is_array() || v.empty()) field_error(ctx, "visits", "must contain non-empty visit arrays");
        Visit visit;
        for (const auto& c : v) {
          MedicalCode code;
          code.category = parse_enum(c, "category", ctx, parse_category);
          code.code = require_string(c, "code", ctx);
          visit.push_back(std::move(code));
        }
        p.visits.push_back(std::move(visit));
      }
      p.race = parse_enum(j, "race", ctx, parse_race);
      p.gender = parse_enum(j, "gender", ctx, parse_gender);
      const json& age = require(j, "age", ctx);
      if (!age.is_number_integer() || age.get<long long>() < 0) field_error(ctx, "age", "must be a non-negative integer");
      p.age = age.get<int>();
      corpus.patients.push_back(std::move(p));
    } else if (kind == "trial") {
      Trial t;
      t.trial_id = require_string(j, "trial-id", ctx);
      for (auto [field, target, expect] :
           {std::tuple{"inclusion-criteria", &t.inclusion, CriterionKind::kInclusion},
            std::tuple{"exclusion-criteria", &t.exclusion, CriterionKind::kExclusion}}) {
        const json& list = require(j, field, ctx);
        if (!list.is_array()) field_error(ctx, field, "must be an array");
        for (const auto& c : list) {
          Criterion crit = criterion_from_json(c, ctx);
          if (crit.kind != expect) field_error(ctx, field, "holds a criterion of the wrong kind");
          target->push_back(std::move(crit));
        }
      }
      if (t.inclusion.empty()) field_error(ctx, "inclusion-criteria", "must not be empty");
      corpus.trials.push_back(std::move(t));
    } else if (kind == "labeled-pair") {
      LabeledPair pr;
      pr.patient_id = require_string(j, "patient-id", ctx);
      pr.criterion_id = require_string(j, "criterion-id", ctx);
      pr.label = parse_enum(j, "label", ctx, parse_label);
      corpus.pairs.push_back(std::move(pr));
    } else {
      field_error(ctx, "kind", "has unknown record kind '" + kind + "'");
    }
  }
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_corpus(corpus));
}

Corpus load_corpus(const std::filesystem::path& path) { return parse_corpus(read_file(path), path.string()); }

// ---- generator config --------------------------------------------------------

void GeneratorConfig::validate() const {
  auto check_props = [](const std::array<double, 2>& p, const char* name) {
    for (double v : p)
      if (!std::isfinite(v) || v < 0.0) throw ConfigError(std::string(name) + " proportions must be non-negative");
    if (std::fabs(p[0] + p[1] - 1.0) > 1e-9) throw ConfigError(std::string(name) + " proportions must sum to 1");
  };
  check_props(race_proportions, "race");
  check_props(gender_proportions, "gender");
  if (!(bias_strength >= 0.0 && bias_strength <= 1.0)) throw ConfigError("bias-strength must lie in [0, 1]");
  if (patient_count < 0) throw ConfigError("patient-count must be non-negative");
  if (trial_count < 1) throw ConfigError("trial-count must be at least 1");
  if (criteria_per_trial_min < 1 || criteria_per_trial_max < criteria_per_trial_min)
    throw ConfigError("criteria-per-trial range must satisfy 1 <= min <= max");
  if (diagnosis_vocabulary < 1 || medication_vocabulary < 1 || procedure_vocabulary < 1)
    throw ConfigError("vocabulary sizes must be positive");
  double total = 0.0;
  for (double r : split_ratios) {
    if (!std::isfinite(r) || r < 0.0) throw ConfigError("split-ratios must be non-negative");
    total += r;
  }
  if (std::fabs(total - 1.0) > 1e-9) throw ConfigError("split-ratios must sum to 1");
}

ordered_json to_json(const GeneratorConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["patient-count"] = c.patient_count;
  j["trial-count"] = c.trial_count;
  j["criteria-per-trial"] = {c.criteria_per_trial_min, c.criteria_per_trial_max};
  j["vocabulary-sizes"] = {{"diagnosis", c.diagnosis_vocabulary},
                           {"medication", c.medication_vocabulary},
                           {"procedure", c.procedure_vocabulary}};
  j["group-proportions"] = {{"race", {{"white", c.race_proportions[0]}, {"others", c.race_proportions[1]}}},
                            {"gender", {{"male", c.gender_proportions[0]}, {"female", c.gender_proportions[1]}}}};
  j["bias-strength"] = c.bias_strength;
  j["split-ratios"] = c.split_ratios;
  return j;
}

GeneratorConfig generator_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("generator config must be a JSON object");
  GeneratorConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "patient-count") c.patient_count = value.get<int>();
      else if (key == "trial-count") c.trial_count = value.get<int>();
      else if (key == "criteria-per-trial") {
        auto r = value.get<std::array<int, 2>>();
        c.criteria_per_trial_min = r[0];
        c.criteria_per_trial_max = r[1];
      } else if (key == "vocabulary-sizes") {
        for (const auto& [cat, n] : value.items()) {
          if (cat == "diagnosis") c.diagnosis_vocabulary = n.get<int>();
          else if (cat == "medication") c.medication_vocabulary = n.get<int>();
          else if (cat == "procedure") c.procedure_vocabulary = n.get<int>();
          else throw ConfigError("unknown vocabulary category '" + cat + "'");
        }
      } else if (key == "group-proportions") {
        for (const auto& [attr, groups] : value.items()) {
          if (attr == "race") c.race_proportions = {groups.at("white").get<double>(), groups.at("others").get<double>()};
          else if (attr == "gender")
            c.gender_proportions = {groups.at("male").get<double>(), groups.at("female").get<double>()};
          else throw ConfigError("unknown sensitive attribute '" + attr + "'");
        }
      } else if (key == "bias-strength") c.bias_strength = value.get<double>();
      else if (key == "split-ratios") c.split_ratios = value.get<std::array<double, 3>>();
      else throw ConfigError("unknown generator config field '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed generator config: ") + e.what());
  }
  c.validate();
  return c;
}

GeneratorConfig load_generator_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return generator_config_from_json(j);
}

}  // namespace fairpm
