#include "fairpm/model.h"

#include <map>

#include "fairpm/errors.h"

namespace fairpm {

PairData PairData::from(const Corpus& corpus) {
  PairData data;
  std::map<std::string, std::size_t, std::less<>> patient_index, criterion_index;
  for (const auto& p : corpus.patients) {
    patient_index.emplace(p.patient_id, data.patients.size());
    data.patients.push_back(&p);
  }
  for (const auto& t : corpus.trials) {
    for (const auto* list : {&t.inclusion, &t.exclusion})
      for (const auto& c : *list) {
        criterion_index.emplace(c.criterion_id, data.criteria.size());
        data.criteria.push_back(&c);
        data.criterion_trial.push_back(&t);
      }
  }
  data.pairs.reserve(corpus.pairs.size());
  for (const auto& pr : corpus.pairs) {
    auto p = patient_index.find(pr.patient_id);
    auto c = criterion_index.find(pr.criterion_id);
    if (p == patient_index.end()) throw DataError("labeled pair references unknown patient " + pr.patient_id);
    if (c == criterion_index.end()) throw DataError("labeled pair references unknown criterion " + pr.criterion_id);
    const PatientRecord& rec = *data.patients[p->second];
    data.pairs.push_back(PairExample{p->second, c->second, pr.label,
                                     {rec.group(SensitiveAttribute::kRace), rec.group(SensitiveAttribute::kGender)}});
  }
  return data;
}

PairForward forward_pairs(ad::Tape& tape, Model& model, const PairData& data, std::span<const std::size_t> selection,
                          SensitiveAttribute attribute, const PrecomputedEmbeddings* precomputed) {
  if (selection.empty()) throw ConfigError("forward_pairs: empty selection");
  EncoderGraph g = EncoderGraph::bind(tape, model.params, model.encoder);
  EncoderInputs inputs{&model.vocabulary, precomputed};

  std::map<std::size_t, std::size_t> patient_slot, criterion_slot;
  std::vector<ad::Var> patient_z, criterion_z;
  PairForward out;
  std::vector<std::size_t> prow, crow;
  prow.reserve(selection.size());
  crow.reserve(selection.size());
  for (std::size_t idx : selection) {
    const PairExample& ex = data.pairs.at(idx);
    auto [pit, pnew] = patient_slot.emplace(ex.patient, patient_z.size());
    if (pnew) {
      patient_z.push_back(encode_patient(g, *data.patients[ex.patient], inputs));
      out.patient_groups.push_back(ex.group(attribute));
    }
    auto [cit, cnew] = criterion_slot.emplace(ex.criterion, criterion_z.size());
    if (cnew) criterion_z.push_back(encode_criterion(g, *data.criteria[ex.criterion], inputs));
    prow.push_back(pit->second);
    crow.push_back(cit->second);
    out.batch.labels.push_back(ex.label);
    out.batch.groups.push_back(ex.group(attribute));
  }
  out.patient_embeddings = ad::stack_rows(patient_z);
  ad::Var zp = ad::gather_rows(out.patient_embeddings, prow);
  ad::Var zc = ad::gather_rows(ad::stack_rows(criterion_z), crow);
  out.batch.logits = predict_logits(g, zp, zc);
  out.batch.similarity = similarity(zp, zc);
  return out;
}

}  // namespace fairpm
