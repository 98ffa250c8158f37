#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fairpm/autodiff.h"
#include "fairpm/corpus.h"
#include "fairpm/encoders.h"
#include "fairpm/objectives.h"

namespace fairpm {

// Trainable matcher: vocabulary, encoder shape and parameter values.
struct Model {
  EncoderConfig encoder;
  Vocabulary vocabulary;
  ad::ParameterStore params;
};

// A labeled pair resolved to indices into PairData's tables.
struct PairExample {
  std::size_t patient = 0;
  std::size_t criterion = 0;
  Label label = Label::kUnknown;
  // Group index under race and gender.
  std::array<int, 2> groups{0, 0};

  int group(SensitiveAttribute a) const { return groups[a == SensitiveAttribute::kRace ? 0 : 1]; }
};

// Flattened view of one split for batched forward passes. Points into the
// corpus, which must outlive it.
struct PairData {
  std::vector<const PatientRecord*> patients;
  std::vector<const Criterion*> criteria;
  std::vector<const Trial*> criterion_trial;
  std::vector<PairExample> pairs;

  static PairData from(const Corpus& corpus);
};

struct PairForward {
  PairBatch batch;
  // Embeddings of the distinct patients in the batch, and their groups.
  ad::Var patient_embeddings;
  std::vector<int> patient_groups;
};

// Encodes each distinct patient and criterion of the selected pairs once and
// scores every pair.
PairForward forward_pairs(ad::Tape& tape, Model& model, const PairData& data, std::span<const std::size_t> selection,
                          SensitiveAttribute attribute, const PrecomputedEmbeddings* precomputed = nullptr);

}  // namespace fairpm
