#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "fairpm/autodiff.h"
#include "fairpm/corpus.h"

namespace fairpm {

struct LossBreakdown {
  double l_ce = 0.0;
  double l_cd = 0.0;
  double l_fc = 0.0;
  double total = 0.0;
  double lambda_fc = 0.0;
  double kappa = 0.5;
};

enum class DiscrepancyCase { kInclusionMatch, kExclusionNonmatch };

// Which discrepancy case a labeled pair falls under; unknown pairs have none.
std::optional<DiscrepancyCase> discrepancy_case(Label label);

// -sum_k y_k log softmax(logits)_k for a rank-1 logit vector and one-hot target.
ad::Var cross_entropy(ad::Var logits, const Tensor& one_hot);

// Shifted cosine similarity (cos + 1) / 2 in [0, 1]. Rank-1 inputs give a
// scalar, rank-2 inputs a value per row. Zero vectors are rejected.
ad::Var similarity(ad::Var zp, ad::Var zc);

// Inclusion match: 1 - s. Exclusion: max(0, s - kappa).
ad::Var criteria_discrepancy(ad::Var sim, DiscrepancyCase which, double kappa);

// Model outputs for one minibatch of labeled pairs.
struct PairBatch {
  ad::Var logits;      // (B, 3)
  ad::Var similarity;  // (B)
  std::vector<Label> labels;
  // Group of each pair's patient under the active sensitive attribute.
  std::vector<int> groups;
};

struct BatchGroupView {
  std::vector<int> groups;
  // Per-pair discrepancy; zero for pairs that do not contribute.
  ad::Var contributions;
  std::vector<bool> contributing;
};

struct BatchLoss {
  ad::Var total;
  LossBreakdown breakdown;
  BatchGroupView view;
};

// Per-pair cross-entropy (B) and per-pair discrepancy contributions (B).
ad::Var pair_cross_entropy(ad::Var logits, const std::vector<Label>& labels);
BatchGroupView group_view(const PairBatch& batch, double kappa);

// Mean cross-entropy over all pairs plus mean discrepancy over contributing pairs.
ad::Var joint_loss(const PairBatch& batch, double kappa);

// sum_i sum_{j != i} |L_CD[i] - L_CD[j]| over the groups present in the batch.
// A group's loss is the mean contribution over its members, unknown pairs
// counting as zero.
ad::Var fairness_constraint(const BatchGroupView& view);

BatchLoss total_loss(const PairBatch& batch, double lambda_fc, double kappa);

// ---- adversarial baseline ------------------------------------------------------

struct AdversaryConfig {
  std::size_t hidden = 16;
  double reversal_weight = 1.0;
};

ad::ParameterStore init_adversary_params(std::size_t z_dim, const AdversaryConfig& config, std::uint64_t seed);

// Mean cross-entropy of an auxiliary head predicting each row's group from the
// patient embeddings. The embeddings pass through a gradient-reversal node, so
// encoder gradients from this term are negated and scaled by the reversal weight
// while the head itself receives ordinary gradients.
ad::Var adversary_constraint(ad::Var patient_embeddings, const std::vector<int>& groups,
                             ad::ParameterStore& adversary, const AdversaryConfig& config);

}  // namespace fairpm
