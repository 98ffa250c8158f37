#include "fairpm/objectives.h"

#include <algorithm>
#include <cmath>

#include "fairpm/errors.h"
#include "fairpm/random.h"

namespace fairpm {

std::optional<DiscrepancyCase> discrepancy_case(Label label) {
  switch (label) {
    case Label::kInclusion: return DiscrepancyCase::kInclusionMatch;
    case Label::kExclusion: return DiscrepancyCase::kExclusionNonmatch;
    case Label::kUnknown: return std::nullopt;
  }
  return std::nullopt;
}

ad::Var cross_entropy(ad::Var logits, const Tensor& one_hot) {
  if (logits.value().rank() != 1 || one_hot.shape() != logits.shape())
    throw ShapeError("cross_entropy: logits " + shape_string(logits.shape()) + " vs label " +
                     shape_string(one_hot.shape()));
  int ones = 0;
  for (double v : one_hot.data()) {
    if (v == 1.0) ++ones;
    else if (v != 0.0) ones = -100;
  }
  if (ones != 1) throw ConfigError("cross_entropy: label is not one-hot");
  ad::Var target = logits.tape()->constant(one_hot);
  return ad::scale(ad::dot(ad::log_softmax(logits), target), -1.0);
}

ad::Var similarity(ad::Var zp, ad::Var zc) {
  if (zp.shape() != zc.shape())
    throw ShapeError("similarity: shapes " + shape_string(zp.shape()) + " and " + shape_string(zc.shape()));
  ad::Var np = ad::l2norm(zp);
  ad::Var nc = ad::l2norm(zc);
  for (const ad::Var& n : {np, nc})
    for (double v : n.value().data())
      if (v == 0.0) throw Error("similarity: zero vector has no direction");
  ad::Var cosine = ad::div(ad::dot(zp, zc), ad::mul(np, nc));
  return ad::add_scalar(ad::scale(cosine, 0.5), 0.5);
}

ad::Var criteria_discrepancy(ad::Var sim, DiscrepancyCase which, double kappa) {
  if (!(kappa >= 0.0 && kappa <= 1.0)) throw ConfigError("kappa must lie in [0, 1]");
  if (which == DiscrepancyCase::kInclusionMatch) return ad::add_scalar(ad::scale(sim, -1.0), 1.0);
  return ad::hinge(ad::add_scalar(sim, -kappa));
}

ad::Var pair_cross_entropy(ad::Var logits, const std::vector<Label>& labels) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2 || lv.cols() != kClassCount || lv.rows() != labels.size())
    throw ShapeError("pair_cross_entropy: logits " + shape_string(lv.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  Tensor targets(Shape{labels.size(), static_cast<std::size_t>(kClassCount)});
  for (std::size_t i = 0; i < labels.size(); ++i) targets.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  ad::Var y = logits.tape()->constant(std::move(targets));
  return ad::scale(ad::sum_axis(ad::mul(ad::log_softmax(logits), y), 1), -1.0);
}

BatchGroupView group_view(const PairBatch& batch, double kappa) {
  if (!(kappa >= 0.0 && kappa <= 1.0)) throw ConfigError("kappa must lie in [0, 1]");
  const std::size_t n = batch.labels.size();
  if (batch.similarity.value().size() != n || batch.groups.size() != n)
    throw ShapeError("group_view: batch fields disagree in length");
  ad::Tape& tape = *batch.similarity.tape();
  Tensor inc(Shape{n}), exc(Shape{n});
  BatchGroupView view;
  view.groups = batch.groups;
  view.contributing.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    inc[i] = batch.labels[i] == Label::kInclusion ? 1.0 : 0.0;
    exc[i] = batch.labels[i] == Label::kExclusion ? 1.0 : 0.0;
    view.contributing[i] = batch.labels[i] != Label::kUnknown;
  }
  ad::Var inc_part = ad::mul(tape.constant(std::move(inc)), criteria_discrepancy(batch.similarity,
                                                                                DiscrepancyCase::kInclusionMatch, kappa));
  ad::Var exc_part = ad::mul(tape.constant(std::move(exc)), criteria_discrepancy(batch.similarity,
                                                                                DiscrepancyCase::kExclusionNonmatch, kappa));
  view.contributions = ad::add(inc_part, exc_part);
  return view;
}

namespace {

ad::Var mean_contributing(const BatchGroupView& view) {
  ad::Tape& tape = *view.contributions.tape();
  const auto count = std::count(view.contributing.begin(), view.contributing.end(), true);
  if (count == 0) return tape.constant(Tensor::scalar(0.0));
  return ad::scale(ad::sum(view.contributions), 1.0 / static_cast<double>(count));
}

}  // namespace

ad::Var joint_loss(const PairBatch& batch, double kappa) {
  if (batch.labels.empty()) throw ConfigError("joint_loss: empty batch");
  ad::Var ce = ad::mean(pair_cross_entropy(batch.logits, batch.labels));
  return ad::add(ce, mean_contributing(group_view(batch, kappa)));
}

ad::Var fairness_constraint(const BatchGroupView& view) {
  ad::Tape& tape = *view.contributions.tape();
  const std::size_t n = view.groups.size();
  const int groups = view.groups.empty() ? 0 : *std::max_element(view.groups.begin(), view.groups.end()) + 1;
  std::vector<ad::Var> means;
  for (int g = 0; g < groups; ++g) {
    Tensor mask(Shape{n});
    double count = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (view.groups[i] == g) {
        mask[i] = 1.0;
        count += 1.0;
      }
    }
    if (count == 0.0) continue;
    means.push_back(ad::scale(ad::dot(view.contributions, tape.constant(std::move(mask))), 1.0 / count));
  }
  if (means.size() < 2) return tape.constant(Tensor::scalar(0.0));
  // Ordered pairs: each unordered pair appears twice.
  ad::Var total;
  for (std::size_t i = 0; i < means.size(); ++i)
    for (std::size_t j = 0; j < means.size(); ++j) {
      if (i == j) continue;
      ad::Var term = ad::abs(ad::sub(means[i], means[j]));
      total = total.valid() ? ad::add(total, term) : term;
    }
  return total;
}

BatchLoss total_loss(const PairBatch& batch, double lambda_fc, double kappa) {
  if (!(lambda_fc >= 0.0) || !std::isfinite(lambda_fc)) throw ConfigError("lambda_fc must be non-negative");
  if (batch.labels.empty()) throw ConfigError("total_loss: empty batch");
  BatchLoss out;
  out.view = group_view(batch, kappa);
  ad::Var ce = ad::mean(pair_cross_entropy(batch.logits, batch.labels));
  ad::Var cd = mean_contributing(out.view);
  ad::Var fc = fairness_constraint(out.view);
  ad::Var joint = ad::add(ce, cd);
  out.total = lambda_fc == 0.0 ? joint : ad::add(joint, ad::scale(fc, lambda_fc));
  out.breakdown = LossBreakdown{ce.item(), cd.item(), fc.item(), out.total.item(), lambda_fc, kappa};
  return out;
}

// ---- adversary -----------------------------------------------------------------

ad::ParameterStore init_adversary_params(std::size_t z_dim, const AdversaryConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  ad::ParameterStore params;
  auto glorot = [&](Shape shape, std::size_t fan_in, std::size_t fan_out) {
    Tensor t(std::move(shape));
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-a, a);
    return t;
  };
  const std::size_t h = config.hidden;
  if (h > 0) {
    params.add("adversary.hidden.weight", glorot(Shape{z_dim, h}, z_dim, h));
    params.add("adversary.hidden.bias", Tensor(Shape{h}));
    params.add("adversary.output.weight", glorot(Shape{h, kGroupCount}, h, kGroupCount));
  } else {
    params.add("adversary.output.weight", glorot(Shape{z_dim, kGroupCount}, z_dim, kGroupCount));
  }
  params.add("adversary.output.bias", Tensor(Shape{kGroupCount}));
  return params;
}

ad::Var adversary_constraint(ad::Var patient_embeddings, const std::vector<int>& groups,
                             ad::ParameterStore& adversary, const AdversaryConfig& config) {
  ad::Tape& tape = *patient_embeddings.tape();
  const Tensor& z = patient_embeddings.value();
  if (z.rank() != 2 || z.rows() != groups.size() || groups.empty())
    throw ShapeError("adversary_constraint: embeddings " + shape_string(z.shape()) + " for " +
                     std::to_string(groups.size()) + " groups");
  ad::Var x = ad::grad_reverse(patient_embeddings, config.reversal_weight);
  if (adversary.contains("adversary.hidden.weight")) {
    x = ad::relu(ad::add(ad::matmul(x, tape.param(adversary.get("adversary.hidden.weight"))),
                         tape.param(adversary.get("adversary.hidden.bias"))));
  }
  ad::Var logits = ad::add(ad::matmul(x, tape.param(adversary.get("adversary.output.weight"))),
                           tape.param(adversary.get("adversary.output.bias")));
  Tensor targets(Shape{groups.size(), static_cast<std::size_t>(kGroupCount)});
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i] < 0 || groups[i] >= kGroupCount) throw ConfigError("adversary_constraint: group out of range");
    targets.at(i, static_cast<std::size_t>(groups[i])) = 1.0;
  }
  ad::Var per_row = ad::scale(ad::sum_axis(ad::mul(ad::log_softmax(logits), tape.constant(std::move(targets))), 1), -1.0);
  return ad::mean(per_row);
}

}  // namespace fairpm
