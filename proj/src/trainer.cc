#include "fairpm/trainer.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fairpm/errors.h"
#include "fairpm/io.h"
#include "fairpm/random.h"

namespace fairpm {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(OptimizerKind k) {
  return k == OptimizerKind::kPlainSgd ? "plain-sgd" : "adaptive-moment";
}

std::string_view to_string(TrainMode m) {
  switch (m) {
    case TrainMode::kFairPM: return "fairpm";
    case TrainMode::kBaseline: return "baseline";
    case TrainMode::kBaselineAlc: return "baseline-with-alc";
  }
  return "fairpm";
}

OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "plain-sgd" || s == "sgd") return OptimizerKind::kPlainSgd;
  if (s == "adaptive-moment" || s == "adam") return OptimizerKind::kAdaptiveMoment;
  throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

TrainMode parse_mode(std::string_view s) {
  if (s == "fairpm") return TrainMode::kFairPM;
  if (s == "baseline") return TrainMode::kBaseline;
  if (s == "baseline-with-alc" || s == "alc") return TrainMode::kBaselineAlc;
  throw ConfigError("unknown mode '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning-rate must be positive");
  if (batch_size < 1) throw ConfigError("batch-size must be at least 1");
  if (group_stratified && batch_size < 2)
    throw ConfigError("batch-size must be at least 2 with group-stratified batching");
  if (max_epochs < 1) throw ConfigError("max-epochs must be at least 1");
  if (patience < 0) throw ConfigError("patience must be non-negative");
  if (!(lambda_fc >= 0.0) || !std::isfinite(lambda_fc)) throw ConfigError("lambda-fc must be non-negative");
  if (!(kappa >= 0.0 && kappa <= 1.0)) throw ConfigError("kappa must lie in [0, 1]");
  if (!(reversal_weight >= 0.0) || !std::isfinite(reversal_weight))
    throw ConfigError("reversal-weight must be non-negative");
  encoder.validate();
}

double TrainConfig::effective_lambda() const { return mode == TrainMode::kFairPM ? lambda_fc : 0.0; }

TrainConfig TrainConfig::canonical() const {
  TrainConfig c = *this;
  if (c.mode == TrainMode::kFairPM && c.lambda_fc == 0.0) c.mode = TrainMode::kBaseline;
  if (c.mode != TrainMode::kFairPM) c.lambda_fc = 0.0;
  return c;
}

ordered_json to_json(const TrainConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["learning-rate"] = c.learning_rate;
  j["batch-size"] = c.batch_size;
  j["max-epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["lambda-fc"] = c.lambda_fc;
  j["kappa"] = c.kappa;
  j["attribute"] = to_string(c.attribute);
  j["optimizer"] = to_string(c.optimizer);
  j["mode"] = to_string(c.mode);
  j["group-stratified-batching"] = c.group_stratified;
  j["reversal-weight"] = c.reversal_weight;
  j["adversary-hidden"] = c.adversary_hidden;
  j["encoder"] = to_json(c.encoder);
  return j;
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "learning-rate") c.learning_rate = value.get<double>();
      else if (key == "batch-size") c.batch_size = value.get<std::size_t>();
      else if (key == "max-epochs") c.max_epochs = value.get<int>();
      else if (key == "patience") c.patience = value.get<int>();
      else if (key == "lambda-fc") c.lambda_fc = value.get<double>();
      else if (key == "kappa") c.kappa = value.get<double>();
      else if (key == "attribute") c.attribute = parse_attribute(value.get<std::string>());
      else if (key == "optimizer") c.optimizer = parse_optimizer(value.get<std::string>());
      else if (key == "mode") c.mode = parse_mode(value.get<std::string>());
      else if (key == "group-stratified-batching") c.group_stratified = value.get<bool>();
      else if (key == "reversal-weight") c.reversal_weight = value.get<double>();
      else if (key == "adversary-hidden") c.adversary_hidden = value.get<std::size_t>();
      else if (key == "encoder") c.encoder = encoder_config_from_json(value);
      else throw ConfigError("unknown train config field '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return train_config_from_json(j);
}

namespace {

ordered_json to_json(const LossBreakdown& b) {
  ordered_json j;
  j["l-ce"] = b.l_ce;
  j["l-cd"] = b.l_cd;
  j["l-fc"] = b.l_fc;
  j["total"] = b.total;
  return j;
}

}  // namespace

ordered_json to_json(const TrainHistory& h) {
  ordered_json j;
  j["best-epoch"] = h.best_epoch;
  ordered_json epochs = ordered_json::array();
  for (const auto& e : h.epochs) {
    ordered_json row;
    row["epoch"] = e.epoch;
    row["train"] = to_json(e.train);
    row["valid"] = to_json(e.valid);
    row["valid-accuracy"] = e.valid_accuracy;
    epochs.push_back(std::move(row));
  }
  j["epochs"] = std::move(epochs);
  return j;
}

// ---- batching ------------------------------------------------------------------

std::vector<std::vector<std::size_t>> make_batches(const std::vector<PairExample>& pairs, const TrainConfig& config,
                                                   int epoch) {
  const std::size_t n = pairs.size();
  if (n == 0) return {};
  Rng rng(config.seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(epoch + 1)));
  const std::size_t bs = std::max<std::size_t>(1, config.batch_size);
  std::size_t count = (n + bs - 1) / bs;

  std::vector<std::vector<std::size_t>> by_group(kGroupCount);
  for (std::size_t i = 0; i < n; ++i) by_group[static_cast<std::size_t>(pairs[i].group(config.attribute))].push_back(i);

  std::vector<std::size_t> order;
  order.reserve(n);
  if (config.group_stratified) {
    // Fewer, larger batches when a group is too small to reach every batch.
    for (auto& g : by_group)
      if (!g.empty() && bs >= static_cast<std::size_t>(kGroupCount)) count = std::min(count, g.size());
    for (auto& g : by_group) {
      rng.shuffle(g);
      order.insert(order.end(), g.begin(), g.end());
    }
  } else {
    order.resize(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
  }

  std::vector<std::vector<std::size_t>> batches(std::max<std::size_t>(count, 1));
  if (config.group_stratified) {
    for (std::size_t k = 0; k < order.size(); ++k) batches[k % batches.size()].push_back(order[k]);
    for (auto& b : batches) rng.shuffle(b);
    rng.shuffle(batches);
  } else {
    for (std::size_t k = 0; k < order.size(); ++k) batches[k / bs].push_back(order[k]);
  }
  return batches;
}

// ---- optimizer -----------------------------------------------------------------

void optimizer_step(ad::ParameterStore& params, const ad::GradientMap& grads, OptimizerState& state) {
  for (const auto& [name, g] : grads) {
    const ad::Parameter& p = params.get(name);
    if (g.shape() != p.value.shape())
      throw ShapeError("optimizer_step: gradient for " + name + " has shape " + shape_string(g.shape()) +
                       ", parameter " + shape_string(p.value.shape()));
    if (!g.all_finite()) throw DivergenceError("non-finite gradient for " + name, -1, -1);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    ad::Parameter& p = params.get(name);
    if (!p.trainable) continue;
    auto v = p.value.data();
    auto gv = g.data();
    if (state.kind == OptimizerKind::kPlainSgd) {
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= state.learning_rate * gv[i];
      continue;
    }
    auto [m_it, m_new] = state.first.try_emplace(name, Tensor(g.shape()));
    auto [s_it, s_new] = state.second.try_emplace(name, Tensor(g.shape()));
    auto m = m_it->second.data();
    auto s = s_it->second.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gv[i];
      s[i] = state.beta2 * s[i] + (1.0 - state.beta2) * gv[i] * gv[i];
      const double mhat = m[i] / bc1;
      const double shat = s[i] / bc2;
      v[i] -= state.learning_rate * mhat / (std::sqrt(shat) + state.epsilon);
    }
  }
}

// ---- training ------------------------------------------------------------------

namespace {

std::size_t argmax_row(const Tensor& logits, std::size_t r) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < logits.cols(); ++c)
    if (logits.at(r, c) > logits.at(r, best)) best = c;
  return best;
}

void check_finite(const LossBreakdown& b, int epoch, int batch) {
  if (!std::isfinite(b.total))
    throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch),
                          epoch, batch);
}

}  // namespace

SplitScore score_split(Model& model, const PairData& data, const TrainConfig& config,
                       const PrecomputedEmbeddings* precomputed) {
  if (data.pairs.empty()) throw DataError("score_split: no labeled pairs");
  std::vector<std::size_t> all(data.pairs.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  ad::Tape tape;
  PairForward fwd = forward_pairs(tape, model, data, all, config.attribute, precomputed);
  BatchLoss loss = total_loss(fwd.batch, config.effective_lambda(), config.kappa);
  const Tensor& logits = fwd.batch.logits.value();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < all.size(); ++i)
    if (argmax_row(logits, i) == static_cast<std::size_t>(data.pairs[i].label)) ++correct;
  return SplitScore{loss.breakdown, static_cast<double>(correct) / static_cast<double>(all.size())};
}

TrainResult train(const CorpusSplits& splits, const TrainConfig& config, const PrecomputedEmbeddings* precomputed) {
  config.validate();
  if (splits.train.pairs.empty()) throw DataError("training split has no labeled pairs");
  if (splits.valid.pairs.empty()) throw DataError("validation split has no labeled pairs");

  const PairData train_data = PairData::from(splits.train);
  const PairData valid_data = PairData::from(splits.valid);
  const double lambda = config.effective_lambda();
  const bool alc = config.mode == TrainMode::kBaselineAlc;

  TrainResult result;
  Model& model = result.model;
  model.encoder = config.encoder;
  model.vocabulary = Vocabulary::build(splits.train);
  model.params = init_encoder_params(model.encoder, model.vocabulary.size(), config.seed);

  AdversaryConfig adv_config{config.adversary_hidden, config.reversal_weight};
  ad::ParameterStore adversary;
  if (alc) adversary = init_adversary_params(model.encoder.z_dim, adv_config, config.seed + 1);

  OptimizerState opt{config.optimizer, config.learning_rate};
  OptimizerState adv_opt{config.optimizer, config.learning_rate};

  double best_loss = 0.0;
  ad::ParameterStore best_params = model.params;
  int since_best = 0;

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    auto batches = make_batches(train_data.pairs, config, epoch);
    LossBreakdown mean{0.0, 0.0, 0.0, 0.0, lambda, config.kappa};
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const int batch_no = static_cast<int>(b) + 1;
      ad::Tape tape;
      PairForward fwd = forward_pairs(tape, model, train_data, batches[b], config.attribute, precomputed);
      BatchLoss loss = total_loss(fwd.batch, lambda, config.kappa);
      check_finite(loss.breakdown, epoch, batch_no);
      ad::Var objective = loss.total;
      if (alc) {
        objective = ad::add(objective,
                            adversary_constraint(fwd.patient_embeddings, fwd.patient_groups, adversary, adv_config));
        if (!std::isfinite(objective.item()))
          throw DivergenceError("non-finite adversary loss at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(batch_no),
                                epoch, batch_no);
      }
      ad::GradientMap grads = tape.backward(objective);
      ad::GradientMap model_grads, adv_grads;
      for (auto& [name, g] : grads) (model.params.contains(name) ? model_grads : adv_grads).emplace(name, std::move(g));
      try {
        optimizer_step(model.params, model_grads, opt);
        if (alc) optimizer_step(adversary, adv_grads, adv_opt);
      } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                                  std::to_string(batch_no),
                              epoch, batch_no);
      }
      mean.l_ce += loss.breakdown.l_ce;
      mean.l_cd += loss.breakdown.l_cd;
      mean.l_fc += loss.breakdown.l_fc;
      mean.total += loss.breakdown.total;
    }
    const double nb = static_cast<double>(batches.size());
    mean.l_ce /= nb;
    mean.l_cd /= nb;
    mean.l_fc /= nb;
    mean.total /= nb;

    SplitScore valid = score_split(model, valid_data, config, precomputed);
    check_finite(valid.loss, epoch, 0);
    result.history.epochs.push_back(EpochRecord{epoch, mean, valid.loss, valid.accuracy});

    if (epoch == 1 || valid.loss.total < best_loss) {
      best_loss = valid.loss.total;
      best_params = model.params;
      result.history.best_epoch = epoch;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (since_best >= config.patience) break;
  }
  model.params = std::move(best_params);
  return result;
}

// ---- checkpoints ---------------------------------------------------------------

std::string serialize_checkpoint(const Model& model, const TrainConfig& config) {
  ordered_json j;
  j["format"] = "fairpm-checkpoint";
  j["version"] = 1;
  j["seed"] = config.seed;
  j["config"] = to_json(config.canonical());
  ordered_json vocab;
  vocab["hash"] = model.vocabulary.hash();
  vocab["tokens"] = model.vocabulary.tokens();
  j["vocabulary"] = std::move(vocab);
  ordered_json params = ordered_json::array();
  for (const ad::Parameter& p : model.params) {
    ordered_json row;
    row["name"] = p.name;
    row["shape"] = p.value.shape();
    row["values"] = p.value.values();
    params.push_back(std::move(row));
  }
  j["parameters"] = std::move(params);
  return j.dump(1) + "\n";
}

Checkpoint parse_checkpoint(std::string_view text, const std::string& source) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(source + ": malformed checkpoint: " + e.what());
  }
  try {
    if (j.value("format", std::string()) != "fairpm-checkpoint") throw DataError(source + ": not a checkpoint file");
    Checkpoint c;
    c.config = train_config_from_json(j.at("config"));
    c.model.encoder = c.config.encoder;
    c.model.vocabulary = Vocabulary(j.at("vocabulary").at("tokens").get<std::vector<std::string>>());
    const std::string stored_hash = j.at("vocabulary").at("hash").get<std::string>();
    if (stored_hash != c.model.vocabulary.hash())
      throw DataError(source + ": vocabulary hash " + stored_hash + " does not match its tokens (" +
                      c.model.vocabulary.hash() + ")");
    ad::ParameterStore expected = init_encoder_params(c.model.encoder, c.model.vocabulary.size(), 0);
    for (const auto& row : j.at("parameters")) {
      std::string name = row.at("name").get<std::string>();
      Tensor value(row.at("shape").get<Shape>(), row.at("values").get<std::vector<double>>());
      if (!expected.contains(name)) throw DataError(source + ": unexpected parameter " + name);
      if (expected.get(name).value.shape() != value.shape())
        throw DataError(source + ": parameter " + name + " has shape " + shape_string(value.shape()) + ", expected " +
                        shape_string(expected.get(name).value.shape()));
      c.model.params.add(std::move(name), std::move(value));
    }
    if (c.model.params.count() != expected.count()) throw DataError(source + ": checkpoint is missing parameters");
    return c;
  } catch (const json::exception& e) {
    throw DataError(source + ": malformed checkpoint: " + e.what());
  } catch (const ShapeError& e) {
    throw DataError(source + ": " + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const TrainConfig& config) {
  write_file_atomic(path, serialize_checkpoint(model, config));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("checkpoint not found: " + path.string());
  return parse_checkpoint(read_file(path), path.string());
}

}  // namespace fairpm
