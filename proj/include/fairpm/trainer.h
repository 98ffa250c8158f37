#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fairpm/autodiff.h"
#include "fairpm/corpus.h"
#include "fairpm/encoders.h"
#include "fairpm/model.h"
#include "fairpm/objectives.h"
#include "json.hpp"

namespace fairpm {

enum class OptimizerKind { kPlainSgd, kAdaptiveMoment };
enum class TrainMode { kFairPM, kBaseline, kBaselineAlc };

std::string_view to_string(OptimizerKind k);
std::string_view to_string(TrainMode m);
OptimizerKind parse_optimizer(std::string_view s);
TrainMode parse_mode(std::string_view s);

struct TrainConfig {
  std::uint64_t seed = 1;
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  int max_epochs = 100;
  int patience = 10;
  double lambda_fc = 2.0;
  double kappa = 0.5;
  SensitiveAttribute attribute = SensitiveAttribute::kRace;
  OptimizerKind optimizer = OptimizerKind::kAdaptiveMoment;
  TrainMode mode = TrainMode::kFairPM;
  bool group_stratified = true;
  double reversal_weight = 1.0;
  std::size_t adversary_hidden = 16;
  EncoderConfig encoder;

  void validate() const;
  // Weight applied to the fairness term; zero outside fairpm mode.
  double effective_lambda() const;
  // fairpm with lambda 0 and baseline describe the same run; both map to
  // baseline with lambda 0 so their checkpoints match byte for byte.
  TrainConfig canonical() const;
};

nlohmann::ordered_json to_json(const TrainConfig& config);
// Missing fields keep their defaults; unknown fields are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
TrainConfig load_train_config(const std::filesystem::path& path);

struct EpochRecord {
  int epoch = 0;
  LossBreakdown train;
  LossBreakdown valid;
  double valid_accuracy = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
};

nlohmann::ordered_json to_json(const TrainHistory& history);

// Pair indices for one epoch, split into batches.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<PairExample>& pairs, const TrainConfig& config,
                                                   int epoch);

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kAdaptiveMoment;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  std::map<std::string, Tensor> first, second;
};

// Applies one update to every trainable parameter that has a gradient.
void optimizer_step(ad::ParameterStore& params, const ad::GradientMap& grads, OptimizerState& state);

struct TrainResult {
  Model model;
  TrainHistory history;
};

TrainResult train(const CorpusSplits& splits, const TrainConfig& config,
                  const PrecomputedEmbeddings* precomputed = nullptr);

// Mean loss and accuracy of the model over every pair in data, in one pass.
struct SplitScore {
  LossBreakdown loss;
  double accuracy = 0.0;
};
SplitScore score_split(Model& model, const PairData& data, const TrainConfig& config,
                       const PrecomputedEmbeddings* precomputed = nullptr);

struct Checkpoint {
  TrainConfig config;
  Model model;
};

std::string serialize_checkpoint(const Model& model, const TrainConfig& config);
Checkpoint parse_checkpoint(std::string_view text, const std::string& source = "<memory>");
void save_checkpoint(const std::filesystem::path& path, const Model& model, const TrainConfig& config);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fairpm
