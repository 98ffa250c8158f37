#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fairpm/autodiff.h"
#include "fairpm/corpus.h"
#include "json.hpp"

namespace fairpm {

// Token -> dense id map. Id 0 is padding and id 1 stands in for unseen tokens.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;

  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& tokens);

  // Codes seen in the split's patient records plus every criterion-text token.
  static Vocabulary build(const Corpus& train);

  std::size_t add(const std::string& token);
  std::size_t id(std::string_view token) const;
  // Unknown tokens map to kUnk; an empty sequence yields {kUnk}.
  std::vector<std::size_t> tokenize(std::span<const std::string> tokens) const;

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::string hash() const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t, std::less<>> ids_;
};

struct EncoderConfig {
  std::size_t embed_dim = 32;
  std::size_t z_dim = 32;
  std::size_t conv_channels = 16;
  std::vector<std::size_t> conv_widths{1, 2, 3};
  // Width of the predictor's hidden layer; 0 makes the predictor a single linear map.
  std::size_t predictor_hidden = 32;

  void validate() const;
  std::size_t max_width() const;
  bool operator==(const EncoderConfig&) const = default;
};

nlohmann::ordered_json to_json(const EncoderConfig& config);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

// Externally computed vectors keyed by entity id: "<patient-id>#<visit-index>"
// for visits and the criterion-id for criteria. File format is one JSON object
// per line: {"id": ..., "vector": [...]}.
class PrecomputedEmbeddings {
 public:
  static PrecomputedEmbeddings load(const std::filesystem::path& path);
  static PrecomputedEmbeddings parse(std::string_view text, const std::string& source = "<memory>");

  void insert(std::string id, std::vector<double> vector);
  const std::vector<double>* find(std::string_view id) const;
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return vectors_.size(); }

  static std::string visit_id(std::string_view patient_id, std::size_t visit_index);

 private:
  std::size_t dim_ = 0;
  std::map<std::string, std::vector<double>, std::less<>> vectors_;
};

// Creates every encoder and predictor parameter with seeded initial values.
ad::ParameterStore init_encoder_params(const EncoderConfig& config, std::size_t vocab_size, std::uint64_t seed);

// All encoder parameters bound to one tape.
struct EncoderGraph {
  const EncoderConfig* config = nullptr;
  ad::Tape* tape = nullptr;
  ad::Var embedding;
  ad::Var memory_query;
  ad::Var memory_key;
  ad::Var memory_value;
  std::vector<ad::Var> conv_weight;
  std::vector<ad::Var> conv_bias;
  ad::Var gate_weight, gate_bias;
  ad::Var transform_weight, transform_bias;
  ad::Var projection_weight, projection_bias;
  ad::Var hidden_weight, hidden_bias;
  ad::Var output_weight, output_bias;

  static EncoderGraph bind(ad::Tape& tape, ad::ParameterStore& params, const EncoderConfig& config);
};

struct EncoderInputs {
  const Vocabulary* vocabulary = nullptr;
  const PrecomputedEmbeddings* precomputed = nullptr;
};

// Mean of the visit's code embeddings.
ad::Var embed_visit(const EncoderGraph& g, const Visit& visit, const Vocabulary& vocab);

// One-hop memory attention over visit embeddings with a learned query:
// softmax(keys . q) weights the projected visit values.
ad::Var encode_patient(const EncoderGraph& g, const PatientRecord& patient, const EncoderInputs& in);

// Token embeddings -> relu convolutions per width, max-pooled over positions
// and concatenated -> highway layer -> linear projection.
ad::Var encode_criterion(const EncoderGraph& g, const Criterion& criterion, const EncoderInputs& in);

// Highway stage on its own: T(x) * H(x) + (1 - T(x)) * x.
ad::Var highway(const EncoderGraph& g, ad::Var x);

// [zp, zc, zp * zc, |zp - zc|]; rank-1 inputs give one feature vector,
// rank-2 inputs give one row per pair.
ad::Var combined_features(ad::Var zp, ad::Var zc);

// Three logits ordered (inclusion, exclusion, unknown).
ad::Var predict_logits(const EncoderGraph& g, ad::Var zp, ad::Var zc);

}  // namespace fairpm
