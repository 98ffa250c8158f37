#include "fairpm/encoders.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "fairpm/errors.h"
#include "fairpm/io.h"
#include "fairpm/random.h"

namespace fairpm {

using nlohmann::json;
using nlohmann::ordered_json;

// ---- Vocabulary ----------------------------------------------------------------

Vocabulary::Vocabulary() {
  add("<pad>");
  add("<unk>");
}

Vocabulary::Vocabulary(const std::vector<std::string>& tokens) {
  if (tokens.size() < 2 || tokens[0] != "<pad>" || tokens[1] != "<unk>")
    throw DataError("vocabulary must start with <pad>, <unk>");
  for (const auto& t : tokens) {
    if (ids_.contains(t)) throw DataError("duplicate vocabulary token '" + t + "'");
    add(t);
  }
}

Vocabulary Vocabulary::build(const Corpus& train) {
  std::set<std::string> seen;
  for (const auto& p : train.patients)
    for (const auto& v : p.visits)
      for (const auto& c : v) seen.insert(c.code);
  for (const auto& t : train.trials)
    for (const auto* list : {&t.inclusion, &t.exclusion})
      for (const auto& c : *list) seen.insert(c.text.begin(), c.text.end());
  Vocabulary vocab;
  for (const auto& tok : seen) vocab.add(tok);
  return vocab;
}

std::size_t Vocabulary::add(const std::string& token) {
  if (auto it = ids_.find(token); it != ids_.end()) return it->second;
  ids_.emplace(token, tokens_.size());
  tokens_.push_back(token);
  return tokens_.size() - 1;
}

std::size_t Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

std::vector<std::size_t> Vocabulary::tokenize(std::span<const std::string> tokens) const {
  if (tokens.empty()) return {kUnk};
  std::vector<std::size_t> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::string Vocabulary::hash() const {
  std::string joined;
  for (const auto& t : tokens_) {
    joined += t;
    joined += '\n';
  }
  return hex64(fnv1a64(joined));
}

// ---- EncoderConfig -------------------------------------------------------------

void EncoderConfig::validate() const {
  if (embed_dim == 0 || z_dim == 0 || conv_channels == 0) throw ConfigError("encoder dimensions must be positive");
  if (conv_widths.empty()) throw ConfigError("at least one convolution width is required");
  for (auto w : conv_widths)
    if (w == 0) throw ConfigError("convolution widths must be positive");
}

std::size_t EncoderConfig::max_width() const { return *std::max_element(conv_widths.begin(), conv_widths.end()); }

ordered_json to_json(const EncoderConfig& c) {
  ordered_json j;
  j["embed-dim"] = c.embed_dim;
  j["z-dim"] = c.z_dim;
  j["conv-channels"] = c.conv_channels;
  j["conv-widths"] = c.conv_widths;
  j["predictor-hidden"] = c.predictor_hidden;
  return j;
}

EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "embed-dim") c.embed_dim = value.get<std::size_t>();
      else if (key == "z-dim") c.z_dim = value.get<std::size_t>();
      else if (key == "conv-channels") c.conv_channels = value.get<std::size_t>();
      else if (key == "conv-widths") c.conv_widths = value.get<std::vector<std::size_t>>();
      else if (key == "predictor-hidden") c.predictor_hidden = value.get<std::size_t>();
      else throw ConfigError("unknown encoder config field '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed encoder config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- PrecomputedEmbeddings -----------------------------------------------------

PrecomputedEmbeddings PrecomputedEmbeddings::load(const std::filesystem::path& path) {
  return parse(read_file(path), path.string());
}

PrecomputedEmbeddings PrecomputedEmbeddings::parse(std::string_view text, const std::string& source) {
  PrecomputedEmbeddings out;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(where + "malformed record: " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string()) throw DataError(where + "field 'id' missing");
    if (!j.contains("vector") || !j["vector"].is_array()) throw DataError(where + "field 'vector' missing");
    std::vector<double> v;
    for (const auto& x : j["vector"]) {
      if (!x.is_number()) throw DataError(where + "field 'vector' must hold numbers");
      v.push_back(x.get<double>());
    }
    try {
      out.insert(j["id"].get<std::string>(), std::move(v));
    } catch (const DataError& e) {
      throw DataError(where + e.what());
    }
  }
  return out;
}

void PrecomputedEmbeddings::insert(std::string id, std::vector<double> vector) {
  if (vector.empty()) throw DataError("embedding for '" + id + "' is empty");
  for (double x : vector)
    if (!std::isfinite(x)) throw DataError("embedding for '" + id + "' is not finite");
  if (dim_ == 0) dim_ = vector.size();
  if (vector.size() != dim_)
    throw DataError("embedding for '" + id + "' has length " + std::to_string(vector.size()) + ", expected " +
                    std::to_string(dim_));
  vectors_[std::move(id)] = std::move(vector);
}

const std::vector<double>* PrecomputedEmbeddings::find(std::string_view id) const {
  auto it = vectors_.find(id);
  return it == vectors_.end() ? nullptr : &it->second;
}

std::string PrecomputedEmbeddings::visit_id(std::string_view patient_id, std::size_t visit_index) {
  return std::string(patient_id) + "#" + std::to_string(visit_index);
}

// ---- parameters ----------------------------------------------------------------

namespace {

Tensor glorot(Rng& rng, Shape shape, std::size_t fan_in, std::size_t fan_out) {
  Tensor t(std::move(shape));
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-a, a);
  return t;
}

std::string conv_name(std::size_t width, const char* part) {
  return "conv.w" + std::to_string(width) + "." + part;
}

}  // namespace

ad::ParameterStore init_encoder_params(const EncoderConfig& config, std::size_t vocab_size, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t d = config.embed_dim, dz = config.z_dim, c = config.conv_channels;
  const std::size_t pooled = c * config.conv_widths.size();
  ad::ParameterStore params;

  Tensor emb(Shape{vocab_size, d});
  const double emb_scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t i = d; i < emb.size(); ++i) emb[i] = emb_scale * rng.normal();  // pad row stays zero
  params.add("embedding", std::move(emb));

  params.add("memory.query", glorot(rng, Shape{d}, d, 1));
  params.add("memory.key", glorot(rng, Shape{d, d}, d, d));
  params.add("memory.value", glorot(rng, Shape{d, dz}, d, dz));

  for (std::size_t w : config.conv_widths) {
    params.add(conv_name(w, "weight"), glorot(rng, Shape{w, d, c}, w * d, c));
    params.add(conv_name(w, "bias"), Tensor(Shape{c}));
  }
  params.add("highway.gate.weight", glorot(rng, Shape{pooled, pooled}, pooled, pooled));
  params.add("highway.gate.bias", Tensor::filled(Shape{pooled}, -1.0));
  params.add("highway.transform.weight", glorot(rng, Shape{pooled, pooled}, pooled, pooled));
  params.add("highway.transform.bias", Tensor(Shape{pooled}));
  params.add("criterion.projection.weight", glorot(rng, Shape{pooled, dz}, pooled, dz));
  params.add("criterion.projection.bias", Tensor(Shape{dz}));

  const std::size_t features = 4 * dz;
  if (config.predictor_hidden > 0) {
    const std::size_t h = config.predictor_hidden;
    params.add("predictor.hidden.weight", glorot(rng, Shape{features, h}, features, h));
    params.add("predictor.hidden.bias", Tensor(Shape{h}));
    params.add("predictor.output.weight", glorot(rng, Shape{h, kClassCount}, h, kClassCount));
  } else {
    params.add("predictor.output.weight", glorot(rng, Shape{features, kClassCount}, features, kClassCount));
  }
  params.add("predictor.output.bias", Tensor(Shape{kClassCount}));
  return params;
}

EncoderGraph EncoderGraph::bind(ad::Tape& tape, ad::ParameterStore& params, const EncoderConfig& config) {
  EncoderGraph g;
  g.config = &config;
  g.tape = &tape;
  g.embedding = tape.param(params.get("embedding"));
  g.memory_query = tape.param(params.get("memory.query"));
  g.memory_key = tape.param(params.get("memory.key"));
  g.memory_value = tape.param(params.get("memory.value"));
  for (std::size_t w : config.conv_widths) {
    g.conv_weight.push_back(tape.param(params.get(conv_name(w, "weight"))));
    g.conv_bias.push_back(tape.param(params.get(conv_name(w, "bias"))));
  }
  g.gate_weight = tape.param(params.get("highway.gate.weight"));
  g.gate_bias = tape.param(params.get("highway.gate.bias"));
  g.transform_weight = tape.param(params.get("highway.transform.weight"));
  g.transform_bias = tape.param(params.get("highway.transform.bias"));
  g.projection_weight = tape.param(params.get("criterion.projection.weight"));
  g.projection_bias = tape.param(params.get("criterion.projection.bias"));
  if (config.predictor_hidden > 0) {
    g.hidden_weight = tape.param(params.get("predictor.hidden.weight"));
    g.hidden_bias = tape.param(params.get("predictor.hidden.bias"));
  }
  g.output_weight = tape.param(params.get("predictor.output.weight"));
  g.output_bias = tape.param(params.get("predictor.output.bias"));
  return g;
}

// ---- encoders ------------------------------------------------------------------

ad::Var embed_visit(const EncoderGraph& g, const Visit& visit, const Vocabulary& vocab) {
  if (visit.empty()) throw DataError("embed_visit: visit has no codes");
  std::vector<std::size_t> ids;
  ids.reserve(visit.size());
  for (const auto& c : visit) ids.push_back(vocab.id(c.code));
  return ad::mean_axis(ad::gather_rows(g.embedding, ids), 0);
}

ad::Var encode_patient(const EncoderGraph& g, const PatientRecord& patient, const EncoderInputs& in) {
  if (patient.visits.empty()) throw DataError("encode_patient: " + patient.patient_id + " has no visits");
  std::vector<ad::Var> visits;
  visits.reserve(patient.visits.size());
  for (std::size_t i = 0; i < patient.visits.size(); ++i) {
    const std::vector<double>* pre =
        in.precomputed ? in.precomputed->find(PrecomputedEmbeddings::visit_id(patient.patient_id, i)) : nullptr;
    if (pre) {
      visits.push_back(g.tape->constant(Tensor::vector(*pre)));
    } else {
      visits.push_back(embed_visit(g, patient.visits[i], *in.vocabulary));
    }
  }
  ad::Var memory = ad::stack_rows(visits);                       // (T, d)
  ad::Var keys = ad::matmul(memory, g.memory_key);               // (T, d)
  ad::Var scores = ad::matmul(keys, g.memory_query);             // (T)
  ad::Var attention = ad::softmax(scores);                       // (T)
  ad::Var values = ad::matmul(memory, g.memory_value);           // (T, dz)
  return ad::matmul(attention, values);                          // (dz)
}

ad::Var highway(const EncoderGraph& g, ad::Var x) {
  ad::Var gate = ad::sigmoid(ad::add(ad::matmul(x, g.gate_weight), g.gate_bias));
  ad::Var candidate = ad::tanh(ad::add(ad::matmul(x, g.transform_weight), g.transform_bias));
  // gate * candidate + x - gate * x
  return ad::add(ad::mul(gate, candidate), ad::sub(x, ad::mul(gate, x)));
}

ad::Var encode_criterion(const EncoderGraph& g, const Criterion& criterion, const EncoderInputs& in) {
  const EncoderConfig& cfg = *g.config;
  const std::size_t width = cfg.max_width();
  ad::Var sequence;
  const std::vector<double>* pre = in.precomputed ? in.precomputed->find(criterion.criterion_id) : nullptr;
  if (pre) {
    Tensor rows(Shape{width, pre->size()});
    for (std::size_t k = 0; k < pre->size(); ++k) rows.at(0, k) = (*pre)[k];
    sequence = g.tape->constant(std::move(rows));
  } else {
    std::vector<std::size_t> ids = in.vocabulary->tokenize(criterion.text);
    while (ids.size() < width) ids.push_back(Vocabulary::kPad);
    sequence = ad::gather_rows(g.embedding, ids);  // (L, d)
  }
  std::vector<ad::Var> pooled;
  for (std::size_t i = 0; i < cfg.conv_widths.size(); ++i) {
    ad::Var conv = ad::relu(ad::add(ad::conv1d(sequence, g.conv_weight[i]), g.conv_bias[i]));
    pooled.push_back(ad::max_rows(conv));
  }
  ad::Var features = ad::concat(pooled);
  ad::Var gated = highway(g, features);
  return ad::add(ad::matmul(gated, g.projection_weight), g.projection_bias);
}

ad::Var combined_features(ad::Var zp, ad::Var zc) {
  if (zp.shape() != zc.shape())
    throw ShapeError("predict_logits: embedding shapes " + shape_string(zp.shape()) + " and " +
                     shape_string(zc.shape()) + " differ");
  const ad::Var parts[] = {zp, zc, ad::mul(zp, zc), ad::abs(ad::sub(zp, zc))};
  return ad::concat(parts, zp.value().rank() == 1 ? 0 : 1);
}

ad::Var predict_logits(const EncoderGraph& g, ad::Var zp, ad::Var zc) {
  ad::Var x = combined_features(zp, zc);
  if (g.config->predictor_hidden > 0) x = ad::relu(ad::add(ad::matmul(x, g.hidden_weight), g.hidden_bias));
  return ad::add(ad::matmul(x, g.output_weight), g.output_bias);
}

}  // namespace fairpm
