// fairpm: generate corpora, train matchers, evaluate fairness, sweep lambda
// and extract case studies.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fairpm/corpus.h"
#include "fairpm/errors.h"
#include "fairpm/evaluator.h"
#include "fairpm/io.h"
#include "fairpm/trainer.h"

namespace fs = std::filesystem;
using namespace fairpm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDivergence = 3;

struct TrainFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<double> learning_rate;
  std::optional<std::size_t> batch_size;
  std::optional<int> max_epochs;
  std::optional<int> patience;
  std::optional<double> lambda_fc;
  std::optional<double> kappa;
  std::optional<std::string> attribute;
  std::optional<std::string> optimizer;
  std::optional<std::string> mode;
  std::optional<bool> group_stratified;
  std::optional<double> reversal_weight;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Train config file (JSON)");
    cmd->add_option("--seed", seed);
    cmd->add_option("--learning-rate", learning_rate);
    cmd->add_option("--batch-size", batch_size);
    cmd->add_option("--max-epochs", max_epochs);
    cmd->add_option("--patience", patience);
    cmd->add_option("--lambda-fc", lambda_fc);
    cmd->add_option("--kappa", kappa);
    cmd->add_option("--attribute", attribute, "race or gender");
    cmd->add_option("--optimizer", optimizer, "plain-sgd or adaptive-moment");
    cmd->add_option("--mode", mode, "fairpm, baseline or baseline-with-alc");
    cmd->add_option("--group-stratified-batching", group_stratified);
    cmd->add_option("--reversal-weight", reversal_weight);
  }

  TrainConfig resolve() const {
    TrainConfig c = config_path.empty() ? TrainConfig{} : load_train_config(config_path);
    if (seed) c.seed = *seed;
    if (learning_rate) c.learning_rate = *learning_rate;
    if (batch_size) c.batch_size = *batch_size;
    if (max_epochs) c.max_epochs = *max_epochs;
    if (patience) c.patience = *patience;
    if (lambda_fc) c.lambda_fc = *lambda_fc;
    if (kappa) c.kappa = *kappa;
    if (attribute) c.attribute = parse_attribute(*attribute);
    if (optimizer) c.optimizer = parse_optimizer(*optimizer);
    if (mode) c.mode = parse_mode(*mode);
    if (group_stratified) c.group_stratified = *group_stratified;
    if (reversal_weight) c.reversal_weight = *reversal_weight;
    c.validate();
    return c;
  }
};

CorpusSplits load_splits(const fs::path& dir) {
  CorpusSplits s;
  s.train = load_corpus(dir / "train.jsonl");
  s.valid = load_corpus(dir / "valid.jsonl");
  s.test = load_corpus(dir / "test.jsonl");
  return s;
}

Corpus load_split(const fs::path& dir, const std::string& name) {
  if (name != "train" && name != "valid" && name != "test")
    throw ConfigError("unknown split '" + name + "' (expected train, valid or test)");
  return load_corpus(dir / (name + ".jsonl"));
}

void check_vocabulary(const Checkpoint& ckpt, const fs::path& corpus_dir, const std::string& label) {
  const Vocabulary expected = Vocabulary::build(load_corpus(corpus_dir / "train.jsonl"));
  if (expected.hash() != ckpt.model.vocabulary.hash())
    throw DataError(label + " vocabulary " + ckpt.model.vocabulary.hash() + " does not match corpus vocabulary " +
                    expected.hash());
}

fs::path out_path(const std::string& explicit_path, const std::string& out_dir, const std::string& fallback) {
  if (!explicit_path.empty()) return explicit_path;
  return fs::path(out_dir) / fallback;
}

int cmd_gen(const std::string& config_path, const std::string& out_dir, std::optional<std::uint64_t> seed,
            std::optional<int> patients, std::optional<double> bias) {
  GeneratorConfig config = config_path.empty() ? GeneratorConfig{} : load_generator_config(config_path);
  if (seed) config.seed = *seed;
  if (patients) config.patient_count = *patients;
  if (bias) config.bias_strength = *bias;
  config.validate();
  Corpus corpus = generate(config);
  CorpusSplits splits = split(corpus, config.split_ratios, config.seed);
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  save_corpus(corpus, dir / "corpus.jsonl");
  save_corpus(splits.train, dir / "train.jsonl");
  save_corpus(splits.valid, dir / "valid.jsonl");
  save_corpus(splits.test, dir / "test.jsonl");
  nlohmann::ordered_json prov;
  const std::string config_text = to_json(config).dump();
  prov["seed"] = config.seed;
  prov["config-hash"] = hex64(fnv1a64(config_text));
  prov["config"] = to_json(config);
  prov["split-patients"] = {{"train", splits.train.patients.size()},
                            {"valid", splits.valid.patients.size()},
                            {"test", splits.test.patients.size()}};
  write_file_atomic(dir / "provenance.json", prov.dump(2) + "\n");
  std::cout << prov["split-patients"].dump() << "\n";
  return kExitOk;
}

int cmd_train(const std::string& corpus_dir, const TrainFlags& flags, const std::string& out, const std::string& out_dir,
              const std::string& embeddings) {
  TrainConfig config = flags.resolve();
  CorpusSplits splits = load_splits(corpus_dir);
  std::optional<PrecomputedEmbeddings> pre;
  if (!embeddings.empty()) pre = PrecomputedEmbeddings::load(embeddings);
  TrainResult result = train(splits, config, pre ? &*pre : nullptr);
  const fs::path ckpt = out_path(out, out_dir, "checkpoint.json");
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  save_checkpoint(ckpt, result.model, config);
  fs::path history = ckpt;
  history.replace_extension(".history.json");
  write_file_atomic(history, to_json(result.history).dump(2) + "\n");
  std::cout << "epochs " << result.history.epochs.size() << ", best " << result.history.best_epoch << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& corpus_dir, const std::string& split_name,
             const std::string& task_name, const std::string& attribute_name, bool oracle, const std::string& out,
             const std::string& out_dir) {
  const Task task = parse_task(task_name);
  const SensitiveAttribute attribute = parse_attribute(attribute_name);
  Corpus data = load_split(corpus_dir, split_name);
  std::vector<PairPrediction> preds;
  if (oracle) {
    preds = oracle_predictions(data);
  } else {
    if (checkpoint.empty()) throw ConfigError("eval needs --checkpoint unless --oracle-predictions is set");
    Checkpoint ckpt = load_checkpoint(checkpoint);
    check_vocabulary(ckpt, corpus_dir, "checkpoint");
    preds = predict_pairs(ckpt.model, data);
  }
  MetricsReport report;
  if (task == Task::kCriterion) {
    report = evaluate(std::span<const PairPrediction>(preds), attribute);
  } else {
    auto trials = predict_trials(data, preds);
    report = evaluate(std::span<const TrialPrediction>(trials), attribute);
  }
  const fs::path path = out_path(out, out_dir, "metrics.json");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const std::string json = to_json(report).dump(2) + "\n";
  write_file_atomic(path, json);
  fs::path csv = path;
  csv.replace_extension(".csv");
  write_file_atomic(csv, metrics_csv_header() + "\n" + metrics_csv_row(report) + "\n");
  std::cout << json;
  return kExitOk;
}

int cmd_sweep(const std::string& corpus_dir, const TrainFlags& flags, const std::vector<double>& lambdas,
              const std::string& task_name, int threads, const std::string& out, const std::string& out_dir) {
  TrainConfig config = flags.resolve();
  const Task task = parse_task(task_name);
  bool has_zero = false;
  for (double l : lambdas) has_zero = has_zero || l == 0.0;
  if (lambdas.size() < 2 || !has_zero) throw ConfigError("sweep needs at least two lambda values including 0");
  CorpusSplits splits = load_splits(corpus_dir);
  auto cells = sweep_lambda(splits, config, lambdas, threads);
  for (const auto& c : cells)
    if (!c.error.empty()) std::cerr << "lambda " << format_double(c.lambda) << ": " << c.error << "\n";
  const std::string table = sweep_table_csv(cells, task);
  const fs::path path = out_path(out, out_dir, "sweep.csv");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_atomic(path, table);
  std::cout << table;
  for (const auto& c : cells)
    if (!c.error.empty()) return kExitData;
  return kExitOk;
}

int cmd_report(const std::string& baseline_path, const std::string& fairpm_path, const std::string& corpus_dir,
               const std::string& split_name, const std::string& out, const std::string& out_dir) {
  Checkpoint baseline = load_checkpoint(baseline_path);
  Checkpoint fair = load_checkpoint(fairpm_path);
  check_vocabulary(baseline, corpus_dir, "baseline checkpoint");
  check_vocabulary(fair, corpus_dir, "fairpm checkpoint");
  Corpus data = load_split(corpus_dir, split_name);
  auto b = predict_pairs(baseline.model, data);
  auto f = predict_pairs(fair.model, data);
  auto rows = case_study(data, b, f);
  const fs::path path = out_path(out, out_dir, "case_study.csv");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_atomic(path, case_study_csv(rows));
  std::cout << rows.size() << " divergent pairs\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fair patient-trial matching: corpus generation, training and fairness evaluation"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string out_dir = ".";
  app.add_option("--out-dir", out_dir, "Directory for default output paths")->envname("FAIRPM_OUT_DIR");

  auto* gen = app.add_subcommand("gen", "Generate a synthetic corpus and its splits");
  std::string gen_config;
  std::optional<std::uint64_t> gen_seed;
  std::optional<int> gen_patients;
  std::optional<double> gen_bias;
  gen->add_option("--config", gen_config, "Generator config file (JSON)");
  gen->add_option("--seed", gen_seed);
  gen->add_option("--patient-count", gen_patients);
  gen->add_option("--bias-strength", gen_bias);

  auto* tr = app.add_subcommand("train", "Train a matcher");
  std::string corpus_dir, out, embeddings;
  TrainFlags train_flags;
  tr->add_option("--corpus-dir", corpus_dir)->required();
  tr->add_option("--out", out, "Checkpoint path");
  tr->add_option("--embeddings", embeddings, "Precomputed embeddings (JSONL)");
  train_flags.attach(tr);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus split");
  std::string checkpoint, split_name = "test", task = "criterion", attribute = "race";
  bool oracle = false;
  ev->add_option("--checkpoint", checkpoint);
  ev->add_option("--corpus-dir", corpus_dir)->required();
  ev->add_option("--split", split_name);
  ev->add_option("--task", task, "criterion or trial");
  ev->add_option("--attribute", attribute, "race or gender");
  ev->add_flag("--oracle-predictions", oracle, "Score the oracle labels instead of a model");
  ev->add_option("--out", out, "Metrics path (JSON; a CSV is written alongside)");

  auto* sw = app.add_subcommand("sweep", "Train and evaluate once per lambda");
  std::vector<double> lambdas{0, 1, 2, 4, 8};
  int threads = 1;
  TrainFlags sweep_flags;
  sw->add_option("--corpus-dir", corpus_dir)->required();
  sw->add_option("--lambdas", lambdas)->delimiter(',');
  sw->add_option("--task", task, "criterion or trial");
  sw->add_option("--threads", threads)->envname("FAIRPM_THREADS")->check(CLI::PositiveNumber);
  sw->add_option("--out", out, "Table path (CSV)");
  sweep_flags.attach(sw);

  auto* rep = app.add_subcommand("report", "List pairs where two checkpoints disagree");
  std::string baseline_path, fairpm_path;
  rep->add_option("--baseline", baseline_path)->required();
  rep->add_option("--fairpm", fairpm_path)->required();
  rep->add_option("--corpus-dir", corpus_dir)->required();
  rep->add_option("--split", split_name);
  rep->add_option("--out", out, "Case-study path (CSV)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen(gen_config, out_dir, gen_seed, gen_patients, gen_bias);
    if (*tr) return cmd_train(corpus_dir, train_flags, out, out_dir, embeddings);
    if (*ev) return cmd_eval(checkpoint, corpus_dir, split_name, task, attribute, oracle, out, out_dir);
    if (*sw) return cmd_sweep(corpus_dir, sweep_flags, lambdas, task, threads, out, out_dir);
    if (*rep) return cmd_report(baseline_path, fairpm_path, corpus_dir, split_name, out, out_dir);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
