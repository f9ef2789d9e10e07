#include "genci/config.hpp"

#include "genci/corpus.hpp"
#include "genci/hcaim.hpp"
#include "genci/rng.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

namespace genci {

namespace {

using nlohmann::json;

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

json section(const json& j, const char* key) {
  if (!j.contains(key)) return json::object();
  if (!j.at(key).is_object()) {
    throw ConfigError(std::string("config section '") + key + "' must be an object");
  }
  return j.at(key);
}

void expect(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("config: " + what);
}

}  // namespace

ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;

  json d = section(j, "data");
  cfg.data.path = get_or<std::string>(d, "path", cfg.data.path);
  cfg.data.format = get_or<std::string>(d, "format", cfg.data.format);
  cfg.data.genres = get_or<std::string>(d, "genres", cfg.data.genres);
  cfg.data.embeddings = get_or<std::string>(d, "embeddings", cfg.data.embeddings);
  cfg.data.split = get_or<std::string>(d, "split", cfg.data.split);
  cfg.data.l_max = get_or<Index>(d, "l_max", cfg.data.l_max);
  cfg.data.k_core = get_or<int>(d, "k_core", cfg.data.k_core);
  cfg.data.positives_only = get_or<bool>(d, "positives_only", cfg.data.positives_only);
  cfg.data.pos_threshold = get_or<int>(d, "pos_threshold", cfg.data.pos_threshold);
  cfg.data.sampled_negatives = get_or<bool>(d, "sampled_negatives", cfg.data.sampled_negatives);
  cfg.data.valid_fraction = get_or<Real>(d, "valid_fraction", cfg.data.valid_fraction);
  cfg.data.test_fraction = get_or<Real>(d, "test_fraction", cfg.data.test_fraction);
  cfg.data.min_embedding_coverage =
      get_or<double>(d, "min_embedding_coverage", cfg.data.min_embedding_coverage);

  json t = section(j, "tokenizer");
  cfg.tokenizer.levels = get_or<Index>(t, "levels", cfg.tokenizer.levels);
  cfg.tokenizer.codebook_size = get_or<Index>(t, "codebook_size", cfg.tokenizer.codebook_size);
  cfg.tokenizer.d_code = get_or<Index>(t, "d_code", cfg.tokenizer.d_code);
  cfg.tokenizer.epochs = get_or<int>(t, "epochs", cfg.tokenizer.epochs);
  cfg.tokenizer.batch_size = get_or<Index>(t, "batch_size", cfg.tokenizer.batch_size);
  cfg.tokenizer.learning_rate = get_or<Real>(t, "learning_rate", cfg.tokenizer.learning_rate);
  cfg.tokenizer.beta = get_or<Real>(t, "beta", cfg.tokenizer.beta);
  cfg.tokenizer.seed = get_or<std::uint64_t>(t, "seed", cfg.tokenizer.seed);
  cfg.collision_capacity = get_or<Index>(t, "collision_capacity", cfg.collision_capacity);

  json m = section(j, "model");
  cfg.model.layers = get_or<Index>(m, "layers", cfg.model.layers);
  cfg.model.d_model = get_or<Index>(m, "d_model", cfg.model.d_model);
  cfg.model.heads = get_or<Index>(m, "heads", cfg.model.heads);
  cfg.model.dropout = get_or<Real>(m, "dropout", cfg.model.dropout);
  cfg.model.embedding_dim = get_or<Index>(m, "embedding_dim", cfg.model.embedding_dim);
  cfg.model.mlp = get_or<std::vector<Index>>(m, "mlp", cfg.model.mlp);
  cfg.model.aggregation = get_or<std::string>(m, "aggregation", cfg.model.aggregation);
  cfg.model.cohort_cap = get_or<Index>(m, "cohort_cap", cfg.model.cohort_cap);
  cfg.model.cohort_prefix = get_or<bool>(m, "cohort_prefix", cfg.model.cohort_prefix);
  cfg.model.beam_width = get_or<int>(m, "beam_width", cfg.model.beam_width);

  json tr = section(j, "train");
  cfg.train.batch_size = get_or<Index>(tr, "batch_size", cfg.train.batch_size);
  cfg.train.learning_rate = get_or<Real>(tr, "learning_rate", cfg.train.learning_rate);
  cfg.train.mu = get_or<Real>(tr, "mu", cfg.train.mu);
  cfg.train.eta = get_or<Real>(tr, "eta", cfg.train.eta);
  cfg.train.epochs = get_or<int>(tr, "epochs", cfg.train.epochs);
  cfg.train.patience = get_or<int>(tr, "patience", cfg.train.patience);
  cfg.train.seed = get_or<std::uint64_t>(tr, "seed", cfg.train.seed);
  cfg.train.regen_every = get_or<int>(tr, "regen_every", cfg.train.regen_every);
  cfg.train.baseline_epochs = get_or<int>(tr, "baseline_epochs", cfg.train.baseline_epochs);

  json a = section(j, "ablation");
  cfg.ablation.st = get_or<bool>(a, "st", cfg.ablation.st);
  cfg.ablation.lt = get_or<bool>(a, "lt", cfg.ablation.lt);
  cfg.ablation.ntp = get_or<bool>(a, "ntp", cfg.ablation.ntp);
  cfg.ablation.sr = get_or<bool>(a, "sr", cfg.ablation.sr);

  cfg.run_dir = get_or<std::string>(j, "run_dir", cfg.run_dir);
  return cfg;
}

nlohmann::json config_to_json(const ExperimentConfig& c) {
  // nlohmann objects keep sorted keys, which makes the dump canonical.
  json j;
  j["data"] = {{"path", c.data.path},
               {"format", c.data.format},
               {"genres", c.data.genres},
               {"embeddings", c.data.embeddings},
               {"split", c.data.split},
               {"l_max", c.data.l_max},
               {"k_core", c.data.k_core},
               {"positives_only", c.data.positives_only},
               {"pos_threshold", c.data.pos_threshold},
               {"sampled_negatives", c.data.sampled_negatives},
               {"valid_fraction", c.data.valid_fraction},
               {"test_fraction", c.data.test_fraction},
               {"min_embedding_coverage", c.data.min_embedding_coverage}};
  j["tokenizer"] = {{"levels", c.tokenizer.levels},
                    {"codebook_size", c.tokenizer.codebook_size},
                    {"d_code", c.tokenizer.d_code},
                    {"epochs", c.tokenizer.epochs},
                    {"batch_size", c.tokenizer.batch_size},
                    {"learning_rate", c.tokenizer.learning_rate},
                    {"beta", c.tokenizer.beta},
                    {"seed", c.tokenizer.seed},
                    {"collision_capacity", c.collision_capacity}};
  j["model"] = {{"layers", c.model.layers},
                {"d_model", c.model.d_model},
                {"heads", c.model.heads},
                {"dropout", c.model.dropout},
                {"embedding_dim", c.model.embedding_dim},
                {"mlp", c.model.mlp},
                {"aggregation", c.model.aggregation},
                {"cohort_cap", c.model.cohort_cap},
                {"cohort_prefix", c.model.cohort_prefix},
                {"beam_width", c.model.beam_width}};
  j["train"] = {{"batch_size", c.train.batch_size},
                {"learning_rate", c.train.learning_rate},
                {"mu", c.train.mu},
                {"eta", c.train.eta},
                {"epochs", c.train.epochs},
                {"patience", c.train.patience},
                {"seed", c.train.seed},
                {"regen_every", c.train.regen_every},
                {"baseline_epochs", c.train.baseline_epochs}};
  j["ablation"] = {{"st", c.ablation.st},
                   {"lt", c.ablation.lt},
                   {"ntp", c.ablation.ntp},
                   {"sr", c.ablation.sr}};
  j["run_dir"] = c.run_dir;
  return j;
}

void ExperimentConfig::validate() const {
  try {
    parse_log_format(data.format);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  expect(data.split == "leave_one_out" || data.split == "chronological",
         "data.split must be leave_one_out or chronological");
  expect(data.l_max >= 1, "data.l_max must be >= 1");
  expect(data.k_core >= 0, "data.k_core must be >= 0");
  expect(data.pos_threshold >= 0, "data.pos_threshold must be >= 0");
  expect(data.valid_fraction > 0 && data.valid_fraction < 0.5,
         "data.valid_fraction out of (0, 0.5)");
  expect(data.test_fraction > 0 && data.test_fraction < 0.5,
         "data.test_fraction out of (0, 0.5)");
  expect(data.min_embedding_coverage >= 0 && data.min_embedding_coverage <= 1,
         "data.min_embedding_coverage out of [0, 1]");

  expect(tokenizer.levels >= 1 && tokenizer.levels <= 8, "tokenizer.levels out of [1, 8]");
  expect(tokenizer.codebook_size >= 2 && tokenizer.codebook_size <= 65536,
         "tokenizer.codebook_size out of [2, 65536]");
  expect(tokenizer.d_code >= 1, "tokenizer.d_code must be >= 1");
  expect(tokenizer.epochs >= 0, "tokenizer.epochs must be >= 0");
  expect(tokenizer.batch_size >= 1, "tokenizer.batch_size must be >= 1");
  expect(std::isfinite(tokenizer.learning_rate) && tokenizer.learning_rate > 0,
         "tokenizer.learning_rate must be positive");
  expect(std::isfinite(tokenizer.beta) && tokenizer.beta >= 0,
         "tokenizer.beta must be >= 0");
  expect(collision_capacity >= 1, "tokenizer.collision_capacity must be >= 1");

  expect(model.layers >= 1 && model.layers <= 8, "model.layers out of [1, 8]");
  expect(model.heads >= 1, "model.heads must be >= 1");
  expect(model.d_model >= model.heads && model.d_model % model.heads == 0,
         "model.d_model must be a positive multiple of model.heads");
  const bool dropout_ok = model.dropout == 0.0 || model.dropout == 0.1 ||
                          model.dropout == 0.2 || model.dropout == 0.3;
  expect(dropout_ok, "model.dropout must be one of {0.0, 0.1, 0.2, 0.3}");
  expect(model.embedding_dim >= model.heads && model.embedding_dim % model.heads == 0,
         "model.embedding_dim must be a positive multiple of model.heads");
  expect(!model.mlp.empty(), "model.mlp must list at least one hidden width");
  for (Index w : model.mlp) expect(w >= 1, "model.mlp widths must be >= 1");
  try {
    parse_intent_mode(model.aggregation);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  expect(model.cohort_cap >= 1, "model.cohort_cap must be >= 1");
  expect(model.beam_width >= 1, "model.beam_width must be >= 1");

  expect(train.batch_size >= 1, "train.batch_size must be >= 1");
  expect(std::isfinite(train.learning_rate) && train.learning_rate > 0,
         "train.learning_rate must be positive");
  expect(std::isfinite(train.mu) && train.mu >= 0, "train.mu must be finite and >= 0");
  expect(std::isfinite(train.eta) && train.eta >= 0, "train.eta must be finite and >= 0");
  expect(train.epochs >= 1, "train.epochs must be >= 1");
  expect(train.patience >= 0, "train.patience must be >= 0");
  expect(train.regen_every >= 1, "train.regen_every must be >= 1");
  expect(train.baseline_epochs >= 1, "train.baseline_epochs must be >= 1");
  expect(!run_dir.empty(), "run_dir must not be empty");
}

void apply_override(nlohmann::json& j, const std::string& keyval) {
  const auto eq = keyval.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + keyval + "' is not key=value");
  }
  const std::string dotted = keyval.substr(0, eq);
  const std::string raw = keyval.substr(eq + 1);

  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;  // plain string

  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot - start);
    if (key.empty()) throw ConfigError("override '" + keyval + "' has an empty key segment");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (!node->is_object() && !node->is_null()) {
      throw ConfigError("override '" + keyval + "' descends into a non-object");
    }
    start = dot + 1;
  }
}

ExperimentConfig load_config(const std::string& path,
                             const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config '" + path + "' must hold a JSON object");
  for (const auto& kv : overrides) apply_override(j, kv);
  ExperimentConfig cfg = config_from_json(j);
  cfg.validate();
  return cfg;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  return fnv1a64(config_to_json(cfg).dump());
}

std::string resolve_data_path(const std::string& path) {
  if (path.empty()) return path;
  std::filesystem::path p(path);
  if (p.is_absolute()) return path;
  const char* root = std::getenv("GENCI_DATA_ROOT");
  if (!root || !*root) return path;
  return (std::filesystem::path(root) / p).string();
}

}  // namespace genci
