#pragma once

#include "genci/tokenizer.hpp"
#include "genci/types.hpp"

#include <json.hpp>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace genci {

// Validation failures exit the CLI with code 1; runtime failures with 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::string path;
  std::string format = "movielens";
  std::string genres;      // optional genre annotations
  std::string embeddings;  // item embeddings for the tokenizer
  std::string split = "leave_one_out";
  Index l_max = 50;
  int k_core = 0;  // 0 disables the filter
  bool positives_only = true;
  int pos_threshold = 3;
  // Pair every positive with one sampled unseen negative. Off by default;
  // logs with explicit negative ratings do not need it.
  bool sampled_negatives = false;
  Real valid_fraction = 0.1;
  Real test_fraction = 0.1;
  double min_embedding_coverage = 0.99;
};

struct ModelConfig {
  Index layers = 2;
  Index d_model = 64;
  Index heads = 2;
  Real dropout = 0.1;
  Index embedding_dim = 16;
  std::vector<Index> mlp = {256, 256, 256};
  std::string aggregation = "hierarchical";
  Index cohort_cap = 64;
  bool cohort_prefix = false;
  int beam_width = 4;
};

struct TrainConfig {
  Index batch_size = 1024;
  Real learning_rate = 5e-3;
  Real mu = 1.0;
  Real eta = 1.0;
  int epochs = 10;
  int patience = 5;
  std::uint64_t seed = 1;
  int regen_every = 1;  // beam/cohort refresh cadence in steps
  int baseline_epochs = 30;
};

struct AblationFlags {
  bool st = true;
  bool lt = true;
  bool ntp = true;
  bool sr = true;
};

struct ExperimentConfig {
  DataConfig data;
  RqvaeConfig tokenizer;
  Index collision_capacity = 256;
  ModelConfig model;
  TrainConfig train;
  AblationFlags ablation;
  std::string run_dir = "runs/default";

  void validate() const;  // throws ConfigError
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& cfg);

// Applies one dotted override like "model.layers=3". Values parse as JSON
// when possible and fall back to strings.
void apply_override(nlohmann::json& j, const std::string& keyval);

// Reads, overrides, converts and validates.
ExperimentConfig load_config(const std::string& path,
                             const std::vector<std::string>& overrides = {});

// FNV-1a over the canonical (sorted-key) dump of the effective config.
std::uint64_t config_hash(const ExperimentConfig& cfg);

// Relative paths resolve against $GENCI_DATA_ROOT when it is set.
std::string resolve_data_path(const std::string& path);

}  // namespace genci
