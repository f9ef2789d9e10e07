#pragma once

#include "genci/config.hpp"
#include "genci/corpus.hpp"
#include "genci/ctrhead.hpp"
#include "genci/genintent.hpp"
#include "genci/hcaim.hpp"
#include "genci/tokenizer.hpp"
#include "genci/types.hpp"

#include <json.hpp>

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace genci {

// Canonical file layout inside a run directory.
struct RunPaths {
  std::string dir;
  std::string config_snapshot;
  std::string semantic_ids;
  std::string baseline_ckpt;
  std::string model_ckpt;
  std::string last_good_ckpt;
  std::string loss_log;
  std::string metrics;
};
RunPaths run_paths(const std::string& run_dir);

// ---- checkpoint helpers ----
void save_params(const std::string& path, const ad::ParamStore& ps);
// Names and shapes must match the store exactly.
void load_params(const std::string& path, ad::ParamStore& ps);
std::uint64_t params_fingerprint(const ad::ParamStore& ps);
std::vector<Mat> snapshot_values(const ad::ParamStore& ps);
void restore_values(ad::ParamStore& ps, const std::vector<Mat>& snap);

// ---- stage: data ----
struct PreparedData {
  SplitLog split;
  GenreMap genres;  // empty when unconfigured
  EmbeddingTable item_embeddings;
  std::size_t embedding_fallbacks = 0;
  std::size_t malformed_lines = 0;
  std::size_t dropped_records = 0;
};
PreparedData prepare_data(const ExperimentConfig& cfg);

// ---- stage: tokenizer ----
struct TokenizerArtifacts {
  SemanticIDTable table;
  CohortIndex cohorts;
  IDTrie trie;
  Real reconstruction_mse = 0;

  TokenizerArtifacts(SemanticIDTable t, CohortIndex c, Real mse)
      : table(std::move(t)), cohorts(std::move(c)), trie(table), reconstruction_mse(mse) {}
};
TokenizerArtifacts fit_tokenizer(const ExperimentConfig& cfg, const PreparedData& data);

// ---- stage: baseline ----
struct Baseline {
  ad::ParamStore ps;
  DeepFmModel model;
  std::optional<Real> valid_auc;
  std::vector<Real> train_bce;  // per-epoch means over batches
  int epochs_run = 0;
  int best_epoch = -1;
};
Baseline pretrain_baseline(const ExperimentConfig& cfg, const PreparedData& data);
std::vector<Real> baseline_scores(const Baseline& b, const std::vector<LabeledInstance>& ins);

// ---- stage: joint model ----
struct JointModel {
  GenConfig gcfg;
  GenModel gen;
  HcaimModel hcaim;
  FeatureEmbeddings features;
  CtrModel ctr;
  int tok_emb = -1;  // generative token table, doubles as the cohort fallback
};
std::vector<FieldSpec> default_fields(const SplitLog& split);
GenConfig gen_config(const ExperimentConfig& cfg);
JointModel build_joint_model(ad::ParamStore& ps, const ExperimentConfig& cfg,
                             const SplitLog& split);

// Joint loss graph over one batch. Terms switched off by ablation flags or
// zero weights are skipped outright so an equivalent reduced run stays
// bit-identical. gen_ids must hold one generated id per idx entry whenever
// the ST path is active.
struct BatchGraph {
  ad::VarId loss = -1;
  ad::VarId logits = -1;
  Real l_ctr = 0, l_ntp = 0, l_sr = 0, joint = 0;
};
BatchGraph batch_loss(ad::Tape& t, const JointModel& m, const ExperimentConfig& cfg,
                      const TokenizerArtifacts& tok, const Baseline* baseline,
                      const std::vector<LabeledInstance>& data,
                      const std::vector<std::size_t>& idx,
                      const std::vector<SemanticID>& gen_ids, bool training,
                      std::uint64_t step_tag);

// Beam-generates the top-1 semantic id for one instance with current weights.
SemanticID generate_id(const JointModel& m, const ad::ParamStore& ps,
                       const TokenizerArtifacts& tok, const LabeledInstance& inst,
                       int beam_width);

struct EpochStats {
  int epoch = 0;
  Real l_ctr = 0, l_ntp = 0, l_sr = 0, joint = 0;  // size-weighted batch means
  std::optional<Real> valid_auc;
  std::size_t steps = 0;  // cumulative
};

// Returns true to stop right away, keeping the current parameters.
using EpochHook = std::function<bool(const EpochStats&)>;

struct TrainOutput {
  std::vector<EpochStats> epochs;
  std::optional<Real> best_valid_auc;
  int best_epoch = -1;
  std::size_t steps = 0;
  bool early_stopped = false;
  bool hook_stopped = false;
};

// Multi-task training per Eq. 12 with early stopping on validation AUC.
// Leaves the best parameters in `ps` (or the current ones after a hook stop).
// Writes one JSON line per step to loss_log when given.
TrainOutput train_joint(const ExperimentConfig& cfg, const PreparedData& data,
                        const TokenizerArtifacts& tok, const Baseline* baseline,
                        ad::ParamStore& ps, const JointModel& m, std::ostream* loss_log,
                        const EpochHook& hook = {});

// ---- evaluation ----
// Clamped CTR probabilities, dropout off, gradient free.
std::vector<Real> score_instances(const ExperimentConfig& cfg, const JointModel& m,
                                  const ad::ParamStore& ps, const TokenizerArtifacts& tok,
                                  const std::vector<LabeledInstance>& ins);

struct GroupMetrics {
  std::string name;
  std::size_t count = 0;
  std::optional<Real> auc;      // empty marks an undefined (single-class) group
  std::optional<Real> logloss;  // empty only for an empty group
};

struct EvalResult {
  GroupMetrics overall;
  std::vector<GroupMetrics> groups;
  std::vector<Real> scores;
  std::vector<Real> labels;
};
EvalResult evaluate_split(const ExperimentConfig& cfg, const JointModel& m,
                          const ad::ParamStore& ps, const TokenizerArtifacts& tok,
                          const std::vector<LabeledInstance>& ins,
                          const VolatilityPartition* partition = nullptr);
nlohmann::json eval_to_json(const EvalResult& r);

// Fraction of teacher-forced next-token argmaxes that hit the target token.
Real ntp_token_accuracy(const ad::ParamStore& ps, const JointModel& m,
                        const SemanticIDTable& table,
                        const std::vector<LabeledInstance>& ins);

// ---- full pipeline ----
struct ExperimentResult {
  RunPaths paths;
  std::optional<Real> baseline_valid_auc;
  GroupMetrics baseline_test;
  TrainOutput train;
  EvalResult test_eval;
  nlohmann::json metrics;
};

// prepare -> tokenize -> pretrain baseline -> joint train -> evaluate test.
// Deterministic for a fixed config; metrics.json carries no wall-clock.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

// ---- ablations and sweeps ----
// Variants: full, no_st, no_lt, no_sr, no_ntp, intent_mean, target_intent.
// no_sr forces eta to zero (warns on stderr when it was positive).
ExperimentConfig ablation_config(const ExperimentConfig& base, const std::string& variant);
ExperimentResult run_ablation(const ExperimentConfig& base, const std::string& variant);

struct SweepRow {
  Real value = 0;
  std::optional<Real> auc;
  std::optional<Real> logloss;
  std::string status;  // "ok" or the failure message
};
// param is one of layers, mu, eta. Failed points are recorded and skipped.
std::vector<SweepRow> run_sweep(const ExperimentConfig& base, const std::string& param,
                                const std::vector<Real>& grid);
std::string sweep_csv(const std::string& param, const std::vector<SweepRow>& rows);

// One row per instance: ids then H_LTI, H_STI and the target id embedding.
std::size_t export_intents(const ExperimentConfig& cfg, const JointModel& m,
                           const ad::ParamStore& ps, const TokenizerArtifacts& tok,
                           const std::vector<LabeledInstance>& ins, const std::string& path);

}  // namespace genci
