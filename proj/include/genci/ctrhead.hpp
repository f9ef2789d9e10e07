#pragma once

#include "genci/corpus.hpp"
#include "genci/nn.hpp"

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace genci {

struct FieldSpec {
  enum class Side { user, item };
  std::string name;
  Side side = Side::user;
  std::vector<std::string> vocab;  // row 0 is reserved for out-of-vocabulary
};

// Per-field embedding tables. E_u and E_v are the concatenated user-side and
// item-side field vectors of one instance (or a batch, one row each).
class FeatureEmbeddings {
 public:
  static FeatureEmbeddings create(ad::ParamStore& ps, const std::string& prefix,
                                  std::vector<FieldSpec> fields, Index dim, Rng& rng);

  Index dim() const { return dim_; }
  Index user_width() const;
  Index item_width() const;
  std::vector<FieldSpec> fields() const;

  // 0 for unseen values (counted), 1 + vocab position otherwise.
  Index row_of(const std::string& field, const std::string& value) const;
  std::vector<Index> rows_for(const std::string& field,
                              const std::vector<LabeledInstance>& data,
                              const std::vector<std::size_t>& idx) const;

  std::pair<ad::VarId, ad::VarId> embed(ad::Tape& t, const LabeledInstance& inst) const;
  std::pair<ad::VarId, ad::VarId> embed_batch(ad::Tape& t,
                                              const std::vector<LabeledInstance>& data,
                                              const std::vector<std::size_t>& idx) const;

  // Target item ID rows (the Eq. 9 query comes from the same table as E_v).
  ad::VarId embed_item_id(ad::Tape& t, const std::string& item) const;
  ad::VarId embed_item_ids(ad::Tape& t, const std::vector<LabeledInstance>& data,
                           const std::vector<std::size_t>& idx) const;

  // Raw table access, e.g. for cohort pooling over the item ID table.
  int table_param(const std::string& field) const;
  const std::map<std::string, Index>& vocab_rows(const std::string& field) const;

  std::size_t oov_hits() const { return oov_hits_; }
  void reset_oov_hits() { oov_hits_ = 0; }

 private:
  struct Field {
    FieldSpec spec;
    int table = -1;
    std::map<std::string, Index> rows;
  };
  const Field& field(const std::string& name) const;
  static std::string field_value(const LabeledInstance& inst, const FieldSpec& spec);
  std::vector<Index> batch_rows(const Field& f, const std::vector<LabeledInstance>& data,
                                const std::vector<std::size_t>& idx) const;

  std::vector<Field> fields_;
  Index dim_ = 0;
  mutable std::size_t oov_hits_ = 0;  // stats only; single-writer
};

struct CtrConfig {
  Index d_model = 64;                       // H_LTI width
  Index d_intent = 16;                      // H_STI width
  std::vector<Index> hidden = {256, 256, 256};
};

// Fusion MLP of Eq. 10 over [H_LTI; H_STI; E_u; E_v].
class CtrModel {
 public:
  static CtrModel create(ad::ParamStore& ps, const CtrConfig& cfg, Index user_width,
                         Index item_width, Rng& rng);

  Index input_width() const { return in_width_; }

  // Pre-sigmoid logits, one row per batch row.
  ad::VarId fusion_logit(ad::Tape& t, ad::VarId h_lti, ad::VarId h_sti, ad::VarId e_u,
                         ad::VarId e_v) const;
  ad::VarId predict(ad::Tape& t, ad::VarId h_lti, ad::VarId h_sti, ad::VarId e_u,
                    ad::VarId e_v) const;

 private:
  std::vector<nn::Linear> layers_;
  Index in_width_ = 0;
};

Real clamp_prob(Real p);  // [1e-7, 1 - 1e-7]

// Single-instance Eq. 10 forward; returns the clamped probability.
Real predict_ctr(const ad::ParamStore& ps, const CtrModel& model, const Mat& h_lti,
                 const Mat& h_sti, const Mat& e_u, const Mat& e_v);

// Mean BCE over clamped probabilities (Eq. 1).
Real bce_loss(const std::vector<Real>& preds, const std::vector<Real>& labels);

// Mean squared logit difference (Eq. 11 with L = squared error).
Real sr_loss(const std::vector<Real>& base_logits, const std::vector<Real>& our_logits);
// Tape form; the baseline logits enter as constants.
ad::VarId sr_loss(ad::Tape& t, ad::VarId our_logits, const Vec& base_logits);

struct LossWeights {
  Real mu = 1.0;
  Real eta = 1.0;
  void validate() const;
};

// L = L_CTR + mu * L_NTP + eta * L_SR (Eq. 12).
Real joint_loss(Real l_ctr, Real l_ntp, Real l_sr, const LossWeights& w);

// DeepFM over raw features only: global bias + per-value linear weights +
// factorization pairwise term + a deep tower over the same field embeddings.
class DeepFmModel {
 public:
  static DeepFmModel create(ad::ParamStore& ps, std::vector<FieldSpec> fields, Index dim,
                            std::vector<Index> hidden, Rng& rng);

  ad::VarId logit_batch(ad::Tape& t, const std::vector<LabeledInstance>& data,
                        const std::vector<std::size_t>& idx) const;
  // Gradient-free convenience for the frozen phase.
  Vec logits_value(const ad::ParamStore& ps, const std::vector<LabeledInstance>& data,
                   const std::vector<std::size_t>& idx) const;

  const FeatureEmbeddings& features() const { return emb_; }

 private:
  FeatureEmbeddings emb_;
  std::vector<int> linear_tables_;
  int bias_ = -1;
  std::vector<nn::Linear> deep_;
};

}  // namespace genci
