#pragma once

#include "genci/genintent.hpp"
#include "genci/nn.hpp"
#include "genci/tokenizer.hpp"

#include <map>
#include <string>
#include <vector>

namespace genci {

enum class IntentMode { hierarchical, intent_mean, target_intent };
IntentMode parse_intent_mode(const std::string& s);
std::string to_string(IntentMode m);

// Which rows of a learned embedding matrix belong to which item.
struct ItemEmbeddingRef {
  int param = -1;
  const std::map<std::string, Index>* rows = nullptr;
};

// Token embedding used when a cohort comes back empty.
struct FallbackRef {
  int token_emb = -1;
  const GenConfig* gcfg = nullptr;
};

struct CohortConfig {
  Index cap = 64;
  std::uint64_t seed = 0;
  // Literal level-wise cohorts by default; prefix mode matches z_1..z_n.
  bool prefix_mode = false;
};

struct PooledCohorts {
  ad::VarId e_c = -1;  // (N-1) x d
  std::vector<Index> member_counts;
  Index fallback_levels = 0;
};

struct IntentBundle {
  ad::VarId h_lti = -1;  // 1 x d_model
  ad::VarId h_sti = -1;  // 1 x d
};

// Cohort pooling, intent refinement against the encoded history and
// target-aware extraction. d is the item embedding width; the encoder's
// d_model is bridged by the key, value and fallback projections.
class HcaimModel {
 public:
  static HcaimModel create(ad::ParamStore& ps, Index d, Index d_model, Index heads, Rng& rng);

  Index d() const { return d_; }
  Index heads() const { return heads_; }

  // Mean-pools the predicted id's cohorts at levels 1..N-1. Oversized
  // cohorts are subsampled deterministically; empty ones fall back to the
  // projected codeword token embedding.
  PooledCohorts pool_cohorts(ad::Tape& t, const SemanticID& predicted,
                             const SemanticIDTable& table, const CohortIndex& index,
                             const ItemEmbeddingRef& items, const FallbackRef& fallback,
                             const CohortConfig& cfg) const;

  // E_R = Softmax((E_C Wq)(H Wk)^T / sqrt(d_head)) (H Wv), masked keys out.
  ad::VarId refine_intent(ad::Tape& t, ad::VarId e_c, ad::VarId h_enc,
                          const std::vector<std::uint8_t>& mask) const;

  // Single-query attention with the target id embedding as the query.
  ad::VarId target_attend(ad::Tape& t, ad::VarId e_v, ad::VarId e_r) const;

  ad::VarId aggregate_intent(ad::Tape& t, IntentMode mode, ad::VarId e_c, ad::VarId h_enc,
                             const std::vector<std::uint8_t>& mask, ad::VarId e_v) const;

 private:
  Index d_ = 0;
  Index heads_ = 1;
  nn::Linear refine_q_, refine_k_, refine_v_;
  nn::Linear target_q_, target_k_, target_v_;
  nn::Linear fallback_;  // d_model -> d
  nn::Linear mean_;      // d -> d, intent_mean variant
};

}  // namespace genci
