#pragma once

#include "genci/nn.hpp"
#include "genci/tokenizer.hpp"
#include "genci/types.hpp"

#include <string>
#include <utility>
#include <vector>

namespace genci {

// Token id layout: specials, then N blocks of K level tokens, then the
// collision block.
constexpr int kPadToken = 0;
constexpr int kBosToken = 1;
constexpr int kEosToken = 2;
constexpr int kSpecialTokens = 3;

struct GenConfig {
  Index d_model = 64;
  Index heads = 2;
  Index layers = 2;  // encoder and decoder depth; swept 1..5 upstream
  Index levels = 3;
  Index codebook_size = 256;
  Index collision_capacity = 256;
  Index l_max = 50;  // history length in items
  Real dropout = 0.1;

  Index vocab() const { return kSpecialTokens + levels * codebook_size + collision_capacity; }
  Index max_enc_len() const { return 1 + l_max * levels; }  // BOS + level tokens
  int level_token(Index level, int code) const {
    return kSpecialTokens + static_cast<int>(level * codebook_size) + code;
  }
  int collision_token(int c) const {
    return kSpecialTokens + static_cast<int>(levels * codebook_size) + c;
  }
};

struct TokenSequence {
  std::vector<int> tokens;
  std::vector<std::uint8_t> mask;  // 1 where valid
};

// History items expand to their level tokens, oldest first, preceded by BOS
// so the mask always has a valid position. pad_to_items > 0 left-pads to the
// fixed length 1 + pad_to_items * N; the default emits no padding, which is
// equivalent for all downstream outputs (padded keys carry zero weight and
// positions are indexed by distance from the sequence end).
TokenSequence tokenize_history(const std::vector<std::string>& history,
                               const SemanticIDTable& table, const GenConfig& cfg,
                               Index pad_to_items = 0);

struct EncoderStack {
  std::vector<ad::VarId> layers;   // H^(1)..H^(L); the last layer is normed
  std::vector<std::uint8_t> mask;  // key validity for cross attention
  ad::VarId top() const { return layers.back(); }
};

struct BeamResult {
  SemanticID id;
  Real score = 0;  // summed log probabilities
};

class GenModel {
 public:
  static GenModel create(ad::ParamStore& ps, const GenConfig& cfg, Rng& rng);

  const GenConfig& config() const { return cfg_; }

  EncoderStack encode_history(ad::Tape& t, const TokenSequence& seq,
                              const nn::DropoutPlan& drop = {}) const;

  // h^(L) at the last valid position, 1 x d_model.
  ad::VarId extract_lti(ad::Tape& t, const EncoderStack& stack) const;

  // Teacher-forced decoder logits, one row per input position.
  ad::VarId decode_logits(ad::Tape& t, const EncoderStack& stack,
                          const std::vector<int>& input_tokens,
                          const nn::DropoutPlan& drop = {}) const;

  // Next-token logits after a partial target prefix (level codes so far).
  ad::VarId decode_step(ad::Tape& t, const EncoderStack& stack,
                        const std::vector<int>& prefix_tokens) const;

  // Mean cross entropy over the N+1 target tokens (levels then collision).
  ad::VarId ntp_loss(ad::Tape& t, const EncoderStack& stack, const SemanticID& target,
                     const nn::DropoutPlan& drop = {}) const;

  // Trie-constrained beam search over complete ids. Runs gradient-free on a
  // private tape; enc_top holds the values of the encoder's top layer.
  std::vector<BeamResult> constrained_beam_search(const ad::ParamStore& ps, const Mat& enc_top,
                                                  const std::vector<std::uint8_t>& enc_mask,
                                                  const IDTrie& trie, int beam_width) const;

  std::vector<int> target_tokens(const SemanticID& id) const;

  // Dropout site ids, one per regularized sublayer output.
  static constexpr std::uint64_t kSiteEncEmbed = 10;
  static constexpr std::uint64_t kSiteDecEmbed = 20;
  static std::uint64_t enc_site(Index layer, int sublayer) {
    return 100 + static_cast<std::uint64_t>(layer) * 4 + static_cast<std::uint64_t>(sublayer);
  }
  static std::uint64_t dec_site(Index layer, int sublayer) {
    return 400 + static_cast<std::uint64_t>(layer) * 4 + static_cast<std::uint64_t>(sublayer);
  }

 private:
  struct Block {
    nn::MultiHeadAttention self_attn;
    nn::MultiHeadAttention cross_attn;  // decoder only
    nn::RmsNorm norm1, norm2, norm3;
    nn::Linear ffn1, ffn2;
    bool has_cross = false;
  };

  ad::VarId embed(ad::Tape& t, const std::vector<int>& tokens, int pos_table,
                  bool from_end) const;

  GenConfig cfg_;
  int tok_emb_ = -1;
  int enc_pos_ = -1;
  int dec_pos_ = -1;
  std::vector<Block> enc_;
  std::vector<Block> dec_;
  nn::RmsNorm enc_final_;
  nn::RmsNorm dec_final_;
  nn::Linear out_proj_;
};

}  // namespace genci
