#include "genci/genintent.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace genci {

TokenSequence tokenize_history(const std::vector<std::string>& history,
                               const SemanticIDTable& table, const GenConfig& cfg,
                               Index pad_to_items) {
  TokenSequence seq;
  const Index n_items = static_cast<Index>(history.size());
  if (pad_to_items > 0 && n_items > pad_to_items) {
    throw std::invalid_argument("tokenize_history: history longer than pad length");
  }
  const Index pads = pad_to_items > 0 ? (pad_to_items - n_items) * cfg.levels : 0;
  seq.tokens.assign(static_cast<std::size_t>(pads), kPadToken);
  seq.mask.assign(static_cast<std::size_t>(pads), 0);
  seq.tokens.push_back(kBosToken);
  seq.mask.push_back(1);
  for (const auto& item : history) {
    auto it = table.by_item.find(item);
    if (it == table.by_item.end()) {
      throw std::invalid_argument("tokenize_history: item '" + item + "' has no semantic id");
    }
    const auto& levels = it->second.levels;
    if (static_cast<Index>(levels.size()) != cfg.levels) {
      throw std::invalid_argument("tokenize_history: id depth mismatch for '" + item + "'");
    }
    for (Index n = 0; n < cfg.levels; ++n) {
      seq.tokens.push_back(cfg.level_token(n, levels[static_cast<std::size_t>(n)]));
      seq.mask.push_back(1);
    }
  }
  return seq;
}

GenModel GenModel::create(ad::ParamStore& ps, const GenConfig& cfg, Rng& rng) {
  GenModel m;
  m.cfg_ = cfg;
  const Index d = cfg.d_model;
  m.tok_emb_ = ps.add("gen.tok_emb", nn::xavier_uniform(cfg.vocab(), d, rng));
  m.enc_pos_ = ps.add("gen.enc_pos", nn::xavier_uniform(cfg.max_enc_len(), d, rng));
  m.dec_pos_ = ps.add("gen.dec_pos", nn::xavier_uniform(cfg.levels + 1, d, rng));

  auto make_block = [&](const std::string& name, bool cross) {
    Block b;
    b.has_cross = cross;
    b.self_attn = nn::MultiHeadAttention::create(ps, name + ".self", d, cfg.heads, rng);
    b.norm1 = nn::RmsNorm::create(ps, name + ".norm1", d);
    if (cross) {
      b.cross_attn = nn::MultiHeadAttention::create(ps, name + ".cross", d, cfg.heads, rng);
      b.norm3 = nn::RmsNorm::create(ps, name + ".norm3", d);
    }
    b.norm2 = nn::RmsNorm::create(ps, name + ".norm2", d);
    b.ffn1 = nn::Linear::create(ps, name + ".ffn1", d, 4 * d, rng);
    b.ffn2 = nn::Linear::create(ps, name + ".ffn2", 4 * d, d, rng);
    return b;
  };
  for (Index l = 0; l < cfg.layers; ++l) {
    m.enc_.push_back(make_block("gen.enc." + std::to_string(l), false));
  }
  for (Index l = 0; l < cfg.layers; ++l) {
    m.dec_.push_back(make_block("gen.dec." + std::to_string(l), true));
  }
  m.enc_final_ = nn::RmsNorm::create(ps, "gen.enc.final", d);
  m.dec_final_ = nn::RmsNorm::create(ps, "gen.dec.final", d);
  m.out_proj_ = nn::Linear::create(ps, "gen.out", d, cfg.vocab(), rng);
  return m;
}

ad::VarId GenModel::embed(ad::Tape& t, const std::vector<int>& tokens, int pos_table,
                          bool from_end) const {
  std::vector<Index> tok_idx, pos_idx;
  const Index len = static_cast<Index>(tokens.size());
  tok_idx.reserve(tokens.size());
  pos_idx.reserve(tokens.size());
  for (Index i = 0; i < len; ++i) {
    tok_idx.push_back(tokens[static_cast<std::size_t>(i)]);
    pos_idx.push_back(from_end ? len - 1 - i : i);
  }
  ad::VarId x = ad::gather_rows(t, t.param(tok_emb_), std::move(tok_idx));
  ad::VarId p = ad::gather_rows(t, t.param(pos_table), std::move(pos_idx));
  return ad::add(t, x, p);
}

EncoderStack GenModel::encode_history(ad::Tape& t, const TokenSequence& seq,
                                      const nn::DropoutPlan& drop) const {
  if (seq.tokens.empty()) throw std::invalid_argument("encode_history: empty sequence");
  if (seq.tokens.size() != seq.mask.size()) {
    throw std::invalid_argument("encode_history: token and mask lengths differ");
  }
  if (static_cast<Index>(seq.tokens.size()) > cfg_.max_enc_len()) {
    throw std::invalid_argument("encode_history: sequence exceeds the configured maximum (" +
                                std::to_string(cfg_.max_enc_len()) + ")");
  }
  EncoderStack stack;
  stack.mask = seq.mask;
  ad::VarId h = embed(t, seq.tokens, enc_pos_, true);
  h = drop.apply(t, h, kSiteEncEmbed);
  for (Index l = 0; l < static_cast<Index>(enc_.size()); ++l) {
    const Block& b = enc_[static_cast<std::size_t>(l)];
    ad::VarId n1 = b.norm1.apply(t, h);
    ad::VarId att = b.self_attn.apply(t, n1, n1, n1, seq.mask);
    h = ad::add(t, h, drop.apply(t, att, enc_site(l, 0)));
    ad::VarId n2 = b.norm2.apply(t, h);
    ad::VarId ff = b.ffn2.apply(t, ad::gelu(t, b.ffn1.apply(t, n2)));
    h = ad::add(t, h, drop.apply(t, ff, enc_site(l, 1)));
    // The top of the stack is normalized; intermediate layers are the raw
    // residual stream.
    stack.layers.push_back(l + 1 == static_cast<Index>(enc_.size()) ? enc_final_.apply(t, h)
                                                                    : h);
  }
  return stack;
}

ad::VarId GenModel::extract_lti(ad::Tape& t, const EncoderStack& stack) const {
  Index last = -1;
  for (Index i = 0; i < static_cast<Index>(stack.mask.size()); ++i) {
    if (stack.mask[static_cast<std::size_t>(i)]) last = i;
  }
  if (last < 0) throw std::invalid_argument("extract_lti: mask has no valid position");
  return ad::row(t, stack.top(), last);
}

ad::VarId GenModel::decode_logits(ad::Tape& t, const EncoderStack& stack,
                                  const std::vector<int>& input_tokens,
                                  const nn::DropoutPlan& drop) const {
  if (input_tokens.empty() ||
      static_cast<Index>(input_tokens.size()) > cfg_.levels + 1) {
    throw std::invalid_argument("decode_logits: bad input length");
  }
  ad::VarId h = embed(t, input_tokens, dec_pos_, false);
  h = drop.apply(t, h, kSiteDecEmbed);
  const std::vector<std::uint8_t> self_mask;  // all positions valid, causal below
  for (Index l = 0; l < static_cast<Index>(dec_.size()); ++l) {
    const Block& b = dec_[static_cast<std::size_t>(l)];
    ad::VarId n1 = b.norm1.apply(t, h);
    ad::VarId att = b.self_attn.apply(t, n1, n1, n1, self_mask, true, 0);
    h = ad::add(t, h, drop.apply(t, att, dec_site(l, 0)));
    ad::VarId n3 = b.norm3.apply(t, h);
    ad::VarId cross = b.cross_attn.apply(t, n3, stack.top(), stack.top(), stack.mask);
    h = ad::add(t, h, drop.apply(t, cross, dec_site(l, 1)));
    ad::VarId n2 = b.norm2.apply(t, h);
    ad::VarId ff = b.ffn2.apply(t, ad::gelu(t, b.ffn1.apply(t, n2)));
    h = ad::add(t, h, drop.apply(t, ff, dec_site(l, 2)));
  }
  h = dec_final_.apply(t, h);
  return out_proj_.apply(t, h);
}

ad::VarId GenModel::decode_step(ad::Tape& t, const EncoderStack& stack,
                                const std::vector<int>& prefix_tokens) const {
  if (static_cast<Index>(prefix_tokens.size()) >= cfg_.levels + 1) {
    throw std::invalid_argument("decode_step: prefix already a complete id");
  }
  std::vector<int> input;
  input.reserve(prefix_tokens.size() + 1);
  input.push_back(kBosToken);
  input.insert(input.end(), prefix_tokens.begin(), prefix_tokens.end());
  ad::VarId logits = decode_logits(t, stack, input);
  return ad::row(t, logits, static_cast<Index>(input.size()) - 1);
}

std::vector<int> GenModel::target_tokens(const SemanticID& id) const {
  if (static_cast<Index>(id.levels.size()) != cfg_.levels) {
    throw std::invalid_argument("target_tokens: id depth mismatch");
  }
  std::vector<int> out;
  out.reserve(id.levels.size() + 1);
  for (Index n = 0; n < cfg_.levels; ++n) {
    out.push_back(cfg_.level_token(n, id.levels[static_cast<std::size_t>(n)]));
  }
  out.push_back(cfg_.collision_token(id.collision_index));
  return out;
}

ad::VarId GenModel::ntp_loss(ad::Tape& t, const EncoderStack& stack, const SemanticID& target,
                             const nn::DropoutPlan& drop) const {
  std::vector<int> tgt = target_tokens(target);
  std::vector<int> input;
  input.reserve(tgt.size());
  input.push_back(kBosToken);
  input.insert(input.end(), tgt.begin(), tgt.end() - 1);  // shift right
  ad::VarId logits = decode_logits(t, stack, input, drop);
  return ad::cross_entropy_rows(t, logits, tgt);
}

std::vector<BeamResult> GenModel::constrained_beam_search(
    const ad::ParamStore& ps, const Mat& enc_top, const std::vector<std::uint8_t>& enc_mask,
    const IDTrie& trie, int beam_width) const {
  if (beam_width < 1) throw std::invalid_argument("constrained_beam_search: beam_width >= 1");
  if (trie.path_count() == 0) throw std::invalid_argument("constrained_beam_search: empty trie");

  struct Beam {
    std::vector<int> raw;  // codeword indices walked so far
    Real score = 0;
  };
  std::vector<Beam> beams{{{}, 0.0}};
  const Index steps = cfg_.levels + 1;

  for (Index step = 0; step < steps; ++step) {
    std::vector<Beam> candidates;
    for (const Beam& beam : beams) {
      const std::vector<int>* allowed = trie.valid_next(beam.raw);
      if (!allowed || allowed->empty()) continue;

      ad::Tape t(&ps, nullptr, false);
      EncoderStack stack;
      stack.layers.push_back(t.input(enc_top));
      stack.mask = enc_mask;
      std::vector<int> prefix;
      prefix.reserve(beam.raw.size());
      for (Index n = 0; n < static_cast<Index>(beam.raw.size()); ++n) {
        prefix.push_back(cfg_.level_token(n, beam.raw[static_cast<std::size_t>(n)]));
      }
      const Mat logits = t.value(decode_step(t, stack, prefix));

      // Full-vocabulary log-softmax, then restrict to the trie.
      const Real mx = logits.maxCoeff();
      const Real lse = mx + std::log((logits.array() - mx).exp().sum());
      for (int raw_tok : *allowed) {
        const int vocab_tok = step < cfg_.levels ? cfg_.level_token(step, raw_tok)
                                                 : cfg_.collision_token(raw_tok);
        Beam next = beam;
        next.raw.push_back(raw_tok);
        next.score += logits(0, vocab_tok) - lse;
        candidates.push_back(std::move(next));
      }
    }
    if (candidates.empty()) {
      throw std::runtime_error("constrained_beam_search: no viable continuation");
    }
    std::sort(candidates.begin(), candidates.end(), [](const Beam& a, const Beam& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.raw < b.raw;  // deterministic tie break by token order
    });
    if (static_cast<int>(candidates.size()) > beam_width) {
      candidates.resize(static_cast<std::size_t>(beam_width));
    }
    beams = std::move(candidates);
  }

  std::vector<BeamResult> out;
  out.reserve(beams.size());
  for (const Beam& beam : beams) {
    BeamResult r;
    r.id.levels.assign(beam.raw.begin(), beam.raw.end() - 1);
    r.id.collision_index = beam.raw.back();
    r.score = beam.score;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace genci
