#include "genci/hcaim.hpp"

#include <algorithm>
#include <stdexcept>

namespace genci {

IntentMode parse_intent_mode(const std::string& s) {
  if (s == "hierarchical") return IntentMode::hierarchical;
  if (s == "intent_mean") return IntentMode::intent_mean;
  if (s == "target_intent") return IntentMode::target_intent;
  throw std::invalid_argument("unknown intent mode '" + s + "'");
}

std::string to_string(IntentMode m) {
  switch (m) {
    case IntentMode::hierarchical: return "hierarchical";
    case IntentMode::intent_mean: return "intent_mean";
    case IntentMode::target_intent: return "target_intent";
  }
  throw std::logic_error("bad intent mode");
}

HcaimModel HcaimModel::create(ad::ParamStore& ps, Index d, Index d_model, Index heads,
                              Rng& rng) {
  if (d % heads != 0) throw std::invalid_argument("hcaim: d must be divisible by heads");
  HcaimModel m;
  m.d_ = d;
  m.heads_ = heads;
  m.refine_q_ = nn::Linear::create(ps, "hcaim.refine.q", d, d, rng, false);
  m.refine_k_ = nn::Linear::create(ps, "hcaim.refine.k", d_model, d, rng, false);
  m.refine_v_ = nn::Linear::create(ps, "hcaim.refine.v", d_model, d, rng, false);
  m.target_q_ = nn::Linear::create(ps, "hcaim.target.q", d, d, rng, false);
  m.target_k_ = nn::Linear::create(ps, "hcaim.target.k", d, d, rng, false);
  m.target_v_ = nn::Linear::create(ps, "hcaim.target.v", d, d, rng, false);
  m.fallback_ = nn::Linear::create(ps, "hcaim.fallback", d_model, d, rng, false);
  m.mean_ = nn::Linear::create(ps, "hcaim.mean", d, d, rng, false);
  return m;
}

namespace {

// Shared attention body; no output projection, matching the written form.
ad::VarId attend(ad::Tape& t, ad::VarId q_in, ad::VarId kv_in, const nn::Linear& wq,
                 const nn::Linear& wk, const nn::Linear& wv,
                 const std::vector<std::uint8_t>& key_valid, Index heads, Index d) {
  const Index d_head = d / heads;
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(d_head));
  ad::VarId q = wq.apply(t, q_in);
  ad::VarId k = wk.apply(t, kv_in);
  ad::VarId v = wv.apply(t, kv_in);
  std::vector<ad::VarId> ctx;
  ctx.reserve(static_cast<std::size_t>(heads));
  for (Index h = 0; h < heads; ++h) {
    ad::VarId qh = ad::slice_cols(t, q, h * d_head, d_head);
    ad::VarId kh = ad::slice_cols(t, k, h * d_head, d_head);
    ad::VarId vh = ad::slice_cols(t, v, h * d_head, d_head);
    ad::VarId scores = ad::scale(t, ad::matmul_nt(t, qh, kh), scale);
    ad::VarId p = ad::softmax_rows(t, scores, key_valid);
    ctx.push_back(ad::matmul(t, p, vh));
  }
  return ctx.size() == 1 ? ctx[0] : ad::hstack(t, ctx);
}

}  // namespace

PooledCohorts HcaimModel::pool_cohorts(ad::Tape& t, const SemanticID& predicted,
                                       const SemanticIDTable& table, const CohortIndex& index,
                                       const ItemEmbeddingRef& items,
                                       const FallbackRef& fallback,
                                       const CohortConfig& cfg) const {
  if (cfg.cap < 1) throw std::invalid_argument("pool_cohorts: cap must be >= 1");
  const Index n_levels = static_cast<Index>(predicted.levels.size());
  if (n_levels < 2) throw std::invalid_argument("pool_cohorts: need at least two levels");
  if (!items.rows || items.param < 0) throw std::invalid_argument("pool_cohorts: no item table");

  PooledCohorts out;
  std::vector<ad::VarId> rows;
  for (Index n = 0; n + 1 < n_levels; ++n) {
    const int code = predicted.levels[static_cast<std::size_t>(n)];
    std::vector<std::string> members;
    if (cfg.prefix_mode) {
      for (const auto& [item, id] : table.by_item) {
        bool match = true;
        for (Index j = 0; j <= n && match; ++j) {
          match = id.levels[static_cast<std::size_t>(j)] ==
                  predicted.levels[static_cast<std::size_t>(j)];
        }
        if (match) members.push_back(item);
      }
    } else {
      if (n >= index.levels() || code < 0 ||
          code >= static_cast<int>(index.cohorts[static_cast<std::size_t>(n)].size())) {
        throw std::out_of_range("pool_cohorts: codeword outside the cohort index");
      }
      members = index.members(n, code);
    }

    if (static_cast<Index>(members.size()) > cfg.cap) {
      Rng rng = substream(cfg.seed, "cohort_sample",
                          {static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(code)});
      // Partial Fisher-Yates: the first `cap` slots become the sample.
      for (Index i = 0; i < cfg.cap; ++i) {
        const Index j = i + static_cast<Index>(rng.uniform_index(
                                static_cast<std::size_t>(members.size()) -
                                static_cast<std::size_t>(i)));
        std::swap(members[static_cast<std::size_t>(i)], members[static_cast<std::size_t>(j)]);
      }
      members.resize(static_cast<std::size_t>(cfg.cap));
    }

    if (members.empty()) {
      if (!fallback.gcfg || fallback.token_emb < 0) {
        throw std::invalid_argument("pool_cohorts: empty cohort and no fallback table");
      }
      const Index tok = fallback.gcfg->level_token(n, code);
      ad::VarId emb = ad::gather_rows(t, t.param(fallback.token_emb), {tok});
      rows.push_back(fallback_.apply(t, emb));
      out.member_counts.push_back(0);
      ++out.fallback_levels;
      continue;
    }

    std::vector<Index> idx;
    idx.reserve(members.size());
    for (const auto& item : members) {
      auto it = items.rows->find(item);
      if (it == items.rows->end()) {
        throw std::runtime_error("pool_cohorts: item '" + item + "' has no embedding row");
      }
      idx.push_back(it->second);
    }
    ad::VarId member_emb = ad::gather_rows(t, t.param(items.param), std::move(idx));
    const Real inv = 1.0 / static_cast<Real>(members.size());
    ad::VarId ones = t.input(Mat::Constant(1, static_cast<Index>(members.size()), inv));
    rows.push_back(ad::matmul(t, ones, member_emb));
    out.member_counts.push_back(static_cast<Index>(members.size()));
  }
  out.e_c = ad::vstack(t, rows);
  return out;
}

ad::VarId HcaimModel::refine_intent(ad::Tape& t, ad::VarId e_c, ad::VarId h_enc,
                                    const std::vector<std::uint8_t>& mask) const {
  return attend(t, e_c, h_enc, refine_q_, refine_k_, refine_v_, mask, heads_, d_);
}

ad::VarId HcaimModel::target_attend(ad::Tape& t, ad::VarId e_v, ad::VarId e_r) const {
  return attend(t, e_v, e_r, target_q_, target_k_, target_v_, {}, heads_, d_);
}

ad::VarId HcaimModel::aggregate_intent(ad::Tape& t, IntentMode mode, ad::VarId e_c,
                                       ad::VarId h_enc, const std::vector<std::uint8_t>& mask,
                                       ad::VarId e_v) const {
  switch (mode) {
    case IntentMode::hierarchical:
      return target_attend(t, e_v, refine_intent(t, e_c, h_enc, mask));
    case IntentMode::intent_mean: {
      const Index n = t.value(e_c).rows();
      ad::VarId ones = t.input(Mat::Constant(1, n, 1.0 / static_cast<Real>(n)));
      return mean_.apply(t, ad::matmul(t, ones, e_c));
    }
    case IntentMode::target_intent:
      return target_attend(t, e_v, e_c);
  }
  throw std::logic_error("aggregate_intent: bad mode");
}

}  // namespace genci
