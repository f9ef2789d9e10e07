#include "genci/ctrhead.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace genci {

FeatureEmbeddings FeatureEmbeddings::create(ad::ParamStore& ps, const std::string& prefix,
                                            std::vector<FieldSpec> fields, Index dim,
                                            Rng& rng) {
  if (fields.empty()) throw std::invalid_argument("FeatureEmbeddings: no fields");
  FeatureEmbeddings e;
  e.dim_ = dim;
  for (auto& spec : fields) {
    Field f;
    Index next = 1;  // row 0 is OOV
    for (const auto& v : spec.vocab) {
      if (!f.rows.emplace(v, next).second) {
        throw std::invalid_argument("FeatureEmbeddings: duplicate vocab entry '" + v +
                                    "' in field '" + spec.name + "'");
      }
      ++next;
    }
    f.table = ps.add(prefix + ".field." + spec.name,
                     nn::xavier_uniform(next, dim, rng));
    f.spec = std::move(spec);
    e.fields_.push_back(std::move(f));
  }
  return e;
}

std::vector<FieldSpec> FeatureEmbeddings::fields() const {
  std::vector<FieldSpec> specs;
  specs.reserve(fields_.size());
  for (const auto& f : fields_) specs.push_back(f.spec);
  return specs;
}

Index FeatureEmbeddings::user_width() const {
  Index n = 0;
  for (const auto& f : fields_) n += f.spec.side == FieldSpec::Side::user ? dim_ : 0;
  return n;
}

Index FeatureEmbeddings::item_width() const {
  Index n = 0;
  for (const auto& f : fields_) n += f.spec.side == FieldSpec::Side::item ? dim_ : 0;
  return n;
}

const FeatureEmbeddings::Field& FeatureEmbeddings::field(const std::string& name) const {
  for (const auto& f : fields_) {
    if (f.spec.name == name) return f;
  }
  throw std::invalid_argument("FeatureEmbeddings: unregistered field '" + name + "'");
}

int FeatureEmbeddings::table_param(const std::string& name) const { return field(name).table; }

const std::map<std::string, Index>& FeatureEmbeddings::vocab_rows(
    const std::string& name) const {
  return field(name).rows;
}

Index FeatureEmbeddings::row_of(const std::string& name, const std::string& value) const {
  const Field& f = field(name);
  auto it = f.rows.find(value);
  if (it == f.rows.end()) {
    ++oov_hits_;
    return 0;
  }
  return it->second;
}

std::string FeatureEmbeddings::field_value(const LabeledInstance& inst, const FieldSpec& spec) {
  if (spec.name == "user") return inst.user_id;
  if (spec.name == "item") return inst.target_item_id;
  auto it = inst.context.find(spec.name);
  return it == inst.context.end() ? std::string() : it->second;
}

std::vector<Index> FeatureEmbeddings::batch_rows(const Field& f,
                                                 const std::vector<LabeledInstance>& data,
                                                 const std::vector<std::size_t>& idx) const {
  std::vector<Index> rows;
  rows.reserve(idx.size());
  for (std::size_t i : idx) {
    rows.push_back(row_of(f.spec.name, field_value(data.at(i), f.spec)));
  }
  return rows;
}

std::vector<Index> FeatureEmbeddings::rows_for(const std::string& name,
                                               const std::vector<LabeledInstance>& data,
                                               const std::vector<std::size_t>& idx) const {
  return batch_rows(field(name), data, idx);
}

std::pair<ad::VarId, ad::VarId> FeatureEmbeddings::embed_batch(
    ad::Tape& t, const std::vector<LabeledInstance>& data,
    const std::vector<std::size_t>& idx) const {
  std::vector<ad::VarId> user_parts, item_parts;
  for (const auto& f : fields_) {
    ad::VarId part = ad::gather_rows(t, t.param(f.table), batch_rows(f, data, idx));
    (f.spec.side == FieldSpec::Side::user ? user_parts : item_parts).push_back(part);
  }
  if (user_parts.empty() || item_parts.empty()) {
    throw std::invalid_argument("FeatureEmbeddings: need fields on both sides");
  }
  auto cat = [&](std::vector<ad::VarId>& parts) {
    return parts.size() == 1 ? parts[0] : ad::hstack(t, parts);
  };
  return {cat(user_parts), cat(item_parts)};
}

std::pair<ad::VarId, ad::VarId> FeatureEmbeddings::embed(ad::Tape& t,
                                                         const LabeledInstance& inst) const {
  std::vector<LabeledInstance> one{inst};
  return embed_batch(t, one, {0});
}

ad::VarId FeatureEmbeddings::embed_item_id(ad::Tape& t, const std::string& item) const {
  const Field& f = field("item");
  return ad::gather_rows(t, t.param(f.table), {row_of("item", item)});
}

ad::VarId FeatureEmbeddings::embed_item_ids(ad::Tape& t,
                                            const std::vector<LabeledInstance>& data,
                                            const std::vector<std::size_t>& idx) const {
  const Field& f = field("item");
  return ad::gather_rows(t, t.param(f.table), batch_rows(f, data, idx));
}

CtrModel CtrModel::create(ad::ParamStore& ps, const CtrConfig& cfg, Index user_width,
                          Index item_width, Rng& rng) {
  CtrModel m;
  m.in_width_ = cfg.d_model + cfg.d_intent + user_width + item_width;
  Index in = m.in_width_;
  int layer = 0;
  for (Index h : cfg.hidden) {
    m.layers_.push_back(
        nn::Linear::create(ps, "ctr.fusion.l" + std::to_string(layer++), in, h, rng));
    in = h;
  }
  m.layers_.push_back(nn::Linear::create(ps, "ctr.fusion.out", in, 1, rng));
  return m;
}

ad::VarId CtrModel::fusion_logit(ad::Tape& t, ad::VarId h_lti, ad::VarId h_sti, ad::VarId e_u,
                                 ad::VarId e_v) const {
  ad::VarId x = ad::hstack(t, {h_lti, h_sti, e_u, e_v});
  if (t.value(x).cols() != in_width_) {
    throw std::invalid_argument("fusion_logit: input width " +
                                std::to_string(t.value(x).cols()) + ", expected " +
                                std::to_string(in_width_));
  }
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    x = ad::gelu(t, layers_[i].apply(t, x));
  }
  return layers_.back().apply(t, x);
}

ad::VarId CtrModel::predict(ad::Tape& t, ad::VarId h_lti, ad::VarId h_sti, ad::VarId e_u,
                            ad::VarId e_v) const {
  return ad::sigmoid(t, fusion_logit(t, h_lti, h_sti, e_u, e_v));
}

Real clamp_prob(Real p) { return std::clamp(p, 1e-7, 1.0 - 1e-7); }

Real predict_ctr(const ad::ParamStore& ps, const CtrModel& model, const Mat& h_lti,
                 const Mat& h_sti, const Mat& e_u, const Mat& e_v) {
  ad::Tape t(&ps, nullptr, false);
  ad::VarId p = model.predict(t, t.input(h_lti), t.input(h_sti), t.input(e_u), t.input(e_v));
  return clamp_prob(t.value(p)(0, 0));
}

Real bce_loss(const std::vector<Real>& preds, const std::vector<Real>& labels) {
  if (preds.size() != labels.size()) {
    throw std::invalid_argument("bce_loss: size mismatch");
  }
  if (preds.empty()) throw std::invalid_argument("bce_loss: empty batch");
  Real sum = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const Real p = clamp_prob(preds[i]);
    const Real y = labels[i];
    sum += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
  }
  return sum / static_cast<Real>(preds.size());
}

Real sr_loss(const std::vector<Real>& base_logits, const std::vector<Real>& our_logits) {
  if (base_logits.size() != our_logits.size()) {
    throw std::invalid_argument("sr_loss: size mismatch");
  }
  if (base_logits.empty()) throw std::invalid_argument("sr_loss: empty batch");
  Real sum = 0;
  for (std::size_t i = 0; i < base_logits.size(); ++i) {
    const Real d = our_logits[i] - base_logits[i];
    sum += d * d;
  }
  return sum / static_cast<Real>(base_logits.size());
}

ad::VarId sr_loss(ad::Tape& t, ad::VarId our_logits, const Vec& base_logits) {
  if (t.value(our_logits).rows() != base_logits.size() || t.value(our_logits).cols() != 1) {
    throw std::invalid_argument("sr_loss: logit shape mismatch");
  }
  ad::VarId base = t.input(Mat(base_logits));
  return ad::mean_all(t, ad::square(t, ad::sub(t, our_logits, base)));
}

void LossWeights::validate() const {
  if (!std::isfinite(mu) || !std::isfinite(eta) || mu < 0 || eta < 0) {
    throw std::invalid_argument("LossWeights: mu and eta must be finite and >= 0");
  }
}

Real joint_loss(Real l_ctr, Real l_ntp, Real l_sr, const LossWeights& w) {
  w.validate();
  if (!std::isfinite(l_ctr) || !std::isfinite(l_ntp) || !std::isfinite(l_sr)) {
    throw std::invalid_argument("joint_loss: non-finite component");
  }
  return l_ctr + w.mu * l_ntp + w.eta * l_sr;
}

DeepFmModel DeepFmModel::create(ad::ParamStore& ps, std::vector<FieldSpec> fields, Index dim,
                                std::vector<Index> hidden, Rng& rng) {
  DeepFmModel m;
  m.emb_ = FeatureEmbeddings::create(ps, "deepfm", std::move(fields), dim, rng);
  for (const auto& spec : m.emb_.fields()) {
    const Index rows = static_cast<Index>(spec.vocab.size()) + 1;
    m.linear_tables_.push_back(
        ps.add("deepfm.linear." + spec.name, nn::xavier_uniform(rows, 1, rng)));
  }
  m.bias_ = ps.add("deepfm.bias", Mat::Zero(1, 1));
  const Index n_fields = static_cast<Index>(m.linear_tables_.size());
  Index in = n_fields * dim;
  int layer = 0;
  for (Index h : hidden) {
    m.deep_.push_back(
        nn::Linear::create(ps, "deepfm.deep.l" + std::to_string(layer++), in, h, rng));
    in = h;
  }
  m.deep_.push_back(nn::Linear::create(ps, "deepfm.deep.out", in, 1, rng));
  return m;
}

ad::VarId DeepFmModel::logit_batch(ad::Tape& t, const std::vector<LabeledInstance>& data,
                                   const std::vector<std::size_t>& idx) const {
  auto [e_u, e_v] = emb_.embed_batch(t, data, idx);
  ad::VarId all = ad::hstack(t, {e_u, e_v});

  // First order: global bias plus one scalar per field value.
  ad::VarId linear = t.input(Mat::Zero(static_cast<Index>(idx.size()), 1));
  const auto specs = emb_.fields();
  for (std::size_t f = 0; f < linear_tables_.size(); ++f) {
    std::vector<Index> rows = emb_.rows_for(specs[f].name, data, idx);
    linear = ad::add(t, linear, ad::gather_rows(t, t.param(linear_tables_[f]), rows));
  }
  linear = ad::add_rowvec(t, linear, t.param(bias_));

  // Second order: 1/2 [(sum_f v_f)^2 - sum_f v_f^2], summed over dims.
  const Index dim = emb_.dim();
  ad::VarId sum_v = ad::slice_cols(t, all, 0, dim);
  ad::VarId sum_sq = ad::square(t, sum_v);
  const Index n_fields = t.value(all).cols() / dim;
  for (Index f = 1; f < n_fields; ++f) {
    ad::VarId vf = ad::slice_cols(t, all, f * dim, dim);
    sum_v = ad::add(t, sum_v, vf);
    sum_sq = ad::add(t, sum_sq, ad::square(t, vf));
  }
  ad::VarId fm = ad::scale(t, ad::rowsum(t, ad::sub(t, ad::square(t, sum_v), sum_sq)), 0.5);

  ad::VarId deep = all;
  for (std::size_t i = 0; i + 1 < deep_.size(); ++i) {
    deep = ad::gelu(t, deep_[i].apply(t, deep));
  }
  deep = deep_.back().apply(t, deep);

  return ad::add(t, ad::add(t, linear, fm), deep);
}

Vec DeepFmModel::logits_value(const ad::ParamStore& ps, const std::vector<LabeledInstance>& data,
                              const std::vector<std::size_t>& idx) const {
  ad::Tape t(&ps, nullptr, false);
  return t.value(logit_batch(t, data, idx)).col(0);
}

}  // namespace genci
