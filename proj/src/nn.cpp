#include "genci/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace genci::nn {

Mat xavier_uniform(Index rows, Index cols, Rng& rng) {
  const Real limit = std::sqrt(6.0 / static_cast<Real>(rows + cols));
  Mat m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(-limit, limit);
  }
  return m;
}

Mat gelu_value(const Mat& x) {
  static const Real kC = std::sqrt(2.0 / M_PI);
  static const Real kA = 0.044715;
  Eigen::ArrayXXd u = kC * (x.array() + kA * x.array().cube());
  return (0.5 * x.array() * (1.0 + u.tanh())).matrix();
}

Adam::Adam(const ad::ParamStore& params, AdamConfig cfg) : cfg_(cfg) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto& e : params.entries()) {
    m_.push_back(Mat::Zero(e.value.rows(), e.value.cols()));
    v_.push_back(Mat::Zero(e.value.rows(), e.value.cols()));
  }
}

void Adam::step(ad::ParamStore& params, const ad::GradStore& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw std::invalid_argument("Adam::step: store size mismatch");
  }
  ++t_;
  const Real c1 = 1.0 - std::pow(cfg_.beta1, static_cast<Real>(t_));
  const Real c2 = 1.0 - std::pow(cfg_.beta2, static_cast<Real>(t_));
  for (std::size_t i = 0; i < m_.size(); ++i) {
    const Mat& g = grads.grad(static_cast<int>(i));
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    Mat mhat = m_[i] / c1;
    Mat vhat = v_[i] / c2;
    params.value(static_cast<int>(i)).array() -=
        cfg_.lr * mhat.array() / (vhat.array().sqrt() + cfg_.eps);
  }
}

Linear Linear::create(ad::ParamStore& ps, const std::string& name, Index in, Index out,
                      Rng& rng, bool bias) {
  Linear l;
  l.w = ps.add(name + ".w", xavier_uniform(in, out, rng));
  if (bias) l.b = ps.add(name + ".b", Mat::Zero(1, out));
  return l;
}

ad::VarId Linear::apply(ad::Tape& t, ad::VarId x) const {
  ad::VarId y = ad::matmul(t, x, t.param(w));
  if (b >= 0) y = ad::add_rowvec(t, y, t.param(b));
  return y;
}

Mat Linear::apply_value(const ad::ParamStore& ps, const Mat& x) const {
  Mat y = x * ps.value(w);
  if (b >= 0) y.rowwise() += ps.value(b).row(0);
  return y;
}

RmsNorm RmsNorm::create(ad::ParamStore& ps, const std::string& name, Index dim) {
  RmsNorm n;
  n.gain = ps.add(name + ".gain", Mat::Ones(1, dim));
  return n;
}

ad::VarId RmsNorm::apply(ad::Tape& t, ad::VarId x) const {
  return ad::rmsnorm_rows(t, x, t.param(gain));
}

MultiHeadAttention MultiHeadAttention::create(ad::ParamStore& ps, const std::string& name,
                                              Index d_model, Index heads, Rng& rng,
                                              bool out_proj, bool bias) {
  if (d_model % heads != 0) {
    throw std::invalid_argument(name + ": d_model must be divisible by heads");
  }
  MultiHeadAttention a;
  a.heads = heads;
  a.d_model = d_model;
  a.has_out = out_proj;
  a.wq = Linear::create(ps, name + ".q", d_model, d_model, rng, bias);
  a.wk = Linear::create(ps, name + ".k", d_model, d_model, rng, bias);
  a.wv = Linear::create(ps, name + ".v", d_model, d_model, rng, bias);
  if (out_proj) a.wo = Linear::create(ps, name + ".o", d_model, d_model, rng, bias);
  return a;
}

ad::VarId MultiHeadAttention::apply(ad::Tape& t, ad::VarId queries, ad::VarId keys,
                                    ad::VarId values, const std::vector<std::uint8_t>& key_valid,
                                    bool causal, Index causal_offset) const {
  const Index d_head = d_model / heads;
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(d_head));
  ad::VarId q = wq.apply(t, queries);
  ad::VarId k = wk.apply(t, keys);
  ad::VarId v = wv.apply(t, values);
  std::vector<ad::VarId> ctx;
  ctx.reserve(static_cast<std::size_t>(heads));
  for (Index h = 0; h < heads; ++h) {
    ad::VarId qh = ad::slice_cols(t, q, h * d_head, d_head);
    ad::VarId kh = ad::slice_cols(t, k, h * d_head, d_head);
    ad::VarId vh = ad::slice_cols(t, v, h * d_head, d_head);
    ad::VarId scores = ad::scale(t, ad::matmul_nt(t, qh, kh), scale);
    ad::VarId p = ad::softmax_rows(t, scores, key_valid, causal, causal_offset);
    ctx.push_back(ad::matmul(t, p, vh));
  }
  ad::VarId out = ctx.size() == 1 ? ctx[0] : ad::hstack(t, ctx);
  if (has_out) out = wo.apply(t, out);
  return out;
}

Mat mlp_forward(const Mlp& mlp, const Mat& x) {
  if (mlp.weights.size() != mlp.biases.size() || mlp.weights.empty()) {
    throw std::invalid_argument("mlp_forward: malformed perceptron");
  }
  Mat h = x;
  for (std::size_t i = 0; i < mlp.weights.size(); ++i) {
    h = h * mlp.weights[i];
    h.rowwise() += mlp.biases[i].row(0);
    if (i + 1 < mlp.weights.size()) h = gelu_value(h);
  }
  return h;
}

}  // namespace genci::nn
