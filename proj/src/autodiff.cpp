#include "genci/autodiff.hpp"

#include <cmath>
#include <utility>

namespace genci::ad {

namespace {

void check_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

}  // namespace

int ParamStore::add(std::string name, Mat init) {
  if (name.empty()) throw std::invalid_argument("ParamStore::add: empty name");
  if (by_name_.count(name)) {
    throw std::invalid_argument("ParamStore::add: duplicate parameter '" + name + "'");
  }
  int id = static_cast<int>(entries_.size());
  by_name_.emplace(name, id);
  entries_.push_back({std::move(name), std::move(init)});
  return id;
}

int ParamStore::find(std::string_view name) const {
  auto it = by_name_.find(std::string(name));
  return it == by_name_.end() ? -1 : it->second;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
  return n;
}

GradStore::GradStore(const ParamStore& store) {
  grads_.reserve(store.size());
  for (const auto& e : store.entries()) {
    grads_.push_back(Mat::Zero(e.value.rows(), e.value.cols()));
  }
}

void GradStore::reset() {
  for (auto& g : grads_) g.setZero();
}

void GradStore::accumulate(const GradStore& other) {
  if (other.grads_.size() != grads_.size()) {
    throw std::invalid_argument("GradStore::accumulate: size mismatch");
  }
  for (std::size_t i = 0; i < grads_.size(); ++i) grads_[i] += other.grads_[i];
}

VarId Tape::input(Mat v) { return make_node(std::move(v), nullptr); }

VarId Tape::param(int param_id) {
  if (!params_) throw std::logic_error("Tape::param: no ParamStore bound");
  auto it = param_leaves_.find(param_id);
  if (it != param_leaves_.end()) return it->second;
  VarId id = make_node(params_->value(param_id), nullptr);
  nodes_[static_cast<std::size_t>(id)].param_id = param_id;
  param_leaves_.emplace(param_id, id);
  return id;
}

void Tape::add_grad(VarId id, const Mat& g) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) {
    n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  }
  check_same_shape(n.grad, g, "Tape::add_grad");
  n.grad += g;
}

VarId Tape::make_node(Mat value, std::function<void(Tape&, VarId)> back) {
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<VarId>(nodes_.size() - 1);
}

void Tape::backward(VarId root) {
  if (!grad_enabled_) throw std::logic_error("Tape::backward: gradients disabled");
  Node& r = nodes_[static_cast<std::size_t>(root)];
  if (r.value.rows() != 1 || r.value.cols() != 1) {
    throw std::invalid_argument("Tape::backward: root must be 1x1");
  }
  add_grad(root, Mat::Ones(1, 1));
  for (VarId id = root; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.back && n.grad.size() != 0) n.back(*this, id);
  }
  // Flush parameter gradients in node order; each parameter owns one leaf.
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.param_id >= 0 && n.grad.size() != 0) {
      if (!sink_) throw std::logic_error("Tape::backward: parameter gradient with no sink");
      sink_->grad(n.param_id) += n.grad;
    }
  }
}

VarId add(Tape& t, VarId a, VarId b) {
  check_same_shape(t.value(a), t.value(b), "add");
  Mat v = t.value(a) + t.value(b);
  return t.make_node(std::move(v), [a, b](Tape& tt, VarId self) {
    const Mat& g = tt.grad(self);
    tt.add_grad(a, g);
    tt.add_grad(b, g);
  });
}

VarId sub(Tape& t, VarId a, VarId b) {
  check_same_shape(t.value(a), t.value(b), "sub");
  Mat v = t.value(a) - t.value(b);
  return t.make_node(std::move(v), [a, b](Tape& tt, VarId self) {
    const Mat& g = tt.grad(self);
    tt.add_grad(a, g);
    tt.add_grad(b, -g);
  });
}

VarId cmul(Tape& t, VarId a, VarId b) {
  check_same_shape(t.value(a), t.value(b), "cmul");
  Mat v = t.value(a).cwiseProduct(t.value(b));
  return t.make_node(std::move(v), [a, b](Tape& tt, VarId self) {
    const Mat& g = tt.grad(self);
    tt.add_grad(a, g.cwiseProduct(tt.value(b)));
    tt.add_grad(b, g.cwiseProduct(tt.value(a)));
  });
}

VarId scale(Tape& t, VarId a, Real s) {
  Mat v = t.value(a) * s;
  return t.make_node(std::move(v), [a, s](Tape& tt, VarId self) {
    tt.add_grad(a, tt.grad(self) * s);
  });
}

VarId square(Tape& t, VarId a) {
  Mat v = t.value(a).array().square();
  return t.make_node(std::move(v), [a](Tape& tt, VarId self) {
    tt.add_grad(a, (2.0 * tt.value(a).array() * tt.grad(self).array()).matrix());
  });
}

VarId gelu(Tape& t, VarId a) {
  // tanh form; smooth everywhere, which keeps finite difference checks honest.
  static const Real kC = std::sqrt(2.0 / M_PI);
  static const Real kA = 0.044715;
  const Mat& x = t.value(a);
  Mat u = (kC * (x.array() + kA * x.array().cube())).matrix();
  Mat th = u.array().tanh().matrix();
  Mat v = (0.5 * x.array() * (1.0 + th.array())).matrix();
  return t.make_node(std::move(v), [a, th = std::move(th)](Tape& tt, VarId self) {
    const Mat& x = tt.value(a);
    Eigen::ArrayXXd sech2 = 1.0 - th.array().square();
    Eigen::ArrayXXd du = kC * (1.0 + 3.0 * kA * x.array().square());
    Eigen::ArrayXXd dx = 0.5 * (1.0 + th.array()) + 0.5 * x.array() * sech2 * du;
    tt.add_grad(a, (tt.grad(self).array() * dx).matrix());
  });
}

VarId sigmoid(Tape& t, VarId a) {
  const Mat& x = t.value(a);
  Mat s(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) {
    Real z = x(i);
    s(i) = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  Mat v = s;
  return t.make_node(std::move(v), [a, s = std::move(s)](Tape& tt, VarId self) {
    tt.add_grad(a, (tt.grad(self).array() * s.array() * (1.0 - s.array())).matrix());
  });
}

VarId matmul(Tape& t, VarId a, VarId b) {
  if (t.value(a).cols() != t.value(b).rows()) {
    throw std::invalid_argument("matmul: inner dimension mismatch");
  }
  Mat v = t.value(a) * t.value(b);
  return t.make_node(std::move(v), [a, b](Tape& tt, VarId self) {
    const Mat& g = tt.grad(self);
    tt.add_grad(a, g * tt.value(b).transpose());
    tt.add_grad(b, tt.value(a).transpose() * g);
  });
}

VarId matmul_nt(Tape& t, VarId a, VarId b) {
  if (t.value(a).cols() != t.value(b).cols()) {
    throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  }
  Mat v = t.value(a) * t.value(b).transpose();
  return t.make_node(std::move(v), [a, b](Tape& tt, VarId self) {
    const Mat& g = tt.grad(self);
    tt.add_grad(a, g * tt.value(b));
    tt.add_grad(b, g.transpose() * tt.value(a));
  });
}

VarId hstack(Tape& t, const std::vector<VarId>& parts) {
  if (parts.empty()) throw std::invalid_argument("hstack: no parts");
  Index rows = t.value(parts[0]).rows();
  Index cols = 0;
  for (VarId p : parts) {
    if (t.value(p).rows() != rows) throw std::invalid_argument("hstack: row mismatch");
    cols += t.value(p).cols();
  }
  Mat v(rows, cols);
  Index at = 0;
  for (VarId p : parts) {
    v.middleCols(at, t.value(p).cols()) = t.value(p);
    at += t.value(p).cols();
  }
  return t.make_node(std::move(v), [parts](Tape& tt, VarId self) {
    const Mat& g = tt.grad(self);
    Index at = 0;
    for (VarId p : parts) {
      Index w = tt.value(p).cols();
      tt.add_grad(p, g.middleCols(at, w));
      at += w;
    }
  });
}

VarId vstack(Tape& t, const std::vector<VarId>& parts) {
  if (parts.empty()) throw std::invalid_argument("vstack: no parts");
  Index cols = t.value(parts[0]).cols();
  Index rows = 0;
  for (VarId p : parts) {
    if (t.value(p).cols() != cols) throw std::invalid_argument("vstack: column mismatch");
    rows += t.value(p).rows();
  }
  Mat v(rows, cols);
  Index at = 0;
  for (VarId p : parts) {
    v.middleRows(at, t.value(p).rows()) = t.value(p);
    at += t.value(p).rows();
  }
  return t.make_node(std::move(v), [parts](Tape& tt, VarId self) {
    const Mat& g = tt.grad(self);
    Index at = 0;
    for (VarId p : parts) {
      Index h = tt.value(p).rows();
      tt.add_grad(p, g.middleRows(at, h));
      at += h;
    }
  });
}

VarId slice_cols(Tape& t, VarId a, Index start, Index n) {
  const Mat& x = t.value(a);
  if (start < 0 || n < 0 || start + n > x.cols()) {
    throw std::invalid_argument("slice_cols: out of range");
  }
  Mat v = x.middleCols(start, n);
  return t.make_node(std::move(v), [a, start, n](Tape& tt, VarId self) {
    Mat g = Mat::Zero(tt.value(a).rows(), tt.value(a).cols());
    g.middleCols(start, n) = tt.grad(self);
    tt.add_grad(a, g);
  });
}

VarId row(Tape& t, VarId a, Index i) {
  const Mat& x = t.value(a);
  if (i < 0 || i >= x.rows()) throw std::invalid_argument("row: out of range");
  Mat v = x.row(i);
  return t.make_node(std::move(v), [a, i](Tape& tt, VarId self) {
    Mat g = Mat::Zero(tt.value(a).rows(), tt.value(a).cols());
    g.row(i) = tt.grad(self);
    tt.add_grad(a, g);
  });
}

VarId gather_rows(Tape& t, VarId table, std::vector<Index> idx) {
  const Mat& x = t.value(table);
  Mat v(static_cast<Index>(idx.size()), x.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= x.rows()) {
      throw std::invalid_argument("gather_rows: index out of range");
    }
    v.row(static_cast<Index>(r)) = x.row(idx[r]);
  }
  return t.make_node(std::move(v), [table, idx = std::move(idx)](Tape& tt, VarId self) {
    const Mat& g = tt.grad(self);
    Mat acc = Mat::Zero(tt.value(table).rows(), tt.value(table).cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      acc.row(idx[r]) += g.row(static_cast<Index>(r));
    }
    tt.add_grad(table, acc);
  });
}

VarId add_rowvec(Tape& t, VarId a, VarId rv) {
  const Mat& x = t.value(a);
  const Mat& r = t.value(rv);
  if (r.rows() != 1 || r.cols() != x.cols()) {
    throw std::invalid_argument("add_rowvec: want 1x" + std::to_string(x.cols()));
  }
  Mat v = x.rowwise() + r.row(0);
  return t.make_node(std::move(v), [a, rv](Tape& tt, VarId self) {
    const Mat& g = tt.grad(self);
    tt.add_grad(a, g);
    tt.add_grad(rv, g.colwise().sum());
  });
}

VarId sum_all(Tape& t, VarId a) {
  Mat v(1, 1);
  v(0, 0) = t.value(a).sum();
  return t.make_node(std::move(v), [a](Tape& tt, VarId self) {
    Real g = tt.grad(self)(0, 0);
    tt.add_grad(a, Mat::Constant(tt.value(a).rows(), tt.value(a).cols(), g));
  });
}

VarId mean_all(Tape& t, VarId a) {
  Real inv = 1.0 / static_cast<Real>(t.value(a).size());
  Mat v(1, 1);
  v(0, 0) = t.value(a).sum() * inv;
  return t.make_node(std::move(v), [a, inv](Tape& tt, VarId self) {
    Real g = tt.grad(self)(0, 0) * inv;
    tt.add_grad(a, Mat::Constant(tt.value(a).rows(), tt.value(a).cols(), g));
  });
}

VarId rowsum(Tape& t, VarId a) {
  Mat v = t.value(a).rowwise().sum();
  return t.make_node(std::move(v), [a](Tape& tt, VarId self) {
    const Mat& g = tt.grad(self);
    tt.add_grad(a, g.replicate(1, tt.value(a).cols()));
  });
}

VarId rmsnorm_rows(Tape& t, VarId x, VarId gain, Real eps) {
  const Mat& xv = t.value(x);
  const Mat& gv = t.value(gain);
  if (gv.rows() != 1 || gv.cols() != xv.cols()) {
    throw std::invalid_argument("rmsnorm_rows: gain must be 1x" + std::to_string(xv.cols()));
  }
  Vec inv(xv.rows());
  for (Index i = 0; i < xv.rows(); ++i) {
    inv(i) = 1.0 / std::sqrt(xv.row(i).squaredNorm() / static_cast<Real>(xv.cols()) + eps);
  }
  Mat v = ((xv.array().colwise() * inv.array()).rowwise() * gv.row(0).array()).matrix();
  return t.make_node(std::move(v), [x, gain, inv = std::move(inv)](Tape& tt, VarId self) {
    const Mat& g = tt.grad(self);
    const Mat& xv = tt.value(x);
    const Mat& gv = tt.value(gain);
    Index cols = xv.cols();
    Mat gg = (g.array().rowwise() * gv.row(0).array()).matrix();  // dL/d(x * inv)
    Vec dot = (gg.array() * xv.array()).rowwise().sum().matrix();
    Mat dx = (gg.array().colwise() * inv.array()).matrix();
    dx.array() -= (xv.array().colwise() * (inv.array().cube() * dot.array())) /
                  static_cast<Real>(cols);
    tt.add_grad(x, dx);
    Mat xn = (xv.array().colwise() * inv.array()).matrix();
    tt.add_grad(gain, (g.array() * xn.array()).colwise().sum().matrix());
  });
}

VarId softmax_rows(Tape& t, VarId scores, const std::vector<std::uint8_t>& key_valid,
                   bool causal, Index causal_offset) {
  const Mat& s = t.value(scores);
  if (!key_valid.empty() && static_cast<Index>(key_valid.size()) != s.cols()) {
    throw std::invalid_argument("softmax_rows: mask size mismatch");
  }
  auto allowed = [&](Index i, Index j) {
    if (!key_valid.empty() && !key_valid[static_cast<std::size_t>(j)]) return false;
    if (causal && j > i + causal_offset) return false;
    return true;
  };
  Mat p = Mat::Zero(s.rows(), s.cols());
  for (Index i = 0; i < s.rows(); ++i) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (Index j = 0; j < s.cols(); ++j) {
      if (allowed(i, j) && s(i, j) > mx) mx = s(i, j);
    }
    if (!std::isfinite(mx)) {
      throw std::invalid_argument("softmax_rows: fully masked row " + std::to_string(i));
    }
    Real z = 0;
    for (Index j = 0; j < s.cols(); ++j) {
      if (allowed(i, j)) {
        p(i, j) = std::exp(s(i, j) - mx);
        z += p(i, j);
      }
    }
    p.row(i) /= z;
  }
  Mat v = p;
  return t.make_node(std::move(v), [scores, p = std::move(p)](Tape& tt, VarId self) {
    const Mat& g = tt.grad(self);
    Vec dot = (g.array() * p.array()).rowwise().sum().matrix();
    Mat ds = (p.array() * (g.array().colwise() - dot.array())).matrix();
    tt.add_grad(scores, ds);
  });
}

VarId dropout(Tape& t, VarId a, Real p, Rng& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
  const Mat& x = t.value(a);
  Mat m(x.rows(), x.cols());
  Real keep = 1.0 / (1.0 - p);
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = 0; j < x.cols(); ++j) {
      m(i, j) = rng.uniform() < p ? 0.0 : keep;
    }
  }
  Mat v = x.cwiseProduct(m);
  return t.make_node(std::move(v), [a, m = std::move(m)](Tape& tt, VarId self) {
    tt.add_grad(a, tt.grad(self).cwiseProduct(m));
  });
}

VarId cross_entropy_rows(Tape& t, VarId logits, std::vector<int> targets) {
  const Mat& z = t.value(logits);
  if (static_cast<Index>(targets.size()) != z.rows()) {
    throw std::invalid_argument("cross_entropy_rows: target count mismatch");
  }
  Mat p(z.rows(), z.cols());
  Real loss = 0;
  for (Index i = 0; i < z.rows(); ++i) {
    int ti = targets[static_cast<std::size_t>(i)];
    if (ti < 0 || ti >= z.cols()) {
      throw std::invalid_argument("cross_entropy_rows: target out of range");
    }
    Real mx = z.row(i).maxCoeff();
    Real lse = mx + std::log((z.row(i).array() - mx).exp().sum());
    loss += lse - z(i, ti);
    p.row(i) = (z.row(i).array() - lse).exp();
  }
  Real inv = 1.0 / static_cast<Real>(z.rows());
  Mat v(1, 1);
  v(0, 0) = loss * inv;
  return t.make_node(std::move(v),
                     [logits, p = std::move(p), targets = std::move(targets), inv](
                         Tape& tt, VarId self) {
                       Real g = tt.grad(self)(0, 0) * inv;
                       Mat dz = p * g;
                       for (Index i = 0; i < dz.rows(); ++i) {
                         dz(i, targets[static_cast<std::size_t>(i)]) -= g;
                       }
                       tt.add_grad(logits, dz);
                     });
}

VarId bce_with_logits_sum(Tape& t, VarId logits, Vec labels) {
  const Mat& z = t.value(logits);
  if (z.cols() != 1 || z.rows() != labels.size()) {
    throw std::invalid_argument("bce_with_logits_sum: want Nx1 logits matching labels");
  }
  Vec s(z.rows());
  Real loss = 0;
  for (Index i = 0; i < z.rows(); ++i) {
    Real zi = z(i, 0);
    // max(z,0) - z*y + log1p(exp(-|z|))
    loss += std::max(zi, 0.0) - zi * labels(i) + std::log1p(std::exp(-std::abs(zi)));
    s(i) = zi >= 0 ? 1.0 / (1.0 + std::exp(-zi)) : std::exp(zi) / (1.0 + std::exp(zi));
  }
  Mat v(1, 1);
  v(0, 0) = loss;
  return t.make_node(std::move(v), [logits, s = std::move(s), labels = std::move(labels)](
                                       Tape& tt, VarId self) {
    Real g = tt.grad(self)(0, 0);
    Mat dz = (s - labels) * g;
    tt.add_grad(logits, dz);
  });
}

}  // namespace genci::ad
