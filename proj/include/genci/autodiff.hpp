#pragma once

#include "genci/rng.hpp"
#include "genci/types.hpp"

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace genci::ad {

// Named parameter tensors. Values live here; gradients live in GradStore so
// that worker threads can accumulate into private sinks and the trainer can
// reduce them in a fixed order.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Mat value;
  };

  int add(std::string name, Mat init);
  int find(std::string_view name) const;  // -1 if absent

  Mat& value(int id) { return entries_[static_cast<std::size_t>(id)].value; }
  const Mat& value(int id) const { return entries_[static_cast<std::size_t>(id)].value; }
  const std::string& name(int id) const { return entries_[static_cast<std::size_t>(id)].name; }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }

  // Total elements, for diagnostics.
  std::size_t parameter_count() const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> by_name_;
};

class GradStore {
 public:
  GradStore() = default;
  explicit GradStore(const ParamStore& store);

  void reset();
  void accumulate(const GradStore& other);
  Mat& grad(int id) { return grads_[static_cast<std::size_t>(id)]; }
  const Mat& grad(int id) const { return grads_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<Mat> grads_;
};

using VarId = int;

// Reverse-mode tape over dense matrices. Ops append nodes; backward() walks
// the tape once in reverse. Construction order is the topological order.
class Tape {
 public:
  Tape(const ParamStore* params, GradStore* sink, bool grad_enabled = true)
      : params_(params), sink_(sink), grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  VarId input(Mat v);
  // Leaf bound to a parameter; memoized so one tape references each
  // parameter through a single node.
  VarId param(int param_id);

  const Mat& value(VarId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  Mat& grad(VarId id) { return nodes_[static_cast<std::size_t>(id)].grad; }

  // Adds `g` into the node's gradient, allocating on first touch.
  void add_grad(VarId id, const Mat& g);
  bool has_grad(VarId id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() != 0; }

  VarId make_node(Mat value, std::function<void(Tape&, VarId)> back);

  // Seeds d(root)/d(root) = 1 (root must be 1x1) and propagates. Parameter
  // gradients are flushed into the sink.
  void backward(VarId root);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::function<void(Tape&, VarId)> back;
    int param_id = -1;
  };
  const ParamStore* params_;
  GradStore* sink_;
  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<int, VarId> param_leaves_;
};

// ---- elementwise / arithmetic ----
VarId add(Tape& t, VarId a, VarId b);
VarId sub(Tape& t, VarId a, VarId b);
VarId cmul(Tape& t, VarId a, VarId b);
VarId scale(Tape& t, VarId a, Real s);
VarId square(Tape& t, VarId a);
VarId gelu(Tape& t, VarId a);
VarId sigmoid(Tape& t, VarId a);

// ---- linear algebra ----
VarId matmul(Tape& t, VarId a, VarId b);     // A * B
VarId matmul_nt(Tape& t, VarId a, VarId b);  // A * B^T

// ---- shape ----
VarId hstack(Tape& t, const std::vector<VarId>& parts);
VarId vstack(Tape& t, const std::vector<VarId>& parts);
VarId slice_cols(Tape& t, VarId a, Index start, Index n);
VarId row(Tape& t, VarId a, Index i);
VarId gather_rows(Tape& t, VarId table, std::vector<Index> idx);
VarId add_rowvec(Tape& t, VarId a, VarId rv);  // broadcast a 1xC row over all rows

// ---- reductions ----
VarId sum_all(Tape& t, VarId a);   // 1x1
VarId mean_all(Tape& t, VarId a);  // 1x1
VarId rowsum(Tape& t, VarId a);    // Rx1

// ---- normalization / attention ----
VarId rmsnorm_rows(Tape& t, VarId x, VarId gain, Real eps = 1e-6);
// Row-wise softmax with an optional key validity mask and optional causal
// restriction (query row i may attend key j only when j <= i + causal_offset).
// Masked entries come out exactly zero. A fully masked row is an error.
VarId softmax_rows(Tape& t, VarId scores, const std::vector<std::uint8_t>& key_valid,
                   bool causal = false, Index causal_offset = 0);
// Inverted dropout; mask drawn from `rng` at construction time.
VarId dropout(Tape& t, VarId a, Real p, Rng& rng);

// ---- losses ----
// Mean cross-entropy over rows of `logits` against integer targets.
VarId cross_entropy_rows(Tape& t, VarId logits, std::vector<int> targets);
// Sum over rows of the stable logit-form BCE; caller scales by 1/batch.
VarId bce_with_logits_sum(Tape& t, VarId logits, Vec labels);

}  // namespace genci::ad
