#pragma once

#include "genci/autodiff.hpp"
#include "genci/rng.hpp"
#include "genci/types.hpp"

#include <string>
#include <vector>

namespace genci::nn {

// Fan-in is rows, fan-out is cols; activations are row vectors (y = x W).
Mat xavier_uniform(Index rows, Index cols, Rng& rng);

// Plain value-space gelu, same tanh form the tape op uses.
Mat gelu_value(const Mat& x);

struct AdamConfig {
  Real lr = 1e-3;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
};

class Adam {
 public:
  Adam(const ad::ParamStore& params, AdamConfig cfg);
  void step(ad::ParamStore& params, const ad::GradStore& grads);
  void set_lr(Real lr) { cfg_.lr = lr; }
  Real lr() const { return cfg_.lr; }
  long steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<Mat> m_;
  std::vector<Mat> v_;
  long t_ = 0;
};

struct Linear {
  int w = -1;
  int b = -1;  // -1 when the layer has no bias

  static Linear create(ad::ParamStore& ps, const std::string& name, Index in, Index out,
                       Rng& rng, bool bias = true);
  ad::VarId apply(ad::Tape& t, ad::VarId x) const;
  Mat apply_value(const ad::ParamStore& ps, const Mat& x) const;
};

// Learned gain RMS norm over rows.
struct RmsNorm {
  int gain = -1;
  static RmsNorm create(ad::ParamStore& ps, const std::string& name, Index dim);
  ad::VarId apply(ad::Tape& t, ad::VarId x) const;
};

// Multi-head attention. The output projection is optional so that a single
// head reduces to the bare Softmax(QK^T/sqrt(d))V form.
struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  bool has_out = true;
  Index heads = 1;
  Index d_model = 0;

  static MultiHeadAttention create(ad::ParamStore& ps, const std::string& name, Index d_model,
                                   Index heads, Rng& rng, bool out_proj = true,
                                   bool bias = false);
  // key_valid masks key positions; causal restricts query i to keys <= i + offset.
  ad::VarId apply(ad::Tape& t, ad::VarId queries, ad::VarId keys, ad::VarId values,
                  const std::vector<std::uint8_t>& key_valid, bool causal = false,
                  Index causal_offset = 0) const;
};

// Dropout with one private stream per (seed, instance tag, site). Skipping a
// site never shifts the draws of another, which keeps ablations bit-exact.
struct DropoutPlan {
  Real p = 0.0;
  bool active = false;
  std::uint64_t seed = 0;
  std::uint64_t instance_tag = 0;

  ad::VarId apply(ad::Tape& t, ad::VarId x, std::uint64_t site) const {
    if (!active || p <= 0.0) return x;
    Rng rng = substream(seed, "dropout", {instance_tag, site});
    return ad::dropout(t, x, p, rng);
  }
};

// Simple value-space perceptron used where no gradients are needed.
struct Mlp {
  std::vector<Mat> weights;
  std::vector<Mat> biases;  // 1 x out rows
};
Mat mlp_forward(const Mlp& mlp, const Mat& x);  // gelu between layers, linear output

}  // namespace genci::nn
