#pragma once

#include "genci/corpus.hpp"
#include "genci/nn.hpp"
#include "genci/types.hpp"

#include <map>
#include <string>
#include <vector>

namespace genci {

struct CodebookSet {
  std::vector<Mat> codebooks;  // one K x d_code matrix per level

  Index levels() const { return static_cast<Index>(codebooks.size()); }
  Index codewords() const { return codebooks.empty() ? 0 : codebooks[0].rows(); }
  Index dim() const { return codebooks.empty() ? 0 : codebooks[0].cols(); }
};

struct QuantizeResult {
  std::vector<int> indices;  // z_1 .. z_N
  Vec final_residual;        // r^(N+1)
};

// Greedy nearest codeword per level; ties go to the lowest index.
QuantizeResult residual_quantize(const Vec& v, const CodebookSet& cb);

// Sum of the chosen codewords across levels.
Vec reconstruct(const std::vector<int>& indices, const CodebookSet& cb);

struct RqvaeConfig {
  Index levels = 3;
  Index codebook_size = 256;
  Index d_code = 32;
  int epochs = 20;
  Index batch_size = 256;
  Real learning_rate = 1e-3;
  Real beta = 0.25;  // weight on commitment + codebook terms
  std::uint64_t seed = 1;
};

struct RQVAEModel {
  Index in_dim = 0;
  Index d_code = 0;
  nn::Mlp encoder;  // in_dim -> 2 d_code -> 2 d_code -> d_code
  nn::Mlp decoder;  // mirror image
  CodebookSet codebooks;

  Vec encode(const Vec& x) const;
  Vec decode(const Vec& z) const;
};

// Straight-through trained residual VQ-VAE with k-means codebook warmup and
// per-epoch dead codeword reinitialization.
RQVAEModel train_rqvae(const EmbeddingTable& embeddings, const RqvaeConfig& config);

Real reconstruction_mse(const RQVAEModel& model, const EmbeddingTable& embeddings);

struct SemanticID {
  std::vector<int> levels;
  int collision_index = 0;

  bool operator==(const SemanticID& o) const {
    return levels == o.levels && collision_index == o.collision_index;
  }
  // levels with the collision index appended; the key used everywhere
  std::vector<int> full() const;
};

struct SemanticIDTable {
  Index levels = 0;
  Index codebook_size = 0;
  Index collision_capacity = 0;
  std::map<std::string, SemanticID> by_item;
  std::map<std::vector<int>, std::string> by_id;  // keyed by SemanticID::full()
};

// Collision indices are dense per level tuple, assigned in lexicographic
// item id order. Groups larger than the collision capacity are an error.
SemanticIDTable assign_semantic_ids(const EmbeddingTable& embeddings, const RQVAEModel& model,
                                    Index collision_capacity = 256);

void write_semantic_ids(const std::string& path, const SemanticIDTable& table);
SemanticIDTable read_semantic_ids(const std::string& path);

struct CohortIndex {
  // cohorts[n][k] = item ids sharing codeword k at level n, sorted
  std::vector<std::vector<std::vector<std::string>>> cohorts;

  Index levels() const { return static_cast<Index>(cohorts.size()); }
  const std::vector<std::string>& members(Index level, Index codeword) const {
    return cohorts[static_cast<std::size_t>(level)][static_cast<std::size_t>(codeword)];
  }
};

CohortIndex build_cohort_index(const SemanticIDTable& table);

// Prefix tree over full semantic id paths (levels then collision index).
class IDTrie {
 public:
  explicit IDTrie(const SemanticIDTable& table);

  // Legal continuations of a prefix, sorted ascending; nullptr when the
  // prefix is not in the corpus. A complete path returns an empty list.
  const std::vector<int>* valid_next(const std::vector<int>& prefix) const;
  bool is_terminal(const std::vector<int>& path) const;
  std::size_t path_count() const { return paths_; }

 private:
  struct Node {
    std::map<int, int> children;
    std::vector<int> next;  // sorted child tokens
    bool terminal = false;
  };
  const Node* walk(const std::vector<int>& prefix) const;
  std::vector<Node> nodes_;
  std::size_t paths_ = 0;
};

}  // namespace genci
