#include "genci/tokenizer.hpp"

#include "genci/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace genci {

namespace {

using nlohmann::json;

int nearest_codeword(const Vec& r, const Mat& codebook) {
  int best = 0;
  Real best_d = (r.transpose() - codebook.row(0)).squaredNorm();
  for (Index k = 1; k < codebook.rows(); ++k) {
    Real d = (r.transpose() - codebook.row(k)).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

}  // namespace

QuantizeResult residual_quantize(const Vec& v, const CodebookSet& cb) {
  if (!v.allFinite()) throw std::invalid_argument("residual_quantize: non-finite input");
  if (cb.levels() < 1) throw std::invalid_argument("residual_quantize: empty codebook set");
  QuantizeResult out;
  out.indices.reserve(static_cast<std::size_t>(cb.levels()));
  Vec r = v;
  for (const Mat& codebook : cb.codebooks) {
    int z = nearest_codeword(r, codebook);
    out.indices.push_back(z);
    r -= codebook.row(z).transpose();
  }
  out.final_residual = std::move(r);
  return out;
}

Vec reconstruct(const std::vector<int>& indices, const CodebookSet& cb) {
  if (static_cast<Index>(indices.size()) != cb.levels()) {
    throw std::invalid_argument("reconstruct: expected " + std::to_string(cb.levels()) +
                                " indices");
  }
  Vec sum = Vec::Zero(cb.dim());
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const Mat& codebook = cb.codebooks[n];
    if (indices[n] < 0 || indices[n] >= codebook.rows()) {
      throw std::out_of_range("reconstruct: index out of range at level " + std::to_string(n));
    }
    sum += codebook.row(indices[n]).transpose();
  }
  return sum;
}

Vec RQVAEModel::encode(const Vec& x) const {
  return nn::mlp_forward(encoder, x.transpose()).transpose();
}

Vec RQVAEModel::decode(const Vec& z) const {
  return nn::mlp_forward(decoder, z.transpose()).transpose();
}

namespace {

// Lloyd iterations with random distinct seeding; empty clusters are reseeded
// from a random point.
Mat kmeans(const Mat& points, Index k, Rng& rng, int iters = 10) {
  const Index n = points.rows();
  Mat centers(k, points.cols());
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  for (Index i = 0; i < k; ++i) {
    std::size_t j = static_cast<std::size_t>(i) + rng.uniform_index(static_cast<std::size_t>(n - i));
    std::swap(perm[static_cast<std::size_t>(i)], perm[j]);
    centers.row(i) = points.row(perm[static_cast<std::size_t>(i)]);
  }
  std::vector<int> assign(static_cast<std::size_t>(n), 0);
  for (int it = 0; it < iters; ++it) {
    for (Index i = 0; i < n; ++i) {
      assign[static_cast<std::size_t>(i)] = nearest_codeword(points.row(i).transpose(), centers);
    }
    Mat sums = Mat::Zero(k, points.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += points.row(i);
      counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])]++;
    }
    for (Index c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
      } else {
        centers.row(c) = points.row(static_cast<Index>(rng.uniform_index(
            static_cast<std::size_t>(n))));
      }
    }
  }
  return centers;
}

struct RqvaeNets {
  nn::Linear e1, e2, e3, d1, d2, d3;
  std::vector<int> codebook_params;

  ad::VarId encode(ad::Tape& t, ad::VarId x) const {
    ad::VarId h = ad::gelu(t, e1.apply(t, x));
    h = ad::gelu(t, e2.apply(t, h));
    return e3.apply(t, h);
  }
  ad::VarId decode(ad::Tape& t, ad::VarId z) const {
    ad::VarId h = ad::gelu(t, d1.apply(t, z));
    h = ad::gelu(t, d2.apply(t, h));
    return d3.apply(t, h);
  }
};

nn::Mlp extract_mlp(const ad::ParamStore& ps, const nn::Linear& a, const nn::Linear& b,
                    const nn::Linear& c) {
  nn::Mlp mlp;
  for (const nn::Linear* l : {&a, &b, &c}) {
    mlp.weights.push_back(ps.value(l->w));
    mlp.biases.push_back(ps.value(l->b));
  }
  return mlp;
}

}  // namespace

RQVAEModel train_rqvae(const EmbeddingTable& embeddings, const RqvaeConfig& config) {
  const Index n_items = static_cast<Index>(embeddings.vectors.size());
  if (n_items < config.codebook_size) {
    throw std::invalid_argument("train_rqvae: need at least K items (" +
                                std::to_string(config.codebook_size) + "), have " +
                                std::to_string(n_items));
  }
  if (config.levels < 1 || config.codebook_size < 2) {
    throw std::invalid_argument("train_rqvae: need N >= 1 and K >= 2");
  }
  const Index in_dim = embeddings.dim;
  const Index dc = config.d_code;
  const Index hidden = 2 * dc;

  Mat X(n_items, in_dim);
  {
    Index r = 0;
    for (const auto& [item, vec] : embeddings.vectors) X.row(r++) = vec.transpose();
  }

  ad::ParamStore ps;
  Rng init_rng = substream(config.seed, "rqvae_init");
  RqvaeNets nets;
  nets.e1 = nn::Linear::create(ps, "enc.l1", in_dim, hidden, init_rng);
  nets.e2 = nn::Linear::create(ps, "enc.l2", hidden, hidden, init_rng);
  nets.e3 = nn::Linear::create(ps, "enc.l3", hidden, dc, init_rng);
  nets.d1 = nn::Linear::create(ps, "dec.l1", dc, hidden, init_rng);
  nets.d2 = nn::Linear::create(ps, "dec.l2", hidden, hidden, init_rng);
  nets.d3 = nn::Linear::create(ps, "dec.l3", hidden, in_dim, init_rng);

  // Codebooks warm up from k-means over encoder outputs, level by level on
  // the residuals of the previous levels.
  {
    ad::Tape t(&ps, nullptr, false);
    Mat z = t.value(nets.encode(t, t.input(X)));
    Rng km_rng = substream(config.seed, "rqvae_kmeans");
    Mat residual = z;
    for (Index n = 0; n < config.levels; ++n) {
      Mat centers = kmeans(residual, config.codebook_size, km_rng);
      nets.codebook_params.push_back(
          ps.add("codebook." + std::to_string(n), centers));
      for (Index i = 0; i < residual.rows(); ++i) {
        int zi = nearest_codeword(residual.row(i).transpose(), centers);
        residual.row(i) -= centers.row(zi);
      }
    }
  }

  ad::GradStore grads(ps);
  nn::Adam opt(ps, {config.learning_rate, 0.9, 0.999, 1e-8});

  const Index batch = std::min<Index>(config.batch_size, n_items);
  std::vector<Index> order(static_cast<std::size_t>(n_items));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng shuffle_rng = substream(config.seed, "rqvae_shuffle", {static_cast<std::uint64_t>(epoch)});
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);
    }
    std::vector<std::vector<int>> used(static_cast<std::size_t>(config.levels),
                                       std::vector<int>(static_cast<std::size_t>(
                                                            config.codebook_size),
                                                        0));
    std::vector<Mat> last_residuals;  // per level, for dead codeword reseeding

    for (Index start = 0; start < n_items; start += batch) {
      const Index b = std::min(batch, n_items - start);
      Mat xb(b, in_dim);
      for (Index r = 0; r < b; ++r) xb.row(r) = X.row(order[static_cast<std::size_t>(start + r)]);

      ad::Tape t(&ps, &grads);
      ad::VarId x = t.input(xb);
      ad::VarId ze = nets.encode(t, x);
      const Mat& ze_v = t.value(ze);

      // Quantize the batch level by level, remembering choices and residuals.
      std::vector<std::vector<Index>> choice(static_cast<std::size_t>(config.levels));
      std::vector<Mat> residual_v;  // residual entering each level
      Mat r = ze_v;
      last_residuals.clear();
      for (Index n = 0; n < config.levels; ++n) {
        const Mat& cbv = ps.value(nets.codebook_params[static_cast<std::size_t>(n)]);
        residual_v.push_back(r);
        auto& ch = choice[static_cast<std::size_t>(n)];
        ch.resize(static_cast<std::size_t>(b));
        for (Index i = 0; i < b; ++i) {
          int zi = nearest_codeword(r.row(i).transpose(), cbv);
          ch[static_cast<std::size_t>(i)] = zi;
          used[static_cast<std::size_t>(n)][static_cast<std::size_t>(zi)]++;
          r.row(i) -= cbv.row(zi);
        }
        last_residuals.push_back(residual_v.back());
      }
      Mat zq_v = ze_v - r;  // sum of chosen codewords

      // Straight-through: decoder sees ze + const(zq - ze).
      ad::VarId zq = ad::add(t, ze, t.input(zq_v - ze_v));
      ad::VarId recon = ad::mean_all(t, ad::square(t, ad::sub(t, nets.decode(t, zq), x)));

      // Commitment pulls the encoder toward frozen codewords; the codebook
      // term pulls codewords toward frozen residuals.
      ad::VarId aux = t.input(Mat::Zero(1, 1));
      Mat partial = Mat::Zero(b, dc);
      for (Index n = 0; n < config.levels; ++n) {
        const auto& ch = choice[static_cast<std::size_t>(n)];
        std::vector<Index> idx(ch.begin(), ch.end());
        const Mat& cbv = ps.value(nets.codebook_params[static_cast<std::size_t>(n)]);
        Mat chosen_v(b, dc);
        for (Index i = 0; i < b; ++i) chosen_v.row(i) = cbv.row(idx[static_cast<std::size_t>(i)]);

        ad::VarId r_tape = ad::sub(t, ze, t.input(partial));
        ad::VarId commit = ad::mean_all(t, ad::square(t, ad::sub(t, r_tape, t.input(chosen_v))));
        ad::VarId chosen = ad::gather_rows(
            t, t.param(nets.codebook_params[static_cast<std::size_t>(n)]), idx);
        ad::VarId codebook_term = ad::mean_all(
            t, ad::square(t, ad::sub(t, t.input(residual_v[static_cast<std::size_t>(n)]), chosen)));
        aux = ad::add(t, aux, ad::add(t, commit, codebook_term));
        partial += chosen_v;
      }

      ad::VarId loss = ad::add(t, recon, ad::scale(t, aux, config.beta));
      const Real loss_v = t.value(loss)(0, 0);
      if (!std::isfinite(loss_v)) {
        throw std::runtime_error("train_rqvae: non-finite loss at epoch " +
                                 std::to_string(epoch) + ", batch offset " +
                                 std::to_string(start));
      }
      grads.reset();
      t.backward(loss);
      opt.step(ps, grads);
    }

    // Reseed codewords nothing chose this epoch from the last batch residuals.
    Rng dead_rng = substream(config.seed, "rqvae_dead", {static_cast<std::uint64_t>(epoch)});
    for (Index n = 0; n < config.levels; ++n) {
      const Mat& pool = last_residuals[static_cast<std::size_t>(n)];
      Mat& cbv = ps.value(nets.codebook_params[static_cast<std::size_t>(n)]);
      for (Index k = 0; k < config.codebook_size; ++k) {
        if (used[static_cast<std::size_t>(n)][static_cast<std::size_t>(k)] == 0) {
          cbv.row(k) = pool.row(static_cast<Index>(
              dead_rng.uniform_index(static_cast<std::size_t>(pool.rows()))));
        }
      }
    }
  }

  RQVAEModel model;
  model.in_dim = in_dim;
  model.d_code = dc;
  model.encoder = extract_mlp(ps, nets.e1, nets.e2, nets.e3);
  model.decoder = extract_mlp(ps, nets.d1, nets.d2, nets.d3);
  for (int pid : nets.codebook_params) model.codebooks.codebooks.push_back(ps.value(pid));
  return model;
}

Real reconstruction_mse(const RQVAEModel& model, const EmbeddingTable& embeddings) {
  Real sum = 0;
  for (const auto& [item, vec] : embeddings.vectors) {
    Vec ze = model.encode(vec);
    auto q = residual_quantize(ze, model.codebooks);
    Vec xh = model.decode(reconstruct(q.indices, model.codebooks));
    sum += (xh - vec).squaredNorm() / static_cast<Real>(vec.size());
  }
  return sum / static_cast<Real>(embeddings.vectors.size());
}

std::vector<int> SemanticID::full() const {
  std::vector<int> f = levels;
  f.push_back(collision_index);
  return f;
}

SemanticIDTable assign_semantic_ids(const EmbeddingTable& embeddings, const RQVAEModel& model,
                                    Index collision_capacity) {
  SemanticIDTable table;
  table.levels = model.codebooks.levels();
  table.codebook_size = model.codebooks.codewords();
  table.collision_capacity = collision_capacity;
  std::map<std::vector<int>, int> group_size;
  // std::map iteration gives lexicographic item order, which fixes the
  // collision numbering.
  for (const auto& [item, vec] : embeddings.vectors) {
    auto q = residual_quantize(model.encode(vec), model.codebooks);
    int c = group_size[q.indices]++;
    if (c >= collision_capacity) {
      std::string members;
      for (const auto& [other, id] : table.by_item) {
        if (id.levels == q.indices) members += (members.empty() ? "" : ", ") + other;
      }
      throw std::runtime_error("assign_semantic_ids: collision group for item " + item +
                               " exceeds capacity " + std::to_string(collision_capacity) +
                               " (members: " + members + ")");
    }
    SemanticID id;
    id.levels = q.indices;
    id.collision_index = c;
    table.by_id[id.full()] = item;
    table.by_item.emplace(item, std::move(id));
  }
  return table;
}

void write_semantic_ids(const std::string& path, const SemanticIDTable& table) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  for (const auto& [item, id] : table.by_item) {
    json j;
    j["item_id"] = item;
    j["levels"] = id.levels;
    j["collision_index"] = id.collision_index;
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

SemanticIDTable read_semantic_ids(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  SemanticIDTable table;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("item_id") || !j.contains("levels") ||
        !j.contains("collision_index")) {
      throw std::runtime_error(path + ": malformed record at line " + std::to_string(lineno));
    }
    SemanticID id;
    id.levels = j["levels"].get<std::vector<int>>();
    id.collision_index = j["collision_index"].get<int>();
    std::string item = j["item_id"].get<std::string>();
    if (table.levels == 0) table.levels = static_cast<Index>(id.levels.size());
    for (int z : id.levels) {
      table.codebook_size = std::max<Index>(table.codebook_size, z + 1);
    }
    table.collision_capacity =
        std::max<Index>(table.collision_capacity, id.collision_index + 1);
    table.by_id[id.full()] = item;
    table.by_item.emplace(std::move(item), std::move(id));
  }
  if (table.by_item.empty()) throw std::runtime_error(path + ": no records");
  return table;
}

CohortIndex build_cohort_index(const SemanticIDTable& table) {
  CohortIndex index;
  index.cohorts.assign(static_cast<std::size_t>(table.levels),
                       std::vector<std::vector<std::string>>(
                           static_cast<std::size_t>(table.codebook_size)));
  for (const auto& [item, id] : table.by_item) {
    for (std::size_t n = 0; n < id.levels.size(); ++n) {
      index.cohorts[n][static_cast<std::size_t>(id.levels[n])].push_back(item);
    }
  }
  // by_item iterates sorted, so each cohort is already in item id order.
  return index;
}

IDTrie::IDTrie(const SemanticIDTable& table) {
  nodes_.emplace_back();
  for (const auto& [item, id] : table.by_item) {
    int at = 0;
    for (int tok : id.full()) {
      auto [it, fresh] = nodes_[static_cast<std::size_t>(at)].children.try_emplace(
          tok, static_cast<int>(nodes_.size()));
      if (fresh) nodes_.emplace_back();
      at = it->second;
    }
    nodes_[static_cast<std::size_t>(at)].terminal = true;
    ++paths_;
  }
  for (auto& node : nodes_) {
    node.next.reserve(node.children.size());
    for (const auto& [tok, child] : node.children) node.next.push_back(tok);
  }
}

const IDTrie::Node* IDTrie::walk(const std::vector<int>& prefix) const {
  int at = 0;
  for (int tok : prefix) {
    const auto& children = nodes_[static_cast<std::size_t>(at)].children;
    auto it = children.find(tok);
    if (it == children.end()) return nullptr;
    at = it->second;
  }
  return &nodes_[static_cast<std::size_t>(at)];
}

const std::vector<int>* IDTrie::valid_next(const std::vector<int>& prefix) const {
  const Node* node = walk(prefix);
  return node ? &node->next : nullptr;
}

bool IDTrie::is_terminal(const std::vector<int>& path) const {
  const Node* node = walk(path);
  return node != nullptr && node->terminal;
}

}  // namespace genci
