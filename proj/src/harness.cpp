#include "genci/harness.hpp"

#include "genci/io.hpp"
#include "genci/metrics.hpp"
#include "genci/nn.hpp"
#include "genci/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace genci {

namespace {

using nlohmann::json;

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(v[i - 1], v[rng.uniform_index(i)]);
  return v;
}

std::vector<Real> label_vec(const std::vector<LabeledInstance>& ins) {
  std::vector<Real> labels(ins.size());
  for (std::size_t i = 0; i < ins.size(); ++i) labels[i] = static_cast<Real>(ins[i].label);
  return labels;
}

std::optional<Real> safe_auc(const std::vector<Real>& scores, const std::vector<Real>& labels) {
  try {
    return auc(scores, labels);
  } catch (const std::invalid_argument&) {
    return std::nullopt;  // single-class group: undefined, not zero
  }
}

GroupMetrics group_metrics(std::string name, const std::vector<Real>& scores,
                           const std::vector<Real>& labels) {
  GroupMetrics g;
  g.name = std::move(name);
  g.count = scores.size();
  g.auc = safe_auc(scores, labels);
  if (!scores.empty()) g.logloss = logloss(scores, labels);
  return g;
}

json opt_json(const std::optional<Real>& v) { return v ? json(*v) : json(); }

CohortConfig cohort_config(const ExperimentConfig& cfg) {
  CohortConfig c;
  c.cap = cfg.model.cohort_cap;
  c.seed = cfg.train.seed;
  c.prefix_mode = cfg.model.cohort_prefix;
  return c;
}

void ensure_parent_dir(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
}

std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

RunPaths run_paths(const std::string& run_dir) {
  RunPaths p;
  p.dir = run_dir;
  const std::filesystem::path base(run_dir);
  p.config_snapshot = (base / "config_snapshot.json").string();
  p.semantic_ids = (base / "semantic_ids.txt").string();
  p.baseline_ckpt = (base / "baseline.ckpt").string();
  p.model_ckpt = (base / "model.ckpt").string();
  p.last_good_ckpt = (base / "last_good.ckpt").string();
  p.loss_log = (base / "loss_log.jsonl").string();
  p.metrics = (base / "metrics.json").string();
  return p;
}

void save_params(const std::string& path, const ad::ParamStore& ps) {
  io::NamedMatrices m;
  m.tensors.reserve(ps.size());
  for (const auto& e : ps.entries()) m.tensors.emplace_back(e.name, e.value);
  ensure_parent_dir(path);
  io::write_matrices(path, m);
}

void load_params(const std::string& path, ad::ParamStore& ps) {
  io::NamedMatrices m = io::read_matrices(path);
  if (m.tensors.size() != ps.size()) {
    throw std::runtime_error(path + ": checkpoint holds " + std::to_string(m.tensors.size()) +
                             " tensors, the model has " + std::to_string(ps.size()));
  }
  for (auto& [name, mat] : m.tensors) {
    const int id = ps.find(name);
    if (id < 0) throw std::runtime_error(path + ": unknown tensor '" + name + "'");
    Mat& dst = ps.value(id);
    if (dst.rows() != mat.rows() || dst.cols() != mat.cols()) {
      throw std::runtime_error(path + ": shape mismatch for '" + name + "'");
    }
    dst = std::move(mat);
  }
}

std::uint64_t params_fingerprint(const ad::ParamStore& ps) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& e : ps.entries()) {
    mix(e.name.data(), e.name.size());
    const Index dims[2] = {e.value.rows(), e.value.cols()};
    mix(dims, sizeof(dims));
    mix(e.value.data(), sizeof(Real) * static_cast<std::size_t>(e.value.size()));
  }
  return h;
}

std::vector<Mat> snapshot_values(const ad::ParamStore& ps) {
  std::vector<Mat> snap;
  snap.reserve(ps.size());
  for (const auto& e : ps.entries()) snap.push_back(e.value);
  return snap;
}

void restore_values(ad::ParamStore& ps, const std::vector<Mat>& snap) {
  if (snap.size() != ps.size()) {
    throw std::invalid_argument("restore_values: snapshot size mismatch");
  }
  for (std::size_t i = 0; i < snap.size(); ++i) ps.value(static_cast<int>(i)) = snap[i];
}

PreparedData prepare_data(const ExperimentConfig& cfg) {
  if (cfg.data.path.empty()) throw ConfigError("data.path is required");
  if (cfg.data.embeddings.empty()) throw ConfigError("data.embeddings is required");

  InteractionLog log = load_interactions(resolve_data_path(cfg.data.path),
                                         parse_log_format(cfg.data.format));
  PreparedData out;
  out.malformed_lines = log.malformed_lines;
  log = binarize_ratings(std::move(log), cfg.data.pos_threshold);
  out.dropped_records = log.dropped_records;
  if (cfg.data.k_core > 0) log = filter_k_core(std::move(log), cfg.data.k_core);
  if (log.records.empty()) throw std::runtime_error("prepare_data: no usable interactions");

  SplitLog split;
  if (cfg.data.split == "leave_one_out") {
    split = leave_one_out_split(log);
  } else {
    const int v = std::max(1, static_cast<int>(std::lround(cfg.data.valid_fraction * 100)));
    const int t = std::max(1, static_cast<int>(std::lround(cfg.data.test_fraction * 100)));
    split = chronological_split(log, {100 - v - t, v, t});
  }
  split = build_sequences(std::move(split), log, cfg.data.l_max, cfg.data.positives_only);
  if (cfg.data.sampled_negatives) add_sampled_negatives(split, cfg.train.seed);
  if (split.train.empty()) throw std::runtime_error("prepare_data: empty training split");

  if (!cfg.data.genres.empty()) out.genres = load_genres(resolve_data_path(cfg.data.genres));

  EmbeddingTable table = load_item_embeddings(resolve_data_path(cfg.data.embeddings), 0);
  out.embedding_fallbacks = ensure_embedding_coverage(table, split.item_vocab, cfg.tokenizer.seed,
                                                      cfg.data.min_embedding_coverage);
  // Keep corpus items only so ids, cohorts and the trie line up with the
  // CTR vocabulary.
  EmbeddingTable sub;
  sub.dim = table.dim;
  for (const auto& item : split.item_vocab) sub.vectors.emplace(item, table.vectors.at(item));
  out.item_embeddings = std::move(sub);
  out.split = std::move(split);
  return out;
}

TokenizerArtifacts fit_tokenizer(const ExperimentConfig& cfg, const PreparedData& data) {
  RQVAEModel model = train_rqvae(data.item_embeddings, cfg.tokenizer);
  SemanticIDTable table = assign_semantic_ids(data.item_embeddings, model, cfg.collision_capacity);
  const Real mse = reconstruction_mse(model, data.item_embeddings);
  CohortIndex cohorts = build_cohort_index(table);
  return TokenizerArtifacts(std::move(table), std::move(cohorts), mse);
}

std::vector<FieldSpec> default_fields(const SplitLog& split) {
  FieldSpec user;
  user.name = "user";
  user.side = FieldSpec::Side::user;
  user.vocab.assign(split.user_vocab.begin(), split.user_vocab.end());
  FieldSpec item;
  item.name = "item";
  item.side = FieldSpec::Side::item;
  item.vocab.assign(split.item_vocab.begin(), split.item_vocab.end());
  return {std::move(user), std::move(item)};
}

GenConfig gen_config(const ExperimentConfig& cfg) {
  GenConfig g;
  g.d_model = cfg.model.d_model;
  g.heads = cfg.model.heads;
  g.layers = cfg.model.layers;
  g.levels = cfg.tokenizer.levels;
  g.codebook_size = cfg.tokenizer.codebook_size;
  g.collision_capacity = cfg.collision_capacity;
  g.l_max = cfg.data.l_max;
  g.dropout = cfg.model.dropout;
  return g;
}

JointModel build_joint_model(ad::ParamStore& ps, const ExperimentConfig& cfg,
                             const SplitLog& split) {
  JointModel m;
  m.gcfg = gen_config(cfg);
  Rng rng = substream(cfg.train.seed, "model_init");
  m.gen = GenModel::create(ps, m.gcfg, rng);
  m.hcaim =
      HcaimModel::create(ps, cfg.model.embedding_dim, cfg.model.d_model, cfg.model.heads, rng);
  m.features =
      FeatureEmbeddings::create(ps, "ctr", default_fields(split), cfg.model.embedding_dim, rng);
  CtrConfig cc;
  cc.d_model = cfg.model.d_model;
  cc.d_intent = cfg.model.embedding_dim;
  cc.hidden = cfg.model.mlp;
  m.ctr = CtrModel::create(ps, cc, m.features.user_width(), m.features.item_width(), rng);
  m.tok_emb = ps.find("gen.tok_emb");
  return m;
}

Baseline pretrain_baseline(const ExperimentConfig& cfg, const PreparedData& data) {
  const auto& train = data.split.train;
  if (train.empty()) throw std::runtime_error("pretrain_baseline: empty training split");

  Baseline b;
  Rng rng = substream(cfg.train.seed, "baseline_init");
  b.model = DeepFmModel::create(b.ps, default_fields(data.split), cfg.model.embedding_dim,
                                cfg.model.mlp, rng);
  nn::AdamConfig acfg;
  acfg.lr = cfg.train.learning_rate;
  nn::Adam opt(b.ps, acfg);
  ad::GradStore grads(b.ps);

  const std::size_t n = train.size();
  const std::size_t batch = static_cast<std::size_t>(cfg.train.batch_size);
  std::vector<Mat> best;
  Real best_auc = 0;
  int since_best = 0;

  for (int epoch = 0; epoch < cfg.train.baseline_epochs; ++epoch) {
    Rng srng =
        substream(cfg.train.seed, "baseline_shuffle", {static_cast<std::uint64_t>(epoch)});
    const auto order = shuffled(n, srng);
    Real loss_sum = 0;
    for (std::size_t at = 0; at < n; at += batch) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(at),
                                         order.begin() +
                                             static_cast<std::ptrdiff_t>(std::min(at + batch, n)));
      ad::Tape t(&b.ps, &grads);
      const ad::VarId logits = b.model.logit_batch(t, train, idx);
      Vec labels(static_cast<Index>(idx.size()));
      for (std::size_t k = 0; k < idx.size(); ++k) {
        labels(static_cast<Index>(k)) = static_cast<Real>(train[idx[k]].label);
      }
      const ad::VarId loss = ad::scale(t, ad::bce_with_logits_sum(t, logits, labels),
                                       1.0 / static_cast<Real>(idx.size()));
      const Real lv = t.value(loss)(0, 0);
      if (!std::isfinite(lv)) {
        throw std::runtime_error("pretrain_baseline: non-finite loss, training diverged");
      }
      loss_sum += lv * static_cast<Real>(idx.size());
      t.backward(loss);
      opt.step(b.ps, grads);
      grads.reset();
    }
    b.train_bce.push_back(loss_sum / static_cast<Real>(n));
    b.epochs_run = epoch + 1;

    if (data.split.valid.empty()) continue;
    const auto vauc =
        safe_auc(baseline_scores(b, data.split.valid), label_vec(data.split.valid));
    if (!vauc) continue;
    if (best.empty() || *vauc > best_auc) {
      best_auc = *vauc;
      best = snapshot_values(b.ps);
      b.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best > cfg.train.patience) {
      break;
    }
  }
  if (!best.empty()) {
    restore_values(b.ps, best);
    b.valid_auc = best_auc;
  }
  return b;
}

std::vector<Real> baseline_scores(const Baseline& b, const std::vector<LabeledInstance>& ins) {
  std::vector<Real> out(ins.size());
  if (ins.empty()) return out;
  std::vector<std::size_t> idx(ins.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const Vec logits = b.model.logits_value(b.ps, ins, idx);
  for (std::size_t i = 0; i < ins.size(); ++i) {
    out[i] = clamp_prob(1.0 / (1.0 + std::exp(-logits(static_cast<Index>(i)))));
  }
  return out;
}

SemanticID generate_id(const JointModel& m, const ad::ParamStore& ps,
                       const TokenizerArtifacts& tok, const LabeledInstance& inst,
                       int beam_width) {
  ad::Tape t(&ps, nullptr, false);
  const TokenSequence seq = tokenize_history(inst.history, tok.table, m.gcfg);
  const EncoderStack stack = m.gen.encode_history(t, seq);
  const auto beams =
      m.gen.constrained_beam_search(ps, t.value(stack.top()), stack.mask, tok.trie, beam_width);
  if (beams.empty()) throw std::runtime_error("generate_id: empty beam");
  return beams.front().id;
}

BatchGraph batch_loss(ad::Tape& t, const JointModel& m, const ExperimentConfig& cfg,
                      const TokenizerArtifacts& tok, const Baseline* baseline,
                      const std::vector<LabeledInstance>& data,
                      const std::vector<std::size_t>& idx,
                      const std::vector<SemanticID>& gen_ids, bool training,
                      std::uint64_t step_tag) {
  if (idx.empty()) throw std::invalid_argument("batch_loss: empty batch");
  const AblationFlags& fl = cfg.ablation;
  const bool use_ntp = fl.ntp && cfg.train.mu != 0.0;
  const bool use_sr = fl.sr && cfg.train.eta != 0.0;
  if (use_sr && baseline == nullptr) {
    throw std::invalid_argument("batch_loss: SR loss enabled without a baseline");
  }
  if (fl.st && gen_ids.size() != idx.size()) {
    throw std::invalid_argument("batch_loss: one generated id per instance required");
  }
  const IntentMode mode = parse_intent_mode(cfg.model.aggregation);
  const CohortConfig ccfg = cohort_config(cfg);
  const ItemEmbeddingRef items{m.features.table_param("item"), &m.features.vocab_rows("item")};
  const FallbackRef fb{m.tok_emb, &m.gcfg};

  std::vector<ad::VarId> lti_rows, sti_rows, ntp_terms;
  lti_rows.reserve(idx.size());
  sti_rows.reserve(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const LabeledInstance& inst = data[idx[k]];
    nn::DropoutPlan drop;
    if (training && cfg.model.dropout > 0) {
      drop.p = cfg.model.dropout;
      drop.active = true;
      drop.seed = cfg.train.seed;
      drop.instance_tag =
          splitmix64(step_tag ^ splitmix64(static_cast<std::uint64_t>(idx[k]) + 0x51u));
    }
    // The generator is supervised on the behavior sequence only: a disliked
    // impression is not the next item of interest, so negatives carry no NTP
    // term.
    const bool ntp_here = use_ntp && inst.label == 1;
    EncoderStack stack;
    if (fl.lt || fl.st || ntp_here) {
      const TokenSequence seq = tokenize_history(inst.history, tok.table, m.gcfg);
      stack = m.gen.encode_history(t, seq, drop);
    }
    lti_rows.push_back(fl.lt ? m.gen.extract_lti(t, stack)
                             : t.input(Mat::Zero(1, m.gcfg.d_model)));
    if (fl.st) {
      const ad::VarId e_v = m.features.embed_item_id(t, inst.target_item_id);
      const PooledCohorts pooled =
          m.hcaim.pool_cohorts(t, gen_ids[k], tok.table, tok.cohorts, items, fb, ccfg);
      sti_rows.push_back(
          m.hcaim.aggregate_intent(t, mode, pooled.e_c, stack.top(), stack.mask, e_v));
    } else {
      sti_rows.push_back(t.input(Mat::Zero(1, m.features.dim())));
    }
    if (ntp_here) {
      const SemanticID& target = tok.table.by_item.at(inst.target_item_id);
      ntp_terms.push_back(m.gen.ntp_loss(t, stack, target, drop));
    }
  }

  const ad::VarId lti = ad::vstack(t, lti_rows);
  const ad::VarId sti = ad::vstack(t, sti_rows);
  const auto [e_u, e_v] = m.features.embed_batch(t, data, idx);

  BatchGraph g;
  g.logits = m.ctr.fusion_logit(t, lti, sti, e_u, e_v);
  Vec labels(static_cast<Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) {
    labels(static_cast<Index>(k)) = static_cast<Real>(data[idx[k]].label);
  }
  const ad::VarId l_ctr = ad::scale(t, ad::bce_with_logits_sum(t, g.logits, labels),
                                    1.0 / static_cast<Real>(idx.size()));
  g.l_ctr = t.value(l_ctr)(0, 0);
  ad::VarId total = l_ctr;
  if (use_ntp && !ntp_terms.empty()) {
    const ad::VarId l_ntp = ad::mean_all(t, ad::vstack(t, ntp_terms));
    g.l_ntp = t.value(l_ntp)(0, 0);
    total = ad::add(t, total, ad::scale(t, l_ntp, cfg.train.mu));
  }
  if (use_sr) {
    const Vec base = baseline->model.logits_value(baseline->ps, data, idx);
    const ad::VarId l_sr = sr_loss(t, g.logits, base);
    g.l_sr = t.value(l_sr)(0, 0);
    total = ad::add(t, total, ad::scale(t, l_sr, cfg.train.eta));
  }
  g.loss = total;
  g.joint = t.value(total)(0, 0);
  return g;
}

TrainOutput train_joint(const ExperimentConfig& cfg, const PreparedData& data,
                        const TokenizerArtifacts& tok, const Baseline* baseline,
                        ad::ParamStore& ps, const JointModel& m, std::ostream* loss_log,
                        const EpochHook& hook) {
  const auto& train = data.split.train;
  if (train.empty()) throw std::runtime_error("train_joint: empty training split");
  if (cfg.ablation.st && m.gcfg.levels < 2) {
    throw ConfigError(
        "hierarchical cohorts need tokenizer.levels >= 2; disable the ST path instead");
  }
  if (cfg.ablation.sr && cfg.train.eta != 0.0 && baseline == nullptr) {
    throw std::invalid_argument("train_joint: SR loss enabled without a baseline");
  }

  nn::AdamConfig acfg;
  acfg.lr = cfg.train.learning_rate;
  nn::Adam opt(ps, acfg);
  ad::GradStore grads(ps);
  std::vector<SemanticID> cache(train.size());
  std::vector<char> cached(train.size(), 0);

  TrainOutput out;
  std::vector<Mat> best;
  int since_best = 0;
  std::size_t step = 0;
  const std::size_t n = train.size();
  const std::size_t batch = static_cast<std::size_t>(cfg.train.batch_size);
  const auto every = static_cast<std::size_t>(cfg.train.regen_every);

  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    Rng srng = substream(cfg.train.seed, "shuffle", {static_cast<std::uint64_t>(epoch)});
    const auto order = shuffled(n, srng);
    Real sum_ctr = 0, sum_ntp = 0, sum_sr = 0, sum_joint = 0;

    for (std::size_t at = 0; at < n; at += batch, ++step) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(at),
                                         order.begin() +
                                             static_cast<std::ptrdiff_t>(std::min(at + batch, n)));
      std::vector<SemanticID> ids(idx.size());
      if (cfg.ablation.st) {
        const bool regen = step % every == 0;
        for (std::size_t k = 0; k < idx.size(); ++k) {
          const std::size_t i = idx[k];
          if (regen || !cached[i]) {
            cache[i] = generate_id(m, ps, tok, train[i], cfg.model.beam_width);
            cached[i] = 1;
          }
          ids[k] = cache[i];
        }
      }

      ad::Tape t(&ps, &grads);
      const BatchGraph g = batch_loss(t, m, cfg, tok, baseline, train, idx, ids, true,
                                      static_cast<std::uint64_t>(step));
      if (!std::isfinite(g.joint)) {
        const RunPaths paths = run_paths(cfg.run_dir);
        std::filesystem::create_directories(cfg.run_dir);
        save_params(paths.last_good_ckpt, ps);
        throw std::runtime_error("train_joint: non-finite loss at step " + std::to_string(step) +
                                 "; last good parameters saved to " + paths.last_good_ckpt);
      }
      t.backward(g.loss);
      opt.step(ps, grads);
      grads.reset();

      if (loss_log) {
        json line;
        line["step"] = step;
        line["l_ctr"] = g.l_ctr;
        line["l_ntp"] = g.l_ntp;
        line["l_sr"] = g.l_sr;
        line["joint"] = g.joint;
        (*loss_log) << line.dump() << "\n";
      }
      const auto w = static_cast<Real>(idx.size());
      sum_ctr += g.l_ctr * w;
      sum_ntp += g.l_ntp * w;
      sum_sr += g.l_sr * w;
      sum_joint += g.joint * w;
    }

    EpochStats es;
    es.epoch = epoch;
    es.l_ctr = sum_ctr / static_cast<Real>(n);
    es.l_ntp = sum_ntp / static_cast<Real>(n);
    es.l_sr = sum_sr / static_cast<Real>(n);
    es.joint = sum_joint / static_cast<Real>(n);
    es.steps = step;
    if (!data.split.valid.empty()) {
      es.valid_auc = safe_auc(score_instances(cfg, m, ps, tok, data.split.valid),
                              label_vec(data.split.valid));
    }
    out.epochs.push_back(es);

    if (hook && hook(es)) {
      out.hook_stopped = true;
      out.best_epoch = epoch;
      out.best_valid_auc = es.valid_auc;
      best.clear();  // keep the current parameters
      break;
    }
    if (es.valid_auc) {
      if (!out.best_valid_auc || *es.valid_auc > *out.best_valid_auc) {
        out.best_valid_auc = es.valid_auc;
        out.best_epoch = epoch;
        best = snapshot_values(ps);
        since_best = 0;
      } else if (++since_best > cfg.train.patience) {
        out.early_stopped = true;
        break;
      }
    }
  }
  out.steps = step;
  if (!best.empty()) restore_values(ps, best);
  return out;
}

std::vector<Real> score_instances(const ExperimentConfig& cfg, const JointModel& m,
                                  const ad::ParamStore& ps, const TokenizerArtifacts& tok,
                                  const std::vector<LabeledInstance>& ins) {
  std::vector<Real> out;
  out.reserve(ins.size());
  if (ins.empty()) return out;

  const AblationFlags& fl = cfg.ablation;
  const IntentMode mode = parse_intent_mode(cfg.model.aggregation);
  const CohortConfig ccfg = cohort_config(cfg);
  const ItemEmbeddingRef items{m.features.table_param("item"), &m.features.vocab_rows("item")};
  const FallbackRef fb{m.tok_emb, &m.gcfg};
  const std::size_t batch = static_cast<std::size_t>(cfg.train.batch_size);

  for (std::size_t at = 0; at < ins.size(); at += batch) {
    const std::size_t hi = std::min(at + batch, ins.size());
    std::vector<std::size_t> idx(hi - at);
    std::iota(idx.begin(), idx.end(), at);

    ad::Tape t(&ps, nullptr, false);
    std::vector<ad::VarId> lti_rows, sti_rows;
    for (std::size_t i : idx) {
      const LabeledInstance& inst = ins[i];
      EncoderStack stack;
      if (fl.lt || fl.st) {
        const TokenSequence seq = tokenize_history(inst.history, tok.table, m.gcfg);
        stack = m.gen.encode_history(t, seq);
      }
      lti_rows.push_back(fl.lt ? m.gen.extract_lti(t, stack)
                               : t.input(Mat::Zero(1, m.gcfg.d_model)));
      if (fl.st) {
        const auto beams = m.gen.constrained_beam_search(ps, t.value(stack.top()), stack.mask,
                                                         tok.trie, cfg.model.beam_width);
        if (beams.empty()) throw std::runtime_error("score_instances: empty beam");
        const ad::VarId e_v = m.features.embed_item_id(t, inst.target_item_id);
        const PooledCohorts pooled =
            m.hcaim.pool_cohorts(t, beams.front().id, tok.table, tok.cohorts, items, fb, ccfg);
        sti_rows.push_back(
            m.hcaim.aggregate_intent(t, mode, pooled.e_c, stack.top(), stack.mask, e_v));
      } else {
        sti_rows.push_back(t.input(Mat::Zero(1, m.features.dim())));
      }
    }
    const ad::VarId lti = ad::vstack(t, lti_rows);
    const ad::VarId sti = ad::vstack(t, sti_rows);
    const auto [e_u, e_v] = m.features.embed_batch(t, ins, idx);
    const ad::VarId logits = m.ctr.fusion_logit(t, lti, sti, e_u, e_v);
    const Mat& L = t.value(logits);
    for (Index r = 0; r < L.rows(); ++r) {
      out.push_back(clamp_prob(1.0 / (1.0 + std::exp(-L(r, 0)))));
    }
  }
  return out;
}

EvalResult evaluate_split(const ExperimentConfig& cfg, const JointModel& m,
                          const ad::ParamStore& ps, const TokenizerArtifacts& tok,
                          const std::vector<LabeledInstance>& ins,
                          const VolatilityPartition* partition) {
  EvalResult r;
  r.scores = score_instances(cfg, m, ps, tok, ins);
  r.labels = label_vec(ins);
  r.overall = group_metrics("overall", r.scores, r.labels);
  if (partition) {
    const std::pair<const char*, const std::set<std::string>*> groups[] = {
        {"fast", &partition->fast}, {"slow", &partition->slow}};
    for (const auto& [name, users] : groups) {
      std::vector<Real> s, l;
      for (std::size_t i = 0; i < ins.size(); ++i) {
        if (users->count(ins[i].user_id)) {
          s.push_back(r.scores[i]);
          l.push_back(r.labels[i]);
        }
      }
      r.groups.push_back(group_metrics(name, s, l));
    }
  }
  return r;
}

nlohmann::json eval_to_json(const EvalResult& r) {
  auto gj = [](const GroupMetrics& g) {
    json j;
    j["count"] = g.count;
    j["auc"] = opt_json(g.auc);  // null marks an undefined metric
    j["logloss"] = opt_json(g.logloss);
    return j;
  };
  json j;
  j["overall"] = gj(r.overall);
  json groups = json::object();
  for (const auto& g : r.groups) groups[g.name] = gj(g);
  j["groups"] = groups;
  return j;
}

Real ntp_token_accuracy(const ad::ParamStore& ps, const JointModel& m,
                        const SemanticIDTable& table,
                        const std::vector<LabeledInstance>& ins) {
  if (ins.empty()) throw std::invalid_argument("ntp_token_accuracy: no instances");
  std::size_t hits = 0, total = 0;
  for (const auto& inst : ins) {
    ad::Tape t(&ps, nullptr, false);
    const TokenSequence seq = tokenize_history(inst.history, table, m.gcfg);
    const EncoderStack stack = m.gen.encode_history(t, seq);
    const std::vector<int> targets = m.gen.target_tokens(table.by_item.at(inst.target_item_id));
    std::vector<int> input;
    input.reserve(targets.size());
    input.push_back(kBosToken);
    input.insert(input.end(), targets.begin(), targets.end() - 1);
    const Mat& logits = t.value(m.gen.decode_logits(t, stack, input));
    for (Index r = 0; r < logits.rows(); ++r) {
      Index arg = 0;
      logits.row(r).maxCoeff(&arg);
      hits += static_cast<int>(arg) == targets[static_cast<std::size_t>(r)] ? 1u : 0u;
      ++total;
    }
  }
  return static_cast<Real>(hits) / static_cast<Real>(total);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentResult res;
  res.paths = run_paths(cfg.run_dir);
  std::filesystem::create_directories(cfg.run_dir);
  io::write_text_file(res.paths.config_snapshot, config_to_json(cfg).dump(2) + "\n");

  PreparedData data = prepare_data(cfg);
  TokenizerArtifacts tok = fit_tokenizer(cfg, data);
  write_semantic_ids(res.paths.semantic_ids, tok.table);
  std::cerr << "[genci] " << cfg.run_dir << ": tokenizer done, " << tok.table.by_item.size()
            << " items, mse " << tok.reconstruction_mse << ", " << seconds_since(t0) << "s\n";

  Baseline base = pretrain_baseline(cfg, data);
  save_params(res.paths.baseline_ckpt, base.ps);
  res.baseline_valid_auc = base.valid_auc;
  res.baseline_test =
      group_metrics("baseline_test", baseline_scores(base, data.split.test),
                    label_vec(data.split.test));
  std::cerr << "[genci] " << cfg.run_dir << ": baseline done after " << base.epochs_run
            << " epochs, " << seconds_since(t0) << "s\n";

  ad::ParamStore ps;
  const JointModel m = build_joint_model(ps, cfg, data.split);
  std::ofstream log(res.paths.loss_log);
  if (!log) throw std::runtime_error("cannot write " + res.paths.loss_log);
  res.train = train_joint(cfg, data, tok, &base, ps, m, &log);
  log.close();
  save_params(res.paths.model_ckpt, ps);
  std::cerr << "[genci] " << cfg.run_dir << ": training done, " << res.train.steps << " steps, "
            << seconds_since(t0) << "s\n";

  VolatilityPartition vp;
  const VolatilityPartition* part = nullptr;
  if (!data.genres.empty()) {
    std::vector<LabeledInstance> all = data.split.train;
    all.insert(all.end(), data.split.valid.begin(), data.split.valid.end());
    all.insert(all.end(), data.split.test.begin(), data.split.test.end());
    vp = volatility_partition(all, data.genres);
    part = &vp;
  }
  res.test_eval = evaluate_split(cfg, m, ps, tok, data.split.test, part);

  json mj;
  mj["config_hash"] = config_hash(cfg);
  mj["seed"] = cfg.train.seed;
  mj["counts"] = {{"train", data.split.train.size()},
                  {"valid", data.split.valid.size()},
                  {"test", data.split.test.size()}};
  mj["data"] = {{"malformed_lines", data.malformed_lines},
                {"dropped_records", data.dropped_records},
                {"embedding_fallbacks", data.embedding_fallbacks},
                {"train_only_users", data.split.train_only_users},
                {"excluded_users", data.split.excluded_users}};
  mj["tokenizer"] = {{"items", tok.table.by_item.size()},
                     {"reconstruction_mse", tok.reconstruction_mse}};
  mj["baseline"] = {{"valid_auc", opt_json(res.baseline_valid_auc)},
                    {"test_auc", opt_json(res.baseline_test.auc)},
                    {"test_logloss", opt_json(res.baseline_test.logloss)}};
  json epochs = json::array();
  for (const auto& e : res.train.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"l_ctr", e.l_ctr},
                      {"l_ntp", e.l_ntp},
                      {"l_sr", e.l_sr},
                      {"joint", e.joint},
                      {"valid_auc", opt_json(e.valid_auc)}});
  }
  mj["model"] = {{"best_epoch", res.train.best_epoch},
                 {"best_valid_auc", opt_json(res.train.best_valid_auc)},
                 {"epochs_run", res.train.epochs.size()},
                 {"steps", res.train.steps},
                 {"early_stopped", res.train.early_stopped},
                 {"epoch_log", epochs}};
  mj["test"] = eval_to_json(res.test_eval);
  res.metrics = mj;
  io::write_text_file(res.paths.metrics, mj.dump(2) + "\n");
  std::cerr << "[genci] " << cfg.run_dir << ": finished in " << seconds_since(t0) << "s\n";
  return res;
}

ExperimentConfig ablation_config(const ExperimentConfig& base, const std::string& variant) {
  ExperimentConfig cfg = base;
  cfg.run_dir = (std::filesystem::path(base.run_dir) / variant).string();
  if (variant == "full") {
  } else if (variant == "no_st") {
    cfg.ablation.st = false;
  } else if (variant == "no_lt") {
    cfg.ablation.lt = false;
  } else if (variant == "no_sr") {
    if (cfg.ablation.sr && cfg.train.eta > 0) {
      std::cerr << "[genci] no_sr: forcing eta " << cfg.train.eta << " -> 0\n";
    }
    cfg.ablation.sr = false;
    cfg.train.eta = 0;
  } else if (variant == "no_ntp") {
    cfg.ablation.ntp = false;
  } else if (variant == "intent_mean") {
    cfg.model.aggregation = "intent_mean";
  } else if (variant == "target_intent") {
    cfg.model.aggregation = "target_intent";
  } else {
    throw ConfigError("unknown ablation variant '" + variant + "'");
  }
  return cfg;
}

ExperimentResult run_ablation(const ExperimentConfig& base, const std::string& variant) {
  return run_experiment(ablation_config(base, variant));
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& base, const std::string& param,
                                const std::vector<Real>& grid) {
  if (grid.empty()) throw ConfigError("sweep grid must not be empty");
  if (param != "layers" && param != "mu" && param != "eta") {
    throw ConfigError("sweep param must be one of layers, mu, eta");
  }
  std::vector<SweepRow> rows;
  rows.reserve(grid.size());
  for (Real v : grid) {
    SweepRow row;
    row.value = v;
    try {
      ExperimentConfig cfg = base;
      if (param == "layers") {
        if (v != std::floor(v)) throw ConfigError("layers grid values must be integers");
        cfg.model.layers = static_cast<Index>(v);
      } else if (param == "mu") {
        cfg.train.mu = v;
      } else {
        cfg.train.eta = v;
      }
      cfg.run_dir =
          (std::filesystem::path(base.run_dir) / (param + "_" + io::format_real(v))).string();
      cfg.validate();
      const ExperimentResult r = run_experiment(cfg);
      row.auc = r.test_eval.overall.auc;
      row.logloss = r.test_eval.overall.logloss;
      row.status = "ok";
    } catch (const std::exception& e) {
      row.status = e.what();  // recorded; the sweep moves on
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string sweep_csv(const std::string& param, const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "param,value,auc,logloss,status\n";
  for (const auto& r : rows) {
    os << param << ',' << io::format_real(r.value) << ','
       << (r.auc ? io::format_real(*r.auc) : "") << ','
       << (r.logloss ? io::format_real(*r.logloss) : "") << ',' << csv_quote(r.status) << "\n";
  }
  return os.str();
}

std::size_t export_intents(const ExperimentConfig& cfg, const JointModel& m,
                           const ad::ParamStore& ps, const TokenizerArtifacts& tok,
                           const std::vector<LabeledInstance>& ins, const std::string& path) {
  const AblationFlags& fl = cfg.ablation;
  const IntentMode mode = parse_intent_mode(cfg.model.aggregation);
  const CohortConfig ccfg = cohort_config(cfg);
  const ItemEmbeddingRef items{m.features.table_param("item"), &m.features.vocab_rows("item")};
  const FallbackRef fb{m.tok_emb, &m.gcfg};

  std::ostringstream os;
  os << "user\titem";
  for (Index c = 0; c < m.gcfg.d_model; ++c) os << "\tlti_" << c;
  for (Index c = 0; c < m.features.dim(); ++c) os << "\tsti_" << c;
  for (Index c = 0; c < m.features.dim(); ++c) os << "\tev_" << c;
  os << "\n";

  for (const auto& inst : ins) {
    ad::Tape t(&ps, nullptr, false);
    EncoderStack stack;
    if (fl.lt || fl.st) {
      const TokenSequence seq = tokenize_history(inst.history, tok.table, m.gcfg);
      stack = m.gen.encode_history(t, seq);
    }
    Mat lti = Mat::Zero(1, m.gcfg.d_model);
    if (fl.lt) lti = t.value(m.gen.extract_lti(t, stack));
    Mat sti = Mat::Zero(1, m.features.dim());
    const ad::VarId e_v = m.features.embed_item_id(t, inst.target_item_id);
    if (fl.st) {
      const auto beams = m.gen.constrained_beam_search(ps, t.value(stack.top()), stack.mask,
                                                       tok.trie, cfg.model.beam_width);
      if (beams.empty()) throw std::runtime_error("export_intents: empty beam");
      const PooledCohorts pooled =
          m.hcaim.pool_cohorts(t, beams.front().id, tok.table, tok.cohorts, items, fb, ccfg);
      sti = t.value(m.hcaim.aggregate_intent(t, mode, pooled.e_c, stack.top(), stack.mask, e_v));
    }
    os << inst.user_id << '\t' << inst.target_item_id;
    for (Index c = 0; c < lti.cols(); ++c) os << '\t' << io::format_real(lti(0, c));
    for (Index c = 0; c < sti.cols(); ++c) os << '\t' << io::format_real(sti(0, c));
    const Mat& ev = t.value(e_v);
    for (Index c = 0; c < ev.cols(); ++c) os << '\t' << io::format_real(ev(0, c));
    os << "\n";
  }
  ensure_parent_dir(path);
  io::write_text_file(path, os.str());
  return ins.size();
}

}  // namespace genci
