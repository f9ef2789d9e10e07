#include "genci/corpus.hpp"

#include "genci/io.hpp"
#include "genci/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace genci {

namespace {

using nlohmann::json;

std::vector<std::string> split(const std::string& s, const std::string& delim) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    std::size_t next = s.find(delim, pos);
    if (next == std::string::npos) {
      out.push_back(s.substr(pos));
      break;
    }
    out.push_back(s.substr(pos, next - pos));
    pos = next + delim.size();
  }
  return out;
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

bool parse_i64(const std::string& s, std::int64_t& out) {
  if (s.empty()) return false;
  std::size_t used = 0;
  try {
    out = std::stoll(s, &used);
  } catch (const std::exception&) {
    return false;
  }
  return used == s.size();
}

bool parse_int(const std::string& s, int& out) {
  std::int64_t v;
  if (!parse_i64(s, v)) return false;
  out = static_cast<int>(v);
  return true;
}

void load_movielens(std::istream& in, InteractionLog& log) {
  std::string line;
  while (std::getline(in, line)) {
    strip_cr(line);
    if (line.empty()) continue;
    auto f = split(line, "::");
    int rating;
    std::int64_t ts;
    if (f.size() != 4 || f[0].empty() || f[1].empty() || !parse_int(f[2], rating) ||
        !parse_i64(f[3], ts)) {
      ++log.malformed_lines;
      continue;
    }
    Interaction r;
    r.user_id = f[0];
    r.item_id = f[1];
    r.rating = rating;
    r.timestamp = ts;
    log.records.push_back(std::move(r));
  }
}

void load_amazon(std::istream& in, InteractionLog& log) {
  std::string line;
  while (std::getline(in, line)) {
    strip_cr(line);
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("reviewerID") ||
        !j.contains("asin") || !j.contains("unixReviewTime") ||
        !j["reviewerID"].is_string() || !j["asin"].is_string() ||
        !j["unixReviewTime"].is_number()) {
      ++log.malformed_lines;
      continue;
    }
    Interaction r;
    r.user_id = j["reviewerID"].get<std::string>();
    r.item_id = j["asin"].get<std::string>();
    if (r.user_id.empty() || r.item_id.empty()) {
      ++log.malformed_lines;
      continue;
    }
    if (j.contains("overall") && j["overall"].is_number()) {
      r.rating = static_cast<int>(std::lround(j["overall"].get<double>()));
    }
    r.timestamp = j["unixReviewTime"].get<std::int64_t>();
    log.records.push_back(std::move(r));
  }
}

void load_generic_tsv(const std::string& path, std::istream& in, InteractionLog& log) {
  std::string line;
  if (!std::getline(in, line)) {
    throw std::runtime_error(path + ": unparseable header (empty file)");
  }
  strip_cr(line);
  auto header = split(line, "\t");
  auto col = [&](const char* name) {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  };
  int cu = col("user"), ci = col("item"), cr = col("rating"), ct = col("timestamp");
  if (cu < 0 || ci < 0 || cr < 0 || ct < 0) {
    throw std::runtime_error(path +
                             ": unparseable header (need user, item, rating, timestamp)");
  }
  while (std::getline(in, line)) {
    strip_cr(line);
    if (line.empty()) continue;
    auto f = split(line, "\t");
    if (f.size() != header.size()) {
      ++log.malformed_lines;
      continue;
    }
    Interaction r;
    r.user_id = f[static_cast<std::size_t>(cu)];
    r.item_id = f[static_cast<std::size_t>(ci)];
    std::int64_t ts;
    if (r.user_id.empty() || r.item_id.empty() ||
        !parse_i64(f[static_cast<std::size_t>(ct)], ts)) {
      ++log.malformed_lines;
      continue;
    }
    r.timestamp = ts;
    const std::string& rating_s = f[static_cast<std::size_t>(cr)];
    if (!rating_s.empty()) {
      int rating;
      if (!parse_int(rating_s, rating)) {
        ++log.malformed_lines;
        continue;
      }
      r.rating = rating;
    }
    for (std::size_t c = 0; c < header.size(); ++c) {
      int ic = static_cast<int>(c);
      if (ic == cu || ic == ci || ic == cr || ic == ct) continue;
      if (!f[c].empty()) r.context[header[c]] = f[c];
    }
    log.records.push_back(std::move(r));
  }
}

// Stable per-user chronological order: ties broken by file position.
std::map<std::string, std::vector<std::size_t>> order_by_user(const InteractionLog& log) {
  std::map<std::string, std::vector<std::size_t>> by_user;
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    by_user[log.records[i].user_id].push_back(i);
  }
  for (auto& [user, idx] : by_user) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return log.records[a].timestamp < log.records[b].timestamp;
    });
  }
  return by_user;
}

LabeledInstance instance_from(const Interaction& r) {
  LabeledInstance inst;
  inst.user_id = r.user_id;
  inst.target_item_id = r.item_id;
  inst.label = r.label.value_or(1);
  inst.target_timestamp = r.timestamp;
  inst.context = r.context;
  return inst;
}

void collect_vocab(const InteractionLog& log, SplitLog& split) {
  for (const auto& r : log.records) {
    split.user_vocab.insert(r.user_id);
    split.item_vocab.insert(r.item_id);
  }
}

}  // namespace

LogFormat parse_log_format(std::string_view name) {
  if (name == "movielens") return LogFormat::movielens;
  if (name == "amazon_reviews") return LogFormat::amazon_reviews;
  if (name == "generic_tsv") return LogFormat::generic_tsv;
  throw std::invalid_argument("unknown log format '" + std::string(name) + "'");
}

std::string to_string(LogFormat f) {
  switch (f) {
    case LogFormat::movielens: return "movielens";
    case LogFormat::amazon_reviews: return "amazon_reviews";
    case LogFormat::generic_tsv: return "generic_tsv";
  }
  return "?";
}

InteractionLog load_interactions(const std::string& path, LogFormat format) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  InteractionLog log;
  switch (format) {
    case LogFormat::movielens: load_movielens(in, log); break;
    case LogFormat::amazon_reviews: load_amazon(in, log); break;
    case LogFormat::generic_tsv: load_generic_tsv(path, in, log); break;
  }
  if (log.records.empty()) throw std::runtime_error(path + ": zero valid records");
  return log;
}

InteractionLog binarize_ratings(InteractionLog log, int pos_threshold) {
  std::vector<Interaction> kept;
  kept.reserve(log.records.size());
  for (auto& r : log.records) {
    if (!r.rating) {
      throw std::runtime_error("binarize_ratings: record without rating (user " + r.user_id +
                               ", item " + r.item_id + ")");
    }
    if (*r.rating == pos_threshold) {
      ++log.dropped_records;
      continue;
    }
    r.label = *r.rating > pos_threshold ? 1 : 0;
    kept.push_back(std::move(r));
  }
  log.records = std::move(kept);
  return log;
}

InteractionLog filter_k_core(InteractionLog log, int k) {
  if (k < 1) throw std::invalid_argument("filter_k_core: k must be >= 1");
  bool changed = true;
  while (changed) {
    std::unordered_map<std::string, int> users, items;
    for (const auto& r : log.records) {
      users[r.user_id]++;
      items[r.item_id]++;
    }
    std::vector<Interaction> kept;
    kept.reserve(log.records.size());
    for (auto& r : log.records) {
      if (users[r.user_id] >= k && items[r.item_id] >= k) {
        kept.push_back(std::move(r));
      } else {
        ++log.dropped_records;
      }
    }
    changed = kept.size() != log.records.size();
    log.records = std::move(kept);
  }
  if (log.records.empty()) throw std::runtime_error("filter_k_core: nothing left");
  return log;
}

SplitLog chronological_split(const InteractionLog& log, std::array<int, 3> ratios) {
  if (ratios[0] <= 0 || ratios[1] <= 0 || ratios[2] <= 0) {
    throw std::invalid_argument("chronological_split: ratios must be positive");
  }
  const int total = ratios[0] + ratios[1] + ratios[2];
  SplitLog split;
  collect_vocab(log, split);
  for (const auto& [user, idx] : order_by_user(log)) {
    const std::size_t n = idx.size();
    if (n < 3) {
      for (std::size_t i : idx) split.train.push_back(instance_from(log.records[i]));
      ++split.train_only_users;
      continue;
    }
    std::size_t nv = std::max<std::size_t>(1, n * static_cast<std::size_t>(ratios[1]) /
                                                  static_cast<std::size_t>(total));
    std::size_t nt = std::max<std::size_t>(1, n * static_cast<std::size_t>(ratios[2]) /
                                                  static_cast<std::size_t>(total));
    while (nv + nt + 1 > n) {  // keep at least one train interaction
      if (nv > 1) {
        --nv;
      } else {
        --nt;
      }
    }
    const std::size_t ntrain = n - nv - nt;
    for (std::size_t i = 0; i < n; ++i) {
      LabeledInstance inst = instance_from(log.records[idx[i]]);
      if (i < ntrain) {
        split.train.push_back(std::move(inst));
      } else if (i < ntrain + nv) {
        split.valid.push_back(std::move(inst));
      } else {
        split.test.push_back(std::move(inst));
      }
    }
  }
  return split;
}

SplitLog leave_one_out_split(const InteractionLog& log) {
  SplitLog split;
  collect_vocab(log, split);
  for (const auto& [user, idx] : order_by_user(log)) {
    const std::size_t n = idx.size();
    if (n < 3) {
      ++split.excluded_users;
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) {
      LabeledInstance inst = instance_from(log.records[idx[i]]);
      if (i + 1 == n) {
        split.test.push_back(std::move(inst));
      } else if (i + 2 == n) {
        split.valid.push_back(std::move(inst));
      } else {
        split.train.push_back(std::move(inst));
      }
    }
  }
  return split;
}

SplitLog build_sequences(SplitLog split, const InteractionLog& log, Index l_max,
                         bool positives_only) {
  if (l_max < 1) throw std::invalid_argument("build_sequences: L_max must be >= 1");
  // Per user, time ordered (timestamp, item) pool that may enter histories.
  std::map<std::string, std::vector<std::pair<std::int64_t, std::string>>> pool;
  for (const auto& [user, idx] : order_by_user(log)) {
    auto& seq = pool[user];
    for (std::size_t i : idx) {
      const Interaction& r = log.records[i];
      if (positives_only && r.label.value_or(1) != 1) continue;
      seq.emplace_back(r.timestamp, r.item_id);
    }
  }
  auto fill = [&](std::vector<LabeledInstance>& list) {
    for (auto& inst : list) {
      inst.history.clear();
      auto it = pool.find(inst.user_id);
      if (it == pool.end()) continue;
      const auto& seq = it->second;
      // Strictly earlier than the target; ties are excluded to avoid leakage.
      std::vector<std::string> items;
      for (const auto& [ts, item] : seq) {
        if (ts >= inst.target_timestamp) break;
        items.push_back(item);
      }
      if (static_cast<Index>(items.size()) > l_max) {
        items.erase(items.begin(), items.end() - l_max);
      }
      inst.history = std::move(items);
    }
  };
  fill(split.train);
  fill(split.valid);
  fill(split.test);
  return split;
}

void add_sampled_negatives(SplitLog& split, std::uint64_t seed) {
  std::map<std::string, std::unordered_set<std::string>> seen;
  for (const auto* list : {&split.train, &split.valid, &split.test}) {
    for (const auto& inst : *list) seen[inst.user_id].insert(inst.target_item_id);
  }
  std::vector<std::string> items(split.item_vocab.begin(), split.item_vocab.end());
  if (items.size() < 2) throw std::runtime_error("add_sampled_negatives: vocabulary too small");
  auto augment = [&](std::vector<LabeledInstance>& list) {
    std::vector<LabeledInstance> out;
    out.reserve(list.size() * 2);
    std::map<std::string, Rng> rngs;
    for (auto& inst : list) {
      const std::string user = inst.user_id;
      const int label = inst.label;
      out.push_back(std::move(inst));
      if (label != 1) continue;
      auto [it, fresh] =
          rngs.try_emplace(user, substream(seed, "negatives", {fnv1a64(user)}));
      Rng& rng = it->second;
      const auto& used = seen[user];
      LabeledInstance neg = out.back();
      neg.label = 0;
      std::size_t pick = rng.uniform_index(items.size());
      for (int attempt = 0; attempt < 1000 && used.count(items[pick]); ++attempt) {
        pick = rng.uniform_index(items.size());
      }
      if (used.count(items[pick])) {
        // Dense user; walk forward to the first unseen item.
        std::size_t start = pick;
        do {
          pick = (pick + 1) % items.size();
        } while (pick != start && used.count(items[pick]));
        if (pick == start) continue;  // user saw everything, skip
      }
      neg.target_item_id = items[pick];
      out.push_back(std::move(neg));
    }
    list = std::move(out);
  };
  augment(split.train);
  augment(split.valid);
  augment(split.test);
}

PaddedHistory pad_history(const std::vector<std::string>& history, Index l_max) {
  PaddedHistory out;
  const std::size_t keep = std::min<std::size_t>(history.size(), static_cast<std::size_t>(l_max));
  const std::size_t pad = static_cast<std::size_t>(l_max) - keep;
  out.items.assign(pad, std::string());
  out.mask.assign(pad, 0);
  for (std::size_t i = history.size() - keep; i < history.size(); ++i) {
    out.items.push_back(history[i]);
    out.mask.push_back(1);
  }
  return out;
}

double jaccard_distance(const std::set<std::string>& a, const std::set<std::string>& b) {
  if (a.empty() && b.empty()) return 0.0;
  std::size_t inter = 0;
  for (const auto& x : a) inter += b.count(x);
  const std::size_t uni = a.size() + b.size() - inter;
  return 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
}

std::optional<double> user_volatility(const std::vector<std::string>& items_in_time_order,
                                      const GenreMap& genres) {
  std::vector<const std::set<std::string>*> tagged;
  for (const auto& item : items_in_time_order) {
    auto it = genres.find(item);
    if (it != genres.end() && !it->second.empty()) tagged.push_back(&it->second);
  }
  if (tagged.size() < 2) return std::nullopt;
  double sum = 0;
  for (std::size_t i = 0; i + 1 < tagged.size(); ++i) {
    sum += jaccard_distance(*tagged[i], *tagged[i + 1]);
  }
  return sum / static_cast<double>(tagged.size() - 1);
}

VolatilityPartition volatility_partition(const std::vector<LabeledInstance>& instances,
                                         const GenreMap& genres, double quantile) {
  if (quantile < 0.0 || quantile >= 1.0) {
    throw std::invalid_argument("volatility_partition: quantile must be in [0,1)");
  }
  std::map<std::string, std::vector<std::pair<std::int64_t, std::string>>> by_user;
  for (const auto& inst : instances) {
    if (inst.label == 1) by_user[inst.user_id].emplace_back(inst.target_timestamp,
                                                            inst.target_item_id);
  }
  VolatilityPartition part;
  for (auto& [user, seq] : by_user) {
    std::stable_sort(seq.begin(), seq.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<std::string> items;
    items.reserve(seq.size());
    for (auto& [ts, item] : seq) items.push_back(std::move(item));
    if (auto v = user_volatility(items, genres)) {
      part.volatility[user] = *v;
    } else {
      ++part.unscored_users;
    }
  }
  if (part.volatility.empty()) return part;
  std::vector<double> vals;
  vals.reserve(part.volatility.size());
  for (const auto& [user, v] : part.volatility) vals.push_back(v);
  std::sort(vals.begin(), vals.end());
  part.threshold =
      vals[static_cast<std::size_t>(quantile * static_cast<double>(vals.size() - 1))];
  for (const auto& [user, v] : part.volatility) {
    (v > part.threshold ? part.fast : part.slow).insert(user);
  }
  return part;
}

GenreMap load_genres(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot open");
  GenreMap map;
  std::string line;
  while (std::getline(in, line)) {
    strip_cr(line);
    if (line.empty()) continue;
    std::string item, genre_field;
    if (line.find("::") != std::string::npos) {
      auto f = split(line, "::");
      if (f.size() < 3) continue;
      item = f[0];
      genre_field = f.back();
    } else {
      auto f = split(line, "\t");
      if (f.size() < 2) continue;
      item = f[0];
      genre_field = f[1];
    }
    auto& set = map[item];
    for (const auto& g : split(genre_field, "|")) {
      if (!g.empty()) set.insert(g);
    }
  }
  return map;
}

EmbeddingTable load_item_embeddings(const std::string& path, Index expected_dim) {
  io::NamedVectors raw = io::read_vectors(path);
  if (expected_dim > 0 && raw.dim != expected_dim) {
    throw std::runtime_error(path + ": embedding dim " + std::to_string(raw.dim) +
                             ", expected " + std::to_string(expected_dim));
  }
  EmbeddingTable table;
  table.dim = raw.dim;
  for (auto& [name, vec] : raw.rows) {
    if (!vec.allFinite()) {
      throw std::runtime_error(path + ": non-finite embedding for item " + name);
    }
    table.vectors[name] = std::move(vec);
  }
  return table;
}

std::size_t ensure_embedding_coverage(EmbeddingTable& table, const std::set<std::string>& vocab,
                                      std::uint64_t seed, double min_coverage) {
  if (vocab.empty()) return 0;
  std::size_t covered = 0;
  for (const auto& item : vocab) covered += table.vectors.count(item);
  const double coverage = static_cast<double>(covered) / static_cast<double>(vocab.size());
  if (coverage < min_coverage) {
    throw std::runtime_error("embedding coverage " + std::to_string(coverage) + " below " +
                             std::to_string(min_coverage) + " (" + std::to_string(covered) +
                             "/" + std::to_string(vocab.size()) + " items)");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(table.dim));
  std::size_t filled = 0;
  for (const auto& item : vocab) {
    if (table.vectors.count(item)) continue;
    Rng rng = substream(seed, "embedding_fallback", {fnv1a64(item)});
    Vec v(table.dim);
    for (Index i = 0; i < table.dim; ++i) v(i) = rng.normal() * scale;
    table.vectors.emplace(item, std::move(v));
    ++filled;
  }
  return filled;
}

}  // namespace genci
