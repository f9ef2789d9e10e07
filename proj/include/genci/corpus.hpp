#pragma once

#include "genci/types.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace genci {

struct Interaction {
  std::string user_id;
  std::string item_id;
  std::optional<int> rating;
  std::int64_t timestamp = 0;
  std::map<std::string, std::string> context;
  std::optional<int> label;
};

struct InteractionLog {
  std::vector<Interaction> records;
  std::size_t malformed_lines = 0;
  std::size_t dropped_records = 0;
};

enum class LogFormat { movielens, amazon_reviews, generic_tsv };
LogFormat parse_log_format(std::string_view name);
std::string to_string(LogFormat f);

// movielens: `user::item::rating::timestamp` lines.
// amazon_reviews: JSON lines with reviewerID/asin/overall/unixReviewTime.
// generic_tsv: tab separated with a header naming at least
// user, item, rating, timestamp; extra columns become context fields.
InteractionLog load_interactions(const std::string& path, LogFormat format);

// rating > threshold -> label 1, rating < threshold -> label 0,
// rating == threshold -> record dropped and counted.
InteractionLog binarize_ratings(InteractionLog log, int pos_threshold = 3);

// Iteratively removes users and items with fewer than k interactions.
InteractionLog filter_k_core(InteractionLog log, int k = 5);

struct LabeledInstance {
  std::string user_id;
  std::string target_item_id;
  std::vector<std::string> history;  // oldest to newest, unpadded, <= L_max
  int label = 0;
  std::int64_t target_timestamp = 0;
  std::map<std::string, std::string> context;
};

// Left padding; empty string is the reserved padding id.
struct PaddedHistory {
  std::vector<std::string> items;
  std::vector<std::uint8_t> mask;  // 1 where valid
};
PaddedHistory pad_history(const std::vector<std::string>& history, Index l_max);

struct SplitLog {
  std::vector<LabeledInstance> train;
  std::vector<LabeledInstance> valid;
  std::vector<LabeledInstance> test;
  std::set<std::string> item_vocab;
  std::set<std::string> user_vocab;
  // Users whose interaction count cannot populate all three splits.
  std::size_t train_only_users = 0;  // chronological: kept, train only
  std::size_t excluded_users = 0;    // leave-one-out: dropped entirely
};

// Per-user chronological 8:1:1 with floor rounding; valid and test get at
// least one interaction each, the remainder goes to train. Users with fewer
// than 3 interactions contribute to train only.
SplitLog chronological_split(const InteractionLog& log, std::array<int, 3> ratios = {8, 1, 1});

// Last interaction to test, second to last to valid, rest to train.
// Users with fewer than 3 interactions are excluded and counted.
SplitLog leave_one_out_split(const InteractionLog& log);

// Fills every instance's history with the user's most recent items strictly
// before the target timestamp, truncated to the last l_max. By default only
// positively labeled interactions enter histories.
SplitLog build_sequences(SplitLog split, const InteractionLog& log, Index l_max,
                         bool positives_only = true);

// One uniformly sampled unseen negative per positive instance, seeded.
// Used by the leave-one-out path where the raw log has no negatives.
void add_sampled_negatives(SplitLog& split, std::uint64_t seed);

using GenreMap = std::map<std::string, std::set<std::string>>;

double jaccard_distance(const std::set<std::string>& a, const std::set<std::string>& b);

// Mean Jaccard distance over consecutive items that have genre annotations.
// Empty when fewer than two annotated items exist.
std::optional<double> user_volatility(const std::vector<std::string>& items_in_time_order,
                                      const GenreMap& genres);

struct VolatilityPartition {
  std::set<std::string> fast;
  std::set<std::string> slow;
  std::map<std::string, double> volatility;  // scored users only
  double threshold = 0.0;
  std::size_t unscored_users = 0;
};

// Scores each user over their positively labeled targets in time order and
// splits at the given quantile; strictly above the threshold is fast.
VolatilityPartition volatility_partition(const std::vector<LabeledInstance>& instances,
                                         const GenreMap& genres, double quantile = 0.5);

GenreMap load_genres(const std::string& path);  // movielens movies file or TSV

struct EmbeddingTable {
  Index dim = 0;
  std::map<std::string, Vec> vectors;
};

EmbeddingTable load_item_embeddings(const std::string& path, Index expected_dim);

// Verifies the table covers at least min_coverage of the vocabulary, then
// fills the gap with seeded unit-scale vectors. Returns the fallback count.
std::size_t ensure_embedding_coverage(EmbeddingTable& table, const std::set<std::string>& vocab,
                                      std::uint64_t seed, double min_coverage = 0.99);

}  // namespace genci
