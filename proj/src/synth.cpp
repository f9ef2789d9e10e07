#include "genci/synth.hpp"

#include "genci/io.hpp"
#include "genci/rng.hpp"

#include <filesystem>
#include <sstream>
#include <stdexcept>

namespace genci {

namespace {

Index item_cluster(Index item, const SynthConfig& cfg) { return item % cfg.clusters; }
bool item_popular(Index item) { return item % 7 == 0; }

}  // namespace

SynthPaths write_synthetic_dataset(const std::string& dir, const SynthConfig& cfg) {
  if (cfg.users < 1 || cfg.items < cfg.clusters || cfg.clusters < 2 || cfg.groups < 1 ||
      cfg.min_events < 4 || cfg.max_events < cfg.min_events) {
    throw std::invalid_argument("write_synthetic_dataset: degenerate config");
  }
  std::filesystem::create_directories(dir);

  // Cluster-structured item embeddings drive the tokenizer.
  Rng erng = substream(cfg.seed, "synth_embeddings");
  MatrixX<Real> centers(cfg.clusters, cfg.embedding_dim);
  for (Index i = 0; i < centers.size(); ++i) centers(i) = 2.0 * erng.normal();
  io::NamedVectors emb;
  emb.dim = cfg.embedding_dim;
  std::ostringstream genres;
  for (Index it = 0; it < cfg.items; ++it) {
    const Index c = item_cluster(it, cfg);
    Vec v(cfg.embedding_dim);
    for (Index k = 0; k < cfg.embedding_dim; ++k) v(k) = centers(c, k) + 0.3 * erng.normal();
    emb.rows.emplace_back("m" + std::to_string(it + 1), std::move(v));
    // Adjacent clusters share one genre tag.
    genres << "m" << (it + 1) << "::Item " << (it + 1) << "::G" << c << "|G"
           << (c + 1) % cfg.clusters << "\n";
  }

  std::ostringstream ratings;
  for (Index u = 0; u < cfg.users; ++u) {
    Rng rng = substream(cfg.seed, "synth_user", {static_cast<std::uint64_t>(u)});
    const Index hop = 1 + (u % cfg.groups) % (cfg.clusters - 1);
    const Index n_events =
        cfg.min_events +
        static_cast<Index>(rng.uniform_index(static_cast<std::size_t>(
            cfg.max_events - cfg.min_events + 1)));
    Index state = static_cast<Index>(rng.uniform_index(static_cast<std::size_t>(cfg.clusters)));
    std::int64_t ts = 1'000'000'000 + static_cast<std::int64_t>(u);

    auto pick_from_cluster = [&](Index c) {
      // Items of cluster c sit at c, c + C, c + 2C, ...
      const Index per = (cfg.items + cfg.clusters - 1 - c) / cfg.clusters;
      const Index k = static_cast<Index>(rng.uniform_index(static_cast<std::size_t>(per)));
      return c + k * cfg.clusters;
    };

    for (Index e = 0; e < n_events; ++e) {
      const Index expected =
          rng.uniform() < cfg.follow_prob
              ? (state + hop) % cfg.clusters
              : static_cast<Index>(
                    rng.uniform_index(static_cast<std::size_t>(cfg.clusters)));
      Index item;
      int rating;
      const Real roll = rng.uniform();
      const bool force_positive = e < 4;  // histories need a few positives
      if (!force_positive && roll < cfg.popular_prob) {
        // Popularity event: cluster-independent static signal.
        do {
          item = static_cast<Index>(rng.uniform_index(static_cast<std::size_t>(cfg.items)));
        } while (!item_popular(item));
        rating = rng.uniform() < 0.8 ? 4 + static_cast<int>(rng.uniform_index(2))
                                     : 1 + static_cast<int>(rng.uniform_index(2));
      } else if (!force_positive && roll < cfg.popular_prob + cfg.neutral_prob) {
        item = pick_from_cluster(expected);
        rating = 3;
      } else if (force_positive || rng.uniform() < 0.5) {
        // On-chain positive.
        item = pick_from_cluster(expected);
        rating = 4 + static_cast<int>(rng.uniform_index(2));
      } else {
        // Off-chain negative.
        Index c;
        do {
          c = static_cast<Index>(rng.uniform_index(static_cast<std::size_t>(cfg.clusters)));
        } while (c == expected);
        item = pick_from_cluster(c);
        rating = 1 + static_cast<int>(rng.uniform_index(2));
      }
      if (rating >= 4) state = item_cluster(item, cfg);
      ts += 3600 + static_cast<std::int64_t>(rng.uniform_index(600));
      ratings << "u" << (u + 1) << "::m" << (item + 1) << "::" << rating << "::" << ts << "\n";
    }
  }

  SynthPaths paths;
  auto base = std::filesystem::path(dir);
  paths.ratings = (base / "ratings.dat").string();
  paths.genres = (base / "movies.dat").string();
  paths.embeddings = (base / "item_embeddings.txt").string();
  io::write_text_file(paths.ratings, ratings.str());
  io::write_text_file(paths.genres, genres.str());
  io::write_vectors_text(paths.embeddings, emb);
  return paths;
}

}  // namespace genci
