#pragma once

#include "genci/types.hpp"

#include <cstdint>
#include <string>

namespace genci {

// Seeded generator for a small MovieLens-style corpus with planted structure:
// items live in embedding clusters, users hop between clusters following a
// per-group Markov rule, and a small popular set carries static signal. A
// history-aware model can learn the hop; a raw-feature model only sees the
// popularity component.
struct SynthConfig {
  Index users = 2000;
  Index items = 480;
  Index clusters = 12;
  Index groups = 8;  // distinct hop lengths
  Index min_events = 8;
  Index max_events = 16;
  Index embedding_dim = 16;
  Real follow_prob = 0.85;   // chain advances by the group hop
  Real neutral_prob = 0.05;  // rating-3 events, dropped downstream
  Real popular_prob = 0.12;  // popularity events, cluster-independent
  std::uint64_t seed = 7;
};

struct SynthPaths {
  std::string ratings;
  std::string genres;
  std::string embeddings;
};

// Writes ratings.dat, movies.dat and item_embeddings.txt under dir.
SynthPaths write_synthetic_dataset(const std::string& dir, const SynthConfig& cfg);

}  // namespace genci
