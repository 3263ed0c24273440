#pragma once

#include <span>
#include <utility>
#include <vector>

#include "hamobe/model.hpp"

namespace hamobe {

// Pair-conditioned features and the gate weights derived from them.
struct DualConditioned {
  Var gallery_features;  // [T, K, 4d]
  Var query_features;    // [T, K, 4d]
  GateWeights gallery;
  GateWeights query;
};

// Channel-concatenates the two volumes to [T, K, 8d], runs attention over all
// T*K tokens, splits the result back, and derives both gating layers' weights
// for each side with its own heads (shared when dual_shared_heads is set).
DualConditioned dual_condition(const BoundModel& m, Var gallery, Var query);

struct PairForward {
  DualConditioned conditioned;
  ForwardOutputs gallery;
  ForwardOutputs query;
};

PairForward forward_pair(const BoundModel& m, Var gallery, Var query);

struct PairEmbedding {
  BiometricEmbedding gallery;
  BiometricEmbedding query;
};

PairEmbedding embed_pair(const Model& model, const Tensor& gallery, const Tensor& query);

struct ScoreBand {
  double q = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  std::vector<std::size_t> selected;  // ascending score-table indices
};

// Nearest-rank percentile of an ascending sample: the ceil(p/100 * n)-th value
// (rank clamped to [1, n]).
double nearest_rank_percentile(std::span<const double> sorted, double p);

// Pairs whose score lies in [P(50 - q/2), P(50 + q/2)] of all scores, ties
// included. A zero-width band (q = 0) selects nothing.
ScoreBand select_band(std::span<const double> scores, double q);

struct PairRef {
  const Tensor* query = nullptr;
  const Tensor* gallery = nullptr;
};

// Recomputes the scores of band pairs as the cosine similarity of their
// dual-conditioned embeddings; other entries are copied unchanged.
std::vector<double> dual_rescore(const Model& model, std::span<const PairRef> pairs,
                                 std::span<const double> scores, const ScoreBand& band);

}  // namespace hamobe
