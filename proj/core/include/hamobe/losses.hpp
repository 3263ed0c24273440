#pragma once

#include "hamobe/model.hpp"

namespace hamobe {

// -log softmax(classifier(f))[label]; ErrorKind::Label if label is out of range.
Var ce_loss(const BoundModel& m, Var f, std::size_t label);

// Two tracklets' forward outputs and their subjects; y = 1 iff subjects match.
struct PairSample {
  const ForwardOutputs* first = nullptr;
  const ForwardOutputs* second = nullptr;
  int first_subject = 0;
  int second_subject = 0;

  bool same_identity() const { return first_subject == second_subject; }
};

// (1/T^2) * sum over ordered frame pairs t1 != t2 of ||F[t1] - F[t2]||^2,
// evaluated as (2/T) * sum_t ||F[t] - mean_t F||^2. frames: [T, d].
Var frame_spread(Var frames);

// ||f1 - f2||^2 + frame_spread(F1) + frame_spread(F2)
Var long_term_consistency(Var frames1, Var pooled1, Var frames2, Var pooled2);
// frame_spread(F1) + frame_spread(F2)
Var short_term_consistency(Var frames1, Var frames2);
// ||f1 - f2||^2
Var temporal_consistency(Var f1, Var f2);
// 0.5 * (y ||f1 - f2||^2 + (1 - y) max(0, margin - ||f1 - f2||)^2)
Var contrastive(Var f1, Var f2, bool same_identity, double margin);

// Pair-level losses. The cross-video terms are defined for same-identity
// pairs only; other pairs raise ErrorKind::Contract.
Var lts_loss(const PairSample& pair);
Var sts_loss(const PairSample& pair);
Var ts_loss(const PairSample& pair);
Var contrastive_loss(const PairSample& pair, double margin);

// Batch-averaged loss terms.
struct LossTerms {
  Var ce;
  Var lts;
  Var sts;
  Var ts;
  Var contrastive;
};

// L = ce + alpha * (lts + sts + ts) + beta * contrastive
Var total_loss(const LossTerms& terms, double alpha, double beta);

}  // namespace hamobe
