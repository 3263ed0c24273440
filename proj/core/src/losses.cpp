#include "hamobe/losses.hpp"

#include "hamobe/error.hpp"

namespace hamobe {

Var ce_loss(const BoundModel& m, Var f, std::size_t label) {
  if (label >= m.config().num_identities) {
    fail(ErrorKind::Label, "identity label " + std::to_string(label) + " out of range for " +
                               std::to_string(m.config().num_identities) + " identities");
  }
  return cross_entropy(classifier_logits(m, f), label);
}

Var frame_spread(Var frames) {
  if (frames.value().rank() != 2) fail(ErrorKind::Shape, "frame_spread expects [T x d]");
  const double T = static_cast<double>(frames.shape()[0]);
  Var centered = add_bias(frames, scale(mean_axis(frames, 0), -1.0));
  return scale(sum(square(centered)), 2.0 / T);
}

Var long_term_consistency(Var frames1, Var pooled1, Var frames2, Var pooled2) {
  if (frames1.shape() != frames2.shape()) fail(ErrorKind::Shape, "long-term consistency: frame shapes differ");
  return add(temporal_consistency(pooled1, pooled2), add(frame_spread(frames1), frame_spread(frames2)));
}

Var short_term_consistency(Var frames1, Var frames2) {
  if (frames1.shape() != frames2.shape()) fail(ErrorKind::Shape, "short-term consistency: frame shapes differ");
  return add(frame_spread(frames1), frame_spread(frames2));
}

Var temporal_consistency(Var f1, Var f2) { return sum(square(sub(f1, f2))); }

Var contrastive(Var f1, Var f2, bool same_identity, double margin) {
  if (!(margin > 0.0)) fail(ErrorKind::Config, "contrastive margin must be > 0");
  Var dist2 = sum(square(sub(f1, f2)));
  if (same_identity) return scale(dist2, 0.5);
  Var hinge = relu(add_scalar(scale(sqrt(dist2), -1.0), margin));
  return scale(square(hinge), 0.5);
}

namespace {

void require_pair(const PairSample& p, bool same_identity_only, const char* what) {
  if (!p.first || !p.second) fail(ErrorKind::Contract, std::string(what) + ": incomplete pair");
  if (same_identity_only && !p.same_identity()) {
    fail(ErrorKind::Contract, std::string(what) + " is defined for same-identity pairs only");
  }
}

}  // namespace

Var lts_loss(const PairSample& p) {
  require_pair(p, true, "long-term consistency loss");
  return long_term_consistency(p.first->long_term.frames, p.first->long_term.pooled, p.second->long_term.frames,
                               p.second->long_term.pooled);
}

Var sts_loss(const PairSample& p) {
  require_pair(p, false, "short-term consistency loss");
  return short_term_consistency(p.first->short_term.frames, p.second->short_term.frames);
}

Var ts_loss(const PairSample& p) {
  require_pair(p, true, "temporal consistency loss");
  return temporal_consistency(p.first->temporal.pooled, p.second->temporal.pooled);
}

Var contrastive_loss(const PairSample& p, double margin) {
  require_pair(p, false, "contrastive loss");
  return contrastive(p.first->f, p.second->f, p.same_identity(), margin);
}

Var total_loss(const LossTerms& t, double alpha, double beta) {
  if (!(alpha >= 0.0) || !(beta >= 0.0)) fail(ErrorKind::Config, "loss weights must be >= 0");
  Var consistency = add(add(t.lts, t.sts), t.ts);
  return add(add(t.ce, scale(consistency, alpha)), scale(t.contrastive, beta));
}

}  // namespace hamobe
