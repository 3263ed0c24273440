#include "hamobe/dual_input.hpp"

#include <algorithm>
#include <cmath>

#include "hamobe/error.hpp"
#include "hamobe/evaluator.hpp"

namespace hamobe {

namespace {

MhsaWeights pair_attention_weights(const BoundModel& m) {
  if (!m.config().dual_shared_heads) {
    return {m["dual.attn.wq"], m["dual.attn.bq"], m["dual.attn.wk"], m["dual.attn.bk"],
            m["dual.attn.wv"], m["dual.attn.bv"], m["dual.attn.wo"], m["dual.attn.bo"]};
  }
  // [[self, cross], [cross, self]]: swapping the two input halves swaps the output halves.
  auto tied = [&](const char* p) {
    const std::string base = std::string("dual.attn.") + p;
    Var self = m[base + ".self"];
    Var cross = m[base + ".cross"];
    Var bias = m[base + ".bias"];
    const Var top[] = {self, cross};
    const Var bottom[] = {cross, self};
    const Var rows[] = {concat(top, 1), concat(bottom, 1)};
    const Var biases[] = {bias, bias};
    return std::pair{concat(rows, 0), concat(biases, 0)};
  };
  auto [wq, bq] = tied("q");
  auto [wk, bk] = tied("k");
  auto [wv, bv] = tied("v");
  auto [wo, bo] = tied("o");
  return {wq, bq, wk, bk, wv, bv, wo, bo};
}

GateWeights side_gates(const BoundModel& m, const std::string& prefix, Var features) {
  const auto& c = m.config();
  const Shape& s = features.shape();
  Var logits = mlp(m, prefix + ".gate1", features);
  Var first = softmax(reshape(logits, {s[0], s[1], c.n1, c.n2}), 2);
  Var pooled = mean_axis(reshape(features, {s[0] * s[1], s[2]}), 0);
  Var second = softmax(mlp(m, prefix + ".gate2", pooled), 0);
  return {first, second};
}

}  // namespace

DualConditioned dual_condition(const BoundModel& m, Var gallery, Var query) {
  const auto& c = m.config();
  if (gallery.shape() != query.shape()) {
    fail(ErrorKind::Shape, "dual inputs differ: " + shape_str(gallery.shape()) + " vs " + shape_str(query.shape()));
  }
  check_volume_shape(c, gallery.value());
  const std::size_t T = c.frames, K = c.tokens, C = c.channels();
  const Var halves[] = {gallery, query};
  Var joint = reshape(concat(halves, 2), {T * K, 2 * C});
  Var attended = mhsa_forward(joint, joint, joint, c.heads, pair_attention_weights(m));
  DualConditioned out;
  out.gallery_features = reshape(slice(attended, 1, 0, C), {T, K, C});
  out.query_features = reshape(slice(attended, 1, C, 2 * C), {T, K, C});
  const std::string g = c.dual_shared_heads ? "dual.shared" : "dual.gallery";
  const std::string q = c.dual_shared_heads ? "dual.shared" : "dual.query";
  out.gallery = side_gates(m, g, out.gallery_features);
  out.query = side_gates(m, q, out.query_features);
  return out;
}

PairForward forward_pair(const BoundModel& m, Var gallery, Var query) {
  PairForward out;
  out.conditioned = dual_condition(m, gallery, query);
  out.gallery = forward(m, gallery, &out.conditioned.gallery);
  out.query = forward(m, query, &out.conditioned.query);
  return out;
}

PairEmbedding embed_pair(const Model& model, const Tensor& gallery, const Tensor& query) {
  Tape tape;
  BoundModel m(tape, model, false);
  const auto out = forward_pair(m, tape.constant(gallery), tape.constant(query));
  return {to_embedding(out.gallery), to_embedding(out.query)};
}

double nearest_rank_percentile(std::span<const double> sorted, double p) {
  if (sorted.empty()) fail(ErrorKind::EmptyInput, "percentile of an empty sample");
  const double n = static_cast<double>(sorted.size());
  // The small offset keeps exact products such as 0.4 * 10 from rounding up a rank.
  double rank = std::ceil(p / 100.0 * n - 1e-9);
  rank = std::clamp(rank, 1.0, n);
  return sorted[static_cast<std::size_t>(rank) - 1];
}

ScoreBand select_band(std::span<const double> scores, double q) {
  if (scores.empty()) fail(ErrorKind::EmptyInput, "select_band needs at least one score");
  if (!(q >= 0.0 && q <= 100.0)) fail(ErrorKind::Config, "band q must lie in [0, 100]");
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  ScoreBand band;
  band.q = q;
  band.lower = nearest_rank_percentile(sorted, 50.0 - q / 2.0);
  band.upper = nearest_rank_percentile(sorted, 50.0 + q / 2.0);
  if (q == 0.0) return band;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] >= band.lower && scores[i] <= band.upper) band.selected.push_back(i);
  }
  return band;
}

std::vector<double> dual_rescore(const Model& model, std::span<const PairRef> pairs, std::span<const double> scores,
                                 const ScoreBand& band) {
  if (pairs.size() != scores.size()) fail(ErrorKind::Shape, "dual_rescore: pair and score counts differ");
  std::vector<double> out(scores.begin(), scores.end());
  for (std::size_t idx : band.selected) {
    if (idx >= pairs.size()) fail(ErrorKind::Shape, "band index out of range");
    const PairRef& p = pairs[idx];
    const auto emb = embed_pair(model, *p.gallery, *p.query);
    out[idx] = cosine_sim(emb.query.f, emb.gallery.f);
  }
  return out;
}

}  // namespace hamobe
