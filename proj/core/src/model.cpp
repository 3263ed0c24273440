#include "hamobe/model.hpp"

#include <cmath>
#include <random>

#include "hamobe/error.hpp"
#include "hamobe/rng.hpp"

namespace hamobe {

namespace {

void add_linear(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t in, std::size_t outd) {
  out.push_back({prefix + ".w", {in, outd}, in});
  out.push_back({prefix + ".b", {outd}, in});
}

void add_mlp(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t in, std::size_t hidden,
             std::size_t outd) {
  out.push_back({prefix + ".w1", {in, hidden}, in});
  out.push_back({prefix + ".b1", {hidden}, in});
  out.push_back({prefix + ".w2", {hidden, outd}, hidden});
  out.push_back({prefix + ".b2", {outd}, hidden});
}

void add_attention(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t dim) {
  for (const char* p : {"q", "k", "v", "o"}) {
    out.push_back({prefix + ".w" + p, {dim, dim}, dim});
    out.push_back({prefix + ".b" + p, {dim}, dim});
  }
}

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

std::vector<ParamSpec> param_layout(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d, h = c.gate_hidden(), in = c.channels();
  std::vector<ParamSpec> out;
  for (std::size_t i = 0; i < c.n1; ++i) add_linear(out, "expert1." + std::to_string(i), in, d);
  add_mlp(out, "gate1", in, h, c.n1 * c.n2);
  add_mlp(out, "long", d, d, d);
  add_mlp(out, "short", d, d, d);
  add_mlp(out, "temporal.front", d, d, d);
  if (c.temporal == TemporalAggregation::Decoder) {
    out.push_back({"temporal.pos", {c.frames, d}, d});
    out.push_back({"temporal.q0", {1, d}, d});
    for (std::size_t i = 0; i < c.blocks; ++i) {
      const std::string p = "decoder." + std::to_string(i);
      add_linear(out, p + ".temp", d, d);
      add_attention(out, p + ".attn", d);
      add_mlp(out, p + ".mlp", d, d, d);
    }
  }
  add_linear(out, "temporal.fc", d, d);
  add_mlp(out, "gate2", 3 * d, h, 3);
  add_linear(out, "classifier", d, c.num_identities);
  if (c.dual_shared_heads) {
    for (const char* p : {"q", "k", "v", "o"}) {
      const std::string base = std::string("dual.attn.") + p;
      out.push_back({base + ".self", {in, in}, 2 * in});
      out.push_back({base + ".cross", {in, in}, 2 * in});
      out.push_back({base + ".bias", {in}, 2 * in});
    }
    add_mlp(out, "dual.shared.gate1", in, h, c.n1 * c.n2);
    add_mlp(out, "dual.shared.gate2", in, h, 3);
  } else {
    add_attention(out, "dual.attn", 2 * in);
    for (const char* side : {"gallery", "query"}) {
      add_mlp(out, std::string("dual.") + side + ".gate1", in, h, c.n1 * c.n2);
      add_mlp(out, std::string("dual.") + side + ".gate2", in, h, 3);
    }
  }
  return out;
}

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) fail(ErrorKind::Config, "missing parameter " + name);
  return it->second;
}

Tensor& ModelParams::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) fail(ErrorKind::Config, "missing parameter " + name);
  return it->second;
}

std::size_t ModelParams::total_size() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors) n += t.size();
  return n;
}

bool ModelParams::all_finite() const {
  for (const auto& [_, t] : tensors)
    if (!t.all_finite()) return false;
  return true;
}

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p;
  for (const auto& spec : param_layout(config)) {
    auto rng = make_stream(seed, 0x5eed, name_hash(spec.name));
    const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
    Tensor t(spec.shape);
    for (auto& v : t.data()) v = bound * (2.0 * unit_uniform(rng) - 1.0);
    p.tensors.emplace(spec.name, std::move(t));
  }
  return p;
}

ModelParams ModelParams::zeros(const ModelConfig& config) {
  ModelParams p;
  for (const auto& spec : param_layout(config)) p.tensors.emplace(spec.name, Tensor(spec.shape, 0.0));
  return p;
}

Tensor ModelParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(total_size());
  for (const auto& [_, t] : tensors) flat.insert(flat.end(), t.data().begin(), t.data().end());
  const std::size_t n = flat.size();
  return Tensor({n}, std::move(flat));
}

void ModelParams::unflatten(const Tensor& flat) {
  if (flat.size() != total_size()) fail(ErrorKind::Shape, "flat parameter vector has the wrong length");
  std::size_t at = 0;
  for (auto& [_, t] : tensors) {
    std::copy_n(flat.data().begin() + static_cast<std::ptrdiff_t>(at), t.size(), t.data().begin());
    at += t.size();
  }
}

BoundModel::BoundModel(Tape& tape, const Model& model, bool requires_grad)
    : tape_(&tape), config_(model.config) {
  for (const auto& [name, t] : model.params.tensors) vars_.emplace(name, tape.leaf(t, requires_grad));
}

BoundModel::BoundModel(Tape& tape, const ModelConfig& config, const ModelParams& layout, Var flat)
    : tape_(&tape), config_(config) {
  std::size_t at = 0;
  for (const auto& [name, t] : layout.tensors) {
    vars_.emplace(name, reshape(slice(flat, 0, at, at + t.size()), t.shape()));
    at += t.size();
  }
}

Var BoundModel::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) fail(ErrorKind::Config, "missing parameter " + name);
  return it->second;
}

void check_volume_shape(const ModelConfig& c, const Tensor& v) {
  if (v.rank() != 3 || v.dim(0) != c.frames || v.dim(1) != c.tokens || v.dim(2) != c.channels()) {
    fail(ErrorKind::Shape, "volume " + shape_str(v.shape()) + " does not match config [" +
                               std::to_string(c.frames) + "x" + std::to_string(c.tokens) + "x" +
                               std::to_string(c.channels()) + "]");
  }
}

Var mlp(const BoundModel& m, const std::string& prefix, Var x) {
  Var h = gelu(linear(x, m[prefix + ".w1"], m[prefix + ".b1"]));
  return linear(h, m[prefix + ".w2"], m[prefix + ".b2"]);
}

std::vector<Var> first_layer_forward(const BoundModel& m, Var volume) {
  const auto& c = m.config();
  if (volume.shape().back() != c.channels()) {
    fail(ErrorKind::Shape, "first layer expects " + std::to_string(c.channels()) + " channels, got " +
                               shape_str(volume.shape()));
  }
  std::vector<Var> out;
  out.reserve(c.n1);
  for (std::size_t i = 0; i < c.n1; ++i) {
    const std::string p = "expert1." + std::to_string(i);
    out.push_back(gelu(linear(volume, m[p + ".w"], m[p + ".b"])));
  }
  return out;
}

namespace {

// Logits [..., n1*n2] -> simplex weights [..., n1, n2] normalized over n1.
Var gate_weights_from_logits(Var logits, std::size_t n1, std::size_t n2) {
  Shape s = logits.shape();
  s.back() = n1;
  s.push_back(n2);
  return softmax(reshape(logits, s), s.size() - 2);
}

void check_simplex(const Tensor& w, std::size_t axis, double tol, const char* what) {
  const Shape& s = w.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      double total = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double v = w[(o * len + l) * inner + in];
        if (v < -tol) fail(ErrorKind::Invariant, std::string(what) + " has a negative weight");
        total += v;
      }
      if (std::abs(total - 1.0) > tol) {
        fail(ErrorKind::Invariant, std::string(what) + " weights sum to " + std::to_string(total) + ", not 1");
      }
    }
  }
}

Var pool_tokens(Var mixed) {
  // [T, K, d] -> [T, d]
  return mean_axis(mixed, 1);
}

}  // namespace

Var gate1_forward(const BoundModel& m, Var volume) {
  const auto& c = m.config();
  return gate_weights_from_logits(mlp(m, "gate1", volume), c.n1, c.n2);
}

std::vector<Var> mix_layers(std::span<const Var> experts, Var weights) {
  const Tensor& w = weights.value();
  if (w.rank() < 2) fail(ErrorKind::Shape, "gating tensor must have rank >= 2");
  check_simplex(w, w.rank() - 2, 1e-6, "first-layer gate");
  const std::size_t n2 = w.shape().back();
  std::vector<Var> out;
  out.reserve(n2);
  for (std::size_t j = 0; j < n2; ++j) out.push_back(mix_experts(experts, weights, j));
  return out;
}

namespace {

StreamOutput pooled_stream(const BoundModel& m, const std::string& prefix, Var mixed) {
  if (mixed.value().rank() != 3 || mixed.shape().back() != m.config().d) {
    fail(ErrorKind::Shape, prefix + " expert expects [T x K x d], got " + shape_str(mixed.shape()));
  }
  StreamOutput out;
  out.frames = mlp(m, prefix, pool_tokens(mixed));
  out.pooled = mean_axis(out.frames, 0);
  return out;
}

}  // namespace

StreamOutput long_term_forward(const BoundModel& m, Var mixed) { return pooled_stream(m, "long", mixed); }

StreamOutput short_term_forward(const BoundModel& m, Var mixed) { return pooled_stream(m, "short", mixed); }

StreamOutput temporal_forward(const BoundModel& m, Var mixed) {
  const auto& c = m.config();
  StreamOutput s = pooled_stream(m, "temporal.front", mixed);
  if (c.temporal == TemporalAggregation::MeanPool) {
    s.pooled = linear(s.pooled, m["temporal.fc.w"], m["temporal.fc.b"]);
    return s;
  }
  if (c.blocks == 0) fail(ErrorKind::Config, "temporal decoder needs M >= 1");
  if (s.frames.shape()[0] != c.frames) fail(ErrorKind::Shape, "temporal expert frame count differs from config T");
  Var tokens = add(s.frames, m["temporal.pos"]);
  Var q = m["temporal.q0"];
  for (std::size_t i = 0; i < c.blocks; ++i) {
    const std::string p = "decoder." + std::to_string(i);
    Var y = linear(tokens, m[p + ".temp.w"], m[p + ".temp.b"]);
    const MhsaWeights w{m[p + ".attn.wq"], m[p + ".attn.bq"], m[p + ".attn.wk"], m[p + ".attn.bk"],
                        m[p + ".attn.wv"], m[p + ".attn.bv"], m[p + ".attn.wo"], m[p + ".attn.bo"]};
    Var refined = add(q, mhsa_forward(q, y, y, c.heads, w));
    q = add(refined, mlp(m, p + ".mlp", refined));
  }
  s.pooled = reshape(linear(q, m["temporal.fc.w"], m["temporal.fc.b"]), {c.d});
  return s;
}

Var gate2_forward(const BoundModel& m, Var f1, Var f2, Var f3) {
  if (f1.shape() != f2.shape() || f1.shape() != f3.shape() || f1.value().rank() != 3) {
    fail(ErrorKind::Shape, "second-layer gate inputs must share [T x K x d]");
  }
  const std::size_t d = f1.shape().back();
  const std::size_t positions = f1.size() / d;
  std::vector<Var> pooled;
  for (Var f : {f1, f2, f3}) pooled.push_back(mean_axis(reshape(f, {positions, d}), 0));
  return softmax(mlp(m, "gate2", concat(pooled, 0)), 0);
}

Var fuse_embedding(Var f_long, Var f_short, Var f_temporal, Var w2) {
  const std::size_t d = f_long.size();
  if (f_short.size() != d || f_temporal.size() != d) fail(ErrorKind::Shape, "fuse_embedding: feature sizes differ");
  if (w2.size() != 3) fail(ErrorKind::Shape, "fuse_embedding: w2 must have 3 entries");
  check_simplex(w2.value().reshaped({3}), 0, 1e-6, "second-layer gate");
  const Var rows[] = {reshape(f_long, {1, d}), reshape(f_short, {1, d}), reshape(f_temporal, {1, d})};
  return reshape(matmul(reshape(w2, {1, 3}), concat(rows, 0)), {d});
}

ForwardOutputs forward(const BoundModel& m, Var volume, const GateWeights* gates) {
  const auto& c = m.config();
  check_volume_shape(c, volume.value());
  ForwardOutputs out;
  out.experts = first_layer_forward(m, volume);
  out.gate1 = gates ? gates->first : gate1_forward(m, volume);
  out.mixed = mix_layers(out.experts, out.gate1);
  out.long_term = long_term_forward(m, out.mixed[0]);
  out.short_term = short_term_forward(m, out.mixed[1]);
  out.temporal = temporal_forward(m, out.mixed[2]);
  out.w2 = gates ? gates->second : gate2_forward(m, out.mixed[0], out.mixed[1], out.mixed[2]);
  out.f = fuse_embedding(out.long_term.pooled, out.short_term.pooled, out.temporal.pooled, out.w2);
  return out;
}

Var classifier_logits(const BoundModel& m, Var f) { return linear(f, m["classifier.w"], m["classifier.b"]); }

BiometricEmbedding to_embedding(const ForwardOutputs& out) {
  auto v = [](Var x) { return x.value().vec(); };
  return {v(out.long_term.pooled), v(out.short_term.pooled), v(out.temporal.pooled), v(out.f), v(out.w2)};
}

BiometricEmbedding embed(const Model& model, const Tensor& volume) {
  Tape tape;
  BoundModel m(tape, model, false);
  return to_embedding(forward(m, tape.constant(volume)));
}

Tensor first_gate_weights(const Model& model, const Tensor& volume) {
  Tape tape;
  BoundModel m(tape, model, false);
  check_volume_shape(model.config, volume);
  return gate1_forward(m, tape.constant(volume)).value();
}

}  // namespace hamobe
