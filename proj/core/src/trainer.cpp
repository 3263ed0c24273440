#include "hamobe/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "hamobe/dual_input.hpp"
#include "hamobe/error.hpp"
#include "hamobe/rng.hpp"

namespace hamobe {

namespace {

constexpr std::uint64_t kSamplerStream = 0x7a1e;

Var sum_all(const std::vector<Var>& terms) {
  Var acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

Var average(const std::vector<Var>& terms) {
  return scale(sum_all(terms), 1.0 / static_cast<double>(terms.size()));
}

Mode parse_mode(std::string_view text) {
  if (text == "single") return Mode::Single;
  if (text == "dual") return Mode::Dual;
  fail(ErrorKind::Format, "unknown training mode '" + std::string(text) + "'");
}

std::string rng_text(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

}  // namespace

std::string_view to_string(Mode mode) noexcept { return mode == Mode::Single ? "single" : "dual"; }

TrainIndex TrainIndex::build(const Dataset& dataset) {
  std::map<int, std::vector<std::size_t>> by_subject;
  for (auto i : dataset.indices(Split::Train)) by_subject[dataset.manifest.records[i].subject_id].push_back(i);
  TrainIndex index;
  for (auto& [subject, list] : by_subject) {
    index.subjects.push_back(subject);
    index.tracklets.push_back(std::move(list));
  }
  return index;
}

std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) {
  if (n == 0) fail(ErrorKind::Sampling, "uniform_index over an empty range");
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x = rng();
  while (x >= limit) x = rng();
  return x % n;
}

Batch sample_batch(const TrainIndex& index, std::size_t P, std::mt19937_64& rng) {
  if (P == 0) fail(ErrorKind::Sampling, "batch needs at least one identity");
  std::vector<std::size_t> eligible;
  for (std::size_t l = 0; l < index.subjects.size(); ++l)
    if (index.tracklets[l].size() >= 2) eligible.push_back(l);
  if (eligible.size() < P) {
    fail(ErrorKind::Sampling, "batch needs " + std::to_string(P) + " identities with two train tracklets, found " +
                                  std::to_string(eligible.size()));
  }
  Batch batch;
  for (std::size_t i = 0; i < P; ++i) {
    const auto pick = i + uniform_index(rng, eligible.size() - i);
    std::swap(eligible[i], eligible[pick]);
    const std::size_t label = eligible[i];
    const auto& list = index.tracklets[label];
    const auto a = uniform_index(rng, list.size());
    auto b = uniform_index(rng, list.size() - 1);
    if (b >= a) ++b;
    batch.items.push_back(BatchItem{list[a], list[b], index.subjects[label], label});
  }
  return batch;
}

Objective batch_objective(const BoundModel& m, const Dataset& dataset, const Batch& batch, Mode mode) {
  const std::size_t P = batch.items.size();
  if (P == 0) fail(ErrorKind::Sampling, "empty batch");
  Tape& tape = m.tape();
  std::vector<Var> first, second;
  for (const auto& it : batch.items) {
    first.push_back(tape.constant(dataset.volumes.at(it.first).data));
    second.push_back(tape.constant(dataset.volumes.at(it.second).data));
  }
  const std::size_t num_pairs = P >= 2 ? 2 * P : P;
  auto partner = [P](std::size_t pair) { return pair < P ? pair : (pair - P + 1) % P; };

  // outputs[2p] is the first side of pair p, outputs[2p + 1] the second side.
  std::vector<ForwardOutputs> outputs;
  std::vector<std::size_t> labels;
  std::vector<Var> ce;
  std::vector<PairSample> pairs;
  if (mode == Mode::Single) {
    outputs.reserve(2 * P);
    for (std::size_t i = 0; i < P; ++i) {
      outputs.push_back(forward(m, first[i]));
      outputs.push_back(forward(m, second[i]));
      ce.push_back(ce_loss(m, outputs[2 * i].f, batch.items[i].label));
      ce.push_back(ce_loss(m, outputs[2 * i + 1].f, batch.items[i].label));
    }
    for (std::size_t p = 0; p < num_pairs; ++p) {
      const std::size_t i = p < P ? p : p - P;
      const std::size_t j = partner(p);
      pairs.push_back(PairSample{&outputs[2 * i], &outputs[2 * j + 1], batch.items[i].subject, batch.items[j].subject});
    }
  } else {
    outputs.reserve(2 * num_pairs);
    for (std::size_t p = 0; p < num_pairs; ++p) {
      const std::size_t i = p < P ? p : p - P;
      const std::size_t j = partner(p);
      PairForward pf = forward_pair(m, second[j], first[i]);
      outputs.push_back(std::move(pf.query));
      outputs.push_back(std::move(pf.gallery));
      ce.push_back(ce_loss(m, outputs[2 * p].f, batch.items[i].label));
      ce.push_back(ce_loss(m, outputs[2 * p + 1].f, batch.items[j].label));
    }
    for (std::size_t p = 0; p < num_pairs; ++p) {
      const std::size_t i = p < P ? p : p - P;
      const std::size_t j = partner(p);
      pairs.push_back(PairSample{&outputs[2 * p], &outputs[2 * p + 1], batch.items[i].subject, batch.items[j].subject});
    }
  }
  std::vector<Var> lts, sts, ts, con;
  for (const auto& pair : pairs) {
    if (pair.same_identity()) {
      lts.push_back(lts_loss(pair));
      sts.push_back(sts_loss(pair));
      ts.push_back(ts_loss(pair));
    }
    con.push_back(contrastive_loss(pair, m.config().margin));
  }
  if (lts.empty()) fail(ErrorKind::Sampling, "batch holds no same-identity pair");
  Objective obj;
  obj.terms = LossTerms{average(ce), average(lts), average(sts), average(ts), average(con)};
  obj.total = total_loss(obj.terms, m.config().alpha, m.config().beta);
  return obj;
}

TrainState init_train_state(const ModelConfig& config, const Dataset& dataset) {
  const TrainIndex index = TrainIndex::build(dataset);
  if (index.subjects.empty()) fail(ErrorKind::Sampling, "dataset has no train split");
  const auto& ref = dataset.volumes.at(index.tracklets.front().front());
  for (const auto& v : dataset.volumes) {
    if (v.data.shape() != ref.data.shape()) {
      fail(ErrorKind::Shape, "volumes disagree in shape: " + shape_str(v.data.shape()) + " vs " +
                                 shape_str(ref.data.shape()));
    }
  }
  ModelConfig c = config;
  c.frames = ref.frames();
  c.tokens = ref.tokens();
  c.d = ref.channels() / 4;
  c.num_identities = index.subjects.size();
  c.validate();
  TrainState state;
  state.model = Model{c, ModelParams::init(c, c.seed)};
  for (const auto& [name, t] : state.model.params.tensors) {
    state.adam_m.emplace(name, Tensor(t.shape(), 0.0));
    state.adam_v.emplace(name, Tensor(t.shape(), 0.0));
  }
  state.rng = make_stream(c.seed, kSamplerStream);
  state.identities = index.subjects;
  return state;
}

Mode mode_for_step(std::size_t step, const TrainOptions& options) {
  if (!options.dual_training) return Mode::Single;
  const std::size_t cycle = options.single_per_dual + 1;
  return step % cycle == options.single_per_dual ? Mode::Dual : Mode::Single;
}

double train_step(TrainState& state, const Dataset& dataset, const Batch& batch, Mode mode, const AdamConfig& adam) {
  Tape tape;
  BoundModel m(tape, state.model, true);
  const Objective obj = batch_objective(m, dataset, batch, mode);
  const double loss = obj.total.value().item();
  if (!std::isfinite(loss)) fail(ErrorKind::Divergence, "non-finite loss at step " + std::to_string(state.step));
  tape.backward(obj.total);

  const double t = static_cast<double>(state.step + 1);
  const double c1 = 1.0 - std::pow(adam.beta1, t);
  const double c2 = 1.0 - std::pow(adam.beta2, t);
  const double lr = state.model.config.lr;
  for (const auto& [name, var] : m.vars()) {
    const Tensor g = tape.grad(var);
    auto p = state.model.params.at(name).data();
    auto mm = state.adam_m.at(name).data();
    auto vv = state.adam_v.at(name).data();
    const auto gd = g.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      mm[i] = adam.beta1 * mm[i] + (1.0 - adam.beta1) * gd[i];
      vv[i] = adam.beta2 * vv[i] + (1.0 - adam.beta2) * gd[i] * gd[i];
      p[i] -= lr * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + adam.eps);
    }
  }
  if (!state.model.params.all_finite()) {
    fail(ErrorKind::Divergence, "non-finite parameter after step " + std::to_string(state.step));
  }
  state.history.push_back(LogEntry{state.step, mode, loss});
  ++state.step;
  return loss;
}

void fit(TrainState& state, const Dataset& dataset, const TrainOptions& options) {
  const TrainIndex index = TrainIndex::build(dataset);
  if (index.subjects != state.identities) fail(ErrorKind::Config, "train identities differ from the training state");
  const std::size_t P = options.batch_identities == 0 ? index.subjects.size() : options.batch_identities;
  const bool write = !options.out_dir.empty();
  if (write) std::filesystem::create_directories(options.out_dir);
  while (state.step < options.steps) {
    const Mode mode = mode_for_step(state.step, options);
    const Batch batch = sample_batch(index, P, state.rng);
    train_step(state, dataset, batch, mode, options.adam);
    if (options.on_step) options.on_step(state);
    if (write && options.checkpoint_every != 0 && state.step % options.checkpoint_every == 0) {
      save_checkpoint(to_checkpoint(state), options.out_dir / "ckpt.hpk1");
    }
  }
  if (write) {
    save_checkpoint(to_checkpoint(state), options.out_dir / "ckpt.hpk1");
    write_train_log(state.history, options.out_dir / "train_log.csv");
  }
}

TrainState fit(const ModelConfig& config, const Dataset& dataset, const TrainOptions& options) {
  TrainState state = init_train_state(config, dataset);
  fit(state, dataset, options);
  return state;
}

Checkpoint to_checkpoint(const TrainState& state) {
  Checkpoint ckpt;
  ckpt.model = state.model;
  for (const auto& [name, t] : state.adam_m) ckpt.state.emplace("adam.m/" + name, t);
  for (const auto& [name, t] : state.adam_v) ckpt.state.emplace("adam.v/" + name, t);
  nlohmann::json history = nlohmann::json::array();
  for (const auto& e : state.history) history.push_back({e.step, to_string(e.mode), e.loss});
  ckpt.meta = {{"step", state.step},
               {"rng", rng_text(state.rng)},
               {"history", std::move(history)},
               {"identities", state.identities}};
  return ckpt;
}

TrainState from_checkpoint(const Checkpoint& ckpt) {
  TrainState state;
  state.model = ckpt.model;
  try {
    state.step = ckpt.meta.at("step").get<std::size_t>();
    std::istringstream is(ckpt.meta.at("rng").get<std::string>());
    is >> state.rng;
    if (!is) fail(ErrorKind::Format, "checkpoint RNG state is malformed");
    for (const auto& e : ckpt.meta.at("history")) {
      state.history.push_back(
          LogEntry{e.at(0).get<std::size_t>(), parse_mode(e.at(1).get<std::string>()), e.at(2).get<double>()});
    }
    state.identities = ckpt.meta.at("identities").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("checkpoint lacks training state: ") + e.what());
  }
  for (const auto& [name, t] : state.model.params.tensors) {
    auto m = ckpt.state.find("adam.m/" + name);
    auto v = ckpt.state.find("adam.v/" + name);
    if (m == ckpt.state.end() || v == ckpt.state.end()) fail(ErrorKind::Format, "checkpoint lacks moments of " + name);
    if (m->second.shape() != t.shape() || v->second.shape() != t.shape()) {
      fail(ErrorKind::Format, "checkpoint moments of " + name + " have the wrong shape");
    }
    state.adam_m.emplace(name, m->second);
    state.adam_v.emplace(name, v->second);
  }
  return state;
}

void write_train_log(const std::vector<LogEntry>& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << "step,mode,loss\n";
  char buf[64];
  for (const auto& e : history) {
    std::snprintf(buf, sizeof buf, "%.17g", e.loss);
    out << e.step << ',' << to_string(e.mode) << ',' << buf << '\n';
  }
  if (!out) fail(ErrorKind::Io, "short write to " + path.string());
}

GradCheckReport check_objective_gradient(const Model& model, const Dataset& dataset, const Batch& batch, Mode mode,
                                         double eps, double tol) {
  const ScalarFn fn = [&](Tape& tape, Var flat) {
    BoundModel m(tape, model.config, model.params, flat);
    return batch_objective(m, dataset, batch, mode).total;
  };
  return grad_check(fn, model.params.flatten(), eps, tol);
}

double classification_accuracy(const Model& model, const Dataset& dataset, const std::vector<int>& identities,
                               Split split) {
  const auto idx = dataset.indices(split);
  if (idx.empty()) fail(ErrorKind::EmptyInput, "split " + std::string(to_string(split)) + " is empty");
  const Tensor& w = model.params.at("classifier.w");
  const Tensor& b = model.params.at("classifier.b");
  const std::size_t d = w.dim(0), n = w.dim(1);
  std::size_t correct = 0;
  for (auto i : idx) {
    const auto emb = embed(model, dataset.volumes[i].data);
    std::size_t best = 0;
    double best_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) {
      double z = b.data()[c];
      for (std::size_t k = 0; k < d; ++k) z += emb.f[k] * w.data()[k * n + c];
      if (z > best_logit) {
        best_logit = z;
        best = c;
      }
    }
    if (best < identities.size() && identities[best] == dataset.manifest.records[i].subject_id) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

}  // namespace hamobe
