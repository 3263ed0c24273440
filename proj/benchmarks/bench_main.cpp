#include <benchmark/benchmark.h>

#include <random>

#include "hamobe/dual_input.hpp"
#include "hamobe/evaluator.hpp"
#include "hamobe/feature_store.hpp"
#include "hamobe/synthetic.hpp"
#include "hamobe/trainer.hpp"

using namespace hamobe;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

SyntheticSpec desk_spec(std::size_t tokens, std::size_t channels) {
  SyntheticSpec s;
  s.tokens = tokens;
  s.channels = channels;
  return s;
}

}  // namespace

static void BM_Attention(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t D = 64;
  const Tensor q = random_tensor({n, D}, 1), k = random_tensor({n, D}, 2), v = random_tensor({n, D}, 3);
  for (auto _ : state) {
    Tape tape;
    Var out = attention(tape.leaf(q), tape.leaf(k), tape.leaf(v), 2);
    tape.backward(sum(out));
    benchmark::DoNotOptimize(tape.grad(out).size());
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Attention)->RangeMultiplier(2)->Range(16, 128)->Complexity();

static void BM_EmbedSingle(benchmark::State& state) {
  const Dataset ds = gen_synthetic(desk_spec(static_cast<std::size_t>(state.range(0)), 64));
  const TrainState st = init_train_state(ModelConfig{}, ds);
  for (auto _ : state) benchmark::DoNotOptimize(embed(st.model, ds.volumes[0].data));
}
BENCHMARK(BM_EmbedSingle)->Arg(5)->Arg(17);

static void BM_EmbedPair(benchmark::State& state) {
  const Dataset ds = gen_synthetic(desk_spec(static_cast<std::size_t>(state.range(0)), 64));
  const TrainState st = init_train_state(ModelConfig{}, ds);
  for (auto _ : state) benchmark::DoNotOptimize(embed_pair(st.model, ds.volumes[0].data, ds.volumes[1].data));
}
BENCHMARK(BM_EmbedPair)->Arg(5)->Arg(17);

static void BM_TrainStep(benchmark::State& state) {
  const Mode mode = state.range(0) == 0 ? Mode::Single : Mode::Dual;
  const Dataset ds = gen_synthetic(desk_spec(5, 32));
  TrainState st = init_train_state(ModelConfig{}, ds);
  const TrainIndex index = TrainIndex::build(ds);
  for (auto _ : state) {
    const Batch batch = sample_batch(index, 4, st.rng);
    benchmark::DoNotOptimize(train_step(st, ds, batch, mode));
  }
  state.SetLabel(std::string(to_string(mode)));
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

static void BM_Evaluate(benchmark::State& state) {
  const Dataset ds = gen_synthetic(desk_spec(5, 32));
  const TrainState st = init_train_state(ModelConfig{}, ds);
  for (auto _ : state) benchmark::DoNotOptimize(evaluate(st.model, ds, {Protocol::General, 20.0}));
}
BENCHMARK(BM_Evaluate)->Unit(benchmark::kMillisecond);

static void BM_RetrievalMetrics(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor scores = random_tensor({n, n}, 4);
  std::vector<std::vector<GalleryMark>> marks(n, std::vector<GalleryMark>(n, GalleryMark::Irrelevant));
  for (std::size_t q = 0; q < n; ++q) marks[q][(q * 7) % n] = GalleryMark::Relevant;
  for (auto _ : state) benchmark::DoNotOptimize(retrieval_metrics(scores.data(), marks));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_RetrievalMetrics)->RangeMultiplier(4)->Range(16, 1024)->Complexity();

static void BM_Hfv1Roundtrip(benchmark::State& state) {
  const Tensor v = random_tensor({16, 257, 64}, 5);
  for (auto _ : state) benchmark::DoNotOptimize(decode_volume(encode_volume(v)));
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations()) * static_cast<std::int64_t>(v.size() * 4));
}
BENCHMARK(BM_Hfv1Roundtrip);
BENCHMARK_MAIN();
