#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <random>

#include "hamobe/checkpoint.hpp"
#include "hamobe/synthetic.hpp"
#include "hamobe/trainer.hpp"
#include "support.hpp"

using namespace hamobe;
using hamobe::test::expect_error;

namespace {

Dataset small_data(std::uint64_t seed, Cue cue = Cue::Mixed, double noise = 0.1) {
  SyntheticSpec s;
  s.num_subjects = 4;
  s.tracklets_per_subject = 4;
  s.frames = 2;
  s.tokens = 5;
  s.channels = 16;
  s.cue = cue;
  s.noise_sigma = noise;
  s.seed = seed;
  return gen_synthetic(s);
}

ModelConfig small_config(std::uint64_t seed) {
  ModelConfig c;
  c.n1 = 2;
  c.blocks = 1;
  c.heads = 2;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(TrainIndex, LabelsFollowAscendingSubjects) {
  const Dataset ds = small_data(1);
  const TrainIndex idx = TrainIndex::build(ds);
  EXPECT_EQ(idx.subjects, (std::vector<int>{0, 1, 2, 3}));
  for (std::size_t l = 0; l < idx.tracklets.size(); ++l) {
    EXPECT_EQ(idx.tracklets[l].size(), 2u);
    for (auto i : idx.tracklets[l]) {
      EXPECT_EQ(ds.manifest.records[i].subject_id, idx.subjects[l]);
      EXPECT_EQ(ds.manifest.records[i].split, Split::Train);
    }
  }
}

TEST(SampleBatch, AllIdentitiesAppearOnce) {
  const TrainIndex idx = TrainIndex::build(small_data(1));
  std::mt19937_64 rng(3);
  const Batch b = sample_batch(idx, 4, rng);
  std::map<int, int> seen;
  for (const auto& it : b.items) {
    ++seen[it.subject];
    EXPECT_NE(it.first, it.second);
    EXPECT_EQ(idx.subjects[it.label], it.subject);
  }
  EXPECT_EQ(seen.size(), 4u);
}

TEST(SampleBatch, SameRngStateSameBatch) {
  const TrainIndex idx = TrainIndex::build(small_data(1));
  std::mt19937_64 a(9), b(9);
  for (int i = 0; i < 20; ++i) {
    const Batch x = sample_batch(idx, 2, a), y = sample_batch(idx, 2, b);
    ASSERT_EQ(x.items.size(), y.items.size());
    for (std::size_t k = 0; k < x.items.size(); ++k) {
      EXPECT_EQ(x.items[k].first, y.items[k].first);
      EXPECT_EQ(x.items[k].second, y.items[k].second);
    }
  }
}

TEST(SampleBatch, IdentityFrequenciesWithinThreeSigma) {
  const TrainIndex idx = TrainIndex::build(small_data(1));
  std::mt19937_64 rng(2024);
  const int draws = 10000;
  const std::size_t P = 2;
  std::vector<int> count(4, 0);
  for (int i = 0; i < draws; ++i)
    for (const auto& it : sample_batch(idx, P, rng).items) ++count[it.label];
  // Each identity is in a P-of-4 draw with probability P/4.
  const double p = static_cast<double>(P) / 4.0;
  const double mean = draws * p, sigma = std::sqrt(draws * p * (1.0 - p));
  for (int c : count) EXPECT_LE(std::abs(c - mean), 3.0 * sigma) << c;
}

TEST(SampleBatch, TooFewIdentitiesIsSamplingError) {
  const TrainIndex idx = TrainIndex::build(small_data(1));
  std::mt19937_64 rng(1);
  expect_error([&] { sample_batch(idx, 5, rng); }, ErrorKind::Sampling);
  expect_error([&] { sample_batch(idx, 0, rng); }, ErrorKind::Sampling);
}

TEST(UniformIndex, CoversRange) {
  std::mt19937_64 rng(5);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) ++hits[uniform_index(rng, 7)];
  for (int h : hits) EXPECT_GT(h, 800);
}

TEST(ModeSchedule, AlternatesAndGeneralizes) {
  TrainOptions o;
  EXPECT_EQ(mode_for_step(0, o), Mode::Single);
  EXPECT_EQ(mode_for_step(1, o), Mode::Dual);
  EXPECT_EQ(mode_for_step(2, o), Mode::Single);
  o.single_per_dual = 2;
  EXPECT_EQ(mode_for_step(1, o), Mode::Single);
  EXPECT_EQ(mode_for_step(2, o), Mode::Dual);
  o.dual_training = false;
  for (std::size_t s = 0; s < 6; ++s) EXPECT_EQ(mode_for_step(s, o), Mode::Single);
}

TEST(InitState, AdoptsDataShapeAndIdentities) {
  const Dataset ds = small_data(1);
  const TrainState st = init_train_state(small_config(0), ds);
  EXPECT_EQ(st.model.config.frames, 2u);
  EXPECT_EQ(st.model.config.tokens, 5u);
  EXPECT_EQ(st.model.config.d, 4u);
  EXPECT_EQ(st.model.config.num_identities, 4u);
  EXPECT_EQ(st.identities, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(st.step, 0u);
}

TEST(TrainStep, ZeroLearningRateLeavesParamsUnchanged) {
  const Dataset ds = small_data(1);
  ModelConfig c = small_config(0);
  c.lr = 0.0;
  TrainState st = init_train_state(c, ds);
  const ModelParams before = st.model.params;
  const TrainIndex idx = TrainIndex::build(ds);
  for (Mode mode : {Mode::Single, Mode::Dual}) {
    const double loss = train_step(st, ds, sample_batch(idx, 4, st.rng), mode);
    EXPECT_TRUE(std::isfinite(loss));
  }
  EXPECT_EQ(st.model.params, before);
  EXPECT_EQ(st.step, 2u);
}

TEST(TrainStep, OneStepRecordsFiniteLoss) {
  const Dataset ds = small_data(2);
  TrainState st = init_train_state(small_config(1), ds);
  const TrainIndex idx = TrainIndex::build(ds);
  const double loss = train_step(st, ds, sample_batch(idx, 2, st.rng), Mode::Single);
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_GT(loss, 0.0);
  ASSERT_EQ(st.history.size(), 1u);
  EXPECT_EQ(st.history[0].loss, loss);
  EXPECT_EQ(st.history[0].mode, Mode::Single);
}

TEST(TrainStep, NonFiniteParameterIsDivergence) {
  const Dataset ds = small_data(2);
  TrainState st = init_train_state(small_config(1), ds);
  st.model.params.at("classifier.b")[0] = std::nan("");
  const TrainIndex idx = TrainIndex::build(ds);
  expect_error([&] { train_step(st, ds, sample_batch(idx, 2, st.rng), Mode::Single); }, ErrorKind::Divergence,
               "step 0");
}

TEST(Objective, GradientMatchesFiniteDifferences) {
  const Dataset ds = small_data(3);
  TrainState st = init_train_state(small_config(2), ds);
  const TrainIndex idx = TrainIndex::build(ds);
  std::mt19937_64 rng(4);
  const Batch batch = sample_batch(idx, 2, rng);
  for (Mode mode : {Mode::Single, Mode::Dual}) {
    const GradCheckReport r = check_objective_gradient(st.model, ds, batch, mode, 1e-6, 1e-4);
    EXPECT_TRUE(r.passed) << to_string(mode) << " max_rel " << r.max_rel_error;
    EXPECT_EQ(r.coords_checked, st.model.params.total_size());
  }
}

TEST(Fit, ZeroStepsCheckpointEqualsInit) {
  test::TempDir dir("fit0");
  const Dataset ds = small_data(1);
  TrainOptions o;
  o.steps = 0;
  o.out_dir = dir.path();
  const TrainState st = fit(small_config(7), ds, o);
  const Checkpoint ck = load_checkpoint(dir.path() / "ckpt.hpk1");
  EXPECT_EQ(ck.model.params, init_train_state(small_config(7), ds).model.params);
  EXPECT_EQ(ck.model.params, st.model.params);
  std::ifstream log(dir.path() / "train_log.csv");
  std::string header;
  std::getline(log, header);
  EXPECT_EQ(header, "step,mode,loss");
}

TEST(Fit, ResumeReproducesLossesBitExactly) {
  const Dataset ds = small_data(4);
  TrainOptions o;
  o.steps = 6;
  o.batch_identities = 2;
  const TrainState full = fit(small_config(3), ds, o);

  test::TempDir dir("resume");
  TrainOptions first = o;
  first.steps = 3;
  first.out_dir = dir.path();
  fit(small_config(3), ds, first);
  TrainState resumed = from_checkpoint(load_checkpoint(dir.path() / "ckpt.hpk1"));
  EXPECT_EQ(resumed.step, 3u);
  fit(resumed, ds, o);
  ASSERT_EQ(resumed.history.size(), full.history.size());
  for (std::size_t i = 0; i < full.history.size(); ++i) {
    EXPECT_EQ(resumed.history[i].loss, full.history[i].loss) << "step " << i;
    EXPECT_EQ(resumed.history[i].mode, full.history[i].mode);
  }
  EXPECT_EQ(resumed.model.params, full.model.params);
}

TEST(Fit, DeterministicAndLeavesInputsUntouched) {
  const Dataset ds = small_data(5);
  const Dataset copy = ds;
  TrainOptions o;
  o.steps = 4;
  const TrainState a = fit(small_config(1), ds, o);
  const TrainState b = fit(small_config(1), ds, o);
  EXPECT_EQ(a.model.params, b.model.params);
  for (std::size_t i = 0; i < ds.volumes.size(); ++i) EXPECT_EQ(ds.volumes[i].data, copy.volumes[i].data);
}

TEST(Fit, ObjectiveDecreasesOnNoiseFreeData) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Dataset ds = small_data(100 + seed, Cue::Mixed, 0.0);
    TrainState st = init_train_state(small_config(seed), ds);
    const TrainIndex idx = TrainIndex::build(ds);
    std::mt19937_64 rng(seed);
    const Batch probe = sample_batch(idx, 4, rng);
    auto objective = [&] {
      Tape tape;
      BoundModel m(tape, st.model, false);
      return batch_objective(m, ds, probe, Mode::Single).total.value().item();
    };
    const double before = objective();
    TrainOptions o;
    o.steps = 200;
    fit(st, ds, o);
    const double after = objective();
    EXPECT_LT(after, before) << "seed " << seed;
  }
}

TEST(Checkpoint, StateRoundtripIsBitExact) {
  const Dataset ds = small_data(6);
  TrainOptions o;
  o.steps = 3;
  const TrainState st = fit(small_config(2), ds, o);
  const Checkpoint ck = to_checkpoint(st);
  const Checkpoint back = decode_checkpoint(encode_checkpoint(ck));
  EXPECT_EQ(back.model.params, ck.model.params);
  EXPECT_EQ(back.state, ck.state);
  EXPECT_EQ(back.meta, ck.meta);
  const TrainState restored = from_checkpoint(back);
  EXPECT_EQ(restored.rng, st.rng);
  EXPECT_EQ(restored.adam_m, st.adam_m);
  EXPECT_EQ(restored.adam_v, st.adam_v);
  EXPECT_EQ(restored.identities, st.identities);
  EXPECT_EQ(restored.model.config.d, st.model.config.d);
}

TEST(Checkpoint, CorruptBytesAreRejected) {
  const Dataset ds = small_data(6);
  const Checkpoint ck = to_checkpoint(init_train_state(small_config(2), ds));
  auto bytes = encode_checkpoint(ck);
  auto bad = bytes;
  bad[0] = 'X';
  expect_error([&] { decode_checkpoint(bad); }, ErrorKind::Format);
  auto shortened = bytes;
  shortened.resize(bytes.size() - 5);
  expect_error([&] { decode_checkpoint(shortened); }, ErrorKind::Truncation);
  auto longer = bytes;
  longer.push_back(0);
  expect_error([&] { decode_checkpoint(longer); }, ErrorKind::Format);
}

TEST(Accuracy, RangeAndSplitHandling) {
  const Dataset ds = small_data(7);
  const TrainState st = init_train_state(small_config(0), ds);
  const double acc = classification_accuracy(st.model, ds, st.identities, Split::Train);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
}
