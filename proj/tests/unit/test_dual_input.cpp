#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "hamobe/dual_input.hpp"
#include "support.hpp"

using namespace hamobe;
using hamobe::test::expect_error;
using hamobe::test::random_tensor;

namespace {

using Row = std::vector<double>;
using Mat = std::vector<Row>;

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

Row lin_ref(const Row& x, const Tensor& w, const Tensor& b) {
  Row y(w.dim(1));
  for (std::size_t o = 0; o < y.size(); ++o) {
    double s = b[o];
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w.at({i, o});
    y[o] = s;
  }
  return y;
}

Row mlp_ref(const ModelParams& p, const std::string& prefix, const Row& x) {
  Row h = lin_ref(x, p.at(prefix + ".w1"), p.at(prefix + ".b1"));
  for (auto& v : h) v = gelu_ref(v);
  return lin_ref(h, p.at(prefix + ".w2"), p.at(prefix + ".b2"));
}

Row softmax_ref(const Row& x) {
  Row y(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) z += y[i] = std::exp(x[i]);
  for (auto& v : y) v /= z;
  return y;
}

ModelConfig dual_config(bool shared) {
  ModelConfig c;
  c.d = 2;
  c.tokens = 3;
  c.frames = 2;
  c.n1 = 2;
  c.blocks = 1;
  c.heads = 2;
  c.num_identities = 2;
  c.dual_shared_heads = shared;
  return c;
}

Tensor volume_for(const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor({c.frames, c.tokens, c.channels()}, rng, -2.0, 2.0);
}

struct OracleSide {
  Mat features;  // [T*K][C]
  Tensor first;  // [T, K, n1, n2]
  Row second;
};

// concat -> MHSA -> split -> per-side gate MLPs, evaluated with plain loops.
std::pair<OracleSide, OracleSide> dual_oracle(const Model& model, const Tensor& g, const Tensor& q) {
  const auto& c = model.config;
  const auto& p = model.params;
  const std::size_t N = c.frames * c.tokens, C = c.channels(), D = 2 * C, H = c.heads, hd = D / H;
  Mat x(N, Row(D));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t ch = 0; ch < C; ++ch) {
      x[n][ch] = g[n * C + ch];
      x[n][C + ch] = q[n * C + ch];
    }
  Mat qs(N), ks(N), vs(N);
  for (std::size_t n = 0; n < N; ++n) {
    qs[n] = lin_ref(x[n], p.at("dual.attn.wq"), p.at("dual.attn.bq"));
    ks[n] = lin_ref(x[n], p.at("dual.attn.wk"), p.at("dual.attn.bk"));
    vs[n] = lin_ref(x[n], p.at("dual.attn.wv"), p.at("dual.attn.bv"));
  }
  Mat ctx(N, Row(D, 0.0));
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t i = 0; i < N; ++i) {
      Row s(N);
      for (std::size_t j = 0; j < N; ++j) {
        double dot = 0.0;
        for (std::size_t e = 0; e < hd; ++e) dot += qs[i][h * hd + e] * ks[j][h * hd + e];
        s[j] = dot / std::sqrt(static_cast<double>(hd));
      }
      const Row a = softmax_ref(s);
      for (std::size_t j = 0; j < N; ++j)
        for (std::size_t e = 0; e < hd; ++e) ctx[i][h * hd + e] += a[j] * vs[j][h * hd + e];
    }
  OracleSide sides[2];
  const char* names[2] = {"dual.gallery", "dual.query"};
  for (int side = 0; side < 2; ++side) {
    OracleSide& o = sides[side];
    o.first = Tensor({c.frames, c.tokens, c.n1, c.n2});
    Row pooled(C, 0.0);
    for (std::size_t n = 0; n < N; ++n) {
      const Row y = lin_ref(ctx[n], p.at("dual.attn.wo"), p.at("dual.attn.bo"));
      Row f(y.begin() + static_cast<std::ptrdiff_t>(side * C), y.begin() + static_cast<std::ptrdiff_t>((side + 1) * C));
      for (std::size_t ch = 0; ch < C; ++ch) pooled[ch] += f[ch] / static_cast<double>(N);
      const Row logits = mlp_ref(p, std::string(names[side]) + ".gate1", f);
      for (std::size_t j = 0; j < c.n2; ++j) {
        Row col(c.n1);
        for (std::size_t i = 0; i < c.n1; ++i) col[i] = logits[i * c.n2 + j];
        const Row w = softmax_ref(col);
        for (std::size_t i = 0; i < c.n1; ++i) o.first[(n * c.n1 + i) * c.n2 + j] = w[i];
      }
      o.features.push_back(std::move(f));
    }
    o.second = softmax_ref(mlp_ref(p, std::string(names[side]) + ".gate2", pooled));
  }
  return {sides[0], sides[1]};
}

void expect_close(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "index " << i;
}

}  // namespace

TEST(DualCondition, MatchesStraightLineOracle) {
  const ModelConfig c = dual_config(false);
  const Model model{c, ModelParams::init(c, 31)};
  const Tensor g = volume_for(c, 32), q = volume_for(c, 33);
  const auto [og, oq] = dual_oracle(model, g, q);
  Tape tape;
  BoundModel m(tape, model, false);
  const DualConditioned d = dual_condition(m, tape.constant(g), tape.constant(q));
  const std::size_t C = c.channels();
  for (std::size_t n = 0; n < c.frames * c.tokens; ++n)
    for (std::size_t ch = 0; ch < C; ++ch) {
      EXPECT_NEAR(d.gallery_features.value()[n * C + ch], og.features[n][ch], 1e-10);
      EXPECT_NEAR(d.query_features.value()[n * C + ch], oq.features[n][ch], 1e-10);
    }
  expect_close(d.gallery.first.value(), og.first, 1e-10);
  expect_close(d.query.first.value(), oq.first, 1e-10);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(d.gallery.second.value()[i], og.second[i], 1e-10);
    EXPECT_NEAR(d.query.second.value()[i], oq.second[i], 1e-10);
  }
}

TEST(DualCondition, IdenticalInputsWithSharedHeadsGiveEqualWeights) {
  const ModelConfig c = dual_config(true);
  const Model model{c, ModelParams::init(c, 34)};
  const Tensor g = volume_for(c, 35);
  Tape tape;
  BoundModel m(tape, model, false);
  const DualConditioned d = dual_condition(m, tape.constant(g), tape.constant(g));
  // The tied halves sum the same products in a different order.
  expect_close(d.gallery.first.value(), d.query.first.value(), 1e-13);
  expect_close(d.gallery.second.value(), d.query.second.value(), 1e-13);
}

TEST(DualCondition, SwapSymmetryWithSharedHeads) {
  const ModelConfig c = dual_config(true);
  const Model model{c, ModelParams::init(c, 36)};
  const Tensor g = volume_for(c, 37), q = volume_for(c, 38);
  Tape tape;
  BoundModel m(tape, model, false);
  const DualConditioned a = dual_condition(m, tape.constant(g), tape.constant(q));
  const DualConditioned b = dual_condition(m, tape.constant(q), tape.constant(g));
  expect_close(a.gallery.first.value(), b.query.first.value(), 1e-12);
  expect_close(a.query.first.value(), b.gallery.first.value(), 1e-12);
  expect_close(a.gallery.second.value(), b.query.second.value(), 1e-12);
  expect_close(a.query.second.value(), b.gallery.second.value(), 1e-12);
}

TEST(DualCondition, ZeroValueProjectionGivesConstantFeatures) {
  const ModelConfig c = dual_config(false);
  Model model{c, ModelParams::init(c, 39)};
  for (const char* n : {"dual.attn.wv", "dual.attn.bv"}) {
    auto& t = model.params.at(n);
    t = Tensor(t.shape(), 0.0);
  }
  Tape tape;
  BoundModel m(tape, model, false);
  const DualConditioned d = dual_condition(m, tape.constant(volume_for(c, 40)), tape.constant(volume_for(c, 41)));
  const Tensor& bo = model.params.at("dual.attn.bo");
  const std::size_t C = c.channels();
  for (std::size_t n = 0; n < c.frames * c.tokens; ++n)
    for (std::size_t ch = 0; ch < C; ++ch) {
      EXPECT_EQ(d.gallery_features.value()[n * C + ch], bo[ch]);
      EXPECT_EQ(d.query_features.value()[n * C + ch], bo[C + ch]);
    }
  for (const GateWeights* w : {&d.gallery, &d.query}) {
    const Tensor& first = w->first.value();
    for (std::size_t pos = 0; pos < c.frames * c.tokens; ++pos)
      for (std::size_t j = 0; j < c.n2; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < c.n1; ++i) s += first[(pos * c.n1 + i) * c.n2 + j];
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
    const auto second = w->second.value().vec();
    EXPECT_NEAR(second[0] + second[1] + second[2], 1.0, 1e-12);
  }
}

TEST(DualCondition, ShapeMismatchIsShapeError) {
  const ModelConfig c = dual_config(false);
  const Model model{c, ModelParams::init(c, 1)};
  Tape tape;
  BoundModel m(tape, model, false);
  expect_error(
      [&] { dual_condition(m, tape.constant(volume_for(c, 1)), tape.constant(Tensor({c.frames, 2, c.channels()}))); },
      ErrorKind::Shape);
}

TEST(SelectBand, TenScoreExample) {
  std::vector<double> scores;
  for (int i = 9; i >= 0; --i) scores.push_back(0.1 * i);
  const ScoreBand b = select_band(scores, 20.0);
  EXPECT_DOUBLE_EQ(b.lower, 0.3);
  EXPECT_DOUBLE_EQ(b.upper, 0.5);
  std::vector<double> picked;
  for (auto i : b.selected) picked.push_back(scores[i]);
  ASSERT_EQ(picked.size(), 3u);
  EXPECT_DOUBLE_EQ(picked[0], 0.5);
  EXPECT_DOUBLE_EQ(picked[1], 0.4);
  EXPECT_DOUBLE_EQ(picked[2], 0.3);
}

TEST(SelectBand, DegenerateAndFullBands) {
  const std::vector<double> scores{0.2, 0.9, 0.5, 0.5, -0.1};
  EXPECT_TRUE(select_band(scores, 0.0).selected.empty());
  EXPECT_EQ(select_band(scores, 100.0).selected.size(), scores.size());
}

TEST(SelectBand, NearestRankPropertyAgainstSortOracle) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 40;
    std::vector<double> scores(n);
    for (auto& s : scores) s = std::round(u(rng) * 8.0) / 8.0;  // ties on purpose
    const double q = static_cast<double>(rng() % 101);
    const ScoreBand b = select_band(scores, q);
    std::vector<double> sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    auto rank_of = [&](double pct) {
      std::size_t r = 1;
      while (static_cast<double>(r) < pct / 100.0 * static_cast<double>(n) - 1e-9) ++r;
      return std::min(r, n);
    };
    EXPECT_EQ(b.lower, sorted[rank_of(50.0 - q / 2.0) - 1]);
    EXPECT_EQ(b.upper, sorted[rank_of(50.0 + q / 2.0) - 1]);
    EXPECT_LE(b.lower, b.upper);
    if (q == 0.0) continue;
    std::size_t expected = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool in = scores[i] >= b.lower && scores[i] <= b.upper;
      expected += in;
      EXPECT_EQ(std::count(b.selected.begin(), b.selected.end(), i), in ? 1 : 0);
    }
    EXPECT_EQ(b.selected.size(), expected);
  }
}

TEST(SelectBand, Errors) {
  expect_error([] { select_band(std::vector<double>{}, 20.0); }, ErrorKind::EmptyInput);
  expect_error([] { select_band(std::vector<double>{0.1}, 120.0); }, ErrorKind::Config);
}

TEST(DualRescore, TouchesOnlyBandPairs) {
  const ModelConfig c = dual_config(false);
  const Model model{c, ModelParams::init(c, 50)};
  std::vector<Tensor> vols;
  for (int i = 0; i < 4; ++i) vols.push_back(volume_for(c, 60 + i));
  std::vector<PairRef> pairs;
  std::vector<double> scores;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      pairs.push_back({&vols[i], &vols[j]});
      scores.push_back(0.01 * (i * 4 + j) - 0.07);
    }
  const ScoreBand band = select_band(scores, 30.0);
  ASSERT_FALSE(band.selected.empty());
  const auto out = dual_rescore(model, pairs, scores, band);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool in = std::find(band.selected.begin(), band.selected.end(), i) != band.selected.end();
    if (!in) EXPECT_EQ(out[i], scores[i]);
    if (in) {
      const auto e = embed_pair(model, *pairs[i].gallery, *pairs[i].query);
      double dot = 0, na = 0, nb = 0;
      for (std::size_t k = 0; k < c.d; ++k) {
        dot += e.query.f[k] * e.gallery.f[k];
        na += e.query.f[k] * e.query.f[k];
        nb += e.gallery.f[k] * e.gallery.f[k];
      }
      EXPECT_NEAR(out[i], dot / std::sqrt(na * nb), 1e-12);
    }
  }
  ScoreBand empty = band;
  empty.selected.clear();
  EXPECT_EQ(dual_rescore(model, pairs, scores, empty), scores);
}

TEST(DualRescore, IdenticalTrackletsScoreOne) {
  const ModelConfig c = dual_config(true);
  const Model model{c, ModelParams::init(c, 51)};
  const Tensor v = volume_for(c, 52);
  const PairRef pairs[] = {{&v, &v}};
  const double scores[] = {0.3};
  const auto out = dual_rescore(model, pairs, scores, select_band(scores, 100.0));
  EXPECT_NEAR(out[0], 1.0, 1e-9);
}
