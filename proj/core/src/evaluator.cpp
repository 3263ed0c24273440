#include "hamobe/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "hamobe/error.hpp"

namespace hamobe {

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail(ErrorKind::Shape, "cosine_sim: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) fail(ErrorKind::DegenerateInput, "cosine_sim: zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

std::string_view to_string(Protocol p) noexcept {
  switch (p) {
    case Protocol::General: return "general";
    case Protocol::SameClothes: return "sc";
    case Protocol::DifferentClothes: return "dc";
  }
  return "general";
}

Protocol parse_protocol(std::string_view text) {
  if (text == "general") return Protocol::General;
  if (text == "sc") return Protocol::SameClothes;
  if (text == "dc") return Protocol::DifferentClothes;
  fail(ErrorKind::Config, "unknown protocol '" + std::string(text) + "' (general, sc, dc)");
}

std::vector<GalleryMark> protocol_filter(const ManifestRecord& query,
                                         std::span<const ManifestRecord> gallery, Protocol protocol) {
  const bool needs_clothes = protocol != Protocol::General;
  if (needs_clothes && !query.clothes_id) {
    fail(ErrorKind::Metadata, "query tracklet " + std::to_string(query.tracklet_id) + " lacks clothes_id");
  }
  std::vector<GalleryMark> marks;
  marks.reserve(gallery.size());
  for (const auto& g : gallery) {
    if (needs_clothes && !g.clothes_id) {
      fail(ErrorKind::Metadata, "gallery tracklet " + std::to_string(g.tracklet_id) + " lacks clothes_id");
    }
    const bool own = g.tracklet_id == query.tracklet_id && g.path == query.path;
    const bool same_subject = g.subject_id == query.subject_id;
    GalleryMark mark = GalleryMark::Irrelevant;
    if (own || (same_subject && g.camera_id == query.camera_id)) {
      mark = GalleryMark::Excluded;
    } else if (same_subject) {
      const bool same_clothes = needs_clothes && *g.clothes_id == *query.clothes_id;
      if (protocol == Protocol::SameClothes && !same_clothes) {
        mark = GalleryMark::Excluded;
      } else if (protocol == Protocol::DifferentClothes && same_clothes) {
        mark = GalleryMark::Excluded;
      } else {
        mark = GalleryMark::Relevant;
      }
    }
    marks.push_back(mark);
  }
  return marks;
}

std::vector<double> cmc_curve(const std::vector<std::vector<bool>>& ranked) {
  std::size_t len = 0;
  for (const auto& r : ranked) len = std::max(len, r.size());
  std::vector<double> hits(len, 0.0);
  for (const auto& r : ranked) {
    auto it = std::find(r.begin(), r.end(), true);
    if (it != r.end()) hits[static_cast<std::size_t>(it - r.begin())] += 1.0;
  }
  std::vector<double> cmc(len, 0.0);
  double acc = 0.0;
  for (std::size_t k = 0; k < len; ++k) {
    acc += hits[k];
    cmc[k] = ranked.empty() ? 0.0 : acc / static_cast<double>(ranked.size());
  }
  return cmc;
}

double average_precision(const std::vector<bool>& ranked) {
  double sum = 0.0;
  std::size_t found = 0;
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    if (!ranked[r]) continue;
    ++found;
    sum += static_cast<double>(found) / static_cast<double>(r + 1);
  }
  return found == 0 ? 0.0 : sum / static_cast<double>(found);
}

double map_score(const std::vector<std::vector<bool>>& ranked) {
  if (ranked.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& r : ranked) sum += average_precision(r);
  return sum / static_cast<double>(ranked.size());
}

RetrievalMetrics retrieval_metrics(std::span<const double> scores,
                                   const std::vector<std::vector<GalleryMark>>& marks) {
  RetrievalMetrics out;
  const std::size_t nq = marks.size();
  const std::size_t ng = nq == 0 ? 0 : marks.front().size();
  if (scores.size() != nq * ng) fail(ErrorKind::Shape, "retrieval_metrics: score table size mismatch");
  std::vector<std::vector<bool>> ranked;
  std::vector<std::size_t> order(ng);
  for (std::size_t q = 0; q < nq; ++q) {
    if (marks[q].size() != ng) fail(ErrorKind::Shape, "retrieval_metrics: ragged marks");
    std::iota(order.begin(), order.end(), std::size_t{0});
    const double* row = scores.data() + q * ng;
    std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    std::vector<bool> list;
    bool any = false;
    for (auto g : order) {
      if (marks[q][g] == GalleryMark::Excluded) continue;
      const bool rel = marks[q][g] == GalleryMark::Relevant;
      any = any || rel;
      list.push_back(rel);
    }
    if (!any) {
      out.dropped_queries.push_back(q);
      continue;
    }
    ranked.push_back(std::move(list));
  }
  out.cmc = cmc_curve(ranked);
  out.mAP = map_score(ranked);
  return out;
}

EvalReport evaluate(const Model& model, const Dataset& dataset, const EvalOptions& options) {
  const auto qidx = dataset.indices(Split::Query);
  const auto gidx = dataset.indices(Split::Gallery);
  if (qidx.empty() || gidx.empty()) fail(ErrorKind::EmptyInput, "evaluation needs nonempty query and gallery splits");
  if (!(options.q >= 0.0 && options.q <= 100.0)) fail(ErrorKind::Config, "dual-band q must lie in [0, 100]");

  EvalReport report;
  report.protocol = options.protocol;
  report.q = options.q;
  report.num_queries = qidx.size();
  report.num_gallery = gidx.size();

  std::vector<BiometricEmbedding> qemb, gemb;
  qemb.reserve(qidx.size());
  gemb.reserve(gidx.size());
  for (auto i : qidx) qemb.push_back(embed(model, dataset.volumes[i].data));
  for (auto i : gidx) gemb.push_back(embed(model, dataset.volumes[i].data));

  std::array<double, 3> sum{}, sq{};
  auto accumulate = [&](const BiometricEmbedding& e) {
    for (std::size_t c = 0; c < 3; ++c) sum[c] += e.w2[c];
  };
  for (const auto& e : qemb) accumulate(e);
  for (const auto& e : gemb) accumulate(e);
  const double count = static_cast<double>(qemb.size() + gemb.size());
  for (std::size_t c = 0; c < 3; ++c) report.w2_mean[c] = sum[c] / count;
  auto spread = [&](const BiometricEmbedding& e) {
    for (std::size_t c = 0; c < 3; ++c) sq[c] += (e.w2[c] - report.w2_mean[c]) * (e.w2[c] - report.w2_mean[c]);
  };
  for (const auto& e : qemb) spread(e);
  for (const auto& e : gemb) spread(e);
  for (std::size_t c = 0; c < 3; ++c) report.w2_std[c] = std::sqrt(sq[c] / count);

  const std::size_t nq = qidx.size(), ng = gidx.size();
  std::vector<double> single(nq * ng);
  std::vector<PairRef> refs(nq * ng);
  for (std::size_t q = 0; q < nq; ++q) {
    for (std::size_t g = 0; g < ng; ++g) {
      single[q * ng + g] = cosine_sim(qemb[q].f, gemb[g].f);
      refs[q * ng + g] = PairRef{&dataset.volumes[qidx[q]].data, &dataset.volumes[gidx[g]].data};
    }
  }
  const ScoreBand band = select_band(single, options.q);
  report.band_lower = band.lower;
  report.band_upper = band.upper;
  report.band_size = band.selected.size();
  const std::vector<double> final_scores = dual_rescore(model, refs, single, band);

  std::vector<ManifestRecord> gallery_records;
  gallery_records.reserve(ng);
  for (auto i : gidx) gallery_records.push_back(dataset.manifest.records[i]);
  std::vector<std::vector<GalleryMark>> marks;
  marks.reserve(nq);
  for (auto i : qidx) marks.push_back(protocol_filter(dataset.manifest.records[i], gallery_records, options.protocol));

  report.single_input = retrieval_metrics(single, marks);
  report.metrics = retrieval_metrics(final_scores, marks);
  for (auto q : report.metrics.dropped_queries) report.dropped_queries.push_back(dataset.manifest.records[qidx[q]].tracklet_id);

  std::vector<bool> in_band(nq * ng, false);
  for (auto s : band.selected) in_band[s] = true;
  report.pairs.reserve(nq * ng);
  for (std::size_t q = 0; q < nq; ++q) {
    for (std::size_t g = 0; g < ng; ++g) {
      const std::size_t s = q * ng + g;
      report.pairs.push_back(PairScore{dataset.manifest.records[qidx[q]].tracklet_id,
                                       dataset.manifest.records[gidx[g]].tracklet_id, single[s], final_scores[s],
                                       in_band[s], marks[q][g]});
    }
  }
  return report;
}

namespace {

std::string_view mark_name(GalleryMark m) {
  switch (m) {
    case GalleryMark::Excluded: return "excluded";
    case GalleryMark::Relevant: return "relevant";
    case GalleryMark::Irrelevant: return "irrelevant";
  }
  return "excluded";
}

}  // namespace

void to_json(nlohmann::json& j, const EvalReport& r) {
  auto metrics = [](const RetrievalMetrics& m, std::size_t nq) {
    return nlohmann::json{{"mAP", m.mAP}, {"cmc", m.cmc}, {"evaluated_queries", nq - m.dropped_queries.size()}};
  };
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : r.pairs) {
    pairs.push_back({{"query", p.query_tracklet},
                     {"gallery", p.gallery_tracklet},
                     {"single", p.single},
                     {"final", p.final},
                     {"in_band", p.in_band},
                     {"mark", mark_name(p.mark)}});
  }
  j = nlohmann::json{{"protocol", to_string(r.protocol)},
                     {"dual_band_q", r.q},
                     {"mAP", r.metrics.mAP},
                     {"cmc", r.metrics.cmc},
                     {"single_input", metrics(r.single_input, r.num_queries)},
                     {"band", {{"lower", r.band_lower}, {"upper", r.band_upper}, {"size", r.band_size}}},
                     {"w2_mean", r.w2_mean},
                     {"w2_std", r.w2_std},
                     {"num_queries", r.num_queries},
                     {"num_gallery", r.num_gallery},
                     {"dropped_queries", r.dropped_queries},
                     {"pairs", std::move(pairs)}};
}

HeatmapGrid heatmap_grid(const Tensor& gate1, std::size_t expert, std::size_t target) {
  if (gate1.rank() != 4) fail(ErrorKind::Shape, "heatmap: gate weights must be [T, K, n1, n2]");
  const std::size_t T = gate1.dim(0), K = gate1.dim(1), n1 = gate1.dim(2), n2 = gate1.dim(3);
  if (expert >= n1 || target >= n2) fail(ErrorKind::Config, "heatmap: expert or target index out of range");
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(K - 1))));
  if (K < 2 || side * side != K - 1) {
    fail(ErrorKind::Shape, "heatmap: K - 1 = " + std::to_string(K - 1) + " is not a perfect square");
  }
  HeatmapGrid grid{side, std::vector<double>(K - 1, 0.0)};
  const auto w = gate1.data();
  for (std::size_t k = 1; k < K; ++k) {
    double acc = 0.0;
    for (std::size_t t = 0; t < T; ++t) acc += w[((t * K + k) * n1 + expert) * n2 + target];
    grid.values[k - 1] = acc / static_cast<double>(T);
  }
  return grid;
}

HeatmapGrid export_heatmap(const Model& model, const Tensor& volume, std::size_t expert, std::size_t target,
                           const std::filesystem::path& stem) {
  const HeatmapGrid grid = heatmap_grid(first_gate_weights(model, volume), expert, target);
  auto with_ext = [&](const char* ext) {
    auto p = stem;
    p += ext;
    return p;
  };
  {
    std::ofstream csv(with_ext(".csv"));
    if (!csv) fail(ErrorKind::Io, "cannot write " + with_ext(".csv").string());
    char buf[32];
    for (std::size_t r = 0; r < grid.side; ++r) {
      for (std::size_t c = 0; c < grid.side; ++c) {
        std::snprintf(buf, sizeof buf, "%.17g", grid.values[r * grid.side + c]);
        csv << (c ? "," : "") << buf;
      }
      csv << '\n';
    }
  }
  const auto [lo, hi] = std::minmax_element(grid.values.begin(), grid.values.end());
  const double range = *hi - *lo;
  std::ofstream pgm(with_ext(".pgm"), std::ios::binary);
  if (!pgm) fail(ErrorKind::Io, "cannot write " + with_ext(".pgm").string());
  pgm << "P5\n" << grid.side << ' ' << grid.side << "\n255\n";
  for (double v : grid.values) {
    const double scaled = range > 0.0 ? (v - *lo) / range * 255.0 : 0.0;
    pgm.put(static_cast<char>(static_cast<unsigned char>(std::lround(scaled))));
  }
  if (!pgm) fail(ErrorKind::Io, "short write to " + with_ext(".pgm").string());
  return grid;
}

}  // namespace hamobe
