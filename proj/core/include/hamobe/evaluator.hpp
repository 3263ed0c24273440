#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "hamobe/dual_input.hpp"
#include "hamobe/feature_store.hpp"
#include "hamobe/model.hpp"

namespace hamobe {

// dot(a, b) / (|a| |b|); ErrorKind::DegenerateInput for a zero vector.
double cosine_sim(std::span<const double> a, std::span<const double> b);

enum class Protocol { General, SameClothes, DifferentClothes };

std::string_view to_string(Protocol p) noexcept;  // "general" | "sc" | "dc"
Protocol parse_protocol(std::string_view text);

enum class GalleryMark : std::uint8_t { Excluded, Relevant, Irrelevant };

// Marks each gallery record for one query.
//   all:     the query's own tracklet and same-subject same-camera entries are excluded
//   general: remaining same-subject entries are relevant
//   sc:      same-subject entries in other clothes are excluded
//   dc:      same-subject entries in the same clothes are excluded
// Other subjects are irrelevant. SC/DC need clothes_id (ErrorKind::Metadata).
std::vector<GalleryMark> protocol_filter(const ManifestRecord& query,
                                         std::span<const ManifestRecord> gallery, Protocol protocol);

// ranked[q][r] is true when the rank-(r+1) entry of query q is relevant.
// cmc[k] = fraction of queries whose first hit is at rank <= k+1; the curve is
// as long as the longest list.
std::vector<double> cmc_curve(const std::vector<std::vector<bool>>& ranked);
double average_precision(const std::vector<bool>& ranked);
double map_score(const std::vector<std::vector<bool>>& ranked);

struct RetrievalMetrics {
  double mAP = 0.0;
  std::vector<double> cmc;
  std::vector<std::size_t> dropped_queries;  // query rows with no relevant entry

  double top1() const { return cmc.empty() ? 0.0 : cmc.front(); }
};

// Ranks each query row by descending score (ties keep gallery order), drops
// excluded entries, and averages over queries that keep a relevant entry.
// scores and marks are row-major [num_queries x num_gallery].
RetrievalMetrics retrieval_metrics(std::span<const double> scores,
                                   const std::vector<std::vector<GalleryMark>>& marks);

struct PairScore {
  int query_tracklet = 0;
  int gallery_tracklet = 0;
  double single = 0.0;
  double final = 0.0;
  bool in_band = false;
  GalleryMark mark = GalleryMark::Excluded;
};

struct EvalOptions {
  Protocol protocol = Protocol::General;
  double q = 20.0;
};

struct EvalReport {
  Protocol protocol = Protocol::General;
  double q = 0.0;
  RetrievalMetrics metrics;       // after dual-band rescoring
  RetrievalMetrics single_input;  // before rescoring
  double band_lower = 0.0;
  double band_upper = 0.0;
  std::size_t band_size = 0;
  std::vector<PairScore> pairs;  // row-major over (query, gallery)
  std::array<double, 3> w2_mean{};
  std::array<double, 3> w2_std{};
  std::size_t num_queries = 0;
  std::size_t num_gallery = 0;
  std::vector<int> dropped_queries;  // tracklet ids
};

// Single-input embeddings of query and gallery tracklets, cosine scores, band
// selection, dual rescoring, protocol filtering, and metrics. w2 statistics run
// over every query and gallery embedding.
EvalReport evaluate(const Model& model, const Dataset& dataset, const EvalOptions& options);

void to_json(nlohmann::json& j, const EvalReport& report);

struct HeatmapGrid {
  std::size_t side = 0;
  std::vector<double> values;  // row-major side x side
};

// Frame mean of gate1[:, k, i, j] for k = 1 .. K-1, laid out as a square grid.
HeatmapGrid heatmap_grid(const Tensor& gate1, std::size_t expert, std::size_t target);

// Writes <stem>.csv (%.17g values) and <stem>.pgm (P5, min-max scaled to
// 0..255; a constant map is all zeros).
HeatmapGrid export_heatmap(const Model& model, const Tensor& volume, std::size_t expert,
                           std::size_t target, const std::filesystem::path& stem);

}  // namespace hamobe
