#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

#include <nlohmann/json_fwd.hpp>

namespace hamobe {

enum class TemporalAggregation { Decoder, MeanPool };

std::string_view to_string(TemporalAggregation a) noexcept;
TemporalAggregation parse_temporal_aggregation(std::string_view text);

struct ModelConfig {
  std::size_t d = 1024;          // per-layer token width; input volumes carry 4*d channels
  std::size_t tokens = 257;      // K, CLS included
  std::size_t frames = 16;       // T
  std::size_t n1 = 8;            // first-layer experts
  std::size_t n2 = 3;            // second-layer experts (long, short, temporal)
  std::size_t blocks = 4;        // M decoder blocks
  std::size_t heads = 2;
  std::size_t num_identities = 1;
  double alpha = 0.5;
  double beta = 1.0;
  double margin = 4.0;
  double band_q = 20.0;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  TemporalAggregation temporal = TemporalAggregation::Decoder;
  // Gallery and query gating heads share weights and the pair attention is
  // tied so that swapping the inputs swaps the outputs.
  bool dual_shared_heads = false;

  std::size_t channels() const { return 4 * d; }
  std::size_t gate_hidden() const { return d; }

  // Throws ErrorKind::Config on violation.
  void validate() const;
};

// Smallest config used for whole-model gradient checks:
// T = 2, K = 5, d = 4, n1 = 2, M = 1.
ModelConfig tiny_config();

void to_json(nlohmann::json& j, const ModelConfig& c);
// Strict: unknown keys are rejected; missing keys keep their defaults.
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace hamobe
