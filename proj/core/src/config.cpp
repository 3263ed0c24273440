#include "hamobe/config.hpp"

#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "hamobe/error.hpp"

namespace hamobe {

std::string_view to_string(TemporalAggregation a) noexcept {
  return a == TemporalAggregation::Decoder ? "decoder" : "mean";
}

TemporalAggregation parse_temporal_aggregation(std::string_view text) {
  if (text == "decoder") return TemporalAggregation::Decoder;
  if (text == "mean") return TemporalAggregation::MeanPool;
  fail(ErrorKind::Config, "unknown temporal aggregation '" + std::string(text) + "'");
}

void ModelConfig::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorKind::Config, m); };
  if (d == 0 || tokens == 0 || frames == 0) bad("d, tokens and frames must be positive");
  if (n2 != 3) bad("n2 must be 3 (long-term, short-term, temporal experts)");
  if (n1 < 1) bad("n1 must be >= 1");
  if (temporal == TemporalAggregation::Decoder && blocks < 1) bad("decoder needs M >= 1 blocks");
  if (heads == 0 || d % heads != 0) bad("d=" + std::to_string(d) + " is not divisible by heads=" + std::to_string(heads));
  if (num_identities < 1) bad("num_identities must be >= 1");
  if (!(alpha >= 0.0) || !(beta >= 0.0)) bad("alpha and beta must be >= 0");
  if (!(margin > 0.0)) bad("margin must be > 0");
  if (!(band_q >= 0.0 && band_q <= 100.0)) bad("q must lie in [0, 100]");
  if (!(lr >= 0.0)) bad("lr must be >= 0");
  if (dual_shared_heads && heads != 1 && heads % 2 != 0) {
    bad("dual_shared_heads needs heads == 1 or an even head count");
  }
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.frames = 2;
  c.tokens = 5;
  c.d = 4;
  c.n1 = 2;
  c.blocks = 1;
  c.num_identities = 2;
  return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d", c.d},
                     {"K", c.tokens},
                     {"T", c.frames},
                     {"n1", c.n1},
                     {"n2", c.n2},
                     {"M", c.blocks},
                     {"heads", c.heads},
                     {"num_identities", c.num_identities},
                     {"alpha", c.alpha},
                     {"beta", c.beta},
                     {"margin", c.margin},
                     {"q", c.band_q},
                     {"lr", c.lr},
                     {"seed", c.seed},
                     {"temporal_aggregation", std::string(to_string(c.temporal))},
                     {"dual_shared_heads", c.dual_shared_heads}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const std::set<std::string> known = {"d",     "K",    "T",      "n1", "n2",   "M",
                                              "heads", "num_identities", "alpha", "beta", "margin",
                                              "q",     "lr",   "seed",   "temporal_aggregation",
                                              "dual_shared_heads"};
  if (!j.is_object()) fail(ErrorKind::Config, "model config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) fail(ErrorKind::Config, "unknown model config key '" + key + "'");
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("d", c.d);
    get("K", c.tokens);
    get("T", c.frames);
    get("n1", c.n1);
    get("n2", c.n2);
    get("M", c.blocks);
    get("heads", c.heads);
    get("num_identities", c.num_identities);
    get("alpha", c.alpha);
    get("beta", c.beta);
    get("margin", c.margin);
    get("q", c.band_q);
    get("lr", c.lr);
    get("seed", c.seed);
    get("dual_shared_heads", c.dual_shared_heads);
    if (j.contains("temporal_aggregation")) {
      c.temporal = parse_temporal_aggregation(j.at("temporal_aggregation").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Config, std::string("model config: ") + e.what());
  }
}

}  // namespace hamobe
