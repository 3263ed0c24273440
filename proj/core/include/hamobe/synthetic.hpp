#pragma once

#include <cstdint>
#include <string_view>

#include "hamobe/feature_store.hpp"

namespace hamobe {

enum class Cue { LongTerm, ShortTerm, Temporal, Mixed };

std::string_view to_string(Cue cue) noexcept;
Cue parse_cue(std::string_view text);

// Planted-signal dataset description. Channel blocks of width C/8:
//   [0, C/8)       long-term: per-subject constant offset
//   [C/8, C/4)     short-term: per-clothes offset (one outfit per tracklet)
//   [C/4, 3C/8)    temporal: sinusoid over frames, subject frequency, tracklet phase
// Remaining channels and inactive blocks carry only noise.
struct SyntheticSpec {
  int num_subjects = 8;
  int tracklets_per_subject = 4;
  std::size_t frames = 4;
  std::size_t tokens = 17;
  std::size_t channels = 64;
  Cue cue = Cue::Mixed;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;
  // Gallery tracklets reuse the query tracklet's outfit (same-clothes split).
  bool same_clothes = false;
  double amplitude = 1.0;
};

// Stream tags used to derive per-entity random streams from the seed.
enum class SyntheticStream : std::uint64_t { LongOffset = 1, ShortOffset = 2, Phase = 3, Noise = 4 };

std::size_t cue_block_width(const SyntheticSpec& spec);
double subject_frequency(int subject, int num_subjects);
double tracklet_phase(std::uint64_t seed, int subject, int tracklet);

// Subjects with >= 4 tracklets hold out their last two as query and gallery;
// otherwise every tracklet is training data. Values are f32-representable.
Dataset gen_synthetic(const SyntheticSpec& spec);

}  // namespace hamobe
