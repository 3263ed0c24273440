#include "hamobe/synthetic.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "hamobe/error.hpp"
#include "hamobe/rng.hpp"

namespace hamobe {

std::string_view to_string(Cue cue) noexcept {
  switch (cue) {
    case Cue::LongTerm: return "long_term";
    case Cue::ShortTerm: return "short_term";
    case Cue::Temporal: return "temporal";
    case Cue::Mixed: return "mixed";
  }
  return "mixed";
}

Cue parse_cue(std::string_view text) {
  if (text == "long_term") return Cue::LongTerm;
  if (text == "short_term") return Cue::ShortTerm;
  if (text == "temporal") return Cue::Temporal;
  if (text == "mixed") return Cue::Mixed;
  fail(ErrorKind::Config, "unknown cue '" + std::string(text) + "'");
}

std::size_t cue_block_width(const SyntheticSpec& spec) { return spec.channels / 8; }

double subject_frequency(int subject, int num_subjects) {
  return std::numbers::pi * static_cast<double>(subject + 1) / static_cast<double>(num_subjects + 1);
}

double tracklet_phase(std::uint64_t seed, int subject, int tracklet) {
  auto rng = make_stream(seed, static_cast<std::uint64_t>(SyntheticStream::Phase),
                         static_cast<std::uint64_t>(subject), static_cast<std::uint64_t>(tracklet));
  return 2.0 * std::numbers::pi * unit_uniform(rng);
}

namespace {

void validate(const SyntheticSpec& s) {
  if (s.num_subjects < 2) fail(ErrorKind::Config, "num_subjects must be >= 2");
  if (s.tracklets_per_subject < 2) fail(ErrorKind::Config, "tracklets_per_subject must be >= 2");
  if (!(s.noise_sigma >= 0.0)) fail(ErrorKind::Config, "noise_sigma must be >= 0");
  if (s.frames == 0 || s.tokens == 0) fail(ErrorKind::Config, "frames and tokens must be positive");
  if (s.channels % 4 != 0) fail(ErrorKind::Config, "channels must be divisible by 4");
  if (s.channels < 8) {
    fail(ErrorKind::Config, "cue blocks exceed C: three blocks of width C/8 need C >= 8, got " +
                                std::to_string(s.channels));
  }
}

std::vector<double> normal_block(std::uint64_t seed, SyntheticStream tag, int a, int b, std::size_t n,
                                 double amplitude) {
  auto rng = make_stream(seed, static_cast<std::uint64_t>(tag), static_cast<std::uint64_t>(a),
                         static_cast<std::uint64_t>(b));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> out(n);
  for (auto& v : out) v = amplitude * normal(rng);
  return out;
}

}  // namespace

Dataset gen_synthetic(const SyntheticSpec& spec) {
  validate(spec);
  const std::size_t B = cue_block_width(spec);
  const std::size_t T = spec.frames, K = spec.tokens, C = spec.channels;
  const bool long_on = spec.cue == Cue::LongTerm || spec.cue == Cue::Mixed;
  const bool short_on = spec.cue == Cue::ShortTerm || spec.cue == Cue::Mixed;
  const bool temporal_on = spec.cue == Cue::Temporal || spec.cue == Cue::Mixed;
  const int n = spec.tracklets_per_subject;
  const bool holdout = n >= 4;

  Dataset ds;
  for (int s = 0; s < spec.num_subjects; ++s) {
    const auto long_offset = normal_block(spec.seed, SyntheticStream::LongOffset, s, 0, B, spec.amplitude);
    const double omega = subject_frequency(s, spec.num_subjects);
    for (int j = 0; j < n; ++j) {
      ManifestRecord rec;
      rec.subject_id = s;
      rec.tracklet_id = s * n + j;
      rec.split = Split::Train;
      rec.camera_id = j;
      int outfit = j;
      if (holdout && j == n - 2) {
        rec.split = Split::Query;
        rec.camera_id = 0;
      } else if (holdout && j == n - 1) {
        rec.split = Split::Gallery;
        rec.camera_id = 1;
        if (spec.same_clothes) outfit = n - 2;
      }
      rec.clothes_id = outfit;
      char name[64];
      std::snprintf(name, sizeof(name), "s%03d_t%02d.hfv1", s, j);
      rec.path = name;

      const auto short_offset = normal_block(spec.seed, SyntheticStream::ShortOffset, s, outfit, B, spec.amplitude);
      const double phase = tracklet_phase(spec.seed, s, j);

      Tensor data({T, K, C}, 0.0);
      auto noise_rng = make_stream(spec.seed, static_cast<std::uint64_t>(SyntheticStream::Noise),
                                   static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(j));
      std::normal_distribution<double> noise(0.0, 1.0);
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t k = 0; k < K; ++k) {
          for (std::size_t c = 0; c < C; ++c) {
            double v = 0.0;
            if (long_on && c < B) v += long_offset[c];
            if (short_on && c >= B && c < 2 * B) v += short_offset[c - B];
            if (temporal_on && c >= 2 * B && c < 3 * B) {
              const double spread = 2.0 * std::numbers::pi * static_cast<double>(c - 2 * B) / static_cast<double>(B);
              v += spec.amplitude * std::sin(omega * static_cast<double>(t) + phase + spread);
            }
            if (spec.noise_sigma > 0.0) v += spec.noise_sigma * noise(noise_rng);
            data[(t * K + k) * C + c] = static_cast<double>(static_cast<float>(v));
          }
        }
      }
      FeatureVolume vol;
      vol.data = std::move(data);
      vol.subject_id = rec.subject_id;
      vol.tracklet_id = rec.tracklet_id;
      vol.clothes_id = rec.clothes_id;
      vol.camera_id = rec.camera_id;
      ds.manifest.records.push_back(rec);
      ds.volumes.push_back(std::move(vol));
    }
  }
  return ds;
}

}  // namespace hamobe
