#include "hamobe/feature_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "hamobe/error.hpp"

namespace hamobe {

namespace fs = std::filesystem;

std::string_view to_string(Split split) noexcept {
  switch (split) {
    case Split::Train: return "train";
    case Split::Query: return "query";
    case Split::Gallery: return "gallery";
  }
  return "train";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::Train;
  if (text == "query") return Split::Query;
  if (text == "gallery") return Split::Gallery;
  fail(ErrorKind::Format, "unknown split '" + std::string(text) + "'");
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Hfv1Header parse_header(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kHfv1HeaderBytes) {
    fail(ErrorKind::Truncation, "file holds " + std::to_string(bytes.size()) + " bytes, shorter than the " +
                                    std::to_string(kHfv1HeaderBytes) + "-byte HFV1 header");
  }
  if (std::memcmp(bytes.data(), "HFV1", 4) != 0) fail(ErrorKind::Format, "bad magic, expected HFV1");
  Hfv1Header h;
  h.version = get_u32(bytes.data() + 4);
  h.frames = get_u32(bytes.data() + 8);
  h.tokens = get_u32(bytes.data() + 12);
  h.channels = get_u32(bytes.data() + 16);
  h.dtype = bytes[20];
  if (h.version != kHfv1Version) fail(ErrorKind::Format, "unsupported HFV1 version " + std::to_string(h.version));
  if (h.dtype != 0) fail(ErrorKind::UnsupportedDtype, "dtype code " + std::to_string(h.dtype) + " is not f32");
  if (h.frames == 0 || h.tokens == 0 || h.channels == 0) fail(ErrorKind::Format, "zero extent in HFV1 header");
  return h;
}

}  // namespace

std::vector<std::uint8_t> encode_volume(const Tensor& data) {
  if (data.rank() != 3) fail(ErrorKind::Shape, "feature volume must be rank 3, got " + shape_str(data.shape()));
  if (!data.all_finite()) fail(ErrorKind::Numeric, "feature volume holds non-finite values");
  std::vector<std::uint8_t> out;
  out.reserve(kHfv1HeaderBytes + 4 * data.size());
  out.insert(out.end(), {'H', 'F', 'V', '1'});
  put_u32(out, kHfv1Version);
  put_u32(out, static_cast<std::uint32_t>(data.dim(0)));
  put_u32(out, static_cast<std::uint32_t>(data.dim(1)));
  put_u32(out, static_cast<std::uint32_t>(data.dim(2)));
  out.insert(out.end(), {0, 0, 0, 0});
  for (double v : data.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

Tensor decode_volume(const std::vector<std::uint8_t>& bytes) {
  const Hfv1Header h = parse_header(bytes);
  const std::size_t expected = std::size_t{h.frames} * h.tokens * h.channels;
  const std::size_t payload = bytes.size() - kHfv1HeaderBytes;
  if (payload != expected * 4) {
    fail(ErrorKind::Truncation, "payload holds " + std::to_string(payload / 4) + " floats (" +
                                    std::to_string(payload) + " bytes), expected " + std::to_string(expected));
  }
  if (h.channels % 4 != 0) {
    fail(ErrorKind::Shape, "channel count " + std::to_string(h.channels) + " is not divisible by 4");
  }
  std::vector<double> values(expected);
  const std::uint8_t* p = bytes.data() + kHfv1HeaderBytes;
  for (std::size_t i = 0; i < expected; ++i) {
    const float f = std::bit_cast<float>(get_u32(p + 4 * i));
    if (!std::isfinite(f)) fail(ErrorKind::Numeric, "non-finite value at element " + std::to_string(i));
    values[i] = f;
  }
  return Tensor({h.frames, h.tokens, h.channels}, std::move(values));
}

void write_volume(const Tensor& data, const fs::path& path) {
  const auto bytes = encode_volume(data);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::Io, "short write to " + path.string());
}

Tensor read_volume(const fs::path& path) { return decode_volume(read_bytes(path)); }

Hfv1Header read_header(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::vector<std::uint8_t> head(kHfv1HeaderBytes);
  in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
  head.resize(static_cast<std::size_t>(in.gcount()));
  return parse_header(head);
}

fs::path Manifest::resolve(const ManifestRecord& r) const {
  fs::path p(r.path);
  return p.is_absolute() ? p : base_dir / p;
}

namespace {

ManifestRecord record_from_json(const nlohmann::json& j, std::size_t line) {
  static const std::set<std::string> known = {"path", "subject_id", "tracklet_id", "clothes_id", "camera_id", "split"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) {
      fail(ErrorKind::Format, "manifest line " + std::to_string(line) + ": unknown field '" + key + "'");
    }
  }
  try {
    ManifestRecord r;
    r.path = j.at("path").get<std::string>();
    r.subject_id = j.at("subject_id").get<int>();
    r.tracklet_id = j.at("tracklet_id").get<int>();
    if (j.contains("clothes_id") && !j.at("clothes_id").is_null()) r.clothes_id = j.at("clothes_id").get<int>();
    r.camera_id = j.at("camera_id").get<int>();
    r.split = parse_split(j.at("split").get<std::string>());
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, "manifest line " + std::to_string(line) + ": " + e.what());
  }
}

}  // namespace

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open manifest " + path.string());
  Manifest m;
  m.base_dir = path.parent_path();
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorKind::Format, "manifest line " + std::to_string(n) + ": " + e.what());
    }
    m.records.push_back(record_from_json(j, n));
  }
  return m;
}

void write_manifest(const Manifest& manifest, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write manifest " + path.string());
  for (const auto& r : manifest.records) {
    nlohmann::ordered_json j;
    j["path"] = r.path;
    j["subject_id"] = r.subject_id;
    j["tracklet_id"] = r.tracklet_id;
    j["clothes_id"] = r.clothes_id ? nlohmann::ordered_json(*r.clothes_id) : nlohmann::ordered_json(nullptr);
    j["camera_id"] = r.camera_id;
    j["split"] = std::string(to_string(r.split));
    out << j.dump() << '\n';
  }
}

void validate_manifest(const Manifest& manifest) {
  std::set<std::string> paths;
  std::map<int, int> train_counts;
  for (const auto& r : manifest.records) {
    if (!paths.insert(r.path).second) fail(ErrorKind::Format, "duplicate manifest path " + r.path);
    if (r.split == Split::Train) ++train_counts[r.subject_id];
  }
  for (const auto& [subject, count] : train_counts) {
    if (count < 2) {
      fail(ErrorKind::Sampling, "train subject " + std::to_string(subject) + " has " + std::to_string(count) +
                                    " tracklet(s); at least 2 are required");
    }
  }
}

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < manifest.records.size(); ++i)
    if (manifest.records[i].split == split) out.push_back(i);
  return out;
}

Dataset load_dataset(const fs::path& manifest_path) {
  Dataset ds;
  ds.manifest = read_manifest(manifest_path);
  validate_manifest(ds.manifest);
  for (const auto& r : ds.manifest.records) {
    FeatureVolume v;
    v.data = read_volume(ds.manifest.resolve(r));
    v.subject_id = r.subject_id;
    v.tracklet_id = r.tracklet_id;
    v.clothes_id = r.clothes_id;
    v.camera_id = r.camera_id;
    if (!ds.volumes.empty() && v.data.shape() != ds.volumes.front().data.shape()) {
      fail(ErrorKind::Shape, "volume " + r.path + " has shape " + shape_str(v.data.shape()) +
                                 ", expected " + shape_str(ds.volumes.front().data.shape()));
    }
    ds.volumes.push_back(std::move(v));
  }
  return ds;
}

void save_dataset(const Dataset& dataset, const fs::path& dir, const std::string& manifest_name) {
  if (!fs::is_directory(dir)) fail(ErrorKind::Io, "output directory does not exist: " + dir.string());
  for (std::size_t i = 0; i < dataset.volumes.size(); ++i) {
    write_volume(dataset.volumes[i].data, dir / dataset.manifest.records[i].path);
  }
  write_manifest(dataset.manifest, dir / manifest_name);
}

}  // namespace hamobe
