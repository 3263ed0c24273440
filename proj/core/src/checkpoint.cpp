#include "hamobe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "hamobe/error.hpp"

namespace hamobe {

namespace {

constexpr std::uint8_t kDtypeF64 = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_tensor(std::vector<std::uint8_t>& out, const std::string& name, const Tensor& t) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
  out.insert(out.end(), {kDtypeF64, 0, 0, 0});
  for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  const std::uint8_t* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) fail(ErrorKind::Truncation, "checkpoint ends early");
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::uint32_t u32() {
    const auto* p = take(4);
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }

  std::uint64_t u64() {
    const auto* p = take(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }

  std::string str(std::size_t n) {
    const auto* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json meta = ckpt.meta;
  meta["config"] = ckpt.model.config;
  const std::string meta_text = meta.dump();
  std::vector<std::uint8_t> out = {'H', 'P', 'K', '1'};
  put_u32(out, kHpk1Version);
  put_u32(out, static_cast<std::uint32_t>(meta_text.size()));
  out.insert(out.end(), meta_text.begin(), meta_text.end());
  put_u32(out, static_cast<std::uint32_t>(ckpt.model.params.tensors.size() + ckpt.state.size()));
  for (const auto& [name, t] : ckpt.model.params.tensors) put_tensor(out, "params/" + name, t);
  for (const auto& [name, t] : ckpt.state) put_tensor(out, "state/" + name, t);
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (std::memcmp(r.take(4), "HPK1", 4) != 0) fail(ErrorKind::Format, "bad magic, expected HPK1");
  const auto version = r.u32();
  if (version != kHpk1Version) fail(ErrorKind::Format, "unsupported HPK1 version " + std::to_string(version));
  Checkpoint ckpt;
  try {
    ckpt.meta = nlohmann::json::parse(r.str(r.u32()));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::Format, std::string("checkpoint metadata: ") + e.what());
  }
  if (!ckpt.meta.contains("config")) fail(ErrorKind::Format, "checkpoint metadata lacks the model config");
  ckpt.meta.at("config").get_to(ckpt.model.config);
  ckpt.meta.erase("config");
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.u32());
    const auto rank = r.u32();
    Shape shape(rank);
    for (auto& e : shape) e = r.u32();
    const auto* tag = r.take(4);
    if (tag[0] != kDtypeF64) fail(ErrorKind::UnsupportedDtype, "checkpoint tensor " + name + " is not f64");
    std::vector<double> values(shape_size(shape));
    for (auto& v : values) v = std::bit_cast<double>(r.u64());
    Tensor t(std::move(shape), std::move(values));
    if (name.starts_with("params/")) {
      ckpt.model.params.tensors.emplace(name.substr(7), std::move(t));
    } else if (name.starts_with("state/")) {
      ckpt.state.emplace(name.substr(6), std::move(t));
    } else {
      fail(ErrorKind::Format, "unexpected checkpoint tensor " + name);
    }
  }
  if (!r.done()) fail(ErrorKind::Format, "trailing bytes after checkpoint tensors");
  for (const auto& spec : param_layout(ckpt.model.config)) {
    auto it = ckpt.model.params.tensors.find(spec.name);
    if (it == ckpt.model.params.tensors.end()) fail(ErrorKind::Format, "checkpoint lacks parameter " + spec.name);
    if (it->second.shape() != spec.shape) fail(ErrorKind::Format, "checkpoint parameter " + spec.name + " has wrong shape");
  }
  if (ckpt.model.params.tensors.size() != param_layout(ckpt.model.config).size()) {
    fail(ErrorKind::Format, "checkpoint holds parameters not used by its config");
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::Io, "short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

}  // namespace hamobe
