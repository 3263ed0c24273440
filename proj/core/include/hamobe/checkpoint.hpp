#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hamobe/model.hpp"

namespace hamobe {

// HPK1 layout (little-endian):
//   "HPK1" | u32 version=1 | u32 meta_len | meta JSON (UTF-8) | u32 tensor_count
//   then per tensor: u32 name_len | name | u32 rank | rank x u32 dims |
//                    u8 dtype (1 = f64) | 3 zero bytes | f64 payload
// Model tensors are stored under "params/<name>", everything else under
// "state/<name>". The meta JSON always carries the model config under "config".
inline constexpr std::uint32_t kHpk1Version = 1;

struct Checkpoint {
  Model model;
  std::map<std::string, Tensor> state;  // e.g. optimizer moments
  nlohmann::json meta = nlohmann::json::object();
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace hamobe
