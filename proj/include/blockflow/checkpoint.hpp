#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockflow/tensor.hpp"

namespace blockflow {

// Versioned binary container shared by the VAE and flow models:
//   "BFCK" | u32 version | u32 len, component tag | u32 len, config JSON |
//   u32 count | per tensor: u32 len, name | u32 rank | u64 dims... | f64 payload
// All integers and floats little-endian.
inline constexpr char kCheckpointMagic[4] = {'B', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string component;
  nlohmann::json config;
  std::vector<std::pair<std::string, Tensor>> tensors;

  std::map<std::string, Tensor> tensor_map() const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

// Atomic: writes a temp file, then renames.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_component = "");

}  // namespace blockflow
