#pragma once

// Checkpoint archive: a flat key -> tensor map with shape/dtype headers and a
// JSON manifest, in one little-endian binary file.
//
//   magic     8 bytes  "HFRLCKPT"
//   version   u32
//   manifest  u64 length + UTF-8 JSON
//   count     u64
//   per tensor: u32 key length, key bytes, u8 dtype (1 = float64), u32 rank,
//               u64 dims[rank], raw values (row-major)

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"

#include "hfrl/autodiff.hpp"

namespace hfrl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointArchive {
  nlohmann::json manifest = nlohmann::json::object();
  std::map<std::string, ad::Matrix> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const CheckpointArchive& archive);
CheckpointArchive load_checkpoint(const std::filesystem::path& path);

}  // namespace hfrl
