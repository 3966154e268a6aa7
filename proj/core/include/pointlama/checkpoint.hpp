#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "pointlama/param_store.hpp"

namespace pointlama {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeFloat64 = 1;

/// Checkpoint does not fit the model it is loaded into.
class CheckpointMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
  std::string name;
  DenseArray value;
};

/// "PLMA", version u32, count u32, then per entry: u32 name length, UTF-8
/// name, u8 dtype tag, u32 rank, u64 dims, raw little-endian data.
std::string encode_checkpoint(const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> decode_checkpoint(const std::string& bytes);

std::vector<CheckpointEntry> snapshot(const ParamStore& store);
void save_checkpoint(const std::filesystem::path& path, const ParamStore& store);
void save_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path);

/// Copies every store parameter whose name starts with `prefix` from the
/// checkpoint. Throws CheckpointMismatch naming the first parameter that is
/// missing or has a different shape. Returns the number of entries loaded.
std::size_t load_into(ParamStore& store, const std::vector<CheckpointEntry>& entries,
                      const std::string& prefix = "");

}  // namespace pointlama
