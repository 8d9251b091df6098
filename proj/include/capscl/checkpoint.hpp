#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "capscl/config.hpp"
#include "capscl/model.hpp"

namespace capscl {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct CheckpointInfo {
    RunConfig config;
    std::uint64_t seed = 0;
    std::vector<std::string> task_names;  ///< in training order
    std::vector<std::size_t> order;       ///< suite indices in training order
};

/// Writes `dir`/manifest.json, one raw little-endian float32 file per named
/// tensor under tensors/, and bit-packed (LSB first) stored masks under masks/.
void save_checkpoint(const std::filesystem::path& dir, const ContinualModel& model, const CheckpointInfo& info);

struct LoadedCheckpoint {
    CheckpointInfo info;
    ContinualModel model;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

/// Packs 0/1 bytes eight to a byte, first element in the lowest bit.
std::vector<std::uint8_t> pack_bits(const std::vector<std::uint8_t>& bits);
std::vector<std::uint8_t> unpack_bits(const std::vector<std::uint8_t>& bytes, std::size_t count);

}  // namespace capscl
