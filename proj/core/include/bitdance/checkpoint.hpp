#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "bitdance/matrix.hpp"

// Versioned binary checkpoint: a kind tag, the run configuration as text,
// the global step, the RNG state and named tensors.
//
// Layout: "BDCK", u32 version, then length-prefixed (u32) strings for kind,
// config and rng state, u64 step, u32 tensor count and per tensor a name,
// u32 rows, u32 cols and rows*cols little-endian IEEE-754 doubles.
namespace bitdance {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::string kind;
    std::string config_text;
    std::uint64_t step = 0;
    std::string rng_state;
    std::map<std::string, Matrix> tensors;

    // Tensors whose names start with prefix, with the prefix removed.
    std::map<std::string, Matrix> with_prefix(const std::string& prefix) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Throws FormatError on malformed files, IoError if the file cannot be read.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace bitdance
