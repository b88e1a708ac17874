#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "moemui/model.hpp"

namespace moemui {

inline constexpr int kCheckpointVersion = 1;

// Checkpoint layout (see docs/formats.md):
//   line 1: JSON header {"format":"moemui-checkpoint","version":1,"spec":{...}} + '\n'
//   then every weight as IEEE-754 binary64 little-endian, row-major, in order:
//   embedding, mixer, per layer (router, shared experts, routed experts; each
//   expert w_up, w_gate, w_down), unembedding.

std::string serialize_checkpoint(const ModelParams& params);
ModelParams parse_checkpoint(std::string_view bytes);

/// Writes to a temporary sibling and renames into place.
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

/// Lowercase hex SHA-256 of `bytes`.
std::string sha256_hex(std::string_view bytes);

/// SHA-256 of the serialized checkpoint; identifies a model in trace files.
std::string fingerprint(const ModelParams& params);

std::string read_file(const std::filesystem::path& path);
/// Atomic replace via temp file + rename.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace moemui
