#pragma once

#include "csm/nn.h"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace csm {

// Binary checkpoint, all integers little-endian:
//
//   "CSFW"                       4 bytes magic
//   version                      u32 (= 1)
//   manifest length              u32
//   manifest                     UTF-8 text, one record per line:
//                                  spec_hash <16 hex digits>
//                                  meta <key> <value...>
//                                  tensor <name> <d0xd1...> <byte offset> <element count>
//   payload                      f64 little-endian values, tensors back to back
//   crc32                        u32 of the payload bytes
//
// Tensor byte offsets are relative to the payload start and must be contiguous.
inline constexpr char kCheckpointMagic[4] = {'C', 'S', 'F', 'W'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using CheckpointMetadata = std::map<std::string, std::string>;

struct Checkpoint {
    ParamVector params;
    CheckpointMetadata metadata;
};

std::string encode_manifest(const ParamVector & params, const CheckpointMetadata & metadata);

std::vector<std::uint8_t> encode_checkpoint(const ParamVector & params, const CheckpointMetadata & metadata = {});
// Throws CorruptFileError on any framing, manifest or checksum problem.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const ParamVector & params, const std::filesystem::path & path,
                     const CheckpointMetadata & metadata = {});
ParamVector load_checkpoint(const std::filesystem::path & path);
Checkpoint load_checkpoint_with_metadata(const std::filesystem::path & path);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

} // namespace csm
