#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "pni/train.hpp"

namespace pni {

/// Binary layout, all integers little-endian:
///
///   0   "PNICKPT\0"
///   8   u32 format version
///   12  u64 manifest length L
///   20  manifest, L bytes of JSON: spec, epoch, rng, tensor table
///       (name, dtype "f64", shape, offset into the payload)
///   20+L payload of raw f64 values
///   end u64 FNV-1a 64 over every preceding byte, then "PNIKEND\0"
///
/// Coefficients are stored as tensors "alpha/<id>" = [value, velocity];
/// optimizer buffers as "velocity/<parameter>".
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const TrainState& state);
/// Throws IntegrityError (with the byte offset) on truncation, bad magic,
/// checksum mismatch or an inconsistent manifest; VersionError on a version
/// other than kCheckpointVersion.
TrainState deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

}  // namespace pni
