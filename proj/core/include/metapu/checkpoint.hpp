#pragma once

// Binary checkpoint of MetaParams. Layout (all integers little-endian):
//
//   offset 0   8 bytes   magic "METAPUCK"
//   offset 8   uint32    format version (currently 1)
//   offset 12  uint32    manifest length L in bytes
//   offset 16  L bytes   UTF-8 JSON manifest
//   ...        float64   array payloads, little-endian, row-major, in manifest order
//
// The manifest carries the model dimensions, training settings and the
// name and shape of every stored array. See docs/checkpoint_format.md.

#include <cstdint>
#include <filesystem>

#include "metapu/model.hpp"

namespace metapu {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointManifest {
  ModelDims dims;
  double tau = 10.0;
  double lambda_init = 0.1;
  std::uint64_t seed = 0;
  long iteration = 0;
  double validation_accuracy = 0.0;
};

struct Checkpoint {
  CheckpointManifest manifest;
  MetaParams params;
};

/// Writes to a temporary sibling file and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const CheckpointManifest& manifest, const MetaParams& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Writes bytes to path via a temporary file and rename.
void write_file_atomically(const std::filesystem::path& path, const std::string& bytes);

}  // namespace metapu
