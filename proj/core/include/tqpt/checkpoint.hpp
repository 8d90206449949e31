#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "tqpt/model.hpp"

// Binary container (little-endian):
//   "TQPT" | u32 version = 1 | u32 manifest_len | manifest JSON | data region
// The manifest lists every array as {name, shape, dtype, offset} with offsets
// relative to the start of the data region. Model parameters come first in
// canonical order, followed by any sidecar arrays.

namespace tqpt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Extra array stored next to the model parameters (quantization metadata).
struct SidecarArray {
  std::string name;
  Shape shape;
  std::variant<std::vector<float>, std::vector<std::int32_t>> values;
};

struct CheckpointContents {
  Model model;
  /// "quant" manifest section; null when the checkpoint is full precision.
  nlohmann::json quant;
  std::vector<SidecarArray> sidecars;

  const SidecarArray* find(std::string_view name) const;
};

std::vector<std::byte> encode_checkpoint(const CheckpointContents& contents);
CheckpointContents decode_checkpoint(std::span<const std::byte> bytes);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
void save_checkpoint(const CheckpointContents& contents, const std::filesystem::path& path);
/// Throws CheckpointError with a kind describing the failure.
CheckpointContents load_checkpoint(const std::filesystem::path& path);

std::vector<std::byte> read_file(const std::filesystem::path& path);
/// Writes to a temporary sibling and renames it into place.
void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes);

}  // namespace tqpt
