#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace tqpt {

/// 64-bit FNV-1a; used for seeding substreams, not for content identity.
std::uint64_t fnv1a64(std::string_view bytes) noexcept;

/// Lowercase hex SHA-256 of a byte range / file.
std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace tqpt
