#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>

namespace guardfs {

/// Lowercase hex SHA-256.
std::string sha256_hex(std::span<const std::uint8_t> data);
/// Nothing when the file cannot be read.
std::optional<std::string> sha256_file(const std::filesystem::path& path);

}  // namespace guardfs
