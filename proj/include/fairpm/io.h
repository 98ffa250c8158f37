#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace fairpm {

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

// 64-bit FNV-1a, rendered as 16 hex digits.
std::uint64_t fnv1a64(std::string_view data);
std::string hex64(std::uint64_t value);

// Shortest text that parses back to the same double.
std::string format_double(double value);

}  // namespace fairpm
