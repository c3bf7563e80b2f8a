#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace heparl::io {

// Shortest decimal form that round-trips to the same double.
std::string format_double(double value);
// Fixed 17 significant digits, used by checkpoints.
std::string format_double17(double value);

double parse_double(std::string_view text);
long long parse_int(std::string_view text);

std::vector<std::string> split(std::string_view line, char sep = ',');
std::string trim(std::string_view text);

// Reads a whole file; throws Error(io) on failure.
std::string read_file(const std::filesystem::path& path);
std::vector<std::string> read_lines(const std::filesystem::path& path);

// Writes via a temporary sibling and renames into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

}  // namespace heparl::io
