#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cotforge {

// Writes to a sibling temp file, then renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

std::string read_file(const std::filesystem::path& path);

// Splits on '\n', dropping a trailing empty line and any '\r'.
std::vector<std::string> split_lines(std::string_view text);

std::string sha256_hex(std::string_view data);

// Shard files produced by a stage: "<stage>.<5 digits>.jsonl".
std::string shard_file_name(std::string_view stage, std::size_t index);
bool is_shard_file_name(std::string_view file_name);

// A file path is returned as-is; a directory expands to its shard files, sorted by name.
std::vector<std::filesystem::path> expand_inputs(const std::filesystem::path& path);

}  // namespace cotforge
