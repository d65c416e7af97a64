#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace slim::jsonl {

using nlohmann::json;

/// Calls `fn(record, line_number)` for every non-blank line. Lines are 1-based.
/// Throws InputError when the file cannot be opened and ParseError on bad JSON.
void for_each(const std::filesystem::path& path,
              const std::function<void(const json&, std::size_t)>& fn);

std::vector<json> read_all(const std::filesystem::path& path);

/// Writes one compact record per line, replacing the file atomically.
void write_all(const std::filesystem::path& path, const std::vector<json>& records);

/// Writes raw pre-serialized lines (no trailing newline expected on each).
void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);

/// Typed field access that reports the offending key and line.
std::string require_string(const json& rec, const char* key, const std::string& source,
                           std::size_t line);

}  // namespace slim::jsonl
