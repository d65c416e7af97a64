#include "slim/jsonl.hpp"

#include <fstream>

#include "slim/error.hpp"

namespace slim::jsonl {

void for_each(const std::filesystem::path& path,
              const std::function<void(const json&, std::size_t)>& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(path.string(), lineno, std::string("invalid JSON: ") + e.what());
    }
    if (!rec.is_object()) throw ParseError(path.string(), lineno, "record is not an object");
    fn(rec, lineno);
  }
}

std::vector<json> read_all(const std::filesystem::path& path) {
  std::vector<json> out;
  for_each(path, [&](const json& rec, std::size_t) { out.push_back(rec); });
  return out;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + path.string());
    for (const auto& l : lines) out << l << '\n';
    if (!out) throw InputError("write failed: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_all(const std::filesystem::path& path, const std::vector<json>& records) {
  std::vector<std::string> lines;
  lines.reserve(records.size());
  for (const auto& r : records) lines.push_back(r.dump());
  write_lines(path, lines);
}

std::string require_string(const json& rec, const char* key, const std::string& source,
                           std::size_t line) {
  auto it = rec.find(key);
  if (it == rec.end() || !it->is_string()) {
    throw ParseError(source, line, std::string("missing or non-string field '") + key + "'");
  }
  return it->get<std::string>();
}

}  // namespace slim::jsonl
