#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "slim/dataset.hpp"
#include "slim/embed.hpp"
#include "slim/eval.hpp"
#include "slim/llm_client.hpp"
#include "slim/rec_core.hpp"

namespace slim::pipeline {

/// Flat dotted-key configuration ("model.epochs", "paths.work", ...). Every
/// key has a typed default; unknown keys and wrongly typed values are rejected.
class Config {
 public:
  Config();

  /// Defaults overlaid with a flat JSON object from `path`.
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, const nlohmann::json& value);
  void merge(const nlohmann::json& flat);

  std::string str(const std::string& key) const;
  long long integer(const std::string& key) const;
  double real(const std::string& key) const;
  bool flag(const std::string& key) const;
  const nlohmann::json& values() const { return values_; }

  std::filesystem::path work_dir() const;
  std::filesystem::path split_dir() const { return work_dir() / "split"; }
  std::filesystem::path items_path() const { return work_dir() / "items.jsonl"; }
  std::filesystem::path cache_path() const;
  std::filesystem::path embeddings_path() const;
  std::filesystem::path checkpoint_path() const;
  std::filesystem::path reports_dir() const;
  std::filesystem::path distill_path() const;

  rec::ModelConfig model() const;
  eval::EvalConfig evaluation() const;
  EndpointConfig endpoint(const std::string& section) const;
  embed::HashEncoderConfig hash_encoder() const;

 private:
  const nlohmann::json& at(const std::string& key) const;
  nlohmann::json values_;
};

/// Output of `prepare`, reloaded and checked by later stages.
struct Prepared {
  std::string hash;
  ItemTable items;  // catalog after filtering
  SplitDataset split;
  SparsityGroups groups;
};

struct Embedded {
  std::string hash;
  std::string step;
  std::string role;
  embed::EmbeddingStore store;
};

Prepared load_prepared(const Config& cfg);
Embedded load_embedded(const Config& cfg, const Prepared& prepared);

/// Prompt for `role` ("teacher" or "student") built from the user's history
/// without the held-out test item.
RenderedPrompt role_prompt(const Config& cfg, const std::string& role, const UserSplit& user, const ItemTable& items);

/// Latest cached rationale for the user's current `role` prompt, any model.
std::optional<CacheEntry> find_rationale(const RationaleCache& cache, const Config& cfg, const std::string& role,
                                         const UserSplit& user, const ItemTable& items);

struct PrepareSummary {
  std::size_t users = 0, items = 0, interactions = 0, dropped_short = 0;
  std::string hash;
};

struct RationalizeOptions {
  std::string role = "student";   // teacher | student
  std::string users = "all";      // all | subset
  std::size_t subset_size = 100;
  std::uint64_t seed = 0;
  bool mock = false;
  std::size_t concurrency = 4;
};

struct EvalSummary {
  std::string hash;
  std::vector<eval::MetricReport> runs;
  eval::RunSummary summary;
};

PrepareSummary cmd_prepare(const Config& cfg, std::ostream& out);
GenerationResult cmd_rationalize(const Config& cfg, const RationalizeOptions& opts, std::ostream& out);
std::size_t cmd_export_distill(const Config& cfg, std::ostream& out);
std::string cmd_embed(const Config& cfg, std::ostream& out);
std::string cmd_train(const Config& cfg, std::ostream& out);
EvalSummary cmd_eval(const Config& cfg, std::ostream& out);
std::string cmd_analyze(const Config& cfg, std::ostream& out);

/// Parses argv, runs one subcommand and maps errors to exit codes
/// (0 ok, 1 internal, 2 input, 3 remote).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace slim::pipeline
