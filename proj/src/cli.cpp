#include <memory>
#include <ostream>

#include "CLI11.hpp"
#include "slim/error.hpp"
#include "slim/pipeline.hpp"

namespace slim::pipeline {

namespace {

struct Override {
  std::string key;
  std::string value;
};

nlohmann::json convert(const Config& cfg, const Override& o) {
  const auto& def = cfg.values().at(o.key);
  try {
    std::size_t used = 0;
    if (def.is_number_integer()) {
      const long long v = std::stoll(o.value, &used);
      if (used == o.value.size()) return v;
    } else if (def.is_number()) {
      const double v = std::stod(o.value, &used);
      if (used == o.value.size()) return v;
    } else if (def.is_boolean()) {
      if (o.value == "true" || o.value == "1") return true;
      if (o.value == "false" || o.value == "0") return false;
    } else {
      return o.value;
    }
  } catch (const std::exception&) {
  }
  throw InputError("invalid value '" + o.value + "' for " + o.key);
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Step-by-step rationale distillation for sequential recommendation"};
  app.name("slim");
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  app.add_option("--config", config_path, "Flat JSON config file");
  std::vector<std::unique_ptr<Override>> overrides;
  auto bind = [&](CLI::App* cmd, const std::string& flag, const std::string& key, const std::string& help) {
    overrides.push_back(std::make_unique<Override>(Override{key, {}}));
    cmd->add_option(flag, overrides.back()->value, help);
  };
  bind(&app, "--work", "paths.work", "Working directory for stage artifacts");
  bind(&app, "--cache", "paths.cache", "Rationale cache file");

  auto* prepare = app.add_subcommand("prepare", "Load, 5-core filter and leave-one-out split the raw data");
  bind(prepare, "--items", "paths.items", "Items file");
  bind(prepare, "--interactions", "paths.interactions", "Interactions file");
  bind(prepare, "--k", "data.k_core", "k for k-core filtering");
  bind(prepare, "--max-users", "data.max_users", "Sample at most this many users (0 = all)");

  auto* rationalize = app.add_subcommand("rationalize", "Generate rationales into the cache");
  RationalizeOptions ropts;
  bool mock = false;
  bind(rationalize, "--role", "rationalize.role", "teacher or student");
  bind(rationalize, "--users", "rationalize.users", "subset or all");
  bind(rationalize, "--subset-size", "rationalize.subset_size", "Users in the teacher subset");
  bind(rationalize, "--seed", "rationalize.seed", "Seed for the subset draw");
  bind(rationalize, "--concurrency", "rationalize.concurrency", "Requests in flight");
  bind(rationalize, "--teacher-template", "paths.teacher_template", "Teacher prompt template file");
  bind(rationalize, "--student-template", "paths.student_template", "Student prompt template file");
  rationalize->add_flag("--mock", mock, "Use the deterministic mock LLM");

  auto* export_distill = app.add_subcommand("export-distill", "Write the student fine-tuning corpus");
  bind(export_distill, "--out", "distill.out", "Output file");
  bind(export_distill, "--limit", "distill.limit", "Maximum examples (0 = all)");
  bind(export_distill, "--teacher-template", "paths.teacher_template", "Teacher prompt template file");
  bind(export_distill, "--student-template", "paths.student_template", "Student prompt template file");

  auto* embed = app.add_subcommand("embed", "Embed item texts and rationales");
  bind(embed, "--provider", "embedding.provider", "hash, file or remote");
  bind(embed, "--step", "embedding.step", "Rationale step: 1, 2, 3 or all");
  bind(embed, "--role", "embedding.role", "Whose rationales to embed: teacher or student");
  bind(embed, "--dim", "embedding.dimension", "Hash embedding dimension");
  bind(embed, "--file", "embedding.file", "Precomputed store for the file provider");

  auto* train = app.add_subcommand("train", "Train a sequential recommender");
  bind(train, "--mode", "model.mode", "id, id-text, slim or agnostic");
  bind(train, "--backbone", "model.backbone", "mean, gru or attention");
  bind(train, "--epochs", "model.epochs", "Training epochs");
  bind(train, "--lr", "model.lr", "Learning rate");
  bind(train, "--neg", "model.negatives", "Negatives per positive");
  bind(train, "--seed", "model.seed", "Model seed");
  bind(train, "--dim", "model.id_dim", "ID embedding size");
  bind(train, "--max-len", "model.max_seq_len", "Maximum sequence length");
  bind(train, "--batch-size", "model.batch_size", "Pairs per batch");
  bind(train, "--pairs", "model.pairs", "all-prefixes or last-only");
  bind(train, "--backbone-input", "model.backbone_input", "fused or id");
  bind(train, "--optimizer", "model.optimizer", "sgd or adam");

  auto* evaluate = app.add_subcommand("eval", "Negative-sampled ranking evaluation");
  bind(evaluate, "--step", "eval.step", "Re-embed rationales with this step: 1, 2, 3 or all");
  bind(evaluate, "--runs", "eval.runs", "Re-seeded runs (mean and sample std)");
  bind(evaluate, "--seed", "eval.seed", "Negative sampling seed");
  bind(evaluate, "--negatives", "eval.negatives", "Negatives per test user");
  bind(evaluate, "--split", "eval.split", "test or val");
  bind(evaluate, "--out", "eval.out", "Report file");

  auto* analyze = app.add_subcommand("analyze", "Popularity-bias and sparsity-group analysis");
  bind(analyze, "--k", "eval.k", "Top-k for the frequency table");
  bind(analyze, "--seed", "eval.seed", "Negative sampling seed");
  bind(analyze, "--negatives", "eval.negatives", "Negatives per test user");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    Config cfg = config_path.empty() ? Config() : Config::load(config_path);
    for (const auto& o : overrides) {
      if (!o->value.empty()) cfg.set(o->key, convert(cfg, *o));
    }
    if (*prepare) {
      cmd_prepare(cfg, out);
    } else if (*rationalize) {
      ropts.role = cfg.str("rationalize.role");
      ropts.users = cfg.str("rationalize.users");
      ropts.subset_size = static_cast<std::size_t>(cfg.integer("rationalize.subset_size"));
      ropts.seed = static_cast<std::uint64_t>(cfg.integer("rationalize.seed"));
      ropts.concurrency = static_cast<std::size_t>(cfg.integer("rationalize.concurrency"));
      ropts.mock = mock || cfg.flag("rationalize.mock");
      cmd_rationalize(cfg, ropts, out);
    } else if (*export_distill) {
      cmd_export_distill(cfg, out);
    } else if (*embed) {
      cmd_embed(cfg, out);
    } else if (*train) {
      cmd_train(cfg, out);
    } else if (*evaluate) {
      cmd_eval(cfg, out);
    } else if (*analyze) {
      cmd_analyze(cfg, out);
    }
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const SizeError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const RemoteError& e) {
    err << "remote error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace slim::pipeline
