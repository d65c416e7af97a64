#include "slim/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "slim/distill.hpp"
#include "slim/error.hpp"
#include "slim/hashing.hpp"
#include "slim/jsonl.hpp"
#include "slim/prompts.hpp"

namespace slim::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// config

Config::Config() {
  values_ = json::object({
      {"paths.items", ""},
      {"paths.interactions", ""},
      {"paths.work", "slim-work"},
      {"paths.cache", ""},
      {"paths.embeddings", ""},
      {"paths.checkpoint", ""},
      {"paths.reports", ""},
      {"paths.teacher_template", ""},
      {"paths.student_template", ""},
      {"data.k_core", 5},
      {"data.groups", 5},
      {"data.max_users", 0},
      {"data.seed", 0},
      {"teacher.base_url", ""},
      {"teacher.model", "gpt-3.5-turbo"},
      {"teacher.api_key_env", "OPENAI_API_KEY"},
      {"teacher.max_tokens", 300},
      {"teacher.temperature", 0.0},
      {"teacher.timeout_s", 60.0},
      {"teacher.max_retries", 3},
      {"student.base_url", ""},
      {"student.model", "student"},
      {"student.api_key_env", "OPENAI_API_KEY"},
      {"student.max_tokens", 300},
      {"student.temperature", 0.0},
      {"student.timeout_s", 60.0},
      {"student.max_retries", 3},
      {"embedding.provider", "hash"},
      {"embedding.dimension", 768},
      {"embedding.ngram_max", 2},
      {"embedding.seed", 0},
      {"embedding.file", ""},
      {"embedding.base_url", ""},
      {"embedding.model", "text-embedding-3-small"},
      {"embedding.api_key_env", "OPENAI_API_KEY"},
      {"embedding.timeout_s", 60.0},
      {"embedding.max_retries", 3},
      {"embedding.batch_size", 100},
      {"embedding.step", "all"},
      {"embedding.role", "student"},
      {"rationalize.role", "student"},
      {"rationalize.users", "all"},
      {"rationalize.subset_size", 100},
      {"rationalize.seed", 0},
      {"rationalize.mock", false},
      {"rationalize.concurrency", 4},
      {"distill.out", ""},
      {"distill.limit", 0},
      {"distill.alpha", 0.1},
      {"model.mode", "slim"},
      {"model.backbone", "mean"},
      {"model.id_dim", 64},
      {"model.match_dim", 64},
      {"model.max_seq_len", 50},
      {"model.lr", 0.5},
      {"model.epochs", 10},
      {"model.negatives", 1},
      {"model.batch_size", 32},
      {"model.seed", 42},
      {"model.pairs", "all-prefixes"},
      {"model.backbone_input", "fused"},
      {"model.optimizer", "sgd"},
      {"eval.negatives", 100},
      {"eval.seed", 0},
      {"eval.runs", 1},
      {"eval.split", "test"},
      {"eval.step", ""},
      {"eval.k", 10},
      {"eval.out", ""},
  });
}

Config Config::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config file " + path.string());
  json flat;
  try {
    flat = json::parse(in);
  } catch (const json::exception& e) {
    throw InputError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  Config cfg;
  cfg.merge(flat);
  return cfg;
}

void Config::merge(const json& flat) {
  if (!flat.is_object()) throw InputError("config must be a flat JSON object");
  for (const auto& [key, value] : flat.items()) set(key, value);
}

void Config::set(const std::string& key, const json& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw InputError("unknown config key '" + key + "'");
  const bool ok = it->is_string()             ? value.is_string()
                  : it->is_boolean()          ? value.is_boolean()
                  : it->is_number_integer()   ? value.is_number_integer()
                  : it->is_number()           ? value.is_number()
                                              : false;
  if (!ok) throw InputError("config key '" + key + "' has the wrong type");
  if (it->is_number_integer() && value.get<long long>() < 0) {
    throw InputError("config key '" + key + "' must be non-negative");
  }
  *it = it->is_number_float() ? json(value.get<double>()) : value;
}

const json& Config::at(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw InputError("unknown config key '" + key + "'");
  return *it;
}

std::string Config::str(const std::string& key) const { return at(key).get<std::string>(); }
long long Config::integer(const std::string& key) const { return at(key).get<long long>(); }
double Config::real(const std::string& key) const { return at(key).get<double>(); }
bool Config::flag(const std::string& key) const { return at(key).get<bool>(); }

fs::path Config::work_dir() const { return str("paths.work"); }

namespace {
fs::path or_default(const std::string& value, const fs::path& fallback) {
  return value.empty() ? fallback : fs::path(value);
}
}  // namespace

fs::path Config::cache_path() const { return or_default(str("paths.cache"), work_dir() / "rationales.jsonl"); }
fs::path Config::embeddings_path() const {
  return or_default(str("paths.embeddings"), work_dir() / "embeddings.jsonl");
}
fs::path Config::checkpoint_path() const { return or_default(str("paths.checkpoint"), work_dir() / "model.ckpt"); }
fs::path Config::reports_dir() const { return or_default(str("paths.reports"), work_dir() / "reports"); }
fs::path Config::distill_path() const { return or_default(str("distill.out"), work_dir() / "distill.jsonl"); }

rec::ModelConfig Config::model() const {
  rec::ModelConfig m;
  m.mode = rec::parse_mode(str("model.mode"));
  m.backbone = rec::parse_backbone(str("model.backbone"));
  m.id_dim = static_cast<std::size_t>(integer("model.id_dim"));
  m.text_dim = static_cast<std::size_t>(integer("embedding.dimension"));
  m.match_dim = static_cast<std::size_t>(integer("model.match_dim"));
  m.max_seq_len = static_cast<std::size_t>(integer("model.max_seq_len"));
  m.learning_rate = real("model.lr");
  m.epochs = static_cast<std::size_t>(integer("model.epochs"));
  m.negatives = static_cast<std::size_t>(integer("model.negatives"));
  m.batch_size = static_cast<std::size_t>(integer("model.batch_size"));
  m.seed = static_cast<std::uint64_t>(integer("model.seed"));
  m.pairs = rec::parse_pair_mode(str("model.pairs"));
  m.backbone_input = rec::parse_backbone_input(str("model.backbone_input"));
  m.optimizer = rec::parse_optimizer(str("model.optimizer"));
  m.validate();
  return m;
}

eval::EvalConfig Config::evaluation() const {
  eval::EvalConfig e;
  e.negatives = static_cast<std::size_t>(integer("eval.negatives"));
  e.seed = static_cast<std::uint64_t>(integer("eval.seed"));
  const auto split = str("eval.split");
  if (split == "test") {
    e.target = eval::Target::Test;
  } else if (split == "val") {
    e.target = eval::Target::Validation;
  } else {
    throw InputError("eval.split must be 'test' or 'val'");
  }
  return e;
}

EndpointConfig Config::endpoint(const std::string& section) const {
  EndpointConfig e;
  e.base_url = str(section + ".base_url");
  e.model_name = str(section + ".model");
  e.api_key_env = str(section + ".api_key_env");
  e.timeout = std::chrono::milliseconds(static_cast<long long>(real(section + ".timeout_s") * 1000));
  e.max_retries = static_cast<int>(integer(section + ".max_retries"));
  if (section != "embedding") {
    e.max_tokens = static_cast<int>(integer(section + ".max_tokens"));
    e.temperature = real(section + ".temperature");
  }
  if (e.base_url.empty()) throw InputError("config key '" + section + ".base_url' is required for remote calls");
  e.validate();
  return e;
}

embed::HashEncoderConfig Config::hash_encoder() const {
  embed::HashEncoderConfig h;
  h.dimension = static_cast<std::size_t>(integer("embedding.dimension"));
  h.ngram_max = static_cast<std::size_t>(integer("embedding.ngram_max"));
  h.seed = static_cast<std::uint64_t>(integer("embedding.seed"));
  h.validate();
  return h;
}

// ---------------------------------------------------------------------------
// artifacts

namespace {

std::string file_sha256(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("missing artifact " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

std::string hash_of(const json& j) { return sha256_hex(j.dump()); }

void write_json(const fs::path& path, const json& j) {
  jsonl::write_lines(path, {j.dump(2)});
}

json read_json(const fs::path& path, const std::string& stage) {
  std::ifstream in(path);
  if (!in) throw InputError("missing artifact " + path.string() + " (run '" + stage + "' first)");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError("corrupt artifact " + path.string() + ": " + e.what());
  }
}

std::string short_hash(const std::string& h) { return h.substr(0, 12); }

/// Exclusive advisory lock on the work directory for the lifetime of the object.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) {
    fs::create_directories(dir);
    const auto path = dir / ".lock";
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    if (fd_ < 0) throw InputError("cannot open lock file " + path.string());
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      throw InputError("cannot lock " + dir.string());
    }
  }
  ~DirLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  int fd_ = -1;
};

fs::path prepare_manifest(const Config& cfg) { return cfg.work_dir() / "prepare.json"; }
fs::path embed_manifest(const Config& cfg) {
  auto p = cfg.embeddings_path();
  p += ".meta.json";
  return p;
}

const char* const kSplitFiles[] = {"train.jsonl", "val.jsonl", "test.jsonl"};

}  // namespace

Prepared load_prepared(const Config& cfg) {
  const auto manifest = read_json(prepare_manifest(cfg), "prepare");
  const auto& files = manifest.at("files");
  auto check = [&](const fs::path& path, const std::string& name) {
    if (file_sha256(path) != files.at(name).get<std::string>()) {
      throw InputError(path.string() + " changed after 'prepare' (hash mismatch); rerun 'prepare'");
    }
  };
  for (const char* f : kSplitFiles) check(cfg.split_dir() / f, f);
  check(cfg.items_path(), "items.jsonl");
  check(cfg.work_dir() / "groups.jsonl", "groups.jsonl");

  Prepared p;
  p.hash = manifest.at("hash").get<std::string>();
  {
    std::vector<Item> items;
    const auto src = cfg.items_path().string();
    jsonl::for_each(cfg.items_path(), [&](const json& rec, std::size_t line) {
      Item it;
      it.id = jsonl::require_string(rec, "item", src, line);
      it.title = jsonl::require_string(rec, "title", src, line);
      if (rec.contains("category")) it.category = rec["category"].get<std::string>();
      if (rec.contains("brand")) it.brand = rec["brand"].get<std::string>();
      items.push_back(std::move(it));
    });
    p.items = ItemTable(std::move(items));
  }
  p.split = load_split(cfg.split_dir());
  p.split.dropped_short = manifest.at("counts").at("dropped_short").get<std::size_t>();
  jsonl::for_each(cfg.work_dir() / "groups.jsonl", [&](const json& rec, std::size_t) {
    p.groups.groups.push_back(rec.at("users").get<std::vector<std::string>>());
  });
  return p;
}

Embedded load_embedded(const Config& cfg, const Prepared& prepared) {
  const auto manifest = read_json(embed_manifest(cfg), "embed");
  if (manifest.at("prepare_hash") != prepared.hash) {
    throw InputError("embeddings in " + cfg.embeddings_path().string() +
                     " were built from a different 'prepare' run; rerun 'embed'");
  }
  if (file_sha256(cfg.embeddings_path()) != manifest.at("file_sha256").get<std::string>()) {
    throw InputError(cfg.embeddings_path().string() + " changed after 'embed'; rerun 'embed'");
  }
  Embedded e;
  e.hash = manifest.at("hash").get<std::string>();
  e.step = manifest.at("step").get<std::string>();
  e.role = manifest.at("role").get<std::string>();
  e.store = embed::load_embedding_store(cfg.embeddings_path());
  return e;
}

RenderedPrompt role_prompt(const Config& cfg, const std::string& role, const UserSplit& user,
                           const ItemTable& items) {
  const BehaviorSequence seq{user.user, user.test_input};
  if (role == "teacher") {
    const auto path = cfg.str("paths.teacher_template");
    return render_prompt(path.empty() ? PromptTemplate::default_teacher()
                                      : PromptTemplate::from_file(TemplateKind::Teacher, path),
                         seq, items);
  }
  if (role == "student") {
    const auto path = cfg.str("paths.student_template");
    return render_prompt(path.empty() ? PromptTemplate::default_student()
                                      : PromptTemplate::from_file(TemplateKind::Student, path),
                         seq, items);
  }
  throw InputError("role must be 'teacher' or 'student', got '" + role + "'");
}

std::optional<CacheEntry> find_rationale(const RationaleCache& cache, const Config& cfg, const std::string& role,
                                         const UserSplit& user, const ItemTable& items) {
  const auto hash = prompt_hash(role_prompt(cfg, role, user, items).text);
  std::optional<CacheEntry> found;
  for (auto& e : cache.entries()) {
    if (e.user == user.user && e.prompt_hash == hash) found = std::move(e);
  }
  return found;
}

// ---------------------------------------------------------------------------
// prepare

PrepareSummary cmd_prepare(const Config& cfg, std::ostream& out) {
  const fs::path items_path = cfg.str("paths.items");
  const fs::path inter_path = cfg.str("paths.interactions");
  if (items_path.empty()) throw InputError("config key 'paths.items' is required");
  if (inter_path.empty()) throw InputError("config key 'paths.interactions' is required");
  for (const auto& p : {items_path, inter_path}) {
    if (!fs::exists(p)) throw InputError("input file not found: " + p.string());
  }
  DirLock lock(cfg.work_dir());

  auto ds = load_dataset(items_path, inter_path);
  const auto max_users = static_cast<std::size_t>(cfg.integer("data.max_users"));
  if (max_users > 0) ds = ds.sample_users(max_users, static_cast<std::uint64_t>(cfg.integer("data.seed")));
  const auto k = static_cast<std::size_t>(cfg.integer("data.k_core"));
  const auto filtered = k_core_filter(ds, k);

  // Catalog restricted to items that survived filtering.
  const auto counts = filtered.item_counts();
  std::vector<Item> kept;
  for (const auto& item : filtered.items().items()) {
    if (counts.count(item.id)) kept.push_back(item);
  }
  std::sort(kept.begin(), kept.end(), [](const Item& a, const Item& b) { return a.id < b.id; });
  const ItemTable catalog(kept);

  const auto split = leave_one_out_split(build_sequences(filtered));
  const auto n_users = filtered.users().size();
  const auto n_groups = std::min<std::size_t>(static_cast<std::size_t>(cfg.integer("data.groups")), n_users);
  SparsityGroups groups;
  if (n_groups > 0) groups = group_by_sparsity(filtered, n_groups);

  save_split(cfg.split_dir(), split);
  save_items(cfg.items_path(), catalog);
  std::vector<json> group_lines;
  for (std::size_t g = 0; g < groups.groups.size(); ++g) {
    group_lines.push_back({{"group", "G" + std::to_string(g + 1)}, {"users", groups.groups[g]}});
  }
  jsonl::write_all(cfg.work_dir() / "groups.jsonl", group_lines);

  PrepareSummary s;
  s.users = split.users.size();
  s.items = catalog.size();
  s.interactions = filtered.interactions().size();
  s.dropped_short = split.dropped_short;

  json inputs = {{"items_sha256", file_sha256(items_path)},
                 {"interactions_sha256", file_sha256(inter_path)},
                 {"k_core", k},
                 {"groups", cfg.integer("data.groups")},
                 {"max_users", max_users},
                 {"seed", cfg.integer("data.seed")}};
  s.hash = hash_of({{"stage", "prepare"}, {"inputs", inputs}});
  json files = json::object();
  for (const char* f : kSplitFiles) files[f] = file_sha256(cfg.split_dir() / f);
  files["items.jsonl"] = file_sha256(cfg.items_path());
  files["groups.jsonl"] = file_sha256(cfg.work_dir() / "groups.jsonl");
  write_json(prepare_manifest(cfg), {{"stage", "prepare"},
                                     {"hash", s.hash},
                                     {"inputs", inputs},
                                     {"counts",
                                      {{"users", s.users},
                                       {"items", s.items},
                                       {"interactions", s.interactions},
                                       {"dropped_short", s.dropped_short}}},
                                     {"files", files}});
  out << fmt::format("prepare: users={} items={} interactions={} dropped_short={} hash={}\n", s.users, s.items,
                     s.interactions, s.dropped_short, short_hash(s.hash));
  return s;
}

// ---------------------------------------------------------------------------
// rationalize

GenerationResult cmd_rationalize(const Config& cfg, const RationalizeOptions& opts, std::ostream& out) {
  if (opts.role != "teacher" && opts.role != "student") {
    throw InputError("--role must be 'teacher' or 'student'");
  }
  if (opts.concurrency < 1) throw InputError("concurrency must be >= 1");
  const auto prepared = load_prepared(cfg);
  DirLock lock(cfg.work_dir());

  std::vector<const UserSplit*> users;
  for (const auto& u : prepared.split.users) users.push_back(&u);
  if (opts.users == "subset") {
    Rng rng(derive_seed(opts.seed, "rationale-subset"));
    const auto n = std::min(opts.subset_size, users.size());
    for (std::size_t i = 0; i < n; ++i) std::swap(users[i], users[i + uniform_index(rng, users.size() - i)]);
    users.resize(n);
    std::sort(users.begin(), users.end(), [](const UserSplit* a, const UserSplit* b) { return a->user < b->user; });
  } else if (opts.users != "all") {
    throw InputError("--users must be 'subset' or 'all'");
  }

  std::vector<RenderedPrompt> prompts;
  prompts.reserve(users.size());
  for (const auto* u : users) prompts.push_back(role_prompt(cfg, opts.role, *u, prepared.items));

  std::unique_ptr<TextGenerator> generator;
  if (opts.mock) {
    generator = std::make_unique<MockGenerator>(std::make_shared<MockLlm>(prepared.items), "mock-" + opts.role);
  } else {
    generator = std::make_unique<RemoteChatGenerator>(cfg.endpoint(opts.role), make_http_transport());
  }
  RationaleCache cache(cfg.cache_path());
  auto result = generate_rationales(*generator, prompts, cache, opts.concurrency);

  const auto& c = result.cost;
  out << fmt::format(
      "rationalize[{}]: prompts={} cache_hits={} calls={} rationales={} failures={} prompt_tokens={} "
      "completion_tokens={} mean_latency_ms={:.1f}\n",
      opts.role, prompts.size(), c.cache_hits, c.network_calls, result.rationales.size(), c.failures,
      c.prompt_tokens, c.completion_tokens, c.mean_latency_ms);
  for (const auto& f : result.failures) {
    out << fmt::format("  failed {}: {}{}\n", f.user, f.parse_failure ? "unparseable rationale: " : "", f.message);
  }
  const bool total_failure =
      !prompts.empty() && result.rationales.empty() &&
      std::all_of(result.failures.begin(), result.failures.end(), [](const auto& f) { return !f.parse_failure; });
  if (total_failure) {
    throw RemoteError("every generation request failed (" + std::to_string(result.failures.size()) +
                      " users); first error: " + result.failures.front().message);
  }
  return result;
}

// ---------------------------------------------------------------------------
// export-distill

std::size_t cmd_export_distill(const Config& cfg, std::ostream& out) {
  const auto prepared = load_prepared(cfg);
  DirLock lock(cfg.work_dir());
  const RationaleCache cache(cfg.cache_path());
  const auto limit = static_cast<std::size_t>(cfg.integer("distill.limit"));

  std::vector<distill::DistillExample> examples;
  for (const auto& u : prepared.split.users) {
    if (limit > 0 && examples.size() >= limit) break;
    const auto entry = find_rationale(cache, cfg, "teacher", u, prepared.items);
    if (!entry) continue;
    examples.push_back({u.user, role_prompt(cfg, "student", u, prepared.items).text, entry->rationale_raw});
  }
  if (examples.empty()) {
    throw InputError("no teacher rationales in " + cfg.cache_path().string() + " (run 'rationalize --role teacher')");
  }
  const auto path = cfg.distill_path();
  const auto n = distill::export_finetune_dataset(examples, path);
  auto meta_path = path;
  meta_path += ".meta.json";
  write_json(meta_path, {{"stage", "export-distill"},
                         {"prepare_hash", prepared.hash},
                         {"hash", hash_of({{"prepare", prepared.hash}, {"file", file_sha256(path)}})},
                         {"examples", n},
                         {"file_sha256", file_sha256(path)}});
  out << fmt::format("export-distill: wrote {} examples to {}\n", n, path.string());

  // Every fifth example is held out to score the in-process bigram student.
  std::vector<distill::DistillExample> fit, held;
  for (std::size_t i = 0; i < examples.size(); ++i) (i % 5 == 4 ? held : fit).push_back(examples[i]);
  const double alpha = cfg.real("distill.alpha");
  if (!held.empty() && alpha > 0) {
    const auto model = distill::train_student_mle(fit, alpha);
    const double nll = distill::evaluate_student_nll(model, held);
    out << fmt::format("  student bigram: train={} heldout={} nll/token={:.4f} uniform={:.4f}\n", fit.size(),
                       held.size(), nll, std::log(static_cast<double>(model.vocab().size())));
  }
  return n;
}

// ---------------------------------------------------------------------------
// embed

namespace {

struct ProviderSetup {
  std::unique_ptr<embed::TextEmbedder> embedder;
  json description;
};

ProviderSetup make_provider(const Config& cfg) {
  const auto provider = cfg.str("embedding.provider");
  if (provider == "hash") {
    const auto h = cfg.hash_encoder();
    return {std::make_unique<embed::HashEmbedder>(h),
            {{"provider", "hash"}, {"dimension", h.dimension}, {"ngram_max", h.ngram_max}, {"seed", h.seed}}};
  }
  if (provider == "remote") {
    auto e = cfg.endpoint("embedding");
    return {std::make_unique<embed::RemoteEmbedder>(e, make_http_transport(),
                                                    static_cast<std::size_t>(cfg.integer("embedding.batch_size"))),
            {{"provider", "remote"}, {"base_url", e.base_url}, {"model", e.model_name}}};
  }
  throw InputError("embedding provider '" + provider + "' cannot embed text (expected hash or remote)");
}

std::vector<Rationale> collect_rationales(const Config& cfg, const Prepared& prepared, const std::string& role,
                                          std::size_t* missing) {
  const RationaleCache cache(cfg.cache_path());
  std::vector<Rationale> out;
  *missing = 0;
  for (const auto& u : prepared.split.users) {
    const auto entry = find_rationale(cache, cfg, role, u, prepared.items);
    if (!entry) {
      ++*missing;
      continue;
    }
    out.push_back(parse_rationale(u.user, entry->rationale_raw));
  }
  return out;
}

std::string rationale_digest(const std::vector<Rationale>& rationales) {
  std::string all;
  for (const auto& r : rationales) all += r.user + '\x1f' + r.raw + '\x1e';
  return sha256_hex(all);
}

}  // namespace

std::string cmd_embed(const Config& cfg, std::ostream& out) {
  const auto prepared = load_prepared(cfg);
  DirLock lock(cfg.work_dir());
  const auto role = cfg.str("embedding.role");
  const auto step = parse_step_selector(cfg.str("embedding.step"));
  std::size_t missing = 0;
  const auto rationales = collect_rationales(cfg, prepared, role, &missing);

  embed::EmbeddingStore store;
  json provider;
  if (cfg.str("embedding.provider") == "file") {
    const fs::path src = cfg.str("embedding.file");
    if (src.empty()) throw InputError("config key 'embedding.file' is required for the file provider");
    store = embed::load_embedding_store(src);
    for (const auto& item : prepared.items.items()) {
      if (!store.contains(embed::item_key(item.id))) {
        throw ReferenceError("embedding file " + src.string() + " has no key '" + embed::item_key(item.id) + "'",
                             embed::item_key(item.id));
      }
    }
    provider = {{"provider", "file"}, {"file_sha256", file_sha256(src)}};
  } else {
    auto setup = make_provider(cfg);
    store = embed::embed_items_and_rationales(prepared.items, rationales, *setup.embedder, step);
    provider = setup.description;
  }
  store.save(cfg.embeddings_path());

  const auto hash = hash_of({{"stage", "embed"},
                             {"prepare", prepared.hash},
                             {"provider", provider},
                             {"step", to_string(step)},
                             {"role", role},
                             {"rationales", rationale_digest(rationales)}});
  write_json(embed_manifest(cfg), {{"stage", "embed"},
                                   {"hash", hash},
                                   {"prepare_hash", prepared.hash},
                                   {"provider", provider},
                                   {"step", to_string(step)},
                                   {"role", role},
                                   {"dimension", store.dimension()},
                                   {"keys", store.size()},
                                   {"users_without_rationale", missing},
                                   {"file_sha256", file_sha256(cfg.embeddings_path())}});
  out << fmt::format("embed: keys={} dimension={} step={} role={} users_without_rationale={} hash={}\n",
                     store.size(), store.dimension(), to_string(step), role, missing, short_hash(hash));
  return hash;
}

// ---------------------------------------------------------------------------
// train / eval / analyze

namespace {

struct TrainInputs {
  Prepared prepared;
  std::optional<Embedded> embedded;
  rec::ModelConfig model;
};

TrainInputs train_inputs(const Config& cfg) {
  TrainInputs t{load_prepared(cfg), std::nullopt, cfg.model()};
  if (t.model.uses_item_text() || t.model.uses_rationale()) {
    t.embedded = load_embedded(cfg, t.prepared);
    t.model.text_dim = t.embedded->store.dimension();
  }
  return t;
}

std::string train_hash(const TrainInputs& t) {
  return hash_of({{"stage", "train"},
                  {"prepare", t.prepared.hash},
                  {"embed", t.embedded ? json(t.embedded->hash) : json(nullptr)},
                  {"model", t.model.to_json()}});
}

struct LoadedModel {
  TrainInputs inputs;
  std::string hash;
  rec::SequentialRecommender model;
  json metadata;
};

LoadedModel load_model(const Config& cfg) {
  const auto path = cfg.checkpoint_path();
  if (!fs::exists(path)) throw InputError("missing artifact " + path.string() + " (run 'train' first)");
  json meta;
  auto model = rec::SequentialRecommender::load(path, &meta);
  const auto prepared = load_prepared(cfg);
  if (meta.value("prepare_hash", "") != prepared.hash) {
    throw InputError("checkpoint " + path.string() + " was trained on a different 'prepare' run; rerun 'train'");
  }
  TrainInputs inputs{prepared, std::nullopt, model.config()};
  if (model.config().uses_item_text() || model.config().uses_rationale()) {
    inputs.embedded = load_embedded(cfg, prepared);
    if (meta.value("embed_hash", "") != inputs.embedded->hash) {
      throw InputError("checkpoint " + path.string() + " was trained on different embeddings; rerun 'train'");
    }
  }
  const auto hash = meta.value("hash", "");
  if (hash != train_hash(inputs)) throw InputError("checkpoint " + path.string() + " has an inconsistent hash");
  return {std::move(inputs), hash, std::move(model), std::move(meta)};
}

// Store for scoring: the trained store, with user vectors re-embedded when a
// different rationale step is requested.
std::shared_ptr<const embed::EmbeddingStore> scoring_store(const Config& cfg, const TrainInputs& t,
                                                           const std::string& step) {
  if (!t.embedded) return nullptr;
  if (step == t.embedded->step || !t.model.uses_rationale()) {
    return std::make_shared<const embed::EmbeddingStore>(t.embedded->store);
  }
  std::size_t missing = 0;
  const auto rationales = collect_rationales(cfg, t.prepared, t.embedded->role, &missing);
  auto setup = make_provider(cfg);
  std::vector<std::string> texts;
  for (const auto& r : rationales) texts.push_back(rationale_step_text(r, parse_step_selector(step)));
  const auto vectors = setup.embedder->embed(texts);
  auto store = std::make_shared<embed::EmbeddingStore>(t.embedded->store.dimension(), t.embedded->store.provenance());
  for (const auto& [key, v] : t.embedded->store.vectors()) {
    if (key.rfind("user:", 0) != 0) store->insert(key, v);
  }
  for (std::size_t i = 0; i < rationales.size(); ++i) {
    if (!vectors[i]) throw Error("embedding provider produced no vector for user '" + rationales[i].user + "'");
    store->insert(embed::user_key(rationales[i].user), *vectors[i]);
  }
  return store;
}

json metrics_json(const eval::MetricReport& r) {
  return {{"seed", r.seed},
          {"ndcg@10", r.ndcg10},
          {"hit@10", r.hit10},
          {"hit@20", r.hit20},
          {"n_users", r.n_users},
          {"excluded", r.excluded()},
          {"empty", r.empty}};
}

std::string fmt_metric(double v) { return fmt::format("{:.4f}", v); }

}  // namespace

std::string cmd_train(const Config& cfg, std::ostream& out) {
  const auto t = train_inputs(cfg);
  DirLock lock(cfg.work_dir());
  const auto result = rec::train(t.prepared.split, t.prepared.items, t.embedded ? &t.embedded->store : nullptr, t.model);
  const auto hash = train_hash(t);
  rec::SequentialRecommender model(t.model, result.vocab, result.params);
  model.save(cfg.checkpoint_path(), {{"stage", "train"},
                                     {"hash", hash},
                                     {"prepare_hash", t.prepared.hash},
                                     {"embed_hash", t.embedded ? json(t.embedded->hash) : json("")},
                                     {"pairs", result.pairs},
                                     {"loss_trace", result.loss_trace}});
  out << fmt::format("train: mode={} backbone={} items={} pairs={} epochs={}", rec::to_string(t.model.mode),
                     rec::to_string(t.model.backbone), result.vocab.size(), result.pairs, t.model.epochs);
  if (!result.loss_trace.empty()) {
    out << fmt::format(" loss {:.5f} -> {:.5f}", result.loss_trace.front(), result.loss_trace.back());
  }
  out << fmt::format(" hash={}\n", short_hash(hash));
  return hash;
}

EvalSummary cmd_eval(const Config& cfg, std::ostream& out) {
  auto loaded = load_model(cfg);
  DirLock lock(cfg.work_dir());
  const auto& t = loaded.inputs;
  const auto ecfg = cfg.evaluation();
  const auto runs = static_cast<std::size_t>(std::max<long long>(1, cfg.integer("eval.runs")));
  std::string step = cfg.str("eval.step");
  if (step.empty()) step = t.embedded ? t.embedded->step : "all";
  step = std::string(to_string(parse_step_selector(step)));

  const auto store = scoring_store(cfg, t, step);
  const auto catalog = t.prepared.items.sorted_ids();

  EvalSummary s;
  for (std::size_t r = 0; r < runs; ++r) {
    auto run_cfg = ecfg;
    run_cfg.seed = ecfg.seed + r;
    if (r == 0) {
      loaded.model.attach_store(store);
      s.runs.push_back(eval::evaluate(loaded.model, t.prepared.split, catalog, run_cfg));
    } else {
      auto mcfg = t.model;
      mcfg.seed = t.model.seed + r;
      auto result = rec::train(t.prepared.split, t.prepared.items, t.embedded ? &t.embedded->store : nullptr, mcfg);
      rec::SequentialRecommender m(mcfg, result.vocab, std::move(result.params));
      m.attach_store(store);
      s.runs.push_back(eval::evaluate(m, t.prepared.split, catalog, run_cfg));
    }
  }
  s.summary = eval::aggregate_runs(s.runs);
  s.hash = hash_of({{"stage", "eval"},
                    {"train", loaded.hash},
                    {"step", step},
                    {"split", cfg.str("eval.split")},
                    {"negatives", ecfg.negatives},
                    {"seed", ecfg.seed},
                    {"runs", runs}});

  json per_run = json::array();
  for (const auto& r : s.runs) per_run.push_back(metrics_json(r));
  json failures = json::array();
  for (const auto& f : s.runs.front().failures) failures.push_back({{"user", f.user}, {"error", f.message}});
  auto ms = [](const eval::MeanStd& m) { return json{{"mean", m.mean}, {"std", m.stddev}}; };
  const json report = {{"stage", "eval"},
                       {"hash", s.hash},
                       {"train_hash", loaded.hash},
                       {"step", step},
                       {"split", cfg.str("eval.split")},
                       {"negatives", ecfg.negatives},
                       {"seed", ecfg.seed},
                       {"runs", runs},
                       {"metrics",
                        {{"ndcg@10", ms(s.summary.ndcg10)},
                         {"hit@10", ms(s.summary.hit10)},
                         {"hit@20", ms(s.summary.hit20)}}},
                       {"per_run", per_run},
                       {"failures", failures}};
  const fs::path report_path = cfg.str("eval.out").empty() ? cfg.reports_dir() / "eval.json" : fs::path(cfg.str("eval.out"));
  write_json(report_path, report);

  std::vector<std::string> rows{"# hash=" + s.hash, "user\trank\tndcg@10\thit@10\thit@20"};
  for (const auto& u : s.runs.front().per_user) {
    rows.push_back(fmt::format("{}\t{}\t{}\t{}\t{}", u.user, u.rank, u.ndcg10, u.hit10, u.hit20));
  }
  auto users_path = report_path;
  users_path.replace_extension(".users.tsv");
  jsonl::write_lines(users_path, rows);

  const auto& sm = s.summary;
  if (runs == 1) {
    out << fmt::format("eval: NDCG@10={} Hit@10={} Hit@20={}", fmt_metric(sm.ndcg10.mean), fmt_metric(sm.hit10.mean),
                       fmt_metric(sm.hit20.mean));
  } else {
    out << fmt::format("eval: NDCG@10={}±{} Hit@10={}±{} Hit@20={}±{} runs={}", fmt_metric(sm.ndcg10.mean),
                       fmt_metric(sm.ndcg10.stddev), fmt_metric(sm.hit10.mean), fmt_metric(sm.hit10.stddev),
                       fmt_metric(sm.hit20.mean), fmt_metric(sm.hit20.stddev), runs);
  }
  out << fmt::format(" users={} excluded={} step={} hash={}\n", s.runs.front().n_users, s.runs.front().excluded(),
                     step, short_hash(s.hash));
  return s;
}

std::string cmd_analyze(const Config& cfg, std::ostream& out) {
  auto loaded = load_model(cfg);
  DirLock lock(cfg.work_dir());
  const auto& t = loaded.inputs;
  const auto ecfg = cfg.evaluation();
  const auto k = static_cast<std::size_t>(cfg.integer("eval.k"));
  loaded.model.attach_store(t.embedded ? std::make_shared<const embed::EmbeddingStore>(t.embedded->store) : nullptr);
  const auto catalog = t.prepared.items.sorted_ids();

  const auto pop = eval::popularity_histogram(loaded.model, t.prepared.split, catalog, ecfg, k);
  const auto report = eval::evaluate(loaded.model, t.prepared.split, catalog, ecfg);
  const auto groups = eval::regroup(report, t.prepared.groups);

  const auto hash = hash_of({{"stage", "analyze"},
                             {"train", loaded.hash},
                             {"split", cfg.str("eval.split")},
                             {"negatives", ecfg.negatives},
                             {"seed", ecfg.seed},
                             {"k", k}});
  json gj = json::array();
  for (const auto& g : groups) {
    auto m = metrics_json(g.report);
    m["group"] = g.name;
    m["members"] = g.members;
    gj.push_back(m);
  }
  write_json(cfg.reports_dir() / "analyze.json", {{"stage", "analyze"},
                                                  {"hash", hash},
                                                  {"train_hash", loaded.hash},
                                                  {"k", k},
                                                  {"epc@10", pop.epc10},
                                                  {"efd@10", pop.efd10},
                                                  {"n_users", pop.n_users},
                                                  {"overall", metrics_json(report)},
                                                  {"groups", gj}});
  std::vector<std::string> rows{"# hash=" + hash, "item\ttrain_count\trec_count"};
  for (const auto& f : pop.items) rows.push_back(fmt::format("{}\t{}\t{}", f.item, f.train_count, f.rec_count));
  jsonl::write_lines(cfg.reports_dir() / "item_frequency.tsv", rows);

  out << fmt::format("analyze: EPC@10={:.4f} EFD@10={:.4f} users={}", pop.epc10, pop.efd10, pop.n_users);
  for (const auto& g : groups) {
    if (g.report.empty) {
      out << fmt::format(" {}=empty", g.name);
    } else {
      out << fmt::format(" {}:Hit@10={:.2f}", g.name, g.report.hit10);
    }
  }
  out << fmt::format(" hash={}\n", short_hash(hash));
  return hash;
}

}  // namespace slim::pipeline
