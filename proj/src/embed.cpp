#include "slim/embed.hpp"

#include <cmath>

#include <fmt/format.h>

#include "slim/distill.hpp"
#include "slim/error.hpp"
#include "slim/hashing.hpp"
#include "slim/jsonl.hpp"
#include "slim/parallel.hpp"

namespace slim::embed {

using nlohmann::json;

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::Hash: return "hash";
    case Provenance::File: return "file";
    case Provenance::Remote: return "remote";
  }
  return "file";
}

Provenance parse_provenance(std::string_view s) {
  if (s == "hash") return Provenance::Hash;
  if (s == "file") return Provenance::File;
  if (s == "remote") return Provenance::Remote;
  throw InputError("unknown embedding provider '" + std::string(s) + "'");
}

void EmbeddingStore::insert(const std::string& key, std::span<const double> values) {
  if (values.empty()) throw InputError("embedding '" + key + "' is empty");
  if (dimension_ == 0) dimension_ = values.size();
  if (values.size() != dimension_) {
    throw InputError("embedding '" + key + "' has dimension " + std::to_string(values.size()) +
                     ", store expects " + std::to_string(dimension_));
  }
  std::vector<double> v(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) throw InputError("embedding '" + key + "' has a non-finite entry");
    v[i] = static_cast<double>(static_cast<float>(values[i]));
  }
  if (!vectors_.emplace(key, std::move(v)).second) throw InputError("duplicate embedding key '" + key + "'");
}

const std::vector<double>* EmbeddingStore::find(const std::string& key) const {
  auto it = vectors_.find(key);
  return it == vectors_.end() ? nullptr : &it->second;
}

const std::vector<double>& EmbeddingStore::at(const std::string& key) const {
  if (const auto* v = find(key)) return *v;
  throw ReferenceError("embedding store has no key '" + key + "'", key);
}

void EmbeddingStore::save(const std::filesystem::path& path) const {
  std::vector<std::string> lines;
  lines.reserve(vectors_.size());
  for (const auto& [key, v] : vectors_) {
    std::string line = "{\"key\":" + json(key).dump() + ",\"vector\":[";
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) line.push_back(',');
      line += fmt::format("{:.9g}", v[i]);
    }
    line += "]}";
    lines.push_back(std::move(line));
  }
  jsonl::write_lines(path, lines);
}

EmbeddingStore load_embedding_store(const std::filesystem::path& path) {
  EmbeddingStore store(0, Provenance::File);
  const auto src = path.string();
  jsonl::for_each(path, [&](const json& rec, std::size_t line) {
    const auto key = jsonl::require_string(rec, "key", src, line);
    auto it = rec.find("vector");
    if (it == rec.end() || !it->is_array()) throw ParseError(src, line, "missing array field 'vector'");
    std::vector<double> v;
    v.reserve(it->size());
    for (const auto& x : *it) {
      if (!x.is_number()) throw ParseError(src, line, "vector entries must be numbers");
      v.push_back(x.get<double>());
    }
    if (store.dimension() != 0 && v.size() != store.dimension()) {
      throw ParseError(src, line, "vector has dimension " + std::to_string(v.size()) + ", expected " +
                                      std::to_string(store.dimension()));
    }
    if (store.contains(key)) throw ParseError(src, line, "duplicate key '" + key + "'");
    try {
      store.insert(key, v);
    } catch (const InputError& e) {
      throw ParseError(src, line, e.what());
    }
  });
  return store;
}

void HashEncoderConfig::validate() const {
  if (dimension < 8) throw PreconditionError("hash encoder dimension must be >= 8");
  if (ngram_min < 1 || ngram_max < ngram_min) throw PreconditionError("invalid hash encoder n-gram range");
}

EmbeddingVector encode_text_hash(const HashEncoderConfig& cfg, const std::string& text, std::string key) {
  cfg.validate();
  const auto words = distill::split_words(text);
  if (words.empty()) throw PreconditionError("cannot encode empty or whitespace-only text");
  std::vector<double> v(cfg.dimension, 0.0);
  for (std::size_t n = cfg.ngram_min; n <= cfg.ngram_max; ++n) {
    for (std::size_t i = 0; i + n <= words.size(); ++i) {
      std::string gram = words[i];
      for (std::size_t j = 1; j < n; ++j) gram += " " + words[i + j];
      const auto h = mix64(fnv1a64(gram, cfg.seed));
      const auto bucket = static_cast<std::size_t>(h % cfg.dimension);
      v[bucket] += (h >> 63) ? 1.0 : -1.0;
    }
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm == 0.0) throw DomainError("hash features cancelled to a zero vector for '" + text + "'");
  for (double& x : v) x /= norm;
  return {std::move(key), std::move(v)};
}

std::vector<std::vector<double>> encode_texts_hash_serial(const HashEncoderConfig& cfg,
                                                          const std::vector<std::string>& texts) {
  std::vector<std::vector<double>> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(encode_text_hash(cfg, t).values);
  return out;
}

std::vector<std::vector<double>> encode_texts_hash(const HashEncoderConfig& cfg,
                                                   const std::vector<std::string>& texts) {
  std::vector<std::vector<double>> out(texts.size());
  parallel_for(texts.size(), [&](std::size_t i) { out[i] = encode_text_hash(cfg, texts[i]).values; });
  return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw PreconditionError("cosine_similarity: dimension mismatch " + std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()));
  }
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw DomainError("cosine_similarity: zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

RemoteEmbeddingResult fetch_embeddings_remote(const EndpointConfig& cfg, HttpTransport& transport,
                                              const std::vector<std::string>& texts, std::size_t batch_size) {
  if (batch_size == 0) throw PreconditionError("embedding batch size must be >= 1");
  RemoteEmbeddingResult out;
  out.vectors.resize(texts.size());
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (distill::split_words(texts[i]).empty()) {
      out.errors.emplace_back(i, "empty text");
    } else {
      todo.push_back(i);
    }
  }
  std::size_t dim = 0;
  for (std::size_t start = 0; start < todo.size(); start += batch_size) {
    const auto end = std::min(todo.size(), start + batch_size);
    json input = json::array();
    for (auto k = start; k < end; ++k) input.push_back(texts[todo[k]]);
    ++out.requests;
    json body;
    try {
      body = post_json_with_retry(cfg, transport, "embeddings", {{"model", cfg.model_name}, {"input", input}}).body;
    } catch (const RemoteError& e) {
      for (auto k = start; k < end; ++k) out.errors.emplace_back(todo[k], e.what());
      continue;
    }
    const auto data = body.find("data");
    if (data == body.end() || !data->is_array() || data->size() != end - start) {
      for (auto k = start; k < end; ++k) out.errors.emplace_back(todo[k], "malformed embeddings response");
      continue;
    }
    for (std::size_t j = 0; j < data->size(); ++j) {
      const auto& entry = (*data)[j];
      const std::size_t pos = entry.contains("index") ? entry["index"].get<std::size_t>() : j;
      if (pos >= end - start || !entry.contains("embedding")) {
        out.errors.emplace_back(todo[start + std::min(j, end - start - 1)], "malformed embeddings entry");
        continue;
      }
      auto v = entry["embedding"].get<std::vector<double>>();
      if (dim == 0) dim = v.size();
      if (v.size() != dim) {
        out.errors.emplace_back(todo[start + pos], "inconsistent embedding dimension");
        continue;
      }
      out.vectors[todo[start + pos]] = std::move(v);
    }
  }
  return out;
}

HashEmbedder::HashEmbedder(HashEncoderConfig cfg) : cfg_(cfg) { cfg_.validate(); }

std::vector<std::optional<std::vector<double>>> HashEmbedder::embed(const std::vector<std::string>& texts) {
  std::vector<std::optional<std::vector<double>>> out(texts.size());
  parallel_for(texts.size(), [&](std::size_t i) {
    try {
      out[i] = encode_text_hash(cfg_, texts[i]).values;
    } catch (const Error&) {
      out[i] = std::nullopt;
    }
  });
  return out;
}

RemoteEmbedder::RemoteEmbedder(EndpointConfig cfg, std::shared_ptr<HttpTransport> transport, std::size_t batch_size)
    : cfg_(std::move(cfg)), transport_(std::move(transport)), batch_size_(batch_size) {
  cfg_.validate();
}

std::vector<std::optional<std::vector<double>>> RemoteEmbedder::embed(const std::vector<std::string>& texts) {
  return fetch_embeddings_remote(cfg_, *transport_, texts, batch_size_).vectors;
}

std::string item_text(const Item& item) {
  std::string out = item.title;
  if (item.category) out += " " + *item.category;
  if (item.brand) out += " " + *item.brand;
  return out;
}

std::string item_key(const std::string& item_id) { return "item:" + item_id; }
std::string user_key(const std::string& user_id) { return "user:" + user_id; }

EmbeddingStore embed_items_and_rationales(const ItemTable& items, const std::vector<Rationale>& rationales,
                                          TextEmbedder& provider, StepSelector step) {
  std::vector<std::string> keys, texts;
  for (const auto& item : items.items()) {
    keys.push_back(item_key(item.id));
    texts.push_back(item_text(item));
  }
  for (const auto& r : rationales) {
    keys.push_back(user_key(r.user));
    texts.push_back(rationale_step_text(r, step));
  }
  const auto vectors = provider.embed(texts);
  EmbeddingStore store(0, provider.provenance());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (!vectors[i]) throw Error("embedding provider produced no vector for '" + keys[i] + "'");
    store.insert(keys[i], *vectors[i]);
  }
  return store;
}

}  // namespace slim::embed
