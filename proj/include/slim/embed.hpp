#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "slim/dataset.hpp"
#include "slim/llm_client.hpp"
#include "slim/prompts.hpp"

namespace slim::embed {

struct EmbeddingVector {
  std::string key;
  std::vector<double> values;
};

enum class Provenance { Hash, File, Remote };

std::string_view to_string(Provenance p);
Provenance parse_provenance(std::string_view s);

/// Key → vector map with a single dimension. Values are held at single
/// precision (stored as doubles) so the 9-significant-digit file format
/// round-trips them exactly.
class EmbeddingStore {
 public:
  EmbeddingStore() = default;
  EmbeddingStore(std::size_t dimension, Provenance provenance)
      : dimension_(dimension), provenance_(provenance) {}

  /// Throws on duplicate key, dimension mismatch or non-finite values.
  void insert(const std::string& key, std::span<const double> values);

  const std::vector<double>* find(const std::string& key) const;
  const std::vector<double>& at(const std::string& key) const;
  bool contains(const std::string& key) const { return vectors_.count(key) != 0; }

  std::size_t size() const { return vectors_.size(); }
  std::size_t dimension() const { return dimension_; }
  Provenance provenance() const { return provenance_; }
  const std::map<std::string, std::vector<double>>& vectors() const { return vectors_; }

  /// One `{key, vector}` record per line, keys in lexicographic order.
  void save(const std::filesystem::path& path) const;

 private:
  std::size_t dimension_ = 0;
  Provenance provenance_ = Provenance::File;
  std::map<std::string, std::vector<double>> vectors_;
};

/// Dimension comes from the first record; later records must match it.
EmbeddingStore load_embedding_store(const std::filesystem::path& path);

struct HashEncoderConfig {
  std::size_t dimension = 768;
  std::size_t ngram_min = 1;
  std::size_t ngram_max = 2;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Signed feature hashing of word n-grams, L2-normalized.
EmbeddingVector encode_text_hash(const HashEncoderConfig& cfg, const std::string& text,
                                 std::string key = {});

/// Batch form, parallel over texts.
std::vector<std::vector<double>> encode_texts_hash(const HashEncoderConfig& cfg,
                                                   const std::vector<std::string>& texts);

/// Serial reference for encode_texts_hash.
std::vector<std::vector<double>> encode_texts_hash_serial(const HashEncoderConfig& cfg,
                                                          const std::vector<std::string>& texts);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct RemoteEmbeddingResult {
  std::vector<std::optional<std::vector<double>>> vectors;  // aligned with the input
  std::vector<std::pair<std::size_t, std::string>> errors;  // (input index, message)
  std::size_t requests = 0;
};

/// POSTs `{base_url}/embeddings` in batches; empty inputs are reported, not sent.
RemoteEmbeddingResult fetch_embeddings_remote(const EndpointConfig& cfg, HttpTransport& transport,
                                              const std::vector<std::string>& texts,
                                              std::size_t batch_size = 100);

/// Text → vector provider used to build stores.
class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  virtual Provenance provenance() const = 0;
  /// Vectors aligned with `texts`; entries that failed are std::nullopt.
  virtual std::vector<std::optional<std::vector<double>>> embed(const std::vector<std::string>& texts) = 0;
};

class HashEmbedder final : public TextEmbedder {
 public:
  explicit HashEmbedder(HashEncoderConfig cfg);
  Provenance provenance() const override { return Provenance::Hash; }
  std::vector<std::optional<std::vector<double>>> embed(const std::vector<std::string>& texts) override;

 private:
  HashEncoderConfig cfg_;
};

class RemoteEmbedder final : public TextEmbedder {
 public:
  RemoteEmbedder(EndpointConfig cfg, std::shared_ptr<HttpTransport> transport, std::size_t batch_size = 100);
  Provenance provenance() const override { return Provenance::Remote; }
  std::vector<std::optional<std::vector<double>>> embed(const std::vector<std::string>& texts) override;

 private:
  EndpointConfig cfg_;
  std::shared_ptr<HttpTransport> transport_;
  std::size_t batch_size_;
};

/// Title, category and brand joined by single spaces (absent fields skipped).
std::string item_text(const Item& item);

std::string item_key(const std::string& item_id);
std::string user_key(const std::string& user_id);

/// Builds "item:<id>" vectors for every catalog item and "user:<id>" vectors
/// for every rationale (using the selected step text).
EmbeddingStore embed_items_and_rationales(const ItemTable& items, const std::vector<Rationale>& rationales,
                                          TextEmbedder& provider, StepSelector step);

}  // namespace slim::embed
