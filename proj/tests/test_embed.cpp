#include <bit>
#include <cmath>
#include <mutex>

#include <gtest/gtest.h>

#include "slim/embed.hpp"
#include "slim/error.hpp"
#include "slim/hashing.hpp"
#include "temp_dir.hpp"

using namespace slim;
using namespace slim::embed;
using nlohmann::json;
using slim::testing::TempDir;
using slim::testing::write_file;

namespace {

double norm2(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Embedding server double: answers each input with a fixed dim-8 vector
/// whose first entry is the input's length.
class EmbeddingTransport final : public HttpTransport {
 public:
  HttpResponse post(const std::string& url, const std::string& body, const HttpHeaders&,
                    std::chrono::milliseconds) override {
    std::lock_guard lock(mu_);
    ++requests;
    last_url = url;
    const auto req = json::parse(body);
    json data = json::array();
    std::size_t i = 0;
    for (const auto& text : req["input"]) {
      std::vector<double> v(8, 0.25);
      v[0] = static_cast<double>(text.get<std::string>().size());
      data.push_back({{"index", i++}, {"embedding", v}});
    }
    return {200, json{{"data", data}}.dump()};
  }

  int requests = 0;
  std::string last_url;

 private:
  std::mutex mu_;
};

EndpointConfig embed_config() {
  EndpointConfig cfg;
  cfg.base_url = "http://emb.test/v1";
  cfg.model_name = "e";
  cfg.api_key_env = "";
  return cfg;
}

std::string random_words(Rng& rng, const std::string& prefix, std::size_t n) {
  std::string out;
  for (std::size_t i = 0; i < n; ++i) out += (i ? " " : "") + prefix + std::to_string(uniform_index(rng, 100000));
  return out;
}

}  // namespace

TEST(HashEncoder, UnitNorm) {
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const auto v = encode_text_hash({}, random_words(rng, "w", 1 + uniform_index(rng, 12))).values;
    EXPECT_EQ(v.size(), 768u);
    EXPECT_NEAR(norm2(v), 1.0, 1e-9);
  }
}

TEST(HashEncoder, DeterministicAndTrimmed) {
  const auto a = encode_text_hash({}, "protein bars").values;
  EXPECT_EQ(a, encode_text_hash({}, "protein bars").values);
  EXPECT_EQ(a, encode_text_hash({}, "   protein   bars \n").values);
}

TEST(HashEncoder, EmptyTextRejected) {
  EXPECT_THROW(encode_text_hash({}, ""), PreconditionError);
  EXPECT_THROW(encode_text_hash({}, "  \t "), PreconditionError);
}

TEST(HashEncoder, SeedChangesFeatures) {
  HashEncoderConfig other;
  other.seed = 9;
  EXPECT_NE(encode_text_hash({}, "alpha beta").values, encode_text_hash(other, "alpha beta").values);
}

TEST(HashEncoder, DisjointTextsNearlyOrthogonal) {
  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    const auto a = encode_text_hash({}, random_words(rng, "x", 6)).values;
    const auto b = encode_text_hash({}, random_words(rng, "y", 6)).values;
    EXPECT_LT(std::abs(cosine_similarity(a, b)), 0.2);
  }
}

TEST(HashEncoder, ParallelMatchesSerial) {
  Rng rng(3);
  std::vector<std::string> texts;
  for (int i = 0; i < 200; ++i) texts.push_back(random_words(rng, "t", 5));
  EXPECT_EQ(encode_texts_hash({}, texts), encode_texts_hash_serial({}, texts));
}

TEST(Cosine, ClosedForms) {
  const std::vector<double> a{1, 0}, b{0, 1}, c{1, 1};
  EXPECT_DOUBLE_EQ(cosine_similarity(a, a), 1.0);
  EXPECT_DOUBLE_EQ(cosine_similarity(a, b), 0.0);
  EXPECT_NEAR(cosine_similarity(a, c), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_THROW(cosine_similarity(a, std::vector<double>{1, 2, 3}), PreconditionError);
}

TEST(EmbeddingStore, LoadThreeRecords) {
  TempDir dir;
  write_file(dir / "s.jsonl",
             "{\"key\":\"item:a\",\"vector\":[1,2,3,4]}\n{\"key\":\"item:b\",\"vector\":[0,0,0,1]}\n"
             "{\"key\":\"user:u\",\"vector\":[0.5,0.5,0.5,0.5]}\n");
  const auto s = load_embedding_store(dir / "s.jsonl");
  EXPECT_EQ(s.size(), 3u);
  EXPECT_EQ(s.dimension(), 4u);
  EXPECT_EQ(s.at("item:a")[3], 4.0);
  EXPECT_THROW(s.at("item:zzz"), ReferenceError);
}

TEST(EmbeddingStore, DimensionMismatchNamesLine) {
  TempDir dir;
  write_file(dir / "s.jsonl", "{\"key\":\"a\",\"vector\":[1,2,3,4]}\n{\"key\":\"b\",\"vector\":[1,2,3,4,5]}\n");
  try {
    load_embedding_store(dir / "s.jsonl");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(EmbeddingStore, DuplicateKey) {
  TempDir dir;
  write_file(dir / "s.jsonl", "{\"key\":\"item:x\",\"vector\":[1]}\n{\"key\":\"item:x\",\"vector\":[2]}\n");
  EXPECT_THROW(load_embedding_store(dir / "s.jsonl"), ParseError);
  EmbeddingStore s(1, Provenance::File);
  s.insert("k", std::vector<double>{1.0});
  EXPECT_THROW(s.insert("k", std::vector<double>{2.0}), InputError);
}

TEST(EmbeddingStore, SaveLoadBitExact) {
  TempDir dir;
  Rng rng(5);
  EmbeddingStore s(0, Provenance::Hash);
  for (int i = 0; i < 40; ++i) {
    std::vector<double> v(16);
    for (auto& x : v) x = uniform_real(rng, -3.0, 3.0) * std::pow(10.0, uniform_real(rng, -6.0, 6.0));
    s.insert("k" + std::to_string(i), v);
  }
  s.save(dir / "s.jsonl");
  const auto back = load_embedding_store(dir / "s.jsonl");
  ASSERT_EQ(back.size(), s.size());
  for (const auto& [k, v] : s.vectors()) {
    const auto& w = back.at(k);
    ASSERT_EQ(w.size(), v.size());
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(w[i]), std::bit_cast<std::uint64_t>(v[i]));
  }
  back.save(dir / "again.jsonl");
  EXPECT_EQ(slim::testing::read_file(dir / "again.jsonl"), slim::testing::read_file(dir / "s.jsonl"));
}

TEST(RemoteEmbeddings, OrderedVectors) {
  EmbeddingTransport t;
  const auto r = fetch_embeddings_remote(embed_config(), t, {"ab", "abcd"});
  ASSERT_EQ(r.vectors.size(), 2u);
  EXPECT_EQ((*r.vectors[0])[0], 2.0);
  EXPECT_EQ((*r.vectors[1])[0], 4.0);
  EXPECT_EQ(r.vectors[1]->size(), 8u);
  EXPECT_EQ(t.last_url, "http://emb.test/v1/embeddings");
}

TEST(RemoteEmbeddings, EmptyTextReportedBatchContinues) {
  EmbeddingTransport t;
  const auto r = fetch_embeddings_remote(embed_config(), t, {"a", "  ", "abc"});
  ASSERT_EQ(r.errors.size(), 1u);
  EXPECT_EQ(r.errors[0].first, 1u);
  EXPECT_FALSE(r.vectors[1]);
  EXPECT_EQ((*r.vectors[2])[0], 3.0);
}

TEST(RemoteEmbeddings, Batching) {
  EmbeddingTransport t;
  std::vector<std::string> texts(1000, "text");
  const auto r = fetch_embeddings_remote(embed_config(), t, texts, 100);
  EXPECT_EQ(r.requests, 10u);
  EXPECT_EQ(t.requests, 10);
  EXPECT_TRUE(r.errors.empty());
}

TEST(ItemText, SkipsMissingFields) {
  EXPECT_EQ(item_text({"i", "Oats", std::string("Food"), std::nullopt}), "Oats Food");
  EXPECT_EQ(item_text({"i", "Oats", std::nullopt, std::string("Acme")}), "Oats Acme");
  EXPECT_EQ(item_text({"i", "Oats", std::string("Food"), std::string("Acme")}), "Oats Food Acme");
}

TEST(EmbedItemsAndRationales, KeysAndStepSelection) {
  const ItemTable items({{"a", "Oats", std::string("Food"), {}}, {"b", "Rice", {}, {}}, {"c", "Halo", {}, {}}});
  const std::vector<Rationale> rs{{"u1", "likes grains", "Food", "Rice", ""}, {"u2", "gamer", "Games", "Halo", ""}};
  HashEmbedder he({});
  const auto s = embed_items_and_rationales(items, rs, he, StepSelector::Step3);
  EXPECT_EQ(s.size(), 5u);
  EXPECT_TRUE(s.contains("item:a"));
  EXPECT_TRUE(s.contains("user:u2"));
  EXPECT_EQ(s.provenance(), Provenance::Hash);

  auto changed = rs;
  changed[0].step1 = "something else entirely";
  const auto s2 = embed_items_and_rationales(items, changed, he, StepSelector::Step3);
  EXPECT_EQ(s2.at("user:u1"), s.at("user:u1"));
  const auto all1 = embed_items_and_rationales(items, rs, he, StepSelector::All);
  const auto all2 = embed_items_and_rationales(items, changed, he, StepSelector::All);
  EXPECT_NE(all1.at("user:u1"), all2.at("user:u1"));
}

TEST(EmbedItemsAndRationales, ProvidersInterchangeable) {
  const ItemTable items({{"a", "Oats", {}, {}}});
  const std::vector<Rationale> rs{{"u1", "x", "y", "z", ""}};
  auto transport = std::make_shared<EmbeddingTransport>();
  RemoteEmbedder re(embed_config(), transport);
  const auto s = embed_items_and_rationales(items, rs, re, StepSelector::All);
  EXPECT_EQ(s.dimension(), 8u);
  EXPECT_EQ(s.provenance(), Provenance::Remote);
  EXPECT_EQ(s.size(), 2u);
}
