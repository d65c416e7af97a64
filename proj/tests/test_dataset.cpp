#include <algorithm>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "slim/dataset.hpp"
#include "slim/error.hpp"
#include "slim/hashing.hpp"
#include "temp_dir.hpp"

using namespace slim;
using slim::testing::TempDir;
using slim::testing::write_file;

namespace {

ItemTable letters(int n) {
  std::vector<Item> items;
  for (int i = 0; i < n; ++i) {
    const std::string id(1, static_cast<char>('a' + i));
    items.push_back(Item{id, "Title " + id, std::nullopt, std::nullopt});
  }
  return ItemTable(std::move(items));
}

InteractionDataset random_dataset(std::uint64_t seed, std::size_t users, std::size_t items, std::size_t max_len) {
  Rng rng(seed);
  std::vector<Item> catalog;
  for (std::size_t i = 0; i < items; ++i) catalog.push_back(Item{"i" + std::to_string(i), "t" + std::to_string(i), {}, {}});
  std::vector<Interaction> xs;
  for (std::size_t u = 0; u < users; ++u) {
    const std::size_t len = 1 + uniform_index(rng, max_len);
    for (std::size_t t = 0; t < len; ++t) {
      xs.push_back({"u" + std::to_string(u), "i" + std::to_string(uniform_index(rng, items)),
                    static_cast<std::int64_t>(uniform_index(rng, 50))});
    }
  }
  return InteractionDataset(ItemTable(std::move(catalog)), std::move(xs));
}

// Recount-and-remove until nothing changes.
std::multiset<std::tuple<std::string, std::string, std::int64_t>> naive_k_core(const std::vector<Interaction>& in,
                                                                               std::size_t k) {
  std::vector<Interaction> xs = in;
  for (bool changed = true; changed;) {
    std::map<std::string, std::size_t> uc, ic;
    for (const auto& x : xs) ++uc[x.user], ++ic[x.item];
    std::vector<Interaction> kept;
    for (const auto& x : xs) {
      if (uc[x.user] >= k && ic[x.item] >= k) kept.push_back(x);
    }
    changed = kept.size() != xs.size();
    xs = std::move(kept);
  }
  std::multiset<std::tuple<std::string, std::string, std::int64_t>> out;
  for (const auto& x : xs) out.emplace(x.user, x.item, x.timestamp);
  return out;
}

std::multiset<std::tuple<std::string, std::string, std::int64_t>> as_multiset(const InteractionDataset& ds) {
  std::multiset<std::tuple<std::string, std::string, std::int64_t>> out;
  for (const auto& x : ds.interactions()) out.emplace(x.user, x.item, x.timestamp);
  return out;
}

}  // namespace

TEST(LoadDataset, ParsesItemsAndInteractions) {
  TempDir dir;
  write_file(dir / "items.jsonl",
             R"({"item":"a","title":"Alpha","category":"Games"}
{"item":"b","title":"Beta","brand":"Acme"}
{"item":"c","title":"Gamma"}
)");
  write_file(dir / "inter.jsonl",
             R"({"user":"u1","item":"a","timestamp":1}
{"user":"u1","item":"b","timestamp":2}
{"user":"u2","item":"c","timestamp":3}
{"user":"u2","item":"a","timestamp":4}
{"user":"u3","item":"b","timestamp":5}
)");
  const auto ds = load_dataset(dir / "items.jsonl", dir / "inter.jsonl");
  EXPECT_EQ(ds.items().size(), 3u);
  EXPECT_EQ(ds.interactions().size(), 5u);
  EXPECT_EQ(ds.items().at("a").category, std::optional<std::string>("Games"));
  EXPECT_EQ(ds.items().at("b").brand, std::optional<std::string>("Acme"));
  EXPECT_FALSE(ds.items().at("c").category.has_value());
  EXPECT_EQ(ds.interactions()[3], (Interaction{"u2", "a", 4}));
}

TEST(LoadDataset, UnknownItemNamesTheKey) {
  TempDir dir;
  write_file(dir / "items.jsonl", R"({"item":"a","title":"Alpha"})");
  write_file(dir / "inter.jsonl", R"({"user":"u1","item":"X","timestamp":1})");
  try {
    load_dataset(dir / "items.jsonl", dir / "inter.jsonl");
    FAIL() << "expected ReferenceError";
  } catch (const ReferenceError& e) {
    EXPECT_EQ(e.missing_key(), "X");
    EXPECT_NE(std::string(e.what()).find("'X'"), std::string::npos);
  }
}

TEST(LoadDataset, EmptyInteractionsFile) {
  TempDir dir;
  write_file(dir / "items.jsonl", R"({"item":"a","title":"Alpha"})");
  write_file(dir / "inter.jsonl", "");
  const auto ds = load_dataset(dir / "items.jsonl", dir / "inter.jsonl");
  EXPECT_EQ(ds.interactions().size(), 0u);
  EXPECT_TRUE(ds.users().empty());
}

TEST(LoadDataset, MalformedLineReportsLineNumber) {
  TempDir dir;
  write_file(dir / "items.jsonl", "{\"item\":\"a\",\"title\":\"Alpha\"}\n{\"item\":\"b\",\n");
  write_file(dir / "inter.jsonl", "");
  try {
    load_dataset(dir / "items.jsonl", dir / "inter.jsonl");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(LoadDataset, NonIntegerTimestampRejected) {
  TempDir dir;
  write_file(dir / "items.jsonl", R"({"item":"a","title":"Alpha"})");
  write_file(dir / "inter.jsonl", R"({"user":"u1","item":"a","timestamp":"soon"})");
  EXPECT_THROW(load_dataset(dir / "items.jsonl", dir / "inter.jsonl"), ParseError);
}

TEST(LoadDataset, MissingFileIsInputError) {
  TempDir dir;
  EXPECT_THROW(load_dataset(dir / "nope.jsonl", dir / "nope2.jsonl"), InputError);
}

TEST(LoadDataset, SaveLoadRoundTrip) {
  TempDir dir;
  const auto ds = random_dataset(3, 20, 15, 8);
  save_items(dir / "items.jsonl", ds.items());
  save_interactions(dir / "inter.jsonl", ds.interactions());
  const auto back = load_dataset(dir / "items.jsonl", dir / "inter.jsonl");
  EXPECT_EQ(back.items().items(), ds.items().items());
  EXPECT_EQ(back.interactions(), ds.interactions());
}

TEST(KCore, DropsShortUser) {
  std::vector<Interaction> xs;
  for (int t = 0; t < 4; ++t) xs.push_back({"u", std::string(1, static_cast<char>('a' + t)), t});
  const auto out = k_core_filter(InteractionDataset(letters(4), xs), 5);
  EXPECT_TRUE(out.interactions().empty());
}

TEST(KCore, CascadeReachesHandIteratedFixedPoint) {
  // Users A..F all touch X. A's other items appear once; B..F share Y1..Y4.
  std::vector<Item> items{{"X", "x", {}, {}}};
  for (const char* id : {"Y1", "Y2", "Y3", "Y4", "a1", "a2", "a3", "a4"}) items.push_back({id, id, {}, {}});
  std::vector<Interaction> xs;
  for (int t = 0; t < 4; ++t) xs.push_back({"A", "a" + std::to_string(t + 1), t});
  xs.push_back({"A", "X", 9});
  for (const char* u : {"B", "C", "D", "E", "F"}) {
    xs.push_back({u, "X", 0});
    for (int t = 0; t < 4; ++t) xs.push_back({u, "Y" + std::to_string(t + 1), t + 1});
  }
  const auto out = k_core_filter(InteractionDataset(ItemTable(items), xs), 5);
  // Round 1 removes a1..a4, leaving A with one interaction; round 2 removes A.
  // X keeps 5 users, Y1..Y4 keep 5 each: stable.
  EXPECT_EQ(out.interactions().size(), 25u);
  EXPECT_EQ(out.users(), (std::vector<std::string>{"B", "C", "D", "E", "F"}));
  for (const auto& [item, n] : out.item_counts()) EXPECT_EQ(n, 5u) << item;
}

TEST(KCore, SatisfyingDatasetUnchanged) {
  std::vector<Interaction> xs;
  for (int u = 0; u < 5; ++u) {
    for (int i = 0; i < 5; ++i) xs.push_back({"u" + std::to_string(u), std::string(1, static_cast<char>('a' + i)), i});
  }
  const InteractionDataset ds(letters(5), xs);
  EXPECT_EQ(k_core_filter(ds, 5).interactions(), ds.interactions());
}

TEST(KCore, MatchesNaiveOracleAndIsIdempotent) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto ds = random_dataset(seed, 60, 25, 14);
    for (std::size_t k : {2u, 3u, 5u}) {
      const auto once = k_core_filter(ds, k);
      EXPECT_EQ(as_multiset(once), naive_k_core(ds.interactions(), k)) << "seed " << seed << " k " << k;
      EXPECT_EQ(k_core_filter(once, k).interactions(), once.interactions());
      for (const auto& [u, n] : once.user_counts()) EXPECT_GE(n, k);
      for (const auto& [i, n] : once.item_counts()) EXPECT_GE(n, k);
    }
  }
}

TEST(BuildSequences, SortsByTimestamp) {
  const InteractionDataset ds(letters(3), {{"u", "c", 3}, {"u", "a", 1}, {"u", "b", 2}});
  const auto seqs = build_sequences(ds);
  ASSERT_EQ(seqs.size(), 1u);
  EXPECT_EQ(seqs[0].items, (std::vector<std::string>{"a", "b", "c"}));
}

TEST(BuildSequences, EqualTimestampsKeepFileOrder) {
  const InteractionDataset ds(letters(3), {{"u", "c", 5}, {"u", "a", 5}, {"u", "b", 1}});
  EXPECT_EQ(build_sequences(ds)[0].items, (std::vector<std::string>{"b", "c", "a"}));
}

TEST(BuildSequences, SingleInteraction) {
  const InteractionDataset ds(letters(1), {{"u", "a", 5}});
  EXPECT_EQ(build_sequences(ds)[0].items.size(), 1u);
}

TEST(BuildSequences, ShuffleInvariantWithDistinctTimestamps) {
  Rng rng(11);
  std::vector<Interaction> xs;
  for (int u = 0; u < 10; ++u) {
    for (int t = 0; t < 8; ++t) {
      xs.push_back({"u" + std::to_string(u), std::string(1, static_cast<char>('a' + uniform_index(rng, 6))), t * 10 + u});
    }
  }
  const auto base = build_sequences(InteractionDataset(letters(6), xs));
  for (int rep = 0; rep < 5; ++rep) {
    std::shuffle(xs.begin(), xs.end(), rng);
    EXPECT_EQ(build_sequences(InteractionDataset(letters(6), xs)), base);
  }
}

TEST(LeaveOneOut, FiveItemSequence) {
  const auto split = leave_one_out_split({{"u", {"i1", "i2", "i3", "i4", "i5"}}});
  ASSERT_EQ(split.users.size(), 1u);
  const auto& u = split.users[0];
  EXPECT_EQ(u.train, (std::vector<std::string>{"i1", "i2", "i3"}));
  EXPECT_EQ(u.val_input, (std::vector<std::string>{"i1", "i2", "i3"}));
  EXPECT_EQ(u.val_target, "i4");
  EXPECT_EQ(u.test_input, (std::vector<std::string>{"i1", "i2", "i3", "i4"}));
  EXPECT_EQ(u.test_target, "i5");
}

TEST(LeaveOneOut, MinimalAndDropped) {
  const auto split = leave_one_out_split({{"a", {"i1", "i2", "i3"}}, {"b", {"i1", "i2"}}});
  ASSERT_EQ(split.users.size(), 1u);
  EXPECT_EQ(split.users[0].train, (std::vector<std::string>{"i1"}));
  EXPECT_EQ(split.users[0].val_target, "i2");
  EXPECT_EQ(split.users[0].test_input, (std::vector<std::string>{"i1", "i2"}));
  EXPECT_EQ(split.dropped_short, 1u);
}

TEST(LeaveOneOut, ConservationOnRandomDatasets) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto seqs = build_sequences(random_dataset(seed, 30, 20, 10));
    const auto split = leave_one_out_split(seqs);
    std::size_t kept = 0, dropped = 0;
    for (const auto& s : seqs) {
      if (s.items.size() >= kMinSplitLength) {
        kept += s.items.size();
      } else {
        ++dropped;
      }
    }
    EXPECT_EQ(split.train_interactions() + 2 * split.users.size(), kept);
    EXPECT_EQ(split.dropped_short, dropped);
    for (const auto& u : split.users) {
      auto full = u.train;
      full.push_back(u.val_target);
      full.push_back(u.test_target);
      EXPECT_EQ(full, u.full_history());
      EXPECT_EQ(u.val_input, u.train);
      auto ti = u.train;
      ti.push_back(u.val_target);
      EXPECT_EQ(u.test_input, ti);
    }
  }
}

TEST(SparsityGroups, EqualPartition) {
  std::vector<Interaction> xs;
  for (int u = 0; u < 10; ++u) {
    for (int t = 0; t <= u; ++t) xs.push_back({"u" + std::to_string(u), "a", t});
  }
  const auto g = group_by_sparsity(InteractionDataset(letters(1), xs), 5);
  ASSERT_EQ(g.groups.size(), 5u);
  EXPECT_EQ(g.groups[0], (std::vector<std::string>{"u0", "u1"}));
  EXPECT_EQ(g.groups[4], (std::vector<std::string>{"u8", "u9"}));
}

TEST(SparsityGroups, RemainderGoesLast) {
  std::vector<Interaction> xs;
  for (int u = 0; u < 11; ++u) xs.push_back({"u" + std::to_string(u), "a", u});
  const auto g = group_by_sparsity(InteractionDataset(letters(1), xs), 5);
  std::vector<std::size_t> sizes;
  for (const auto& grp : g.groups) sizes.push_back(grp.size());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{2, 2, 2, 2, 3}));
}

TEST(SparsityGroups, TooFewUsers) {
  std::vector<Interaction> xs;
  for (int u = 0; u < 3; ++u) xs.push_back({"u" + std::to_string(u), "a", u});
  EXPECT_THROW(group_by_sparsity(InteractionDataset(letters(1), xs), 5), SizeError);
}

TEST(SparsityGroups, PartitionProperties) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto ds = random_dataset(seed, 23 + seed, 10, 12);
    const auto g = group_by_sparsity(ds, 5);
    const auto counts = ds.user_counts();
    std::size_t lo = SIZE_MAX, hi = 0;
    std::vector<std::string> all;
    for (const auto& grp : g.groups) {
      lo = std::min(lo, grp.size());
      hi = std::max(hi, grp.size());
      all.insert(all.end(), grp.begin(), grp.end());
    }
    EXPECT_LE(hi - lo, 1u);
    for (std::size_t i = 1; i < all.size(); ++i) EXPECT_LE(counts.at(all[i - 1]), counts.at(all[i]));
    std::sort(all.begin(), all.end());
    EXPECT_EQ(all, ds.users());
  }
}

TEST(ItemFrequency, CountsTrainPrefixesOnly) {
  SplitDataset split;
  split.users.push_back({"u1", {"a", "b"}, {"a", "b"}, "c", {"a", "b", "c"}, "t"});
  split.users.push_back({"u2", {"a"}, {"a"}, "b", {"a", "b"}, "t"});
  split.users.push_back({"u3", {"a", "a"}, {"a", "a"}, "b", {"a", "a", "b"}, "t"});
  const auto f = item_frequency(split);
  EXPECT_EQ(f.at("a"), 4u);
  EXPECT_EQ(f.count("t") ? f.at("t") : 0u, 0u);
  std::size_t total = 0;
  for (const auto& [i, n] : f) total += n;
  EXPECT_EQ(total, split.train_interactions());
  EXPECT_EQ(item_user_frequency(split).at("a"), 3u);
}

TEST(SampleUsers, KeepsWholeHistoriesAndIsSeeded) {
  const auto ds = random_dataset(5, 40, 10, 6);
  const auto a = ds.sample_users(10, 7);
  EXPECT_EQ(a.users().size(), 10u);
  EXPECT_EQ(a.interactions(), ds.sample_users(10, 7).interactions());
  const auto full = ds.user_counts();
  for (const auto& [u, n] : a.user_counts()) EXPECT_EQ(n, full.at(u));
  EXPECT_EQ(ds.sample_users(100, 7).interactions(), ds.interactions());
}

TEST(SplitFiles, RoundTrip) {
  TempDir dir;
  const auto split = leave_one_out_split(build_sequences(random_dataset(2, 25, 12, 9)));
  save_split(dir.path(), split);
  const auto back = load_split(dir.path());
  EXPECT_EQ(back.users, split.users);
}
