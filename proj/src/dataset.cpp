#include "slim/dataset.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <unordered_set>

#include "slim/error.hpp"
#include "slim/hashing.hpp"
#include "slim/jsonl.hpp"

namespace slim {

using nlohmann::json;

ItemTable::ItemTable(std::vector<Item> items) : items_(std::move(items)) {
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (items_[i].title.empty()) throw InputError("item '" + items_[i].id + "' has an empty title");
    if (!index_.emplace(items_[i].id, i).second) {
      throw InputError("duplicate item id '" + items_[i].id + "'");
    }
  }
}

const Item& ItemTable::at(const std::string& id) const {
  const Item* it = find(id);
  if (!it) throw ReferenceError("unknown item '" + id + "'", id);
  return *it;
}

const Item* ItemTable::find(const std::string& id) const {
  auto it = index_.find(id);
  return it == index_.end() ? nullptr : &items_[it->second];
}

std::vector<std::string> ItemTable::sorted_ids() const {
  std::vector<std::string> ids;
  ids.reserve(items_.size());
  for (const auto& item : items_) ids.push_back(item.id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

InteractionDataset::InteractionDataset(ItemTable items, std::vector<Interaction> interactions)
    : items_(std::move(items)), interactions_(std::move(interactions)) {
  for (const auto& x : interactions_) {
    if (!items_.contains(x.item)) {
      throw ReferenceError("interaction of user '" + x.user + "' references unknown item '" +
                               x.item + "'",
                           x.item);
    }
  }
}

std::vector<std::string> InteractionDataset::users() const {
  std::set<std::string> seen;
  for (const auto& x : interactions_) seen.insert(x.user);
  return {seen.begin(), seen.end()};
}

std::map<std::string, std::size_t> InteractionDataset::user_counts() const {
  std::map<std::string, std::size_t> counts;
  for (const auto& x : interactions_) ++counts[x.user];
  return counts;
}

std::map<std::string, std::size_t> InteractionDataset::item_counts() const {
  std::map<std::string, std::size_t> counts;
  for (const auto& x : interactions_) ++counts[x.item];
  return counts;
}

InteractionDataset InteractionDataset::sample_users(std::size_t n, std::uint64_t seed) const {
  auto all = users();
  if (all.size() <= n) return *this;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    std::swap(all[i], all[i + uniform_index(rng, all.size() - i)]);
  }
  std::unordered_set<std::string> keep(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n));
  std::vector<Interaction> kept;
  for (const auto& x : interactions_) {
    if (keep.count(x.user)) kept.push_back(x);
  }
  return InteractionDataset(items_, std::move(kept));
}

std::vector<std::string> UserSplit::full_history() const {
  auto out = test_input;
  out.push_back(test_target);
  return out;
}

const UserSplit* SplitDataset::find(const std::string& user) const {
  auto it = std::lower_bound(users.begin(), users.end(), user,
                             [](const UserSplit& u, const std::string& key) { return u.user < key; });
  return (it != users.end() && it->user == user) ? &*it : nullptr;
}

std::size_t SplitDataset::train_interactions() const {
  std::size_t n = 0;
  for (const auto& u : users) n += u.train.size();
  return n;
}

namespace {

std::optional<std::string> optional_string(const json& rec, const char* key,
                                           const std::string& source, std::size_t line) {
  auto it = rec.find(key);
  if (it == rec.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) {
    throw ParseError(source, line, std::string("field '") + key + "' must be a string");
  }
  auto s = it->get<std::string>();
  if (s.empty()) return std::nullopt;
  return s;
}

}  // namespace

InteractionDataset load_dataset(const std::filesystem::path& items_path,
                                const std::filesystem::path& interactions_path) {
  std::vector<Item> items;
  const auto item_src = items_path.string();
  std::unordered_set<std::string> seen;
  jsonl::for_each(items_path, [&](const json& rec, std::size_t line) {
    Item item;
    item.id = jsonl::require_string(rec, "item", item_src, line);
    item.title = jsonl::require_string(rec, "title", item_src, line);
    if (item.title.empty()) throw ParseError(item_src, line, "empty title");
    if (!seen.insert(item.id).second) throw ParseError(item_src, line, "duplicate item '" + item.id + "'");
    item.category = optional_string(rec, "category", item_src, line);
    item.brand = optional_string(rec, "brand", item_src, line);
    items.push_back(std::move(item));
  });
  ItemTable table(std::move(items));

  std::vector<Interaction> interactions;
  const auto src = interactions_path.string();
  jsonl::for_each(interactions_path, [&](const json& rec, std::size_t line) {
    Interaction x;
    x.user = jsonl::require_string(rec, "user", src, line);
    x.item = jsonl::require_string(rec, "item", src, line);
    auto ts = rec.find("timestamp");
    if (ts == rec.end() || !ts->is_number_integer()) {
      throw ParseError(src, line, "missing or non-integer field 'timestamp'");
    }
    x.timestamp = ts->get<std::int64_t>();
    if (!table.contains(x.item)) {
      throw ReferenceError(src + ":" + std::to_string(line) + ": unknown item '" + x.item + "'",
                           x.item);
    }
    interactions.push_back(std::move(x));
  });
  return InteractionDataset(std::move(table), std::move(interactions));
}

void save_items(const std::filesystem::path& path, const ItemTable& items) {
  std::vector<json> recs;
  for (const auto& item : items.items()) {
    json r{{"item", item.id}, {"title", item.title}};
    if (item.category) r["category"] = *item.category;
    if (item.brand) r["brand"] = *item.brand;
    recs.push_back(std::move(r));
  }
  jsonl::write_all(path, recs);
}

void save_interactions(const std::filesystem::path& path,
                       const std::vector<Interaction>& interactions) {
  std::vector<json> recs;
  for (const auto& x : interactions) {
    recs.push_back({{"user", x.user}, {"item", x.item}, {"timestamp", x.timestamp}});
  }
  jsonl::write_all(path, recs);
}

InteractionDataset k_core_filter(const InteractionDataset& ds, std::size_t k) {
  if (k == 0) throw PreconditionError("k_core_filter: k must be >= 1");
  std::vector<Interaction> current = ds.interactions();
  while (true) {
    std::unordered_map<std::string, std::size_t> users, items;
    for (const auto& x : current) {
      ++users[x.user];
      ++items[x.item];
    }
    std::vector<Interaction> next;
    next.reserve(current.size());
    for (const auto& x : current) {
      if (users[x.user] >= k && items[x.item] >= k) next.push_back(x);
    }
    if (next.size() == current.size()) break;
    current = std::move(next);
  }
  return InteractionDataset(ds.items(), std::move(current));
}

std::vector<BehaviorSequence> build_sequences(const InteractionDataset& ds) {
  std::map<std::string, std::vector<std::size_t>> by_user;
  const auto& xs = ds.interactions();
  for (std::size_t i = 0; i < xs.size(); ++i) by_user[xs[i].user].push_back(i);

  std::vector<BehaviorSequence> out;
  out.reserve(by_user.size());
  for (auto& [user, idx] : by_user) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return xs[a].timestamp < xs[b].timestamp;
    });
    BehaviorSequence seq{user, {}};
    seq.items.reserve(idx.size());
    for (auto i : idx) seq.items.push_back(xs[i].item);
    out.push_back(std::move(seq));
  }
  return out;
}

SplitDataset leave_one_out_split(const std::vector<BehaviorSequence>& seqs) {
  SplitDataset split;
  for (const auto& seq : seqs) {
    const auto n = seq.items.size();
    if (n < kMinSplitLength) {
      ++split.dropped_short;
      continue;
    }
    UserSplit u;
    u.user = seq.user;
    u.train.assign(seq.items.begin(), seq.items.end() - 2);
    u.val_input = u.train;
    u.val_target = seq.items[n - 2];
    u.test_input.assign(seq.items.begin(), seq.items.end() - 1);
    u.test_target = seq.items[n - 1];
    split.users.push_back(std::move(u));
  }
  std::sort(split.users.begin(), split.users.end(),
            [](const UserSplit& a, const UserSplit& b) { return a.user < b.user; });
  return split;
}

SparsityGroups group_by_sparsity(const InteractionDataset& ds, std::size_t n_groups) {
  if (n_groups == 0) throw PreconditionError("group_by_sparsity: n_groups must be >= 1");
  const auto counts = ds.user_counts();
  if (counts.size() < n_groups) {
    throw SizeError("group_by_sparsity: " + std::to_string(counts.size()) + " users cannot fill " +
                    std::to_string(n_groups) + " groups");
  }
  std::vector<std::pair<std::size_t, std::string>> order;
  order.reserve(counts.size());
  for (const auto& [user, c] : counts) order.emplace_back(c, user);
  std::sort(order.begin(), order.end());

  const std::size_t base = order.size() / n_groups;
  const std::size_t extra = order.size() % n_groups;
  SparsityGroups out;
  out.groups.resize(n_groups);
  std::size_t pos = 0;
  for (std::size_t g = 0; g < n_groups; ++g) {
    const std::size_t size = base + (g >= n_groups - extra ? 1 : 0);
    for (std::size_t j = 0; j < size; ++j) out.groups[g].push_back(order[pos++].second);
  }
  return out;
}

std::map<std::string, std::size_t> item_frequency(const SplitDataset& split) {
  std::map<std::string, std::size_t> freq;
  for (const auto& u : split.users) {
    for (const auto& item : u.train) ++freq[item];
  }
  return freq;
}

std::map<std::string, std::size_t> item_user_frequency(const SplitDataset& split) {
  std::map<std::string, std::size_t> freq;
  for (const auto& u : split.users) {
    std::set<std::string> distinct(u.train.begin(), u.train.end());
    for (const auto& item : distinct) ++freq[item];
  }
  return freq;
}

void save_split(const std::filesystem::path& dir, const SplitDataset& split) {
  std::vector<json> train, val, test;
  for (const auto& u : split.users) {
    train.push_back({{"user", u.user}, {"input", u.train}});
    val.push_back({{"user", u.user}, {"input", u.val_input}, {"target", u.val_target}});
    test.push_back({{"user", u.user}, {"input", u.test_input}, {"target", u.test_target}});
  }
  jsonl::write_all(dir / "train.jsonl", train);
  jsonl::write_all(dir / "val.jsonl", val);
  jsonl::write_all(dir / "test.jsonl", test);
}

SplitDataset load_split(const std::filesystem::path& dir) {
  std::map<std::string, UserSplit> users;
  auto read = [&](const char* name, auto&& apply) {
    const auto path = dir / name;
    jsonl::for_each(path, [&](const json& rec, std::size_t line) {
      const auto user = jsonl::require_string(rec, "user", path.string(), line);
      auto input = rec.find("input");
      if (input == rec.end() || !input->is_array()) {
        throw ParseError(path.string(), line, "missing array field 'input'");
      }
      auto& u = users[user];
      u.user = user;
      apply(u, input->get<std::vector<std::string>>(), rec, path.string(), line);
    });
  };
  read("train.jsonl", [](UserSplit& u, std::vector<std::string> in, const json&, const std::string&,
                         std::size_t) { u.train = std::move(in); });
  read("val.jsonl", [](UserSplit& u, std::vector<std::string> in, const json& rec,
                       const std::string& src, std::size_t line) {
    u.val_input = std::move(in);
    u.val_target = jsonl::require_string(rec, "target", src, line);
  });
  read("test.jsonl", [](UserSplit& u, std::vector<std::string> in, const json& rec,
                        const std::string& src, std::size_t line) {
    u.test_input = std::move(in);
    u.test_target = jsonl::require_string(rec, "target", src, line);
  });
  SplitDataset split;
  for (auto& [_, u] : users) {
    if (u.test_target.empty() || u.val_target.empty()) {
      throw InputError("split in " + dir.string() + " is incomplete for user '" + u.user + "'");
    }
    split.users.push_back(std::move(u));
  }
  return split;
}

}  // namespace slim
