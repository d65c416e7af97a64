#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace slim {

struct Item {
  std::string id;
  std::string title;
  std::optional<std::string> category;
  std::optional<std::string> brand;

  bool operator==(const Item&) const = default;
};

struct Interaction {
  std::string user;
  std::string item;
  std::int64_t timestamp = 0;

  bool operator==(const Interaction&) const = default;
};

/// Item catalog keyed by id, in insertion order.
class ItemTable {
 public:
  ItemTable() = default;
  explicit ItemTable(std::vector<Item> items);

  const Item& at(const std::string& id) const;
  const Item* find(const std::string& id) const;
  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  std::size_t size() const { return items_.size(); }
  const std::vector<Item>& items() const { return items_; }

  /// Ids in lexicographic order.
  std::vector<std::string> sorted_ids() const;

 private:
  std::vector<Item> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Immutable interaction log over a catalog. Every interaction references a known item.
class InteractionDataset {
 public:
  InteractionDataset() = default;
  InteractionDataset(ItemTable items, std::vector<Interaction> interactions);

  const ItemTable& items() const { return items_; }
  const std::vector<Interaction>& interactions() const { return interactions_; }

  /// Distinct users, lexicographically sorted.
  std::vector<std::string> users() const;

  /// Interaction count per user.
  std::map<std::string, std::size_t> user_counts() const;
  std::map<std::string, std::size_t> item_counts() const;

  /// Keeps every interaction of `n` users drawn uniformly without replacement.
  /// Returns the dataset unchanged when it has ≤ n users.
  InteractionDataset sample_users(std::size_t n, std::uint64_t seed) const;

 private:
  ItemTable items_;
  std::vector<Interaction> interactions_;
};

struct BehaviorSequence {
  std::string user;
  std::vector<std::string> items;

  bool operator==(const BehaviorSequence&) const = default;
};

/// One user's leave-one-out record.
struct UserSplit {
  std::string user;
  std::vector<std::string> train;
  std::vector<std::string> val_input;
  std::string val_target;
  std::vector<std::string> test_input;
  std::string test_target;

  /// train ∪ val ∪ test items, in chronological order.
  std::vector<std::string> full_history() const;

  bool operator==(const UserSplit&) const = default;
};

struct SplitDataset {
  std::vector<UserSplit> users;  // sorted by user id
  std::size_t dropped_short = 0;

  const UserSplit* find(const std::string& user) const;
  std::size_t train_interactions() const;
};

struct SparsityGroups {
  std::vector<std::vector<std::string>> groups;
};

InteractionDataset load_dataset(const std::filesystem::path& items_path,
                                const std::filesystem::path& interactions_path);

void save_items(const std::filesystem::path& path, const ItemTable& items);
void save_interactions(const std::filesystem::path& path,
                       const std::vector<Interaction>& interactions);

/// Iteratively drops users and items with fewer than k interactions until stable.
InteractionDataset k_core_filter(const InteractionDataset& ds, std::size_t k);

/// One chronological sequence per user (users in lexicographic order). Equal
/// timestamps keep input order.
std::vector<BehaviorSequence> build_sequences(const InteractionDataset& ds);

/// Sequences shorter than this are dropped by leave_one_out_split.
inline constexpr std::size_t kMinSplitLength = 3;

SplitDataset leave_one_out_split(const std::vector<BehaviorSequence>& seqs);

/// Users sorted by (interaction count, id) and cut into n nearly equal groups;
/// the remainder goes to the last groups.
SparsityGroups group_by_sparsity(const InteractionDataset& ds, std::size_t n_groups = 5);

/// Occurrences of each item across train prefixes only.
std::map<std::string, std::size_t> item_frequency(const SplitDataset& split);

/// Number of distinct train users that interacted with each item.
std::map<std::string, std::size_t> item_user_frequency(const SplitDataset& split);

void save_split(const std::filesystem::path& dir, const SplitDataset& split);
SplitDataset load_split(const std::filesystem::path& dir);

}  // namespace slim
