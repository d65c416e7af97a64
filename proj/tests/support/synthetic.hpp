#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "slim/dataset.hpp"

namespace slim::testing {

/// Planted-category interaction data. Each user belongs to one category and
/// picks in-category items with probability `in_category`; within a category
/// item popularity is Zipf(`zipf`), by default in title order.
struct SyntheticSpec {
  std::size_t users = 200;
  std::size_t categories = 5;
  std::size_t items_per_category = 50;
  double in_category = 0.9;
  double zipf = 1.0;
  /// Probability that an in-category pick is the first unseen item in title
  /// order (series-style progression) rather than a popularity draw.
  double walk = 0.0;
  /// When false, Zipf popularity follows a seeded shuffle of the title order.
  bool popularity_follows_titles = true;
  std::size_t min_length = 8;
  std::size_t max_length = 14;
  /// Share of each category's items that are cold: one train occurrence, then
  /// used as test targets for `cold_target_share` of users.
  double cold_fraction = 0.0;
  double cold_target_share = 0.5;
  std::uint64_t seed = 1;
};

struct SyntheticData {
  ItemTable items;
  std::vector<Interaction> interactions;
  std::map<std::string, std::string> user_category;
  std::vector<std::string> cold_items;
  std::vector<std::string> categories;
};

SyntheticData make_synthetic(const SyntheticSpec& spec);

/// Category names used by make_synthetic.
const std::vector<std::string>& category_names();

}  // namespace slim::testing
