#pragma once

#include <map>
#include <string>
#include <utility>

#include "slim/distill.hpp"

namespace slim::testing {

/// Twenty completion words seeded by the prompt's last word "recommend".
inline distill::DistillExample bigram_fixture() {
  return {"u", "Please recommend",
          "the cat sat on the mat the cat ate the rat on the mat a cat sat on a mat"};
}

/// Transition probabilities of bigram_fixture counted by hand.
inline std::map<std::pair<std::string, std::string>, double> bigram_fixture_table() {
  return {
      {{"recommend", "the"}, 1.0},
      {{"the", "cat"}, 2.0 / 5.0}, {{"the", "mat"}, 2.0 / 5.0}, {{"the", "rat"}, 1.0 / 5.0},
      {{"cat", "sat"}, 2.0 / 3.0}, {{"cat", "ate"}, 1.0 / 3.0},
      {{"sat", "on"}, 1.0},
      {{"on", "the"}, 2.0 / 3.0}, {{"on", "a"}, 1.0 / 3.0},
      {{"mat", "the"}, 1.0 / 2.0}, {{"mat", "a"}, 1.0 / 2.0},
      {{"ate", "the"}, 1.0},
      {{"rat", "on"}, 1.0},
      {{"a", "cat"}, 1.0 / 2.0}, {{"a", "mat"}, 1.0 / 2.0},
  };
}

}  // namespace slim::testing
