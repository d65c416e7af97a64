#pragma once

#include <string>
#include <vector>

#include "slim/error.hpp"

namespace slim {

/// Raised when a candidate cannot be scored (e.g. an unknown item for an ID-only model).
class UnscorableError : public Error {
 public:
  using Error::Error;
};

/// Scores candidate items for one user given the user's history. Higher is better.
/// Implementations must be safe to call concurrently.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual std::vector<double> score(const std::string& user, const std::vector<std::string>& history,
                                    const std::vector<std::string>& candidates) const = 0;
};

}  // namespace slim
