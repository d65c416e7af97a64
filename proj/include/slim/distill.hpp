#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace slim::distill {

/// (student prompt, teacher rationale) pair.
struct DistillExample {
  std::string user;
  std::string prompt;
  std::string completion;

  bool operator==(const DistillExample&) const = default;
};

/// Writes `{prompt, completion}` records ordered by user id. Returns the count.
std::size_t export_finetune_dataset(std::vector<DistillExample> examples,
                                    const std::filesystem::path& path);

/// Reads a fine-tune corpus back (users are left empty).
std::vector<DistillExample> read_finetune_dataset(const std::filesystem::path& path);

using TokenId = std::uint32_t;
inline constexpr TokenId kBos = 0;
inline constexpr TokenId kUnk = 1;

/// Word ↔ id table with reserved ids 0 (BOS) and 1 (UNK).
class Vocabulary {
 public:
  Vocabulary();

  /// Words are sorted lexicographically before ids are assigned.
  static Vocabulary from_texts(const std::vector<std::string>& texts);
  static Vocabulary from_words(const std::vector<std::string>& words);

  TokenId id(const std::string& word) const;
  const std::string& word(TokenId id) const { return words_.at(id); }
  std::size_t size() const { return words_.size(); }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> ids_;
};

/// Lowercased whitespace words with ASCII punctuation removed.
std::vector<std::string> split_words(const std::string& text);

struct TokenSequence {
  std::vector<TokenId> tokens;
  std::size_t vocab_size = 0;
};

/// BOS followed by one id per word; unknown words map to UNK.
TokenSequence tokenize(const std::string& text, const Vocabulary& vocab);

/// Chain scored for an example: the prompt's final token (BOS if none)
/// followed by the completion tokens. Prompt tokens contribute no loss terms.
TokenSequence conditioned_sequence(const DistillExample& ex, const Vocabulary& vocab);

/// First-order token model P(next | previous).
class TinyStudentModel {
 public:
  TinyStudentModel(Vocabulary vocab, double alpha);

  const Vocabulary& vocab() const { return vocab_; }
  double alpha() const { return alpha_; }
  std::size_t vocab_size() const { return vocab_.size(); }

  void observe(const TokenSequence& seq);

  /// (count(prev,next)+α)/(count(prev)+α·|V|); rows never observed are uniform.
  double probability(TokenId prev, TokenId next) const;
  std::vector<double> row(TokenId prev) const;

  /// Replaces a row with explicit probabilities (used by optimality checks).
  void set_row(TokenId prev, std::vector<double> probs);

 private:
  Vocabulary vocab_;
  double alpha_;
  std::vector<std::unordered_map<TokenId, double>> counts_;
  std::vector<double> totals_;
  std::unordered_map<TokenId, std::vector<double>> overrides_;
};

/// −Σ_{t≥1} ln P(token_t | token_{t−1}). Throws DomainError on a zero-probability step.
double nll_loss(const TinyStudentModel& model, const TokenSequence& seq);

/// Builds the vocabulary from prompts and completions and fits the closed-form
/// maximum-likelihood (α = 0) or additively smoothed transition table.
TinyStudentModel train_student_mle(const std::vector<DistillExample>& examples, double alpha);

/// Same fit over explicit sequences and a fixed vocabulary.
TinyStudentModel train_on_sequences(const std::vector<TokenSequence>& seqs, Vocabulary vocab,
                                    double alpha);

/// Mean per-token NLL over held-out completions (parallel over examples).
double evaluate_student_nll(const TinyStudentModel& model, const std::vector<DistillExample>& heldout);

/// Serial reference for evaluate_student_nll.
double evaluate_student_nll_serial(const TinyStudentModel& model,
                                   const std::vector<DistillExample>& heldout);

}  // namespace slim::distill
