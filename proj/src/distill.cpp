#include "slim/distill.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <sstream>

#include "slim/error.hpp"
#include "slim/jsonl.hpp"
#include "slim/parallel.hpp"

namespace slim::distill {

using nlohmann::json;

std::size_t export_finetune_dataset(std::vector<DistillExample> examples,
                                    const std::filesystem::path& path) {
  if (examples.empty()) throw PreconditionError("export_finetune_dataset: no examples");
  std::stable_sort(examples.begin(), examples.end(),
                   [](const DistillExample& a, const DistillExample& b) { return a.user < b.user; });
  std::vector<json> recs;
  recs.reserve(examples.size());
  for (const auto& ex : examples) {
    if (ex.prompt.empty() || ex.completion.empty()) {
      throw PreconditionError("export_finetune_dataset: empty prompt or completion for user '" + ex.user + "'");
    }
    recs.push_back({{"prompt", ex.prompt}, {"completion", ex.completion}});
  }
  jsonl::write_all(path, recs);
  return recs.size();
}

std::vector<DistillExample> read_finetune_dataset(const std::filesystem::path& path) {
  std::vector<DistillExample> out;
  const auto src = path.string();
  jsonl::for_each(path, [&](const json& rec, std::size_t line) {
    out.push_back({{}, jsonl::require_string(rec, "prompt", src, line),
                   jsonl::require_string(rec, "completion", src, line)});
  });
  return out;
}

Vocabulary::Vocabulary() : words_{"<bos>", "<unk>"} {
  ids_.emplace(words_[0], kBos);
  ids_.emplace(words_[1], kUnk);
}

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  std::set<std::string> unique(words.begin(), words.end());
  Vocabulary v;
  for (const auto& w : unique) {
    if (v.ids_.count(w)) continue;
    v.ids_.emplace(w, static_cast<TokenId>(v.words_.size()));
    v.words_.push_back(w);
  }
  return v;
}

Vocabulary Vocabulary::from_texts(const std::vector<std::string>& texts) {
  std::vector<std::string> words;
  for (const auto& t : texts) {
    auto w = split_words(t);
    words.insert(words.end(), w.begin(), w.end());
  }
  return from_words(words);
}

TokenId Vocabulary::id(const std::string& word) const {
  auto it = ids_.find(word);
  return it == ids_.end() ? kUnk : it->second;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) {
    std::string clean;
    for (char c : w) {
      const auto u = static_cast<unsigned char>(c);
      if (u < 0x80 && std::ispunct(u)) continue;
      clean.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : c);
    }
    if (!clean.empty()) out.push_back(std::move(clean));
  }
  return out;
}

TokenSequence tokenize(const std::string& text, const Vocabulary& vocab) {
  TokenSequence seq{{kBos}, vocab.size()};
  for (const auto& w : split_words(text)) seq.tokens.push_back(vocab.id(w));
  return seq;
}

TokenSequence conditioned_sequence(const DistillExample& ex, const Vocabulary& vocab) {
  const auto prompt_words = split_words(ex.prompt);
  TokenSequence seq{{prompt_words.empty() ? kBos : vocab.id(prompt_words.back())}, vocab.size()};
  for (const auto& w : split_words(ex.completion)) seq.tokens.push_back(vocab.id(w));
  return seq;
}

TinyStudentModel::TinyStudentModel(Vocabulary vocab, double alpha)
    : vocab_(std::move(vocab)), alpha_(alpha), counts_(vocab_.size()), totals_(vocab_.size(), 0.0) {
  if (alpha < 0) throw PreconditionError("smoothing alpha must be >= 0");
}

void TinyStudentModel::observe(const TokenSequence& seq) {
  for (std::size_t t = 1; t < seq.tokens.size(); ++t) {
    const auto prev = seq.tokens[t - 1];
    const auto next = seq.tokens[t];
    if (prev >= vocab_size() || next >= vocab_size()) throw PreconditionError("token id outside vocabulary");
    counts_[prev][next] += 1.0;
    totals_[prev] += 1.0;
  }
}

double TinyStudentModel::probability(TokenId prev, TokenId next) const {
  if (auto it = overrides_.find(prev); it != overrides_.end()) return it->second.at(next);
  const double v = static_cast<double>(vocab_size());
  const double total = totals_.at(prev);
  if (total == 0.0 && alpha_ == 0.0) return 1.0 / v;
  const auto& row = counts_[prev];
  auto it = row.find(next);
  const double c = it == row.end() ? 0.0 : it->second;
  return (c + alpha_) / (total + alpha_ * v);
}

std::vector<double> TinyStudentModel::row(TokenId prev) const {
  std::vector<double> out(vocab_size());
  for (TokenId j = 0; j < vocab_size(); ++j) out[j] = probability(prev, j);
  return out;
}

void TinyStudentModel::set_row(TokenId prev, std::vector<double> probs) {
  if (probs.size() != vocab_size()) throw PreconditionError("set_row: wrong row length");
  overrides_[prev] = std::move(probs);
}

double nll_loss(const TinyStudentModel& model, const TokenSequence& seq) {
  if (seq.tokens.size() < 2) throw PreconditionError("nll_loss: sequence needs at least 2 tokens");
  double nll = 0.0;
  for (std::size_t t = 1; t < seq.tokens.size(); ++t) {
    const double p = model.probability(seq.tokens[t - 1], seq.tokens[t]);
    if (!(p > 0.0)) {
      throw DomainError("zero-probability transition " + model.vocab().word(seq.tokens[t - 1]) + " -> " +
                        model.vocab().word(seq.tokens[t]));
    }
    nll -= std::log(p);
  }
  return nll;
}

TinyStudentModel train_on_sequences(const std::vector<TokenSequence>& seqs, Vocabulary vocab, double alpha) {
  TinyStudentModel model(std::move(vocab), alpha);
  for (const auto& s : seqs) model.observe(s);
  return model;
}

TinyStudentModel train_student_mle(const std::vector<DistillExample>& examples, double alpha) {
  if (examples.empty()) throw PreconditionError("train_student_mle: no examples");
  std::vector<std::string> texts;
  texts.reserve(2 * examples.size());
  for (const auto& ex : examples) {
    texts.push_back(ex.prompt);
    texts.push_back(ex.completion);
  }
  auto vocab = Vocabulary::from_texts(texts);
  std::vector<TokenSequence> seqs;
  seqs.reserve(examples.size());
  for (const auto& ex : examples) seqs.push_back(conditioned_sequence(ex, vocab));
  return train_on_sequences(seqs, std::move(vocab), alpha);
}

double evaluate_student_nll_serial(const TinyStudentModel& model, const std::vector<DistillExample>& heldout) {
  if (heldout.empty()) throw PreconditionError("evaluate_student_nll: empty held-out set");
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : heldout) {
    const auto seq = conditioned_sequence(ex, model.vocab());
    if (seq.tokens.size() < 2) continue;
    total += nll_loss(model, seq);
    tokens += seq.tokens.size() - 1;
  }
  return tokens ? total / static_cast<double>(tokens) : 0.0;
}

double evaluate_student_nll(const TinyStudentModel& model, const std::vector<DistillExample>& heldout) {
  if (heldout.empty()) throw PreconditionError("evaluate_student_nll: empty held-out set");
  std::vector<double> nll(heldout.size(), 0.0);
  std::vector<std::size_t> count(heldout.size(), 0);
  parallel_for(heldout.size(), [&](std::size_t i) {
    const auto seq = conditioned_sequence(heldout[i], model.vocab());
    if (seq.tokens.size() < 2) return;
    nll[i] = nll_loss(model, seq);
    count[i] = seq.tokens.size() - 1;
  });
  // Summed in example order so the result matches the serial path bit for bit.
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < heldout.size(); ++i) {
    total += nll[i];
    tokens += count[i];
  }
  return tokens ? total / static_cast<double>(tokens) : 0.0;
}

}  // namespace slim::distill
