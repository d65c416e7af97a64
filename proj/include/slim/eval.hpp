#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "slim/dataset.hpp"
#include "slim/scorer.hpp"

namespace slim::eval {

/// One user's ranking problem: the ground truth among sampled negatives.
struct RankingTask {
  std::string user;
  std::vector<std::string> input;       // history fed to the scorer
  std::string ground_truth;
  std::vector<std::string> candidates;  // ground truth first, then negatives
};

enum class Target { Validation, Test };

struct EvalConfig {
  std::size_t negatives = 100;
  std::uint64_t seed = 0;
  Target target = Target::Test;
};

/// `n` distinct items drawn uniformly from `catalog` minus `history`, seeded per
/// (seed, user). Throws SizeError when fewer than `n` items remain.
std::vector<std::string> sample_negatives(const std::vector<std::string>& catalog, const std::set<std::string>& history,
                                          std::size_t n, std::uint64_t seed, const std::string& user);

/// Negatives exclude the user's whole history (train, validation and test).
RankingTask make_task(const UserSplit& user, const std::vector<std::string>& catalog, const EvalConfig& cfg);

/// 1-based position of the ground truth after sorting by descending score,
/// ties broken by ascending item id. Throws on non-finite scores.
std::size_t rank_from_scores(const std::vector<double>& scores, const std::vector<std::string>& candidates,
                             std::size_t truth_index);

std::size_t rank_candidates(const Scorer& scorer, const RankingTask& task);

/// Candidates in ranked order (same ordering rule as rank_from_scores).
std::vector<std::string> ranked_candidates(const Scorer& scorer, const RankingTask& task);

double ndcg_at_k(std::size_t rank, std::size_t k);
int hit_at_k(std::size_t rank, std::size_t k);

struct UserMetrics {
  std::string user;
  std::size_t rank = 0;
  double ndcg10 = 0;
  int hit10 = 0;
  int hit20 = 0;
};

struct TaskFailure {
  std::string user;
  std::string message;
};

/// Means over scored users, in percent.
struct MetricReport {
  double ndcg10 = 0;
  double hit10 = 0;
  double hit20 = 0;
  std::uint64_t seed = 0;
  std::size_t n_users = 0;
  bool empty = true;  // no scored users
  std::vector<UserMetrics> per_user;  // sorted by user
  std::vector<TaskFailure> failures;  // excluded users

  std::size_t excluded() const { return failures.size(); }
};

UserMetrics metrics_for_rank(const std::string& user, std::size_t rank);

/// Report from per-user rows (kept in the given order).
MetricReport summarize(std::vector<UserMetrics> rows, std::vector<TaskFailure> failures, std::uint64_t seed);

/// One task per split user, scored in parallel; output does not depend on the thread count.
MetricReport evaluate(const Scorer& scorer, const SplitDataset& split, const std::vector<std::string>& catalog,
                      const EvalConfig& cfg);

/// Single-threaded reference for evaluate.
MetricReport evaluate_serial(const Scorer& scorer, const SplitDataset& split,
                             const std::vector<std::string>& catalog, const EvalConfig& cfg);

struct MeanStd {
  double mean = 0;
  double stddev = 0;  // sample standard deviation, 0 for a single run
};

struct RunSummary {
  MeanStd ndcg10, hit10, hit20;
  std::size_t runs = 0;
};

RunSummary aggregate_runs(const std::vector<MetricReport>& runs);
MeanStd mean_std(const std::vector<double>& values);

/// p(i) = train_user_count(i) / n_train_users, floored at 1 / (n_train_users + 1).
double item_popularity(const std::map<std::string, std::size_t>& train_user_count, std::size_t n_train_users,
                       const std::string& item);

/// Expected popularity complement with log2 rank discount, averaged over lists.
double epc_at_k(const std::vector<std::vector<std::string>>& recs,
                const std::map<std::string, std::size_t>& train_user_count, std::size_t n_train_users,
                std::size_t k = 10);

/// Expected free discovery (novelty −log2 p), same discount and averaging.
double efd_at_k(const std::vector<std::vector<std::string>>& recs,
                const std::map<std::string, std::size_t>& train_user_count, std::size_t n_train_users,
                std::size_t k = 10);

struct ItemFrequency {
  std::string item;
  std::size_t train_count = 0;
  std::size_t rec_count = 0;
};

struct PopularityReport {
  std::vector<ItemFrequency> items;  // train_count descending, then id
  double efd10 = 0;
  double epc10 = 0;
  std::size_t k = 10;
  std::size_t n_users = 0;  // users whose top-k lists were counted
  std::vector<TaskFailure> failures;
};

/// Counts appearances of each catalog item in every user's top-k over the
/// sampled-candidate tasks, plus EFD@k / EPC@k of those lists.
PopularityReport popularity_histogram(const Scorer& scorer, const SplitDataset& split,
                                      const std::vector<std::string>& catalog, const EvalConfig& cfg,
                                      std::size_t k = 10);

struct GroupReport {
  std::string name;      // G1..Gn
  std::size_t members = 0;
  MetricReport report;   // report.empty when no member was scored
};

/// Per-group reports built from a single evaluation pass.
std::vector<GroupReport> sparsity_group_eval(const Scorer& scorer, const SplitDataset& split,
                                             const std::vector<std::string>& catalog, const SparsityGroups& groups,
                                             const EvalConfig& cfg);

/// Same, regrouping an existing report.
std::vector<GroupReport> regroup(const MetricReport& report, const SparsityGroups& groups);

/// Scores each candidate by its train-split occurrence count.
class PopularityScorer final : public Scorer {
 public:
  explicit PopularityScorer(std::map<std::string, std::size_t> train_counts) : counts_(std::move(train_counts)) {}
  std::vector<double> score(const std::string& user, const std::vector<std::string>& history,
                            const std::vector<std::string>& candidates) const override;

 private:
  std::map<std::string, std::size_t> counts_;
};

}  // namespace slim::eval
