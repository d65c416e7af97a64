#include "slim/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "slim/error.hpp"
#include "slim/hashing.hpp"
#include "slim/parallel.hpp"

namespace slim::eval {

std::vector<std::string> sample_negatives(const std::vector<std::string>& catalog, const std::set<std::string>& history,
                                          std::size_t n, std::uint64_t seed, const std::string& user) {
  std::vector<std::string> pool;
  pool.reserve(catalog.size());
  for (const auto& id : catalog) {
    if (!history.count(id)) pool.push_back(id);
  }
  if (pool.size() < n) {
    throw SizeError("user '" + user + "' has only " + std::to_string(pool.size()) + " non-history items, " +
                    std::to_string(n) + " negatives requested");
  }
  // Partial Fisher-Yates over the sorted pool.
  std::sort(pool.begin(), pool.end());
  Rng rng(derive_seed(seed, user));
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = i + uniform_index(rng, pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(n);
  return pool;
}

RankingTask make_task(const UserSplit& user, const std::vector<std::string>& catalog, const EvalConfig& cfg) {
  RankingTask task;
  task.user = user.user;
  if (cfg.target == Target::Test) {
    task.input = user.test_input;
    task.ground_truth = user.test_target;
  } else {
    task.input = user.val_input;
    task.ground_truth = user.val_target;
  }
  const auto full = user.full_history();
  const std::set<std::string> history(full.begin(), full.end());
  task.candidates.push_back(task.ground_truth);
  for (auto& id : sample_negatives(catalog, history, cfg.negatives, cfg.seed, user.user)) {
    task.candidates.push_back(std::move(id));
  }
  return task;
}

namespace {

// a ranks before b
bool ranks_before(double sa, const std::string& ia, double sb, const std::string& ib) {
  return sa > sb || (sa == sb && ia < ib);
}

std::vector<double> checked_scores(const Scorer& scorer, const RankingTask& task) {
  auto scores = scorer.score(task.user, task.input, task.candidates);
  if (scores.size() != task.candidates.size()) throw PreconditionError("scorer returned the wrong number of scores");
  return scores;
}

}  // namespace

std::size_t rank_from_scores(const std::vector<double>& scores, const std::vector<std::string>& candidates,
                             std::size_t truth_index) {
  if (scores.size() != candidates.size() || truth_index >= scores.size()) {
    throw PreconditionError("rank_from_scores: inconsistent inputs");
  }
  for (double s : scores) {
    if (std::isnan(s)) throw UnscorableError("scorer produced NaN");
  }
  const double st = scores[truth_index];
  const auto& it = candidates[truth_index];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (j != truth_index && ranks_before(scores[j], candidates[j], st, it)) ++rank;
  }
  return rank;
}

std::size_t rank_candidates(const Scorer& scorer, const RankingTask& task) {
  const auto scores = checked_scores(scorer, task);
  const auto pos = std::find(task.candidates.begin(), task.candidates.end(), task.ground_truth);
  if (pos == task.candidates.end()) throw PreconditionError("ground truth is not among the candidates");
  return rank_from_scores(scores, task.candidates, static_cast<std::size_t>(pos - task.candidates.begin()));
}

std::vector<std::string> ranked_candidates(const Scorer& scorer, const RankingTask& task) {
  const auto scores = checked_scores(scorer, task);
  for (double s : scores) {
    if (std::isnan(s)) throw UnscorableError("scorer produced NaN");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return ranks_before(scores[a], task.candidates[a], scores[b], task.candidates[b]);
  });
  std::vector<std::string> out;
  out.reserve(order.size());
  for (auto i : order) out.push_back(task.candidates[i]);
  return out;
}

double ndcg_at_k(std::size_t rank, std::size_t k) {
  if (rank < 1) throw PreconditionError("rank must be >= 1");
  return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

int hit_at_k(std::size_t rank, std::size_t k) {
  if (rank < 1) throw PreconditionError("rank must be >= 1");
  return rank <= k ? 1 : 0;
}

UserMetrics metrics_for_rank(const std::string& user, std::size_t rank) {
  return {user, rank, ndcg_at_k(rank, 10), hit_at_k(rank, 10), hit_at_k(rank, 20)};
}

MetricReport summarize(std::vector<UserMetrics> rows, std::vector<TaskFailure> failures, std::uint64_t seed) {
  MetricReport r;
  r.seed = seed;
  r.n_users = rows.size();
  r.empty = rows.empty();
  if (!rows.empty()) {
    double n = 0, h10 = 0, h20 = 0;
    for (const auto& u : rows) {
      n += u.ndcg10;
      h10 += u.hit10;
      h20 += u.hit20;
    }
    const double m = static_cast<double>(rows.size());
    r.ndcg10 = 100.0 * n / m;
    r.hit10 = 100.0 * h10 / m;
    r.hit20 = 100.0 * h20 / m;
  }
  r.per_user = std::move(rows);
  r.failures = std::move(failures);
  return r;
}

namespace {

struct Outcome {
  std::optional<UserMetrics> metrics;
  std::string error;
};

Outcome evaluate_one(const Scorer& scorer, const UserSplit& user, const std::vector<std::string>& catalog,
                     const EvalConfig& cfg) {
  try {
    const auto task = make_task(user, catalog, cfg);
    return {metrics_for_rank(user.user, rank_candidates(scorer, task)), {}};
  } catch (const SizeError&) {
    throw;
  } catch (const UnscorableError& e) {
    return {std::nullopt, e.what()};
  }
}

MetricReport collect(const SplitDataset& split, std::vector<Outcome>& outcomes, std::uint64_t seed) {
  std::vector<UserMetrics> rows;
  std::vector<TaskFailure> failures;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (outcomes[i].metrics) {
      rows.push_back(std::move(*outcomes[i].metrics));
    } else {
      failures.push_back({split.users[i].user, std::move(outcomes[i].error)});
    }
  }
  return summarize(std::move(rows), std::move(failures), seed);
}

}  // namespace

MetricReport evaluate(const Scorer& scorer, const SplitDataset& split, const std::vector<std::string>& catalog,
                      const EvalConfig& cfg) {
  std::vector<Outcome> outcomes(split.users.size());
  parallel_for(split.users.size(),
               [&](std::size_t i) { outcomes[i] = evaluate_one(scorer, split.users[i], catalog, cfg); });
  return collect(split, outcomes, cfg.seed);
}

MetricReport evaluate_serial(const Scorer& scorer, const SplitDataset& split,
                             const std::vector<std::string>& catalog, const EvalConfig& cfg) {
  std::vector<Outcome> outcomes;
  outcomes.reserve(split.users.size());
  for (const auto& u : split.users) outcomes.push_back(evaluate_one(scorer, u, catalog, cfg));
  return collect(split, outcomes, cfg.seed);
}

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd out;
  if (values.empty()) return out;
  const double n = static_cast<double>(values.size());
  for (double v : values) out.mean += v;
  out.mean /= n;
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.stddev = std::sqrt(ss / (n - 1));
  }
  return out;
}

RunSummary aggregate_runs(const std::vector<MetricReport>& runs) {
  std::vector<double> n, h10, h20;
  for (const auto& r : runs) {
    n.push_back(r.ndcg10);
    h10.push_back(r.hit10);
    h20.push_back(r.hit20);
  }
  return {mean_std(n), mean_std(h10), mean_std(h20), runs.size()};
}

double item_popularity(const std::map<std::string, std::size_t>& train_user_count, std::size_t n_train_users,
                       const std::string& item) {
  if (n_train_users == 0) throw PreconditionError("popularity needs at least one train user");
  const double floor = 1.0 / static_cast<double>(n_train_users + 1);
  auto it = train_user_count.find(item);
  const double count = it == train_user_count.end() ? 0.0 : static_cast<double>(it->second);
  return std::max(count / static_cast<double>(n_train_users), floor);
}

namespace {

template <class Novelty>
double discounted_novelty(const std::vector<std::vector<std::string>>& recs,
                          const std::map<std::string, std::size_t>& counts, std::size_t n_train_users, std::size_t k,
                          Novelty novelty) {
  if (k < 1) throw PreconditionError("k must be >= 1");
  if (recs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& list : recs) {
    double num = 0.0, den = 0.0;
    const auto depth = std::min(k, list.size());
    for (std::size_t j = 1; j <= depth; ++j) {
      const double disc = 1.0 / std::log2(static_cast<double>(j) + 1.0);
      num += disc * novelty(item_popularity(counts, n_train_users, list[j - 1]));
      den += disc;
    }
    if (den > 0) total += num / den;
  }
  return total / static_cast<double>(recs.size());
}

}  // namespace

double epc_at_k(const std::vector<std::vector<std::string>>& recs,
                const std::map<std::string, std::size_t>& train_user_count, std::size_t n_train_users,
                std::size_t k) {
  return discounted_novelty(recs, train_user_count, n_train_users, k, [](double p) { return 1.0 - p; });
}

double efd_at_k(const std::vector<std::vector<std::string>>& recs,
                const std::map<std::string, std::size_t>& train_user_count, std::size_t n_train_users,
                std::size_t k) {
  return discounted_novelty(recs, train_user_count, n_train_users, k, [](double p) { return -std::log2(p); });
}

PopularityReport popularity_histogram(const Scorer& scorer, const SplitDataset& split,
                                      const std::vector<std::string>& catalog, const EvalConfig& cfg, std::size_t k) {
  if (k < 1) throw PreconditionError("k must be >= 1");
  std::vector<std::optional<std::vector<std::string>>> lists(split.users.size());
  std::vector<std::string> errors(split.users.size());
  parallel_for(split.users.size(), [&](std::size_t i) {
    try {
      auto ranked = ranked_candidates(scorer, make_task(split.users[i], catalog, cfg));
      ranked.resize(std::min(k, ranked.size()));
      lists[i] = std::move(ranked);
    } catch (const UnscorableError& e) {
      errors[i] = e.what();
    }
  });

  PopularityReport report;
  report.k = k;
  const auto train_counts = item_frequency(split);
  std::map<std::string, std::size_t> rec_counts;
  std::vector<std::vector<std::string>> recs;
  for (std::size_t i = 0; i < lists.size(); ++i) {
    if (!lists[i]) {
      report.failures.push_back({split.users[i].user, errors[i]});
      continue;
    }
    for (const auto& id : *lists[i]) ++rec_counts[id];
    recs.push_back(std::move(*lists[i]));
  }
  report.n_users = recs.size();
  for (const auto& id : catalog) {
    auto t = train_counts.find(id);
    auto r = rec_counts.find(id);
    report.items.push_back({id, t == train_counts.end() ? 0 : t->second, r == rec_counts.end() ? 0 : r->second});
  }
  std::sort(report.items.begin(), report.items.end(), [](const ItemFrequency& a, const ItemFrequency& b) {
    return a.train_count != b.train_count ? a.train_count > b.train_count : a.item < b.item;
  });
  if (!recs.empty()) {
    const auto user_counts = item_user_frequency(split);
    report.epc10 = epc_at_k(recs, user_counts, split.users.size(), 10);
    report.efd10 = efd_at_k(recs, user_counts, split.users.size(), 10);
  }
  return report;
}

std::vector<GroupReport> regroup(const MetricReport& report, const SparsityGroups& groups) {
  std::map<std::string, const UserMetrics*> by_user;
  for (const auto& u : report.per_user) by_user.emplace(u.user, &u);
  std::map<std::string, const TaskFailure*> failed;
  for (const auto& f : report.failures) failed.emplace(f.user, &f);

  std::vector<GroupReport> out;
  for (std::size_t g = 0; g < groups.groups.size(); ++g) {
    std::vector<std::string> members = groups.groups[g];
    std::sort(members.begin(), members.end());
    std::vector<UserMetrics> rows;
    std::vector<TaskFailure> failures;
    for (const auto& u : members) {
      if (auto it = by_user.find(u); it != by_user.end()) rows.push_back(*it->second);
      if (auto it = failed.find(u); it != failed.end()) failures.push_back(*it->second);
    }
    out.push_back({"G" + std::to_string(g + 1), members.size(),
                   summarize(std::move(rows), std::move(failures), report.seed)});
  }
  return out;
}

std::vector<GroupReport> sparsity_group_eval(const Scorer& scorer, const SplitDataset& split,
                                             const std::vector<std::string>& catalog, const SparsityGroups& groups,
                                             const EvalConfig& cfg) {
  return regroup(evaluate(scorer, split, catalog, cfg), groups);
}

std::vector<double> PopularityScorer::score(const std::string&, const std::vector<std::string>&,
                                            const std::vector<std::string>& candidates) const {
  std::vector<double> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) {
    auto it = counts_.find(c);
    out.push_back(it == counts_.end() ? 0.0 : static_cast<double>(it->second));
  }
  return out;
}

}  // namespace slim::eval
