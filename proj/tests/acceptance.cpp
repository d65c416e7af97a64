// Acceptance suite: one PASS/FAIL line per check, nonzero exit on any failure.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <omp.h>

#include "fixtures.hpp"
#include "slim/distill.hpp"
#include "slim/embed.hpp"
#include "slim/eval.hpp"
#include "slim/hashing.hpp"
#include "slim/llm_client.hpp"
#include "slim/pipeline.hpp"
#include "slim/prompts.hpp"
#include "slim/rec_core.hpp"
#include "synthetic.hpp"
#include "temp_dir.hpp"

using namespace slim;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::uint64_t bits(double x) { return std::bit_cast<std::uint64_t>(x); }

// ---------------------------------------------------------------------------

Outcome metric_oracle() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = 1 + uniform_index(rng, 7);
    std::vector<std::string> cands;
    std::set<std::string> used;
    while (cands.size() < n) {
      auto id = "item" + std::to_string(uniform_index(rng, 30));
      if (used.insert(id).second) cands.push_back(id);
    }
    std::vector<double> scores(n);
    for (auto& s : scores) s = uniform_index(rng, 3) == 0 ? 0.25 : uniform_real(rng, -2, 2);
    const auto truth = uniform_index(rng, n);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return scores[a] != scores[b] ? scores[a] > scores[b] : cands[a] < cands[b];
    });
    const auto oracle_rank = static_cast<std::size_t>(std::find(order.begin(), order.end(), truth) - order.begin()) + 1;
    const double oracle_ndcg = oracle_rank <= 10 ? 1.0 / std::log2(static_cast<double>(oracle_rank) + 1.0) : 0.0;
    const int oracle_h10 = oracle_rank <= 10, oracle_h20 = oracle_rank <= 20;

    const auto m = eval::metrics_for_rank("u", eval::rank_from_scores(scores, cands, truth));
    if (bits(m.ndcg10) != bits(oracle_ndcg) || m.hit10 != oracle_h10 || m.hit20 != oracle_h20) ++mismatches;
  }
  const double t = seconds_since(t0);
  return {mismatches == 0 && t < 5.0, fmt::format("mismatches={} time={:.3f}s", mismatches, t)};
}

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::string worst_at;
  bool ok = true;
  for (auto mode : {rec::Mode::IdOnly, rec::Mode::IdText, rec::Mode::Slim, rec::Mode::Agnostic}) {
    for (auto bb : {rec::Backbone::Mean, rec::Backbone::Gru, rec::Backbone::Attention}) {
      rec::ModelConfig cfg;
      cfg.mode = mode;
      cfg.backbone = bb;
      cfg.id_dim = 8;
      cfg.text_dim = 8;
      cfg.match_dim = 8;
      cfg.max_seq_len = 5;
      const auto r = rec::grad_check(cfg, 1e-4);
      ok = ok && r.passed && r.checked > 0;
      if (r.max_rel_error >= worst) {
        worst = r.max_rel_error;
        worst_at = fmt::format("{}/{}:{}", rec::to_string(mode), rec::to_string(bb), r.worst_tensor);
      }
    }
  }
  const double t = seconds_since(t0);
  return {ok && t < 30.0, fmt::format("max_rel_error={:.2e} at {} time={:.2f}s", worst, worst_at, t)};
}

Outcome distillation_oracle() {
  const auto ex = slim::testing::bigram_fixture();
  const auto m = distill::train_student_mle({ex}, 0.0);
  const auto& v = m.vocab();
  double worst_p = 0;
  for (const auto& [edge, p] : slim::testing::bigram_fixture_table()) {
    worst_p = std::max(worst_p, std::abs(m.probability(v.id(edge.first), v.id(edge.second)) - p));
  }
  const auto seq = distill::conditioned_sequence(ex, v);
  const double nll = distill::nll_loss(m, seq);
  const double closed = 4 * std::log(2.5) + std::log(5.0) + 4 * std::log(1.5) + 2 * std::log(3.0) + 4 * std::log(2.0);

  Rng rng(77);
  int decreased = 0, tried = 0;
  while (tried < 100) {
    auto p = m;
    const auto prev = seq.tokens[1 + uniform_index(rng, seq.tokens.size() - 2)];  // an observed context
    auto row = p.row(prev);
    double sum = 0;
    for (auto& x : row) {
      x *= uniform_real(rng, 0.5, 1.5);
      sum += x;
    }
    for (auto& x : row) x /= sum;
    p.set_row(prev, row);
    ++tried;
    try {
      if (distill::nll_loss(p, seq) < nll - 1e-12) ++decreased;
    } catch (const DomainError&) {
    }
  }
  const bool ok = worst_p <= 1e-12 && std::abs(nll - closed) <= 1e-12 && decreased == 0;
  return {ok, fmt::format("max|Δp|={:.1e} |nll-closed|={:.1e} decreased={}/100", worst_p, std::abs(nll - closed),
                          decreased)};
}

// ---------------------------------------------------------------------------

struct CliRun {
  int code;
  std::string out, err;
};

CliRun cli(const std::string& config, std::vector<std::string> args) {
  args.insert(args.begin(), {"slim", "--config", config});
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = pipeline::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

/// Workspace shared by the end-to-end and determinism checks.
struct EndToEnd {
  slim::testing::TempDir dir;
  std::string config;
  std::string log;

  EndToEnd() {
    slim::testing::SyntheticSpec spec;
    spec.users = 200;
    spec.categories = 5;
    spec.in_category = 0.9;
    const auto data = slim::testing::make_synthetic(spec);
    save_items(dir / "items.jsonl", data.items);
    save_interactions(dir / "interactions.jsonl", data.interactions);
    config = (dir / "config.json").string();
    set_work("work");
  }

  void set_work(const std::string& name) {
    slim::testing::write_file(config, json{{"paths.items", (dir / "items.jsonl").string()},
                                           {"paths.interactions", (dir / "interactions.jsonl").string()},
                                           {"paths.work", (dir / name).string()},
                                           {"paths.cache", (dir / "rationales.jsonl").string()},
                                           {"embedding.role", "teacher"},
                                           {"embedding.dimension", 768},
                                           {"model.mode", "agnostic"}}
                                          .dump());
  }

  bool step(std::vector<std::string> args) {
    const auto r = cli(config, std::move(args));
    log += r.out + r.err;
    return r.code == 0;
  }

  bool full_run() {
    return step({"prepare"}) && step({"rationalize", "--mock", "--role", "teacher"}) && step({"embed"}) &&
           step({"train"}) && step({"eval"}) && step({"analyze"});
  }
};

Outcome end_to_end(EndToEnd& e2e) {
  const auto t0 = Clock::now();
  if (!e2e.full_run()) return {false, "pipeline failed: " + e2e.log};
  const double t = seconds_since(t0);
  const auto report = json::parse(slim::testing::read_file(e2e.dir / "work/reports/eval.json"));
  const double hit10 = report["metrics"]["hit@10"]["mean"].get<double>();
  return {hit10 >= 30.0 && t < 120.0, fmt::format("Hit@10={:.2f} random≈9.9 time={:.1f}s", hit10, t)};
}

Outcome determinism(EndToEnd& e2e) {
  const char* artifacts[] = {"prepare.json",  "split/train.jsonl",  "embeddings.jsonl",
                             "model.ckpt",    "reports/eval.json", "reports/analyze.json",
                             "reports/item_frequency.tsv"};
  e2e.set_work("rerun");
  e2e.log.clear();
  if (!e2e.step({"prepare"})) return {false, e2e.log};
  const auto cached = cli(e2e.config, {"rationalize", "--mock", "--role", "teacher"});
  const bool zero_calls = cached.code == 0 && cached.out.find(" calls=0 ") != std::string::npos;
  if (!(e2e.step({"embed"}) && e2e.step({"train"}) && e2e.step({"eval"}) && e2e.step({"analyze"}))) {
    return {false, e2e.log};
  }
  std::size_t differing = 0;
  for (const char* f : artifacts) {
    if (slim::testing::read_file(e2e.dir / "work" / f) != slim::testing::read_file(e2e.dir / "rerun" / f)) ++differing;
  }

  // Checkpoint and store round trips.
  nlohmann::json meta;
  const auto model = rec::SequentialRecommender::load(e2e.dir / "work/model.ckpt", &meta);
  model.save(e2e.dir / "again.ckpt", meta);
  const bool ckpt_ok = slim::testing::read_file(e2e.dir / "again.ckpt") ==
                       slim::testing::read_file(e2e.dir / "work/model.ckpt");
  const auto store = embed::load_embedding_store(e2e.dir / "work/embeddings.jsonl");
  store.save(e2e.dir / "again.jsonl");
  const auto back = embed::load_embedding_store(e2e.dir / "again.jsonl");
  bool store_ok = back.size() == store.size();
  for (const auto& [k, v] : store.vectors()) {
    const auto& w = back.at(k);
    for (std::size_t i = 0; store_ok && i < v.size(); ++i) store_ok = bits(v[i]) == bits(w[i]);
  }
  const bool ok = differing == 0 && zero_calls && ckpt_ok && store_ok;
  return {ok, fmt::format("differing_artifacts={} cache_zero_calls={} checkpoint_bit_exact={} store_bit_exact={}",
                          differing, zero_calls, ckpt_ok, store_ok)};
}

// ---------------------------------------------------------------------------

/// In-process run on the planted synthetic set used by the direction checks.
struct DirectionRun {
  double hit10 = 0, hit20 = 0;
};

slim::testing::SyntheticSpec planted_spec(std::uint64_t seed, double cold) {
  slim::testing::SyntheticSpec spec;
  spec.seed = seed;
  spec.walk = 0.5;
  spec.popularity_follows_titles = false;
  spec.cold_fraction = cold;
  return spec;
}

DirectionRun direction_run(const slim::testing::SyntheticSpec& spec, rec::Mode mode, StepSelector step) {
  const auto data = slim::testing::make_synthetic(spec);
  const auto split = leave_one_out_split(build_sequences(InteractionDataset(data.items, data.interactions)));
  const MockLlm llm(data.items);
  std::vector<Rationale> rationales;
  for (const auto& u : split.users) {
    const auto prompt = render_teacher_prompt(BehaviorSequence{u.user, u.test_input}, data.items);
    rationales.push_back(parse_rationale(u.user, llm.respond(prompt.text)));
  }
  embed::HashEmbedder encoder(embed::HashEncoderConfig{});
  const auto store = std::make_shared<const embed::EmbeddingStore>(
      embed::embed_items_and_rationales(data.items, rationales, encoder, step));
  rec::ModelConfig cfg;
  cfg.mode = mode;
  cfg.seed = spec.seed;
  auto result = rec::train(split, data.items, store.get(), cfg);
  rec::SequentialRecommender model(cfg, std::move(result.vocab), std::move(result.params));
  model.attach_store(store);
  eval::EvalConfig ecfg;
  ecfg.seed = spec.seed;
  const auto r = eval::evaluate(model, split, data.items.sorted_ids(), ecfg);
  return {r.hit10, r.hit20};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Outcome fusion_direction() {
  std::vector<double> slim_h20, id_h20;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto spec = planted_spec(seed, 0.2);
    slim_h20.push_back(direction_run(spec, rec::Mode::Slim, StepSelector::All).hit20);
    id_h20.push_back(direction_run(spec, rec::Mode::IdOnly, StepSelector::All).hit20);
  }
  const double s = median(slim_h20), i = median(id_h20);
  return {s > i, fmt::format("median Hit@20 slim={:.2f} id={:.2f}", s, i)};
}

Outcome step_direction() {
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto spec = planted_spec(seed, 0.0);
    const double s3 = direction_run(spec, rec::Mode::Agnostic, StepSelector::Step3).hit10;
    const double s1 = direction_run(spec, rec::Mode::Agnostic, StepSelector::Step1).hit10;
    ok = ok && s3 >= s1;
    detail += fmt::format("{}seed{}: step3={:.1f} step1={:.1f}", detail.empty() ? "" : " ", seed, s3, s1);
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------

Outcome popularity_tooling() {
  slim::testing::SyntheticSpec spec;
  spec.zipf = 1.0;
  const auto data = slim::testing::make_synthetic(spec);
  const auto split = leave_one_out_split(build_sequences(InteractionDataset(data.items, data.interactions)));
  const auto rep = eval::popularity_histogram(eval::PopularityScorer(item_frequency(split)), split,
                                              data.items.sorted_ids(), {}, 10);
  std::size_t head = 0, total = 0;
  const auto n_head = std::max<std::size_t>(1, rep.items.size() / 10);
  for (std::size_t i = 0; i < rep.items.size(); ++i) {
    total += rep.items[i].rec_count;
    if (i < n_head) head += rep.items[i].rec_count;
  }
  const double share = static_cast<double>(head) / static_cast<double>(total);

  const double epc = eval::epc_at_k({{"a", "b"}}, {{"a", 1}, {"b", 2}}, 2, 2);
  const double efd = eval::efd_at_k({{"a", "b"}}, {{"a", 2}, {"b", 1}}, 4, 2);
  const double d2 = 1.0 / std::log2(3.0);
  const double epc_err = std::abs(epc - 0.5 / (1.0 + d2));
  const double efd_err = std::abs(efd - (1.0 + 2.0 * d2) / (1.0 + d2));
  const double epc_popular = eval::epc_at_k({{"p", "q"}, {"q", "p"}}, {{"p", 3}, {"q", 3}}, 3, 10);
  const bool ok = share >= 0.5 && epc_err <= 1e-9 && efd_err <= 1e-9 && epc_popular == 0.0;
  return {ok, fmt::format("head_share={:.3f} epc_err={:.1e} efd_err={:.1e} epc_all_popular={}", share, epc_err,
                          efd_err, epc_popular)};
}

std::vector<Interaction> random_interactions(Rng& rng) {
  std::vector<Interaction> xs;
  const auto users = 10 + uniform_index(rng, 40), items = 5 + uniform_index(rng, 30);
  for (std::size_t u = 0; u < users; ++u) {
    const auto n = 1 + uniform_index(rng, 15);
    for (std::size_t j = 0; j < n; ++j) {
      xs.push_back({"u" + std::to_string(u), "i" + std::to_string(uniform_index(rng, items)),
                    static_cast<std::int64_t>(uniform_index(rng, 50))});
    }
  }
  return xs;
}

ItemTable catalog_for(const std::vector<Interaction>& xs) {
  std::set<std::string> ids;
  for (const auto& x : xs) ids.insert(x.item);
  std::vector<Item> items;
  for (const auto& id : ids) items.push_back({id, "title " + id, {}, {}});
  return ItemTable(items);
}

Outcome split_invariants() {
  Rng rng(9);
  std::size_t degree_violations = 0, not_idempotent = 0, conservation_violations = 0;
  for (int d = 0; d < 100; ++d) {
    const auto xs = random_interactions(rng);
    const InteractionDataset ds(catalog_for(xs), xs);
    const auto f = k_core_filter(ds, 5);
    for (const auto& [u, c] : f.user_counts()) degree_violations += c < 5;
    for (const auto& [i, c] : f.item_counts()) degree_violations += c < 5;
    if (k_core_filter(f, 5).interactions() != f.interactions()) ++not_idempotent;

    // Every interaction lands in exactly one of train / val / test, or in a dropped short sequence.
    const auto seqs = build_sequences(ds);
    const auto split = leave_one_out_split(seqs);
    std::size_t accounted = 0, dropped = 0;
    for (const auto& s : seqs) {
      if (s.items.size() < kMinSplitLength) {
        accounted += s.items.size();
        ++dropped;
      }
    }
    for (const auto& u : split.users) {
      accounted += u.train.size() + 2;
      const bool shape = u.val_input == u.train && u.test_input.size() == u.train.size() + 1 &&
                         std::equal(u.train.begin(), u.train.end(), u.test_input.begin()) &&
                         u.test_input.back() == u.val_target;
      if (!shape) ++conservation_violations;
    }
    if (accounted != xs.size() || dropped != split.dropped_short) ++conservation_violations;
  }
  const bool ok = degree_violations == 0 && not_idempotent == 0 && conservation_violations == 0;
  return {ok, fmt::format("degree_violations={} not_idempotent={} conservation_violations={}", degree_violations,
                          not_idempotent, conservation_violations)};
}

}  // namespace

int main() {
  omp_set_num_threads(1);
  EndToEnd e2e;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks{
      {"metric oracle", metric_oracle},
      {"gradient suite", gradient_suite},
      {"distillation oracle", distillation_oracle},
      {"end-to-end synthetic pipeline", [&] { return end_to_end(e2e); }},
      {"fusion direction", fusion_direction},
      {"step ablation direction", step_direction},
      {"popularity-bias tooling", popularity_tooling},
      {"determinism and round trips", [&] { return determinism(e2e); }},
      {"split invariants", split_invariants},
  };
  int failed = 0;
  for (std::size_t i = 0; i < checks.size(); ++i) {
    Outcome o;
    try {
      o = checks[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << fmt::format("[{}] {} {}: {}", i + 1, o.pass ? "PASS" : "FAIL", checks[i].first, o.detail)
              << std::endl;
  }
  std::cout << fmt::format("{} of {} checks passed", checks.size() - failed, checks.size()) << std::endl;
  return failed == 0 ? 0 : 1;
}
