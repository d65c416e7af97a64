// Serial reference vs OpenMP kernels on synthetic data.
#include <benchmark/benchmark.h>

#include <memory>

#include "slim/embed.hpp"
#include "slim/eval.hpp"
#include "slim/rec_core.hpp"
#include "synthetic.hpp"

namespace {

struct Fixture {
  slim::testing::SyntheticData data;
  slim::SplitDataset split;
  std::unique_ptr<slim::rec::SequentialRecommender> model;
  std::vector<std::string> texts;

  Fixture() {
    slim::testing::SyntheticSpec spec;
    spec.users = 1000;
    data = slim::testing::make_synthetic(spec);
    split = slim::leave_one_out_split(slim::build_sequences(slim::InteractionDataset(data.items, data.interactions)));
    slim::rec::ModelConfig cfg;
    cfg.mode = slim::rec::Mode::IdOnly;
    cfg.backbone = slim::rec::Backbone::Gru;
    cfg.epochs = 1;
    auto trained = slim::rec::train(split, data.items, nullptr, cfg);
    model = std::make_unique<slim::rec::SequentialRecommender>(cfg, trained.vocab, trained.params);
    for (const auto& item : data.items.items()) texts.push_back(slim::embed::item_text(item));
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

void BM_EvaluateSerial(benchmark::State& state) {
  auto& f = fixture();
  for (auto _ : state) {
    auto r = slim::eval::evaluate_serial(*f.model, f.split, f.data.items.sorted_ids(), {});
    benchmark::DoNotOptimize(r.hit10);
  }
}

void BM_EvaluateParallel(benchmark::State& state) {
  auto& f = fixture();
  for (auto _ : state) {
    auto r = slim::eval::evaluate(*f.model, f.split, f.data.items.sorted_ids(), {});
    benchmark::DoNotOptimize(r.hit10);
  }
}

void BM_HashEncodeSerial(benchmark::State& state) {
  auto& f = fixture();
  for (auto _ : state) benchmark::DoNotOptimize(slim::embed::encode_texts_hash_serial({}, f.texts));
}

void BM_HashEncodeParallel(benchmark::State& state) {
  auto& f = fixture();
  for (auto _ : state) benchmark::DoNotOptimize(slim::embed::encode_texts_hash({}, f.texts));
}

}  // namespace

BENCHMARK(BM_EvaluateSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_EvaluateParallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_HashEncodeSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_HashEncodeParallel)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
