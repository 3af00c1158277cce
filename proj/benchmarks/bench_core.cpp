#include <benchmark/benchmark.h>

#include "cqa/eval.hpp"
#include "cqa/meta_train.hpp"

namespace {

using namespace cqa;

struct Fixture {
  GraphSplit split;
  FewShotDataset dataset;
  ModelDims dims;
  ParameterStore store;
  TrainData data;

  Fixture()
      : split(generate_synthetic_kg(500, 8, 400, 0.2, 1)),
        dataset(build_fewshot_dataset(split, Setting::MultiHop, 2000, 0.005, 1,
                                      50)),
        dims{32, 32, 500, 8, 3},
        store(ParameterStore::init(dims, 1)),
        data(dataset, dims, Scheme::O) {}
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

void BM_OracleEvaluate3i(benchmark::State& state) {
  Fixture& f = fixture();
  QueryNode q = ground_template(builtin_template("3i"), {1, 2, 3}, {0, 1, 2});
  for (auto _ : state) {
    benchmark::DoNotOptimize(evaluate(q, f.split.test));
  }
}
BENCHMARK(BM_OracleEvaluate3i);

void BM_Forward2p(benchmark::State& state) {
  Fixture& f = fixture();
  QueryNode q = ground_template(builtin_template("2p"), {3}, {0, 1});
  for (auto _ : state) {
    benchmark::DoNotOptimize(forward(q, f.store));
  }
}
BENCHMARK(BM_Forward2p);

void BM_LossGradBatch32(benchmark::State& state) {
  Fixture& f = fixture();
  QueryBatch batch;
  const auto& pool = f.data.flat();
  for (size_t i = 0; i < 32; ++i) batch.push_back(pool[i % pool.size()]);
  Rng rng(7);
  Contrast contrast = sample_contrast(batch, 32, f.dims.num_entities, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        loss_grad(batch, f.store, std::nullopt, contrast, 3.0));
  }
}
BENCHMARK(BM_LossGradBatch32);

void BM_MamoStep(benchmark::State& state) {
  Fixture& f = fixture();
  TrainConfig cfg;
  cfg.algorithm = Algorithm::MAMO;
  cfg.scheme = Scheme::O;
  cfg.seed = 1;
  ParameterStore store = f.store;
  AdamState adam = AdamState::init(f.dims);
  int64_t step = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(mamo_step(f.data, store, adam, cfg, step++));
  }
}
BENCHMARK(BM_MamoStep);

void BM_FilteredRanks(benchmark::State& state) {
  Fixture& f = fixture();
  const GroundedQuery& q = f.dataset.eval_queries.at("3p")[0];
  for (auto _ : state) {
    benchmark::DoNotOptimize(filtered_ranks(q, f.store, std::nullopt));
  }
}
BENCHMARK(BM_FilteredRanks);

}  // namespace

BENCHMARK_MAIN();
