#include <benchmark/benchmark.h>

#include <string>
#include <vector>

#include "moemui/attribution.hpp"
#include "moemui/metrics.hpp"
#include "moemui/model.hpp"
#include "moemui/rng.hpp"
#include "moemui/stats.hpp"
#include "moemui/tasks.hpp"
#include "moemui/trainer.hpp"

using namespace moemui;

namespace {

ModelSpec bench_spec(int neurons) {
  ModelSpec s;
  s.n_layers = 4;
  s.n_shared = 2;
  s.n_routed = 16;
  s.top_k = 4;
  s.n_neurons = neurons;
  s.d_model = 64;
  s.vocab_size = 128;
  s.context_window = 8;
  s.seed = 1;
  return s;
}

std::vector<int> prompt_of(int len, int vocab) {
  std::vector<int> p;
  for (int i = 0; i < len; ++i) p.push_back(1 + (i * 37) % (vocab - 1));
  return p;
}

void BM_Forward(benchmark::State& state) {
  const auto params = init_model(bench_spec(static_cast<int>(state.range(0))));
  const auto tokens = prompt_of(16, params.spec.vocab_size);
  for (auto _ : state) benchmark::DoNotOptimize(forward(params, tokens));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(tokens.size()));
}
BENCHMARK(BM_Forward)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

void BM_TraceSample(benchmark::State& state) {
  const auto params = init_model(bench_spec(static_cast<int>(state.range(0))));
  const auto prompt = prompt_of(12, params.spec.vocab_size);
  const std::vector<int> response{5, 9, 17, 33};
  for (auto _ : state) {
    benchmark::DoNotOptimize(trace_sample(params, prompt, response, ScoreMethod::GluProject, {1.0}));
  }
}
BENCHMARK(BM_TraceSample)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

void BM_LossAndGrads(benchmark::State& state) {
  const auto params = init_model(bench_spec(64));
  const auto batch = generate_task({TaskKind::DomainGrammar, "bench", 8, 6, 3}, params.spec.vocab_size);
  for (auto _ : state) benchmark::DoNotOptimize(loss_and_grads(params, batch, 0.01));
}
BENCHMARK(BM_LossAndGrads)->Unit(benchmark::kMillisecond);

void BM_Fisher(benchmark::State& state) {
  // large margins: the tail sum walks every admissible table
  const auto n = static_cast<std::uint64_t>(state.range(0));
  const ContingencyTable t{n / 10, n / 5, n / 4, n - n / 10 - n / 5 - n / 4};
  for (auto _ : state) benchmark::DoNotOptimize(fisher_exact_two_sided(t));
}
BENCHMARK(BM_Fisher)->Arg(100)->Arg(10000)->Arg(1000000);

void BM_MuiUnion(benchmark::State& state) {
  const auto spec = bench_spec(1024);
  Rng rng(4);
  std::vector<SampleTrace> traces(static_cast<std::size_t>(state.range(0)));
  for (std::size_t s = 0; s < traces.size(); ++s) {
    traces[s].sample_id = "s" + std::to_string(s);
    for (int k = 0; k < 200; ++k) {
      traces[s].neurons.push_back(
          neuron_at(spec, static_cast<std::int64_t>(uniform_below(rng, static_cast<std::uint64_t>(spec.total_neurons())))));
    }
    std::sort(traces[s].neurons.begin(), traces[s].neurons.end());
    traces[s].neurons.erase(std::unique(traces[s].neurons.begin(), traces[s].neurons.end()), traces[s].neurons.end());
  }
  const auto set = TaskTraceSet::from_traces("bench", std::move(traces));
  for (auto _ : state) benchmark::DoNotOptimize(mui(set, spec));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_MuiUnion)->Arg(100)->Arg(10000);

}  // namespace

BENCHMARK_MAIN();
