// Acceptance suite: one line per criterion.
//   PASS / FAIL           hard gates, any FAIL makes the process exit 1
//   SOFT-PASS / SOFT-FAIL qualitative gates on trained toy models, reported only
//
// Usage: moemui_acceptance [--only NAME]...

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "moemui/attribution.hpp"
#include "moemui/format.hpp"
#include "moemui/interventions.hpp"
#include "moemui/metrics.hpp"
#include "moemui/parallel.hpp"
#include "moemui/stats.hpp"
#include "moemui/tasks.hpp"
#include "moemui/trace_io.hpp"
#include "moemui/trainer.hpp"

using namespace moemui;

namespace {

struct Outcome {
  bool ok = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  bool soft = false;
  double budget_s = 0.0;
  std::function<Outcome()> run;
};

std::string fmt(double v) { return format_number(v); }

// ---------------------------------------------------------------- fisher

Outcome fisher_oracle() {
  double worst = 0.0;
  std::size_t tables = 0;
  std::string worst_table;
  for (std::uint64_t n = 1; n <= 40; ++n) {
    for (std::uint64_t a = 0; a <= n; ++a) {
      for (std::uint64_t b = 0; a + b <= n; ++b) {
        for (std::uint64_t c = 0; a + b + c <= n; ++c) {
          const std::uint64_t d = n - a - b - c;
          const double got = fisher_exact_two_sided({a, b, c, d}).p;
          const double want = static_cast<double>(testing::rational_fisher(a, b, c, d));
          const double err = std::abs(got - want);
          if (err > worst) {
            worst = err;
            worst_table = std::to_string(a) + "," + std::to_string(b) + "," + std::to_string(c) + "," + std::to_string(d);
          }
          ++tables;
        }
      }
    }
  }
  const double p = fisher_exact_two_sided({3, 1, 1, 3}).p;
  const auto odds = odds_ratio({3, 1, 1, 3});
  const bool ok = worst <= 1e-10 && std::abs(p - 0.485714) <= 1e-6 && odds && *odds == 9.0;
  return {ok, std::to_string(tables) + " tables, max |p - oracle| " + fmt(worst) +
                  (worst_table.empty() ? "" : " at [" + worst_table + "]") + "; [[3,1],[1,3]] p " + fmt(p) +
                  ", odds ratio " + (odds ? fmt(*odds) : "undefined")};
}

// ---------------------------------------------------------------- gradients

Outcome gradient_check() {
  double worst = 0.0;
  std::string where;
  for (int top_k : {1, 2}) {
    for (double alpha : {0.0, 0.3}) {
      const auto p = init_model(testing::gradient_check_spec(top_k));
      const std::vector<Example> batch{{{1, 2, 3}, {4}}, {{2, 2}, {1, 3}}, {{4}, {0}}, {{3, 1, 4}, {2}}};
      for (const auto& g : testing::gradient_check(p, batch, alpha)) {
        if (g.relative_error >= worst) {
          worst = g.relative_error;
          where = g.group + " (top_k " + std::to_string(top_k) + ", aux " + fmt(alpha) + ")";
        }
      }
    }
  }
  return {worst <= 1e-4, "max group relative error " + fmt(worst) + " in " + where};
}

// ---------------------------------------------------------------- nesting

Outcome threshold_nesting() {
  ModelSpec spec;
  spec.n_layers = 2;
  spec.n_shared = 1;
  spec.n_routed = 6;
  spec.top_k = 2;
  spec.n_neurons = 1024;
  spec.d_model = 16;
  spec.vocab_size = 24;
  spec.context_window = 3;
  spec.seed = 21;
  const auto params = init_model(spec);
  const auto samples = generate_task({TaskKind::DomainGrammar, "nest", 20, 3, 5}, spec.vocab_size);
  const std::vector<double> grid{0.5, 1.0, 2.0};

  std::vector<std::vector<SampleTrace>> by_level(grid.size(), std::vector<SampleTrace>(samples.size()));
  parallel_for(samples.size(), [&](std::size_t i) {
    for (std::size_t g = 0; g < grid.size(); ++g) {
      by_level[g][i] = trace_greedy(params, samples[i].prompt, 3, ScoreMethod::GateProject, {grid[g]},
                                    {"s" + std::to_string(i), "nest", "fp"});
    }
  });
  std::size_t violations = 0;
  std::vector<double> muis;
  std::vector<std::size_t> sizes;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const auto set = TaskTraceSet::from_traces("nest", by_level[g]);
    muis.push_back(mui(set, spec));
    sizes.push_back(neuron_union(set, spec).size());
    if (g == 0) continue;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& lo = by_level[g - 1][i].neurons;
      const auto& hi = by_level[g][i].neurons;
      if (!std::includes(hi.begin(), hi.end(), lo.begin(), lo.end())) ++violations;
    }
  }
  const bool monotone = muis[0] <= muis[1] && muis[1] <= muis[2];
  std::string detail = "inclusion violations " + std::to_string(violations) + "; union sizes";
  for (auto s : sizes) detail += " " + std::to_string(s);
  detail += "; mui";
  for (double m : muis) detail += " " + fmt(m);
  // a grid that keeps the same count everywhere would make the check vacuous
  const bool informative = sizes.front() < sizes.back();
  if (!informative) detail += " (grid not informative)";
  return {violations == 0 && monotone && informative, detail};
}

// ---------------------------------------------------------------- metric identities

Outcome metric_identities() {
  std::size_t failures = 0;
  std::string first;
  auto check = [&](bool cond, const std::string& what, std::uint64_t seed) {
    if (!cond && failures++ == 0) first = what + " (seed " + std::to_string(seed) + ")";
  };
  const std::vector<double> etas{0.0, 0.1, 0.25, 0.5, 0.6, 0.75, 0.9, 1.0};
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(mix_seed(777, seed));
    ModelSpec spec;
    spec.n_layers = 1 + static_cast<int>(uniform_below(rng, 3));
    spec.n_shared = static_cast<int>(uniform_below(rng, 3));
    spec.n_routed = 2 + static_cast<int>(uniform_below(rng, 6));
    spec.top_k = 1;
    spec.n_neurons = 4 << uniform_below(rng, 4);  // powers of two keep count / N * N exact
    const int n = 1 + static_cast<int>(uniform_below(rng, 30));
    const auto set = testing::random_trace_set(spec, seed, n, 3 * spec.n_neurons);

    const auto uni = neuron_union(set, spec);
    std::size_t largest = 0, total = 0;
    for (const auto& t : set.traces) {
      largest = std::max(largest, t.neurons.size());
      total += t.neurons.size();
    }
    check(largest <= uni.size() && uni.size() <= total, "union bounds", seed);
    const double m = mui(set, spec);
    check(m == static_cast<double>(uni.size()) / static_cast<double>(spec.total_neurons()), "mui definition", seed);
    check(0.0 <= m && m <= 1.0, "mui range", seed);

    for (std::size_t e = 1; e < etas.size(); ++e) {
      const auto loose = key_experts(set, etas[e - 1]);
      const auto tight = key_experts(set, etas[e]);
      check(std::includes(loose.begin(), loose.end(), tight.begin(), tight.end()), "eta monotonicity", seed);
    }

    double decomposed = 0.0;
    std::set<ExpertRef> activated;
    for (int l = 0; l < spec.n_layers; ++l) {
      for (int i = 0; i < spec.experts_per_layer(); ++i) {
        decomposed += expert_mui(set, {l, i}, spec) * spec.n_neurons;
      }
    }
    for (const auto& r : uni) activated.insert(expert_of(r));
    check(decomposed == static_cast<double>(uni.size()), "per-expert decomposition", seed);
    check(key_experts(set, 0.0) == activated, "eta 0 key experts = activated experts", seed);
    check(key_expert_proportion(set, 0.0, spec) ==
              static_cast<double>(activated.size()) / static_cast<double>(spec.total_experts()),
          "eta 0 proportion", seed);
  }
  return {failures == 0, "100 seeds, " + std::to_string(failures) + " identity failures" +
                             (first.empty() ? "" : "; first: " + first)};
}

// ---------------------------------------------------------------- planted circuit

Outcome planted_circuit() {
  const auto pm = testing::make_planted_model();
  const std::set<NeuronRef> circuit(pm.circuit.begin(), pm.circuit.end());
  bool ok = true;
  std::string detail;
  for (auto method : {ScoreMethod::GateProject, ScoreMethod::GluProject}) {
    std::vector<SampleTrace> traces;
    std::size_t worst_recovered = circuit.size();
    for (std::size_t i = 0; i < pm.probes.size(); ++i) {
      auto t = trace_greedy(pm.params, pm.probes[i].prompt, 1, method, {1.0}, {"probe" + std::to_string(i), "probe", "fp"});
      const auto hits = static_cast<std::size_t>(
          std::count_if(t.neurons.begin(), t.neurons.end(), [&](const NeuronRef& r) { return circuit.contains(r); }));
      worst_recovered = std::min(worst_recovered, hits);
      traces.push_back(std::move(t));
    }
    const auto mask = mask_from_traces(TaskTraceSet::from_traces("probe", traces));
    const double masked = evaluate_masked(pm.params, pm.probes, mask);
    double random_min = 1.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
      const auto rm = random_mask(static_cast<std::int64_t>(mask.size()), pm.params.spec, mix_seed(99, s));
      random_min = std::min(random_min, evaluate_masked(pm.params, pm.probes, rm));
    }
    ok = ok && worst_recovered >= 3 && masked < random_min;
    if (!detail.empty()) detail += "; ";
    detail += std::string(to_string(method)) + ": recovered >= " + std::to_string(worst_recovered) + "/4 per probe, mask " +
              std::to_string(mask.size()) + " acc " + fmt(masked) + " vs random min " + fmt(random_min);
  }
  return {ok, detail};
}

// ---------------------------------------------------------------- trace round trip

Outcome trace_round_trip() {
  Rng rng(4242);
  TraceFileHeader header;
  header.model_fingerprint = "0123456789abcdef0123456789abcdef0123456789abcdef0123456789abcdef";
  header.spec = {3, 2, 6, 16, 2, 40};
  header.method = ScoreMethod::GluProject;
  header.permille = 1.5;
  header.created = "2026-01-01T00:00:00Z";
  const auto spec = header.spec.to_model_spec();
  std::vector<TraceRecord> records;
  for (int i = 0; i < 1000; ++i) {
    TraceRecord r;
    r.sample_id = "sample-" + std::to_string(i) + (i % 7 == 0 ? "/\"quoted\" \xc3\xa9" : "");
    r.task = "task" + std::to_string(uniform_below(rng, 5));
    const auto n = uniform_below(rng, 40);
    for (std::uint64_t k = 0; k < n; ++k) {
      r.neurons.push_back(neuron_at(spec, static_cast<std::int64_t>(uniform_below(rng, static_cast<std::uint64_t>(spec.total_neurons())))));
    }
    std::sort(r.neurons.begin(), r.neurons.end());
    r.neurons.erase(std::unique(r.neurons.begin(), r.neurons.end()), r.neurons.end());
    if (uniform01(rng) < 0.5) {
      std::vector<std::vector<RouteEntry>> log(1 + uniform_below(rng, 4));
      for (auto& token : log) {
        for (int l = 0; l < spec.n_layers; ++l) {
          // arbitrary doubles must survive the text round trip bit for bit
          token.push_back({{l, static_cast<int>(uniform_below(rng, 8))}, uniform01(rng)});
        }
      }
      r.route_log = std::move(log);
    }
    records.push_back(std::move(r));
  }
  const auto text = serialize_traces(header, records);
  const auto parsed = parse_traces(text);
  const bool equal = parsed.header == header && parsed.records == records;
  const bool stable = serialize_traces(parsed.header, parsed.records) == text;
  return {equal && stable, "1000 records, " + std::to_string(text.size()) + " bytes; equal " +
                               (equal ? "yes" : "no") + ", byte-stable " + (stable ? "yes" : "no")};
}

// ---------------------------------------------------------------- trained toy models

const std::vector<std::string> kDomains{"alpha", "beta", "gamma", "delta"};

ModelSpec toy_spec(std::uint64_t seed) {
  ModelSpec spec;
  spec.n_layers = 2;
  spec.n_shared = 1;
  spec.n_routed = 8;
  spec.top_k = 2;
  spec.n_neurons = 32;
  spec.d_model = 16;
  spec.vocab_size = 33;
  spec.context_window = 3;
  spec.seed = seed;
  return spec;
}

struct ToyRun {
  std::vector<PhasePoint> series;
  std::vector<PhaseLabel> labels;
  ModelParams final_params;
  double final_accuracy = 0.0;
  std::string stop;  // divergence message, empty when training ran to the end
};

std::map<std::string, std::vector<Example>> toy_data(std::uint64_t seed, int per_domain) {
  std::map<std::string, std::vector<Example>> out;
  for (std::size_t d = 0; d < kDomains.size(); ++d) {
    out[kDomains[d]] = generate_task({TaskKind::DomainGrammar, kDomains[d], per_domain, 3, mix_seed(seed, d)},
                                     toy_spec(seed).vocab_size);
  }
  return out;
}

std::vector<SampleTrace> trace_all(const ModelParams& params, const std::vector<Example>& data, const std::string& task) {
  std::vector<SampleTrace> traces(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    traces[i] = trace_greedy(params, data[i].prompt, 1, ScoreMethod::GateProject, {1.0},
                             {task + "-" + std::to_string(i), task, "fp"});
  }
  return traces;
}

ToyRun train_toy(std::uint64_t seed) {
  const auto spec = toy_spec(seed);
  const auto per_domain = toy_data(seed, 48);
  std::vector<Example> train_set, eval_set;
  for (const auto& [name, data] : per_domain) train_set.insert(train_set.end(), data.begin(), data.end());
  for (const auto& [name, data] : toy_data(seed + 1000, 16)) eval_set.insert(eval_set.end(), data.begin(), data.end());

  TrainConfig cfg;
  cfg.learning_rate = 0.02;
  cfg.steps = 16000;
  cfg.batch_size = 8;
  cfg.aux_alpha = 0.01;
  cfg.checkpoint_every = 800;
  cfg.seed = seed;
  const auto result = train(init_model(spec), train_set, cfg);

  ToyRun run;
  for (const auto& snap : result.checkpoints) {
    const auto traces = trace_all(snap.params, eval_set, "eval");
    run.series.push_back({accuracy(snap.params, eval_set), mui(TaskTraceSet::from_traces("eval", traces), spec)});
  }
  run.labels = phase_classify(run.series, 0.001);
  run.final_params = result.checkpoints.back().params;
  run.final_accuracy = run.series.back().performance;
  if (result.diverged) run.stop = result.message;
  return run;
}

std::vector<ToyRun>& toy_runs() {
  static std::vector<ToyRun> runs = [] {
    std::vector<ToyRun> r(5);
    parallel_for(r.size(), [&](std::size_t i) { r[i] = train_toy(100 + i); });
    return r;
  }();
  return runs;
}

Outcome trained_dynamics() {
  const auto& runs = toy_runs();
  int hits = 0;
  std::string detail;
  for (std::size_t s = 0; s < runs.size(); ++s) {
    const auto& labels = runs[s].labels;
    const std::size_t half = (labels.size() + 1) / 2;
    const bool hit = std::find(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(half),
                               PhaseLabel::Accumulating) != labels.begin() + static_cast<std::ptrdiff_t>(half);
    hits += hit ? 1 : 0;
    int acc = 0, evo = 0;
    for (auto l : labels) {
      acc += l == PhaseLabel::Accumulating;
      evo += l == PhaseLabel::Evolving;
    }
    detail += (s ? "; " : "") + std::string("seed ") + std::to_string(100 + s) + ": " +
              std::to_string(runs[s].series.size()) + " ckpts, acc " + fmt(runs[s].final_accuracy) + ", " +
              std::to_string(acc) + " Accumulating / " + std::to_string(evo) + " Evolving" + (hit ? "" : " (none early)") +
              (runs[s].stop.empty() ? "" : " [stopped: " + runs[s].stop + "]");
  }
  bool enough = true;
  for (const auto& r : runs) enough = enough && r.series.size() >= 10;
  return {enough && hits >= 4, std::to_string(hits) + "/5 seeds with early Accumulating; " + detail};
}

Outcome diversity_direction() {
  const auto& runs = toy_runs();
  double one = 0.0, three = 0.0;
  for (std::size_t s = 0; s < runs.size(); ++s) {
    const auto spec = toy_spec(100 + s);
    std::map<std::string, TaskTraceSet> grouped;
    for (const auto& [name, data] : toy_data(100 + s + 2000, 30)) {
      grouped[name] = TaskTraceSet::from_traces(name, trace_all(runs[s].final_params, data, name));
    }
    const auto rows = diversity_report(grouped, {{1, 3}, 30, 8, 100 + s}, spec);
    one += rows[0].mui / static_cast<double>(runs.size());
    three += rows[1].mui / static_cast<double>(runs.size());
  }
  return {three > one, "mean mui over 5 seeds: 1 domain " + fmt(one) + ", 3 domains " + fmt(three)};
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> only;
  for (int i = 1; i + 1 < argc; i += 2) {
    if (std::string(argv[i]) == "--only") only.emplace_back(argv[i + 1]);
  }
  const std::vector<Criterion> criteria{
      {"fisher-oracle", false, 60.0, fisher_oracle},
      {"gradient-check", false, 10.0, gradient_check},
      {"threshold-nesting", false, 0.0, threshold_nesting},
      {"metric-identities", false, 0.0, metric_identities},
      {"planted-circuit", false, 30.0, planted_circuit},
      {"trained-dynamics", true, 900.0, trained_dynamics},
      {"diversity-direction", true, 0.0, diversity_direction},
      {"trace-round-trip", false, 0.0, trace_round_trip},
  };
  int hard_failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::string timing = std::to_string(secs).substr(0, std::to_string(secs).find('.') + 3) + " s";
    if (c.budget_s > 0.0) {
      timing += " of " + std::to_string(static_cast<int>(c.budget_s)) + " s";
      if (secs > c.budget_s) {
        out.ok = false;
        out.detail += "; over time budget";
      }
    }
    const char* status = c.soft ? (out.ok ? "SOFT-PASS" : "SOFT-FAIL") : (out.ok ? "PASS" : "FAIL");
    if (!c.soft && !out.ok) ++hard_failures;
    std::printf("%-9s %-20s %s [%s]\n", status, c.name.c_str(), out.detail.c_str(), timing.c_str());
    std::fflush(stdout);
  }
  return hard_failures == 0 ? 0 : 1;
}
