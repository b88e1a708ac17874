#include "moemui/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "moemui/errors.hpp"
#include "moemui/format.hpp"
#include "moemui/parallel.hpp"
#include "moemui/rng.hpp"
#include "moemui/trainer.hpp"

namespace moemui {

MaskSpec mask_from_traces(const TaskTraceSet& traces) {
  std::vector<NeuronRef> all;
  for (const auto& t : traces.traces) all.insert(all.end(), t.neurons.begin(), t.neurons.end());
  MaskSpec mask(std::move(all));
  if (mask.empty()) throw ValidationError("mask_from_traces: task '" + traces.task + "' has an empty neuron union");
  return mask;
}

MaskSpec random_mask(std::int64_t count, const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto total = spec.total_neurons();
  if (count < 0 || count > total) {
    throw ValidationError("random_mask: count " + std::to_string(count) + " outside [0, " + std::to_string(total) + "]");
  }
  // Floyd's sampling without replacement.
  Rng rng(seed);
  std::set<std::int64_t> chosen;
  for (std::int64_t j = total - count; j < total; ++j) {
    const auto t = static_cast<std::int64_t>(uniform_below(rng, static_cast<std::uint64_t>(j + 1)));
    chosen.insert(chosen.contains(t) ? j : t);
  }
  std::vector<NeuronRef> refs;
  refs.reserve(chosen.size());
  for (auto idx : chosen) refs.push_back(neuron_at(spec, idx));
  return MaskSpec(std::move(refs));
}

double evaluate_masked(const ModelParams& params, std::span<const Example> dataset, const MaskSpec& mask) {
  for (const auto& r : mask.neurons) {
    if (!in_bounds(params.spec, r)) throw ValidationError("evaluate_masked: mask entry out of bounds");
  }
  return accuracy(params, dataset, mask);
}

void MaskSweepConfig::validate() const {
  if (permille_grid.empty()) throw ValidationError("mask sweep: empty permille grid");
  for (std::size_t i = 0; i < permille_grid.size(); ++i) {
    ThresholdPolicy{permille_grid[i]}.validate();
    if (i > 0 && !(permille_grid[i] > permille_grid[i - 1])) {
      throw ValidationError("mask sweep: permille grid must be strictly ascending");
    }
  }
  if (random_baselines < 1) throw ValidationError("mask sweep: random baselines must be >= 1");
}

SweepTable mask_sweep(const ModelParams& params, const std::map<std::string, std::vector<Example>>& datasets,
                      const std::string& source_task, ScoreMethod method, const MaskSweepConfig& config) {
  config.validate();
  const auto source_it = datasets.find(source_task);
  if (source_it == datasets.end() || source_it->second.empty()) {
    throw ValidationError("mask sweep: no samples for source task '" + source_task + "'");
  }

  SweepTable table;
  table.source_task = source_task;
  if (config.eval_tasks.empty()) {
    for (const auto& [name, data] : datasets) table.eval_tasks.push_back(name);
  } else {
    table.eval_tasks = config.eval_tasks;
    std::sort(table.eval_tasks.begin(), table.eval_tasks.end());
    table.eval_tasks.erase(std::unique(table.eval_tasks.begin(), table.eval_tasks.end()), table.eval_tasks.end());
  }
  std::vector<const std::vector<Example>*> eval_data;
  for (const auto& name : table.eval_tasks) {
    const auto it = datasets.find(name);
    if (it == datasets.end() || it->second.empty()) throw ValidationError("mask sweep: no samples for eval task '" + name + "'");
    eval_data.push_back(&it->second);
  }
  const std::size_t n_eval = eval_data.size();
  for (const auto* d : eval_data) table.unmasked_accuracy.push_back(accuracy(params, *d));

  // Score every source sample once; each grid point only re-selects.
  const auto& source = source_it->second;
  std::vector<ScoredSample> scored(source.size());
  parallel_for(source.size(), [&](std::size_t i) {
    const auto response = greedy_decode(params, source[i].prompt, static_cast<int>(source[i].target.size()));
    scored[i] = score_sample(params, source[i].prompt, response, method);
  });

  const std::size_t n_grid = config.permille_grid.size();
  const auto n_base = static_cast<std::size_t>(config.random_baselines);
  table.rows.resize(n_grid);
  for (std::size_t g = 0; g < n_grid; ++g) {
    const ThresholdPolicy policy{config.permille_grid[g]};
    std::vector<NeuronRef> all;
    for (const auto& s : scored) {
      auto sel = select_neurons(s, policy);
      all.insert(all.end(), sel.begin(), sel.end());
    }
    table.rows[g].permille = policy.permille;
    table.rows[g].mask_size = MaskSpec(std::move(all)).size();
  }

  // Jobs: for each grid point, one key-neuron mask plus n_base random masks.
  std::vector<std::vector<double>> results(n_grid * (n_base + 1), std::vector<double>(n_eval));
  parallel_for(results.size(), [&](std::size_t job) {
    const std::size_t g = job / (n_base + 1);
    const std::size_t b = job % (n_base + 1);
    MaskSpec mask;
    if (b == 0) {
      const ThresholdPolicy policy{config.permille_grid[g]};
      std::vector<NeuronRef> all;
      for (const auto& s : scored) {
        auto sel = select_neurons(s, policy);
        all.insert(all.end(), sel.begin(), sel.end());
      }
      mask = MaskSpec(std::move(all));
    } else {
      mask = random_mask(static_cast<std::int64_t>(table.rows[g].mask_size), params.spec,
                         mix_seed(config.seed, g * n_base + (b - 1)));
    }
    for (std::size_t e = 0; e < n_eval; ++e) results[job][e] = accuracy(params, *eval_data[e], mask);
  });

  for (std::size_t g = 0; g < n_grid; ++g) {
    auto& row = table.rows[g];
    row.masked_accuracy = results[g * (n_base + 1)];
    row.random.resize(n_eval);
    for (std::size_t e = 0; e < n_eval; ++e) {
      BaselineStats s{0.0, 1.0, 0.0};
      for (std::size_t b = 1; b <= n_base; ++b) {
        const double acc = results[g * (n_base + 1) + b][e];
        s.mean += acc;
        s.min = std::min(s.min, acc);
        s.max = std::max(s.max, acc);
      }
      s.mean /= static_cast<double>(n_base);
      row.random[e] = s;
    }
  }
  return table;
}

std::string format_sweep_table(const SweepTable& table, char delimiter) {
  std::string out = "permille";
  for (const auto& t : table.eval_tasks) out += delimiter + t;
  for (const auto& t : table.eval_tasks) {
    out += delimiter + ("random_mean:" + t);
    out += delimiter + ("random_min:" + t);
    out += delimiter + ("random_max:" + t);
  }
  out += delimiter;
  out += "n_masked\n";
  for (const auto& row : table.rows) {
    out += format_number(row.permille);
    for (double acc : row.masked_accuracy) out += delimiter + format_number(acc);
    for (const auto& s : row.random) {
      out += delimiter + format_number(s.mean);
      out += delimiter + format_number(s.min);
      out += delimiter + format_number(s.max);
    }
    out += delimiter + std::to_string(row.mask_size);
    out += '\n';
  }
  return out;
}

}  // namespace moemui
