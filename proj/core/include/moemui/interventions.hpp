#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "moemui/attribution.hpp"
#include "moemui/metrics.hpp"
#include "moemui/model.hpp"
#include "moemui/tasks.hpp"

namespace moemui {

/// Union of the neuron sets of every trace. Throws ValidationError when the union is empty.
MaskSpec mask_from_traces(const TaskTraceSet& traces);

/// `count` neurons drawn uniformly without replacement, deterministic per seed.
MaskSpec random_mask(std::int64_t count, const ModelSpec& spec, std::uint64_t seed);

/// Greedy exact-match accuracy under `mask`.
double evaluate_masked(const ModelParams& params, std::span<const Example> dataset, const MaskSpec& mask);

struct MaskSweepConfig {
  std::vector<double> permille_grid{0.5, 1.0, 2.0};  // strictly ascending
  int random_baselines = 10;                       // random masks per grid point
  std::vector<std::string> eval_tasks;             // empty: every dataset
  std::uint64_t seed = 0;

  void validate() const;
};

struct BaselineStats {
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
};

struct SweepRow {
  double permille = 0.0;
  std::size_t mask_size = 0;
  std::vector<double> masked_accuracy;  // per eval task, same order as SweepTable::eval_tasks
  std::vector<BaselineStats> random;    // per eval task
};

struct SweepTable {
  std::string source_task;
  std::vector<std::string> eval_tasks;    // alphabetical
  std::vector<double> unmasked_accuracy;  // per eval task
  std::vector<SweepRow> rows;             // ascending permille
};

/// Masks the key neurons of `source_task` at each grid threshold and measures
/// every evaluation task, next to random masks of the same size drawn afresh
/// at each grid point. Source responses are the unmasked greedy decodes.
SweepTable mask_sweep(const ModelParams& params, const std::map<std::string, std::vector<Example>>& datasets,
                      const std::string& source_task, ScoreMethod method, const MaskSweepConfig& config);

/// Delimiter-separated table. Columns: permille, eval tasks (alphabetical),
/// random_mean:<task> random_min:<task> random_max:<task> per task, n_masked.
std::string format_sweep_table(const SweepTable& table, char delimiter = ',');

}  // namespace moemui
