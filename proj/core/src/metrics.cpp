#include "moemui/metrics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "moemui/errors.hpp"
#include "moemui/rng.hpp"

namespace moemui {

TaskTraceSet TaskTraceSet::from_traces(std::string task, std::vector<SampleTrace> traces) {
  TaskTraceSet set;
  set.task = std::move(task);
  if (!traces.empty()) {
    set.model_fingerprint = traces.front().model_fingerprint;
    set.method = traces.front().method;
    set.permille = traces.front().permille;
  }
  set.traces = std::move(traces);
  set.validate();
  return set;
}

void TaskTraceSet::validate() const {
  std::unordered_set<std::string> ids;
  for (const auto& t : traces) {
    if (t.model_fingerprint != model_fingerprint) {
      throw ValidationError("task '" + task + "': sample '" + t.sample_id + "' has model fingerprint " +
                            t.model_fingerprint + ", expected " + model_fingerprint);
    }
    if (t.method != method) throw ValidationError("task '" + task + "': mixed score methods");
    if (t.permille != permille) {
      throw ValidationError("task '" + task + "': mixed permille values " + std::to_string(t.permille) + " and " +
                            std::to_string(permille));
    }
    if (!ids.insert(t.sample_id).second) {
      throw ValidationError("task '" + task + "': duplicate sample id '" + t.sample_id + "'");
    }
  }
}

NeuronSet::NeuronSet(const ModelSpec& spec)
    : spec_(spec), words_(static_cast<std::size_t>((spec.total_neurons() + 63) / 64), 0) {}

void NeuronSet::insert(const NeuronRef& r) {
  if (!in_bounds(spec_, r)) {
    throw ValidationError("neuron [" + std::to_string(r.layer) + ", " + std::to_string(r.expert) + ", " +
                          std::to_string(r.neuron) + "] outside model bounds");
  }
  const auto idx = static_cast<std::uint64_t>(flat_index(spec_, r));
  words_[idx / 64] |= std::uint64_t{1} << (idx % 64);
}

void NeuronSet::insert_all(std::span<const NeuronRef> refs) {
  for (const auto& r : refs) insert(r);
}

bool NeuronSet::contains(const NeuronRef& r) const noexcept {
  if (!in_bounds(spec_, r)) return false;
  const auto idx = static_cast<std::uint64_t>(flat_index(spec_, r));
  return (words_[idx / 64] >> (idx % 64)) & 1U;
}

std::int64_t NeuronSet::count() const noexcept {
  std::int64_t n = 0;
  for (auto w : words_) n += std::popcount(w);
  return n;
}

std::vector<NeuronRef> NeuronSet::to_vector() const {
  std::vector<NeuronRef> out;
  for (std::size_t w = 0; w < words_.size(); ++w) {
    for (auto bits = words_[w]; bits != 0; bits &= bits - 1) {
      out.push_back(neuron_at(spec_, static_cast<std::int64_t>(w * 64 + std::countr_zero(bits))));
    }
  }
  return out;
}

namespace {

NeuronSet union_of(const TaskTraceSet& traces, const ModelSpec& spec) {
  NeuronSet set(spec);
  for (const auto& t : traces.traces) set.insert_all(t.neurons);
  return set;
}

void check_eta(double eta_expert) {
  if (!(eta_expert >= 0.0 && eta_expert <= 1.0)) {
    throw ValidationError("eta_expert must lie in [0, 1], got " + std::to_string(eta_expert));
  }
}

}  // namespace

std::vector<NeuronRef> neuron_union(const TaskTraceSet& traces, const ModelSpec& spec) {
  return union_of(traces, spec).to_vector();
}

double mui(const TaskTraceSet& traces, const ModelSpec& spec, std::string_view expected_fingerprint) {
  spec.validate();
  if (!expected_fingerprint.empty() && expected_fingerprint != traces.model_fingerprint) {
    throw ValidationError("fingerprint mismatch: traces were produced by " + traces.model_fingerprint +
                          ", model is " + std::string(expected_fingerprint));
  }
  return static_cast<double>(union_of(traces, spec).count()) / static_cast<double>(spec.total_neurons());
}

std::map<ExpertRef, double> expert_frequency(const TaskTraceSet& traces) {
  if (traces.traces.empty()) throw ValidationError("expert_frequency: no traces");
  std::map<ExpertRef, std::size_t> counts;
  for (const auto& t : traces.traces) {
    for (const auto& e : activated_experts(t)) ++counts[e];
  }
  std::map<ExpertRef, double> out;
  const auto total = static_cast<double>(traces.traces.size());
  for (const auto& [e, c] : counts) out.emplace(e, static_cast<double>(c) / total);
  return out;
}

std::set<ExpertRef> key_experts(const TaskTraceSet& traces, double eta_expert) {
  check_eta(eta_expert);
  std::set<ExpertRef> out;
  if (traces.traces.empty()) return out;
  for (const auto& [e, f] : expert_frequency(traces)) {
    if (f >= eta_expert) out.insert(e);
  }
  return out;
}

double key_expert_proportion(const TaskTraceSet& traces, double eta_expert, const ModelSpec& spec) {
  spec.validate();
  return static_cast<double>(key_experts(traces, eta_expert).size()) / static_cast<double>(spec.total_experts());
}

double expert_mui(const TaskTraceSet& traces, const ExpertRef& expert, const ModelSpec& spec) {
  if (!in_bounds(spec, expert)) throw ValidationError("expert_mui: expert out of bounds");
  std::vector<bool> seen(static_cast<std::size_t>(spec.n_neurons), false);
  for (const auto& t : traces.traces) {
    auto it = std::lower_bound(t.neurons.begin(), t.neurons.end(), NeuronRef{expert.layer, expert.expert, 0});
    for (; it != t.neurons.end() && expert_of(*it) == expert; ++it) seen[static_cast<std::size_t>(it->neuron)] = true;
  }
  const auto hits = std::count(seen.begin(), seen.end(), true);
  return static_cast<double>(hits) / static_cast<double>(spec.n_neurons);
}

std::vector<RankedExpert> top_experts(const TaskTraceSet& traces, int k, const ModelSpec& spec) {
  if (k < 1) throw ValidationError("top_experts: k must be >= 1");
  std::vector<RankedExpert> ranked;
  if (traces.traces.empty()) return ranked;
  for (const auto& [e, f] : expert_frequency(traces)) ranked.push_back({e, f, 0.0});
  // map iteration is already (layer, expert) ascending; a stable sort keeps that as the tie order
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const RankedExpert& a, const RankedExpert& b) { return a.frequency > b.frequency; });
  if (ranked.size() > static_cast<std::size_t>(k)) ranked.resize(static_cast<std::size_t>(k));
  for (auto& r : ranked) r.expert_mui = expert_mui(traces, r.expert, spec);
  return ranked;
}

UtilizationReport utilization_report(const TaskTraceSet& traces, const ModelSpec& spec, double eta_expert) {
  check_eta(eta_expert);
  UtilizationReport r;
  r.task = traces.task;
  r.samples = traces.traces.size();
  r.eta_expert = eta_expert;
  r.mui = mui(traces, spec);
  r.key_expert_proportion = key_expert_proportion(traces, eta_expert, spec);
  if (!traces.traces.empty()) {
    r.expert_frequency = expert_frequency(traces);
    for (const auto& [e, f] : r.expert_frequency) r.expert_mui.emplace(e, expert_mui(traces, e, spec));
  }
  return r;
}

std::vector<DiversityRow> diversity_report(const std::map<std::string, TaskTraceSet>& grouped,
                                           const DiversityConfig& config, const ModelSpec& spec) {
  if (grouped.size() < 2) throw ValidationError("diversity: need at least 2 domains, got " + std::to_string(grouped.size()));
  if (config.samples_per_mixture < 1) throw ValidationError("diversity: samples per mixture must be >= 1");
  if (config.repeats < 1) throw ValidationError("diversity: repeats must be >= 1");
  if (config.domain_counts.empty()) throw ValidationError("diversity: no mixture sizes requested");

  std::vector<const TaskTraceSet*> domains;
  for (const auto& [name, set] : grouped) domains.push_back(&set);
  std::vector<int> counts = config.domain_counts;
  std::sort(counts.begin(), counts.end());

  std::vector<DiversityRow> rows;
  for (std::size_t ci = 0; ci < counts.size(); ++ci) {
    const int d = counts[ci];
    if (d < 1) throw ValidationError("diversity: mixture size must be >= 1, got " + std::to_string(d));
    if (static_cast<std::size_t>(d) > domains.size()) {
      throw ValidationError("diversity: mixture of " + std::to_string(d) + " domains requested, only " +
                            std::to_string(domains.size()) + " available");
    }
    DiversityRow row{d, config.samples_per_mixture, 0.0, 0.0};
    for (int rep = 0; rep < config.repeats; ++rep) {
      Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(d) * 1000003ULL + static_cast<std::uint64_t>(rep)));
      std::vector<std::size_t> order(domains.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      shuffle(order.begin(), order.end(), rng);

      TaskTraceSet mixture;
      mixture.task = "mixture";
      for (int k = 0; k < d; ++k) {
        const auto& source = *domains[order[static_cast<std::size_t>(k)]];
        const int quota = config.samples_per_mixture / d + (k < config.samples_per_mixture % d ? 1 : 0);
        if (static_cast<std::size_t>(quota) > source.traces.size()) {
          throw ValidationError("diversity: domain '" + source.task + "' has " + std::to_string(source.traces.size()) +
                                " samples, mixture needs " + std::to_string(quota));
        }
        std::vector<std::size_t> pick(source.traces.size());
        std::iota(pick.begin(), pick.end(), std::size_t{0});
        shuffle(pick.begin(), pick.end(), rng);
        for (int q = 0; q < quota; ++q) mixture.traces.push_back(source.traces[pick[static_cast<std::size_t>(q)]]);
      }
      row.mui += mui(mixture, spec);
      row.activated_expert_proportion += key_expert_proportion(mixture, 0.0, spec);
    }
    row.mui /= config.repeats;
    row.activated_expert_proportion /= config.repeats;
    rows.push_back(row);
  }
  return rows;
}

std::string_view to_string(PhaseLabel p) noexcept {
  switch (p) {
    case PhaseLabel::Accumulating:
      return "Accumulating";
    case PhaseLabel::Evolving:
      return "Evolving";
    case PhaseLabel::Mixed:
      return "Mixed";
    case PhaseLabel::Degrading:
      return "Degrading";
  }
  return "unknown";
}

std::vector<PhaseLabel> phase_classify(std::span<const PhasePoint> series, double epsilon) {
  if (series.size() < 2) throw ValidationError("phase_classify: need at least 2 points");
  if (!(epsilon >= 0.0)) throw ValidationError("phase_classify: epsilon must be >= 0");
  std::vector<PhaseLabel> out;
  out.reserve(series.size() - 1);
  for (std::size_t i = 1; i < series.size(); ++i) {
    const double dperf = series[i].performance - series[i - 1].performance;
    const double dmui = series[i].mui - series[i - 1].mui;
    if (dperf > epsilon && dmui > epsilon) {
      out.push_back(PhaseLabel::Accumulating);
    } else if (dperf > epsilon && dmui < -epsilon) {
      out.push_back(PhaseLabel::Evolving);
    } else if (dperf < -epsilon) {
      out.push_back(PhaseLabel::Degrading);
    } else {
      out.push_back(PhaseLabel::Mixed);
    }
  }
  return out;
}

}  // namespace moemui
