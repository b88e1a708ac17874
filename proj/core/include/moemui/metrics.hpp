#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "moemui/attribution.hpp"
#include "moemui/model.hpp"

namespace moemui {

/// Traces of one task, all produced from the same model with the same method and threshold.
struct TaskTraceSet {
  std::string task;
  std::vector<SampleTrace> traces;
  std::string model_fingerprint;
  ScoreMethod method = ScoreMethod::GateProject;
  double permille = 1.0;

  /// Builds a set from traces, taking fingerprint/method/permille from the first
  /// trace and validating the rest against it.
  static TaskTraceSet from_traces(std::string task, std::vector<SampleTrace> traces);

  /// Throws ValidationError on mixed fingerprints, methods, thresholds or duplicate sample ids.
  void validate() const;
};

/// Dense bitset over every neuron of a model, used for unions.
class NeuronSet {
 public:
  explicit NeuronSet(const ModelSpec& spec);

  /// Throws ValidationError when `r` is outside the model.
  void insert(const NeuronRef& r);
  void insert_all(std::span<const NeuronRef> refs);
  bool contains(const NeuronRef& r) const noexcept;
  std::int64_t count() const noexcept;
  std::vector<NeuronRef> to_vector() const;

 private:
  ModelSpec spec_;
  std::vector<std::uint64_t> words_;
};

/// |union of neuron sets| / (N * L * (|E_s| + |E_r|)). When `expected_fingerprint`
/// is non-empty it must equal the set's fingerprint.
double mui(const TaskTraceSet& traces, const ModelSpec& spec, std::string_view expected_fingerprint = {});

std::vector<NeuronRef> neuron_union(const TaskTraceSet& traces, const ModelSpec& spec);

/// Share of samples whose activated-expert set contains each expert. Experts
/// never activated are absent. Requires at least one trace.
std::map<ExpertRef, double> expert_frequency(const TaskTraceSet& traces);

/// Experts with frequency >= eta_expert; eta_expert = 0 gives every activated expert.
std::set<ExpertRef> key_experts(const TaskTraceSet& traces, double eta_expert);

/// |key_experts| / (L * (|E_s| + |E_r|)).
double key_expert_proportion(const TaskTraceSet& traces, double eta_expert, const ModelSpec& spec);

/// Share of the expert's N neurons activated anywhere in the task.
double expert_mui(const TaskTraceSet& traces, const ExpertRef& expert, const ModelSpec& spec);

struct RankedExpert {
  ExpertRef expert;
  double frequency = 0.0;
  double expert_mui = 0.0;
};

/// Descending frequency, ties by (layer, expert) ascending; at most k entries.
std::vector<RankedExpert> top_experts(const TaskTraceSet& traces, int k, const ModelSpec& spec);

struct UtilizationReport {
  std::string task;
  std::size_t samples = 0;
  double mui = 0.0;
  double key_expert_proportion = 0.0;
  double eta_expert = 0.6;
  std::map<ExpertRef, double> expert_mui;  // experts with >= 1 activated neuron
  std::map<ExpertRef, double> expert_frequency;
};

UtilizationReport utilization_report(const TaskTraceSet& traces, const ModelSpec& spec, double eta_expert = 0.6);

struct DiversityConfig {
  std::vector<int> domain_counts;  // number of domains per mixture, e.g. {1, 2, 3}
  int samples_per_mixture = 0;
  int repeats = 1;  // independent draws averaged per row
  std::uint64_t seed = 0;
};

struct DiversityRow {
  int domains = 0;
  int samples = 0;
  double mui = 0.0;                       // mean over repeats
  double activated_expert_proportion = 0.0;  // key_expert_proportion at eta = 0, mean over repeats
};

/// For each domain count d: pick d domains and draw samples_per_mixture
/// samples split evenly across them (without replacement), all by seed.
/// Rows are sorted by d.
std::vector<DiversityRow> diversity_report(const std::map<std::string, TaskTraceSet>& grouped,
                                           const DiversityConfig& config, const ModelSpec& spec);

enum class PhaseLabel { Accumulating, Evolving, Mixed, Degrading };

std::string_view to_string(PhaseLabel p) noexcept;

struct PhasePoint {
  double performance = 0.0;
  double mui = 0.0;
};

/// One label per consecutive pair:
///  dperf > eps and dmui > eps   -> Accumulating
///  dperf > eps and dmui < -eps  -> Evolving
///  dperf < -eps                 -> Degrading
///  otherwise                    -> Mixed
std::vector<PhaseLabel> phase_classify(std::span<const PhasePoint> series, double epsilon = 0.001);

}  // namespace moemui
