#pragma once

#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moemui/model.hpp"

namespace moemui {

/// Per-neuron contribution score.
///  gate_project: G * silu(x W_g)[j] * (W_d[j,:] . W_head[:, y])
///  activation:   G * h[j]
///  glu_project:  G * h[j] * (W_d[j,:] . W_head[:, y])
/// with h = silu(x W_g) * (x W_u).
enum class ScoreMethod { GateProject, Activation, GluProject };

std::string_view to_string(ScoreMethod m) noexcept;
/// Accepts the canonical names and the short CLI forms gate / activation / glu.
ScoreMethod parse_score_method(std::string_view name);

struct ThresholdPolicy {
  double permille = 1.0;  // top fraction (per mille) of score events kept per layer

  void validate() const;
};

struct RouteEntry {
  ExpertRef expert;
  double weight = 1.0;

  friend bool operator==(const RouteEntry&, const RouteEntry&) = default;
};

/// Key activated neurons of one sample.
struct SampleTrace {
  std::string sample_id;
  std::string task;
  std::vector<NeuronRef> neurons;                  // sorted by (layer, expert, neuron), unique
  std::vector<std::vector<RouteEntry>> route_log;  // per response token: active experts with gate weights
  ScoreMethod method = ScoreMethod::GateProject;
  double permille = 1.0;
  std::string model_fingerprint;

  friend bool operator==(const SampleTrace&, const SampleTrace&) = default;
};

/// Scalar score from the executed quantities of one neuron.
double score_value(ScoreMethod method, double gate, double gate_pre, double up, double down_to_vocab) noexcept;

/// Score of `ref` for predicting `target` at the position recorded in `layer`.
/// Returns 0 when the expert is not active there.
double contribution(const ModelParams& params, const LayerRecord& layer, const NeuronRef& ref, int target,
                    ScoreMethod method);

/// Number of score events kept: max(1, floor(permille / 1000 * n)).
std::size_t selected_count(std::size_t n, double permille) noexcept;

/// The selected_count-th largest score (signed, no absolute value).
double layer_threshold(std::span<const double> scores, const ThresholdPolicy& policy);

struct ScoreEvent {
  double score = 0.0;
  NeuronRef ref;
};

/// Every score event of a sample, pooled per layer over response tokens and
/// active experts. Independent of the threshold, so one scoring pass can be
/// selected at several permille values.
struct ScoredSample {
  std::vector<std::vector<ScoreEvent>> layers;
  std::vector<std::vector<RouteEntry>> route_log;
};

/// Teacher-forced replay of `response` after `prompt`.
ScoredSample score_sample(const ModelParams& params, std::span<const int> prompt, std::span<const int> response,
                          ScoreMethod method);

/// Neurons whose score reaches the per-layer threshold (inclusive).
std::vector<NeuronRef> select_neurons(const ScoredSample& scored, const ThresholdPolicy& policy);

struct TraceLabel {
  std::string sample_id;
  std::string task;
  std::string model_fingerprint;
};

SampleTrace trace_sample(const ModelParams& params, std::span<const int> prompt, std::span<const int> response,
                         ScoreMethod method, const ThresholdPolicy& policy, TraceLabel label = {});

/// Greedy-decodes up to `max_len` tokens from `prompt`, then traces that response.
SampleTrace trace_greedy(const ModelParams& params, std::span<const int> prompt, int max_len, ScoreMethod method,
                         const ThresholdPolicy& policy, TraceLabel label = {});

/// {(layer, expert) : some neuron of that expert is in the trace}.
std::set<ExpertRef> activated_experts(const SampleTrace& trace);

}  // namespace moemui
