#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "moemui/matrix.hpp"

namespace moemui {

/// Token id 0 is reserved as end-of-sequence in the toy vocabulary.
inline constexpr int kEosToken = 0;

/// Architecture hyperparameters of the toy MoE language model.
struct ModelSpec {
  int n_layers = 1;
  int n_routed = 1;
  int n_shared = 0;
  int top_k = 1;
  int n_neurons = 1;  // hidden width of every expert
  int d_model = 1;
  int vocab_size = 2;
  int context_window = 1;
  std::uint64_t seed = 0;

  /// Throws ValidationError on non-positive dimensions or top_k > n_routed.
  void validate() const;

  int experts_per_layer() const noexcept { return n_shared + n_routed; }
  std::int64_t total_experts() const noexcept {
    return static_cast<std::int64_t>(n_layers) * experts_per_layer();
  }
  /// N * L * (|E_s| + |E_r|), the denominator of the utilization index.
  std::int64_t total_neurons() const noexcept { return total_experts() * n_neurons; }
  bool is_shared(int expert) const noexcept { return expert < n_shared; }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// (layer, expert, neuron). Experts are indexed over [shared..., routed...].
struct NeuronRef {
  int layer = 0;
  int expert = 0;
  int neuron = 0;

  friend auto operator<=>(const NeuronRef&, const NeuronRef&) = default;
};

/// (layer, expert) with the same expert indexing as NeuronRef.
struct ExpertRef {
  int layer = 0;
  int expert = 0;

  friend auto operator<=>(const ExpertRef&, const ExpertRef&) = default;
};

inline ExpertRef expert_of(const NeuronRef& r) noexcept { return {r.layer, r.expert}; }

bool in_bounds(const ModelSpec& spec, const NeuronRef& r) noexcept;
bool in_bounds(const ModelSpec& spec, const ExpertRef& r) noexcept;

/// Flat index ((layer * experts_per_layer) + expert) * n_neurons + neuron.
inline std::int64_t flat_index(const ModelSpec& spec, const NeuronRef& r) noexcept {
  return (static_cast<std::int64_t>(r.layer) * spec.experts_per_layer() + r.expert) * spec.n_neurons +
         r.neuron;
}
NeuronRef neuron_at(const ModelSpec& spec, std::int64_t flat) noexcept;

/// One SwiGLU expert: h = silu(x W_gate) * (x W_up), out = h W_down.
struct ExpertWeights {
  Matrix w_up;    // d_model x N
  Matrix w_gate;  // d_model x N
  Matrix w_down;  // N x d_model

  friend bool operator==(const ExpertWeights&, const ExpertWeights&) = default;
};

struct LayerWeights {
  Matrix router;                       // d_model x n_routed
  std::vector<ExpertWeights> experts;  // shared first, then routed

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

/// All weights of the toy model. Immutable once built; safe to share across threads.
struct ModelParams {
  ModelSpec spec;
  Matrix embedding;  // vocab x d_model
  Matrix mixer;      // (window * d_model) x d_model
  std::vector<LayerWeights> layers;
  Matrix unembedding;  // d_model x vocab

  /// Zero-filled parameters with shapes matching `spec`.
  static ModelParams zeros(const ModelSpec& spec);

  /// Throws ValidationError if any matrix shape disagrees with `spec`.
  void validate_shapes() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Deterministic initialisation from spec.seed, uniform in [-1, 1) / sqrt(fan_in).
ModelParams init_model(const ModelSpec& spec);

/// Set of neurons whose gated activation is forced to zero.
struct MaskSpec {
  std::vector<NeuronRef> neurons;  // sorted, unique

  MaskSpec() = default;
  explicit MaskSpec(std::vector<NeuronRef> refs);

  bool empty() const noexcept { return neurons.empty(); }
  std::size_t size() const noexcept { return neurons.size(); }
  bool contains(const NeuronRef& r) const noexcept;

  friend bool operator==(const MaskSpec&, const MaskSpec&) = default;
};

struct RouteResult {
  std::vector<int> experts;        // routed indices (0-based over routed experts), by rank
  std::vector<double> weights;     // softmax restricted to the selected logits
  std::vector<double> full_probs;  // softmax over all routed logits
};

/// Top-k routing at `layer`; ties go to the lower expert index.
RouteResult route(const ModelParams& params, int layer, std::span<const double> x);

/// Quantities of one active expert at one (position, layer).
struct ExpertActivation {
  int expert = 0;  // index over [shared..., routed...]
  double gate = 1.0;
  std::vector<double> gate_pre;  // x W_gate
  std::vector<double> up;        // x W_up
  std::vector<double> hidden;    // silu(gate_pre) * up, masked entries zeroed
  std::vector<double> output;    // hidden W_down (before gate scaling)
};

struct LayerRecord {
  std::vector<double> input;  // residual stream entering the layer
  RouteResult routing;
  std::vector<ExpertActivation> active;  // shared experts first, then routed by rank
};

struct PositionRecord {
  std::vector<double> context;  // window embeddings concatenated (w * d_model)
  std::vector<LayerRecord> layers;
  std::vector<double> final_hidden;
  std::vector<double> logits;
};

struct ForwardRecord {
  std::vector<PositionRecord> positions;
};

/// Forward pass for the single position `pos` of `tokens`.
PositionRecord forward_position(const ModelParams& params, std::span<const int> tokens, std::size_t pos,
                                const MaskSpec& mask = {});

/// Forward pass over every position of `tokens`.
ForwardRecord forward(const ModelParams& params, std::span<const int> tokens, const MaskSpec& mask = {});

/// Next-token logits given the full prefix.
std::vector<double> next_logits(const ModelParams& params, std::span<const int> tokens,
                                const MaskSpec& mask = {});

/// Index of the largest value; ties go to the lowest index.
int argmax(std::span<const double> values) noexcept;

/// Temperature-0 decoding. Emits up to `max_len` tokens; an emitted EOS is
/// included and ends decoding.
std::vector<int> greedy_decode(const ModelParams& params, std::span<const int> prompt, int max_len,
                               const MaskSpec& mask = {});

double sigmoid(double x) noexcept;
double silu(double x) noexcept;
double silu_grad(double x) noexcept;

}  // namespace moemui
