#pragma once

// Test-only fixtures and independent oracles shared by the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "moemui/attribution.hpp"
#include "moemui/metrics.hpp"
#include "moemui/model.hpp"
#include "moemui/rng.hpp"
#include "moemui/stats.hpp"
#include "moemui/tasks.hpp"
#include "moemui/trainer.hpp"

namespace moemui::testing {

inline constexpr int kPlantedProbeToken = 3;
inline constexpr int kPlantedDistractorToken = 2;

struct PlantedModel {
  ModelParams params;
  std::vector<NeuronRef> circuit;  // designated neurons carrying the probe logit
  std::vector<Example> probes;     // prompt [t] for t in 4..7, target = probe token
};

// One layer, one shared expert (index 0) and two routed experts, N = 2048.
// Residual-only logits favour the distractor token by 1.0; each designated
// shared-expert neuron adds silu(4) * 0.25 ~= 0.98 to the probe-token logit,
// so the probe wins with all designated neurons and loses once 3 of 4 are gone.
// Every other weight is small noise. With one response token and two active
// experts a layer pools 4096 score events, so the 1 permille threshold keeps 4.
inline PlantedModel make_planted_model(std::vector<int> circuit_neurons = {5, 700, 1400, 2000},
                                       std::uint64_t seed = 11) {
  ModelSpec spec;
  spec.n_layers = 1;
  spec.n_shared = 1;
  spec.n_routed = 2;
  spec.top_k = 1;
  spec.n_neurons = 2048;
  spec.d_model = 8;
  spec.vocab_size = 8;
  spec.context_window = 1;
  spec.seed = seed;

  PlantedModel pm{ModelParams::zeros(spec), {}, {}};
  auto& p = pm.params;
  Rng rng(seed);
  auto noise = [&](double scale) { return (2.0 * uniform01(rng) - 1.0) * scale; };

  for (int t = 1; t < spec.vocab_size; ++t) {
    p.embedding(t, 0) = 1.0;
    for (int c = 2; c < spec.d_model; ++c) p.embedding(t, c) = noise(0.05);
  }
  for (int c = 0; c < spec.d_model; ++c) p.mixer(c, c) = 1.0;
  auto& layer = p.layers[0];
  for (auto& v : layer.router.data()) v = noise(0.1);
  for (auto& e : layer.experts) {
    for (auto& v : e.w_gate.data()) v = noise(0.05);
    for (auto& v : e.w_up.data()) v = noise(0.05);
    for (auto& v : e.w_down.data()) v = noise(0.05);
  }
  auto& shared = layer.experts[0];
  for (int j : circuit_neurons) {
    for (int r = 0; r < spec.d_model; ++r) {
      shared.w_gate(r, j) = r == 0 ? 4.0 : 0.0;
      shared.w_up(r, j) = r == 0 ? 1.0 : 0.0;
      shared.w_down(j, r) = r == 1 ? 0.25 : 0.0;
    }
    pm.circuit.push_back({0, 0, j});
  }
  for (int r = 2; r < spec.d_model; ++r) {
    for (int v = 0; v < spec.vocab_size; ++v) p.unembedding(r, v) = noise(0.01);
  }
  p.unembedding(0, kPlantedDistractorToken) = 1.0;
  p.unembedding(1, kPlantedProbeToken) = 1.0;

  for (int t = 4; t < spec.vocab_size; ++t) pm.probes.push_back({{t}, {kPlantedProbeToken}});
  return pm;
}

// Exact two-sided Fisher p-value by rational enumeration: every probability
// shares the denominator C(n, col1), so tables are compared and summed as
// exact integers C(row1, x) * C(row2, col1 - x).
inline unsigned __int128 binom128(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  unsigned __int128 r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

inline long double rational_fisher(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
  const std::uint64_t row1 = a + b, row2 = c + d, col1 = a + c, n = a + b + c + d;
  if (row1 == 0 || row2 == 0 || col1 == 0 || col1 == n) return 1.0L;
  const unsigned __int128 denom = binom128(n, col1);
  const unsigned __int128 observed = binom128(row1, a) * binom128(row2, c);
  unsigned __int128 tail = 0;
  const std::uint64_t lo = col1 > row2 ? col1 - row2 : 0, hi = std::min(row1, col1);
  for (std::uint64_t x = lo; x <= hi; ++x) {
    const unsigned __int128 w = binom128(row1, x) * binom128(row2, col1 - x);
    if (w <= observed) tail += w;
  }
  return static_cast<long double>(tail) / static_cast<long double>(denom);
}

// Calls fn on every scalar parameter of `p` with a stable group name.
inline void for_each_param_group(ModelParams& p, const std::function<void(const std::string&, Matrix&)>& fn) {
  fn("embedding", p.embedding);
  fn("mixer", p.mixer);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto tag = "layer" + std::to_string(l);
    fn(tag + ".router", p.layers[l].router);
    for (std::size_t e = 0; e < p.layers[l].experts.size(); ++e) {
      const auto etag = tag + ".expert" + std::to_string(e);
      fn(etag + ".w_up", p.layers[l].experts[e].w_up);
      fn(etag + ".w_gate", p.layers[l].experts[e].w_gate);
      fn(etag + ".w_down", p.layers[l].experts[e].w_down);
    }
  }
  fn("unembedding", p.unembedding);
}

struct GroupError {
  std::string group;
  double relative_error = 0.0;
  double analytic_norm = 0.0;
};

// Central finite differences of the full loss for every scalar parameter,
// compared group-wise as ||analytic - numeric|| / max(||analytic||, ||numeric||).
inline std::vector<GroupError> gradient_check(const ModelParams& params, const std::vector<Example>& batch,
                                              double aux_alpha, double step = 1e-5) {
  const auto analytic = loss_and_grads(params, batch, aux_alpha).grads;
  ModelParams probe = params;
  ModelParams analytic_copy = analytic;
  std::map<std::string, const Matrix*> analytic_groups;
  for_each_param_group(analytic_copy, [&](const std::string& name, Matrix& m) { analytic_groups[name] = &m; });

  std::vector<GroupError> out;
  for_each_param_group(probe, [&](const std::string& name, Matrix& m) {
    const Matrix& g = *analytic_groups.at(name);
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double saved = m.data()[i];
      m.data()[i] = saved + step;
      const double up = evaluate_loss(probe, batch, aux_alpha).loss;
      m.data()[i] = saved - step;
      const double down = evaluate_loss(probe, batch, aux_alpha).loss;
      m.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = g.data()[i];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
    }
    const double scale = std::max({std::sqrt(a2), std::sqrt(n2), 1e-300});
    out.push_back({name, std::sqrt(diff2) / scale, std::sqrt(a2)});
  });
  return out;
}

inline ModelSpec gradient_check_spec(int top_k = 1) {
  ModelSpec s;
  s.n_layers = 1;
  s.n_routed = 2;
  s.n_shared = 1;
  s.top_k = top_k;
  s.n_neurons = 3;
  s.d_model = 4;
  s.vocab_size = 5;
  s.context_window = 2;
  s.seed = 3;
  return s;
}

// Random traces with 0..max_size neurons each, for metric identity checks.
inline TaskTraceSet random_trace_set(const ModelSpec& spec, std::uint64_t seed, int n_traces, int max_size,
                                     const std::string& task = "fixture") {
  Rng rng(seed);
  std::vector<SampleTrace> traces;
  // Bias toward a few hot experts so that frequencies spread over [0, 1].
  const auto hot = static_cast<int>(1 + uniform_below(rng, static_cast<std::uint64_t>(spec.total_experts())));
  for (int s = 0; s < n_traces; ++s) {
    SampleTrace t;
    t.sample_id = task + "-" + std::to_string(s);
    t.task = task;
    t.model_fingerprint = std::string(64, 'a');
    const auto size = uniform_below(rng, static_cast<std::uint64_t>(max_size) + 1);
    for (std::uint64_t k = 0; k < size; ++k) {
      NeuronRef r;
      if (uniform01(rng) < 0.5) {
        const auto e = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(hot)));
        r.layer = e / spec.experts_per_layer();
        r.expert = e % spec.experts_per_layer();
      } else {
        r.layer = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(spec.n_layers)));
        r.expert = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(spec.experts_per_layer())));
      }
      r.neuron = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(spec.n_neurons)));
      t.neurons.push_back(r);
    }
    std::sort(t.neurons.begin(), t.neurons.end());
    t.neurons.erase(std::unique(t.neurons.begin(), t.neurons.end()), t.neurons.end());
    traces.push_back(std::move(t));
  }
  return TaskTraceSet::from_traces(task, std::move(traces));
}

}  // namespace moemui::testing
