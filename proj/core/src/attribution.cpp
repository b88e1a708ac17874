#include "moemui/attribution.hpp"

#include <algorithm>
#include <cmath>

#include "moemui/errors.hpp"

namespace moemui {

std::string_view to_string(ScoreMethod m) noexcept {
  switch (m) {
    case ScoreMethod::GateProject:
      return "gate_project";
    case ScoreMethod::Activation:
      return "activation";
    case ScoreMethod::GluProject:
      return "glu_project";
  }
  return "unknown";
}

ScoreMethod parse_score_method(std::string_view name) {
  if (name == "gate_project" || name == "gate") return ScoreMethod::GateProject;
  if (name == "activation") return ScoreMethod::Activation;
  if (name == "glu_project" || name == "glu") return ScoreMethod::GluProject;
  throw ValidationError("unknown score method '" + std::string(name) + "'");
}

void ThresholdPolicy::validate() const {
  if (!(permille > 0.0 && permille <= 1000.0)) {
    throw ValidationError("permille must lie in (0, 1000], got " + std::to_string(permille));
  }
}

double score_value(ScoreMethod method, double gate, double gate_pre, double up, double down_to_vocab) noexcept {
  const double g = silu(gate_pre);
  switch (method) {
    case ScoreMethod::GateProject:
      return gate * g * down_to_vocab;
    case ScoreMethod::Activation:
      return gate * (g * up);
    case ScoreMethod::GluProject:
      return gate * (g * up) * down_to_vocab;
  }
  return 0.0;
}

namespace {

// W_d[j,:] . W_head[:, target] for every neuron j of one expert.
std::vector<double> down_to_vocab(const ModelParams& params, const ExpertWeights& expert, int target) {
  const auto& head = params.unembedding;
  std::vector<double> column(head.rows());
  for (std::size_t r = 0; r < head.rows(); ++r) column[r] = head(r, static_cast<std::size_t>(target));
  std::vector<double> out(expert.w_down.rows(), 0.0);
  mat_vec_acc(expert.w_down, column, out);
  return out;
}

void check_target(const ModelParams& params, int target) {
  if (target < 0 || target >= params.spec.vocab_size) {
    throw ValidationError("attribution: target token " + std::to_string(target) + " outside vocabulary");
  }
}

}  // namespace

double contribution(const ModelParams& params, const LayerRecord& layer, const NeuronRef& ref, int target,
                    ScoreMethod method) {
  check_target(params, target);
  if (!in_bounds(params.spec, ref)) throw ValidationError("attribution: neuron reference out of bounds");
  const auto it = std::find_if(layer.active.begin(), layer.active.end(),
                               [&](const ExpertActivation& a) { return a.expert == ref.expert; });
  if (it == layer.active.end()) return 0.0;
  const auto j = static_cast<std::size_t>(ref.neuron);
  const auto& weights = params.layers[static_cast<std::size_t>(ref.layer)].experts[static_cast<std::size_t>(ref.expert)];
  double d2v = 0.0;
  if (method != ScoreMethod::Activation) {
    for (std::size_t c = 0; c < weights.w_down.cols(); ++c) {
      d2v += weights.w_down(j, c) * params.unembedding(c, static_cast<std::size_t>(target));
    }
  }
  return score_value(method, it->gate, it->gate_pre[j], it->up[j], d2v);
}

std::size_t selected_count(std::size_t n, double permille) noexcept {
  const auto k = static_cast<std::size_t>(std::floor(permille * static_cast<double>(n) / 1000.0));
  return std::max<std::size_t>(1, std::min(k, n));
}

double layer_threshold(std::span<const double> scores, const ThresholdPolicy& policy) {
  policy.validate();
  if (scores.empty()) throw ValidationError("layer_threshold: empty score list");
  std::vector<double> v(scores.begin(), scores.end());
  const auto k = selected_count(v.size(), policy.permille);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k - 1), v.end(), std::greater<>());
  return v[k - 1];
}

ScoredSample score_sample(const ModelParams& params, std::span<const int> prompt, std::span<const int> response,
                          ScoreMethod method) {
  if (prompt.empty()) throw ValidationError("trace: empty prompt");
  if (response.empty()) throw ValidationError("trace: empty response");
  params.validate_shapes();
  const auto& spec = params.spec;
  ScoredSample out;
  out.layers.resize(static_cast<std::size_t>(spec.n_layers));

  std::vector<int> seq(prompt.begin(), prompt.end());
  seq.reserve(prompt.size() + response.size());
  for (const int target : response) {
    check_target(params, target);
    const auto rec = forward_position(params, seq, seq.size() - 1);
    auto& routes = out.route_log.emplace_back();
    for (int l = 0; l < spec.n_layers; ++l) {
      const auto& lr = rec.layers[static_cast<std::size_t>(l)];
      auto& events = out.layers[static_cast<std::size_t>(l)];
      for (const auto& act : lr.active) {
        routes.push_back({{l, act.expert}, act.gate});
        const auto& weights = params.layers[static_cast<std::size_t>(l)].experts[static_cast<std::size_t>(act.expert)];
        std::vector<double> d2v;
        if (method != ScoreMethod::Activation) d2v = down_to_vocab(params, weights, target);
        for (int j = 0; j < spec.n_neurons; ++j) {
          const auto ju = static_cast<std::size_t>(j);
          const double s = score_value(method, act.gate, act.gate_pre[ju], act.up[ju], d2v.empty() ? 0.0 : d2v[ju]);
          events.push_back({s, {l, act.expert, j}});
        }
      }
    }
    seq.push_back(target);
  }
  return out;
}

std::vector<NeuronRef> select_neurons(const ScoredSample& scored, const ThresholdPolicy& policy) {
  policy.validate();
  std::vector<NeuronRef> out;
  std::vector<double> values;
  for (const auto& events : scored.layers) {
    if (events.empty()) continue;
    values.clear();
    for (const auto& e : events) values.push_back(e.score);
    const double eta = layer_threshold(values, policy);
    for (const auto& e : events) {
      if (e.score >= eta) out.push_back(e.ref);
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

SampleTrace trace_sample(const ModelParams& params, std::span<const int> prompt, std::span<const int> response,
                         ScoreMethod method, const ThresholdPolicy& policy, TraceLabel label) {
  policy.validate();
  auto scored = score_sample(params, prompt, response, method);
  SampleTrace t;
  t.sample_id = std::move(label.sample_id);
  t.task = std::move(label.task);
  t.neurons = select_neurons(scored, policy);
  t.route_log = std::move(scored.route_log);
  t.method = method;
  t.permille = policy.permille;
  t.model_fingerprint = std::move(label.model_fingerprint);
  return t;
}

SampleTrace trace_greedy(const ModelParams& params, std::span<const int> prompt, int max_len, ScoreMethod method,
                         const ThresholdPolicy& policy, TraceLabel label) {
  const auto response = greedy_decode(params, prompt, max_len);
  return trace_sample(params, prompt, response, method, policy, std::move(label));
}

std::set<ExpertRef> activated_experts(const SampleTrace& trace) {
  std::set<ExpertRef> out;
  for (const auto& r : trace.neurons) out.insert(expert_of(r));
  return out;
}

}  // namespace moemui
