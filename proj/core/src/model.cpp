#include "moemui/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "moemui/errors.hpp"
#include "moemui/rng.hpp"

namespace moemui {

void ModelSpec::validate() const {
  auto require_positive = [](int v, const char* name) {
    if (v < 1) throw ValidationError(std::string("model spec: ") + name + " must be >= 1, got " + std::to_string(v));
  };
  require_positive(n_layers, "n_layers");
  require_positive(n_routed, "n_routed");
  require_positive(top_k, "top_k");
  require_positive(n_neurons, "n_neurons");
  require_positive(d_model, "d_model");
  require_positive(vocab_size, "vocab_size");
  require_positive(context_window, "context_window");
  if (n_shared < 0) throw ValidationError("model spec: n_shared must be >= 0, got " + std::to_string(n_shared));
  if (top_k > n_routed) {
    throw ValidationError("model spec: top_k (" + std::to_string(top_k) + ") exceeds n_routed (" +
                          std::to_string(n_routed) + ")");
  }
}

bool in_bounds(const ModelSpec& spec, const NeuronRef& r) noexcept {
  return r.layer >= 0 && r.layer < spec.n_layers && r.expert >= 0 && r.expert < spec.experts_per_layer() &&
         r.neuron >= 0 && r.neuron < spec.n_neurons;
}

bool in_bounds(const ModelSpec& spec, const ExpertRef& r) noexcept {
  return r.layer >= 0 && r.layer < spec.n_layers && r.expert >= 0 && r.expert < spec.experts_per_layer();
}

NeuronRef neuron_at(const ModelSpec& spec, std::int64_t flat) noexcept {
  NeuronRef r;
  r.neuron = static_cast<int>(flat % spec.n_neurons);
  flat /= spec.n_neurons;
  r.expert = static_cast<int>(flat % spec.experts_per_layer());
  r.layer = static_cast<int>(flat / spec.experts_per_layer());
  return r;
}

ModelParams ModelParams::zeros(const ModelSpec& spec) {
  spec.validate();
  const auto d = static_cast<std::size_t>(spec.d_model);
  const auto n = static_cast<std::size_t>(spec.n_neurons);
  ModelParams p;
  p.spec = spec;
  p.embedding = Matrix(spec.vocab_size, d);
  p.mixer = Matrix(static_cast<std::size_t>(spec.context_window) * d, d);
  p.layers.resize(spec.n_layers);
  for (auto& layer : p.layers) {
    layer.router = Matrix(d, spec.n_routed);
    layer.experts.resize(spec.experts_per_layer());
    for (auto& e : layer.experts) {
      e.w_up = Matrix(d, n);
      e.w_gate = Matrix(d, n);
      e.w_down = Matrix(n, d);
    }
  }
  p.unembedding = Matrix(d, spec.vocab_size);
  return p;
}

void ModelParams::validate_shapes() const {
  spec.validate();
  const auto d = static_cast<std::size_t>(spec.d_model);
  const auto n = static_cast<std::size_t>(spec.n_neurons);
  auto check = [](const Matrix& m, std::size_t r, std::size_t c, const std::string& what) {
    if (m.rows() != r || m.cols() != c) {
      throw ValidationError("shape mismatch for " + what + ": expected " + std::to_string(r) + "x" +
                            std::to_string(c) + ", got " + std::to_string(m.rows()) + "x" +
                            std::to_string(m.cols()));
    }
  };
  check(embedding, spec.vocab_size, d, "embedding");
  check(mixer, spec.context_window * d, d, "mixer");
  if (layers.size() != static_cast<std::size_t>(spec.n_layers)) throw ValidationError("shape mismatch: layer count");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto tag = "layer " + std::to_string(l);
    check(layers[l].router, d, spec.n_routed, tag + " router");
    if (layers[l].experts.size() != static_cast<std::size_t>(spec.experts_per_layer())) {
      throw ValidationError("shape mismatch: expert count in " + tag);
    }
    for (std::size_t i = 0; i < layers[l].experts.size(); ++i) {
      const auto& e = layers[l].experts[i];
      const auto etag = tag + " expert " + std::to_string(i);
      check(e.w_up, d, n, etag + " w_up");
      check(e.w_gate, d, n, etag + " w_gate");
      check(e.w_down, n, d, etag + " w_down");
    }
  }
  check(unembedding, d, spec.vocab_size, "unembedding");
}

namespace {

void fill_uniform(Matrix& m, Rng& rng) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(m.rows()));
  for (auto& v : m.data()) v = (2.0 * uniform01(rng) - 1.0) * scale;
}

}  // namespace

ModelParams init_model(const ModelSpec& spec) {
  ModelParams p = ModelParams::zeros(spec);
  Rng rng(spec.seed);
  // Embedding rows are looked up, not multiplied; treat fan_in as d_model.
  {
    const double scale = 1.0 / std::sqrt(static_cast<double>(spec.d_model));
    for (auto& v : p.embedding.data()) v = (2.0 * uniform01(rng) - 1.0) * scale;
  }
  fill_uniform(p.mixer, rng);
  for (auto& layer : p.layers) {
    fill_uniform(layer.router, rng);
    for (auto& e : layer.experts) {
      fill_uniform(e.w_up, rng);
      fill_uniform(e.w_gate, rng);
      fill_uniform(e.w_down, rng);
    }
  }
  fill_uniform(p.unembedding, rng);
  return p;
}

MaskSpec::MaskSpec(std::vector<NeuronRef> refs) : neurons(std::move(refs)) {
  std::sort(neurons.begin(), neurons.end());
  neurons.erase(std::unique(neurons.begin(), neurons.end()), neurons.end());
}

bool MaskSpec::contains(const NeuronRef& r) const noexcept {
  return std::binary_search(neurons.begin(), neurons.end(), r);
}

double sigmoid(double x) noexcept { return 1.0 / (1.0 + std::exp(-x)); }

double silu(double x) noexcept { return x * sigmoid(x); }

double silu_grad(double x) noexcept {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

int argmax(std::span<const double> values) noexcept {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

RouteResult route(const ModelParams& params, int layer, std::span<const double> x) {
  const auto& spec = params.spec;
  if (layer < 0 || layer >= spec.n_layers) throw ValidationError("route: layer out of range");
  if (x.size() != static_cast<std::size_t>(spec.d_model)) throw ValidationError("route: input size mismatch");
  const auto logits = vec_mat(x, params.layers[static_cast<std::size_t>(layer)].router);
  for (double z : logits) {
    if (!std::isfinite(z)) throw ValidationError("route: non-finite router logit at layer " + std::to_string(layer));
  }

  RouteResult out;
  std::vector<int> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)];
  });
  out.experts.assign(order.begin(), order.begin() + spec.top_k);

  const double top = logits[static_cast<std::size_t>(order.front())];
  double selected_sum = 0.0;
  out.weights.resize(out.experts.size());
  for (std::size_t k = 0; k < out.experts.size(); ++k) {
    out.weights[k] = std::exp(logits[static_cast<std::size_t>(out.experts[k])] - top);
    selected_sum += out.weights[k];
  }
  for (auto& w : out.weights) w /= selected_sum;

  double full_sum = 0.0;
  out.full_probs.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out.full_probs[i] = std::exp(logits[i] - top);
    full_sum += out.full_probs[i];
  }
  for (auto& p : out.full_probs) p /= full_sum;
  return out;
}

namespace {

ExpertActivation run_expert(const ExpertWeights& w, std::span<const double> x, int layer, int expert, double gate,
                            const MaskSpec& mask) {
  ExpertActivation a;
  a.expert = expert;
  a.gate = gate;
  a.gate_pre = vec_mat(x, w.w_gate);
  a.up = vec_mat(x, w.w_up);
  a.hidden.resize(a.up.size());
  for (std::size_t j = 0; j < a.hidden.size(); ++j) a.hidden[j] = silu(a.gate_pre[j]) * a.up[j];
  if (!mask.empty()) {
    auto it = std::lower_bound(mask.neurons.begin(), mask.neurons.end(), NeuronRef{layer, expert, 0});
    for (; it != mask.neurons.end() && it->layer == layer && it->expert == expert; ++it) {
      a.hidden[static_cast<std::size_t>(it->neuron)] = 0.0;
    }
  }
  a.output = vec_mat(a.hidden, w.w_down);
  return a;
}

}  // namespace

PositionRecord forward_position(const ModelParams& params, std::span<const int> tokens, std::size_t pos,
                                const MaskSpec& mask) {
  const auto& spec = params.spec;
  if (pos >= tokens.size()) throw ValidationError("forward: position out of range");
  const auto d = static_cast<std::size_t>(spec.d_model);
  const auto w = static_cast<std::size_t>(spec.context_window);

  PositionRecord rec;
  rec.context.assign(w * d, 0.0);
  for (std::size_t slot = 0; slot < w; ++slot) {
    // slot w-1 holds the current token; earlier slots hold older tokens
    const std::size_t back = w - 1 - slot;
    if (back > pos) continue;
    const int tok = tokens[pos - back];
    if (tok < 0 || tok >= spec.vocab_size) {
      throw ValidationError("forward: token id " + std::to_string(tok) + " outside vocabulary of size " +
                            std::to_string(spec.vocab_size));
    }
    const auto row = params.embedding.row(static_cast<std::size_t>(tok));
    std::copy(row.begin(), row.end(), rec.context.begin() + static_cast<std::ptrdiff_t>(slot * d));
  }

  std::vector<double> x = vec_mat(rec.context, params.mixer);
  rec.layers.reserve(static_cast<std::size_t>(spec.n_layers));
  for (int l = 0; l < spec.n_layers; ++l) {
    const auto& lw = params.layers[static_cast<std::size_t>(l)];
    LayerRecord lr;
    lr.input = x;
    lr.routing = route(params, l, x);
    lr.active.reserve(static_cast<std::size_t>(spec.n_shared + spec.top_k));
    for (int s = 0; s < spec.n_shared; ++s) {
      lr.active.push_back(run_expert(lw.experts[static_cast<std::size_t>(s)], lr.input, l, s, 1.0, mask));
    }
    for (std::size_t k = 0; k < lr.routing.experts.size(); ++k) {
      const int e = spec.n_shared + lr.routing.experts[k];
      lr.active.push_back(run_expert(lw.experts[static_cast<std::size_t>(e)], lr.input, l, e, lr.routing.weights[k], mask));
    }
    for (const auto& a : lr.active) {
      for (std::size_t c = 0; c < d; ++c) x[c] += a.gate * a.output[c];
    }
    rec.layers.push_back(std::move(lr));
  }
  rec.final_hidden = x;
  rec.logits = vec_mat(x, params.unembedding);
  return rec;
}

ForwardRecord forward(const ModelParams& params, std::span<const int> tokens, const MaskSpec& mask) {
  if (tokens.empty()) throw ValidationError("forward: empty token sequence");
  params.validate_shapes();
  for (const auto& r : mask.neurons) {
    if (!in_bounds(params.spec, r)) throw ValidationError("forward: mask entry out of bounds");
  }
  ForwardRecord out;
  out.positions.reserve(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) out.positions.push_back(forward_position(params, tokens, t, mask));
  return out;
}

std::vector<double> next_logits(const ModelParams& params, std::span<const int> tokens, const MaskSpec& mask) {
  if (tokens.empty()) throw ValidationError("next_logits: empty token sequence");
  return forward_position(params, tokens, tokens.size() - 1, mask).logits;
}

std::vector<int> greedy_decode(const ModelParams& params, std::span<const int> prompt, int max_len,
                               const MaskSpec& mask) {
  if (prompt.empty()) throw ValidationError("greedy_decode: empty prompt");
  if (max_len < 1) throw ValidationError("greedy_decode: max_len must be >= 1");
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> out;
  for (int step = 0; step < max_len; ++step) {
    const int next = argmax(next_logits(params, seq, mask));
    out.push_back(next);
    if (next == kEosToken) break;
    seq.push_back(next);
  }
  return out;
}

}  // namespace moemui
