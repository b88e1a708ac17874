#include "moemui/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <nlohmann/json.hpp>
#include <numeric>

#include "moemui/checkpoint.hpp"
#include "moemui/errors.hpp"
#include "moemui/rng.hpp"

namespace moemui {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ValidationError("train: learning rate must be finite and >= 0");
  }
  if (steps < 1) throw ValidationError("train: steps must be >= 1");
  if (batch_size < 1) throw ValidationError("train: batch size must be >= 1");
  if (!(aux_alpha >= 0.0)) throw ValidationError("train: aux coefficient must be >= 0");
  if (checkpoint_every < 1) throw ValidationError("train: checkpoint interval must be >= 1");
}

namespace {

struct Item {
  std::vector<int> tokens;  // prompt followed by the teacher-forced target prefix
  std::size_t position = 0;
  int target = 0;
};

std::vector<Item> expand(std::span<const Example> batch) {
  std::vector<Item> items;
  for (const auto& ex : batch) {
    if (ex.prompt.empty() || ex.target.empty()) throw ValidationError("loss: example with empty prompt or target");
    std::vector<int> seq = ex.prompt;
    seq.insert(seq.end(), ex.target.begin(), ex.target.end() - 1);
    for (std::size_t k = 0; k < ex.target.size(); ++k) {
      items.push_back({seq, ex.prompt.size() - 1 + k, ex.target[k]});
    }
  }
  return items;
}

// log-sum-exp minus the target logit; also returns softmax probabilities.
double cross_entropy(std::span<const double> logits, int target, std::vector<double>* probs) {
  const double top = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - top);
  if (probs) {
    probs->resize(logits.size());
    for (std::size_t v = 0; v < logits.size(); ++v) (*probs)[v] = std::exp(logits[v] - top) / sum;
  }
  return top + std::log(sum) - logits[static_cast<std::size_t>(target)];
}

struct ForwardPass {
  std::vector<Item> items;
  std::vector<PositionRecord> records;
  std::vector<std::vector<double>> assign_share;  // [layer][routed] f_i
  LossBreakdown value;
};

ForwardPass run_forward(const ModelParams& params, std::span<const Example> batch, double aux_alpha) {
  if (batch.empty()) throw ValidationError("loss: empty batch");
  const auto& spec = params.spec;
  ForwardPass fp;
  fp.items = expand(batch);
  const double count = static_cast<double>(fp.items.size());
  fp.records.reserve(fp.items.size());

  fp.assign_share.assign(static_cast<std::size_t>(spec.n_layers), std::vector<double>(spec.n_routed, 0.0));
  std::vector<std::vector<double>> mean_prob = fp.assign_share;
  double ce = 0.0;
  for (const auto& item : fp.items) {
    if (item.target < 0 || item.target >= spec.vocab_size) throw ValidationError("loss: target token out of vocabulary");
    auto rec = forward_position(params, item.tokens, item.position);
    ce += cross_entropy(rec.logits, item.target, nullptr);
    for (int l = 0; l < spec.n_layers; ++l) {
      const auto& routing = rec.layers[static_cast<std::size_t>(l)].routing;
      for (int e : routing.experts) fp.assign_share[static_cast<std::size_t>(l)][static_cast<std::size_t>(e)] += 1.0;
      for (int e = 0; e < spec.n_routed; ++e) {
        mean_prob[static_cast<std::size_t>(l)][static_cast<std::size_t>(e)] += routing.full_probs[static_cast<std::size_t>(e)];
      }
    }
    fp.records.push_back(std::move(rec));
  }

  double aux = 0.0;
  for (int l = 0; l < spec.n_layers; ++l) {
    double layer_aux = 0.0;
    for (int e = 0; e < spec.n_routed; ++e) {
      auto& f = fp.assign_share[static_cast<std::size_t>(l)][static_cast<std::size_t>(e)];
      f /= count * spec.top_k;
      layer_aux += f * mean_prob[static_cast<std::size_t>(l)][static_cast<std::size_t>(e)] / count;
    }
    aux += spec.n_routed * layer_aux;
  }
  fp.value.cross_entropy = ce / count;
  fp.value.aux = aux / spec.n_layers;
  fp.value.loss = fp.value.cross_entropy + aux_alpha * fp.value.aux;
  return fp;
}

bool all_finite(const ModelParams& p) {
  auto ok = [](const Matrix& m) {
    return std::all_of(m.data().begin(), m.data().end(), [](double v) { return std::isfinite(v); });
  };
  if (!ok(p.embedding) || !ok(p.mixer) || !ok(p.unembedding)) return false;
  for (const auto& layer : p.layers) {
    if (!ok(layer.router)) return false;
    for (const auto& e : layer.experts) {
      if (!ok(e.w_up) || !ok(e.w_gate) || !ok(e.w_down)) return false;
    }
  }
  return true;
}

}  // namespace

LossBreakdown evaluate_loss(const ModelParams& params, std::span<const Example> batch, double aux_alpha) {
  return run_forward(params, batch, aux_alpha).value;
}

LossAndGrads loss_and_grads(const ModelParams& params, std::span<const Example> batch, double aux_alpha) {
  params.validate_shapes();
  const auto& spec = params.spec;
  auto fp = run_forward(params, batch, aux_alpha);
  if (!std::isfinite(fp.value.loss)) throw DivergenceError("loss is not finite");

  LossAndGrads out{fp.value, ModelParams::zeros(spec)};
  auto& g = out.grads;
  const auto d = static_cast<std::size_t>(spec.d_model);
  const auto n = static_cast<std::size_t>(spec.n_neurons);
  const auto w = static_cast<std::size_t>(spec.context_window);
  const double inv_count = 1.0 / static_cast<double>(fp.items.size());
  const double aux_scale = aux_alpha * spec.n_routed * inv_count / spec.n_layers;

  std::vector<double> probs, dlogits(static_cast<std::size_t>(spec.vocab_size));
  std::vector<double> dx(d), dx_in(d), dout(d), dh(n), da(n), db(n);
  std::vector<double> dgate(static_cast<std::size_t>(spec.top_k)), dprob(static_cast<std::size_t>(spec.n_routed));
  std::vector<double> drouter(static_cast<std::size_t>(spec.n_routed));
  std::vector<double> dcontext(w * d);

  for (std::size_t it = 0; it < fp.items.size(); ++it) {
    const auto& item = fp.items[it];
    const auto& rec = fp.records[it];

    cross_entropy(rec.logits, item.target, &probs);
    for (std::size_t v = 0; v < probs.size(); ++v) dlogits[v] = probs[v] * inv_count;
    dlogits[static_cast<std::size_t>(item.target)] -= inv_count;
    outer_acc(rec.final_hidden, dlogits, g.unembedding);
    std::fill(dx.begin(), dx.end(), 0.0);
    mat_vec_acc(params.unembedding, dlogits, dx);

    for (int l = spec.n_layers - 1; l >= 0; --l) {
      const auto& lr = rec.layers[static_cast<std::size_t>(l)];
      const auto& lw = params.layers[static_cast<std::size_t>(l)];
      auto& lg = g.layers[static_cast<std::size_t>(l)];
      dx_in = dx;

      for (std::size_t a_idx = 0; a_idx < lr.active.size(); ++a_idx) {
        const auto& act = lr.active[a_idx];
        const auto e = static_cast<std::size_t>(act.expert);
        if (!spec.is_shared(act.expert)) dgate[a_idx - static_cast<std::size_t>(spec.n_shared)] = dot(act.output, dx);
        for (std::size_t c = 0; c < d; ++c) dout[c] = act.gate * dx[c];
        outer_acc(act.hidden, dout, lg.experts[e].w_down);
        std::fill(dh.begin(), dh.end(), 0.0);
        mat_vec_acc(lw.experts[e].w_down, dout, dh);
        for (std::size_t j = 0; j < n; ++j) {
          da[j] = dh[j] * act.up[j] * silu_grad(act.gate_pre[j]);
          db[j] = dh[j] * silu(act.gate_pre[j]);
        }
        outer_acc(lr.input, da, lg.experts[e].w_gate);
        outer_acc(lr.input, db, lg.experts[e].w_up);
        mat_vec_acc(lw.experts[e].w_gate, da, dx_in);
        mat_vec_acc(lw.experts[e].w_up, db, dx_in);
      }

      // Selected-set softmax: d r_i = G_i (dG_i - sum_j G_j dG_j), zero for unselected experts.
      std::fill(drouter.begin(), drouter.end(), 0.0);
      const auto& routing = lr.routing;
      double weighted = 0.0;
      for (std::size_t k = 0; k < routing.experts.size(); ++k) weighted += routing.weights[k] * dgate[k];
      for (std::size_t k = 0; k < routing.experts.size(); ++k) {
        drouter[static_cast<std::size_t>(routing.experts[k])] += routing.weights[k] * (dgate[k] - weighted);
      }
      // Load-balance term through the full softmax.
      if (aux_alpha != 0.0) {
        const auto& share = fp.assign_share[static_cast<std::size_t>(l)];
        double pdp = 0.0;
        for (std::size_t e = 0; e < dprob.size(); ++e) {
          dprob[e] = aux_scale * share[e];
          pdp += routing.full_probs[e] * dprob[e];
        }
        for (std::size_t e = 0; e < dprob.size(); ++e) drouter[e] += routing.full_probs[e] * (dprob[e] - pdp);
      }
      outer_acc(lr.input, drouter, lg.router);
      mat_vec_acc(lw.router, drouter, dx_in);
      dx = dx_in;
    }

    outer_acc(rec.context, dx, g.mixer);
    std::fill(dcontext.begin(), dcontext.end(), 0.0);
    mat_vec_acc(params.mixer, dx, dcontext);
    for (std::size_t slot = 0; slot < w; ++slot) {
      const std::size_t back = w - 1 - slot;
      if (back > item.position) continue;
      const auto tok = static_cast<std::size_t>(item.tokens[item.position - back]);
      auto row = g.embedding.row(tok);
      for (std::size_t c = 0; c < d; ++c) row[c] += dcontext[slot * d + c];
    }
  }
  return out;
}

double accuracy(const ModelParams& params, std::span<const Example> dataset, const MaskSpec& mask) {
  if (dataset.empty()) throw ValidationError("accuracy: empty dataset");
  std::size_t hits = 0;
  for (const auto& ex : dataset) {
    const auto out = greedy_decode(params, ex.prompt, static_cast<int>(ex.target.size()), mask);
    if (out == ex.target) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(dataset.size());
}

void sgd_step(ModelParams& params, const ModelParams& grads, double learning_rate) {
  auto update = [learning_rate](Matrix& p, const Matrix& gm) {
    auto pd = p.data();
    const auto gd = gm.data();
    for (std::size_t i = 0; i < pd.size(); ++i) pd[i] -= learning_rate * gd[i];
  };
  update(params.embedding, grads.embedding);
  update(params.mixer, grads.mixer);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    update(params.layers[l].router, grads.layers[l].router);
    for (std::size_t e = 0; e < params.layers[l].experts.size(); ++e) {
      auto& pe = params.layers[l].experts[e];
      const auto& ge = grads.layers[l].experts[e];
      update(pe.w_up, ge.w_up);
      update(pe.w_gate, ge.w_gate);
      update(pe.w_down, ge.w_down);
    }
  }
  update(params.unembedding, grads.unembedding);
}

std::string checkpoint_filename(int step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_step%07d.bin", step);
  return buf;
}

std::string format_train_log(std::span<const TrainLogEntry> log) {
  std::string out;
  for (const auto& e : log) {
    nlohmann::ordered_json j;
    j["step"] = e.step;
    j["loss"] = e.loss;
    j["aux_loss"] = e.aux_loss;
    j["eval_acc"] = e.eval_acc;
    out += j.dump();
    out.push_back('\n');
  }
  return out;
}

TrainResult train(ModelParams params, std::span<const Example> dataset, const TrainConfig& config) {
  config.validate();
  if (dataset.empty()) throw ValidationError("train: empty dataset");
  params.validate_shapes();
  if (!config.out_dir.empty()) std::filesystem::create_directories(config.out_dir);

  TrainResult result;
  auto checkpoint = [&](int step, const LossBreakdown& value) {
    Snapshot snap{step, params, {}};
    if (!config.out_dir.empty()) {
      snap.file = config.out_dir / checkpoint_filename(step);
      save_checkpoint(params, snap.file);
    }
    result.checkpoints.push_back(std::move(snap));
    result.log.push_back({step, value.loss, value.aux, accuracy(params, dataset)});
    if (!config.out_dir.empty()) write_file_atomic(config.out_dir / "train_log.jsonl", format_train_log(result.log));
  };

  Rng rng(config.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  std::vector<Example> batch;

  checkpoint(0, evaluate_loss(params, dataset, config.aux_alpha));
  for (int step = 1; step <= config.steps; ++step) {
    batch.clear();
    for (int b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(dataset[order[cursor++]]);
    }
    auto diverge = [&](const std::string& what) {
      result.diverged = true;
      result.message = what + " at step " + std::to_string(step) + "; last good checkpoint is step " +
                       std::to_string(result.checkpoints.back().step);
    };
    LossAndGrads lg;
    try {
      lg = loss_and_grads(params, batch, config.aux_alpha);
    } catch (const Error& e) {
      // non-finite router logits surface as validation errors from the forward pass
      diverge(e.what());
      return result;
    }
    sgd_step(params, lg.grads, config.learning_rate);
    if (!all_finite(params)) {
      diverge("non-finite parameters");
      return result;
    }
    if (step % config.checkpoint_every == 0 || step == config.steps) {
      LossBreakdown value;
      try {
        value = evaluate_loss(params, dataset, config.aux_alpha);
      } catch (const Error& e) {
        diverge(e.what());
        return result;
      }
      checkpoint(step, value);
    }
  }
  return result;
}

}  // namespace moemui
