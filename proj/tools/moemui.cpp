// moemui: command-line driver for the utilization toolkit.
//
// Exit codes: 0 success, 1 validation / usage error, 2 I/O error.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#if __has_include(<CLI11.hpp>)
#include <CLI11.hpp>
#else
#include <CLI/CLI.hpp>
#endif
#include <nlohmann/json.hpp>

#include "moemui/attribution.hpp"
#include "moemui/checkpoint.hpp"
#include "moemui/errors.hpp"
#include "moemui/format.hpp"
#include "moemui/interventions.hpp"
#include "moemui/metrics.hpp"
#include "moemui/model.hpp"
#include "moemui/parallel.hpp"
#include "moemui/stats.hpp"
#include "moemui/tasks.hpp"
#include "moemui/trace_io.hpp"
#include "moemui/trainer.hpp"

#ifndef MOEMUI_VERSION
#define MOEMUI_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using namespace moemui;

namespace {

struct Common {
  std::string format = "table";
  std::string out;
  std::uint64_t seed = 0;
};

struct TaskArg {
  std::string name;
  TaskKind kind = TaskKind::CopyLast;
  std::string domain;
};

// name:kind[:domain], domain defaults to the name
TaskArg parse_task_arg(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
  if (parts.size() < 2 || parts.size() > 3 || parts[0].empty()) {
    throw ValidationError("task '" + text + "': expected name:kind[:domain]");
  }
  return {parts[0], parse_task_kind(parts[1]), parts.size() == 3 ? parts[2] : parts[0]};
}

struct TaskData {
  std::string name;
  std::vector<Example> examples;
};

std::vector<TaskData> make_tasks(const std::vector<std::string>& specs, int samples, int seq_len, std::uint64_t seed,
                                 int vocab_size) {
  if (specs.empty()) throw ValidationError("at least one --task is required");
  std::vector<TaskData> out;
  std::set<std::string> names;
  for (const auto& s : specs) {
    const auto t = parse_task_arg(s);
    if (!names.insert(t.name).second) throw ValidationError("duplicate task name '" + t.name + "'");
    out.push_back({t.name, generate_task({t.kind, t.domain, samples, seq_len, seed}, vocab_size)});
  }
  return out;
}

// Flag-level checks that need no files.
void check_task_args(const std::vector<std::string>& specs) {
  if (specs.empty()) throw ValidationError("at least one --task is required");
  for (const auto& s : specs) parse_task_arg(s);
}

ScoreMethod parse_method(const std::string& s) { return parse_score_method(s); }

std::vector<double> parse_doubles(const std::string& text, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(text);
  for (std::string p; std::getline(ss, p, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(p, &used));
      if (used != p.size()) throw std::invalid_argument(p);
    } catch (const std::exception&) {
      throw ValidationError(what + ": '" + p + "' is not a number");
    }
  }
  if (out.empty()) throw ValidationError(what + ": empty list");
  return out;
}

// Records the resolved flags of a subcommand.
ojson resolved_flags(const CLI::App& sub) {
  ojson flags = ojson::object();
  for (const auto* opt : sub.get_options()) {
    if (opt->get_name() == "--help" || opt->get_name().empty()) continue;
    std::string key = opt->get_name();
    while (!key.empty() && key.front() == '-') key.erase(key.begin());
    if (opt->count() > 0) {
      const auto& res = opt->results();
      if (opt->get_expected_max() > 1 || res.size() > 1) {
        flags[key] = res;
      } else if (opt->get_type_size() == 0) {
        flags[key] = true;
      } else {
        flags[key] = res.empty() ? "" : res.front();
      }
    } else if (!opt->get_default_str().empty()) {
      flags[key] = opt->get_default_str();
    } else {
      flags[key] = nullptr;
    }
  }
  return flags;
}

struct Manifest {
  std::string subcommand;
  ojson flags;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::uint64_t seed = 0;

  void write(const fs::path& path) const {
    ojson j;
    j["kind"] = "run_manifest";
    j["subcommand"] = subcommand;
    j["flags"] = flags;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["seed"] = seed;
    j["toolkit_version"] = MOEMUI_VERSION;
    j["created"] = utc_timestamp();
    write_file_atomic(path, j.dump(2) + "\n");
  }
};

fs::path manifest_path_for(const fs::path& out) {
  if (fs::is_directory(out)) return out / "manifest.json";
  return fs::path(out.string() + ".manifest.json");
}

// Prints a report and, when --out is set, stores it next to its manifest.
void emit(const Common& c, Manifest& m, const std::string& table, const ojson& structured) {
  const std::string text = c.format == "structured" ? structured.dump(2) + "\n" : table;
  std::cout << text;
  if (!c.out.empty()) {
    write_file_atomic(c.out, text);
    m.outputs.push_back(c.out);
    m.write(manifest_path_for(c.out));
  }
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

std::string expert_name(const ExpertRef& e, const ModelSpec& spec) {
  return "L" + std::to_string(e.layer) + (spec.is_shared(e.expert) ? ".S" : ".R") + std::to_string(e.expert);
}

MergedTraces load_traces(const std::vector<std::string>& files, Manifest& m) {
  if (files.empty()) throw ValidationError("at least one --traces file is required");
  std::vector<fs::path> paths(files.begin(), files.end());
  m.inputs.insert(m.inputs.end(), files.begin(), files.end());
  return merge_traces(paths);
}

void check_checkpoint_matches(const std::string& checkpoint, const MergedTraces& merged, Manifest& m) {
  if (checkpoint.empty()) return;
  m.inputs.push_back(checkpoint);
  const auto fp = fingerprint(load_checkpoint(checkpoint));
  if (fp != merged.header.model_fingerprint) {
    throw ValidationError("trace fingerprint " + merged.header.model_fingerprint + " does not match checkpoint " +
                          checkpoint + " (" + fp + ")");
  }
}

// ---------------------------------------------------------------------------

struct InitArgs {
  int layers = 2, shared = 1, routed = 8, top_k = 2, neurons = 32, d_model = 16, vocab = 33, context = 3;
};

int cmd_init(const InitArgs& a, const Common& c, Manifest& m) {
  if (c.out.empty()) throw ValidationError("init: --out is required");
  ModelSpec spec{a.layers, a.routed, a.shared, a.top_k, a.neurons, a.d_model, a.vocab, a.context, c.seed};
  const auto params = init_model(spec);
  save_checkpoint(params, c.out);
  m.outputs.push_back(c.out);
  m.write(manifest_path_for(c.out));
  std::cout << "wrote " << c.out << " (" << spec.total_neurons() << " expert neurons, fingerprint "
            << fingerprint(params) << ")\n";
  return 0;
}

struct TrainArgs {
  std::string checkpoint;
  std::vector<std::string> tasks;
  int samples = 64, seq_len = 3, steps = 2000, batch = 8, checkpoint_every = 100;
  double lr = 0.02, aux_alpha = 0.01;
};

int cmd_train(const TrainArgs& a, const Common& c, Manifest& m) {
  if (a.checkpoint.empty()) throw ValidationError("train: --checkpoint is required");
  if (c.out.empty()) throw ValidationError("train: --out directory is required");
  check_task_args(a.tasks);
  const auto params = load_checkpoint(a.checkpoint);
  m.inputs.push_back(a.checkpoint);
  std::vector<Example> data;
  for (auto& t : make_tasks(a.tasks, a.samples, a.seq_len, c.seed, params.spec.vocab_size)) {
    data.insert(data.end(), t.examples.begin(), t.examples.end());
  }
  TrainConfig cfg;
  cfg.learning_rate = a.lr;
  cfg.steps = a.steps;
  cfg.batch_size = a.batch;
  cfg.aux_alpha = a.aux_alpha;
  cfg.checkpoint_every = a.checkpoint_every;
  cfg.seed = c.seed;
  cfg.out_dir = c.out;
  const auto result = train(params, data, cfg);
  for (const auto& s : result.checkpoints) m.outputs.push_back(s.file.string());
  m.outputs.push_back((fs::path(c.out) / "train_log.jsonl").string());
  m.write(fs::path(c.out) / "manifest.json");
  const auto& last = result.log.back();
  std::cout << "steps " << last.step << "  loss " << format_number(last.loss) << "  aux " << format_number(last.aux_loss)
            << "  accuracy " << format_number(last.eval_acc) << "  checkpoints " << result.checkpoints.size() << "\n";
  if (result.diverged) {
    std::cerr << "error: training diverged: " << result.message << "\n";
    return 1;
  }
  return 0;
}

struct TraceArgs {
  std::string checkpoint;
  std::vector<std::string> tasks;
  int samples = 32, seq_len = 3, max_len = 1;
  std::string method = "gate";
  double permille = 1.0;
  bool no_route_log = false;
};

int cmd_trace(const TraceArgs& a, const Common& c, Manifest& m) {
  if (a.checkpoint.empty()) throw ValidationError("trace: --checkpoint is required");
  if (c.out.empty()) throw ValidationError("trace: --out is required");
  const ThresholdPolicy policy{a.permille};
  policy.validate();
  const auto method = parse_method(a.method);
  check_task_args(a.tasks);
  const auto params = load_checkpoint(a.checkpoint);
  m.inputs.push_back(a.checkpoint);
  const auto fp = fingerprint(params);

  TraceFileHeader header;
  header.model_fingerprint = fp;
  header.spec = SpecEcho::from(params.spec);
  header.method = method;
  header.permille = a.permille;
  header.created = utc_timestamp();

  std::vector<TraceRecord> records;
  for (const auto& t : make_tasks(a.tasks, a.samples, a.seq_len, c.seed, params.spec.vocab_size)) {
    std::vector<SampleTrace> traces(t.examples.size());
    parallel_for(traces.size(), [&](std::size_t i) {
      traces[i] = trace_greedy(params, t.examples[i].prompt, a.max_len, method, policy,
                               {t.name + "-" + std::to_string(i), t.name, fp});
    });
    for (const auto& tr : traces) records.push_back(to_record(tr, !a.no_route_log));
  }
  write_traces(header, records, c.out);
  m.outputs.push_back(c.out);
  m.write(manifest_path_for(c.out));
  std::cout << "wrote " << records.size() << " traces to " << c.out << "\n";
  return 0;
}

struct ReportArgs {
  std::vector<std::string> traces;
  std::string checkpoint;
  double eta = 0.6;
  int top = 10;
};

int cmd_mui(const ReportArgs& a, const Common& c, Manifest& m) {
  const auto merged = load_traces(a.traces, m);
  check_checkpoint_matches(a.checkpoint, merged, m);
  const auto spec = merged.header.spec.to_model_spec();
  std::string table;
  ojson j = ojson::array();
  for (const auto& [task, set] : merged.tasks) {
    const double v = mui(set, spec, merged.header.model_fingerprint);
    table += task + "\t" + format_number(v) + "\n";
    j.push_back({{"task", task}, {"samples", set.traces.size()}, {"mui", v}});
  }
  emit(c, m, table, {{"kind", "mui"}, {"method", to_string(merged.header.method)}, {"permille", merged.header.permille},
                     {"tasks", j}});
  return 0;
}

int cmd_experts(const ReportArgs& a, const Common& c, Manifest& m) {
  if (a.top < 1) throw ValidationError("experts: --top must be >= 1");
  const auto merged = load_traces(a.traces, m);
  check_checkpoint_matches(a.checkpoint, merged, m);
  const auto spec = merged.header.spec.to_model_spec();
  std::string table;
  ojson reports = ojson::array();
  for (const auto& [task, set] : merged.tasks) {
    const auto report = utilization_report(set, spec, a.eta);
    const auto keys = key_experts(set, a.eta);
    const auto ranked = top_experts(set, static_cast<std::size_t>(a.top), spec);
    std::vector<std::string> key_names;
    for (const auto& e : keys) key_names.push_back(expert_name(e, spec));
    table += "task " + task + "  samples " + std::to_string(report.samples) + "  mui " + format_number(report.mui) +
             "  key_expert_proportion " + format_number(report.key_expert_proportion) + " (eta " +
             format_number(a.eta) + ")\n";
    table += "key experts: " + (key_names.empty() ? std::string("(none)") : join(key_names, " ")) + "\n";
    table += "rank\texpert\tfrequency\texpert_mui\n";
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      table += std::to_string(r + 1) + "\t" + expert_name(ranked[r].expert, spec) + "\t" +
               format_number(ranked[r].frequency) + "\t" + format_number(ranked[r].expert_mui) + "\n";
    }
    table += "\n";
    auto j = report_json(report);
    ojson key_list = ojson::array();
    for (const auto& e : keys) key_list.push_back({e.layer, e.expert});
    j["key_experts"] = std::move(key_list);
    j["top_experts"] = report_json(ranked, task)["experts"];
    reports.push_back(std::move(j));
  }
  emit(c, m, table, {{"kind", "experts"}, {"reports", reports}});
  return 0;
}

struct EnrichArgs {
  ReportArgs report;
  std::string table;
};

int cmd_enrich(const EnrichArgs& a, const Common& c, Manifest& m) {
  EnrichmentResult r;
  if (!a.table.empty()) {
    if (!a.report.traces.empty()) throw ValidationError("enrich: --table and --traces are mutually exclusive");
    const auto v = parse_doubles(a.table, "--table");
    if (v.size() != 4) throw ValidationError("--table expects a,b,c,d");
    std::uint64_t cells[4];
    for (int i = 0; i < 4; ++i) {
      if (v[i] < 0 || v[i] != static_cast<double>(static_cast<std::uint64_t>(v[i]))) {
        throw ValidationError("--table cells must be non-negative integers");
      }
      cells[i] = static_cast<std::uint64_t>(v[i]);
    }
    r.table = {cells[0], cells[1], cells[2], cells[3]};
    r.odds_ratio = odds_ratio(r.table);
    r.fisher = fisher_exact_two_sided(r.table);
  } else {
    const auto merged = load_traces(a.report.traces, m);
    check_checkpoint_matches(a.report.checkpoint, merged, m);
    const auto spec = merged.header.spec.to_model_spec();
    std::vector<TaskKeySet> sets;
    for (const auto& [task, set] : merged.tasks) sets.push_back({task, key_experts(set, a.report.eta)});
    r = enrichment(sets, shared_experts(spec), expert_universe(spec));
  }
  const std::string odds = !r.odds_ratio ? "undefined" : format_number(*r.odds_ratio);
  std::string table;
  if (!r.tasks.empty()) table += "tasks\t" + join(r.tasks, ",") + "\n";
  table += "table\t" + std::to_string(r.table.a) + "," + std::to_string(r.table.b) + "," + std::to_string(r.table.c) +
           "," + std::to_string(r.table.d) + "\n";
  table += "odds_ratio\t" + odds + "\n";
  table += "p_two_sided\t" + format_number(r.fisher.p) + "\n";
  table += "log10_p\t" + format_number(r.fisher.log10_p) + "\n";
  if (r.fisher.degenerate) {
    std::cerr << "warning: degenerate table (a zero row or column margin); p reported as 1\n";
  }
  emit(c, m, table, report_json(r));
  return 0;
}

struct SweepArgs {
  std::string checkpoint;
  std::vector<std::string> tasks;
  std::string source;
  std::string method = "gate";
  std::string grid = "0.5,1,2";
  int baselines = 10, samples = 32, seq_len = 3;
};

int cmd_mask_sweep(const SweepArgs& a, const Common& c, Manifest& m) {
  if (a.checkpoint.empty()) throw ValidationError("mask-sweep: --checkpoint is required");
  check_task_args(a.tasks);
  const auto params = load_checkpoint(a.checkpoint);
  m.inputs.push_back(a.checkpoint);
  std::map<std::string, std::vector<Example>> data;
  for (auto& t : make_tasks(a.tasks, a.samples, a.seq_len, c.seed, params.spec.vocab_size)) {
    data[t.name] = std::move(t.examples);
  }
  const std::string source = a.source.empty() ? data.begin()->first : a.source;
  MaskSweepConfig cfg;
  cfg.permille_grid = parse_doubles(a.grid, "--grid");
  cfg.random_baselines = a.baselines;
  cfg.seed = c.seed;
  const auto table = mask_sweep(params, data, source, parse_method(a.method), cfg);

  ojson rows = ojson::array();
  for (const auto& row : table.rows) {
    ojson r{{"permille", row.permille}, {"n_masked", row.mask_size}};
    for (std::size_t t = 0; t < table.eval_tasks.size(); ++t) {
      r["tasks"][table.eval_tasks[t]] = {{"masked", row.masked_accuracy[t]},
                                        {"random_mean", row.random[t].mean},
                                        {"random_min", row.random[t].min},
                                        {"random_max", row.random[t].max}};
    }
    rows.push_back(std::move(r));
  }
  ojson unmasked = ojson::object();
  for (std::size_t t = 0; t < table.eval_tasks.size(); ++t) unmasked[table.eval_tasks[t]] = table.unmasked_accuracy[t];
  emit(c, m, format_sweep_table(table),
       {{"kind", "mask_sweep"}, {"source_task", table.source_task}, {"unmasked", unmasked}, {"rows", rows}});
  return 0;
}

struct DiversityArgs {
  std::vector<std::string> traces;
  std::string domains = "1,2,3";
  int samples_per_mixture = 0, repeats = 10;
};

int cmd_diversity(const DiversityArgs& a, const Common& c, Manifest& m) {
  const auto merged = load_traces(a.traces, m);
  const auto spec = merged.header.spec.to_model_spec();
  DiversityConfig cfg;
  for (double d : parse_doubles(a.domains, "--domains")) cfg.domain_counts.push_back(static_cast<int>(d));
  cfg.samples_per_mixture = a.samples_per_mixture;
  if (cfg.samples_per_mixture == 0) {
    // largest count every requested mixture can fill
    std::size_t smallest = SIZE_MAX;
    for (const auto& [task, set] : merged.tasks) smallest = std::min(smallest, set.traces.size());
    cfg.samples_per_mixture = static_cast<int>(smallest);
  }
  cfg.repeats = a.repeats;
  cfg.seed = c.seed;
  const auto rows = diversity_report(merged.tasks, cfg, spec);
  std::string table = "domains\tsamples\tmui\tactivated_expert_proportion\n";
  ojson j = ojson::array();
  for (const auto& r : rows) {
    table += std::to_string(r.domains) + "\t" + std::to_string(r.samples) + "\t" + format_number(r.mui) + "\t" +
             format_number(r.activated_expert_proportion) + "\n";
    j.push_back({{"domains", r.domains}, {"samples", r.samples}, {"mui", r.mui},
                 {"activated_expert_proportion", r.activated_expert_proportion}});
  }
  emit(c, m, table, {{"kind", "diversity"}, {"repeats", cfg.repeats}, {"rows", j}});
  return 0;
}

struct PhasesArgs {
  std::vector<std::string> points;
  std::string series;
  std::string run_dir;
  std::vector<std::string> tasks;
  std::string method = "gate";
  double permille = 1.0;
  int samples = 32, seq_len = 3, max_len = 1;
  double epsilon = 0.001;
};

PhasePoint parse_point(const std::string& text) {
  const auto v = parse_doubles(text, "series point");
  if (v.size() != 2) throw ValidationError("series point '" + text + "': expected performance,mui");
  return {v[0], v[1]};
}

int cmd_phases(const PhasesArgs& a, const Common& c, Manifest& m) {
  const int sources = !a.points.empty() + !a.series.empty() + !a.run_dir.empty();
  if (sources != 1) throw ValidationError("phases: give exactly one of --point, --series, --run-dir");
  std::vector<PhasePoint> series;
  std::vector<int> steps;
  if (!a.points.empty()) {
    for (const auto& p : a.points) series.push_back(parse_point(p));
  } else if (!a.series.empty()) {
    m.inputs.push_back(a.series);
    std::stringstream ss(read_file(a.series));
    for (std::string line; std::getline(ss, line);) {
      line.erase(0, line.find_first_not_of(" \t"));
      if (line.empty() || line.front() == '#') continue;
      series.push_back(parse_point(line));
    }
  } else {
    // training run: accuracy and MUI at every checkpoint of the directory
    check_task_args(a.tasks);
    std::vector<std::pair<int, fs::path>> ckpts;
    const std::regex pattern(R"(ckpt_step(\d+)\.bin)");
    if (!fs::is_directory(a.run_dir)) throw IoError("run directory not found: " + a.run_dir);
    for (const auto& entry : fs::directory_iterator(a.run_dir)) {
      std::smatch match;
      const auto name = entry.path().filename().string();
      if (std::regex_match(name, match, pattern)) ckpts.emplace_back(std::stoi(match[1]), entry.path());
    }
    std::sort(ckpts.begin(), ckpts.end());
    if (ckpts.empty()) throw ValidationError("no checkpoints in " + a.run_dir);
    const auto method = parse_method(a.method);
    for (const auto& [step, path] : ckpts) {
      const auto params = load_checkpoint(path);
      m.inputs.push_back(path.string());
      std::vector<Example> eval;
      std::vector<SampleTrace> traces;
      for (const auto& t : make_tasks(a.tasks, a.samples, a.seq_len, c.seed, params.spec.vocab_size)) {
        std::vector<SampleTrace> part(t.examples.size());
        parallel_for(part.size(), [&](std::size_t i) {
          part[i] = trace_greedy(params, t.examples[i].prompt, a.max_len, method, {a.permille},
                                 {t.name + "-" + std::to_string(i), t.name, "run"});
        });
        traces.insert(traces.end(), part.begin(), part.end());
        eval.insert(eval.end(), t.examples.begin(), t.examples.end());
      }
      series.push_back({accuracy(params, eval), mui(TaskTraceSet::from_traces("eval", traces), params.spec)});
      steps.push_back(step);
    }
  }
  const auto labels = phase_classify(series, a.epsilon);
  std::vector<std::string> names;
  for (auto l : labels) names.emplace_back(to_string(l));

  std::string table;
  if (!steps.empty()) {
    table += "step\tperformance\tmui\tphase\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
      table += std::to_string(steps[i]) + "\t" + format_number(series[i].performance) + "\t" +
               format_number(series[i].mui) + "\t" + (i ? names[i - 1] : std::string("-")) + "\n";
    }
  }
  table += join(names, ", ") + "\n";
  ojson pts = ojson::array();
  for (std::size_t i = 0; i < series.size(); ++i) {
    ojson p{{"performance", series[i].performance}, {"mui", series[i].mui}};
    if (!steps.empty()) p["step"] = steps[i];
    pts.push_back(std::move(p));
  }
  emit(c, m, table, {{"kind", "phases"}, {"epsilon", a.epsilon}, {"series", pts}, {"labels", names}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moemui: neuron-level utilization analysis for mixture-of-experts models"};
  app.set_version_flag("--version", MOEMUI_VERSION);
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub, bool out_required_hint) {
    sub->add_option("--format", common.format, "Output format")->check(CLI::IsMember({"table", "structured"}))
        ->capture_default_str();
    sub->add_option("--out", common.out, out_required_hint ? "Output path" : "Also write the report to this file");
    sub->add_option("--seed", common.seed, "Seed")->capture_default_str();
  };
  const auto methods = CLI::IsMember({"gate", "activation", "glu", "gate_project", "glu_project"});

  InitArgs init;
  auto* s_init = app.add_subcommand("init", "Create a randomly initialized toy MoE checkpoint");
  s_init->add_option("--layers", init.layers)->capture_default_str();
  s_init->add_option("--shared", init.shared, "Shared experts per layer")->capture_default_str();
  s_init->add_option("--routed", init.routed, "Routed experts per layer")->capture_default_str();
  s_init->add_option("--top-k", init.top_k)->capture_default_str();
  s_init->add_option("--neurons", init.neurons, "Intermediate neurons per expert")->capture_default_str();
  s_init->add_option("--d-model", init.d_model)->capture_default_str();
  s_init->add_option("--vocab", init.vocab)->capture_default_str();
  s_init->add_option("--context", init.context, "Context window")->capture_default_str();
  add_common(s_init, true);

  TrainArgs tr;
  auto* s_train = app.add_subcommand("train", "Train a checkpoint on synthetic tasks");
  s_train->add_option("--checkpoint", tr.checkpoint, "Initial checkpoint");
  s_train->add_option("--task", tr.tasks, "name:kind[:domain]; kinds copy-last, modular-add, domain-tagged-grammar");
  s_train->add_option("--samples", tr.samples, "Samples per task")->capture_default_str();
  s_train->add_option("--seq-len", tr.seq_len)->capture_default_str();
  s_train->add_option("--steps", tr.steps)->capture_default_str();
  s_train->add_option("--batch", tr.batch)->capture_default_str();
  s_train->add_option("--lr", tr.lr)->capture_default_str();
  s_train->add_option("--aux-alpha", tr.aux_alpha, "Load-balancing loss weight")->capture_default_str();
  s_train->add_option("--checkpoint-every", tr.checkpoint_every)->capture_default_str();
  add_common(s_train, true);

  TraceArgs ta;
  auto* s_trace = app.add_subcommand("trace", "Trace key neurons of greedy responses");
  s_trace->add_option("--checkpoint", ta.checkpoint);
  s_trace->add_option("--task", ta.tasks, "name:kind[:domain]");
  s_trace->add_option("--samples", ta.samples, "Samples per task")->capture_default_str();
  s_trace->add_option("--seq-len", ta.seq_len)->capture_default_str();
  s_trace->add_option("--max-len", ta.max_len, "Greedy response length cap")->capture_default_str();
  s_trace->add_option("--method", ta.method)->check(methods)->capture_default_str();
  s_trace->add_option("--permille", ta.permille, "Per-layer selection threshold")->capture_default_str();
  s_trace->add_flag("--no-route-log", ta.no_route_log, "Omit per-token routing from records");
  add_common(s_trace, true);

  ReportArgs ra;
  auto* s_mui = app.add_subcommand("mui", "Model utilization index per task");
  s_mui->add_option("--traces", ra.traces, "Trace files (merged)");
  s_mui->add_option("--checkpoint", ra.checkpoint, "Verify traces against this checkpoint");
  auto* mui_eta = s_mui->add_option("--eta-expert", ra.eta, "Not valid here");
  add_common(s_mui, false);

  auto* s_exp = app.add_subcommand("experts", "Key experts, frequencies and per-expert MUI");
  s_exp->add_option("--traces", ra.traces);
  s_exp->add_option("--checkpoint", ra.checkpoint, "Verify traces against this checkpoint");
  s_exp->add_option("--eta-expert", ra.eta, "Key-expert frequency threshold")->capture_default_str();
  s_exp->add_option("--top", ra.top, "Experts to list per task")->capture_default_str();
  add_common(s_exp, false);

  EnrichArgs ea;
  auto* s_enr = app.add_subcommand("enrich", "Shared-expert enrichment among common key experts (Fisher exact)");
  s_enr->add_option("--traces", ea.report.traces);
  s_enr->add_option("--checkpoint", ea.report.checkpoint, "Verify traces against this checkpoint");
  s_enr->add_option("--eta-expert", ea.report.eta)->capture_default_str();
  s_enr->add_option("--table", ea.table, "Test a 2x2 table a,b,c,d directly");
  add_common(s_enr, false);

  SweepArgs sa;
  auto* s_sweep = app.add_subcommand("mask-sweep", "Mask key neurons of a task and compare against random masks");
  s_sweep->add_option("--checkpoint", sa.checkpoint);
  s_sweep->add_option("--task", sa.tasks, "name:kind[:domain]; every task is evaluated");
  s_sweep->add_option("--source", sa.source, "Task whose key neurons are masked (default: first by name)");
  s_sweep->add_option("--method", sa.method)->check(methods)->capture_default_str();
  s_sweep->add_option("--grid", sa.grid, "Permille grid, ascending")->capture_default_str();
  s_sweep->add_option("--baselines", sa.baselines, "Random masks per grid point")->capture_default_str();
  s_sweep->add_option("--samples", sa.samples, "Samples per task")->capture_default_str();
  s_sweep->add_option("--seq-len", sa.seq_len)->capture_default_str();
  add_common(s_sweep, false);

  DiversityArgs da;
  auto* s_div = app.add_subcommand("diversity", "MUI of mixtures over 1..n domains (tasks in the traces)");
  s_div->add_option("--traces", da.traces);
  s_div->add_option("--domains", da.domains, "Mixture sizes")->capture_default_str();
  s_div->add_option("--samples-per-mixture", da.samples_per_mixture, "0: smallest domain size")->capture_default_str();
  s_div->add_option("--repeats", da.repeats)->capture_default_str();
  add_common(s_div, false);

  PhasesArgs pa;
  auto* s_ph = app.add_subcommand("phases", "Label training phases from (performance, MUI) series");
  s_ph->add_option("--point", pa.points, "performance,mui (repeatable, in order)");
  s_ph->add_option("--series", pa.series, "File with one performance,mui pair per line");
  s_ph->add_option("--run-dir", pa.run_dir, "Training output directory; evaluates every checkpoint");
  s_ph->add_option("--task", pa.tasks, "Evaluation tasks for --run-dir");
  s_ph->add_option("--method", pa.method)->check(methods)->capture_default_str();
  s_ph->add_option("--permille", pa.permille)->capture_default_str();
  s_ph->add_option("--samples", pa.samples)->capture_default_str();
  s_ph->add_option("--seq-len", pa.seq_len)->capture_default_str();
  s_ph->add_option("--max-len", pa.max_len)->capture_default_str();
  s_ph->add_option("--epsilon", pa.epsilon, "Minimum change counted as a move")->capture_default_str();
  add_common(s_ph, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  Manifest manifest{sub->get_name(), resolved_flags(*sub), {}, {}, common.seed};
  try {
    if (sub == s_init) return cmd_init(init, common, manifest);
    if (sub == s_train) return cmd_train(tr, common, manifest);
    if (sub == s_trace) return cmd_trace(ta, common, manifest);
    if (sub == s_mui) {
      if (mui_eta->count() > 0) {
        throw ValidationError("--eta-expert has no effect on mui (MUI counts neurons, not key experts); use experts");
      }
      return cmd_mui(ra, common, manifest);
    }
    if (sub == s_exp) return cmd_experts(ra, common, manifest);
    if (sub == s_enr) return cmd_enrich(ea, common, manifest);
    if (sub == s_sweep) return cmd_mask_sweep(sa, common, manifest);
    if (sub == s_div) return cmd_diversity(da, common, manifest);
    if (sub == s_ph) return cmd_phases(pa, common, manifest);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
