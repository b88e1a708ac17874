#include "moemui/trace_io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <set>

#include "moemui/checkpoint.hpp"
#include "moemui/errors.hpp"

namespace moemui {

namespace {

using ojson = nlohmann::ordered_json;

[[noreturn]] void fail(std::size_t line, const std::string& what) {
  throw ValidationError("line " + std::to_string(line) + ": " + what);
}

void expect_keys(const ojson& obj, std::initializer_list<const char*> required,
                 std::initializer_list<const char*> optional, std::size_t line, const char* what) {
  if (!obj.is_object()) fail(line, std::string(what) + " is not an object");
  for (const char* k : required) {
    if (!obj.contains(k)) fail(line, std::string(what) + ": missing key '" + k + "'");
  }
  for (const auto& item : obj.items()) {
    const auto& key = item.key();
    const auto known = [&](std::initializer_list<const char*> list) {
      return std::any_of(list.begin(), list.end(), [&](const char* k) { return key == k; });
    };
    if (!known(required) && !known(optional)) fail(line, std::string(what) + ": unknown key '" + key + "'");
  }
}

int get_int(const ojson& v, std::size_t line, const char* what) {
  if (!v.is_number_integer()) fail(line, std::string(what) + " must be an integer");
  const auto x = v.get<std::int64_t>();
  if (x < INT32_MIN || x > INT32_MAX) fail(line, std::string(what) + " out of range");
  return static_cast<int>(x);
}

std::string get_string(const ojson& v, std::size_t line, const char* what) {
  if (!v.is_string()) fail(line, std::string(what) + " must be a string");
  return v.get<std::string>();
}

double get_number(const ojson& v, std::size_t line, const char* what) {
  if (!v.is_number()) fail(line, std::string(what) + " must be a number");
  return v.get<double>();
}

bool is_lower_hex64(const std::string& s) {
  return s.size() == 64 &&
         std::all_of(s.begin(), s.end(), [](char c) { return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'); });
}

std::string describe(const NeuronRef& r) {
  return "[" + std::to_string(r.layer) + ", " + std::to_string(r.expert) + ", " + std::to_string(r.neuron) + "]";
}

ojson header_json(const TraceFileHeader& h) {
  ojson j;
  j["format"] = "moemui-trace";
  j["version"] = h.version;
  j["model_fingerprint"] = h.model_fingerprint;
  ojson s;
  s["n_layers"] = h.spec.n_layers;
  s["n_shared"] = h.spec.n_shared;
  s["n_routed"] = h.spec.n_routed;
  s["n_neurons"] = h.spec.n_neurons;
  s["top_k"] = h.spec.top_k;
  s["vocab_size"] = h.spec.vocab_size;
  j["spec"] = std::move(s);
  j["method"] = std::string(to_string(h.method));
  j["permille"] = h.permille;
  j["created"] = h.created;
  j["producer"] = h.producer;
  return j;
}

ojson record_json(const TraceRecord& r) {
  ojson j;
  j["sample_id"] = r.sample_id;
  j["task"] = r.task;
  ojson neurons = ojson::array();
  for (const auto& n : r.neurons) neurons.push_back({n.layer, n.expert, n.neuron});
  j["neurons"] = std::move(neurons);
  if (r.route_log) {
    ojson log = ojson::array();
    for (const auto& token : *r.route_log) {
      ojson entries = ojson::array();
      for (const auto& e : token) entries.push_back({e.expert.layer, e.expert.expert, e.weight});
      log.push_back(std::move(entries));
    }
    j["route_log"] = std::move(log);
  }
  return j;
}

TraceFileHeader parse_header(const ojson& j) {
  constexpr std::size_t line = 1;
  if (!j.is_object()) fail(line, "header is not an object");
  // Version is checked before the key set so that newer files get a clear message.
  if (!j.contains("version")) fail(line, "header: missing key 'version'");
  const int version = get_int(j.at("version"), line, "version");
  if (version != kTraceFormatVersion) {
    fail(line, "unsupported trace format version " + std::to_string(version) + " (expected " +
                   std::to_string(kTraceFormatVersion) + ")");
  }
  expect_keys(j, {"format", "version", "model_fingerprint", "spec", "method", "permille", "created", "producer"}, {},
              line, "header");
  if (get_string(j.at("format"), line, "format") != "moemui-trace") fail(line, "not a moemui trace file");

  TraceFileHeader h;
  h.version = version;
  h.model_fingerprint = get_string(j.at("model_fingerprint"), line, "model_fingerprint");
  const auto& s = j.at("spec");
  expect_keys(s, {"n_layers", "n_shared", "n_routed", "n_neurons", "top_k", "vocab_size"}, {}, line, "spec");
  h.spec.n_layers = get_int(s.at("n_layers"), line, "n_layers");
  h.spec.n_shared = get_int(s.at("n_shared"), line, "n_shared");
  h.spec.n_routed = get_int(s.at("n_routed"), line, "n_routed");
  h.spec.n_neurons = get_int(s.at("n_neurons"), line, "n_neurons");
  h.spec.top_k = get_int(s.at("top_k"), line, "top_k");
  h.spec.vocab_size = get_int(s.at("vocab_size"), line, "vocab_size");
  try {
    h.method = parse_score_method(get_string(j.at("method"), line, "method"));
  } catch (const ValidationError& e) {
    fail(line, e.what());
  }
  h.permille = get_number(j.at("permille"), line, "permille");
  h.created = get_string(j.at("created"), line, "created");
  h.producer = get_string(j.at("producer"), line, "producer");
  return h;
}

TraceRecord parse_record(const ojson& j, std::size_t line) {
  expect_keys(j, {"sample_id", "task", "neurons"}, {"route_log"}, line, "record");
  TraceRecord r;
  r.sample_id = get_string(j.at("sample_id"), line, "sample_id");
  r.task = get_string(j.at("task"), line, "task");
  const auto& neurons = j.at("neurons");
  if (!neurons.is_array()) fail(line, "neurons must be an array");
  r.neurons.reserve(neurons.size());
  for (const auto& n : neurons) {
    if (!n.is_array() || n.size() != 3) fail(line, "neuron entries must be [layer, expert, neuron] triples");
    r.neurons.push_back({get_int(n[0], line, "layer"), get_int(n[1], line, "expert"), get_int(n[2], line, "neuron")});
  }
  if (j.contains("route_log")) {
    const auto& log = j.at("route_log");
    if (!log.is_array()) fail(line, "route_log must be an array");
    std::vector<std::vector<RouteEntry>> parsed;
    for (const auto& token : log) {
      if (!token.is_array()) fail(line, "route_log entries must be arrays");
      auto& out = parsed.emplace_back();
      for (const auto& e : token) {
        if (!e.is_array() || e.size() != 3) fail(line, "route entries must be [layer, expert, weight] triples");
        out.push_back({{get_int(e[0], line, "layer"), get_int(e[1], line, "expert")}, get_number(e[2], line, "weight")});
      }
    }
    r.route_log = std::move(parsed);
  }
  return r;
}

}  // namespace

SpecEcho SpecEcho::from(const ModelSpec& spec) noexcept {
  return {spec.n_layers, spec.n_shared, spec.n_routed, spec.n_neurons, spec.top_k, spec.vocab_size};
}

ModelSpec SpecEcho::to_model_spec() const {
  ModelSpec s;
  s.n_layers = n_layers;
  s.n_shared = n_shared;
  s.n_routed = n_routed;
  s.n_neurons = n_neurons;
  s.top_k = top_k;
  s.vocab_size = vocab_size;
  s.validate();
  return s;
}

void validate_header(const TraceFileHeader& h) {
  if (h.version != kTraceFormatVersion) {
    throw ValidationError("unsupported trace format version " + std::to_string(h.version));
  }
  if (!is_lower_hex64(h.model_fingerprint)) {
    throw ValidationError("model fingerprint must be 64 lowercase hex characters");
  }
  h.spec.to_model_spec();
  ThresholdPolicy{h.permille}.validate();
  if (h.producer != "engine" && h.producer != "exporter") {
    throw ValidationError("producer must be 'engine' or 'exporter', got '" + h.producer + "'");
  }
}

void validate_record(const TraceFileHeader& header, const TraceRecord& r, std::size_t line) {
  const auto spec = header.spec.to_model_spec();
  const std::string where = "line " + std::to_string(line) + " (sample '" + r.sample_id + "'): ";
  if (r.sample_id.empty()) throw ValidationError(where + "empty sample id");
  if (r.task.empty()) throw ValidationError(where + "empty task name");
  for (std::size_t k = 0; k < r.neurons.size(); ++k) {
    if (!in_bounds(spec, r.neurons[k])) {
      throw ValidationError(where + "neuron index " + std::to_string(k) + " " + describe(r.neurons[k]) +
                            " out of bounds");
    }
    if (k > 0 && !(r.neurons[k - 1] < r.neurons[k])) {
      throw ValidationError(where + "neurons not sorted and unique at index " + std::to_string(k));
    }
  }
  if (r.route_log) {
    for (const auto& token : *r.route_log) {
      for (const auto& e : token) {
        if (!in_bounds(spec, e.expert)) throw ValidationError(where + "route log expert out of bounds");
        if (!(e.weight >= 0.0 && e.weight <= 1.0)) throw ValidationError(where + "route log weight outside [0, 1]");
      }
    }
  }
}

std::string serialize_traces(const TraceFileHeader& header, std::span<const TraceRecord> records) {
  validate_header(header);
  std::string out = header_json(header).dump();
  out.push_back('\n');
  for (std::size_t i = 0; i < records.size(); ++i) {
    validate_record(header, records[i], i + 2);
    out += record_json(records[i]).dump();
    out.push_back('\n');
  }
  return out;
}

TraceFile parse_traces(std::string_view text) {
  TraceFile file;
  std::size_t line = 0;
  std::size_t pos = 0;
  bool have_header = false;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto content = text.substr(pos, end - pos);
    pos = end + 1;
    ++line;
    ojson j;
    try {
      j = ojson::parse(content);
    } catch (const nlohmann::json::exception& e) {
      fail(line, std::string("malformed JSON: ") + e.what());
    }
    if (!have_header) {
      file.header = parse_header(j);
      try {
        validate_header(file.header);
      } catch (const ValidationError& e) {
        fail(line, e.what());
      }
      have_header = true;
    } else {
      auto record = parse_record(j, line);
      validate_record(file.header, record, line);
      file.records.push_back(std::move(record));
    }
  }
  if (!have_header) throw ValidationError("trace file is empty");
  return file;
}

void write_traces(const TraceFileHeader& header, std::span<const TraceRecord> records,
                  const std::filesystem::path& path) {
  write_file_atomic(path, serialize_traces(header, records));
}

TraceFile read_traces(const std::filesystem::path& path) {
  const auto text = read_file(path);
  try {
    return parse_traces(text);
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

TraceRecord to_record(const SampleTrace& trace, bool with_route_log) {
  TraceRecord r;
  r.sample_id = trace.sample_id;
  r.task = trace.task;
  r.neurons = trace.neurons;
  if (with_route_log) r.route_log = trace.route_log;
  return r;
}

SampleTrace to_sample_trace(const TraceFileHeader& header, const TraceRecord& record) {
  SampleTrace t;
  t.sample_id = record.sample_id;
  t.task = record.task;
  t.neurons = record.neurons;
  if (record.route_log) t.route_log = *record.route_log;
  t.method = header.method;
  t.permille = header.permille;
  t.model_fingerprint = header.model_fingerprint;
  return t;
}

namespace {

void check_compatible(const TraceFileHeader& first, const std::string& first_name, const TraceFileHeader& h,
                      const std::string& name) {
  auto mismatch = [&](const std::string& what, const std::string& a, const std::string& b) {
    throw ValidationError(what + " mismatch: " + first_name + " has " + a + ", " + name + " has " + b);
  };
  if (h.model_fingerprint != first.model_fingerprint) {
    mismatch("model fingerprint", first.model_fingerprint, h.model_fingerprint);
  }
  if (h.method != first.method) mismatch("method", std::string(to_string(first.method)), std::string(to_string(h.method)));
  if (h.permille != first.permille) {
    mismatch("permille", ojson(first.permille).dump(), ojson(h.permille).dump());
  }
  if (!(h.spec == first.spec)) mismatch("model spec", header_json(first)["spec"].dump(), header_json(h)["spec"].dump());
}

MergedTraces merge_impl(std::span<const TraceFile> files, const std::vector<std::string>& names) {
  if (files.empty()) throw ValidationError("merge: no trace files");
  MergedTraces merged;
  merged.header = files.front().header;
  std::map<std::string, std::set<std::string>> seen;
  for (std::size_t f = 0; f < files.size(); ++f) {
    check_compatible(merged.header, names.front(), files[f].header, names[f]);
    for (const auto& record : files[f].records) {
      if (!seen[record.task].insert(record.sample_id).second) {
        throw ValidationError("merge: duplicate sample id '" + record.sample_id + "' in task '" + record.task +
                              "' (" + names[f] + ")");
      }
      auto [it, inserted] = merged.tasks.try_emplace(record.task);
      auto& set = it->second;
      if (inserted) {
        set.task = record.task;
        set.model_fingerprint = merged.header.model_fingerprint;
        set.method = merged.header.method;
        set.permille = merged.header.permille;
      }
      set.traces.push_back(to_sample_trace(files[f].header, record));
    }
  }
  return merged;
}

}  // namespace

MergedTraces merge_trace_files(std::span<const TraceFile> files) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < files.size(); ++i) names.push_back("file #" + std::to_string(i + 1));
  return merge_impl(files, names);
}

MergedTraces merge_traces(std::span<const std::filesystem::path> paths) {
  std::vector<TraceFile> files;
  std::vector<std::string> names;
  for (const auto& p : paths) {
    files.push_back(read_traces(p));
    names.push_back(p.string());
  }
  return merge_impl(files, names);
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

nlohmann::ordered_json report_json(const UtilizationReport& r) {
  ojson j;
  j["kind"] = "utilization";
  j["version"] = kTraceFormatVersion;
  j["task"] = r.task;
  j["samples"] = r.samples;
  j["mui"] = r.mui;
  j["key_expert_proportion"] = r.key_expert_proportion;
  j["eta_expert"] = r.eta_expert;
  ojson experts = ojson::array();
  for (const auto& [e, f] : r.expert_frequency) {
    ojson x;
    x["layer"] = e.layer;
    x["expert"] = e.expert;
    x["frequency"] = f;
    const auto it = r.expert_mui.find(e);
    x["expert_mui"] = it == r.expert_mui.end() ? 0.0 : it->second;
    experts.push_back(std::move(x));
  }
  j["experts"] = std::move(experts);
  return j;
}

nlohmann::ordered_json report_json(const EnrichmentResult& r) {
  ojson j;
  j["kind"] = "enrichment";
  j["version"] = kTraceFormatVersion;
  j["tasks"] = r.tasks;
  ojson t;
  t["a"] = r.table.a;
  t["b"] = r.table.b;
  t["c"] = r.table.c;
  t["d"] = r.table.d;
  j["table"] = std::move(t);
  if (!r.odds_ratio) {
    j["odds_ratio"] = nullptr;
  } else if (std::isinf(*r.odds_ratio)) {
    j["odds_ratio"] = "inf";
  } else {
    j["odds_ratio"] = *r.odds_ratio;
  }
  j["p_two_sided"] = r.fisher.p;
  j["log10_p"] = r.fisher.log10_p;
  j["degenerate"] = r.fisher.degenerate;
  return j;
}

nlohmann::ordered_json report_json(std::span<const RankedExpert> ranked, const std::string& task) {
  ojson j;
  j["kind"] = "top_experts";
  j["version"] = kTraceFormatVersion;
  j["task"] = task;
  ojson list = ojson::array();
  for (const auto& r : ranked) {
    ojson x;
    x["layer"] = r.expert.layer;
    x["expert"] = r.expert.expert;
    x["frequency"] = r.frequency;
    x["expert_mui"] = r.expert_mui;
    list.push_back(std::move(x));
  }
  j["experts"] = std::move(list);
  return j;
}

}  // namespace moemui
