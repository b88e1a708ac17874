#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moemui/attribution.hpp"
#include "moemui/metrics.hpp"
#include "moemui/model.hpp"
#include "moemui/stats.hpp"

namespace moemui {

inline constexpr int kTraceFormatVersion = 1;

/// Model dimensions echoed into every trace file.
struct SpecEcho {
  int n_layers = 1;
  int n_shared = 0;
  int n_routed = 1;
  int n_neurons = 1;
  int top_k = 1;
  int vocab_size = 1;

  static SpecEcho from(const ModelSpec& spec) noexcept;
  /// A ModelSpec carrying these dimensions (remaining fields at defaults), for metrics.
  ModelSpec to_model_spec() const;

  friend bool operator==(const SpecEcho&, const SpecEcho&) = default;
};

struct TraceFileHeader {
  int version = kTraceFormatVersion;
  std::string model_fingerprint;  // 64 lowercase hex characters
  SpecEcho spec;
  ScoreMethod method = ScoreMethod::GateProject;
  double permille = 1.0;
  std::string created;             // ISO-8601 UTC timestamp, supplied by the caller
  std::string producer = "engine";  // "engine" or "exporter"

  friend bool operator==(const TraceFileHeader&, const TraceFileHeader&) = default;
};

struct TraceRecord {
  std::string sample_id;
  std::string task;
  std::vector<NeuronRef> neurons;  // sorted, unique
  std::optional<std::vector<std::vector<RouteEntry>>> route_log;

  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

struct TraceFile {
  TraceFileHeader header;
  std::vector<TraceRecord> records;
};

/// Throws ValidationError naming the offending record when any check fails.
void validate_header(const TraceFileHeader& header);
void validate_record(const TraceFileHeader& header, const TraceRecord& record, std::size_t line);

/// Canonical bytes: header line then one record per line, keys in fixed order, LF endings.
std::string serialize_traces(const TraceFileHeader& header, std::span<const TraceRecord> records);
TraceFile parse_traces(std::string_view text);

void write_traces(const TraceFileHeader& header, std::span<const TraceRecord> records,
                  const std::filesystem::path& path);
TraceFile read_traces(const std::filesystem::path& path);

TraceRecord to_record(const SampleTrace& trace, bool with_route_log = true);
SampleTrace to_sample_trace(const TraceFileHeader& header, const TraceRecord& record);

struct MergedTraces {
  TraceFileHeader header;  // header of the first file
  std::map<std::string, TaskTraceSet> tasks;
};

/// Groups the records of several shards by task. All files must agree on
/// fingerprint, method, permille and model dimensions; sample ids must be
/// unique within a task.
MergedTraces merge_traces(std::span<const std::filesystem::path> files);
MergedTraces merge_trace_files(std::span<const TraceFile> files);

/// Current UTC time as "YYYY-MM-DDTHH:MM:SSZ".
std::string utc_timestamp();

// Structured report objects (one JSON object each).
nlohmann::ordered_json report_json(const UtilizationReport& report);
nlohmann::ordered_json report_json(const EnrichmentResult& result);
nlohmann::ordered_json report_json(std::span<const RankedExpert> ranked, const std::string& task);

}  // namespace moemui
