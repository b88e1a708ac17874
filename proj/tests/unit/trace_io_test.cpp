#include <gtest/gtest.h>

#include <filesystem>

#include "fixtures.hpp"
#include "moemui/checkpoint.hpp"
#include "moemui/errors.hpp"
#include "moemui/trace_io.hpp"

namespace moemui {
namespace {

TraceFileHeader small_header() {
  TraceFileHeader h;
  h.model_fingerprint = std::string(64, 'a');
  h.spec = {2, 1, 4, 8, 2, 16};
  h.method = ScoreMethod::GluProject;
  h.permille = 0.5;
  h.created = "2026-01-01T00:00:00Z";
  return h;
}

std::vector<TraceRecord> small_records() {
  TraceRecord a{"s0", "copy", {{0, 0, 1}, {1, 4, 7}}, std::nullopt};
  TraceRecord b{"s1", "copy", {}, std::vector<std::vector<RouteEntry>>{{{{0, 2}, 0.75}, {{1, 1}, 0.25}}}};
  return {a, b};
}

std::string replace_line(const std::string& text, std::size_t index, const std::string& line) {
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto end = text.find('\n', pos);
    lines.push_back(text.substr(pos, end - pos));
    pos = end + 1;
  }
  lines.at(index) = line;
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

TEST(TraceIo, RoundTripAndByteStability) {
  const auto header = small_header();
  const auto records = small_records();
  const auto text = serialize_traces(header, records);
  const auto parsed = parse_traces(text);
  EXPECT_EQ(parsed.header, header);
  EXPECT_EQ(parsed.records, records);
  EXPECT_EQ(serialize_traces(parsed.header, parsed.records), text);
  EXPECT_EQ(text.back(), '\n');
  EXPECT_EQ(text.find('\r'), std::string::npos);
}

TEST(TraceIo, HeaderLayout) {
  const auto text = serialize_traces(small_header(), {});
  EXPECT_EQ(text,
            "{\"format\":\"moemui-trace\",\"version\":1,\"model_fingerprint\":\"" + std::string(64, 'a') +
                "\",\"spec\":{\"n_layers\":2,\"n_shared\":1,\"n_routed\":4,\"n_neurons\":8,\"top_k\":2,"
                "\"vocab_size\":16},\"method\":\"glu_project\",\"permille\":0.5,\"created\":\"2026-01-01T00:00:00Z\","
                "\"producer\":\"engine\"}\n");
}

TEST(TraceIo, RejectsOutOfBoundsWithLineNumber) {
  const auto text = serialize_traces(small_header(), small_records());
  const auto bad = replace_line(text, 2, R"({"sample_id":"s1","task":"copy","neurons":[[0,0,1],[0,5,0]]})");
  try {
    parse_traces(bad);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("s1"), std::string::npos) << e.what();
  }
  const auto neuron_oob = replace_line(text, 1, R"({"sample_id":"s0","task":"copy","neurons":[[0,0,8]]})");
  EXPECT_THROW(parse_traces(neuron_oob), ValidationError);
}

TEST(TraceIo, RejectsMalformedInput) {
  const auto text = serialize_traces(small_header(), small_records());
  try {
    parse_traces(replace_line(text, 1, "{not json"));
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  // unsorted neurons, unknown key, missing key
  EXPECT_THROW(parse_traces(replace_line(text, 1, R"({"sample_id":"s0","task":"copy","neurons":[[1,0,0],[0,0,0]]})")),
               ValidationError);
  EXPECT_THROW(parse_traces(replace_line(text, 1, R"({"sample_id":"s0","task":"copy","neurons":[],"extra":1})")),
               ValidationError);
  EXPECT_THROW(parse_traces(replace_line(text, 1, R"({"sample_id":"s0","neurons":[]})")), ValidationError);
  EXPECT_THROW(parse_traces(""), ValidationError);
}

TEST(TraceIo, RejectsOtherVersions) {
  auto text = serialize_traces(small_header(), {});
  const auto pos = text.find("\"version\":1");
  text.replace(pos, 11, "\"version\":2");
  try {
    parse_traces(text);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos) << e.what();
  }
}

TEST(TraceIo, FileRoundTripIsAtomicAndReadable) {
  const auto dir = std::filesystem::temp_directory_path() / "moemui_trace_io_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto path = dir / "t.jsonl";
  write_traces(small_header(), small_records(), path);
  EXPECT_EQ(read_traces(path).records, small_records());
  for (const auto& entry : std::filesystem::directory_iterator(dir)) EXPECT_EQ(entry.path(), path);
  EXPECT_THROW(read_traces(dir / "missing.jsonl"), IoError);
  std::filesystem::remove_all(dir);
}

TEST(TraceIo, MergeGroupsByTask) {
  auto h = small_header();
  TraceFile f1{h, {{"a0", "alpha", {{0, 0, 0}}, std::nullopt}, {"b0", "beta", {}, std::nullopt}}};
  TraceFile f2{h, {{"a1", "alpha", {{1, 2, 3}}, std::nullopt}}};
  const std::vector<TraceFile> files{f1, f2};
  const auto merged = merge_trace_files(files);
  ASSERT_EQ(merged.tasks.size(), 2u);
  EXPECT_EQ(merged.tasks.at("alpha").traces.size(), 2u);
  EXPECT_EQ(merged.tasks.at("alpha").permille, 0.5);
  EXPECT_EQ(merged.tasks.at("beta").traces.size(), 1u);
}

TEST(TraceIo, MergeRejectsMismatches) {
  auto h = small_header();
  TraceFile f1{h, {{"a0", "alpha", {}, std::nullopt}}};
  auto h2 = h;
  h2.permille = 1.0;
  TraceFile f2{h2, {{"a1", "alpha", {}, std::nullopt}}};
  try {
    merge_trace_files(std::vector<TraceFile>{f1, f2});
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("permille mismatch"), std::string::npos) << e.what();
  }
  auto h3 = h;
  h3.model_fingerprint = std::string(64, 'b');
  EXPECT_THROW(merge_trace_files(std::vector<TraceFile>{f1, TraceFile{h3, {}}}), ValidationError);
  auto h4 = h;
  h4.spec.n_neurons = 9;
  EXPECT_THROW(merge_trace_files(std::vector<TraceFile>{f1, TraceFile{h4, {}}}), ValidationError);
  try {
    merge_trace_files(std::vector<TraceFile>{f1, f1});
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("'a0'"), std::string::npos) << e.what();
  }
}

TEST(TraceIo, EngineTracesSurviveSerialization) {
  const auto pm = testing::make_planted_model();
  const auto fp = fingerprint(pm.params);
  std::vector<TraceRecord> records;
  for (std::size_t i = 0; i < pm.probes.size(); ++i) {
    const auto t = trace_sample(pm.params, pm.probes[i].prompt, pm.probes[i].target, ScoreMethod::GateProject, {},
                                {"p" + std::to_string(i), "probe", fp});
    records.push_back(to_record(t));
  }
  TraceFileHeader h;
  h.model_fingerprint = fp;
  h.spec = SpecEcho::from(pm.params.spec);
  h.created = utc_timestamp();
  const auto parsed = parse_traces(serialize_traces(h, records));
  EXPECT_EQ(parsed.records, records);
  const auto back = to_sample_trace(parsed.header, parsed.records[0]);
  EXPECT_EQ(back.model_fingerprint, fp);
  EXPECT_EQ(back.neurons, records[0].neurons);
}

TEST(TraceIo, ReportJsonShapes) {
  EnrichmentResult r;
  r.table = {4, 0, 0, 12};
  r.odds_ratio = std::numeric_limits<double>::infinity();
  r.fisher = fisher_exact_two_sided(r.table);
  r.tasks = {"a", "b"};
  const auto j = report_json(r);
  EXPECT_EQ(j.at("odds_ratio"), "inf");
  r.odds_ratio.reset();
  EXPECT_TRUE(report_json(r).at("odds_ratio").is_null());
}

}  // namespace
}  // namespace moemui
