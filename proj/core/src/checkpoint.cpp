#include "moemui/checkpoint.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <nlohmann/json.hpp>
#include <sstream>

#include "moemui/errors.hpp"

namespace moemui {

namespace {

using ojson = nlohmann::ordered_json;

template <typename Params, typename F>
void for_each_matrix(Params& p, F&& f) {
  f(p.embedding);
  f(p.mixer);
  for (auto& layer : p.layers) {
    f(layer.router);
    for (auto& e : layer.experts) {
      f(e.w_up);
      f(e.w_gate);
      f(e.w_down);
    }
  }
  f(p.unembedding);
}

void append_f64_le(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  char buf[8];
  for (int b = 0; b < 8; ++b) buf[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
  out.append(buf, 8);
}

double read_f64_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int b = 7; b >= 0; --b) bits = (bits << 8) | p[b];
  return std::bit_cast<double>(bits);
}

ojson spec_to_json(const ModelSpec& s) {
  ojson j;
  j["n_layers"] = s.n_layers;
  j["n_shared"] = s.n_shared;
  j["n_routed"] = s.n_routed;
  j["top_k"] = s.top_k;
  j["n_neurons"] = s.n_neurons;
  j["d_model"] = s.d_model;
  j["vocab_size"] = s.vocab_size;
  j["context_window"] = s.context_window;
  j["seed"] = s.seed;
  return j;
}

ModelSpec spec_from_json(const ojson& j) {
  ModelSpec s;
  try {
    s.n_layers = j.at("n_layers").get<int>();
    s.n_shared = j.at("n_shared").get<int>();
    s.n_routed = j.at("n_routed").get<int>();
    s.top_k = j.at("top_k").get<int>();
    s.n_neurons = j.at("n_neurons").get<int>();
    s.d_model = j.at("d_model").get<int>();
    s.vocab_size = j.at("vocab_size").get<int>();
    s.context_window = j.at("context_window").get<int>();
    s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint header: ") + e.what());
  }
  s.validate();
  return s;
}

}  // namespace

std::string serialize_checkpoint(const ModelParams& params) {
  params.validate_shapes();
  ojson header;
  header["format"] = "moemui-checkpoint";
  header["version"] = kCheckpointVersion;
  header["spec"] = spec_to_json(params.spec);
  std::string out = header.dump();
  out.push_back('\n');
  for_each_matrix(params, [&](const Matrix& m) {
    for (double v : m.data()) append_f64_le(out, v);
  });
  return out;
}

ModelParams parse_checkpoint(std::string_view bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string_view::npos) throw ValidationError("checkpoint: missing header line");
  ojson header;
  try {
    header = ojson::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: malformed header: ") + e.what());
  }
  if (!header.is_object() || header.value("format", "") != "moemui-checkpoint") {
    throw ValidationError("checkpoint: not a moemui checkpoint");
  }
  if (header.value("version", -1) != kCheckpointVersion) {
    throw ValidationError("checkpoint: unsupported version " + header.value("version", ojson()).dump());
  }
  ModelParams p = ModelParams::zeros(spec_from_json(header.at("spec")));

  std::size_t expected = 0;
  for_each_matrix(p, [&](const Matrix& m) { expected += m.size(); });
  const auto payload = bytes.substr(nl + 1);
  if (payload.size() != expected * 8) {
    throw ValidationError("checkpoint: payload has " + std::to_string(payload.size()) + " bytes, expected " +
                          std::to_string(expected * 8));
  }
  const auto* cursor = reinterpret_cast<const unsigned char*>(payload.data());
  for_each_matrix(p, [&](Matrix& m) {
    for (auto& v : m.data()) {
      v = read_f64_le(cursor);
      cursor += 8;
    }
  });
  return p;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return std::move(ss).str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(params));
}

ModelParams load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256: digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  hex.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(kHex[digest[i] >> 4]);
    hex.push_back(kHex[digest[i] & 0xf]);
  }
  return hex;
}

std::string fingerprint(const ModelParams& params) { return sha256_hex(serialize_checkpoint(params)); }

}  // namespace moemui
