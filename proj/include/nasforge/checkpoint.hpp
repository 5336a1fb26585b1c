#pragma once
// Parameter checkpoints: `<stem>.json` manifest, `<stem>.bin` raw
// little-endian f64 arrays, and `<stem>.json.sha256` guarding the manifest.
// The manifest also carries the SHA-256 of the data file.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nasforge/config.hpp"

namespace nasforge {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointVersion = 1;

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes through a temporary name so a crash never leaves a half file at `p`.
inline void write_file_atomic(const std::filesystem::path& p, std::string_view bytes) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  const auto tmp = std::filesystem::path(p.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, p);
}

namespace detail {

inline void append_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i, bits >>= 8) out.push_back(char(bits & 0xff));
}

inline double read_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | std::uint8_t(p[i]);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

/// Saves `params` under `stem` (no extension) with caller metadata.
inline void save_params(const std::filesystem::path& stem, const ParamStore& params, const nlohmann::json& meta) {
  std::string data;
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : params) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    for (double v : t.values()) detail::append_le(data, v);
    offset += t.numel();
  }
  const std::string bin_name = stem.filename().string() + ".bin";
  const nlohmann::json manifest{{"format", "nasforge-params"},  {"version", kCheckpointVersion},
                                {"data_file", bin_name},        {"data_sha256", sha256_hex(data)},
                                {"values", offset},             {"tensors", tensors},
                                {"meta", meta}};
  const std::string text = manifest.dump(2) + "\n";
  write_file_atomic(stem.string() + ".bin", data);
  write_file_atomic(stem.string() + ".json", text);
  write_file_atomic(stem.string() + ".json.sha256", sha256_hex(text) + "\n");
}

struct LoadedParams {
  ParamStore params;
  nlohmann::json meta;
};

/// Verifies both digests before trusting a single byte.
inline LoadedParams load_params(const std::filesystem::path& stem, bool requires_grad = true) {
  const std::string text = read_file(stem.string() + ".json");
  std::string digest = read_file(stem.string() + ".json.sha256");
  while (!digest.empty() && std::isspace(static_cast<unsigned char>(digest.back()))) digest.pop_back();
  if (digest != sha256_hex(text)) throw CheckpointError(stem.string() + ".json: manifest digest mismatch");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(stem.string() + ".json: " + e.what());
  }
  if (m.value("format", "") != "nasforge-params") throw CheckpointError(stem.string() + ".json: not a parameter manifest");
  if (m.value("version", 0) != kCheckpointVersion)
    throw CheckpointError(stem.string() + ".json: unsupported version " + std::to_string(m.value("version", 0)));
  const auto bin = stem.parent_path() / m.at("data_file").get<std::string>();
  const std::string data = read_file(bin);
  if (sha256_hex(data) != m.at("data_sha256").get<std::string>()) throw CheckpointError(bin.string() + ": data digest mismatch");
  const auto total = m.at("values").get<std::size_t>();
  if (data.size() != 8 * total) throw CheckpointError(bin.string() + ": size does not match manifest");

  LoadedParams out;
  out.meta = m.at("meta");
  for (const auto& t : m.at("tensors")) {
    const Shape shape = t.at("shape").get<Shape>();
    const auto offset = t.at("offset").get<std::size_t>();
    const std::size_t n = shape_numel(shape);
    if (offset + n > total) throw CheckpointError(bin.string() + ": tensor " + t.at("name").get<std::string>() + " out of range");
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = detail::read_le(data.data() + 8 * (offset + i));
    out.params[t.at("name").get<std::string>()] = Tensor(shape, std::move(v), requires_grad);
  }
  return out;
}

inline void save_model(const std::filesystem::path& stem, const Model& m, nlohmann::json extra = nlohmann::json::object()) {
  extra["kind"] = "model";
  extra["space"] = to_json(m.cfg);
  extra["features"] = to_json(m.features);
  extra["genotype"] = to_json(m.genotype);
  save_params(stem, m.params, extra);
}

inline Model load_model(const std::filesystem::path& stem) {
  LoadedParams lp = load_params(stem);
  if (lp.meta.value("kind", "") != "model") throw CheckpointError(stem.string() + ": not a model checkpoint");
  Model m;
  read_space(lp.meta.at("space"), "space", m.cfg);
  m.features = feature_spec_from_json(lp.meta.at("features"));
  m.genotype = from_json(lp.meta.at("genotype"));
  m.params = std::move(lp.params);
  return m;
}

inline void save_supernet(const std::filesystem::path& stem, const Supernet& net, nlohmann::json extra = nlohmann::json::object()) {
  extra["kind"] = "supernet";
  extra["space"] = to_json(net.config());
  extra["features"] = to_json(net.features());
  save_params(stem, net.params(), extra);
}

/// Rebuilds the supernet layout from the metadata, then requires the stored
/// tensors to match it name for name and shape for shape.
inline Supernet load_supernet(const std::filesystem::path& stem) {
  LoadedParams lp = load_params(stem);
  if (lp.meta.value("kind", "") != "supernet") throw CheckpointError(stem.string() + ": not a supernet checkpoint");
  SpaceConfig cfg;
  read_space(lp.meta.at("space"), "space", cfg);
  Supernet net(cfg, feature_spec_from_json(lp.meta.at("features")), 0);
  if (lp.params.size() != net.params().size()) throw CheckpointError(stem.string() + ": tensor set does not match the space");
  for (auto& [name, t] : net.params()) {
    auto it = lp.params.find(name);
    if (it == lp.params.end() || it->second.shape() != t.shape())
      throw CheckpointError(stem.string() + ": tensor " + name + " missing or misshapen");
    t = it->second;
  }
  return net;
}

}  // namespace nasforge
