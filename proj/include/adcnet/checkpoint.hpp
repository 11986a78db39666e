#pragma once

// Checkpoint file layout:
//   8 bytes   magic "ADCNCKPT"
//   8 bytes   manifest length, unsigned little-endian
//   manifest  UTF-8 JSON: schema_version, config, vocab, genres, metadata,
//             dtype, tensors [{name, shape, offset}] (offset in bytes into the blob)
//   blob      contiguous little-endian IEEE-754 float32 values, row-major

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adcnet/data.hpp"
#include "adcnet/error.hpp"
#include "adcnet/network.hpp"

namespace adcnet {

inline constexpr int kCheckpointSchemaVersion = 1;
inline constexpr std::array<char, 8> kCheckpointMagic = {'A', 'D', 'C', 'N', 'C', 'K', 'P', 'T'};

struct Checkpoint {
  ModelParams<float> params;
  Vocabulary vocab;
  AttributeSchema schema;
  nlohmann::json metadata = nlohmann::json::object();
};

namespace detail {
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}
}  // namespace detail

/// Serializes parameters (rounded to float32), vocabulary and schema.
template <class T>
std::string checkpoint_bytes(const ModelParams<T>& params, const Vocabulary& vocab,
                             const AttributeSchema& schema,
                             const nlohmann::json& metadata = nlohmann::json::object()) {
  if (params.config.vocab_size != vocab.size())
    throw ValidationError("checkpoint: vocabulary size does not match the model config");
  nlohmann::ordered_json m;
  m["schema_version"] = kCheckpointSchemaVersion;
  nlohmann::json cfg = params.config;
  m["config"] = cfg;
  m["vocab"] = vocab.tokens();
  m["genres"] = schema.genres;
  m["metadata"] = metadata;
  m["dtype"] = "float32";
  auto& index = m["tensors"] = nlohmann::ordered_json::array();
  std::string blob;
  for (const auto& [name, t] : params.tensors()) {
    index.push_back({{"name", name}, {"shape", {t->rows(), t->cols()}}, {"offset", blob.size()}});
    for (Eigen::Index i = 0; i < t->size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(t->data()[i]));
      for (int b = 0; b < 4; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
  }
  const std::string manifest = m.dump();
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u64(out, manifest.size());
  out += manifest;
  out += blob;
  return out;
}

template <class T>
void save_checkpoint(const std::string& path, const ModelParams<T>& params, const Vocabulary& vocab,
                     const AttributeSchema& schema,
                     const nlohmann::json& metadata = nlohmann::json::object()) {
  const auto bytes = checkpoint_bytes(params, vocab, schema, metadata);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw RuntimeError("failed writing checkpoint " + path);
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic.data(), 8) != 0)
    throw RuntimeError("not a checkpoint file (bad magic)");
  const auto mlen = detail::get_u64(p + 8);
  if (mlen > bytes.size() - 16) throw RuntimeError("truncated checkpoint manifest");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(bytes.substr(16, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw RuntimeError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  const int version = m.value("schema_version", -1);
  if (version != kCheckpointSchemaVersion)
    throw RuntimeError("checkpoint schema_version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointSchemaVersion) + ")");
  if (m.value("dtype", "") != "float32") throw RuntimeError("checkpoint dtype must be float32");

  Checkpoint ck;
  ModelConfig cfg = m.at("config").get<ModelConfig>();
  cfg.validate();
  ck.vocab = Vocabulary::from_tokens(m.at("vocab").get<std::vector<std::string>>());
  ck.schema.genres = m.at("genres").get<std::vector<std::string>>();
  ck.metadata = m.value("metadata", nlohmann::json::object());
  if (cfg.vocab_size != ck.vocab.size()) throw RuntimeError("checkpoint vocabulary size does not match config");
  if (cfg.d_genre != ck.schema.d_genre()) throw RuntimeError("checkpoint genre list does not match config");

  ck.params = ModelParams<float>::zeros(cfg);
  const auto& entries = m.at("tensors");
  auto tensors = ck.params.tensors();
  if (entries.size() != tensors.size())
    throw RuntimeError("checkpoint lists " + std::to_string(entries.size()) + " tensors, config expects " +
                       std::to_string(tensors.size()));
  const std::size_t blob_start = 16 + mlen;
  const std::size_t blob_size = bytes.size() - blob_start;
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    auto& [name, t] = tensors[k];
    const auto& e = entries[k];
    if (e.at("name").get<std::string>() != name)
      throw RuntimeError("checkpoint tensor " + std::to_string(k) + " is \"" + e.at("name").get<std::string>() +
                         "\", expected \"" + name + "\"");
    const auto shape = e.at("shape").get<std::vector<std::int64_t>>();
    if (shape.size() != 2 || shape[0] != t->rows() || shape[1] != t->cols())
      throw RuntimeError("shape mismatch for tensor " + name + ": manifest " + e.at("shape").dump() + ", config [" +
                         std::to_string(t->rows()) + "," + std::to_string(t->cols()) + "]");
    const auto offset = e.at("offset").get<std::uint64_t>();
    const auto need = static_cast<std::uint64_t>(t->size()) * 4;
    if (offset > blob_size || need > blob_size - offset)
      throw RuntimeError("truncated tensor blob: tensor " + name + " needs bytes [" + std::to_string(offset) + ", " +
                         std::to_string(offset + need) + ") but the blob holds " + std::to_string(blob_size));
    const unsigned char* src = p + blob_start + offset;
    for (Eigen::Index i = 0; i < t->size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(src[4 * i + b]) << (8 * b);
      t->data()[i] = std::bit_cast<float>(bits);
    }
  }
  if (!ck.params.all_finite()) throw RuntimeError("checkpoint contains non-finite parameters");
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace adcnet
