#pragma once

// Model checkpoints.
//
//   "SMCK" | u32 header length | JSON header, space-padded to an 8-byte boundary
//   | little-endian f64 blobs, each starting at an 8-byte aligned offset
//
// Blob offsets in the header are relative to the start of the blob section.
// Every blob carries its name, shape and the SHA-256 of its bytes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "subjmap/config_types.hpp"
#include "subjmap/dataset.hpp"
#include "subjmap/digest.hpp"
#include "subjmap/errors.hpp"
#include "subjmap/models.hpp"

namespace subjmap {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[4] = {'S', 'M', 'C', 'K'};

struct Checkpoint {
  Model model;
  std::string config_hash;
};

namespace detail {

inline std::vector<unsigned char> blob_bytes(const Matrix& m) {
  ByteWriter w;
  for (double v : m.values()) w.le(v);
  return w.buffer();
}

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Model& model, const std::string& config_hash = "") {
  nlohmann::json blobs = nlohmann::json::array();
  std::vector<unsigned char> payload;
  for_each_param(model, [&](const std::string& name, const Matrix& p) {
    const auto bytes = detail::blob_bytes(p);
    blobs.push_back({{"name", name},
                     {"rows", p.rows()},
                     {"cols", p.cols()},
                     {"offset", payload.size()},
                     {"sha256", sha256_hex(bytes.data(), bytes.size())}});
    payload.insert(payload.end(), bytes.begin(), bytes.end());
  });
  const nlohmann::json header = {{"format", "subjmap-checkpoint"},
                                 {"format_version", kCheckpointVersion},
                                 {"config_hash", config_hash},
                                 {"init_seed", model.init_seed},
                                 {"spec", to_json(model.spec)},
                                 {"blobs", blobs}};
  std::string text = header.dump();
  while ((8 + text.size()) % 8 != 0) text.push_back(' ');

  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.le(static_cast<std::uint32_t>(text.size()));
  w.bytes(text.data(), text.size());
  w.bytes(payload.data(), payload.size());
  return w.buffer();
}

/// `expected` guards against loading a checkpoint into a run configured for a
/// different architecture.
inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& raw,
                                    const std::optional<ModelSpec>& expected = std::nullopt) {
  detail::ByteReader r(raw);
  if (r.str(4, "magic") != std::string(kCheckpointMagic, 4)) throw ParseError("not a subjmap checkpoint (bad magic)");
  const auto header_len = r.le<std::uint32_t>("header length");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.str(header_len, "header"));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }
  const std::size_t data_start = r.offset();

  const auto version = header.value("format_version", 0u);
  if (version != kCheckpointVersion)
    throw VersionUnsupported("checkpoint format version " + std::to_string(version) + ", expected " +
                             std::to_string(kCheckpointVersion));

  Checkpoint ck;
  ck.config_hash = header.value("config_hash", std::string());
  const ModelSpec spec = model_spec_from_json(header.at("spec"), ModelSpec{}, "checkpoint.spec");
  if (expected && !(*expected == spec))
    throw ShapeMismatch("checkpoint holds a " + std::string(to_string(spec.variant)) + " " +
                        std::string(to_string(spec.objective)) + " model that does not match the configured " +
                        std::string(to_string(expected->variant)) + " " +
                        std::string(to_string(expected->objective)) + " model");
  ck.model = make_model(spec, header.value("init_seed", std::uint64_t{0}));

  std::map<std::string, nlohmann::json> index;
  for (const auto& b : header.at("blobs")) index[b.at("name").get<std::string>()] = b;
  std::size_t used = 0;
  for_each_param(ck.model, [&](const std::string& name, Matrix& p) {
    const auto it = index.find(name);
    if (it == index.end()) throw ShapeMismatch("checkpoint lacks blob '" + name + "'");
    const auto& b = it->second;
    const auto rows = b.at("rows").get<std::size_t>();
    const auto cols = b.at("cols").get<std::size_t>();
    if (rows != p.rows() || cols != p.cols())
      throw ShapeMismatch("blob '" + name + "' is " + std::to_string(rows) + "x" + std::to_string(cols) +
                          ", model expects " + p.shape_string());
    const std::size_t offset = b.at("offset").get<std::size_t>();
    const std::size_t n = rows * cols * sizeof(double);
    if (offset % 8 != 0 || data_start + offset + n > raw.size())
      throw ParseError("blob '" + name + "' at offset " + std::to_string(data_start + offset) +
                       " runs past the end of the file (" + std::to_string(raw.size()) + " bytes)");
    const unsigned char* first = raw.data() + data_start + offset;
    if (sha256_hex(first, n) != b.at("sha256").get<std::string>())
      throw ChecksumMismatch("blob '" + name + "' does not match its checksum");
    ++used;
    p = Matrix(rows, cols);
    detail::ByteReader values(std::vector<unsigned char>(first, first + n));
    for (auto& v : p.values()) v = values.le<double>("blob value");
  });
  if (used != index.size()) throw ShapeMismatch("checkpoint has blobs the model does not use");
  return ck;
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path,
                            const std::string& config_hash = "") {
  detail::write_file_bytes(path, encode_checkpoint(model, config_hash));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  const std::optional<ModelSpec>& expected = std::nullopt) {
  return decode_checkpoint(detail::read_file_bytes(path), expected);
}

}  // namespace subjmap
