#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "umrm/io.hpp"
#include "umrm/merge.hpp"
#include "umrm/model.hpp"
#include "umrm/moe.hpp"

namespace umrm {

// Binary checkpoint container:
//   bytes 0..3   magic "UMRM"
//   bytes 4..7   format version, u32 LE
//   bytes 8..15  header length, u64 LE
//   header JSON  (model kind, head kind, config, tensor directory,
//                 optional merge_provenance)
//   payload      f64 LE, contiguous, row-major, in directory order
//
// Offsets in the directory are relative to the payload start. Loads of the
// same file always reproduce identical tensors bit for bit.

inline constexpr uint32_t kCheckpointVersion = 1;

enum class CheckpointErrorKind { bad_magic, version_mismatch, corrupt_directory, truncated_payload };

struct CheckpointError : IoError {
  CheckpointErrorKind kind;
  CheckpointError(CheckpointErrorKind k, const std::string& msg) : IoError(msg), kind(k) {}
};

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace detail {

inline void put_u32_le(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

inline void put_u64_le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

inline uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
         static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}

inline uint64_t get_u64_le(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline nlohmann::json config_to_json(const TransformerConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"d_ff", c.d_ff},         {"max_seq", c.max_seq},
          {"seed", c.seed}};
}

inline TransformerConfig config_from_json(const nlohmann::json& j) {
  TransformerConfig c;
  c.vocab_size = j.at("vocab_size").get<size_t>();
  c.d_model = j.at("d_model").get<size_t>();
  c.n_layers = j.at("n_layers").get<size_t>();
  c.n_heads = j.at("n_heads").get<size_t>();
  c.d_ff = j.at("d_ff").get<size_t>();
  c.max_seq = j.at("max_seq").get<size_t>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

}  // namespace detail

struct Checkpoint {
  RewardModel model;
  std::optional<MergeProvenance> merge_provenance;
};

inline std::string serialize_checkpoint(const RewardModel& m,
                                        const MergeProvenance* provenance = nullptr) {
  auto named = named_params(m);

  nlohmann::json dir = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : named) {
    const uint64_t bytes = t.size() * sizeof(double);
    dir.push_back({{"name", name},
                   {"dtype", "f64"},
                   {"shape", t.shape()},
                   {"offset", offset},
                   {"length", bytes}});
    offset += bytes;
  }

  nlohmann::json header = {{"model_kind", is_moe(m) ? "moe" : "dense"},
                           {"head_kind", head_kind_name(m.head_kind)},
                           {"config", detail::config_to_json(m.cfg)},
                           {"tensors", dir}};
  if (is_moe(m)) {
    const auto& layer = std::get<MoELayer>(m.blocks[0].ffn);
    header["moe"] = {{"n_normal_experts", layer.normal.size()}, {"active_k", layer.active_k}};
  }
  if (provenance) {
    header["merge_provenance"] = {{"source_hash", provenance->source_hash},
                                  {"lambda", provenance->lambda},
                                  {"alpha", provenance->alpha}};
  }

  const std::string header_json = header.dump();
  std::string out = "UMRM";
  detail::put_u32_le(out, kCheckpointVersion);
  detail::put_u64_le(out, header_json.size());
  out += header_json;
  for (const auto& [name, t] : named) {
    const size_t start = out.size();
    out.resize(start + t.size() * sizeof(double));
    std::memcpy(out.data() + start, t.data().data(), t.size() * sizeof(double));
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || bytes.compare(0, 4, "UMRM") != 0)
    throw CheckpointError(CheckpointErrorKind::bad_magic, "checkpoint: bad magic");
  const uint32_t version = detail::get_u32_le(p + 4);
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointErrorKind::version_mismatch,
                          "checkpoint: unsupported version " + std::to_string(version));
  const uint64_t header_len = detail::get_u64_le(p + 8);
  if (16 + header_len > bytes.size())
    throw CheckpointError(CheckpointErrorKind::corrupt_directory, "checkpoint: header overruns file");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception&) {
    throw CheckpointError(CheckpointErrorKind::corrupt_directory, "checkpoint: header is not JSON");
  }

  Checkpoint ckpt;
  TransformerConfig cfg;
  HeadKind head;
  nlohmann::json dir;
  try {
    cfg = detail::config_from_json(header.at("config"));
    head = head_kind_from_name(header.at("head_kind").get<std::string>());
    dir = header.at("tensors");
    if (!dir.is_array() || dir.empty()) throw ConfigError("empty tensor directory");
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointErrorKind::corrupt_directory,
                          std::string("checkpoint: bad header: ") + e.what());
  }

  ckpt.model = make_model(cfg, head);
  if (header.contains("moe")) {
    UpcycleConfig ucfg;
    ucfg.n_normal_experts = header["moe"].at("n_normal_experts").get<size_t>();
    ucfg.active_k = header["moe"].at("active_k").get<size_t>();
    ckpt.model = upcycle(ckpt.model, ucfg);
  }
  if (header.contains("merge_provenance")) {
    MergeProvenance prov;
    prov.source_hash = header["merge_provenance"].at("source_hash").get<std::string>();
    prov.lambda = header["merge_provenance"].at("lambda").get<double>();
    prov.alpha =
        header["merge_provenance"].at("alpha").get<std::vector<std::vector<double>>>();
    ckpt.merge_provenance = std::move(prov);
  }

  const size_t payload_start = 16 + header_len;
  const size_t payload_size = bytes.size() - payload_start;
  auto named = named_params(ckpt.model);
  if (dir.size() != named.size())
    throw CheckpointError(CheckpointErrorKind::corrupt_directory,
                          "checkpoint: directory entry count does not match model");

  uint64_t expected_offset = 0;
  std::vector<std::string> seen;
  for (size_t i = 0; i < named.size(); ++i) {
    const auto& entry = dir[i];
    const std::string name = entry.at("name").get<std::string>();
    if (name != named[i].first)
      throw CheckpointError(CheckpointErrorKind::corrupt_directory,
                            "checkpoint: unexpected tensor name " + name);
    if (entry.at("dtype").get<std::string>() != "f64")
      throw CheckpointError(CheckpointErrorKind::corrupt_directory, "checkpoint: bad dtype");
    const auto shape = entry.at("shape").get<std::vector<size_t>>();
    Tensor& t = named[i].second;
    if (shape != t.shape())
      throw CheckpointError(CheckpointErrorKind::corrupt_directory,
                            "checkpoint: shape mismatch for " + name);
    const uint64_t offset = entry.at("offset").get<uint64_t>();
    const uint64_t length = entry.at("length").get<uint64_t>();
    if (offset != expected_offset || length != t.size() * sizeof(double))
      throw CheckpointError(CheckpointErrorKind::corrupt_directory,
                            "checkpoint: overlapping or misordered directory at " + name);
    expected_offset = offset + length;
    if (offset + length > payload_size)
      throw CheckpointError(CheckpointErrorKind::truncated_payload,
                            "checkpoint: payload truncated at " + name);
    std::memcpy(t.data().data(), bytes.data() + payload_start + offset, length);
  }
  if (expected_offset != payload_size)
    throw CheckpointError(CheckpointErrorKind::truncated_payload,
                          "checkpoint: payload size does not match directory");
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const RewardModel& m,
                            const MergeProvenance* provenance = nullptr) {
  write_file_atomic(path, serialize_checkpoint(m, provenance));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(read_text_file(path));
}

}  // namespace umrm
