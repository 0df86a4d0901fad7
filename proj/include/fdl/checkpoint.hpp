#ifndef FDL_CHECKPOINT_HPP
#define FDL_CHECKPOINT_HPP

// Binary layout (all integers little-endian):
//   "FDLB" | u32 version | u64 n | n bytes of JSON header
//   u32 tensor count, then per tensor:
//   u32 name length | name | u32 rank | u32 dims[rank] | float32 values (row-major)
// The JSON header holds the model config, the experiment config and the
// provenance record. Payload is always 32-bit, even for double models.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "fdl/config.hpp"
#include "fdl/error.hpp"
#include "fdl/model.hpp"
#include "fdl/reward.hpp"
#include "json.hpp"

namespace fdl {

inline constexpr std::array<char, 4> kCheckpointMagic{'F', 'D', 'L', 'B'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointKind { dialogue, reward };

inline const char* checkpoint_kind_name(CheckpointKind k) { return k == CheckpointKind::dialogue ? "dialogue" : "reward"; }

struct TrainingRecord {
  std::string stage;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
};

struct Checkpoint {
  CheckpointKind kind = CheckpointKind::dialogue;
  ModelConfig model;
  nlohmann::json experiment;  // full ExperimentConfig
  TrainingRecord provenance;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw Error("checkpoint: no tensor '" + name + "'");
  }
  bool has_extension() const {
    for (const auto& [n, t] : tensors)
      if (n.rfind("ext.", 0) == 0) return true;
    return false;
  }
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  put_u32(os, static_cast<std::uint32_t>(v));
  put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw Error("checkpoint: truncated file");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

inline std::uint64_t get_u64(std::istream& is) {
  const std::uint64_t lo = get_u32(is);
  return lo | std::uint64_t(get_u32(is)) << 32;
}

inline std::string get_bytes(std::istream& is, std::size_t n) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), std::streamsize(n))) throw Error("checkpoint: truncated file");
  return s;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& c) {
  os.write(kCheckpointMagic.data(), 4);
  detail::put_u32(os, kCheckpointVersion);
  nlohmann::json h;
  h["kind"] = checkpoint_kind_name(c.kind);
  h["model"] = model_config_to_json(c.model);
  h["experiment"] = c.experiment;
  h["provenance"] = {{"stage", c.provenance.stage},
                     {"seed", c.provenance.seed},
                     {"config_hash", hex64(c.provenance.config_hash)}};
  const std::string header = h.dump();
  detail::put_u64(os, header.size());
  os.write(header.data(), std::streamsize(header.size()));
  detail::put_u32(os, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(t.shape().size()));
    for (auto d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : t.data()) detail::put_u32(os, std::bit_cast<std::uint32_t>(v));
  }
  if (!os) throw Error("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kCheckpointMagic) throw Error("checkpoint: bad magic bytes");
  const auto version = detail::get_u32(is);
  if (version != kCheckpointVersion)
    throw PreconditionError("checkpoint: unsupported format version " + std::to_string(version) + " (expected " +
                            std::to_string(kCheckpointVersion) + ")");
  Checkpoint c;
  const auto n = detail::get_u64(is);
  if (n > (1ull << 30)) throw Error("checkpoint: header too large");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(detail::get_bytes(is, n));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("checkpoint: corrupt header: ") + e.what());
  }
  const std::string kind = h.at("kind");
  if (kind == "dialogue")
    c.kind = CheckpointKind::dialogue;
  else if (kind == "reward")
    c.kind = CheckpointKind::reward;
  else
    throw Error("checkpoint: unknown kind '" + kind + "'");
  c.model = model_config_from_json(h.at("model"));
  c.experiment = h.at("experiment");
  const auto& p = h.at("provenance");
  c.provenance.stage = p.at("stage");
  c.provenance.seed = p.at("seed");
  c.provenance.config_hash = std::stoull(p.at("config_hash").get<std::string>(), nullptr, 16);
  const auto count = detail::get_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = detail::get_bytes(is, detail::get_u32(is));
    const auto rank = detail::get_u32(is);
    if (rank == 0 || rank > 4) throw Error("checkpoint: bad rank for tensor '" + name + "'");
    Shape shape;
    std::size_t size = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(detail::get_u32(is));
      size *= shape.back();
    }
    auto t = Tensor<float>::zeros(shape);
    auto out = t.mutable_data();
    for (std::size_t k = 0; k < size; ++k) out[k] = std::bit_cast<float>(detail::get_u32(is));
    c.tensors.emplace_back(std::move(name), t);
  }
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("checkpoint: cannot open " + path + " for writing");
  write_checkpoint(os, c);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  if (!std::filesystem::exists(path)) throw PreconditionError("checkpoint not found: " + path);
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("checkpoint: cannot open " + path);
  return read_checkpoint(is);
}

/// Rejects a checkpoint trained under a different experiment config.
inline void check_config_hash(const Checkpoint& c, std::uint64_t expected, bool override_mismatch) {
  if (c.provenance.config_hash == expected || override_mismatch) return;
  throw PreconditionError("checkpoint config hash " + hex64(c.provenance.config_hash) +
                          " does not match the supplied config (" + hex64(expected) +
                          "); pass --override to load anyway");
}

namespace detail {

inline void copy_named(const Checkpoint& c, const std::vector<std::pair<std::string, Tensor<float>>>& dst) {
  if (dst.size() != c.tensors.size())
    throw Error("checkpoint: tensor count " + std::to_string(c.tensors.size()) + " does not match the model (" +
                std::to_string(dst.size()) + ")");
  for (const auto& [name, t] : dst) {
    const auto& src = c.tensor(name);
    if (src.shape() != t.shape()) throw Error("checkpoint: shape mismatch for '" + name + "'");
    auto shared = t;  // shares storage with the model
    std::copy(src.data().begin(), src.data().end(), shared.mutable_data().begin());
  }
}

}  // namespace detail

inline Checkpoint make_checkpoint(const Model<float>& m, const ExperimentConfig& cfg, const std::string& stage,
                                  std::uint64_t seed) {
  Checkpoint c;
  c.kind = CheckpointKind::dialogue;
  c.model = m.config;
  c.experiment = cfg.to_json();
  c.provenance = {stage, seed, config_hash(c.experiment)};
  for (const auto& [n, t] : all_tensors(m)) c.tensors.emplace_back(n, t.clone());
  return c;
}

inline Checkpoint make_checkpoint(const RewardModel& rm, const ExperimentConfig& cfg, std::uint64_t seed) {
  Checkpoint c;
  c.kind = CheckpointKind::reward;
  c.model = rm.encoder.config;
  c.experiment = cfg.to_json();
  c.provenance = {"reward", seed, config_hash(c.experiment)};
  for (const auto& [n, t] : reward_tensors(rm)) c.tensors.emplace_back(n, t.clone());
  return c;
}

inline Model<float> model_from_checkpoint(const Checkpoint& c) {
  if (c.kind != CheckpointKind::dialogue) throw PreconditionError("checkpoint is not a dialogue model");
  auto m = init_model<float>(c.model, 0);
  if (c.has_extension()) attach_extension(m, 0);
  detail::copy_named(c, all_tensors(m));
  return m;
}

inline RewardModel reward_from_checkpoint(const Checkpoint& c) {
  if (c.kind != CheckpointKind::reward) throw PreconditionError("checkpoint is not a reward model");
  auto rm = init_reward_model(c.model, 0);
  detail::copy_named(c, reward_tensors(rm));
  return rm;
}

}  // namespace fdl

#endif  // FDL_CHECKPOINT_HPP
