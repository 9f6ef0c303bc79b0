#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "raypatch/model.hpp"

// RPCK: "RPCK", u32 version, u64 JSON length, JSON metadata, then named
// tensors (u32 name length, name, u32 rank, u64 dims, f32 data) to EOF.
// Weights are stored as float32; loading widens them back to double.
namespace raypatch {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  nlohmann::json meta;  // {"model": ModelConfig, "seed": u64, "step": u64, "run": {...}}
  TensorList tensors;
};

namespace ckpt_detail {

template <typename T>
void put(std::ostream& os, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(buf, sizeof(T));
}

template <typename T>
T get(std::istream& is, const char* what) {
  char buf[sizeof(T)];
  if (!is.read(buf, sizeof(T))) throw FormatError(std::string("checkpoint truncated while reading ") + what);
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace ckpt_detail

inline void write_checkpoint(std::ostream& os, const CheckpointData& c) {
  static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");
  const std::string js = c.meta.dump();
  os.write("RPCK", 4);
  ckpt_detail::put<std::uint32_t>(os, kCheckpointVersion);
  ckpt_detail::put<std::uint64_t>(os, js.size());
  os.write(js.data(), static_cast<std::streamsize>(js.size()));
  for (const auto& [name, t] : c.tensors) {
    ckpt_detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    ckpt_detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) ckpt_detail::put<std::uint64_t>(os, d);
    for (double v : t.data()) ckpt_detail::put<float>(os, static_cast<float>(v));
  }
  if (!os) throw FormatError("checkpoint write failed");
}

inline CheckpointData read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "RPCK", 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  const auto version = ckpt_detail::get<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto len = ckpt_detail::get<std::uint64_t>(is, "metadata length");
  if (len > (1u << 24)) throw FormatError("checkpoint metadata too large");
  std::string js(len, '\0');
  if (!is.read(js.data(), static_cast<std::streamsize>(len))) throw FormatError("checkpoint metadata truncated");
  CheckpointData c;
  try {
    c.meta = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  while (is.peek() != std::char_traits<char>::eof()) {
    const auto name_len = ckpt_detail::get<std::uint32_t>(is, "name length");
    if (name_len == 0 || name_len > 4096) throw FormatError("checkpoint: bad tensor name length");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw FormatError("checkpoint: tensor name truncated");
    const auto rank = ckpt_detail::get<std::uint32_t>(is, "rank");
    if (rank == 0 || rank > 8) throw FormatError("checkpoint: bad rank for " + name);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(ckpt_detail::get<std::uint64_t>(is, "dims"));
    Tensor t(shape);
    for (double& v : t.mutable_data()) v = ckpt_detail::get<float>(is, "tensor data");
    c.tensors.push_back({name, t});
  }
  return c;
}

inline CheckpointData make_checkpoint(const Model& model, std::uint64_t seed, std::uint64_t step,
                                      const nlohmann::json& run = nlohmann::json::object()) {
  CheckpointData c;
  c.meta = {{"model", to_json(model.config())}, {"seed", seed}, {"step", step}, {"run", run}};
  c.tensors = model.state();
  return c;
}

inline std::string checkpoint_bytes(const CheckpointData& c) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, c);
  return os.str();
}

inline void save_checkpoint(const std::string& path, const CheckpointData& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  write_checkpoint(os, c);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path + "'");
  return read_checkpoint(is);
}

// Copies stored tensors into the model's parameters and buffers. Every model
// tensor must appear exactly once with a matching shape.
inline void load_state(Model& model, const TensorList& tensors) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& nt : tensors) {
    if (!by_name.emplace(nt.name, &nt.tensor).second) throw FormatError("checkpoint: duplicate tensor '" + nt.name + "'");
  }
  const TensorList state = model.state();
  if (state.size() != by_name.size()) {
    throw FormatError("checkpoint: " + std::to_string(by_name.size()) + " tensors stored, model has " +
                      std::to_string(state.size()));
  }
  for (const auto& [name, t] : state) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing tensor '" + name + "'");
    if (it->second->shape() != t.shape()) {
      throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_str(it->second->shape()) +
                        ", model expects " + shape_str(t.shape()));
    }
    Tensor dst = t;
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
  }
}

inline Model model_from_checkpoint(const CheckpointData& c) {
  if (!c.meta.contains("model")) throw FormatError("checkpoint: metadata has no model config");
  Model m(model_config_from_json(c.meta.at("model")), c.meta.value("seed", std::uint64_t{0}));
  load_state(m, c.tensors);
  return m;
}

}  // namespace raypatch
