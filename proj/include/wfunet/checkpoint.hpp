#pragma once

// Checkpoint directory: meta.json (model type, config, layer table, seed)
// plus params.bin (layers concatenated in meta order, float32 little-endian).

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "wfunet/error.hpp"
#include "wfunet/grid_io.hpp"
#include "wfunet/model_core.hpp"
#include "wfunet/model_fusion.hpp"

namespace wfunet {

struct CheckpointInfo {
  std::string model_type;
  CoreUNetConfig config;
  std::uint64_t seed = 0;
  nlohmann::json layers;
  nlohmann::json extra;
};

namespace ckpt {

inline nlohmann::json layer_table(const auto& params) {
  nlohmann::json t = nlohmann::json::array();
  for (const auto& p : params.tensors()) t.push_back({{"name", p.name}, {"shape", p.shape}});
  return t;
}

template <typename S>
void write_params(const ParameterSet<S>& params, const std::filesystem::path& file) {
  std::vector<char> bytes;
  bytes.reserve(params.total_count() * 4);
  for (const auto& t : params.tensors()) {
    for (S v : t.values) {
      const auto u = rgs::to_le(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      const char* b = reinterpret_cast<const char*>(&u);
      bytes.insert(bytes.end(), b, b + 4);
    }
  }
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + file.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + file.string() + "'");
}

/// Fills `params` (layout already declared) from a params.bin file.
template <typename S>
void read_params(ParameterSet<S>& params, const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw CorruptionError("cannot open '" + file.string() + "'");
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  std::size_t offset = 0;
  for (auto& t : params.tensors()) {
    const std::size_t need = 4 * t.values.size();
    if (offset + need > bytes.size())
      throw CorruptionError("'" + file.string() + "' truncated in layer '" + t.name + "' (needs " +
                            std::to_string(offset + need) + " bytes, file has " +
                            std::to_string(bytes.size()) + ")");
    for (auto& v : t.values) {
      std::uint32_t u;
      std::memcpy(&u, bytes.data() + offset, 4);
      v = static_cast<S>(std::bit_cast<float>(rgs::to_le(u)));
      offset += 4;
    }
  }
  if (offset != bytes.size())
    throw CorruptionError("'" + file.string() + "' has " + std::to_string(bytes.size() - offset) +
                          " unexpected trailing bytes");
}

/// Writes into a sibling temporary directory, then swaps it into place.
template <typename Writer>
void write_directory_atomically(const std::filesystem::path& dir, Writer&& writer) {
  namespace fs = std::filesystem;
  const fs::path tmp = dir.string() + ".tmp";
  const fs::path old = dir.string() + ".old";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  writer(tmp);
  fs::remove_all(old);
  if (fs::exists(dir)) fs::rename(dir, old);
  fs::rename(tmp, dir);
  fs::remove_all(old);
}

}  // namespace ckpt

template <typename Model>
void save_checkpoint(const Model& model, const std::filesystem::path& dir,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json meta;
  meta["model_type"] = Model::kTypeName;
  meta["config"] = to_json(model.config());
  meta["seed"] = model.seed();
  meta["layers"] = ckpt::layer_table(model.parameters());
  meta["extra"] = extra;
  ckpt::write_directory_atomically(dir, [&](const std::filesystem::path& tmp) {
    std::ofstream m(tmp / "meta.json");
    if (!m) throw IoError("cannot write '" + (tmp / "meta.json").string() + "'");
    m << meta.dump(2) << '\n';
    m.close();
    ckpt::write_params(model.parameters(), tmp / "params.bin");
  });
}

inline CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw ConfigurationError("no checkpoint at '" + dir.string() + "'");
  try {
    nlohmann::json j;
    in >> j;
    CheckpointInfo info;
    info.model_type = j.at("model_type").get<std::string>();
    info.config = core_config_from_json(j.at("config"));
    info.seed = j.value("seed", std::uint64_t{0});
    info.layers = j.at("layers");
    info.extra = j.value("extra", nlohmann::json::object());
    return info;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError("'" + (dir / "meta.json").string() + "': " + e.what());
  }
}

template <typename Model>
Model load_checkpoint(const std::filesystem::path& dir) {
  const auto info = read_checkpoint_info(dir);
  if (info.model_type != Model::kTypeName)
    throw ModelTypeError("checkpoint '" + dir.string() + "' holds a " + info.model_type +
                         ", not a " + Model::kTypeName);
  Model model(info.config, info.seed);
  const auto expected = ckpt::layer_table(model.parameters());
  if (info.layers != expected) {
    std::string where = "layer count";
    const auto n = std::min(info.layers.size(), expected.size());
    for (std::size_t i = 0; i < n; ++i) {
      if (info.layers[i] != expected[i]) {
        where = "layer '" + expected[i].value("name", std::string{}) + "'";
        break;
      }
    }
    throw CorruptionError("shape table of '" + dir.string() + "' disagrees with its config at " +
                          where);
  }
  ckpt::read_params(model.parameters(), dir / "params.bin");
  return model;
}

template <typename S>
using AnyModel = std::variant<CoreUNet<S>, WFUNet<S>>;

template <typename S = float>
AnyModel<S> load_any_checkpoint(const std::filesystem::path& dir) {
  const auto info = read_checkpoint_info(dir);
  if (info.model_type == CoreUNet<S>::kTypeName) return load_checkpoint<CoreUNet<S>>(dir);
  if (info.model_type == WFUNet<S>::kTypeName) return load_checkpoint<WFUNet<S>>(dir);
  throw ModelTypeError("unknown model type '" + info.model_type + "' in '" + dir.string() + "'");
}

}  // namespace wfunet
