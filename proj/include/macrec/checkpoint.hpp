#pragma once

// Versioned binary checkpoint of a ParamStore:
//   "MRCK" | u32 version | u32 header_len | header (JSON text)
//   | u32 count | count x (u32 name_len | name | u32 rank | rank x u32 dim | f32 data)

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "macrec/autodiff.hpp"
#include "macrec/data_io.hpp"
#include "macrec/error.hpp"

namespace macrec {

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const ParamStore& store, const nlohmann::json& header) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os.write("MRCK", 4);
  detail::put_u32(os, kCheckpointVersion);
  const std::string h = header.dump();
  detail::put_u32(os, static_cast<std::uint32_t>(h.size()));
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  detail::put_u32(os, static_cast<std::uint32_t>(store.size()));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store[i];
    detail::put_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : p.value.data) detail::put_f32(os, v);
  }
  if (!os) throw DataError("write failed for '" + path + "'");
}

inline nlohmann::json read_checkpoint_header(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "MRCK") throw DataError("'" + path + "' is not a checkpoint");
  const auto version = detail::get_u32(is, "checkpoint version");
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto hl = detail::get_u32(is, "header length");
  std::string h(hl, '\0');
  if (!is.read(h.data(), hl)) throw DataError("truncated checkpoint header");
  return nlohmann::json::parse(h);
}

// Loads values into an already-constructed store; names and shapes must match.
inline nlohmann::json load_checkpoint(const std::string& path, ParamStore& store) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "MRCK") throw DataError("'" + path + "' is not a checkpoint");
  const auto version = detail::get_u32(is, "checkpoint version");
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto hl = detail::get_u32(is, "header length");
  std::string h(hl, '\0');
  if (!is.read(h.data(), hl)) throw DataError("truncated checkpoint header");
  const auto count = detail::get_u32(is, "tensor count");
  if (count != store.size())
    throw DataError("checkpoint has " + std::to_string(count) + " tensors, model expects " + std::to_string(store.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto nl = detail::get_u32(is, "name length");
    std::string name(nl, '\0');
    if (!is.read(name.data(), nl)) throw DataError("truncated checkpoint");
    auto* p = store.find(name);
    if (!p) throw DataError("checkpoint tensor '" + name + "' not in model");
    const auto rank = detail::get_u32(is, "rank");
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_u32(is, "dim");
    if (shape != p->value.shape)
      throw DataError("shape of '" + name + "': checkpoint " + shape_str(shape) + ", model " + shape_str(p->value.shape));
    for (auto& v : p->value.data) v = detail::get_f32(is, "tensor data");
  }
  return nlohmann::json::parse(h);
}

}  // namespace macrec
