#pragma once

// Item embedding tables and interaction logs: loaders, writers and the
// leave-one-out split.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "macrec/error.hpp"
#include "macrec/tensor.hpp"

namespace macrec {

enum class Modality : std::uint8_t { kText = 0, kVision = 1 };

inline const char* to_string(Modality m) { return m == Modality::kText ? "text" : "vision"; }

inline Modality modality_from_string(const std::string& s) {
  if (s == "text") return Modality::kText;
  if (s == "vision" || s == "image") return Modality::kVision;
  throw ConfigError("unknown modality '" + s + "'");
}

class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(Modality m, std::vector<std::string> ids, Tensor matrix) : modality_(m) {
    if (matrix.rank() != 2 || matrix.rows() != ids.size())
      throw DataError("embedding matrix shape " + shape_str(matrix.shape) + " does not match " +
                      std::to_string(ids.size()) + " ids");
    if (ids.empty()) throw DataError("zero items");
    for (std::size_t r = 0; r < matrix.rows(); ++r)
      for (float v : matrix.row(r))
        if (!std::isfinite(v)) throw DataError("non-finite value in row for item '" + ids[r] + "'");
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (!index_.emplace(ids[i], i).second) throw DataError("duplicate item id '" + ids[i] + "'");
    ids_ = std::move(ids);
    matrix_ = std::move(matrix);
  }

  Modality modality() const noexcept { return modality_; }
  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t dim() const noexcept { return matrix_.cols(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const Tensor& matrix() const noexcept { return matrix_; }

  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  std::size_t index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw DataError("unknown item id '" + id + "'");
    return it->second;
  }
  std::span<const float> lookup(const std::string& id) const { return matrix_.row(index_of(id)); }
  std::span<const float> row(std::size_t i) const { return matrix_.row(i); }

  // Rows reordered to follow `order` (ids that must all exist here).
  EmbeddingTable reordered(const std::vector<std::string>& order) const {
    Tensor m = Tensor::matrix(order.size(), dim());
    for (std::size_t i = 0; i < order.size(); ++i) {
      auto src = lookup(order[i]);
      std::copy(src.begin(), src.end(), m.row(i).begin());
    }
    return EmbeddingTable(modality_, order, std::move(m));
  }

 private:
  Modality modality_ = Modality::kText;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> index_;
  Tensor matrix_;
};

// Both modalities must describe the same item set; the vision table is
// reordered to the text table's item order.
inline EmbeddingTable align_tables(const EmbeddingTable& text, const EmbeddingTable& vision) {
  if (text.size() != vision.size())
    throw DataError("text table has " + std::to_string(text.size()) + " items, vision table " +
                    std::to_string(vision.size()));
  for (const auto& id : text.ids())
    if (!vision.contains(id)) throw DataError("item '" + id + "' missing from vision table");
  return vision.reordered(text.ids());
}

// ---- binary embedding format -------------------------------------------
//   "EMB1" | u32 count | u32 dim | count x (u32 len | utf8 id | dim x f32)
// All integers and floats little-endian.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError("truncated file while reading " + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32(std::istream& is, const std::string& what) { return std::bit_cast<float>(get_u32(is, what)); }

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace detail

inline void write_embeddings_binary(const std::string& path, const EmbeddingTable& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os.write("EMB1", 4);
  detail::put_u32(os, static_cast<std::uint32_t>(t.size()));
  detail::put_u32(os, static_cast<std::uint32_t>(t.dim()));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto& id = t.ids()[i];
    detail::put_u32(os, static_cast<std::uint32_t>(id.size()));
    os.write(id.data(), static_cast<std::streamsize>(id.size()));
    for (float v : t.row(i)) detail::put_f32(os, v);
  }
  if (!os) throw DataError("write failed for '" + path + "'");
}

inline EmbeddingTable read_embeddings_binary(std::istream& is, Modality m) {
  char magic[4];
  if (!is.read(magic, 4)) throw DataError("zero items");
  if (std::memcmp(magic, "EMB1", 4) != 0) throw DataError("magic mismatch: expected EMB1");
  const std::uint32_t n = detail::get_u32(is, "item count");
  const std::uint32_t d = detail::get_u32(is, "dimension");
  if (n == 0) throw DataError("zero items");
  if (d == 0) throw DataError("zero dimension");
  std::vector<std::string> ids(n);
  Tensor mat = Tensor::matrix(n, d);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint32_t len = detail::get_u32(is, "id length");
    if (len > (1u << 20)) throw DataError("implausible id length " + std::to_string(len));
    ids[i].resize(len);
    if (!is.read(ids[i].data(), len)) throw DataError("truncated file while reading id");
    for (std::uint32_t j = 0; j < d; ++j) mat(i, j) = detail::get_f32(is, "row values of '" + ids[i] + "'");
  }
  if (is.peek() != std::char_traits<char>::eof()) throw DataError("trailing bytes after " + std::to_string(n) + " rows");
  return EmbeddingTable(m, std::move(ids), std::move(mat));
}

inline void write_embeddings_jsonl(const std::string& path, const EmbeddingTable& t) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  for (std::size_t i = 0; i < t.size(); ++i) {
    auto r = t.row(i);
    nlohmann::json j = {{"item", t.ids()[i]}, {"vec", std::vector<float>(r.begin(), r.end())}};
    os << j.dump() << '\n';
  }
}

inline EmbeddingTable read_embeddings_jsonl(std::istream& is, Modality m) {
  std::vector<std::string> ids;
  std::vector<float> values;
  std::size_t dim = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.contains("item") || !j.contains("vec")) throw DataError("line " + std::to_string(lineno) + ": missing item/vec");
    const auto& vec = j.at("vec");
    if (ids.empty()) dim = vec.size();
    if (vec.size() != dim || dim == 0)
      throw DataError("row-length mismatch at line " + std::to_string(lineno) + ": expected " + std::to_string(dim) +
                      ", got " + std::to_string(vec.size()));
    ids.push_back(j.at("item").get<std::string>());
    for (const auto& v : vec) {
      if (!v.is_number()) throw DataError("non-finite value at line " + std::to_string(lineno));
      values.push_back(v.get<float>());
    }
  }
  if (ids.empty()) throw DataError("zero items");
  const std::size_t n = ids.size();
  return EmbeddingTable(m, std::move(ids), Tensor(Shape{n, dim}, std::move(values)));
}

// Format is picked by extension: .jsonl / .json for JSON-lines, anything else
// is read as the binary format.
inline EmbeddingTable load_embeddings(const std::string& path, Modality m) {
  const bool jsonl = detail::ends_with(path, ".jsonl") || detail::ends_with(path, ".json");
  std::ifstream is(path, jsonl ? std::ios::in : std::ios::binary);
  if (!is) throw DataError("cannot open '" + path + "'");
  return jsonl ? read_embeddings_jsonl(is, m) : read_embeddings_binary(is, m);
}

inline void save_embeddings(const std::string& path, const EmbeddingTable& t) {
  if (detail::ends_with(path, ".jsonl") || detail::ends_with(path, ".json"))
    write_embeddings_jsonl(path, t);
  else
    write_embeddings_binary(path, t);
}

// ---- interactions --------------------------------------------------------

struct UserHistory {
  std::string user;
  std::vector<std::uint32_t> items;  // indices into InteractionLog::items, time order
};

struct LeaveOneOut {
  std::span<const std::uint32_t> train;
  std::uint32_t valid;
  std::uint32_t test;
};

struct InteractionLog {
  std::vector<std::string> items;  // item catalog
  std::vector<UserHistory> users;  // users with at least 3 interactions
  std::size_t dropped_users = 0;   // users skipped for having fewer than 3

  // Last item is the test target, second to last validation, rest training.
  static LeaveOneOut split(const UserHistory& u) {
    const auto n = u.items.size();
    return {std::span<const std::uint32_t>(u.items.data(), n - 2), u.items[n - 2], u.items[n - 1]};
  }

  double average_length() const {
    if (users.empty()) return 0.0;
    std::size_t total = 0;
    for (const auto& u : users) total += u.items.size();
    return static_cast<double>(total) / static_cast<double>(users.size());
  }

  // Re-express item indices in the row order of `table`. Every referenced
  // item must exist there.
  InteractionLog indexed_by(const EmbeddingTable& table) const {
    InteractionLog out;
    out.items = table.ids();
    out.dropped_users = dropped_users;
    std::vector<std::uint32_t> remap(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (!table.contains(items[i])) throw DataError("interaction references unknown item '" + items[i] + "'");
      remap[i] = static_cast<std::uint32_t>(table.index_of(items[i]));
    }
    out.users.reserve(users.size());
    for (const auto& u : users) {
      UserHistory h{u.user, {}};
      h.items.reserve(u.items.size());
      for (auto it : u.items) h.items.push_back(remap[it]);
      out.users.push_back(std::move(h));
    }
    return out;
  }
};

inline InteractionLog read_interactions(std::istream& is) {
  InteractionLog log;
  std::unordered_map<std::string, std::uint32_t> index;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("interactions line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.contains("user") || !j.contains("items"))
      throw DataError("interactions line " + std::to_string(lineno) + ": missing user/items");
    const auto& arr = j.at("items");
    if (arr.size() < 3) {
      ++log.dropped_users;
      continue;
    }
    UserHistory h{j.at("user").get<std::string>(), {}};
    for (const auto& it : arr) {
      const auto id = it.get<std::string>();
      auto [pos, inserted] = index.emplace(id, static_cast<std::uint32_t>(log.items.size()));
      if (inserted) log.items.push_back(id);
      h.items.push_back(pos->second);
    }
    log.users.push_back(std::move(h));
  }
  return log;
}

inline InteractionLog load_interactions(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open '" + path + "'");
  return read_interactions(is);
}

inline void save_interactions(const std::string& path, const InteractionLog& log) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  for (const auto& u : log.users) {
    nlohmann::json items = nlohmann::json::array();
    for (auto i : u.items) items.push_back(log.items[i]);
    os << nlohmann::json{{"user", u.user}, {"items", items}}.dump() << '\n';
  }
}

}  // namespace macrec
