#pragma once

#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "macrec/data_io.hpp"
#include "macrec/error.hpp"

namespace macrec {

using Code = std::uint32_t;

// Level letter used in token surface forms: a, b, c, ... for text and
// A, B, C, ... for vision.
inline char level_letter(Modality m, std::size_t level) {
  if (level >= 26) throw ConfigError("at most 26 semantic-ID levels are supported");
  return static_cast<char>((m == Modality::kText ? 'a' : 'A') + level);
}

inline std::string code_token(Modality m, std::size_t level, Code code) {
  return std::string("<") + level_letter(m, level) + "_" + std::to_string(code) + ">";
}

inline std::string sid_string(Modality m, std::span<const Code> codes) {
  std::string s;
  for (std::size_t l = 0; l < codes.size(); ++l) s += code_token(m, l, codes[l]);
  return s;
}

// Semantic IDs of one modality: N items x L levels, row i for item i.
struct SemanticIdTable {
  Modality modality = Modality::kText;
  std::size_t levels = 0;
  std::size_t codebook_size = 0;
  std::vector<Code> codes;

  std::size_t size() const { return levels == 0 ? 0 : codes.size() / levels; }
  std::span<const Code> id(std::size_t item) const { return {codes.data() + item * levels, levels}; }
  std::span<Code> id(std::size_t item) { return {codes.data() + item * levels, levels}; }
  std::string str(std::size_t item) const { return sid_string(modality, id(item)); }

  // Packs a full ID into one integer key (codebook_size^levels must fit).
  std::uint64_t key(std::span<const Code> c) const {
    std::uint64_t k = 0;
    for (Code v : c) k = k * codebook_size + v;
    return k;
  }
  std::uint64_t key(std::size_t item) const { return key(id(item)); }
};

struct ItemSemanticIds {
  std::vector<std::string> items;
  SemanticIdTable text;
  SemanticIdTable vision;
};

inline void save_semantic_ids(const std::string& path, const ItemSemanticIds& ids) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  for (std::size_t i = 0; i < ids.items.size(); ++i) {
    auto t = ids.text.id(i);
    auto v = ids.vision.id(i);
    nlohmann::ordered_json j;
    j["item"] = ids.items[i];
    j["text_sid"] = std::vector<Code>(t.begin(), t.end());
    j["vision_sid"] = std::vector<Code>(v.begin(), v.end());
    j["text_str"] = ids.text.str(i);
    j["vision_str"] = ids.vision.str(i);
    os << j.dump() << '\n';
  }
}

inline ItemSemanticIds load_semantic_ids(const std::string& path, std::size_t codebook_size) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open '" + path + "'");
  ItemSemanticIds out;
  out.text.modality = Modality::kText;
  out.vision.modality = Modality::kVision;
  out.text.codebook_size = out.vision.codebook_size = codebook_size;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    out.items.push_back(j.at("item").get<std::string>());
    auto t = j.at("text_sid").get<std::vector<Code>>();
    auto v = j.at("vision_sid").get<std::vector<Code>>();
    if (out.text.levels == 0) out.text.levels = t.size();
    if (out.vision.levels == 0) out.vision.levels = v.size();
    if (t.size() != out.text.levels || v.size() != out.vision.levels)
      throw DataError("inconsistent semantic-ID length for item '" + out.items.back() + "'");
    for (Code c : t)
      if (c >= codebook_size) throw DataError("code " + std::to_string(c) + " >= codebook size");
    for (Code c : v)
      if (c >= codebook_size) throw DataError("code " + std::to_string(c) + " >= codebook size");
    out.text.codes.insert(out.text.codes.end(), t.begin(), t.end());
    out.vision.codes.insert(out.vision.codes.end(), v.begin(), v.end());
  }
  if (out.items.empty()) throw DataError("no semantic IDs in '" + path + "'");
  return out;
}

// Re-expresses `ids` in the row order of `items`.
inline ItemSemanticIds reorder_semantic_ids(const ItemSemanticIds& ids, const std::vector<std::string>& items) {
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < ids.items.size(); ++i) pos[ids.items[i]] = i;
  ItemSemanticIds out{items, ids.text, ids.vision};
  out.text.codes.clear();
  out.vision.codes.clear();
  for (const auto& it : items) {
    auto p = pos.find(it);
    if (p == pos.end()) throw DataError("item '" + it + "' has no semantic ID");
    auto t = ids.text.id(p->second);
    auto v = ids.vision.id(p->second);
    out.text.codes.insert(out.text.codes.end(), t.begin(), t.end());
    out.vision.codes.insert(out.vision.codes.end(), v.begin(), v.end());
  }
  return out;
}

}  // namespace macrec
