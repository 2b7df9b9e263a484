#pragma once

// Codebook health: ID collisions, per-level codeword histograms, perplexity.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "macrec/error.hpp"
#include "macrec/semantic_id.hpp"

namespace macrec {

// Percentage of items whose full ID is shared: 100 * (N - distinct) / N.
inline double collision_rate(const SemanticIdTable& ids) {
  if (ids.size() == 0) return 0.0;
  std::unordered_set<std::uint64_t> distinct;
  for (std::size_t i = 0; i < ids.size(); ++i) distinct.insert(ids.key(i));
  return 100.0 * static_cast<double>(ids.size() - distinct.size()) / static_cast<double>(ids.size());
}

struct CodeHistogram {
  std::size_t level = 0;
  std::vector<std::size_t> counts;      // by codeword index
  std::vector<std::size_t> sorted;      // counts, descending
  std::vector<std::size_t> group_sums;  // consecutive groups of `group` sorted entries
};

inline CodeHistogram code_histogram(const SemanticIdTable& ids, std::size_t level, std::size_t group = 16) {
  if (level >= ids.levels)
    throw ConfigError("level " + std::to_string(level) + " >= " + std::to_string(ids.levels) + " levels");
  if (group == 0) throw ConfigError("histogram group size must be > 0");
  CodeHistogram h;
  h.level = level;
  h.counts.assign(ids.codebook_size, 0);
  for (std::size_t i = 0; i < ids.size(); ++i) ++h.counts.at(ids.id(i)[level]);
  h.sorted = h.counts;
  std::sort(h.sorted.begin(), h.sorted.end(), std::greater<>());
  for (std::size_t s = 0; s < h.sorted.size(); s += group) {
    std::size_t sum = 0;
    for (std::size_t k = s; k < std::min(h.sorted.size(), s + group); ++k) sum += h.sorted[k];
    h.group_sums.push_back(sum);
  }
  return h;
}

inline std::size_t codewords_used(const SemanticIdTable& ids, std::size_t level) {
  const auto h = code_histogram(ids, level);
  return static_cast<std::size_t>(std::count_if(h.counts.begin(), h.counts.end(), [](auto c) { return c > 0; }));
}

// exp(H) of the empirical codeword distribution at `level`, in [1, M].
inline double codebook_perplexity(const SemanticIdTable& ids, std::size_t level) {
  const auto h = code_histogram(ids, level);
  const double n = static_cast<double>(ids.size());
  if (n == 0) return 1.0;
  double entropy = 0.0;
  for (auto c : h.counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

struct DiagEntry {
  Modality modality = Modality::kText;
  std::size_t level = 0;
  double collision_rate = 0.0;  // full-ID rate, repeated on every level row
  double perplexity = 1.0;
  std::vector<std::size_t> group_sums;
};

// One entry per (modality, level) for the given ID tables.
inline std::vector<DiagEntry> diagnose(const std::vector<const SemanticIdTable*>& tables) {
  std::vector<DiagEntry> out;
  for (const auto* t : tables) {
    const double rate = collision_rate(*t);
    for (std::size_t l = 0; l < t->levels; ++l)
      out.push_back({t->modality, l, rate, codebook_perplexity(*t, l), code_histogram(*t, l).group_sums});
  }
  return out;
}

inline nlohmann::ordered_json diag_to_json(const std::vector<DiagEntry>& entries) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    nlohmann::ordered_json j;
    j["modality"] = to_string(e.modality);
    j["level"] = e.level;
    j["collision_rate"] = e.collision_rate;
    j["perplexity"] = e.perplexity;
    j["group_sums"] = e.group_sums;
    arr.push_back(j);
  }
  return arr;
}

// Long format: one row per histogram bar.
inline void write_diag_csv(const std::string& path, const std::vector<DiagEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os << "modality,level,collision_rate,perplexity,group,group_sum\n";
  for (const auto& e : entries)
    for (std::size_t g = 0; g < e.group_sums.size(); ++g)
      os << to_string(e.modality) << ',' << e.level << ',' << e.collision_rate << ',' << e.perplexity << ',' << g
         << ',' << e.group_sums[g] << '\n';
}

}  // namespace macrec
