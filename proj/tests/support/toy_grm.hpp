#pragma once

// Small generative models and ID tables for decoding tests.

#include <set>
#include <string>
#include <vector>

#include "macrec/inference.hpp"

namespace macrec::testing {

// Distinct random IDs for n items, L levels, M codes.
inline ItemSemanticIds random_ids(std::size_t n, std::size_t levels, std::size_t m, std::uint64_t seed) {
  Rng rng(seed, "ids");
  ItemSemanticIds ids;
  for (std::size_t i = 0; i < n; ++i) ids.items.push_back("item" + std::to_string(i));
  for (auto* t : {&ids.text, &ids.vision}) {
    t->levels = levels;
    t->codebook_size = m;
    std::set<std::vector<Code>> used;
    while (used.size() < n) {
      std::vector<Code> c(levels);
      for (auto& v : c) v = static_cast<Code>(rng.below(m));
      if (used.insert(c).second) t->codes.insert(t->codes.end(), c.begin(), c.end());
    }
  }
  ids.vision.modality = Modality::kVision;
  return ids;
}

inline std::vector<Token> tokens_of(const Vocab& v, const SemanticIdTable& t, std::size_t item) {
  std::vector<Token> out;
  v.append_item(out, t, item);
  return out;
}

// Ranking of the whole catalog by forced score (ties to lower index).
inline RankedList exhaustive(const GrmModel& m, const std::vector<Token>& x, const SemanticIdTable& t) {
  std::vector<std::vector<Token>> cands;
  for (std::size_t i = 0; i < t.size(); ++i) cands.push_back(tokens_of(m.vocab(), t, i));
  const auto s = forced_scores(m, x, cands);
  RankedList r;
  for (std::size_t i = 0; i < s.size(); ++i) r.push_back({i, s[i]});
  sort_ranked(r);
  return r;
}

// A few optimizer steps on random rec examples so the model is not uniform.
inline void train_toy(GrmModel& m, const ItemSemanticIds& ids, std::uint64_t seed, int steps = 40) {
  Rng rng(seed, "toy");
  AdamW opt(m.params(), {.lr = 5e-3});
  const auto& v = m.vocab();
  for (int s = 0; s < steps; ++s) {
    std::vector<TrainingExample> batch;
    for (int b = 0; b < 8; ++b) {
      const auto a = static_cast<std::uint32_t>(rng.below(ids.items.size()));
      const auto c = static_cast<std::uint32_t>((a * 7 + 3) % ids.items.size());
      const std::uint32_t hist[1] = {a};
      const Task task = b % 2 ? Task::kRecText : Task::kRecVision;
      batch.push_back({task, history_input(task, hist, ids, v, 5), target_output(task, c, ids, v)});
    }
    std::vector<const TrainingExample*> ptrs;
    for (const auto& e : batch) ptrs.push_back(&e);
    m.params().zero_grad();
    Tape t;
    t.backward(seq2seq_loss(t, m, ptrs).loss);
    opt.step();
  }
}

}  // namespace macrec::testing
