#pragma once

// Trie-constrained beam search over semantic IDs, teacher-forced candidate
// scoring, text/vision ensembling and leave-one-out ranking metrics.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "macrec/data_io.hpp"
#include "macrec/error.hpp"
#include "macrec/grm.hpp"
#include "macrec/semantic_id.hpp"

namespace macrec {

// Prefix tree over the code-token sequences of one modality's IDs.
class IdTrie {
 public:
  static constexpr std::uint32_t kRoot = 0;

  struct Node {
    std::vector<std::pair<Token, std::uint32_t>> children;  // sorted by token
    std::int64_t item = -1;                                 // set on terminals
  };

  IdTrie() : nodes_(1) {}

  IdTrie(const SemanticIdTable& ids, const Vocab& vocab) : nodes_(1), modality_(ids.modality), depth_(ids.levels) {
    std::vector<Token> seq;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      seq.clear();
      vocab.append_item(seq, ids, i);
      insert(seq, i);
    }
  }

  void insert(const std::vector<Token>& seq, std::size_t item) {
    if (depth_ == 0) depth_ = seq.size();
    if (seq.size() != depth_) throw DataError("ID length " + std::to_string(seq.size()) + " != " + std::to_string(depth_));
    std::uint32_t n = kRoot;
    for (Token tok : seq) {
      auto& ch = nodes_[n].children;
      auto it = std::lower_bound(ch.begin(), ch.end(), tok, [](const auto& p, Token t) { return p.first < t; });
      if (it == ch.end() || it->first != tok) {
        const auto id = static_cast<std::uint32_t>(nodes_.size());
        it = ch.insert(it, {tok, id});
        nodes_.emplace_back();
      }
      n = it->second;
    }
    if (nodes_[n].item >= 0)
      throw DataError("duplicate semantic ID for items " + std::to_string(nodes_[n].item) + " and " + std::to_string(item));
    nodes_[n].item = static_cast<std::int64_t>(item);
    ++terminals_;
  }

  const Node& node(std::uint32_t n) const { return nodes_.at(n); }
  std::size_t terminals() const noexcept { return terminals_; }
  std::size_t depth() const noexcept { return depth_; }
  std::size_t node_count() const noexcept { return nodes_.size(); }
  Modality modality() const noexcept { return modality_; }
  bool empty() const noexcept { return terminals_ == 0; }

  std::optional<std::uint32_t> child(std::uint32_t n, Token tok) const {
    const auto& ch = nodes_.at(n).children;
    auto it = std::lower_bound(ch.begin(), ch.end(), tok, [](const auto& p, Token t) { return p.first < t; });
    if (it == ch.end() || it->first != tok) return std::nullopt;
    return it->second;
  }

  // Item whose full ID is `seq`, if any.
  std::optional<std::size_t> find(std::span<const Token> seq) const {
    std::uint32_t n = kRoot;
    for (Token tok : seq) {
      auto c = child(n, tok);
      if (!c) return std::nullopt;
      n = *c;
    }
    if (nodes_[n].item < 0) return std::nullopt;
    return static_cast<std::size_t>(nodes_[n].item);
  }

 private:
  std::vector<Node> nodes_;
  Modality modality_ = Modality::kText;
  std::size_t depth_ = 0;
  std::size_t terminals_ = 0;
};

struct ScoredItem {
  std::size_t item = 0;
  double score = 0.0;
};
using RankedList = std::vector<ScoredItem>;

// Descending score; ties to the lower item index.
inline void sort_ranked(RankedList& r) {
  std::sort(r.begin(), r.end(), [](const ScoredItem& a, const ScoredItem& b) {
    return a.score != b.score ? a.score > b.score : a.item < b.item;
  });
}

namespace detail {

// Next-token log-probabilities after each decoder prefix (one row per prefix).
inline Tensor next_token_logprobs(const GrmModel& model, Tape& t, Var memory, const std::vector<RowRange>& mem_ranges,
                                  const std::vector<std::vector<Token>>& prefixes) {
  const auto dec = Packed::of(prefixes);
  Var hidden = model.decode(t, memory, mem_ranges, dec, std::vector<std::uint32_t>(prefixes.size(), 0));
  std::vector<std::uint32_t> last;
  for (const auto& r : dec.ranges) last.push_back(r.end - 1);
  return t.value(t.log_softmax(model.logits(t, t.gather_rows(hidden, std::move(last)))));
}

}  // namespace detail

// Beam search in which every expansion is restricted to the children of the
// beam's trie node. Score = sum of the code-token log-probabilities under the
// full-vocabulary softmax. Returns the best k completed IDs.
inline RankedList constrained_beam_search(const GrmModel& model, const std::vector<Token>& input, const IdTrie& trie,
                                          std::size_t beam_width, std::size_t k) {
  if (trie.empty()) throw DataError("constrained beam search over an empty trie");
  if (k == 0 || beam_width < k) throw ConfigError("beam search needs 1 <= k <= beam width");
  Tape t(false);
  const auto src = Packed::of(std::vector<std::vector<Token>>{input});
  Var memory = model.encode(t, src);

  struct Beam {
    std::vector<Token> prefix;  // BOS then chosen tokens
    std::uint32_t node;
    double score;
  };
  std::vector<Beam> beams{{{Vocab::kBos}, IdTrie::kRoot, 0.0}};
  for (std::size_t step = 0; step < trie.depth(); ++step) {
    std::vector<std::vector<Token>> prefixes;
    for (const auto& b : beams) prefixes.push_back(b.prefix);
    const Tensor lp = detail::next_token_logprobs(model, t, memory, src.ranges, prefixes);
    std::vector<Beam> next;
    for (std::size_t bi = 0; bi < beams.size(); ++bi)
      for (const auto& [tok, child] : trie.node(beams[bi].node).children) {
        Beam nb{beams[bi].prefix, child, beams[bi].score + static_cast<double>(lp(bi, tok))};
        nb.prefix.push_back(tok);
        next.push_back(std::move(nb));
      }
    const std::size_t keep = std::min(beam_width, next.size());
    std::partial_sort(next.begin(), next.begin() + static_cast<std::ptrdiff_t>(keep), next.end(),
                      [](const Beam& a, const Beam& b) { return a.score != b.score ? a.score > b.score : a.prefix < b.prefix; });
    next.resize(keep);
    beams = std::move(next);
  }
  RankedList out;
  for (const auto& b : beams) out.push_back({static_cast<std::size_t>(trie.node(b.node).item), b.score});
  sort_ranked(out);
  if (out.size() > k) out.resize(k);
  return out;
}

// Teacher-forced sum of log-probabilities of each candidate's code tokens.
inline std::vector<double> forced_scores(const GrmModel& model, const std::vector<Token>& input,
                                         const std::vector<std::vector<Token>>& candidates) {
  if (candidates.empty()) return {};
  for (const auto& c : candidates)
    for (Token tok : c)
      if (tok >= model.vocab().size()) throw DataError("candidate token " + std::to_string(tok) + " outside vocabulary");
  Tape t(false);
  const auto src = Packed::of(std::vector<std::vector<Token>>{input});
  Var memory = model.encode(t, src);
  // Decoder inputs: BOS followed by all but the last code token.
  std::vector<std::vector<Token>> dec_in;
  for (const auto& c : candidates) {
    if (c.empty()) throw DataError("empty candidate");
    std::vector<Token> in{Vocab::kBos};
    in.insert(in.end(), c.begin(), c.end() - 1);
    dec_in.push_back(std::move(in));
  }
  const auto dec = Packed::of(dec_in);
  Var hidden = model.decode(t, memory, src.ranges, dec, std::vector<std::uint32_t>(candidates.size(), 0));
  const Tensor lp = t.value(t.log_softmax(model.logits(t, hidden)));
  std::vector<double> out;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    double score = 0.0;
    for (std::size_t j = 0; j < candidates[s].size(); ++j)
      score += static_cast<double>(lp(dec.ranges[s].begin + j, candidates[s][j]));
    out.push_back(score);
  }
  return out;
}

inline double forced_score(const GrmModel& model, const std::vector<Token>& input, const std::vector<Token>& candidate) {
  return forced_scores(model, input, {candidate}).front();
}

struct EnsembleResult {
  RankedList text, vision, ensemble;
};

// Beam search per modality, union of the returned items, and each union member
// ranked by the mean of its text and vision forced scores.
inline EnsembleResult ensemble_rank(const GrmModel& model, std::span<const std::uint32_t> history,
                                    const ItemSemanticIds& ids, const IdTrie& trie_t, const IdTrie& trie_v,
                                    std::size_t window, std::size_t beam_width, std::size_t k) {
  const Vocab& vocab = model.vocab();
  const auto xt = history_input(Task::kRecText, history, ids, vocab, window);
  const auto xv = history_input(Task::kRecVision, history, ids, vocab, window);
  EnsembleResult r;
  r.text = constrained_beam_search(model, xt, trie_t, beam_width, beam_width);
  r.vision = constrained_beam_search(model, xv, trie_v, beam_width, beam_width);

  std::map<std::size_t, std::array<std::optional<double>, 2>> pool;
  for (const auto& s : r.text) pool[s.item][0] = s.score;
  for (const auto& s : r.vision) pool[s.item][1] = s.score;
  for (int m = 0; m < 2; ++m) {
    const auto& table = m == 0 ? ids.text : ids.vision;
    std::vector<std::size_t> missing;
    std::vector<std::vector<Token>> cands;
    for (const auto& [item, sc] : pool)
      if (!sc[m]) {
        missing.push_back(item);
        cands.emplace_back();
        vocab.append_item(cands.back(), table, item);
      }
    const auto scores = forced_scores(model, m == 0 ? xt : xv, cands);
    for (std::size_t i = 0; i < missing.size(); ++i) pool[missing[i]][m] = scores[i];
  }
  for (const auto& [item, sc] : pool) r.ensemble.push_back({item, 0.5 * (*sc[0] + *sc[1])});
  sort_ranked(r.ensemble);
  for (auto* l : {&r.text, &r.vision, &r.ensemble})
    if (l->size() > k) l->resize(k);
  return r;
}

// ---- metrics -----------------------------------------------------------------------

inline constexpr std::array<std::size_t, 3> kCutoffs{1, 5, 10};

struct Metrics {
  std::array<double, 3> hr{};    // at kCutoffs
  std::array<double, 3> ndcg{};  // at kCutoffs
  std::size_t users = 0;
  std::size_t missing = 0;  // users without a ranking, counted as misses

  double hr_at(std::size_t k) const { return hr[index(k)]; }
  double ndcg_at(std::size_t k) const { return ndcg[index(k)]; }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    for (std::size_t i = 0; i < kCutoffs.size(); ++i) j["HR@" + std::to_string(kCutoffs[i])] = hr[i];
    for (std::size_t i = 0; i < kCutoffs.size(); ++i) j["NDCG@" + std::to_string(kCutoffs[i])] = ndcg[i];
    j["users"] = users;
    j["missing"] = missing;
    return j;
  }

 private:
  static std::size_t index(std::size_t k) {
    for (std::size_t i = 0; i < kCutoffs.size(); ++i)
      if (kCutoffs[i] == k) return i;
    throw ConfigError("metrics only kept at K in {1, 5, 10}");
  }
};

// HR@K: share of users whose target is in the top K. NDCG@K: mean of
// 1 / log2(rank + 1) for a hit at 1-based rank <= K, else 0.
inline Metrics evaluate(const std::vector<std::optional<std::vector<std::size_t>>>& rankings,
                        const std::vector<std::size_t>& truth) {
  if (rankings.size() != truth.size()) throw DataError("rankings and ground truth differ in length");
  Metrics m;
  m.users = truth.size();
  for (std::size_t u = 0; u < truth.size(); ++u) {
    if (!rankings[u]) {
      ++m.missing;
      continue;
    }
    const auto& r = *rankings[u];
    const auto it = std::find(r.begin(), r.end(), truth[u]);
    if (it == r.end()) continue;
    const std::size_t rank = static_cast<std::size_t>(it - r.begin()) + 1;
    for (std::size_t i = 0; i < kCutoffs.size(); ++i)
      if (rank <= kCutoffs[i]) {
        m.hr[i] += 1.0;
        m.ndcg[i] += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
      }
  }
  if (m.users > 0)
    for (std::size_t i = 0; i < kCutoffs.size(); ++i) {
      m.hr[i] /= static_cast<double>(m.users);
      m.ndcg[i] /= static_cast<double>(m.users);
    }
  return m;
}

inline std::vector<std::size_t> items_of(const RankedList& r) {
  std::vector<std::size_t> out;
  for (const auto& s : r) out.push_back(s.item);
  return out;
}

// Catalog ranked by training-split interaction count (ties to lower index).
inline std::vector<std::size_t> popularity_ranking(const InteractionLog& log) {
  std::vector<std::size_t> count(log.items.size(), 0);
  for (const auto& u : log.users)
    for (auto i : InteractionLog::split(u).train) ++count[i];
  std::vector<std::size_t> order(log.items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return count[a] > count[b]; });
  return order;
}

enum class Split { kValid, kTest };

struct EvalOptions {
  Split split = Split::kTest;
  std::size_t window = 20;
  std::size_t beam_width = 20;
  std::size_t k = 10;
  std::size_t max_users = 0;  // 0: all users; otherwise the first max_users
  bool ensemble = true;       // false: text beam only
  std::size_t threads = 1;    // users scored concurrently; results do not depend on it
};

struct EvalReport {
  Metrics text, vision, ensemble;
  std::vector<EnsembleResult> per_user;
};

// History: training split (validation) or training split plus the validation
// item (test). Target: the held-out item.
inline std::vector<std::uint32_t> eval_history(const UserHistory& u, Split split) {
  const auto s = InteractionLog::split(u);
  std::vector<std::uint32_t> h(s.train.begin(), s.train.end());
  if (split == Split::kTest) h.push_back(s.valid);
  return h;
}

// Runs body(i) for i in [0, n) on up to `threads` workers. Each index is
// handled exactly once; the first exception is rethrown after all join.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& body) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

inline EvalReport evaluate_model(const GrmModel& model, const InteractionLog& log, const ItemSemanticIds& ids,
                                 const IdTrie& trie_t, const IdTrie& trie_v, const EvalOptions& opt,
                                 bool keep_rankings = false) {
  const std::size_t n = opt.max_users == 0 ? log.users.size() : std::min(opt.max_users, log.users.size());
  std::vector<EnsembleResult> results(n);
  std::vector<std::size_t> truth(n);
  parallel_for(n, opt.threads, [&](std::size_t u) {
    const auto& user = log.users[u];
    const auto s = InteractionLog::split(user);
    truth[u] = opt.split == Split::kTest ? s.test : s.valid;
    const auto hist = eval_history(user, opt.split);
    if (opt.ensemble) {
      results[u] = ensemble_rank(model, hist, ids, trie_t, trie_v, opt.window, opt.beam_width, opt.k);
    } else {
      const auto x = history_input(Task::kRecText, hist, ids, model.vocab(), opt.window);
      results[u].text = constrained_beam_search(model, x, trie_t, opt.beam_width, opt.k);
    }
  });
  std::vector<std::optional<std::vector<std::size_t>>> rt, rv, re;
  for (const auto& r : results) {
    rt.push_back(items_of(r.text));
    rv.push_back(items_of(r.vision));
    re.push_back(items_of(r.ensemble));
  }
  EvalReport rep;
  rep.text = evaluate(rt, truth);
  if (opt.ensemble) {
    rep.vision = evaluate(rv, truth);
    rep.ensemble = evaluate(re, truth);
  }
  if (keep_rankings) rep.per_user = std::move(results);
  return rep;
}

}  // namespace macrec
