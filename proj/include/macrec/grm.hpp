#pragma once

// Generative recommender: an encoder-decoder transformer over semantic-ID
// tokens, the six-task training set, the sequence-to-sequence objective and
// the implicit alignment of text and vision ID encodings.

#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "macrec/autodiff.hpp"
#include "macrec/data_io.hpp"
#include "macrec/error.hpp"
#include "macrec/losses.hpp"
#include "macrec/nn.hpp"
#include "macrec/optim.hpp"
#include "macrec/rng.hpp"
#include "macrec/semantic_id.hpp"

namespace macrec {

using Token = std::uint32_t;

// ---- tasks and vocabulary ----------------------------------------------------

enum class Task : std::uint8_t { kRecText, kRecVision, kItemTextToVision, kItemVisionToText, kSeqTextToVision, kSeqVisionToText };

inline constexpr std::array<Task, 6> kAllTasks{Task::kRecText,          Task::kRecVision,
                                               Task::kItemTextToVision, Task::kItemVisionToText,
                                               Task::kSeqTextToVision,  Task::kSeqVisionToText};

inline const char* task_name(Task t) {
  switch (t) {
    case Task::kRecText: return "rec-t";
    case Task::kRecVision: return "rec-v";
    case Task::kItemTextToVision: return "item-t2v";
    case Task::kItemVisionToText: return "item-v2t";
    case Task::kSeqTextToVision: return "seq-t2v";
    case Task::kSeqVisionToText: return "seq-v2t";
  }
  return "?";
}

inline Task task_from_name(const std::string& s) {
  for (Task t : kAllTasks)
    if (s == task_name(t)) return t;
  throw DataError("unknown task '" + s + "'");
}

inline Modality task_source(Task t) {
  switch (t) {
    case Task::kRecText:
    case Task::kItemTextToVision:
    case Task::kSeqTextToVision: return Modality::kText;
    default: return Modality::kVision;
  }
}

inline Modality task_target(Task t) {
  switch (t) {
    case Task::kRecText:
    case Task::kItemVisionToText:
    case Task::kSeqVisionToText: return Modality::kText;
    default: return Modality::kVision;
  }
}

inline Task rec_task(Modality m) { return m == Modality::kText ? Task::kRecText : Task::kRecVision; }

// Token ids: PAD, BOS, EOS, six task tags, then L*M text code tokens and L*M
// vision code tokens, each block ordered by (level, code).
class Vocab {
 public:
  static constexpr Token kPad = 0, kBos = 1, kEos = 2, kFirstTag = 3;
  static constexpr Token kFirstCode = kFirstTag + 6;

  Vocab() = default;
  Vocab(std::size_t levels, std::size_t codebook_size) : levels_(levels), m_(codebook_size) {
    surface_ = {"<pad>", "<bos>", "<eos>"};
    for (Task t : kAllTasks) surface_.push_back(std::string("<") + task_name(t) + ">");
    for (Modality mod : {Modality::kText, Modality::kVision})
      for (std::size_t l = 0; l < levels; ++l)
        for (std::size_t c = 0; c < codebook_size; ++c) surface_.push_back(code_token(mod, l, static_cast<Code>(c)));
    for (std::size_t i = 0; i < surface_.size(); ++i)
      if (!index_.emplace(surface_[i], static_cast<Token>(i)).second)
        throw ConfigError("duplicate vocabulary token " + surface_[i]);
  }

  std::size_t size() const noexcept { return surface_.size(); }
  std::size_t levels() const noexcept { return levels_; }
  std::size_t codebook_size() const noexcept { return m_; }

  Token tag(Task t) const { return kFirstTag + static_cast<Token>(t); }
  Token code(Modality mod, std::size_t level, Code c) const {
    if (level >= levels_ || c >= m_) throw DataError("code token out of range");
    const std::size_t block = mod == Modality::kText ? 0 : levels_ * m_;
    return static_cast<Token>(kFirstCode + block + level * m_ + c);
  }
  bool is_code(Token t, Modality mod) const {
    const std::size_t begin = kFirstCode + (mod == Modality::kText ? 0 : levels_ * m_);
    return t >= begin && t < begin + levels_ * m_;
  }
  // Level and code of a code token of modality `mod`.
  std::pair<std::size_t, Code> decode(Token t, Modality mod) const {
    if (!is_code(t, mod)) throw DataError("token " + std::to_string(t) + " is not a " + to_string(mod) + " code");
    const std::size_t off = t - kFirstCode - (mod == Modality::kText ? 0 : levels_ * m_);
    return {off / m_, static_cast<Code>(off % m_)};
  }

  const std::string& surface(Token t) const {
    if (t >= surface_.size()) throw DataError("token id " + std::to_string(t) + " outside vocabulary");
    return surface_[t];
  }
  Token id(const std::string& s) const {
    auto it = index_.find(s);
    if (it == index_.end()) throw DataError("unknown token '" + s + "'");
    return it->second;
  }

  void append_item(std::vector<Token>& out, const SemanticIdTable& ids, std::size_t item) const {
    const auto sid = ids.id(item);
    for (std::size_t l = 0; l < sid.size(); ++l) out.push_back(code(ids.modality, l, sid[l]));
  }

 private:
  std::size_t levels_ = 0, m_ = 0;
  std::vector<std::string> surface_;
  std::unordered_map<std::string, Token> index_;
};

struct TrainingExample {
  Task task = Task::kRecText;
  std::vector<Token> x;  // starts with the task tag
  std::vector<Token> y;  // one item's L code tokens, then EOS
};

inline const SemanticIdTable& table_for(const ItemSemanticIds& ids, Modality m) {
  return m == Modality::kText ? ids.text : ids.vision;
}

// Task tag followed by the source-modality IDs of the last `window` items.
inline std::vector<Token> history_input(Task task, std::span<const std::uint32_t> history, const ItemSemanticIds& ids,
                                        const Vocab& vocab, std::size_t window) {
  std::vector<Token> x{vocab.tag(task)};
  const std::size_t start = history.size() > window ? history.size() - window : 0;
  const auto& src = table_for(ids, task_source(task));
  for (std::size_t i = start; i < history.size(); ++i) vocab.append_item(x, src, history[i]);
  return x;
}

inline std::vector<Token> target_output(Task task, std::uint32_t item, const ItemSemanticIds& ids, const Vocab& vocab) {
  std::vector<Token> y;
  vocab.append_item(y, table_for(ids, task_target(task)), item);
  y.push_back(Vocab::kEos);
  return y;
}

struct TaskSet {
  std::array<std::vector<TrainingExample>, 6> by_task;

  const std::vector<TrainingExample>& operator[](Task t) const { return by_task[static_cast<std::size_t>(t)]; }
  std::vector<TrainingExample>& operator[](Task t) { return by_task[static_cast<std::size_t>(t)]; }
  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& v : by_task) n += v.size();
    return n;
  }
};

struct TaskOptions {
  std::size_t window = 20;
  bool explicit_alignment = true;  // item-level and sequence-level cross-modal tasks
};

// Training examples from the training split of every user (validation and
// test items never appear as targets or inputs). `log` must be indexed in the
// row order of `ids`.
inline TaskSet build_tasks(const InteractionLog& log, const ItemSemanticIds& ids, const Vocab& vocab,
                           const TaskOptions& opt = {}) {
  if (ids.items.size() != log.items.size() || ids.text.size() != ids.items.size() ||
      ids.vision.size() != ids.items.size())
    throw DataError("every catalog item needs both semantic IDs (" + std::to_string(log.items.size()) + " items, " +
                    std::to_string(ids.text.size()) + " text / " + std::to_string(ids.vision.size()) + " vision IDs)");
  if (opt.window == 0) throw ConfigError("history window must be > 0");
  TaskSet ts;
  std::vector<Task> seq_tasks{Task::kRecText, Task::kRecVision};
  if (opt.explicit_alignment) {
    seq_tasks.push_back(Task::kSeqTextToVision);
    seq_tasks.push_back(Task::kSeqVisionToText);
  }
  for (const auto& u : log.users) {
    const auto train = InteractionLog::split(u).train;
    for (std::size_t t = 1; t < train.size(); ++t)
      for (Task task : seq_tasks)
        ts[task].push_back({task, history_input(task, train.first(t), ids, vocab, opt.window),
                            target_output(task, train[t], ids, vocab)});
  }
  if (opt.explicit_alignment) {
    for (std::uint32_t i = 0; i < ids.items.size(); ++i) {
      const std::uint32_t one[1] = {i};
      for (Task task : {Task::kItemTextToVision, Task::kItemVisionToText})
        ts[task].push_back({task, history_input(task, one, ids, vocab, 1), target_output(task, i, ids, vocab)});
    }
  }
  return ts;
}

inline void save_tasks(const std::string& path, const TaskSet& ts, const Vocab& vocab) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  for (Task task : kAllTasks)
    for (const auto& ex : ts[task]) {
      nlohmann::ordered_json j;
      j["task"] = task_name(ex.task);
      auto& x = j["x"] = nlohmann::ordered_json::array();
      for (Token t : ex.x) x.push_back(vocab.surface(t));
      auto& y = j["y"] = nlohmann::ordered_json::array();
      for (Token t : ex.y) y.push_back(vocab.surface(t));
      os << j.dump() << '\n';
    }
}

inline TaskSet load_tasks(const std::string& path, const Vocab& vocab) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open '" + path + "'");
  TaskSet ts;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    TrainingExample ex;
    ex.task = task_from_name(j.at("task").get<std::string>());
    for (const auto& s : j.at("x")) ex.x.push_back(vocab.id(s.get<std::string>()));
    for (const auto& s : j.at("y")) ex.y.push_back(vocab.id(s.get<std::string>()));
    if (ex.y.empty()) throw DataError("task example with empty target");
    ts[ex.task].push_back(std::move(ex));
  }
  return ts;
}

// ---- model -------------------------------------------------------------------

struct GrmConfig {
  std::size_t layers = 2;  // per side
  std::size_t heads = 4;
  std::size_t dim = 64;
  std::size_t ff = 128;

  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    if (layers == 0) p.push_back("model layers must be > 0");
    if (heads == 0 || dim % heads != 0) p.push_back("model dim must be a positive multiple of heads");
    if (ff == 0) p.push_back("feed-forward width must be > 0");
    return p;
  }
  nlohmann::json to_json() const { return {{"layers", layers}, {"heads", heads}, {"dim", dim}, {"ff", ff}}; }
  static GrmConfig from_json(const nlohmann::json& j) {
    return {j.at("layers").get<std::size_t>(), j.at("heads").get<std::size_t>(), j.at("dim").get<std::size_t>(),
            j.at("ff").get<std::size_t>()};
  }
};

inline Tensor sinusoidal_positions(std::size_t max_len, std::size_t dim) {
  Tensor pe = Tensor::matrix(max_len, dim);
  for (std::size_t p = 0; p < max_len; ++p)
    for (std::size_t i = 0; i < dim; i += 2) {
      const double angle = static_cast<double>(p) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(dim));
      pe(p, i) = static_cast<float>(std::sin(angle));
      if (i + 1 < dim) pe(p, i + 1) = static_cast<float>(std::cos(angle));
    }
  return pe;
}

// Packed token sequences: sequence s occupies rows ranges[s] of the packed
// matrix.
struct Packed {
  std::vector<Token> tokens;
  std::vector<std::uint32_t> positions;
  std::vector<RowRange> ranges;

  template <class Seqs>
  static Packed of(const Seqs& seqs) {
    Packed p;
    for (const auto& s : seqs) {
      const auto begin = static_cast<std::uint32_t>(p.tokens.size());
      for (std::size_t i = 0; i < s.size(); ++i) {
        p.tokens.push_back(s[i]);
        p.positions.push_back(static_cast<std::uint32_t>(i));
      }
      p.ranges.push_back({begin, static_cast<std::uint32_t>(p.tokens.size())});
    }
    return p;
  }
};

class GrmModel {
 public:
  GrmModel(const Vocab& vocab, GrmConfig cfg, std::uint64_t seed) : vocab_(vocab), cfg_(cfg) {
    if (auto p = cfg.problems(); !p.empty()) {
      std::string msg = "invalid model config:";
      for (const auto& s : p) msg += "\n  - " + s;
      throw ConfigError(msg);
    }
    const std::size_t d = cfg.dim;
    embed_ = &store_.add("embed", nn::normal_init({vocab.size(), d}, 1.0, seed, "embed"));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string p = "enc." + std::to_string(l);
      enc_.push_back({nn::LayerNorm(store_, p + ".ln1", d), attn(p + ".self", seed), nn::LayerNorm(store_, p + ".ln2", d),
                      nn::Linear(store_, p + ".ff1", d, cfg.ff, seed), nn::Linear(store_, p + ".ff2", cfg.ff, d, seed)});
    }
    enc_norm_ = nn::LayerNorm(store_, "enc.norm", d);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string p = "dec." + std::to_string(l);
      dec_.push_back({nn::LayerNorm(store_, p + ".ln1", d), attn(p + ".self", seed), nn::LayerNorm(store_, p + ".ln2", d),
                      attn(p + ".cross", seed), nn::LayerNorm(store_, p + ".ln3", d),
                      nn::Linear(store_, p + ".ff1", d, cfg.ff, seed), nn::Linear(store_, p + ".ff2", cfg.ff, d, seed)});
    }
    dec_norm_ = nn::LayerNorm(store_, "dec.norm", d);
    out_ = nn::Linear(store_, "out", d, vocab.size(), seed);
  }

  GrmModel(const GrmModel&) = delete;
  GrmModel& operator=(const GrmModel&) = delete;

  const Vocab& vocab() const noexcept { return vocab_; }
  const GrmConfig& config() const noexcept { return cfg_; }
  ParamStore& params() noexcept { return store_; }
  const ParamStore& params() const noexcept { return store_; }

  nlohmann::json header() const {
    return {{"kind", "grm"},
            {"config", cfg_.to_json()},
            {"levels", vocab_.levels()},
            {"codebook_size", vocab_.codebook_size()}};
  }

  // Encoder output rows for every token of the packed input.
  Var encode(Tape& t, const Packed& src) const {
    Var h = embed(t, src);
    const auto segs = self_segments(src.ranges);
    for (const auto& b : enc_) {
      Var x = b.ln1(t, h);
      h = t.add(h, b.self.apply(t, x, x, segs, cfg_.heads, false));
      h = t.add(h, b.ff2(t, t.relu(b.ff1(t, b.ln2(t, h)))));
    }
    return enc_norm_(t, h);
  }

  // Final decoder hidden states. Decoder sequence s attends to memory rows
  // mem_ranges[memory_of[s]].
  Var decode(Tape& t, Var memory, const std::vector<RowRange>& mem_ranges, const Packed& dec,
             const std::vector<std::uint32_t>& memory_of) const {
    Var h = embed(t, dec);
    const auto self = self_segments(dec.ranges);
    std::vector<AttnSegment> cross;
    for (std::size_t s = 0; s < dec.ranges.size(); ++s) {
      const auto& m = mem_ranges.at(memory_of[s]);
      cross.push_back({dec.ranges[s].begin, dec.ranges[s].end, m.begin, m.end});
    }
    for (const auto& b : dec_) {
      Var x = b.ln1(t, h);
      h = t.add(h, b.self.apply(t, x, x, self, cfg_.heads, true));
      h = t.add(h, b.cross.apply(t, b.ln2(t, h), memory, cross, cfg_.heads, false));
      h = t.add(h, b.ff2(t, t.relu(b.ff1(t, b.ln3(t, h)))));
    }
    return dec_norm_(t, h);
  }

  Var logits(Tape& t, Var hidden) const { return out_(t, hidden); }

 private:
  struct Attn {
    nn::Linear q, k, v, o;
    Var apply(Tape& t, Var xq, Var xkv, const std::vector<AttnSegment>& segs, std::size_t heads, bool causal) const {
      return o(t, t.attention(q(t, xq), k(t, xkv), v(t, xkv), segs, heads, causal));
    }
  };
  struct EncBlock {
    nn::LayerNorm ln1;
    Attn self;
    nn::LayerNorm ln2;
    nn::Linear ff1, ff2;
  };
  struct DecBlock {
    nn::LayerNorm ln1;
    Attn self;
    nn::LayerNorm ln2;
    Attn cross;
    nn::LayerNorm ln3;
    nn::Linear ff1, ff2;
  };

  Attn attn(const std::string& p, std::uint64_t seed) {
    const std::size_t d = cfg_.dim;
    return {nn::Linear(store_, p + ".q", d, d, seed), nn::Linear(store_, p + ".k", d, d, seed),
            nn::Linear(store_, p + ".v", d, d, seed), nn::Linear(store_, p + ".o", d, d, seed)};
  }

  static std::vector<AttnSegment> self_segments(const std::vector<RowRange>& ranges) {
    std::vector<AttnSegment> segs;
    for (const auto& r : ranges) segs.push_back({r.begin, r.end, r.begin, r.end});
    return segs;
  }

  Var embed(Tape& t, const Packed& p) const {
    for (Token tok : p.tokens)
      if (tok >= vocab_.size()) throw DataError("token id " + std::to_string(tok) + " outside vocabulary");
    std::uint32_t max_pos = 0;
    for (auto pos : p.positions) max_pos = std::max(max_pos, pos);
    std::shared_ptr<const Tensor> table;
    {
      std::lock_guard<std::mutex> lock(positions_mutex_);
      if (!positions_ || positions_->rows() <= max_pos)
        positions_ = std::make_shared<const Tensor>(sinusoidal_positions(std::max<std::size_t>(64, 2 * (max_pos + 1)), cfg_.dim));
      table = positions_;
    }
    Tensor pe = Tensor::matrix(p.tokens.size(), cfg_.dim);
    for (std::size_t i = 0; i < p.tokens.size(); ++i)
      std::copy(table->row(p.positions[i]).begin(), table->row(p.positions[i]).end(), pe.row(i).begin());
    return t.add(t.gather_rows(t.param(*embed_), p.tokens), t.constant(std::move(pe)));
  }

  Vocab vocab_;
  GrmConfig cfg_;
  ParamStore store_;
  Parameter* embed_ = nullptr;
  std::vector<EncBlock> enc_;
  nn::LayerNorm enc_norm_;
  std::vector<DecBlock> dec_;
  nn::LayerNorm dec_norm_;
  nn::Linear out_;
  mutable std::mutex positions_mutex_;
  mutable std::shared_ptr<const Tensor> positions_;
};

// ---- objectives ----------------------------------------------------------------

// Decoder input under teacher forcing: BOS followed by all but the last target.
inline std::vector<Token> shift_right(std::span<const Token> y) {
  std::vector<Token> in{Vocab::kBos};
  in.insert(in.end(), y.begin(), y.end() - 1);
  return in;
}

struct Seq2SeqLoss {
  Var loss;
  Var logits;  // one row per target token, packed
  std::size_t tokens = 0;
};

// Mean over all target tokens of -log p(y_t | y_<t, x).
inline Seq2SeqLoss seq2seq_loss(Tape& t, const GrmModel& model, const std::vector<const TrainingExample*>& batch) {
  if (batch.empty()) throw DataError("empty batch");
  std::vector<std::span<const Token>> xs;
  std::vector<std::vector<Token>> dec_in;
  std::vector<std::uint32_t> rows, targets, mem_of;
  for (const auto* ex : batch) {
    if (ex->y.empty()) throw DataError("training example with empty target");
    xs.emplace_back(ex->x);
    dec_in.push_back(shift_right(ex->y));
    mem_of.push_back(static_cast<std::uint32_t>(mem_of.size()));
    for (Token y : ex->y) {
      rows.push_back(static_cast<std::uint32_t>(targets.size()));
      targets.push_back(y);
    }
  }
  const auto src = Packed::of(xs);
  const auto dec = Packed::of(dec_in);
  Var memory = model.encode(t, src);
  Seq2SeqLoss out;
  out.logits = model.logits(t, model.decode(t, memory, src.ranges, dec, mem_of));
  out.tokens = targets.size();
  Var nll = t.sum(t.pick(t.log_softmax(out.logits), std::move(rows), std::move(targets)));
  out.loss = t.scale(nll, -1.0f / static_cast<float>(out.tokens));
  return out;
}

// Mean-pooled encoder outputs of each item's ID token sequence, one row per
// item.
inline Var encode_item_ids(Tape& t, const GrmModel& model, const SemanticIdTable& ids,
                           const std::vector<std::uint32_t>& items) {
  std::vector<std::vector<Token>> seqs;
  for (auto i : items) {
    seqs.emplace_back();
    model.vocab().append_item(seqs.back(), ids, i);
  }
  const auto src = Packed::of(seqs);
  return t.segment_mean(model.encode(t, src), src.ranges);
}

struct ImplicitAlignLoss {
  Var loss;
  bool degenerate = false;  // batch of one item: loss fixed at zero
};

// Symmetric InfoNCE between pooled text-ID and vision-ID encodings of the same
// items, in-batch negatives.
inline ImplicitAlignLoss implicit_align_loss(Tape& t, const GrmModel& model, const std::vector<std::uint32_t>& items,
                                             const ItemSemanticIds& ids, double tau) {
  if (items.size() < 2) return {t.constant(Tensor::scalar(0.0f)), true};
  Var et = encode_item_ids(t, model, ids.text, items);
  Var ev = encode_item_ids(t, model, ids.vision, items);
  return {symmetric_infonce(t, et, ev, tau), false};
}

// ---- training --------------------------------------------------------------------

struct GrmHyper {
  std::size_t batch_size = 256;
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::size_t epochs = 200;
  std::size_t steps_per_epoch = 0;  // 0: one pass over the task set
  double lambda_implicit = 0.01;
  double tau = 0.1;
  std::size_t implicit_batch = 64;
  std::array<double, 6> task_weights{1.0, 1.0, 0.5, 0.5, 0.5, 0.5};
  std::size_t patience = 10;  // epochs without validation gain before stopping

  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    if (batch_size == 0) p.push_back("GRM batch size must be > 0");
    if (!(lr >= 0.0)) p.push_back("GRM learning rate must be >= 0");
    if (lambda_implicit < 0.0) p.push_back("lambda_implicit must be >= 0");
    if (!(tau > 0.0)) p.push_back("GRM tau must be > 0");
    for (double w : task_weights)
      if (w < 0.0) p.push_back("task weights must be >= 0");
    return p;
  }
};

// Draws mixed-task mini-batches: a task by weight (tasks without examples are
// skipped), then an example of that task uniformly.
class TaskSampler {
 public:
  TaskSampler(const TaskSet& tasks, const std::array<double, 6>& weights, std::uint64_t seed)
      : tasks_(tasks), rng_(seed, "grm.tasks") {
    for (std::size_t k = 0; k < 6; ++k) weights_[k] = tasks.by_task[k].empty() ? 0.0 : weights[k];
    double total = 0;
    for (double w : weights_) total += w;
    if (total <= 0.0) throw ConfigError("no task with positive weight has training examples");
  }

  const TrainingExample& next() {
    const auto k = rng_.categorical(weights_);
    const auto& v = tasks_.by_task[k];
    return v[rng_.below(v.size())];
  }

  std::vector<const TrainingExample*> batch(std::size_t n) {
    std::vector<const TrainingExample*> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(&next());
    return out;
  }

 private:
  const TaskSet& tasks_;
  std::array<double, 6> weights_{};
  Rng rng_;
};

struct GrmEpochStats {
  std::size_t epoch = 0;
  double seq2seq = 0, implicit = 0, total = 0;  // step means
  std::optional<double> valid_hr10;

  nlohmann::json to_json() const {
    nlohmann::json j{{"epoch", epoch}, {"seq2seq", seq2seq}, {"implicit", implicit}, {"total", total}};
    if (valid_hr10) j["valid_hr10"] = *valid_hr10;
    return j;
  }
};

struct GrmReport {
  std::vector<GrmEpochStats> epochs;
  std::size_t best_epoch = 0;
  double best_valid_hr10 = -1.0;
  std::size_t implicit_degenerate_steps = 0;

  nlohmann::json to_json() const {
    nlohmann::json e = nlohmann::json::array();
    for (const auto& s : epochs) e.push_back(s.to_json());
    return {{"epochs", e},
            {"best_epoch", best_epoch},
            {"best_valid_hr10", best_valid_hr10},
            {"implicit_degenerate_steps", implicit_degenerate_steps}};
  }
};

class GrmDiverged : public NumericError {
 public:
  using NumericError::NumericError;
};

// Total step loss = seq2seq + lambda_implicit * implicit. `validate` returns
// validation HR@10 and drives early stopping; the best-scoring parameters are
// restored at the end. Without it the final parameters are kept.
inline GrmReport train_grm(GrmModel& model, const TaskSet& tasks, const ItemSemanticIds& ids, const GrmHyper& h,
                           std::uint64_t seed, const std::function<double()>& validate = {},
                           const std::function<void(const GrmEpochStats&)>& on_epoch = {}) {
  if (auto p = h.problems(); !p.empty()) {
    std::string msg = "invalid GRM hyperparameters:";
    for (const auto& s : p) msg += "\n  - " + s;
    throw ConfigError(msg);
  }
  TaskSampler sampler(tasks, h.task_weights, seed);
  Rng item_rng(seed, "grm.implicit");
  AdamW opt(model.params(), {.lr = h.lr, .weight_decay = h.weight_decay});
  const std::size_t steps =
      h.steps_per_epoch > 0 ? h.steps_per_epoch : (tasks.total() + h.batch_size - 1) / h.batch_size;
  const std::size_t n_items = ids.items.size();
  std::vector<std::uint32_t> perm(n_items);
  for (std::uint32_t i = 0; i < n_items; ++i) perm[i] = i;

  GrmReport report;
  std::vector<Tensor> best;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= h.epochs; ++epoch) {
    const auto last_good = model.params().snapshot();
    GrmEpochStats stats;
    stats.epoch = epoch;
    for (std::size_t s = 0; s < steps; ++s) {
      model.params().zero_grad();
      Tape t;
      auto seq = seq2seq_loss(t, model, sampler.batch(h.batch_size));
      Var total = seq.loss;
      double implicit = 0.0;
      if (h.lambda_implicit > 0.0) {
        const std::size_t b = std::min(h.implicit_batch, n_items);
        for (std::size_t i = 0; i < b; ++i) std::swap(perm[i], perm[i + item_rng.below(n_items - i)]);
        auto ia = implicit_align_loss(t, model, std::vector<std::uint32_t>(perm.begin(), perm.begin() + b), ids, h.tau);
        report.implicit_degenerate_steps += ia.degenerate;
        implicit = t.value(ia.loss).item();
        total = t.add(total, t.scale(ia.loss, static_cast<float>(h.lambda_implicit)));
      }
      const double tv = t.value(total).item();
      if (!std::isfinite(tv)) {
        model.params().restore(last_good);
        throw GrmDiverged("GRM loss is not finite at epoch " + std::to_string(epoch) + " step " + std::to_string(s));
      }
      t.backward(total);
      opt.step();
      stats.seq2seq += t.value(seq.loss).item();
      stats.implicit += implicit;
      stats.total += tv;
    }
    stats.seq2seq /= static_cast<double>(steps);
    stats.implicit /= static_cast<double>(steps);
    stats.total /= static_cast<double>(steps);
    bool stop = false;
    if (validate) {
      stats.valid_hr10 = validate();
      if (*stats.valid_hr10 > report.best_valid_hr10) {
        report.best_valid_hr10 = *stats.valid_hr10;
        report.best_epoch = epoch;
        best = model.params().snapshot();
        since_best = 0;
      } else if (++since_best >= h.patience) {
        stop = true;
      }
    } else {
      report.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(stats);
    report.epochs.push_back(stats);
    if (stop) break;
  }
  if (!best.empty()) model.params().restore(best);
  return report;
}

}  // namespace macrec
