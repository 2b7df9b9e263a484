#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "macrec/diagnostics.hpp"
#include "macrec/grm.hpp"
#include "macrec/inference.hpp"
#include "macrec/kmeans.hpp"
#include "macrec/rqvae.hpp"

namespace macrec {

// Everything downstream of the raw embeddings and interaction log.
struct PipelineConfig {
  std::size_t label_clusters = 512;
  std::size_t label_iters = 100;
  IdHyper quantizer;
  TaskOptions tasks;
  GrmConfig model;
  GrmHyper grm;
  EvalOptions eval;
  std::size_t valid_users = 0;  // users scored per epoch for early stopping; 0 disables it

  // Drops contrastive, alignment, implicit and explicit-task alignment.
  PipelineConfig without_alignment() const {
    PipelineConfig c = *this;
    std::fill(c.quantizer.lambda_con.begin(), c.quantizer.lambda_con.end(), 0.0);
    c.quantizer.lambda_align = 0.0;
    c.grm.lambda_implicit = 0.0;
    c.tasks.explicit_alignment = false;
    return c;
  }

  nlohmann::ordered_json to_json() const {
    const auto& q = quantizer;
    const auto& g = grm;
    nlohmann::ordered_json j;
    j["labels"] = {{"clusters", label_clusters}, {"iters", label_iters}};
    j["quantizer"] = {{"levels", q.levels},         {"codebook_size", q.codebook_size},
                      {"latent_dim", q.latent_dim}, {"hidden", q.hidden},
                      {"tau", q.tau},               {"alpha", q.alpha},
                      {"lambda_con", q.lambda_con}, {"lambda_align", q.lambda_align},
                      {"batch_size", q.batch_size}, {"lr", q.lr},
                      {"weight_decay", q.weight_decay}, {"epochs", q.epochs},
                      {"kmeans_iters", q.kmeans_iters}};
    j["tasks"] = {{"window", tasks.window}, {"explicit_alignment", tasks.explicit_alignment}};
    j["model"] = model.to_json();
    j["grm"] = {{"batch_size", g.batch_size},
                {"lr", g.lr},
                {"weight_decay", g.weight_decay},
                {"epochs", g.epochs},
                {"steps_per_epoch", g.steps_per_epoch},
                {"lambda_implicit", g.lambda_implicit},
                {"tau", g.tau},
                {"implicit_batch", g.implicit_batch},
                {"task_weights", g.task_weights},
                {"patience", g.patience},
                {"valid_users", valid_users}};
    j["eval"] = {{"split", eval.split == Split::kTest ? "test" : "valid"},
                 {"window", eval.window},
                 {"beam_width", eval.beam_width},
                 {"k", eval.k},
                 {"max_users", eval.max_users},
                 {"ensemble", eval.ensemble}};
    return j;
  }
};

// Independent streams for each stage, all derived from one run seed.
struct StageSeeds {
  std::uint64_t labels, quantizer, model, training;

  static StageSeeds from(std::uint64_t seed) {
    return {derive_seed(seed, "stage.labels"), derive_seed(seed, "stage.quantizer"), derive_seed(seed, "stage.model"),
            derive_seed(seed, "stage.training")};
  }
};

struct QuantizeOutcome {
  AssignedIds ids;
  QuantizerReport report;
  std::vector<DiagEntry> raw_diag;    // before collision resolution
  std::vector<DiagEntry> final_diag;  // after
};

using PipelineLog = std::function<void(const std::string&)>;

inline std::pair<PseudoLabels, PseudoLabels> make_labels(const EmbeddingTable& text, const EmbeddingTable& vision,
                                                         const PipelineConfig& cfg, const StageSeeds& seeds) {
  return gen_pseudo_labels(text, vision, cfg.label_clusters, seeds.labels, cfg.label_iters);
}

inline QuantizeOutcome quantize_items(const EmbeddingTable& text, const EmbeddingTable& vision,
                                      const PseudoLabels& text_labels, const PseudoLabels& vision_labels,
                                      const PipelineConfig& cfg, const StageSeeds& seeds,
                                      const PipelineLog& log = {},
                                      const std::function<void(const Quantizer&)>& on_trained = {}) {
  Quantizer q(text.dim(), vision.dim(), cfg.quantizer, seeds.quantizer);
  QuantizeOutcome out;
  out.report = train_quantizer(q, text, vision, text_labels, vision_labels, seeds.quantizer,
                               [&](const QuantizerEpochStats& s) {
                                 if (log) log("quantizer epoch " + std::to_string(s.epoch) + " loss " + std::to_string(s.mean.total));
                               });
  out.ids = assign_semantic_ids(q, text, vision);
  out.raw_diag = diagnose({&out.ids.raw_text, &out.ids.raw_vision});
  out.final_diag = diagnose({&out.ids.final_ids.text, &out.ids.final_ids.vision});
  if (on_trained) on_trained(q);
  return out;
}

// Global popularity top-k for every user.
inline Metrics popularity_metrics(const InteractionLog& log, Split split, std::size_t k, std::size_t max_users = 0) {
  auto rank = popularity_ranking(log);
  rank.resize(std::min(k, rank.size()));
  const std::size_t n = max_users == 0 ? log.users.size() : std::min(max_users, log.users.size());
  std::vector<std::optional<std::vector<std::size_t>>> rankings(n, rank);
  std::vector<std::size_t> truth;
  for (std::size_t u = 0; u < n; ++u) {
    const auto s = InteractionLog::split(log.users[u]);
    truth.push_back(split == Split::kTest ? s.test : s.valid);
  }
  return evaluate(rankings, truth);
}

struct RecommenderOutcome {
  TaskSet tasks;
  GrmReport report;
  EvalReport eval;
  double train_seconds = 0, eval_seconds = 0;
};

// Builds tasks, trains a fresh model in place and evaluates it.
inline RecommenderOutcome train_and_evaluate(GrmModel& model, const InteractionLog& log, const ItemSemanticIds& ids,
                                             const PipelineConfig& cfg, const StageSeeds& seeds,
                                             const PipelineLog& plog = {}) {
  using clock = std::chrono::steady_clock;
  RecommenderOutcome out;
  out.tasks = build_tasks(log, ids, model.vocab(), cfg.tasks);
  const IdTrie trie_t(ids.text, model.vocab()), trie_v(ids.vision, model.vocab());

  std::function<double()> validate;
  if (cfg.valid_users > 0) {
    validate = [&] {
      EvalOptions v = cfg.eval;
      v.split = Split::kValid;
      v.max_users = cfg.valid_users;
      const auto r = evaluate_model(model, log, ids, trie_t, trie_v, v);
      return (v.ensemble ? r.ensemble : r.text).hr_at(10);
    };
  }
  const auto t0 = clock::now();
  out.report = train_grm(model, out.tasks, ids, cfg.grm, seeds.training, validate, [&](const GrmEpochStats& s) {
    if (!plog) return;
    std::string msg = "grm epoch " + std::to_string(s.epoch) + " loss " + std::to_string(s.total);
    if (s.valid_hr10) msg += " valid HR@10 " + std::to_string(*s.valid_hr10);
    plog(msg);
  });
  const auto t1 = clock::now();
  out.eval = evaluate_model(model, log, ids, trie_t, trie_v, cfg.eval);
  out.train_seconds = std::chrono::duration<double>(t1 - t0).count();
  out.eval_seconds = std::chrono::duration<double>(clock::now() - t1).count();
  return out;
}

}  // namespace macrec
