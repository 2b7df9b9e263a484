// macrec: command-line driver for the full pipeline.
//
//   macrec <command> [--config FILE] [--run-dir DIR] [--seed N] [--section.key VALUE ...]
//
// Every command reads the artifacts of earlier stages from the run directory
// and records its own outputs in manifest.json.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "macrec/checkpoint.hpp"
#include "macrec/data_io.hpp"
#include "macrec/diagnostics.hpp"
#include "macrec/grm.hpp"
#include "macrec/inference.hpp"
#include "macrec/kmeans.hpp"
#include "macrec/manifest.hpp"
#include "macrec/pipeline.hpp"
#include "macrec/rqvae.hpp"
#include "macrec/semantic_id.hpp"
#include "macrec/synth.hpp"

namespace fs = std::filesystem;
using namespace macrec;
using ojson = nlohmann::ordered_json;

namespace {

constexpr const char* kVersion = "0.1.0";

// INI sections become dotted option names: [quantizer] levels -> --quantizer.levels.
class FlatIni : public CLI::ConfigINI {
 public:
  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    std::vector<CLI::ConfigItem> out;
    for (auto& item : CLI::ConfigINI::from_config(input)) {
      if (item.name == "++" || item.name == "--") continue;
      std::string prefix;
      for (const auto& p : item.parents) prefix += p + ".";
      item.name = prefix + item.name;
      item.parents.clear();
      out.push_back(std::move(item));
    }
    return out;
  }
};

struct RunConfig {
  std::string run_dir = "run";
  std::string text_path, vision_path, interactions_path;
  std::string dataset = "synthetic";
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  bool dry_run = false;
  bool quiet = false;
  bool untrained_baseline = false;
  std::string split = "test";
  SynthParams synth;
  PipelineConfig pipe;
  std::vector<double> task_weights{1.0, 1.0, 0.5, 0.5, 0.5, 0.5};

  // Everything that determines results; paths, threads and verbosity excluded.
  ojson to_json() const {
    ojson j;
    j["seed"] = seed;
    j["dataset"] = dataset;
    j["synth"] = {{"n_items", synth.n_items},
                  {"n_clusters", synth.n_clusters},
                  {"d_text", synth.d_text},
                  {"d_vision", synth.d_vision},
                  {"cross_modal_corr", synth.cross_modal_corr},
                  {"n_users", synth.n_users},
                  {"seq_len", synth.seq_len},
                  {"center_scale", synth.center_scale},
                  {"noise_scale", synth.noise_scale},
                  {"shift_prob", synth.shift_prob},
                  {"zipf_exponent", synth.zipf_exponent}};
    const auto p = pipe.to_json();
    for (const auto& [k, v] : p.items()) j[k] = v;
    return j;
  }
};

void add_options(CLI::App& app, RunConfig& c) {
  auto& q = c.pipe.quantizer;
  auto& g = c.pipe.grm;
  auto& m = c.pipe.model;
  auto& e = c.pipe.eval;
  auto& s = c.synth;
  app.add_option("--run-dir", c.run_dir, "Directory holding all artifacts of a run")->capture_default_str();
  app.add_option("--seed", c.seed, "Run seed; every stage derives its own stream from it")->capture_default_str();
  app.add_option("--threads", c.threads, "Users scored concurrently during evaluation")->capture_default_str();
  app.add_flag("--dry-run", c.dry_run, "Validate and record the resolved config without running");
  app.add_flag("--quiet", c.quiet, "Suppress progress messages");

  app.add_option("--data.text", c.text_path, "Text embeddings (.emb or .jsonl); default <run-dir>/text.emb");
  app.add_option("--data.vision", c.vision_path, "Vision embeddings; default <run-dir>/vision.emb");
  app.add_option("--data.interactions", c.interactions_path, "Interactions JSONL; default <run-dir>/interactions.jsonl");
  app.add_option("--data.name", c.dataset, "Dataset name written to metrics")->capture_default_str();

  app.add_option("--synth.n_items", s.n_items)->capture_default_str();
  app.add_option("--synth.n_clusters", s.n_clusters)->capture_default_str();
  app.add_option("--synth.d_text", s.d_text)->capture_default_str();
  app.add_option("--synth.d_vision", s.d_vision)->capture_default_str();
  app.add_option("--synth.cross_modal_corr", s.cross_modal_corr)->capture_default_str();
  app.add_option("--synth.n_users", s.n_users)->capture_default_str();
  app.add_option("--synth.seq_len", s.seq_len)->capture_default_str();
  app.add_option("--synth.center_scale", s.center_scale)->capture_default_str();
  app.add_option("--synth.noise_scale", s.noise_scale)->capture_default_str();
  app.add_option("--synth.shift_prob", s.shift_prob)->capture_default_str();
  app.add_option("--synth.zipf_exponent", s.zipf_exponent)->capture_default_str();

  app.add_option("--labels.clusters", c.pipe.label_clusters, "K for the pseudo-label k-means")->capture_default_str();
  app.add_option("--labels.iters", c.pipe.label_iters)->capture_default_str();

  app.add_option("--quantizer.levels", q.levels)->capture_default_str();
  app.add_option("--quantizer.codebook_size", q.codebook_size)->capture_default_str();
  app.add_option("--quantizer.latent_dim", q.latent_dim)->capture_default_str();
  app.add_option("--quantizer.hidden", q.hidden, "Encoder widths, comma separated")->delimiter(',')->capture_default_str();
  app.add_option("--quantizer.tau", q.tau)->capture_default_str();
  app.add_option("--quantizer.alpha", q.alpha)->capture_default_str();
  app.add_option("--quantizer.lambda_con", q.lambda_con, "Per-level contrastive weights")->delimiter(',')->capture_default_str();
  app.add_option("--quantizer.lambda_align", q.lambda_align)->capture_default_str();
  app.add_option("--quantizer.batch_size", q.batch_size)->capture_default_str();
  app.add_option("--quantizer.lr", q.lr)->capture_default_str();
  app.add_option("--quantizer.weight_decay", q.weight_decay)->capture_default_str();
  app.add_option("--quantizer.epochs", q.epochs)->capture_default_str();
  app.add_option("--quantizer.kmeans_iters", q.kmeans_iters)->capture_default_str();

  app.add_option("--tasks.window", c.pipe.tasks.window, "History items kept per example")->capture_default_str();
  app.add_option("--tasks.explicit_alignment", c.pipe.tasks.explicit_alignment)->capture_default_str();

  app.add_option("--model.layers", m.layers)->capture_default_str();
  app.add_option("--model.heads", m.heads)->capture_default_str();
  app.add_option("--model.dim", m.dim)->capture_default_str();
  app.add_option("--model.ff", m.ff)->capture_default_str();

  app.add_option("--grm.batch_size", g.batch_size)->capture_default_str();
  app.add_option("--grm.lr", g.lr)->capture_default_str();
  app.add_option("--grm.weight_decay", g.weight_decay)->capture_default_str();
  app.add_option("--grm.epochs", g.epochs)->capture_default_str();
  app.add_option("--grm.steps_per_epoch", g.steps_per_epoch, "0: one pass over the task set")->capture_default_str();
  app.add_option("--grm.lambda_implicit", g.lambda_implicit)->capture_default_str();
  app.add_option("--grm.tau", g.tau)->capture_default_str();
  app.add_option("--grm.implicit_batch", g.implicit_batch)->capture_default_str();
  app.add_option("--grm.task_weights", c.task_weights, "rec-t,rec-v,item-t2v,item-v2t,seq-t2v,seq-v2t")
      ->delimiter(',')
      ->capture_default_str();
  app.add_option("--grm.patience", g.patience)->capture_default_str();
  app.add_option("--grm.valid_users", c.pipe.valid_users, "Users scored per epoch for early stopping (0: off)")
      ->capture_default_str();

  app.add_option("--eval.split", c.split)->check(CLI::IsMember({"test", "valid"}))->capture_default_str();
  app.add_option("--eval.window", e.window)->capture_default_str();
  app.add_option("--eval.beam_width", e.beam_width)->capture_default_str();
  app.add_option("--eval.k", e.k)->capture_default_str();
  app.add_option("--eval.max_users", e.max_users, "0: all users")->capture_default_str();
  app.add_option("--eval.ensemble", e.ensemble)->capture_default_str();
  app.add_option("--eval.untrained_baseline", c.untrained_baseline, "Also score the untrained model")
      ->capture_default_str();
}

// Applies derived fields and returns every violation found.
std::vector<std::string> finalize(RunConfig& c) {
  std::vector<std::string> p;
  auto append = [&](const std::vector<std::string>& v) { p.insert(p.end(), v.begin(), v.end()); };
  if (c.task_weights.size() != 6) {
    p.push_back("grm.task_weights needs 6 values");
  } else {
    std::copy(c.task_weights.begin(), c.task_weights.end(), c.pipe.grm.task_weights.begin());
  }
  c.pipe.eval.split = c.split == "valid" ? Split::kValid : Split::kTest;
  c.pipe.eval.threads = c.threads;
  c.synth.seed = c.seed;
  append(c.pipe.quantizer.problems(0));
  append(c.pipe.grm.problems());
  append(c.pipe.model.problems());
  try {
    validate(c.synth);
  } catch (const ConfigError& e) {
    std::istringstream is(e.what());
    std::string line;
    std::getline(is, line);  // heading
    while (std::getline(is, line)) p.push_back(line.substr(line.find("- ") + 2));
  }
  if (c.pipe.label_clusters == 0) p.push_back("labels.clusters must be > 0");
  if (c.pipe.label_iters == 0) p.push_back("labels.iters must be > 0");
  if (c.pipe.tasks.window == 0 || c.pipe.eval.window == 0) p.push_back("history windows must be > 0");
  if (c.pipe.eval.k == 0 || c.pipe.eval.beam_width < c.pipe.eval.k) p.push_back("need 1 <= eval.k <= eval.beam_width");
  if (c.pipe.eval.k < 10) p.push_back("eval.k must be >= 10 so HR@10 is defined");
  if (c.threads == 0) p.push_back("threads must be >= 1");
  return p;
}

// ---- run directory ----------------------------------------------------------

class Run {
 public:
  Run(RunConfig cfg, ojson config_json)
      : cfg_(std::move(cfg)),
        dir_(cfg_.run_dir),
        config_json_(std::move(config_json)),
        config_hash_(sha1_hex(config_json_.dump())),
        seeds_(StageSeeds::from(cfg_.seed)) {
    fs::create_directories(dir_);
  }

  const RunConfig& cfg() const { return cfg_; }
  const StageSeeds& seeds() const { return seeds_; }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  // Path of a run-directory artifact produced by `stage`.
  std::string require(const std::string& name, const std::string& stage) const {
    const auto p = path(name);
    if (!fs::exists(p)) throw DataError("missing " + p + ": run the '" + stage + "' stage first");
    return p;
  }

  std::string text_path() const { return input(cfg_.text_path, "text.emb"); }
  std::string vision_path() const { return input(cfg_.vision_path, "vision.emb"); }
  std::string interactions_path() const { return input(cfg_.interactions_path, "interactions.jsonl"); }
  bool has_external_data() const {
    return !cfg_.text_path.empty() || !cfg_.vision_path.empty() || !cfg_.interactions_path.empty();
  }

  void log(const std::string& stage, const std::string& msg) const {
    if (!cfg_.quiet) std::cerr << "[" << stage << "] " << msg << '\n';
  }

  void record(const std::string& stage, const std::vector<std::string>& inputs, const std::vector<std::string>& outputs,
              ojson extra = ojson::object()) const {
    ojson e;
    e["tool_version"] = kVersion;
    e["seed"] = cfg_.seed;
    e["stage_seeds"] = {{"labels", seeds_.labels},
                        {"quantizer", seeds_.quantizer},
                        {"model", seeds_.model},
                        {"training", seeds_.training}};
    e["config_hash"] = config_hash_;
    e["config"] = config_json_;
    auto hashes = [](const std::vector<std::string>& files) {
      ojson h = ojson::object();
      for (const auto& f : files) h[fs::path(f).filename().string()] = git_blob_hash_file(f);
      return h;
    };
    e["inputs"] = hashes(inputs);
    e["outputs"] = hashes(outputs);
    for (auto& [k, v] : extra.items()) e[k] = v;
    Manifest(dir_ / "manifest.json").record(stage, std::move(e));
  }

  void record_dry_run(const std::string& stage) const {
    ojson e;
    e["tool_version"] = kVersion;
    e["dry_run"] = true;
    e["seed"] = cfg_.seed;
    e["config_hash"] = config_hash_;
    e["config"] = config_json_;
    Manifest(dir_ / "manifest.json").record(stage, std::move(e));
  }

  // ---- loaders ----------------------------------------------------------

  std::pair<EmbeddingTable, EmbeddingTable> tables() const {
    auto text = load_embeddings(text_path(), Modality::kText);
    auto vision = align_tables(text, load_embeddings(vision_path(), Modality::kVision));
    return {std::move(text), std::move(vision)};
  }

  InteractionLog interactions(const EmbeddingTable& text) const {
    auto log = load_interactions(interactions_path());
    if (log.dropped_users > 0)
      this->log("data", "skipped " + std::to_string(log.dropped_users) + " users with fewer than 3 interactions");
    return log.indexed_by(text);
  }

  ItemSemanticIds ids(const EmbeddingTable& text) const {
    auto ids = load_semantic_ids(require("ids.jsonl", "quantize"), cfg_.pipe.quantizer.codebook_size);
    return reorder_semantic_ids(ids, text.ids());
  }

 private:
  std::string input(const std::string& configured, const std::string& name) const {
    if (!configured.empty()) return configured;
    return require(name, "synth");
  }

  RunConfig cfg_;
  fs::path dir_;
  ojson config_json_;
  std::string config_hash_;
  StageSeeds seeds_;
};

Vocab vocab_for(const RunConfig& c) { return Vocab(c.pipe.quantizer.levels, c.pipe.quantizer.codebook_size); }

void check_ids(const ItemSemanticIds& ids, const Vocab& v) {
  if (ids.text.levels != v.levels() || ids.vision.levels != v.levels())
    throw DataError("semantic IDs have " + std::to_string(ids.text.levels) + " levels, config expects " +
                    std::to_string(v.levels()) + "; rerun 'quantize'");
}

// ---- stages ---------------------------------------------------------------------

void stage_synth(const Run& run) {
  const auto& c = run.cfg();
  auto d = synth_dual_modal(c.synth);
  const auto t = run.path("text.emb"), v = run.path("vision.emb"), i = run.path("interactions.jsonl");
  save_embeddings(t, d.text);
  save_embeddings(v, d.vision);
  save_interactions(i, d.log);
  run.log("synth", std::to_string(d.text.size()) + " items, " + std::to_string(d.log.users.size()) + " users");
  run.record("synth", {}, {t, v, i});
}

void stage_labels(const Run& run) {
  auto [text, vision] = run.tables();
  auto [lt, lv] = make_labels(text, vision, run.cfg().pipe, run.seeds());
  const auto out = run.path("labels.jsonl");
  save_pseudo_labels(out, text.ids(), lt, lv);
  run.log("labels", "K=" + std::to_string(lt.k) + ", inertia text " + std::to_string(lt.inertia) + ", vision " +
                        std::to_string(lv.inertia));
  run.record("labels", {run.text_path(), run.vision_path()}, {out});
}

void stage_quantize(const Run& run) {
  const auto& c = run.cfg();
  auto [text, vision] = run.tables();
  const auto labels_path = run.require("labels.jsonl", "labels");
  auto [lt, lv] = load_pseudo_labels(labels_path, text.ids());
  const auto ckpt = run.path("quantizer.ckpt");
  auto q = quantize_items(
      text, vision, lt, lv, c.pipe, run.seeds(), [&](const std::string& m) { run.log("quantize", m); },
      [&](const Quantizer& qz) { save_checkpoint(ckpt, qz.params(), qz.header()); });
  const auto ids = run.path("ids.jsonl"), raw = run.path("ids_raw.jsonl"), report = run.path("quantizer_report.json");
  save_semantic_ids(ids, q.ids.final_ids);
  save_semantic_ids(raw, ItemSemanticIds{text.ids(), q.ids.raw_text, q.ids.raw_vision});
  std::ofstream(report) << q.report.to_json().dump(2) << '\n';
  run.log("quantize", "raw collision rate text " + std::to_string(collision_rate(q.ids.raw_text)) + "%, vision " +
                          std::to_string(collision_rate(q.ids.raw_vision)) + "%");
  run.record("quantize", {run.text_path(), run.vision_path(), labels_path}, {ckpt, ids, raw, report});
}

void stage_diagnose(const Run& run) {
  const auto& c = run.cfg();
  const auto raw_path = run.require("ids_raw.jsonl", "quantize");
  const auto ids_path = run.require("ids.jsonl", "quantize");
  const auto raw = load_semantic_ids(raw_path, c.pipe.quantizer.codebook_size);
  const auto fin = load_semantic_ids(ids_path, c.pipe.quantizer.codebook_size);
  const auto raw_diag = diagnose({&raw.text, &raw.vision});
  const auto fin_diag = diagnose({&fin.text, &fin.vision});
  ojson j;
  j["raw"] = diag_to_json(raw_diag);
  j["resolved"] = diag_to_json(fin_diag);
  const auto json_out = run.path("diag.json"), csv_out = run.path("diag.csv");
  std::ofstream(json_out) << j.dump(2) << '\n';
  write_diag_csv(csv_out, raw_diag);
  for (const auto& d : raw_diag)
    run.log("diagnose", std::string(to_string(d.modality)) + " level " + std::to_string(d.level + 1) + ": perplexity " +
                            std::to_string(d.perplexity));
  run.record("diagnose", {raw_path, ids_path}, {json_out, csv_out});
}

void stage_build_tasks(const Run& run) {
  const auto& c = run.cfg();
  auto [text, vision] = run.tables();
  const auto ids = run.ids(text);
  const auto log = run.interactions(text);
  const Vocab v = vocab_for(c);
  check_ids(ids, v);
  const auto tasks = build_tasks(log, ids, v, c.pipe.tasks);
  const auto out = run.path("tasks.jsonl");
  save_tasks(out, tasks, v);
  std::string counts;
  for (Task t : kAllTasks) counts += std::string(" ") + task_name(t) + "=" + std::to_string(tasks[t].size());
  run.log("build-tasks", "examples:" + counts);
  run.record("build-tasks", {run.path("ids.jsonl"), run.interactions_path()}, {out});
}

std::unique_ptr<GrmModel> load_model(const std::string& path, const Vocab& expected) {
  const auto h = read_checkpoint_header(path);
  if (h.value("kind", "") != "grm") throw DataError("'" + path + "' is not a recommender checkpoint");
  if (h.at("levels").get<std::size_t>() != expected.levels() ||
      h.at("codebook_size").get<std::size_t>() != expected.codebook_size())
    throw DataError("checkpoint vocabulary does not match the configured semantic-ID shape");
  auto model = std::make_unique<GrmModel>(expected, GrmConfig::from_json(h.at("config")), 0);
  load_checkpoint(path, model->params());
  return model;
}

void stage_train(const Run& run) {
  const auto& c = run.cfg();
  auto [text, vision] = run.tables();
  const auto ids = run.ids(text);
  const Vocab v = vocab_for(c);
  check_ids(ids, v);
  const auto tasks_path = run.require("tasks.jsonl", "build-tasks");
  const auto tasks = load_tasks(tasks_path, v);
  const auto log = run.interactions(text);
  GrmModel model(v, c.pipe.model, run.seeds().model);

  std::function<double()> validate;
  std::optional<IdTrie> tt, tv;
  if (c.pipe.valid_users > 0) {
    tt.emplace(ids.text, v);
    tv.emplace(ids.vision, v);
    validate = [&] {
      EvalOptions o = c.pipe.eval;
      o.split = Split::kValid;
      o.max_users = c.pipe.valid_users;
      const auto r = evaluate_model(model, log, ids, *tt, *tv, o);
      return (o.ensemble ? r.ensemble : r.text).hr_at(10);
    };
  }
  const auto report = train_grm(model, tasks, ids, c.pipe.grm, run.seeds().training, validate, [&](const GrmEpochStats& s) {
    std::string msg = "epoch " + std::to_string(s.epoch) + " loss " + std::to_string(s.total);
    if (s.valid_hr10) msg += " valid HR@10 " + std::to_string(*s.valid_hr10);
    run.log("train", msg);
  });
  const auto ckpt = run.path("model.ckpt"), rep = run.path("train_report.json");
  auto header = model.header();
  header["seed"] = c.seed;
  save_checkpoint(ckpt, model.params(), header);
  std::ofstream(rep) << report.to_json().dump(2) << '\n';
  run.record("train", {run.path("ids.jsonl"), tasks_path}, {ckpt, rep});
}

ojson ranked_json(const RankedList& r, const ItemSemanticIds& ids) {
  ojson a = ojson::array();
  for (const auto& s : r) a.push_back({{"item", ids.items[s.item]}, {"score", s.score}});
  return a;
}

void stage_infer(const Run& run) {
  const auto& c = run.cfg();
  auto [text, vision] = run.tables();
  const auto ids = run.ids(text);
  const Vocab v = vocab_for(c);
  check_ids(ids, v);
  const auto ckpt = run.require("model.ckpt", "train");
  const auto model = load_model(ckpt, v);
  const auto log = run.interactions(text);
  const IdTrie tt(ids.text, v), tv(ids.vision, v);
  const auto rep = evaluate_model(*model, log, ids, tt, tv, c.pipe.eval, true);
  const auto out = run.path("rankings.jsonl");
  std::ofstream os(out);
  for (std::size_t u = 0; u < rep.per_user.size(); ++u) {
    const auto& user = log.users[u];
    const auto s = InteractionLog::split(user);
    ojson j;
    j["user"] = user.user;
    j["target"] = ids.items[c.pipe.eval.split == Split::kTest ? s.test : s.valid];
    j["text"] = ranked_json(rep.per_user[u].text, ids);
    if (c.pipe.eval.ensemble) {
      j["vision"] = ranked_json(rep.per_user[u].vision, ids);
      j["ensemble"] = ranked_json(rep.per_user[u].ensemble, ids);
    }
    os << j.dump() << '\n';
  }
  run.log("infer", "ranked " + std::to_string(rep.per_user.size()) + " users");
  run.record("infer", {ckpt, run.path("ids.jsonl"), run.interactions_path()}, {out});
}

void stage_eval(const Run& run) {
  const auto& c = run.cfg();
  auto [text, vision] = run.tables();
  const auto ids = run.ids(text);
  const Vocab v = vocab_for(c);
  check_ids(ids, v);
  const auto ckpt = run.require("model.ckpt", "train");
  const auto model = load_model(ckpt, v);
  const auto log = run.interactions(text);
  const IdTrie tt(ids.text, v), tv(ids.vision, v);
  const auto& opt = c.pipe.eval;
  const auto rep = evaluate_model(*model, log, ids, tt, tv, opt);
  const Metrics& headline = opt.ensemble ? rep.ensemble : rep.text;

  ojson j;
  j["dataset"] = c.dataset;
  j["seed"] = c.seed;
  j["split"] = c.split;
  const auto top = headline.to_json();
  for (const auto& [k, val] : top.items()) j[k] = val;
  j["text"] = rep.text.to_json();
  if (opt.ensemble) {
    j["vision"] = rep.vision.to_json();
    j["ensemble"] = rep.ensemble.to_json();
  }
  ojson baselines;
  baselines["popularity"] = popularity_metrics(log, opt.split, opt.k, opt.max_users).to_json();
  if (c.untrained_baseline) {
    const GrmModel fresh(v, c.pipe.model, run.seeds().model);
    const auto u = evaluate_model(fresh, log, ids, tt, tv, opt);
    baselines["untrained"] = (opt.ensemble ? u.ensemble : u.text).to_json();
  }
  j["baselines"] = baselines;
  const auto out = run.path("metrics.json");
  std::ofstream(out) << j.dump(2) << '\n';
  run.log("eval", "HR@10 " + std::to_string(headline.hr_at(10)) + ", NDCG@10 " + std::to_string(headline.ndcg_at(10)) +
                      ", popularity HR@10 " + std::to_string(baselines["popularity"]["HR@10"].get<double>()));
  run.record("eval", {ckpt, run.path("ids.jsonl"), run.interactions_path()}, {out});
}

using StageFn = void (*)(const Run&);

struct StageDef {
  const char* name;
  const char* help;
  StageFn fn;
};

constexpr StageDef kStages[] = {
    {"synth", "Generate a synthetic dual-modality corpus", stage_synth},
    {"labels", "Cluster both modalities into pseudo-labels", stage_labels},
    {"quantize", "Train the cross-modal quantizer and assign semantic IDs", stage_quantize},
    {"diagnose", "Collision rate, perplexity and code histograms", stage_diagnose},
    {"build-tasks", "Materialize the training task streams", stage_build_tasks},
    {"train", "Train the generative recommender", stage_train},
    {"infer", "Write per-user rankings", stage_infer},
    {"eval", "Leave-one-out HR/NDCG with a popularity baseline", stage_eval},
};

int run_command(const std::string& command, RunConfig cfg) {
  if (auto problems = finalize(cfg); !problems.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
  Run run(cfg, cfg.to_json());
  std::vector<std::string> stages;
  if (command == "pipeline") {
    if (!run.has_external_data()) stages.push_back("synth");
    for (const char* s : {"labels", "quantize", "diagnose", "build-tasks", "train", "eval"}) stages.push_back(s);
  } else {
    stages.push_back(command);
  }
  for (const auto& name : stages) {
    if (cfg.dry_run) {
      run.record_dry_run(name);
      continue;
    }
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& s : kStages)
      if (name == s.name) s.fn(run);
    run.log(name, "done in " + std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + " s");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal semantic-ID generative recommender"};
  app.set_version_flag("--version", kVersion);
  app.config_formatter(std::make_shared<FlatIni>());
  app.set_config("--config", "", "INI config file; command-line flags override it");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);
  RunConfig cfg;
  add_options(app, cfg);
  for (const auto& s : kStages) app.add_subcommand(s.name, s.help)->fallthrough();
  app.add_subcommand("pipeline", "Run every stage in order (synth only without external data)")->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }
  try {
    return run_command(app.get_subcommands().front()->get_name(), cfg);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed JSON input: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kFailure);
  }
}
