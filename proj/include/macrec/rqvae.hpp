#pragma once

// Cross-modal residual-quantized autoencoder.
//
// Each modality has an MLP encoder to a shared latent width, L codebooks of
// M codewords, and a mirrored MLP decoder. Training combines, per modality,
// reconstruction and codebook/commitment losses with per-level contrastive
// terms on the residuals (positives picked through the other modality's
// pseudo-labels) and a symmetric alignment between the two quantized vectors.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "macrec/autodiff.hpp"
#include "macrec/data_io.hpp"
#include "macrec/diagnostics.hpp"
#include "macrec/kmeans.hpp"
#include "macrec/losses.hpp"
#include "macrec/nn.hpp"
#include "macrec/optim.hpp"
#include "macrec/semantic_id.hpp"

namespace macrec {

struct IdHyper {
  std::size_t levels = 4;
  std::size_t codebook_size = 256;
  std::size_t latent_dim = 32;
  std::vector<std::size_t> hidden = {512, 256};
  double tau = 0.1;
  double alpha = 0.25;
  std::vector<double> lambda_con = {0.0, 0.0, 0.1, 0.1};
  double lambda_align = 0.001;
  std::size_t batch_size = 1024;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::size_t epochs = 200;
  std::size_t kmeans_iters = 50;

  std::vector<std::string> problems(std::size_t dataset_size) const {
    std::vector<std::string> p;
    if (!(tau > 0.0)) p.push_back("tau must be > 0");
    if (alpha < 0.0) p.push_back("alpha must be >= 0");
    if (lambda_align < 0.0) p.push_back("lambda_align must be >= 0");
    if (lambda_con.size() != levels)
      p.push_back("lambda_con needs one weight per level (" + std::to_string(levels) + ")");
    for (double l : lambda_con)
      if (l < 0.0) p.push_back("lambda_con weights must be >= 0");
    if (batch_size == 0 || (dataset_size > 0 && batch_size > dataset_size))
      p.push_back("batch size must satisfy 0 < B <= dataset size");
    if (levels == 0 || codebook_size == 0 || latent_dim == 0) p.push_back("levels, codebook size, latent dim must be > 0");
    if (!(lr >= 0.0)) p.push_back("learning rate must be >= 0");
    return p;
  }
};

struct QuantizeTrace {
  std::vector<Code> codes;                   // c_l
  std::vector<std::vector<float>> residual;  // r_0 .. r_L, r_0 = z
  std::vector<float> quantized;              // sum_l e_{l, c_l}
};

// Greedy residual quantization: at each level pick the nearest codeword to the
// current residual (ties to the smallest index) and subtract it.
inline QuantizeTrace residual_quantize(std::span<const float> z, const std::vector<const Tensor*>& books) {
  QuantizeTrace tr;
  const std::size_t d = z.size();
  tr.residual.emplace_back(z.begin(), z.end());
  tr.quantized.assign(d, 0.0f);
  for (const Tensor* book : books) {
    if (book->cols() != d)
      throw ShapeError("residual_quantize", "codebook width " + std::to_string(book->cols()) + " != " + std::to_string(d));
    const auto& r = tr.residual.back();
    Code best = 0;
    float bd = std::numeric_limits<float>::infinity();
    for (std::size_t k = 0; k < book->rows(); ++k) {
      const float dist = kernels::squared_distance<float>(r, book->row(k));
      if (dist < bd) {
        bd = dist;
        best = static_cast<Code>(k);
      }
    }
    tr.codes.push_back(best);
    auto e = book->row(best);
    std::vector<float> next(d);
    for (std::size_t j = 0; j < d; ++j) {
      next[j] = r[j] - e[j];
      tr.quantized[j] += e[j];
    }
    tr.residual.push_back(std::move(next));
  }
  return tr;
}

// Level 0: k-means centroids of the latents; level l: k-means centroids of
// the residuals left by levels 0..l-1.
inline std::vector<Tensor> init_codebooks(const Tensor& latents, std::size_t levels, std::size_t m,
                                          std::uint64_t seed, std::size_t kmeans_iters = 50) {
  {
    std::unordered_set<std::string> distinct;
    for (std::size_t i = 0; i < latents.rows() && distinct.size() < m; ++i) {
      auto r = latents.row(i);
      distinct.emplace(reinterpret_cast<const char*>(r.data()), r.size() * sizeof(float));
    }
    if (distinct.size() < m)
      throw DataError("codebook init needs at least " + std::to_string(m) + " distinct latent samples, got " +
                      std::to_string(distinct.size()));
  }
  std::vector<Tensor> books;
  Tensor residual = latents;
  for (std::size_t l = 0; l < levels; ++l) {
    auto km = kmeans(residual, m, kmeans_iters, derive_seed(seed, "codebook." + std::to_string(l)));
    for (std::size_t i = 0; i < residual.rows(); ++i) {
      auto c = km.centroids.row(km.labels[i]);
      auto r = residual.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) r[j] -= c[j];
    }
    books.push_back(std::move(km.centroids));
  }
  return books;
}

class Quantizer {
 public:
  struct Side {
    nn::Mlp encoder;
    nn::Mlp decoder;
    std::vector<Parameter*> codebooks;
  };

  Quantizer(std::size_t text_dim, std::size_t vision_dim, IdHyper hyper, std::uint64_t seed)
      : hyper_(std::move(hyper)), text_dim_(text_dim), vision_dim_(vision_dim) {
    build(text_, "text", text_dim, seed);
    build(vision_, "vision", vision_dim, seed);
  }

  const IdHyper& hyper() const noexcept { return hyper_; }
  IdHyper& hyper() noexcept { return hyper_; }
  std::size_t input_dim(Modality m) const { return m == Modality::kText ? text_dim_ : vision_dim_; }
  ParamStore& params() noexcept { return store_; }
  const ParamStore& params() const noexcept { return store_; }
  const Side& side(Modality m) const { return m == Modality::kText ? text_ : vision_; }
  bool codebooks_initialized() const noexcept { return codebooks_initialized_; }
  void mark_codebooks_initialized() noexcept { codebooks_initialized_ = true; }

  std::vector<const Tensor*> codebooks(Modality m) const {
    std::vector<const Tensor*> out;
    for (auto* p : side(m).codebooks) out.push_back(&p->value);
    return out;
  }

  void set_codebooks(Modality m, const std::vector<Tensor>& books) {
    auto& s = m == Modality::kText ? text_ : vision_;
    for (std::size_t l = 0; l < books.size(); ++l) {
      if (books[l].shape != s.codebooks[l]->value.shape) throw ShapeError("set_codebooks", "codebook shape");
      s.codebooks[l]->value = books[l];
    }
  }

  // Latents for all rows of x, without recording gradients.
  Tensor encode(Modality m, const Tensor& x) const {
    Tape t(false);
    return t.value(side(m).encoder(t, t.constant(x)));
  }

  nlohmann::json header() const {
    return {{"kind", "quantizer"},
            {"text_dim", text_dim_},
            {"vision_dim", vision_dim_},
            {"levels", hyper_.levels},
            {"codebook_size", hyper_.codebook_size},
            {"latent_dim", hyper_.latent_dim},
            {"hidden", hyper_.hidden}};
  }

 private:
  void build(Side& s, const std::string& name, std::size_t in, std::uint64_t seed) {
    std::vector<std::size_t> dims{in};
    dims.insert(dims.end(), hyper_.hidden.begin(), hyper_.hidden.end());
    dims.push_back(hyper_.latent_dim);
    s.encoder = nn::Mlp(store_, name + ".encoder", dims, seed);
    std::reverse(dims.begin(), dims.end());
    s.decoder = nn::Mlp(store_, name + ".decoder", dims, seed);
    for (std::size_t l = 0; l < hyper_.levels; ++l) {
      const std::string pname = name + ".codebook." + std::to_string(l);
      s.codebooks.push_back(
          &store_.add(pname, nn::normal_init({hyper_.codebook_size, hyper_.latent_dim}, 0.1, seed, pname)));
    }
  }

  IdHyper hyper_;
  std::size_t text_dim_, vision_dim_;
  ParamStore store_;
  Side text_, vision_;
  bool codebooks_initialized_ = false;
};

// ---- losses ----------------------------------------------------------------

struct RqLossBreakdown {
  double recon_text = 0, recon_vision = 0;
  double rq_text = 0, rq_vision = 0;
  std::vector<double> con;  // per level, t->v + v->t
  double align = 0;
  double total = 0;
  std::size_t con_anchors = 0, con_skipped = 0;

  nlohmann::json to_json() const {
    return {{"recon_text", recon_text}, {"recon_vision", recon_vision}, {"rq_text", rq_text},
            {"rq_vision", rq_vision},   {"con", con},                   {"align", align},
            {"total", total},           {"con_anchors", con_anchors},   {"con_skipped", con_skipped}};
  }
};

// Tape variables produced by quantizing one modality's batch.
struct QuantizedBatch {
  Var latent;                  // z
  std::vector<Var> residuals;  // r_0 .. r_{L-1}, each before its level's quantization
  Var rq_loss;                 // sum_l mean_b ( ||sg[r_l] - e_l||^2 + alpha ||r_l - sg[e_l]||^2 )
  Var decoder_input;           // value sum_l e_l, gradient straight through to z
  Var aligned;                 // value sum_l e_l, gradient to codebooks and to z
  std::vector<std::vector<Code>> codes;  // [level][row]
};

// Quantizes a batch of latents on the tape. The residual chain subtracts
// sg[e_l], so the encoder reaches every r_l with identity Jacobian while the
// codebooks only receive gradient from their own codebook term (and from the
// alignment loss).
template <class Real>
QuantizedBatch quantize_on_tape(BasicTape<Real>& t, Var z, const std::vector<Var>& books, double alpha) {
  QuantizedBatch qb;
  qb.latent = z;
  const auto& zv = t.value(z);
  const std::size_t b = zv.rows(), d = zv.cols();
  std::vector<BasicTensor<Real>> resid_vals{zv};
  Var r = z;
  Var quant_sum;
  Var rq;
  for (std::size_t l = 0; l < books.size(); ++l) {
    const auto& book = t.value(books[l]);
    std::vector<std::uint32_t> codes(b);
    const auto& rv = t.value(r);
    for (std::size_t i = 0; i < b; ++i) {
      Real bd = std::numeric_limits<Real>::infinity();
      for (std::size_t k = 0; k < book.rows(); ++k) {
        const Real dist = kernels::squared_distance<Real>(rv.row(i), book.row(k));
        if (dist < bd) {
          bd = dist;
          codes[i] = static_cast<std::uint32_t>(k);
        }
      }
    }
    qb.codes.emplace_back(codes.begin(), codes.end());
    qb.residuals.push_back(r);
    Var e = t.gather_rows(books[l], codes);
    Var codebook_term = t.sq_norm(t.sub(t.stop_gradient(r), e));
    Var commit_term = t.scale(t.sq_norm(t.sub(r, t.stop_gradient(e))), static_cast<Real>(alpha));
    Var level = t.scale(t.add(codebook_term, commit_term), Real(1) / static_cast<Real>(b));
    rq = rq.valid() ? t.add(rq, level) : level;
    quant_sum = quant_sum.valid() ? t.add(quant_sum, e) : e;
    r = t.sub(r, t.stop_gradient(e));
  }
  (void)d;
  qb.rq_loss = rq;
  Var passthrough = t.sub(z, t.stop_gradient(z));  // value 0, d/dz = I
  qb.decoder_input = t.add(t.stop_gradient(quant_sum), passthrough);
  qb.aligned = t.add(quant_sum, passthrough);
  return qb;
}

struct RqBatchLoss {
  Var total;
  RqLossBreakdown parts;
};

// Total ID objective for one aligned batch (row i of both inputs is the same
// item). text_pos / vision_pos are the sampled in-batch positives for text and
// vision anchors (chosen through the vision and text pseudo-labels).
template <class Real>
RqBatchLoss rqvae_objective(BasicTape<Real>& t, Var x_text, Var x_vision, Var z_text, Var z_vision,
                            const std::function<Var(Var)>& decode_text, const std::function<Var(Var)>& decode_vision,
                            const std::vector<Var>& books_text, const std::vector<Var>& books_vision,
                            const std::vector<int>& text_pos, const std::vector<int>& vision_pos, const IdHyper& h) {
  RqBatchLoss out;
  auto qt = quantize_on_tape(t, z_text, books_text, h.alpha);
  auto qv = quantize_on_tape(t, z_vision, books_vision, h.alpha);
  const Real inv_b = Real(1) / static_cast<Real>(t.value(x_text).rows());
  Var recon_t = t.scale(t.sq_norm(t.sub(x_text, decode_text(qt.decoder_input))), inv_b);
  Var recon_v = t.scale(t.sq_norm(t.sub(x_vision, decode_vision(qv.decoder_input))), inv_b);
  Var total = t.add(t.add(recon_t, recon_v), t.add(qt.rq_loss, qv.rq_loss));
  auto& p = out.parts;
  p.recon_text = t.value(recon_t).item();
  p.recon_vision = t.value(recon_v).item();
  p.rq_text = t.value(qt.rq_loss).item();
  p.rq_vision = t.value(qv.rq_loss).item();
  for (std::size_t l = 0; l < h.levels; ++l) {
    auto ct = positive_pair_infonce(t, qt.residuals[l], text_pos, h.tau);
    auto cv = positive_pair_infonce(t, qv.residuals[l], vision_pos, h.tau);
    Var con = t.add(ct.loss, cv.loss);
    p.con.push_back(t.value(con).item());
    p.con_anchors += ct.anchors + cv.anchors;
    p.con_skipped += ct.skipped + cv.skipped;
    if (h.lambda_con[l] > 0.0) total = t.add(total, t.scale(con, static_cast<Real>(h.lambda_con[l])));
  }
  Var align = symmetric_infonce(t, qt.aligned, qv.aligned, h.tau);
  p.align = t.value(align).item();
  if (h.lambda_align > 0.0) total = t.add(total, t.scale(align, static_cast<Real>(h.lambda_align)));
  p.total = t.value(total).item();
  out.total = total;
  return out;
}

inline Tensor gather_matrix_rows(const Tensor& m, std::span<const std::size_t> rows) {
  Tensor out = Tensor::matrix(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(m.row(rows[i]).begin(), m.row(rows[i]).end(), out.row(i).begin());
  return out;
}

// Loss of one batch of item indices on the quantizer's current parameters.
inline RqBatchLoss rqvae_loss(Tape& t, const Quantizer& q, const EmbeddingTable& text, const EmbeddingTable& vision,
                              std::span<const std::size_t> batch, const PseudoLabels& text_labels,
                              const PseudoLabels& vision_labels, Rng& positive_rng) {
  const auto& h = q.hyper();
  Var xt = t.constant(gather_matrix_rows(text.matrix(), batch));
  Var xv = t.constant(gather_matrix_rows(vision.matrix(), batch));
  const auto& st = q.side(Modality::kText);
  const auto& sv = q.side(Modality::kVision);
  std::vector<Var> bt, bv;
  for (auto* p : st.codebooks) bt.push_back(t.param(*p));
  for (auto* p : sv.codebooks) bv.push_back(t.param(*p));
  std::vector<std::uint32_t> lt, lv;
  for (auto i : batch) {
    lt.push_back(text_labels.label[i]);
    lv.push_back(vision_labels.label[i]);
  }
  // Text anchors pair through vision labels and vice versa.
  auto text_pos = sample_positives(lv, positive_rng);
  auto vision_pos = sample_positives(lt, positive_rng);
  return rqvae_objective<float>(
      t, xt, xv, st.encoder(t, xt), sv.encoder(t, xv), [&](Var z) { return st.decoder(t, z); },
      [&](Var z) { return sv.decoder(t, z); }, bt, bv, text_pos, vision_pos, h);
}

// ---- semantic IDs and conflict resolution ----------------------------------

struct RawCodes {
  SemanticIdTable ids;
  std::vector<Tensor> level_input;     // [l]: r_l per item, the input of level l
  std::vector<double> quantize_error;  // ||z - zhat|| per item
};

inline RawCodes raw_codes(const Quantizer& q, Modality m, const Tensor& x) {
  const auto& h = q.hyper();
  RawCodes out;
  out.ids.modality = m;
  out.ids.levels = h.levels;
  out.ids.codebook_size = h.codebook_size;
  const Tensor z = q.encode(m, x);
  const auto books = q.codebooks(m);
  out.level_input.assign(h.levels, Tensor::matrix(z.rows(), z.cols()));
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto tr = residual_quantize(z.row(i), books);
    out.ids.codes.insert(out.ids.codes.end(), tr.codes.begin(), tr.codes.end());
    for (std::size_t l = 0; l < h.levels; ++l)
      std::copy(tr.residual[l].begin(), tr.residual[l].end(), out.level_input[l].row(i).begin());
    double err = 0;
    for (float v : tr.residual.back()) err += static_cast<double>(v) * v;
    out.quantize_error.push_back(std::sqrt(err));
  }
  return out;
}

namespace detail {

// All code tuples for levels [start, L) with ||r_start - sum_l e_l||^2, which
// equals the squared distance between z and the resulting quantized vector.
inline void enumerate_tails(std::span<const float> r, const std::vector<const Tensor*>& books, std::size_t level,
                            std::vector<Code>& prefix, std::vector<std::pair<double, std::vector<Code>>>& out) {
  if (level == books.size()) {
    double d = 0;
    for (float v : r) d += static_cast<double>(v) * v;
    out.emplace_back(d, prefix);
    return;
  }
  std::vector<float> next(r.size());
  for (std::size_t k = 0; k < books[level]->rows(); ++k) {
    auto e = books[level]->row(k);
    for (std::size_t j = 0; j < r.size(); ++j) next[j] = r[j] - e[j];
    prefix.push_back(static_cast<Code>(k));
    enumerate_tails(next, books, level + 1, prefix, out);
    prefix.pop_back();
  }
}

}  // namespace detail

// Makes IDs unique. Among items sharing a full ID, the one with the smallest
// quantization error keeps it (ties to the lower item index). Every other
// item, in increasing item index, takes the nearest free last-level codeword
// (by distance from its last-level residual). If all M are taken under its
// prefix, the last two levels are searched jointly by the same distance, then
// the last three, and so on.
inline SemanticIdTable resolve_collisions(const SemanticIdTable& raw, const std::vector<Tensor>& level_input,
                                          const std::vector<double>& quantize_error,
                                          const std::vector<const Tensor*>& books) {
  const std::size_t n = raw.size(), levels = raw.levels, m = raw.codebook_size;
  if (std::pow(static_cast<double>(m), static_cast<double>(levels)) < static_cast<double>(n))
    throw DataError("ID space too small: " + std::to_string(m) + "^" + std::to_string(levels) + " < " +
                    std::to_string(n) + " items");
  if (level_input.size() != levels || books.size() != levels)
    throw ShapeError("resolve_collisions", "need one residual matrix and one codebook per level");
  constexpr double kMaxCandidates = 1 << 22;
  SemanticIdTable out = raw;
  std::unordered_map<std::uint64_t, std::size_t> keeper;
  for (std::size_t i = 0; i < n; ++i) {
    auto [it, inserted] = keeper.emplace(raw.key(i), i);
    if (!inserted && quantize_error[i] < quantize_error[it->second]) it->second = i;
  }
  std::unordered_set<std::uint64_t> taken;
  for (const auto& [k, i] : keeper) taken.insert(k);
  std::vector<std::pair<double, std::vector<Code>>> cands;
  std::vector<Code> tail;
  for (std::size_t i = 0; i < n; ++i) {
    if (keeper.at(raw.key(i)) == i) continue;
    auto id = out.id(i);
    bool placed = false;
    for (std::size_t depth = 1; depth <= levels && !placed; ++depth) {
      if (std::pow(static_cast<double>(m), static_cast<double>(depth)) > kMaxCandidates) break;
      const std::size_t start = levels - depth;
      cands.clear();
      detail::enumerate_tails(level_input[start].row(i),
                              std::vector<const Tensor*>(books.begin() + static_cast<std::ptrdiff_t>(start), books.end()),
                              0, tail, cands);
      std::sort(cands.begin(), cands.end());
      for (const auto& [dist, codes] : cands) {
        std::copy(codes.begin(), codes.end(), id.begin() + static_cast<std::ptrdiff_t>(start));
        if (taken.insert(out.key(i)).second) {
          placed = true;
          break;
        }
      }
    }
    if (!placed) {
      const auto r = raw.id(i);
      throw DataError("collision resolution found no free ID for item " + std::to_string(i) + " (raw ID " +
                      sid_string(raw.modality, r) + ")");
    }
  }
  return out;
}

struct AssignedIds {
  ItemSemanticIds final_ids;
  SemanticIdTable raw_text;
  SemanticIdTable raw_vision;
};

inline AssignedIds assign_semantic_ids(const Quantizer& q, const EmbeddingTable& text, const EmbeddingTable& vision) {
  AssignedIds out;
  auto rt = raw_codes(q, Modality::kText, text.matrix());
  auto rv = raw_codes(q, Modality::kVision, vision.matrix());
  out.final_ids.items = text.ids();
  out.final_ids.text = resolve_collisions(rt.ids, rt.level_input, rt.quantize_error, q.codebooks(Modality::kText));
  out.final_ids.vision =
      resolve_collisions(rv.ids, rv.level_input, rv.quantize_error, q.codebooks(Modality::kVision));
  out.raw_text = std::move(rt.ids);
  out.raw_vision = std::move(rv.ids);
  return out;
}

// ---- training ----------------------------------------------------------------

struct QuantizerEpochStats {
  std::size_t epoch = 0;
  RqLossBreakdown mean;  // batch-size weighted means
  std::vector<std::size_t> usage_text, usage_vision;  // distinct codewords used per level
  double collision_text = 0, collision_vision = 0;    // pre-resolution, percent

  nlohmann::json to_json() const {
    return {{"epoch", epoch},
            {"loss", mean.to_json()},
            {"usage_text", usage_text},
            {"usage_vision", usage_vision},
            {"collision_text", collision_text},
            {"collision_vision", collision_vision}};
  }
};

struct QuantizerReport {
  std::vector<QuantizerEpochStats> epochs;
  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : epochs) j.push_back(e.to_json());
    return j;
  }
};

// Raised when the total loss stops being finite. The quantizer has already
// been rolled back to the parameters from the start of the failing epoch.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& msg, RqLossBreakdown parts) : NumericError(msg), parts_(std::move(parts)) {}
  const RqLossBreakdown& breakdown() const noexcept { return parts_; }

 private:
  RqLossBreakdown parts_;
};

// Initializes codebooks from k-means on the initial latents (first call only),
// then runs hyper().epochs epochs of shuffled mini-batch AdamW.
inline QuantizerReport train_quantizer(Quantizer& q, const EmbeddingTable& text, const EmbeddingTable& vision,
                                       const PseudoLabels& text_labels, const PseudoLabels& vision_labels,
                                       std::uint64_t seed,
                                       const std::function<void(const QuantizerEpochStats&)>& on_epoch = {}) {
  const auto& h = q.hyper();
  if (text.ids() != vision.ids()) throw DataError("quantizer needs both tables over the same item order");
  if (auto p = h.problems(text.size()); !p.empty()) {
    std::string msg = "invalid quantizer hyperparameters:";
    for (const auto& s : p) msg += "\n  - " + s;
    throw ConfigError(msg);
  }
  if (text_labels.label.size() != text.size() || vision_labels.label.size() != vision.size())
    throw DataError("pseudo-labels do not cover every item");
  if (!q.codebooks_initialized()) {
    for (Modality m : {Modality::kText, Modality::kVision}) {
      const Tensor z = q.encode(m, m == Modality::kText ? text.matrix() : vision.matrix());
      q.set_codebooks(m, init_codebooks(z, h.levels, h.codebook_size, derive_seed(seed, to_string(m)), h.kmeans_iters));
    }
    q.mark_codebooks_initialized();
  }

  QuantizerReport report;
  AdamW opt(q.params(), {.lr = h.lr, .weight_decay = h.weight_decay});
  std::vector<std::size_t> order(text.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng(seed, "quantizer.shuffle");
  Rng positive_rng(seed, "quantizer.positives");

  for (std::size_t epoch = 1; epoch <= h.epochs; ++epoch) {
    const auto last_good = q.params().snapshot();
    shuffle_rng.shuffle(order.begin(), order.end());
    QuantizerEpochStats stats;
    stats.epoch = epoch;
    stats.mean.con.assign(h.levels, 0.0);
    double seen = 0;
    for (std::size_t start = 0; start < order.size(); start += h.batch_size) {
      const std::size_t end = std::min(order.size(), start + h.batch_size);
      std::span<const std::size_t> batch(order.data() + start, end - start);
      q.params().zero_grad();
      Tape t;
      auto loss = rqvae_loss(t, q, text, vision, batch, text_labels, vision_labels, positive_rng);
      if (!std::isfinite(loss.parts.total)) {
        q.params().restore(last_good);
        throw TrainingDiverged("quantizer loss is not finite at epoch " + std::to_string(epoch) + ": " +
                                   loss.parts.to_json().dump(),
                               loss.parts);
      }
      t.backward(loss.total);
      opt.step();
      const double w = static_cast<double>(batch.size());
      auto& mn = stats.mean;
      const auto& p = loss.parts;
      mn.recon_text += w * p.recon_text;
      mn.recon_vision += w * p.recon_vision;
      mn.rq_text += w * p.rq_text;
      mn.rq_vision += w * p.rq_vision;
      for (std::size_t l = 0; l < h.levels; ++l) mn.con[l] += w * p.con[l];
      mn.align += w * p.align;
      mn.total += w * p.total;
      mn.con_anchors += p.con_anchors;
      mn.con_skipped += p.con_skipped;
      seen += w;
    }
    auto& mn = stats.mean;
    for (double* v : {&mn.recon_text, &mn.recon_vision, &mn.rq_text, &mn.rq_vision, &mn.align, &mn.total}) *v /= seen;
    for (auto& c : mn.con) c /= seen;
    const auto rt = raw_codes(q, Modality::kText, text.matrix()).ids;
    const auto rv = raw_codes(q, Modality::kVision, vision.matrix()).ids;
    for (std::size_t l = 0; l < h.levels; ++l) {
      stats.usage_text.push_back(codewords_used(rt, l));
      stats.usage_vision.push_back(codewords_used(rv, l));
    }
    stats.collision_text = collision_rate(rt);
    stats.collision_vision = collision_rate(rv);
    if (on_epoch) on_epoch(stats);
    report.epochs.push_back(std::move(stats));
  }
  return report;
}

}  // namespace macrec
