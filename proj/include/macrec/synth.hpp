#pragma once

// Seeded synthetic dual-modality corpus.
//
// Items belong to one of C latent clusters (balanced assignment). The text
// embedding of an item is drawn around its cluster's text centre. Its vision
// cluster equals perm(cluster) with probability cross_modal_corr, for a fixed
// seeded permutation perm, and is uniform over all clusters otherwise; the
// vision embedding is drawn around that cluster's vision centre.
//
// User sequences follow a cluster-level Markov chain: with probability
// shift_prob the next cluster is (c + 1) mod C, otherwise it is uniform. The
// item inside a cluster is drawn with Zipf(zipf_exponent) popularity over a
// seeded ranking of the cluster's members. Every user has exactly seq_len
// interactions.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "macrec/data_io.hpp"
#include "macrec/error.hpp"
#include "macrec/rng.hpp"

namespace macrec {

struct SynthParams {
  std::size_t n_items = 2000;
  std::size_t n_clusters = 64;
  std::size_t d_text = 64;
  std::size_t d_vision = 48;
  double cross_modal_corr = 0.7;
  std::size_t n_users = 5000;
  std::size_t seq_len = 8;
  std::uint64_t seed = 1;
  double center_scale = 1.0;  // per-dimension std of cluster centres
  double noise_scale = 0.35;  // per-dimension std around a centre
  double shift_prob = 0.8;
  double zipf_exponent = 1.0;
};

struct SynthData {
  EmbeddingTable text;
  EmbeddingTable vision;
  InteractionLog log;
  std::vector<std::uint32_t> text_cluster;    // ground-truth latent cluster
  std::vector<std::uint32_t> vision_cluster;  // cluster the vision vector was drawn from
  std::vector<std::uint32_t> cluster_map;     // the fixed bijection text -> vision cluster
};

inline void validate(const SynthParams& p) {
  std::vector<std::string> errs;
  if (p.n_items == 0) errs.push_back("n_items must be > 0");
  if (p.n_clusters == 0 || p.n_clusters > p.n_items) errs.push_back("need 1 <= n_clusters <= n_items");
  if (p.d_text == 0 || p.d_vision == 0) errs.push_back("embedding dims must be > 0");
  if (!(p.cross_modal_corr >= 0.0 && p.cross_modal_corr <= 1.0)) errs.push_back("cross_modal_corr must lie in [0, 1]");
  if (p.seq_len < 3) errs.push_back("seq_len must be >= 3");
  if (!(p.shift_prob >= 0.0 && p.shift_prob <= 1.0)) errs.push_back("shift_prob must lie in [0, 1]");
  if (!errs.empty()) {
    std::string msg = "invalid synthesis parameters:";
    for (const auto& e : errs) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
}

inline std::string padded_id(char prefix, std::size_t i, std::size_t total) {
  std::ostringstream os;
  const int width = static_cast<int>(std::to_string(total > 0 ? total - 1 : 0).size());
  os << prefix << std::setw(width) << std::setfill('0') << i;
  return os.str();
}

inline SynthData synth_dual_modal(const SynthParams& p) {
  validate(p);
  const std::size_t n = p.n_items, c = p.n_clusters;
  SynthData out;

  Rng assign_rng(p.seed, "synth.assign");
  std::vector<std::uint32_t> cluster(n);
  for (std::size_t i = 0; i < n; ++i) cluster[i] = static_cast<std::uint32_t>(i % c);
  assign_rng.shuffle(cluster.begin(), cluster.end());

  std::vector<std::uint32_t> perm(c);
  for (std::size_t k = 0; k < c; ++k) perm[k] = static_cast<std::uint32_t>(k);
  Rng perm_rng(p.seed, "synth.perm");
  perm_rng.shuffle(perm.begin(), perm.end());

  Rng vis_rng(p.seed, "synth.vision_cluster");
  std::vector<std::uint32_t> vcluster(n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool tied = vis_rng.uniform() < p.cross_modal_corr;
    const auto random_cluster = static_cast<std::uint32_t>(vis_rng.below(c));
    vcluster[i] = tied ? perm[cluster[i]] : random_cluster;
  }

  auto centres = [&](std::size_t dim, const char* tag) {
    Rng r(p.seed, tag);
    Tensor t = Tensor::matrix(c, dim);
    for (auto& v : t.data) v = static_cast<float>(r.normal(0.0, p.center_scale));
    return t;
  };
  const Tensor tc = centres(p.d_text, "synth.text_centres");
  const Tensor vc = centres(p.d_vision, "synth.vision_centres");

  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = padded_id('i', i, n);

  Rng noise_rng(p.seed, "synth.noise");
  Tensor tm = Tensor::matrix(n, p.d_text);
  Tensor vm = Tensor::matrix(n, p.d_vision);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p.d_text; ++j)
      tm(i, j) = tc(cluster[i], j) + static_cast<float>(noise_rng.normal(0.0, p.noise_scale));
    for (std::size_t j = 0; j < p.d_vision; ++j)
      vm(i, j) = vc(vcluster[i], j) + static_cast<float>(noise_rng.normal(0.0, p.noise_scale));
  }
  out.text = EmbeddingTable(Modality::kText, ids, std::move(tm));
  out.vision = EmbeddingTable(Modality::kVision, ids, std::move(vm));

  // Members of each cluster in a seeded popularity order, with Zipf weights.
  std::vector<std::vector<std::uint32_t>> members(c);
  for (std::size_t i = 0; i < n; ++i) members[cluster[i]].push_back(static_cast<std::uint32_t>(i));
  Rng pop_rng(p.seed, "synth.popularity");
  std::vector<std::vector<double>> weights(c);
  for (std::size_t k = 0; k < c; ++k) {
    pop_rng.shuffle(members[k].begin(), members[k].end());
    for (std::size_t r = 0; r < members[k].size(); ++r)
      weights[k].push_back(1.0 / std::pow(static_cast<double>(r + 1), p.zipf_exponent));
  }

  out.log.items = ids;
  Rng seq_rng(p.seed, "synth.sequences");
  for (std::size_t u = 0; u < p.n_users; ++u) {
    UserHistory h{padded_id('u', u, p.n_users), {}};
    auto k = static_cast<std::uint32_t>(seq_rng.below(c));
    for (std::size_t t = 0; t < p.seq_len; ++t) {
      if (t > 0) {
        const bool shift = seq_rng.uniform() < p.shift_prob;
        const auto jump = static_cast<std::uint32_t>(seq_rng.below(c));
        k = shift ? static_cast<std::uint32_t>((k + 1) % c) : jump;
      }
      h.items.push_back(members[k][seq_rng.categorical(weights[k])]);
    }
    out.log.users.push_back(std::move(h));
  }

  out.text_cluster = std::move(cluster);
  out.vision_cluster = std::move(vcluster);
  out.cluster_map = std::move(perm);
  return out;
}

}  // namespace macrec
