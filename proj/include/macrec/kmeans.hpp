#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "macrec/data_io.hpp"
#include "macrec/error.hpp"
#include "macrec/rng.hpp"
#include "macrec/tensor.hpp"

namespace macrec {

struct KMeansResult {
  std::vector<std::uint32_t> labels;
  Tensor centroids;                     // K x d
  std::vector<double> inertia_history;  // after each assignment step
  std::size_t iterations = 0;
  std::size_t reseeded = 0;  // empty clusters re-seeded over the run

  double inertia() const { return inertia_history.empty() ? 0.0 : inertia_history.back(); }
};

namespace detail {

inline double sqdist(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

// Nearest centroid, ties to the smallest index.
inline std::uint32_t nearest(std::span<const float> x, const Tensor& centroids, double* dist = nullptr) {
  std::uint32_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centroids.rows(); ++k) {
    const double d = sqdist(x, centroids.row(k));
    if (d < bd) {
      bd = d;
      best = static_cast<std::uint32_t>(k);
    }
  }
  if (dist) *dist = bd;
  return best;
}

// Greedy k-means++: each new centre is the best of 2 + ln(k) D^2-sampled
// candidates by resulting potential.
inline Tensor kmeanspp_init(const Tensor& x, std::size_t k, Rng& rng) {
  const std::size_t n = x.rows(), d = x.cols();
  const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));
  Tensor c = Tensor::matrix(k, d);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::vector<bool> chosen(n, false);
  std::vector<double> cand_d2(n), best_d2(n);
  std::size_t pick = rng.below(n);
  for (std::size_t j = 0; j < k; ++j) {
    if (j == 0) {
      for (std::size_t i = 0; i < n; ++i) best_d2[i] = sqdist(x.row(i), x.row(pick));
    } else {
      double total = 0.0;
      for (double v : d2) total += v;
      std::vector<double> w = d2;
      if (total <= 0.0)  // only duplicates left: uniform over unchosen rows
        for (std::size_t i = 0; i < n; ++i) w[i] = chosen[i] ? 0.0 : 1.0;
      double best_pot = std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < trials; ++t) {
        const std::size_t cand = rng.categorical(w);
        double pot = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          cand_d2[i] = std::min(d2[i], sqdist(x.row(i), x.row(cand)));
          pot += cand_d2[i];
        }
        if (pot < best_pot) {
          best_pot = pot;
          pick = cand;
          best_d2.swap(cand_d2);
        }
      }
    }
    chosen[pick] = true;
    std::copy(x.row(pick).begin(), x.row(pick).end(), c.row(j).begin());
    d2 = best_d2;
  }
  return c;
}

inline KMeansResult lloyd(const Tensor& x, std::size_t k, std::size_t max_iters, Rng& rng) {
  const std::size_t n = x.rows(), d = x.cols();
  KMeansResult res;
  res.centroids = detail::kmeanspp_init(x, k, rng);
  res.labels.assign(n, UINT32_MAX);
  std::vector<double> dist(n);

  for (std::size_t it = 0; it < max_iters; ++it) {
    bool changed = false;
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto l = detail::nearest(x.row(i), res.centroids, &dist[i]);
      if (l != res.labels[i]) changed = true;
      res.labels[i] = l;
      inertia += dist[i];
    }
    res.inertia_history.push_back(inertia);
    res.iterations = it + 1;
    if (!changed) break;

    // Empty clusters.
    std::vector<std::size_t> counts(k, 0);
    for (auto l : res.labels) ++counts[l];
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = 0;
      double fd = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[res.labels[i]] <= 1) continue;
        if (dist[i] > fd) {
          fd = dist[i];
          far = i;
        }
      }
      if (fd < 0.0) break;
      --counts[res.labels[far]];
      res.labels[far] = static_cast<std::uint32_t>(c);
      counts[c] = 1;
      dist[far] = 0.0;
      ++res.reseeded;
    }

    std::vector<double> sums(k * d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto r = x.row(i);
      for (std::size_t j = 0; j < d; ++j) sums[res.labels[i] * d + j] += r[j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t j = 0; j < d; ++j)
        res.centroids(c, j) = static_cast<float>(sums[c * d + j] / static_cast<double>(counts[c]));
    }
  }
  return res;
}

}  // namespace detail

// Lloyd's algorithm from k-means++ seeding on squared Euclidean distance.
// Stops after max_iters assignment steps or when assignments stop changing.
// A cluster left empty by an assignment is re-seeded at the point farthest
// from its current centroid, which then moves into that cluster. With
// n_init > 1 the run with the lowest final inertia is kept.
inline KMeansResult kmeans(const Tensor& x, std::size_t k, std::size_t max_iters, std::uint64_t seed,
                           std::size_t n_init = 4) {
  const std::size_t n = x.rows();
  if (k == 0 || k > n)
    throw ConfigError("k-means needs 1 <= K <= N (K=" + std::to_string(k) + ", N=" + std::to_string(n) + ")");
  if (max_iters < 1) throw ConfigError("k-means needs max_iters >= 1");
  Rng rng(seed, "kmeans");
  KMeansResult best;
  for (std::size_t r = 0; r < std::max<std::size_t>(n_init, 1); ++r) {
    auto res = detail::lloyd(x, k, max_iters, rng);
    if (r == 0 || res.inertia() < best.inertia()) best = std::move(res);
  }
  return best;
}

struct PseudoLabels {
  Modality modality = Modality::kText;
  std::size_t k = 0;
  std::vector<std::uint32_t> label;
  Tensor centroids;
  double inertia = 0.0;
};

// Independent clusterings of both modalities. Tables must cover the same items
// in the same row order.
inline std::pair<PseudoLabels, PseudoLabels> gen_pseudo_labels(const EmbeddingTable& text,
                                                               const EmbeddingTable& vision, std::size_t k,
                                                               std::uint64_t seed, std::size_t max_iters = 100) {
  if (text.ids() != vision.ids()) throw DataError("pseudo-labels need both tables over the same item order");
  // Same seed stream for both so identical inputs give identical labelings.
  auto cluster = [&](const EmbeddingTable& t) {
    auto res = kmeans(t.matrix(), k, max_iters, derive_seed(seed, "pseudo_labels"));
    return PseudoLabels{t.modality(), k, std::move(res.labels), std::move(res.centroids), res.inertia()};
  };
  return {cluster(text), cluster(vision)};
}

inline void save_pseudo_labels(const std::string& path, const std::vector<std::string>& items,
                               const PseudoLabels& text, const PseudoLabels& vision) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  for (std::size_t i = 0; i < items.size(); ++i)
    os << nlohmann::json{{"item", items[i]}, {"text_label", text.label[i]}, {"vision_label", vision.label[i]}}.dump()
       << '\n';
}

// Reads the label cache in the row order of `items`.
inline std::pair<PseudoLabels, PseudoLabels> load_pseudo_labels(const std::string& path,
                                                                const std::vector<std::string>& items) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open '" + path + "'");
  std::unordered_map<std::string, std::pair<std::uint32_t, std::uint32_t>> by_id;
  std::string line;
  std::uint32_t kt = 0, kv = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    const auto t = j.at("text_label").get<std::uint32_t>();
    const auto v = j.at("vision_label").get<std::uint32_t>();
    kt = std::max(kt, t + 1);
    kv = std::max(kv, v + 1);
    by_id[j.at("item").get<std::string>()] = {t, v};
  }
  PseudoLabels text{Modality::kText, kt, {}, {}, 0.0}, vision{Modality::kVision, kv, {}, {}, 0.0};
  for (const auto& id : items) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("pseudo-label cache lacks item '" + id + "'");
    text.label.push_back(it->second.first);
    vision.label.push_back(it->second.second);
  }
  return {std::move(text), std::move(vision)};
}

}  // namespace macrec
