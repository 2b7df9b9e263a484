#include <gtest/gtest.h>

#include <algorithm>
#include <limits>

#include "macrec/kmeans.hpp"
#include "macrec/synth.hpp"
#include "support/stats.hpp"

using namespace macrec;

namespace {

Tensor random_points(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed, "points");
  Tensor t = Tensor::matrix(n, d);
  for (auto& v : t.data) v = static_cast<float>(rng.normal());
  return t;
}

// Exhaustive optimal 2-partition by within-cluster sum of squares.
std::vector<std::uint32_t> best_two_partition(const Tensor& x) {
  const std::size_t n = x.rows(), d = x.cols();
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::uint32_t> best_labels;
  for (std::uint32_t mask = 1; mask + 1 < (1u << n); ++mask) {
    if (mask & 1u) continue;  // fix point 0 in cluster 0 (symmetry)
    double cost = 0;
    for (std::uint32_t c = 0; c < 2; ++c) {
      std::vector<double> mean(d, 0.0);
      double cnt = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (((mask >> i) & 1u) == c) {
          cnt += 1;
          for (std::size_t j = 0; j < d; ++j) mean[j] += x(i, j);
        }
      for (auto& m : mean) m /= cnt;
      for (std::size_t i = 0; i < n; ++i)
        if (((mask >> i) & 1u) == c)
          for (std::size_t j = 0; j < d; ++j) cost += (x(i, j) - mean[j]) * (x(i, j) - mean[j]);
    }
    if (cost < best) {
      best = cost;
      best_labels.assign(n, 0);
      for (std::size_t i = 0; i < n; ++i) best_labels[i] = (mask >> i) & 1u;
    }
  }
  return best_labels;
}

}  // namespace

TEST(KMeans, KEqualsNGivesZeroInertia) {
  Tensor x = random_points(7, 3, 1);
  auto r = kmeans(x, 7, 10, 5);
  EXPECT_EQ(r.inertia(), 0.0);
  auto sorted = r.labels;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(std::unique(sorted.begin(), sorted.end()) - sorted.begin(), 7);
}

TEST(KMeans, TwoBlobsMatchBruteForcePartition) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed, "blobs");
    Tensor x = Tensor::matrix(12, 2);
    for (std::size_t i = 0; i < 12; ++i) {
      const float off = i < 5 ? -6.0f : 6.0f;
      x(i, 0) = off + static_cast<float>(rng.normal(0, 0.5));
      x(i, 1) = static_cast<float>(rng.normal(0, 0.5));
    }
    auto r = kmeans(x, 2, 50, seed);
    auto oracle = best_two_partition(x);
    EXPECT_NEAR(macrec::testing::adjusted_rand_index(r.labels, oracle), 1.0, 1e-12) << seed;
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(r.labels[i] == r.labels[0], i < 5) << seed;
  }
}

TEST(KMeans, InertiaNonIncreasing) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Tensor x = random_points(300, 4, seed);
    auto r = kmeans(x, 12, 100, seed);
    for (std::size_t i = 1; i < r.inertia_history.size(); ++i)
      EXPECT_LE(r.inertia_history[i], r.inertia_history[i - 1]) << "seed " << seed << " iter " << i;
    for (auto l : r.labels) EXPECT_LT(l, 12u);
    EXPECT_EQ(r.centroids.rows(), 12u);
  }
}

TEST(KMeans, Deterministic) {
  Tensor x = random_points(200, 3, 9);
  EXPECT_EQ(kmeans(x, 5, 50, 3).labels, kmeans(x, 5, 50, 3).labels);
}

TEST(KMeans, EmptyClusterReseededKeepsKCentroids) {
  // Many duplicates and one far point: k-means++ falls back to uniform picks
  // of duplicates, leaving clusters empty after the first assignment.
  Tensor x = Tensor::matrix(10, 1);
  for (std::size_t i = 0; i < 9; ++i) x(i, 0) = 0.0f;
  x(9, 0) = 10.0f;
  auto r = kmeans(x, 3, 20, 1);
  EXPECT_EQ(r.centroids.rows(), 3u);
  for (auto l : r.labels) EXPECT_LT(l, 3u);
}

TEST(KMeans, RejectsBadK) {
  Tensor x = random_points(4, 2, 1);
  EXPECT_THROW(kmeans(x, 5, 10, 1), ConfigError);
  EXPECT_THROW(kmeans(x, 0, 10, 1), ConfigError);
  EXPECT_THROW(kmeans(x, 2, 0, 1), ConfigError);
}

TEST(PseudoLabels, IdenticalTablesGiveIdenticalLabels) {
  auto d = synth_dual_modal({.n_items = 200, .n_clusters = 8, .d_text = 6, .d_vision = 6, .n_users = 1, .seed = 1});
  EmbeddingTable copy(Modality::kVision, d.text.ids(), d.text.matrix());
  auto [t, v] = gen_pseudo_labels(d.text, copy, 8, 77);
  EXPECT_EQ(t.label, v.label);
}

TEST(PseudoLabels, FullCorrelationGivesAgreeingClusterings) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto d = synth_dual_modal({.n_items = 1000, .n_clusters = 16, .d_text = 16, .d_vision = 12, .cross_modal_corr = 1.0,
                               .n_users = 1, .seed = seed});
    auto [t, v] = gen_pseudo_labels(d.text, d.vision, 16, seed);
    EXPECT_GT(macrec::testing::adjusted_rand_index(t.label, v.label), 0.9) << seed;
  }
}
