#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "macrec/diagnostics.hpp"
#include "macrec/rng.hpp"

using namespace macrec;

namespace {

SemanticIdTable make_table(std::size_t levels, std::size_t m, std::vector<Code> codes) {
  SemanticIdTable t;
  t.levels = levels;
  t.codebook_size = m;
  t.codes = std::move(codes);
  return t;
}

SemanticIdTable random_table(std::size_t n, std::size_t levels, std::size_t m, std::uint64_t seed) {
  Rng rng(seed, "ids");
  std::vector<Code> codes(n * levels);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    // Skewed draws so the histogram is not flat.
    const double u = rng.uniform();
    codes[i] = static_cast<Code>(std::min<double>(m - 1, std::floor(u * u * m)));
  }
  return make_table(levels, m, codes);
}

}  // namespace

TEST(CollisionRate, DistinctIdsGiveZero) {
  EXPECT_EQ(collision_rate(make_table(2, 4, {0, 1, 1, 0, 2, 3, 3, 3})), 0.0);
}

TEST(CollisionRate, TwoOfFourSharingGiveTwentyFive) {
  EXPECT_DOUBLE_EQ(collision_rate(make_table(2, 4, {0, 1, 0, 1, 2, 2, 3, 3})), 25.0);
}

TEST(CollisionRate, DefinedOnFullTuple) {
  // Same first level, different second: no collision.
  EXPECT_EQ(collision_rate(make_table(2, 4, {1, 0, 1, 1, 1, 2})), 0.0);
}

TEST(CodeHistogram, UniformAssignmentGivesFullGroups) {
  std::vector<Code> codes(64);
  for (Code i = 0; i < 64; ++i) codes[i] = i;
  const auto h = code_histogram(make_table(1, 64, codes), 0);
  for (auto c : h.counts) EXPECT_EQ(c, 1u);
  EXPECT_EQ(h.group_sums, (std::vector<std::size_t>{16, 16, 16, 16}));
}

TEST(CodeHistogram, SingleCodewordGivesOneNonzeroBucket) {
  const auto h = code_histogram(make_table(1, 32, std::vector<Code>(10, 7)), 0);
  EXPECT_EQ(h.counts[7], 10u);
  EXPECT_EQ(h.group_sums, (std::vector<std::size_t>{10, 0}));
}

TEST(CodeHistogram, MatchesDirectRecount) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto t = random_table(500, 3, 40, seed);
    for (std::size_t l = 0; l < 3; ++l) {
      const auto h = code_histogram(t, l);
      std::map<Code, std::size_t> recount;
      for (std::size_t i = 0; i < 500; ++i) ++recount[t.codes[i * 3 + l]];
      std::vector<std::size_t> sorted;
      for (Code k = 0; k < 40; ++k) sorted.push_back(recount.count(k) ? recount[k] : 0);
      std::sort(sorted.rbegin(), sorted.rend());
      std::vector<std::size_t> groups{0, 0, 0};
      for (std::size_t k = 0; k < 40; ++k) groups[k / 16] += sorted[k];
      EXPECT_EQ(h.sorted, sorted);
      EXPECT_EQ(h.group_sums, groups);
      std::size_t total = 0;
      for (auto g : h.group_sums) total += g;
      EXPECT_EQ(total, 500u);
    }
  }
}

TEST(CodeHistogram, LevelOutOfRange) {
  EXPECT_THROW(code_histogram(make_table(2, 4, {0, 0}), 2), ConfigError);
}

TEST(Perplexity, UniformDegenerateAndMixed) {
  std::vector<Code> uni(32 * 3);
  for (std::size_t i = 0; i < uni.size(); ++i) uni[i] = static_cast<Code>(i % 32);
  EXPECT_NEAR(codebook_perplexity(make_table(1, 32, uni), 0), 32.0, 1e-9);
  EXPECT_NEAR(codebook_perplexity(make_table(1, 32, std::vector<Code>(9, 4)), 0), 1.0, 1e-12);
  EXPECT_NEAR(codebook_perplexity(make_table(1, 4, {0, 0, 0, 1}), 0), 1.7548, 1e-4);
}

TEST(Perplexity, WithinRange) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto t = random_table(300, 2, 24, seed);
    for (std::size_t l = 0; l < 2; ++l) {
      const double p = codebook_perplexity(t, l);
      EXPECT_GE(p, 1.0);
      EXPECT_LE(p, 24.0 + 1e-9);
    }
  }
}

TEST(DiagReport, JsonAndCsvShape) {
  auto t = make_table(2, 4, {0, 1, 0, 1, 2, 2, 3, 3});
  auto v = t;
  v.modality = Modality::kVision;
  const auto entries = diagnose({&t, &v});
  ASSERT_EQ(entries.size(), 4u);
  const auto j = diag_to_json(entries);
  EXPECT_EQ(j[0]["modality"], "text");
  EXPECT_EQ(j[3]["modality"], "vision");
  EXPECT_EQ(j[1]["level"], 1);
  EXPECT_DOUBLE_EQ(j[0]["collision_rate"].get<double>(), 25.0);
  EXPECT_TRUE(j[0].contains("perplexity"));
  EXPECT_TRUE(j[0].contains("group_sums"));

  const std::string path = ::testing::TempDir() + "diag.csv";
  write_diag_csv(path, entries);
  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header, "modality,level,collision_rate,perplexity,group,group_sum");
  std::size_t rows = 0;
  for (std::string line; std::getline(is, line);) ++rows;
  EXPECT_EQ(rows, 4u);
}
