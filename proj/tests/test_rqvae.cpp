#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "macrec/rqvae.hpp"
#include "macrec/synth.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace macrec;
using namespace macrec::testing;

// ---- contrastive losses -------------------------------------------------------

class InfoNceBatch : public ::testing::TestWithParam<std::size_t> {};

TEST_P(InfoNceBatch, PositivePairMatchesBruteForce) {
  const std::size_t b = GetParam();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const DTensor r = drandom(b, 5, seed, 0.5);
    Rng rng(seed, "pos");
    const auto pos = sample_positives(random_labels(b, 2, seed), rng);
    DTape t;
    auto term = positive_pair_infonce(t, t.leaf(r), pos, 0.1);
    EXPECT_NEAR(t.value(term.loss).item(), brute_positive_infonce(r, pos, 0.1), 1e-6);
  }
}

TEST_P(InfoNceBatch, SymmetricMatchesBruteForce) {
  const std::size_t b = GetParam();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const DTensor a = drandom(b, 6, seed, 0.5), c = drandom(b, 6, seed + 100, 0.5);
    DTape t;
    EXPECT_NEAR(t.value(symmetric_infonce(t, t.leaf(a), t.leaf(c), 0.1)).item(), brute_symmetric_infonce(a, c, 0.1),
                1e-6);
  }
}

INSTANTIATE_TEST_SUITE_P(BatchSizes, InfoNceBatch, ::testing::Values(2, 4, 16));

TEST(InfoNce, GradientsMatchFiniteDifferences) {
  const std::vector<int> pos{2, -1, 0, 1};
  auto f = [&](DTape& t, const std::vector<Var>& v) {
    return t.add(positive_pair_infonce(t, v[0], pos, 0.5).loss, symmetric_infonce(t, v[0], v[1], 0.5));
  };
  EXPECT_LT(macrec::testing::max_gradcheck_error(f, {drandom(4, 3, 7), drandom(4, 3, 8)}, 1e-5), 1e-4);
}

TEST(InfoNce, BatchOfOneSymmetricIsZero) {
  DTape t;
  EXPECT_DOUBLE_EQ(t.value(symmetric_infonce(t, t.leaf(drandom(1, 4, 1)), t.leaf(drandom(1, 4, 2)), 0.1)).item(), 0.0);
}

TEST(InfoNce, NoAnchorsGivesZeroAndCountsSkips) {
  DTape t;
  auto term = positive_pair_infonce(t, t.leaf(drandom(3, 2, 1)), {-1, -1, -1}, 0.1);
  EXPECT_EQ(term.anchors, 0u);
  EXPECT_EQ(term.skipped, 3u);
  EXPECT_EQ(t.value(term.loss).item(), 0.0);
}

TEST(SamplePositives, SameLabelOtherRowOrNone) {
  const auto labels = random_labels(64, 20, 3);
  Rng rng(3, "pos");
  const auto pos = sample_positives(labels, rng);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t partners = 0;
    for (std::size_t j = 0; j < labels.size(); ++j) partners += (j != i && labels[j] == labels[i]);
    if (partners == 0) {
      EXPECT_EQ(pos[i], -1);
    } else {
      ASSERT_GE(pos[i], 0);
      EXPECT_NE(static_cast<std::size_t>(pos[i]), i);
      EXPECT_EQ(labels[static_cast<std::size_t>(pos[i])], labels[i]);
    }
  }
}

TEST(SamplePositives, UniformOverCandidates) {
  const std::vector<std::uint32_t> labels{0, 0, 0, 0, 1};
  Rng rng(11, "pos");
  std::vector<int> counts(5, 0);
  const int draws = 30000;
  for (int k = 0; k < draws; ++k) ++counts[sample_positives(labels, rng)[0]];
  EXPECT_EQ(counts[0], 0);
  EXPECT_EQ(counts[4], 0);
  for (int j = 1; j <= 3; ++j) EXPECT_NEAR(counts[j] / double(draws), 1.0 / 3.0, 0.015);
}

// ---- residual quantization ------------------------------------------------------

TEST(ResidualQuantize, RecoversExactlyRepresentableVectors) {
  // Level scales differ by 100x so the greedy choice is forced.
  Rng rng(5, "books");
  std::vector<Tensor> books;
  double scale = 100.0;
  for (int l = 0; l < 3; ++l, scale /= 100.0) {
    Tensor b = Tensor::matrix(8, 4);
    for (auto& v : b.data) v = static_cast<float>(rng.normal(0.0, scale));
    books.push_back(b);
  }
  std::vector<const Tensor*> ptrs{&books[0], &books[1], &books[2]};
  for (Code a = 0; a < 8; ++a)
    for (Code c = 0; c < 8; c += 3) {
      const Code b = (a * 5 + c) % 8;
      std::vector<float> z(4);
      for (std::size_t j = 0; j < 4; ++j) z[j] = books[0](a, j) + books[1](b, j) + books[2](c, j);
      auto tr = residual_quantize(z, ptrs);
      EXPECT_EQ(tr.codes, (std::vector<Code>{a, b, c}));
      for (float v : tr.residual.back()) EXPECT_NEAR(v, 0.0f, 1e-3f);
      for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(tr.quantized[j], z[j], 1e-3f);
    }
}

TEST(ResidualQuantize, ResidualIdentityAndTieBreak) {
  Tensor book = Tensor::matrix(3, 2);
  book(0, 0) = 1.0f;   // (1, 0)
  book(1, 0) = -1.0f;  // (-1, 0)
  book(2, 1) = 5.0f;   // (0, 5)
  const std::vector<float> z{0.0f, 0.0f};  // equidistant from codewords 0 and 1
  auto tr = residual_quantize(z, {&book, &book});
  EXPECT_EQ(tr.codes[0], 0u);
  for (std::size_t l = 0; l <= 2; ++l) {
    std::vector<float> expect = z;
    for (std::size_t k = 0; k < l; ++k)
      for (std::size_t j = 0; j < 2; ++j) expect[j] -= book(tr.codes[k], j);
    EXPECT_EQ(tr.residual[l], expect);
  }
}

TEST(ResidualQuantize, WidthMismatchNamesOperation) {
  Tensor book = Tensor::matrix(2, 3);
  try {
    residual_quantize(std::vector<float>{1.0f, 2.0f}, {&book});
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.op(), "residual_quantize");
  }
}

// ---- gradient routing ----------------------------------------------------------

struct RoutingFixture {
  DTensor z = drandom(5, 3, 21);
  std::vector<DTensor> books{drandom(4, 3, 22), drandom(4, 3, 23, 0.3)};
  double alpha = 0.25;
};

// Hand-derived gradients of the codebook/commitment loss:
//   d/d e_{l,k} = sum_{b: c_b = k} 2 (e - r_l)_b / B
//   d/d z       = sum_l 2 alpha (r_l - e_l) / B
TEST(QuantizerRouting, CodebookAndCommitmentGradients) {
  RoutingFixture f;
  DTape t;
  Var z = t.leaf(f.z);
  std::vector<Var> bv{t.leaf(f.books[0]), t.leaf(f.books[1])};
  auto qb = quantize_on_tape(t, z, bv, f.alpha);
  t.backward(qb.rq_loss);

  const double bsz = 5;
  DTensor gz(f.z.shape);
  std::vector<DTensor> gb{DTensor(f.books[0].shape), DTensor(f.books[1].shape)};
  double loss = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    std::vector<double> r(f.z.row(i).begin(), f.z.row(i).end());
    for (std::size_t l = 0; l < 2; ++l) {
      const Code c = qb.codes[l][i];
      for (std::size_t j = 0; j < 3; ++j) {
        const double diff = r[j] - f.books[l](c, j);
        loss += (1 + f.alpha) * diff * diff / bsz;
        gb[l](c, j) += -2 * diff / bsz;
        gz(i, j) += 2 * f.alpha * diff / bsz;
      }
      for (std::size_t j = 0; j < 3; ++j) r[j] -= f.books[l](c, j);
    }
  }
  EXPECT_NEAR(t.value(qb.rq_loss).item(), loss, 1e-12);
  for (std::size_t k = 0; k < gz.size(); ++k) EXPECT_NEAR(t.grad(z).data[k], gz.data[k], 1e-12);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t k = 0; k < gb[l].size(); ++k) EXPECT_NEAR(t.grad(bv[l]).data[k], gb[l].data[k], 1e-12);
}

TEST(QuantizerRouting, DecoderInputIsStraightThrough) {
  RoutingFixture f;
  DTape t;
  Var z = t.leaf(f.z);
  std::vector<Var> bv{t.leaf(f.books[0]), t.leaf(f.books[1])};
  auto qb = quantize_on_tape(t, z, bv, f.alpha);
  const DTensor w = drandom(5, 3, 99);
  t.backward(t.sum(t.mul(qb.decoder_input, t.constant(w))));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      const double expect = f.books[0](qb.codes[0][i], j) + f.books[1](qb.codes[1][i], j);
      EXPECT_NEAR(t.value(qb.decoder_input)(i, j), expect, 1e-12);
    }
  EXPECT_EQ(t.grad(z).data, w.data);
  for (auto b : bv)
    for (double g : t.grad(b).data) EXPECT_EQ(g, 0.0);
}

TEST(QuantizerRouting, AlignedInputReachesCodebooksAndEncoder) {
  RoutingFixture f;
  DTape t;
  Var z = t.leaf(f.z);
  std::vector<Var> bv{t.leaf(f.books[0]), t.leaf(f.books[1])};
  auto qb = quantize_on_tape(t, z, bv, f.alpha);
  const DTensor w = drandom(5, 3, 98);
  t.backward(t.sum(t.mul(qb.aligned, t.constant(w))));
  EXPECT_EQ(t.grad(z).data, w.data);
  for (std::size_t l = 0; l < 2; ++l) {
    DTensor expect(f.books[l].shape);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 3; ++j) expect(qb.codes[l][i], j) += w(i, j);
    for (std::size_t k = 0; k < expect.size(); ++k) EXPECT_NEAR(t.grad(bv[l]).data[k], expect.data[k], 1e-12);
  }
}

// Contrastive gradients on residuals reach the encoder output and leave the
// codebooks untouched; matched against finite differences on z (codes are
// locally constant and r_l - z does not depend on z).
TEST(QuantizerRouting, ContrastiveOnResidualsFiniteDifference) {
  RoutingFixture f;
  const std::vector<int> pos{1, 0, 3, 2, -1};
  auto loss = [&](DTape& t, const std::vector<Var>& v) {
    std::vector<Var> bv{t.constant(f.books[0]), t.constant(f.books[1])};
    auto qb = quantize_on_tape(t, v[0], bv, f.alpha);
    return t.add(positive_pair_infonce(t, qb.residuals[1], pos, 0.5).loss,
                 positive_pair_infonce(t, qb.residuals[0], pos, 0.5).loss);
  };
  EXPECT_LT(macrec::testing::max_gradcheck_error(loss, {f.z}, 1e-6), 1e-4);

  DTape t;
  Var z = t.leaf(f.z);
  std::vector<Var> bv{t.leaf(f.books[0]), t.leaf(f.books[1])};
  auto qb = quantize_on_tape(t, z, bv, f.alpha);
  t.backward(positive_pair_infonce(t, qb.residuals[1], pos, 0.5).loss);
  for (auto b : bv)
    for (double g : t.grad(b).data) EXPECT_EQ(g, 0.0);
}

// ---- full objective ------------------------------------------------------------

// Independent evaluation of the whole objective with identity encoders and
// decoders scaled by 2 (x -> z = x, zhat -> 2 zhat).
TEST(RqvaeObjective, MatchesScriptedOracle) {
  IdHyper h;
  h.levels = 2;
  h.codebook_size = 3;
  h.tau = 0.5;
  h.alpha = 0.25;
  h.lambda_con = {0.0, 0.3};
  h.lambda_align = 0.2;
  const std::size_t b = 4, d = 2;
  const DTensor xt = drandom(b, d, 31), xv = drandom(b, d, 32);
  const std::vector<DTensor> bt{drandom(3, d, 33), drandom(3, d, 34, 0.3)}, bvv{drandom(3, d, 35), drandom(3, d, 36, 0.3)};
  const std::vector<int> tpos{2, 3, 0, -1}, vpos{1, 0, -1, 2};

  DTape t;
  Var vxt = t.constant(xt), vxv = t.constant(xv);
  std::vector<Var> vbt{t.leaf(bt[0]), t.leaf(bt[1])}, vbv{t.leaf(bvv[0]), t.leaf(bvv[1])};
  auto dec = [&](Var z) { return t.scale(z, 2.0); };
  auto got = rqvae_objective<double>(t, vxt, vxv, vxt, vxv, dec, dec, vbt, vbv, tpos, vpos, h);

  struct Side {
    double recon = 0, rq = 0;
    std::vector<DTensor> residuals;
    DTensor zhat;
  };
  auto run = [&](const DTensor& x, const std::vector<DTensor>& books) {
    Side s;
    DTensor r = x;
    s.zhat = DTensor(x.shape);
    for (std::size_t l = 0; l < 2; ++l) {
      s.residuals.push_back(r);
      for (std::size_t i = 0; i < b; ++i) {
        std::size_t best = 0;
        double bd = 1e300;
        for (std::size_t k = 0; k < 3; ++k) {
          double dd = 0;
          for (std::size_t j = 0; j < d; ++j) dd += (r(i, j) - books[l](k, j)) * (r(i, j) - books[l](k, j));
          if (dd < bd) bd = dd, best = k;
        }
        s.rq += (1 + h.alpha) * bd / b;
        for (std::size_t j = 0; j < d; ++j) {
          r(i, j) -= books[l](best, j);
          s.zhat(i, j) += books[l](best, j);
        }
      }
    }
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < d; ++j) s.recon += std::pow(x(i, j) - 2 * s.zhat(i, j), 2) / b;
    return s;
  };
  const Side st = run(xt, bt), sv = run(xv, bvv);
  std::vector<double> con;
  for (std::size_t l = 0; l < 2; ++l)
    con.push_back(brute_positive_infonce(st.residuals[l], tpos, h.tau) +
                  brute_positive_infonce(sv.residuals[l], vpos, h.tau));
  const double align = brute_symmetric_infonce(st.zhat, sv.zhat, h.tau);
  const double total = st.recon + sv.recon + st.rq + sv.rq + 0.3 * con[1] + 0.2 * align;

  EXPECT_NEAR(got.parts.recon_text, st.recon, 1e-10);
  EXPECT_NEAR(got.parts.recon_vision, sv.recon, 1e-10);
  EXPECT_NEAR(got.parts.rq_text, st.rq, 1e-10);
  EXPECT_NEAR(got.parts.rq_vision, sv.rq, 1e-10);
  ASSERT_EQ(got.parts.con.size(), 2u);
  EXPECT_NEAR(got.parts.con[0], con[0], 1e-10);
  EXPECT_NEAR(got.parts.con[1], con[1], 1e-10);
  EXPECT_NEAR(got.parts.align, align, 1e-10);
  EXPECT_NEAR(got.parts.total, total, 1e-10);
  EXPECT_NEAR(t.value(got.total).item(), total, 1e-10);
  EXPECT_EQ(got.parts.con_anchors, 2u * 6u);
  EXPECT_EQ(got.parts.con_skipped, 2u * 2u);
}

TEST(RqvaeObjective, ZeroWeightsLeaveOnlyReconstructionAndQuantization) {
  IdHyper h;
  h.levels = 1;
  h.codebook_size = 2;
  h.lambda_con = {0.0};
  h.lambda_align = 0.0;
  const DTensor x = drandom(3, 2, 41);
  DTape t;
  Var vx = t.constant(x);
  std::vector<Var> b1{t.leaf(drandom(2, 2, 42))}, b2{t.leaf(drandom(2, 2, 43))};
  auto id = [](Var z) { return z; };
  auto got = rqvae_objective<double>(t, vx, vx, vx, vx, id, id, b1, b2, {1, 0, -1}, {1, 0, -1}, h);
  EXPECT_NEAR(got.parts.total, got.parts.recon_text + got.parts.recon_vision + got.parts.rq_text + got.parts.rq_vision,
              1e-12);
  EXPECT_GT(got.parts.align, 0.0);
}

// ---- collision resolution ------------------------------------------------------

namespace {

SemanticIdTable table(std::size_t levels, std::size_t m, std::vector<Code> codes) {
  SemanticIdTable t;
  t.levels = levels;
  t.codebook_size = m;
  t.codes = std::move(codes);
  return t;
}

Tensor column(std::vector<float> v) {
  const std::size_t n = v.size();
  return Tensor({n, 1}, std::move(v));
}

}  // namespace

TEST(ResolveCollisions, CloserItemKeepsIdOtherTakesNearestFreeCodeword) {
  // Both items land on (0, 0). Item 1 is closer to its quantized vector.
  const auto raw = table(2, 3, {0, 0, 0, 0});
  const Tensor first = column({0.0f, 5.0f, 9.0f});
  const Tensor last = column({0.0f, 10.0f, 2.0f});
  const std::vector<Tensor> inputs{column({0.5f, 0.1f}), column({0.5f, 0.1f})};
  auto out = resolve_collisions(raw, inputs, {0.5, 0.1}, {&first, &last});
  EXPECT_EQ(std::vector<Code>(out.id(1).begin(), out.id(1).end()), (std::vector<Code>{0, 0}));
  EXPECT_EQ(std::vector<Code>(out.id(0).begin(), out.id(0).end()), (std::vector<Code>{0, 2}));
}

TEST(ResolveCollisions, EqualErrorsFavourLowerIndex) {
  const auto raw = table(1, 4, {3, 3});
  const Tensor book = column({0.0f, 1.0f, 2.0f, 3.0f});
  auto out = resolve_collisions(raw, {column({3.0f, 3.0f})}, {0.2, 0.2}, {&book});
  EXPECT_EQ(out.id(0)[0], 3u);
  EXPECT_EQ(out.id(1)[0], 2u);
}

TEST(ResolveCollisions, FullPrefixFallsBackToDeeperLevels) {
  // Prefix <a_1> holds both last-level codewords; item 1 must move its
  // second-to-last code, choosing the nearest free pair by ||z - zhat||.
  const auto raw = table(2, 2, {1, 0, 1, 0, 1, 1});
  const Tensor first = column({0.0f, 10.0f}), last = column({0.0f, 1.0f});
  const std::vector<Tensor> inputs{column({10.0f, 10.2f, 11.0f}), column({0.0f, 0.2f, 1.0f})};
  auto out = resolve_collisions(raw, inputs, {0.0, 0.1, 0.2}, {&first, &last});
  EXPECT_EQ(std::vector<Code>(out.id(0).begin(), out.id(0).end()), (std::vector<Code>{1, 0}));
  EXPECT_EQ(std::vector<Code>(out.id(2).begin(), out.id(2).end()), (std::vector<Code>{1, 1}));
  EXPECT_EQ(std::vector<Code>(out.id(1).begin(), out.id(1).end()), (std::vector<Code>{0, 1}));
}

TEST(ResolveCollisions, UniqueAndPrefixPreservingOnRandomTables) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed, "raw");
    const std::size_t n = 30, levels = 3, m = 16;
    std::vector<Code> codes;
    for (std::size_t i = 0; i < n * levels; ++i)
      codes.push_back(static_cast<Code>(rng.below(i % levels == levels - 1 ? 2 : 3)));  // heavy collisions
    const auto raw = table(levels, m, codes);
    std::vector<Tensor> inputs(levels, Tensor::matrix(n, 2)), books(levels, Tensor::matrix(m, 2));
    for (auto* set : {&inputs, &books})
      for (auto& t : *set)
        for (auto& v : t.data) v = static_cast<float>(rng.normal());
    std::vector<double> err(n);
    for (auto& e : err) e = rng.uniform();
    auto out = resolve_collisions(raw, inputs, err, {&books[0], &books[1], &books[2]});
    std::set<std::vector<Code>> seen;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<Code> id(out.id(i).begin(), out.id(i).end());
      EXPECT_TRUE(seen.insert(id).second);
      // No prefix holds more than M items, so only the last level moves.
      for (std::size_t l = 0; l + 1 < levels; ++l) EXPECT_EQ(id[l], raw.id(i)[l]);
    }
  }
}

TEST(ResolveCollisions, UncollidedIdsUnchanged) {
  const auto raw = table(2, 3, {0, 1, 2, 2, 1, 0});
  const Tensor book = Tensor::matrix(3, 1);
  const std::vector<Tensor> inputs(2, Tensor::matrix(3, 1));
  auto out = resolve_collisions(raw, inputs, {0, 0, 0}, {&book, &book});
  EXPECT_EQ(out.codes, raw.codes);
}

TEST(ResolveCollisions, TooSmallIdSpace) {
  const Tensor book = Tensor::matrix(2, 1);
  const std::vector<Tensor> inputs(2, Tensor::matrix(5, 1));
  try {
    resolve_collisions(table(2, 2, std::vector<Code>(10, 0)), inputs, std::vector<double>(5, 0.0), {&book, &book});
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("ID space too small"), std::string::npos);
  }
}

// ---- codebook init and training ------------------------------------------------

TEST(InitCodebooks, FirstLevelIsKMeansOfLatents) {
  Tensor z = Tensor::matrix(40, 3);
  Rng rng(2, "z");
  for (auto& v : z.data) v = static_cast<float>(rng.normal());
  auto books = init_codebooks(z, 2, 4, 9);
  ASSERT_EQ(books.size(), 2u);
  auto km = kmeans(z, 4, 50, derive_seed(9, "codebook.0"));
  EXPECT_EQ(books[0].data, km.centroids.data);
  // Residuals after level 0 have per-cluster mean zero, so level 1 is centred.
  double mean = 0;
  for (float v : books[1].data) mean += v;
  EXPECT_LT(std::abs(mean / books[1].size()), 0.5);
}

TEST(InitCodebooks, TooFewDistinctLatents) {
  Tensor z = Tensor::matrix(10, 2, 1.0f);
  z(0, 0) = 2.0f;
  EXPECT_THROW(init_codebooks(z, 1, 3, 1), DataError);
}

TEST(IdHyper, ListsEveryProblem) {
  IdHyper h;
  h.tau = 0;
  h.alpha = -1;
  h.lambda_con = {0.1};
  h.batch_size = 10;
  const auto p = h.problems(5);
  EXPECT_EQ(p.size(), 4u);
}

namespace {

struct SmallWorld {
  SynthData data;
  PseudoLabels lt, lv;
  IdHyper h;

  SmallWorld() {
    SynthParams sp;
    sp.n_items = 120;
    sp.n_clusters = 8;
    sp.d_text = 12;
    sp.d_vision = 10;
    sp.n_users = 10;
    sp.seed = 4;
    data = synth_dual_modal(sp);
    std::tie(lt, lv) = gen_pseudo_labels(data.text, data.vision, 8, 4);
    h.levels = 3;
    h.codebook_size = 16;
    h.latent_dim = 6;
    h.hidden = {16};
    h.lambda_con = {0.0, 0.1, 0.1};
    h.batch_size = 40;
    h.epochs = 12;
    h.lr = 3e-3;
  }
};

}  // namespace

TEST(TrainQuantizer, LossDecreasesAndReportIsComplete) {
  SmallWorld w;
  Quantizer q(12, 10, w.h, 1);
  auto rep = train_quantizer(q, w.data.text, w.data.vision, w.lt, w.lv, 1);
  ASSERT_EQ(rep.epochs.size(), 12u);
  EXPECT_LT(rep.epochs.back().mean.total, rep.epochs.front().mean.total);
  for (const auto& e : rep.epochs) {
    EXPECT_EQ(e.usage_text.size(), 3u);
    EXPECT_EQ(e.mean.con.size(), 3u);
    EXPECT_GE(e.collision_text, 0.0);
    EXPECT_LE(e.collision_text, 100.0);
  }
  auto ids = assign_semantic_ids(q, w.data.text, w.data.vision);
  for (const auto* t : {&ids.final_ids.text, &ids.final_ids.vision}) {
    std::set<std::uint64_t> keys;
    for (std::size_t i = 0; i < t->size(); ++i) keys.insert(t->key(i));
    EXPECT_EQ(keys.size(), 120u);
  }
}

TEST(TrainQuantizer, DeterministicForFixedSeed) {
  SmallWorld w;
  w.h.epochs = 3;
  Quantizer a(12, 10, w.h, 1), b(12, 10, w.h, 1);
  train_quantizer(a, w.data.text, w.data.vision, w.lt, w.lv, 7);
  train_quantizer(b, w.data.text, w.data.vision, w.lt, w.lv, 7);
  EXPECT_EQ(a.params().snapshot()[0].data, b.params().snapshot()[0].data);
  EXPECT_EQ(assign_semantic_ids(a, w.data.text, w.data.vision).final_ids.text.codes,
            assign_semantic_ids(b, w.data.text, w.data.vision).final_ids.text.codes);
}

TEST(TrainQuantizer, NonFiniteLossAbortsAndRestores) {
  SmallWorld w;
  w.h.epochs = 2;
  Quantizer q(12, 10, w.h, 1);
  q.params().find("text.decoder.1.bias")->value.data[0] = std::numeric_limits<float>::quiet_NaN();
  const auto before = q.params().snapshot();
  q.mark_codebooks_initialized();
  try {
    train_quantizer(q, w.data.text, w.data.vision, w.lt, w.lv, 1);
    FAIL();
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.exit_code(), ExitCode::kNumeric);
    EXPECT_FALSE(std::isfinite(e.breakdown().recon_text));
  }
  const auto after = q.params().snapshot();
  for (std::size_t i = 0; i < before.size(); ++i)
    for (std::size_t k = 0; k < before[i].size(); ++k)
      if (std::isfinite(before[i].data[k])) EXPECT_EQ(before[i].data[k], after[i].data[k]);
}

TEST(TrainQuantizer, RejectsInvalidHyperparameters) {
  SmallWorld w;
  w.h.batch_size = 1000;
  Quantizer q(12, 10, w.h, 1);
  EXPECT_THROW(train_quantizer(q, w.data.text, w.data.vision, w.lt, w.lv, 1), ConfigError);
}
