#pragma once

// Contrastive objectives shared by the quantizer and the generative model.
// All denominators run over the whole batch, the anchor's own term included.

#include <cstdint>
#include <vector>

#include "macrec/autodiff.hpp"
#include "macrec/rng.hpp"

namespace macrec {

// For each anchor i, one in-batch j != i with labels[j] == labels[i], drawn
// uniformly; -1 when the anchor has no such partner.
inline std::vector<int> sample_positives(const std::vector<std::uint32_t>& labels, Rng& rng) {
  const std::size_t b = labels.size();
  std::vector<int> pos(b, -1);
  std::vector<int> cands;
  for (std::size_t i = 0; i < b; ++i) {
    cands.clear();
    for (std::size_t j = 0; j < b; ++j)
      if (j != i && labels[j] == labels[i]) cands.push_back(static_cast<int>(j));
    if (!cands.empty()) pos[i] = cands[rng.below(cands.size())];
  }
  return pos;
}

struct ContrastiveTerm {
  Var loss;
  std::size_t anchors = 0;  // anchors that had a positive
  std::size_t skipped = 0;  // anchors without one
};

// -mean_i log( exp(<r_i, r_pos(i)>/tau) / sum_j exp(<r_i, r_j>/tau) ) over
// the anchors with a positive. Rows of `reps` are the batch. Returns a zero
// constant when no anchor has a positive.
template <class Real>
ContrastiveTerm positive_pair_infonce(BasicTape<Real>& t, Var reps, const std::vector<int>& positives, double tau) {
  ContrastiveTerm out;
  std::vector<std::uint32_t> rows, cols;
  for (std::size_t i = 0; i < positives.size(); ++i) {
    if (positives[i] < 0) {
      ++out.skipped;
      continue;
    }
    rows.push_back(static_cast<std::uint32_t>(i));
    cols.push_back(static_cast<std::uint32_t>(positives[i]));
  }
  out.anchors = rows.size();
  if (rows.empty()) {
    out.loss = t.constant(BasicTensor<Real>::scalar(Real(0)));
    return out;
  }
  const Real inv_tau = static_cast<Real>(1.0 / tau);
  Var logp = t.log_softmax(t.scale(t.matmul_nt(reps, reps), inv_tau));
  out.loss = t.scale(t.sum(t.pick(logp, std::move(rows), std::move(cols))),
                     Real(-1) / static_cast<Real>(out.anchors));
  return out;
}

// Symmetric cross-view InfoNCE: row i of `a` is paired with row i of `b`.
//   L = -1/B sum_i log softmax_j(<a_i, b_j>/tau)[i]  +  (a <-> b)
// A batch of one yields exactly zero.
template <class Real>
Var symmetric_infonce(BasicTape<Real>& t, Var a, Var b, double tau) {
  const std::size_t n = t.value(a).rows();
  const Real inv_tau = static_cast<Real>(1.0 / tau);
  std::vector<std::uint32_t> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = static_cast<std::uint32_t>(i);
  Var ab = t.log_softmax(t.scale(t.matmul_nt(a, b), inv_tau));
  Var ba = t.log_softmax(t.scale(t.matmul_nt(b, a), inv_tau));
  Var sum = t.add(t.sum(t.pick(ab, diag, diag)), t.sum(t.pick(ba, diag, diag)));
  return t.scale(sum, Real(-1) / static_cast<Real>(n));
}

}  // namespace macrec
