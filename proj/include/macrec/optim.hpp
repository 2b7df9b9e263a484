#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "macrec/autodiff.hpp"
#include "macrec/error.hpp"

namespace macrec {

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// AdamW with decoupled weight decay:
//   w <- w - lr*wd*w
//   w <- w - lr * m_hat / (sqrt(v_hat) + eps)
template <class Real>
class BasicAdamW {
 public:
  BasicAdamW(BasicParamStore<Real>& params, AdamWConfig cfg) : params_(&params), cfg_(cfg) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_.emplace_back(params[i].value.shape);
      v_.emplace_back(params[i].value.shape);
    }
  }

  const AdamWConfig& config() const noexcept { return cfg_; }
  void set_lr(double lr) noexcept { cfg_.lr = lr; }
  std::uint64_t step_count() const noexcept { return step_; }
  const BasicTensor<Real>& first_moment(std::size_t i) const { return m_.at(i); }
  const BasicTensor<Real>& second_moment(std::size_t i) const { return v_.at(i); }

  // Applies one update from the accumulated Parameter::grad values. Throws
  // NumericError before touching anything when a gradient is not finite.
  void step() {
    for (std::size_t i = 0; i < params_->size(); ++i) {
      const auto& p = (*params_)[i];
      if (!p.grad.all_finite()) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const Real decay = static_cast<Real>(1.0 - cfg_.lr * cfg_.weight_decay);
    const Real b1 = static_cast<Real>(cfg_.beta1), b2 = static_cast<Real>(cfg_.beta2);
    const Real step_size = static_cast<Real>(cfg_.lr / bc1);
    const Real inv_sqrt_bc2 = static_cast<Real>(1.0 / std::sqrt(bc2));
    const Real eps = static_cast<Real>(cfg_.eps);
    for (std::size_t i = 0; i < params_->size(); ++i) {
      auto& p = (*params_)[i];
      auto& w = p.value.data;
      const auto& g = p.grad.data;
      auto& m = m_[i].data;
      auto& v = v_[i].data;
      for (std::size_t j = 0; j < w.size(); ++j) {
        w[j] *= decay;
        m[j] = b1 * m[j] + (Real(1) - b1) * g[j];
        v[j] = b2 * v[j] + (Real(1) - b2) * g[j] * g[j];
        w[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
      }
    }
  }

 private:
  BasicParamStore<Real>* params_;
  AdamWConfig cfg_;
  std::vector<BasicTensor<Real>> m_, v_;
  std::uint64_t step_ = 0;
};

using AdamW = BasicAdamW<float>;

}  // namespace macrec
