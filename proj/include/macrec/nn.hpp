#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "macrec/autodiff.hpp"
#include "macrec/rng.hpp"

namespace macrec::nn {

// Xavier-uniform matrix; each parameter draws from its own stream derived
// from (seed, name).
inline Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::uint64_t seed, const std::string& name) {
  Rng rng(seed, name);
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::matrix(fan_in, fan_out);
  for (auto& v : t.data) v = static_cast<float>(rng.uniform(-a, a));
  return t;
}

inline Tensor normal_init(Shape shape, double stddev, std::uint64_t seed, const std::string& name) {
  Rng rng(seed, name);
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = static_cast<float>(rng.normal(0.0, stddev));
  return t;
}

// y = x W + b with W stored (in x out).
struct Linear {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;

  Linear() = default;
  Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, std::uint64_t seed,
         bool with_bias = true) {
    weight = &store.add(name + ".weight", xavier_uniform(in, out, seed, name + ".weight"));
    if (with_bias) bias = &store.add(name + ".bias", Tensor(Shape{out}));
  }

  std::size_t in_dim() const { return weight->value.rows(); }
  std::size_t out_dim() const { return weight->value.cols(); }

  Var operator()(Tape& t, Var x) const {
    Var y = t.matmul(x, t.param(*weight));
    return bias ? t.add_row(y, t.param(*bias)) : y;
  }
};

// Stack of Linear layers with ReLU between them (none after the last).
struct Mlp {
  std::vector<Linear> layers;

  Mlp() = default;
  Mlp(ParamStore& store, const std::string& name, const std::vector<std::size_t>& dims, std::uint64_t seed) {
    for (std::size_t i = 0; i + 1 < dims.size(); ++i)
      layers.emplace_back(store, name + "." + std::to_string(i), dims[i], dims[i + 1], seed);
  }

  Var operator()(Tape& t, Var x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](t, x);
      if (i + 1 < layers.size()) x = t.relu(x);
    }
    return x;
  }
};

struct LayerNorm {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;

  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, std::size_t dim) {
    gain = &store.add(name + ".gain", Tensor(Shape{dim}, 1.0f));
    bias = &store.add(name + ".bias", Tensor(Shape{dim}));
  }

  Var operator()(Tape& t, Var x) const { return t.layer_norm(x, t.param(*gain), t.param(*bias)); }
};

}  // namespace macrec::nn
