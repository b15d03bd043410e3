#pragma once

// Central-difference verification of tape gradients. Run in double precision;
// float roundoff swamps the comparison otherwise.

#include <functional>
#include <vector>

#include "flowtts/adam.hpp"
#include "flowtts/tensor.hpp"

namespace flowtts {

// f rebuilds the scalar loss from current tensor values on every call.
// Returns the max over checked coordinates of |g_ad - g_fd| / (|g_fd| + 1e-8).
// Large tensors are subsampled (deterministically) to keep runtime bounded;
// pass max_coords_per_tensor = 0 to check every coordinate.
inline double finite_difference_check(
    const std::function<Tensor<double>()>& f,
    const std::vector<Tensor<double>>& inputs, double eps = 1e-5,
    int64_t max_coords_per_tensor = 0, uint64_t subsample_seed = 17) {
  // analytic gradients
  std::vector<std::vector<double>> analytic(inputs.size());
  {
    Tape<double> tape;
    Tensor<double> loss = f();
    tape.backward(loss);
    for (size_t i = 0; i < inputs.size(); ++i) {
      analytic[i].assign(size_t(inputs[i].numel()), 0.0);
      if (inputs[i].has_grad())
        for (int64_t j = 0; j < inputs[i].numel(); ++j)
          analytic[i][size_t(j)] = inputs[i].grad()[j];
    }
  }

  double worst = 0.0;
  Rng rng(subsample_seed);
  for (size_t i = 0; i < inputs.size(); ++i) {
    Tensor<double> x = inputs[i];
    std::vector<int64_t> coords;
    if (max_coords_per_tensor <= 0 || x.numel() <= max_coords_per_tensor) {
      coords.resize(size_t(x.numel()));
      for (int64_t j = 0; j < x.numel(); ++j) coords[size_t(j)] = j;
    } else {
      for (int64_t k = 0; k < max_coords_per_tensor; ++k)
        coords.push_back(rng.uniform_int(x.numel()));
    }
    for (int64_t j : coords) {
      double orig = x.data()[j];
      x.data()[j] = orig + eps;
      double fp = f().item();
      x.data()[j] = orig - eps;
      double fm = f().item();
      x.data()[j] = orig;
      double fd = (fp - fm) / (2.0 * eps);
      double err = std::abs(analytic[i][size_t(j)] - fd) / (std::abs(fd) + 1e-8);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

inline std::vector<Tensor<double>> tensors_of(const ParamList<double>& params) {
  std::vector<Tensor<double>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

// Move every parameter to a generic point. Zero-initialized layers (gates,
// output heads) have exactly-invariant loss at init, which says nothing about
// their backward formulas; gradients should be checked off that point.
template <class S>
void randomize_params(const ParamList<S>& params, Rng& rng, S scale = S(0.3)) {
  for (const auto& p : params) {
    Tensor<S> t = p.tensor;  // shared storage, mutable handle
    for (int64_t i = 0; i < t.numel(); ++i)
      t.data()[i] += S(rng.normal()) * scale;
  }
}

}  // namespace flowtts
