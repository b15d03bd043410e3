#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "flowtts/tensor.hpp"

namespace flowtts {

template <class S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
};

template <class S>
using ParamList = std::vector<NamedParam<S>>;

// Standard Adam with bias correction. Gradients are accumulated by the tape
// and zeroed explicitly between steps via zero_grad().
template <class S>
class Adam {
 public:
  struct Options {
    S lr = S(1e-3);
    S beta1 = S(0.9);
    S beta2 = S(0.999);
    S eps = S(1e-8);
  };

  Adam(ParamList<S> params, Options opt = {})
      : params_(std::move(params)), opt_(opt) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(size_t(params_[i].tensor.numel()), S(0));
      v_[i].assign(size_t(params_[i].tensor.numel()), S(0));
    }
  }

  void set_lr(S lr) { opt_.lr = lr; }
  S lr() const { return opt_.lr; }
  int64_t step_count() const { return step_; }

  void step() {
    ++step_;
    S bc1 = S(1) - S(std::pow(double(opt_.beta1), double(step_)));
    S bc2 = S(1) - S(std::pow(double(opt_.beta2), double(step_)));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].tensor;
      if (!p.has_grad()) continue;  // untouched this step: zero gradient
      const S* g = p.grad();
      for (int64_t j = 0; j < p.numel(); ++j)
        if (!std::isfinite(g[j]))
          fail("adam_step: non-finite gradient in parameter '" +
               params_[i].name + "'");
      S* m = m_[i].data();
      S* v = v_[i].data();
      S* x = p.data();
      for (int64_t j = 0; j < p.numel(); ++j) {
        m[j] = opt_.beta1 * m[j] + (S(1) - opt_.beta1) * g[j];
        v[j] = opt_.beta2 * v[j] + (S(1) - opt_.beta2) * g[j] * g[j];
        S mhat = m[j] / bc1;
        S vhat = v[j] / bc2;
        x[j] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  const ParamList<S>& params() const { return params_; }

 private:
  ParamList<S> params_;
  Options opt_;
  std::vector<std::vector<S>> m_, v_;
  int64_t step_ = 0;
};

}  // namespace flowtts
