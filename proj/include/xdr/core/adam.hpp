#pragma once

#include <cmath>
#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "xdr/core/graph.hpp"

namespace xdr {

struct AdamOptions {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment buffers are stored per parameter, in the order the parameters
/// were handed to the optimizer.
template <class T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t t = 0;
};

template <class T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>*> params, AdamOptions opts = {}) : params_(std::move(params)), opts_(opts) {
    for (auto* p : params_) {
      state_.m.emplace_back(p->value.shape());
      state_.v.emplace_back(p->value.shape());
    }
  }

  /// One bias-corrected update from the gradients currently stored on the
  /// parameters. Refuses frozen parameters; a non-finite gradient rejects
  /// the whole step and leaves parameters and state untouched.
  void step() {
    for (auto* p : params_) {
      if (p->frozen) throw FrozenError("adam: parameter '" + p->name + "' is frozen");
      if (!p->grad.defined() || p->grad.shape() != p->value.shape())
        throw ShapeError("adam: parameter '" + p->name + "' has no gradient of matching shape");
    }
    for (auto* p : params_)
      if (!p->grad.all_finite()) {
        std::clog << "[adam] rejected step " << state_.t + 1 << ": non-finite gradient in '" << p->name << "'\n";
        throw NonFiniteError("adam: non-finite gradient for parameter '" + p->name + "'");
      }
    ++state_.t;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(state_.t));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(state_.t));
    const T b1 = static_cast<T>(opts_.beta1), b2 = static_cast<T>(opts_.beta2);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor<T>& w = params_[k]->value;
      const Tensor<T>& g = params_[k]->grad;
      Tensor<T>& m = state_.m[k];
      Tensor<T>& v = state_.v[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= static_cast<T>(opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  double lr() const { return opts_.lr; }
  void set_lr(double lr) { opts_.lr = lr; }
  const AdamOptions& options() const { return opts_; }
  const std::vector<Parameter<T>*>& params() const { return params_; }
  AdamState<T>& state() { return state_; }
  const AdamState<T>& state() const { return state_; }

 private:
  std::vector<Parameter<T>*> params_;
  AdamOptions opts_;
  AdamState<T> state_;
};

}  // namespace xdr
