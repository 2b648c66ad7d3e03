// Copyright 2026 The Sherlock Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef SHERLOCK_OPTIM_HPP_
#define SHERLOCK_OPTIM_HPP_

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sherlock/tensor.hpp"

namespace sherlock {

/// A trainable tensor with its checkpoint name. Biases, norms and tokens are
/// excluded from weight decay.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> tensor;
  bool decay = true;
};

template <typename Scalar>
using ParameterList = std::vector<Parameter<Scalar>>;

struct AdamWOptions {
  double lr = 1.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

template <typename Scalar>
struct AdamWState {
  using Array = typename Tensor<Scalar>::Array;
  std::vector<Array> m;
  std::vector<Array> v;
  std::int64_t step = 0;
};

/// One decoupled-weight-decay Adam update with bias correction:
///   p <- p (1 - lr wd);  p <- p - lr m_hat / (sqrt(v_hat) + eps).
/// Parameters without a gradient are treated as having a zero gradient.
template <typename Scalar>
void adamw_step(ParameterList<Scalar>& params, AdamWState<Scalar>& state, const AdamWOptions& opt) {
  using Array = typename Tensor<Scalar>::Array;
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Array::Zero(p.tensor.size()));
      state.v.push_back(Array::Zero(p.tensor.size()));
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adamw_step: state/parameter count mismatch");
  ++state.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  const auto b1 = static_cast<Scalar>(opt.beta1);
  const auto b2 = static_cast<Scalar>(opt.beta2);
  const auto step_size = static_cast<Scalar>(opt.lr / bc1);
  const auto inv_sqrt_bc2 = static_cast<Scalar>(1.0 / std::sqrt(bc2));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    if (state.m[i].size() != t.size()) {
      throw ShapeError("adamw_step: state shape mismatch for " + params[i].name);
    }
    const Array g = t.has_grad() ? t.grad() : Array::Zero(t.size());
    Array& w = t.mutable_data();
    if (params[i].decay && opt.weight_decay != 0.0) {
      w *= static_cast<Scalar>(1.0 - opt.lr * opt.weight_decay);
    }
    state.m[i] = b1 * state.m[i] + (Scalar(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (Scalar(1) - b2) * g.square();
    w -= step_size * state.m[i] / (state.v[i].sqrt() * inv_sqrt_bc2 + static_cast<Scalar>(opt.eps));
  }
}

template <typename Scalar>
void zero_grad(ParameterList<Scalar>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

}  // namespace sherlock

#endif  // SHERLOCK_OPTIM_HPP_
