#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "dsmstcn/numerics.hpp"
#include "dsmstcn/tape.hpp"

namespace dsmstcn {

/// Named learnable arrays, ordered by name.
using ParameterSet = std::map<std::string, Tensor>;

struct AdamHyper {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moment accumulators keyed like the parameters. Moments are created
/// as zeros on first use.
struct AdamState {
  std::map<std::string, Tensor> first_moment;
  std::map<std::string, Tensor> second_moment;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update. Parameters without an entry in `grads` are left
/// untouched (that is how stages are frozen). Every gradient must name an existing
/// parameter of the same shape.
inline void adam_step(ParameterSet& params, const Gradients& grads, AdamState& state, const AdamHyper& hyper) {
  for (const auto& [name, grad] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw shape_error("adam_step: gradient for unknown parameter '" + name + "'");
    if (!it->second.same_shape(grad)) {
      throw shape_error("adam_step: '" + name + "' parameter " + shape_string(it->second.shape()) + " vs gradient " +
                        shape_string(grad.shape()));
    }
    for (auto* moments : {&state.first_moment, &state.second_moment}) {
      auto m = moments->try_emplace(name, Tensor(grad.shape())).first;
      if (!m->second.same_shape(grad)) {
        throw shape_error("adam_step: '" + name + "' moment " + shape_string(m->second.shape()) + " vs gradient " +
                          shape_string(grad.shape()));
      }
    }
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(hyper.beta1, t);
  const double bias2 = 1.0 - std::pow(hyper.beta2, t);

  for (const auto& [name, grad] : grads) {
    Tensor& p = params.at(name);
    Tensor& m = state.first_moment.at(name);
    Tensor& v = state.second_moment.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * grad[i];
      v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      p[i] -= hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
    }
  }
}

}  // namespace dsmstcn
