#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dsmstcn/numerics.hpp"

namespace dsmstcn {

/// Handle to a value recorded on a GradientTape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t index = npos;
  bool valid() const noexcept { return index != npos; }
};

using Gradients = std::map<std::string, Tensor>;
using SampleMask = std::vector<std::uint8_t>;

/// Smallest probability fed to a log; saturated softmax columns would otherwise give -inf.
inline constexpr double kLogClamp = 1e-12;

inline double clamped_log(double p) { return std::log(std::max(p, kLogClamp)); }

/// Records forward operations over a fixed vocabulary (dilated conv, relu, 1x1 conv,
/// residual add, softmax, and the loss reductions) and replays them in reverse to obtain
/// exact gradients of a scalar with respect to every named parameter leaf.
class GradientTape {
 public:
  Var parameter(const std::string& name, const Tensor& value) {
    Node n;
    n.shape = value.shape();
    n.value.assign(value.values().begin(), value.values().end());
    n.param_name = name;
    return push(std::move(n));
  }

  Var constant(const ChannelSequence& value) {
    Node n;
    n.shape = {value.channels(), value.length()};
    n.value.assign(value.values().begin(), value.values().end());
    return push(std::move(n));
  }

  Var dilated_conv1d(Var x, Var taps, Var bias, std::size_t dilation) {
    const Node& nx = sequence_node(x, "dilated_conv1d input");
    kernels::check_kernel_shapes(shape_only(taps), shape_only(bias));
    if (dilation < 1) throw std::invalid_argument("dilation must be >= 1");
    const std::size_t cout = node(taps).shape[1];
    const std::size_t cin = node(taps).shape[2];
    detail::require_dim(nx.shape[0], cin, "dilated_conv1d input channels");
    const std::size_t length = nx.shape[1];
    Node out;
    out.shape = {cout, length};
    out.value.resize(cout * length);
    kernels::dilated_conv_forward(nx.value.data(), cin, length, node(taps).value.data(), node(bias).value.data(),
                                  cout, dilation, out.value.data());
    out.inputs = {x.index, taps.index, bias.index};
    out.backward = [cin, cout, length, dilation](GradientTape& tape, Node& self) {
      Node& in = tape.nodes_[self.inputs[0]];
      Node& w = tape.nodes_[self.inputs[1]];
      Node& b = tape.nodes_[self.inputs[2]];
      kernels::dilated_conv_backward(in.value.data(), cin, length, w.value.data(), cout, dilation, self.grad.data(),
                                     in.needs_grad ? in.grad.data() : nullptr, w.grad.data(), b.grad.data());
    };
    return push(std::move(out));
  }

  Var conv1x1(Var x, Var matrix, Var bias) {
    const Node& nx = sequence_node(x, "conv1x1 input");
    kernels::check_pointwise_shapes(shape_only(matrix), shape_only(bias));
    const std::size_t cout = node(matrix).shape[0];
    const std::size_t cin = node(matrix).shape[1];
    detail::require_dim(nx.shape[0], cin, "conv1x1 input channels");
    const std::size_t length = nx.shape[1];
    Node out;
    out.shape = {cout, length};
    out.value.resize(cout * length);
    kernels::pointwise_forward(nx.value.data(), cin, length, node(matrix).value.data(), node(bias).value.data(), cout,
                               out.value.data());
    out.inputs = {x.index, matrix.index, bias.index};
    out.backward = [cin, cout, length](GradientTape& tape, Node& self) {
      Node& in = tape.nodes_[self.inputs[0]];
      Node& w = tape.nodes_[self.inputs[1]];
      Node& b = tape.nodes_[self.inputs[2]];
      kernels::pointwise_backward(in.value.data(), cin, length, w.value.data(), cout, self.grad.data(),
                                  in.needs_grad ? in.grad.data() : nullptr, w.grad.data(), b.grad.data());
    };
    return push(std::move(out));
  }

  Var relu(Var x) {
    const Node& nx = sequence_node(x, "relu input");
    Node out;
    out.shape = nx.shape;
    out.value.resize(nx.value.size());
    for (std::size_t i = 0; i < nx.value.size(); ++i) {
      out.value[i] = std::max(nx.value[i], 0.0);
    }
    if (track_branches_) {
      for (double v : nx.value) mix_branch(v > 0.0);
    }
    out.inputs = {x.index};
    out.backward = [](GradientTape& tape, Node& self) {
      Node& in = tape.nodes_[self.inputs[0]];
      if (!in.needs_grad) return;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        if (self.value[i] > 0.0) in.grad[i] += self.grad[i];
      }
    };
    return push(std::move(out));
  }

  Var add(Var a, Var b) {
    const Node& na = sequence_node(a, "add lhs");
    const Node& nb = sequence_node(b, "add rhs");
    if (na.shape != nb.shape) {
      throw shape_error("add: shape " + shape_string(na.shape) + " vs " + shape_string(nb.shape));
    }
    Node out;
    out.shape = na.shape;
    out.value.resize(na.value.size());
    for (std::size_t i = 0; i < out.value.size(); ++i) out.value[i] = na.value[i] + nb.value[i];
    out.inputs = {a.index, b.index};
    out.backward = [](GradientTape& tape, Node& self) {
      for (std::size_t k = 0; k < 2; ++k) {
        Node& in = tape.nodes_[self.inputs[k]];
        if (!in.needs_grad) continue;
        for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
      }
    };
    return push(std::move(out));
  }

  Var softmax_channels(Var x) {
    const Node& nx = sequence_node(x, "softmax input");
    if (nx.shape[0] < 2) throw shape_error("softmax_channels: need at least 2 channels");
    Node out;
    out.shape = nx.shape;
    out.value.resize(nx.value.size());
    kernels::softmax_forward(nx.value.data(), nx.shape[0], nx.shape[1], out.value.data());
    out.inputs = {x.index};
    out.backward = [](GradientTape& tape, Node& self) {
      Node& in = tape.nodes_[self.inputs[0]];
      if (!in.needs_grad) return;
      kernels::softmax_backward(self.value.data(), self.shape[0], self.shape[1], self.grad.data(), in.grad.data());
    };
    return push(std::move(out));
  }

  /// (1 / normalizer) * sum over unmasked t of -log p[truth[t], t].
  Var cross_entropy(Var probs, std::span<const int> truth, std::span<const std::uint8_t> mask, double normalizer) {
    const Node& np = sequence_node(probs, "cross_entropy probabilities");
    const std::size_t classes = np.shape[0];
    const std::size_t length = np.shape[1];
    detail::require_dim(truth.size(), length, "cross_entropy truth length");
    detail::require_dim(mask.size(), length, "cross_entropy mask length");
    std::vector<int> labels(truth.begin(), truth.end());
    SampleMask counted(mask.begin(), mask.end());
    double sum = 0.0;
    for (std::size_t t = 0; t < length; ++t) {
      if (!counted[t]) continue;
      if (labels[t] < 0 || static_cast<std::size_t>(labels[t]) >= classes) {
        throw std::out_of_range(detail::concat("cross_entropy: class id ", labels[t], " at t=", t));
      }
      const double p = np.value[static_cast<std::size_t>(labels[t]) * length + t];
      if (track_branches_) mix_branch(p > kLogClamp);
      sum -= clamped_log(p);
    }
    Node out;
    out.value = {normalizer > 0.0 ? sum / normalizer : 0.0};
    out.inputs = {probs.index};
    out.backward = [labels = std::move(labels), counted = std::move(counted), length, normalizer](GradientTape& tape,
                                                                                                  Node& self) {
      Node& in = tape.nodes_[self.inputs[0]];
      if (!in.needs_grad || normalizer <= 0.0) return;
      const double g = self.grad[0] / normalizer;
      for (std::size_t t = 0; t < length; ++t) {
        if (!counted[t]) continue;
        const std::size_t i = static_cast<std::size_t>(labels[t]) * length + t;
        if (in.value[i] > kLogClamp) in.grad[i] -= g / in.value[i];
      }
    };
    return push(std::move(out));
  }

  /// Truncated squared log-probability differences between adjacent unmasked samples:
  /// (1 / normalizer) * sum_{t,c} min(|log p[c,t] - log p[c,t-1]|, tau)^2.
  /// With detach_previous the t-1 term is a constant during differentiation; its value is
  /// taken from `previous_reference` when given, otherwise from `probs` itself.
  Var truncated_mse(Var probs, std::span<const std::uint8_t> mask, double tau, double normalizer,
                    bool detach_previous = true, const ChannelSequence* previous_reference = nullptr) {
    const Node& np = sequence_node(probs, "truncated_mse probabilities");
    const std::size_t classes = np.shape[0];
    const std::size_t length = np.shape[1];
    detail::require_dim(mask.size(), length, "truncated_mse mask length");
    if (previous_reference != nullptr) {
      if (!detach_previous) throw std::invalid_argument("previous_reference requires detach_previous");
      detail::require_dim(previous_reference->channels(), classes, "truncated_mse reference classes");
      detail::require_dim(previous_reference->length(), length, "truncated_mse reference length");
    }
    SampleMask counted(mask.begin(), mask.end());
    std::vector<double> prev_log(classes * length, 0.0);
    for (std::size_t i = 0; i < prev_log.size(); ++i) {
      prev_log[i] = clamped_log(previous_reference ? previous_reference->values()[i] : np.value[i]);
    }
    double sum = 0.0;
    for (std::size_t t = 1; t < length; ++t) {
      if (!counted[t] || !counted[t - 1]) continue;
      for (std::size_t c = 0; c < classes; ++c) {
        const double raw = std::abs(clamped_log(np.value[c * length + t]) - prev_log[c * length + t - 1]);
        if (track_branches_) mix_branch(raw <= tau);
        const double delta = std::min(raw, tau);
        sum += delta * delta;
      }
    }
    Node out;
    out.value = {normalizer > 0.0 ? sum / normalizer : 0.0};
    out.inputs = {probs.index};
    out.backward = [counted = std::move(counted), prev_log = std::move(prev_log), classes, length, tau, normalizer,
                    detach_previous](GradientTape& tape, Node& self) {
      Node& in = tape.nodes_[self.inputs[0]];
      if (!in.needs_grad || normalizer <= 0.0) return;
      const double g = self.grad[0] / normalizer;
      for (std::size_t t = 1; t < length; ++t) {
        if (!counted[t] || !counted[t - 1]) continue;
        for (std::size_t c = 0; c < classes; ++c) {
          const std::size_t cur = c * length + t;
          const std::size_t prev = cur - 1;
          const double diff = clamped_log(in.value[cur]) - prev_log[prev];
          if (std::abs(diff) > tau) continue;
          const double dd = 2.0 * diff * g;  // d(diff^2)/d(diff)
          if (in.value[cur] > kLogClamp) in.grad[cur] += dd / in.value[cur];
          if (!detach_previous && in.value[prev] > kLogClamp) in.grad[prev] -= dd / in.value[prev];
        }
      }
    };
    return push(std::move(out));
  }

  /// sum_i weight_i * term_i over scalar terms.
  Var weighted_sum(const std::vector<std::pair<Var, double>>& terms) {
    Node out;
    double total = 0.0;
    std::vector<double> weights;
    for (const auto& [v, w] : terms) {
      const Node& n = node(v);
      if (!n.shape.empty()) throw shape_error("weighted_sum: term is not a scalar, shape " + shape_string(n.shape));
      total += w * n.value[0];
      out.inputs.push_back(v.index);
      weights.push_back(w);
    }
    out.value = {total};
    out.backward = [weights = std::move(weights)](GradientTape& tape, Node& self) {
      for (std::size_t k = 0; k < weights.size(); ++k) {
        Node& in = tape.nodes_[self.inputs[k]];
        if (in.needs_grad) in.grad[0] += weights[k] * self.grad[0];
      }
    };
    return push(std::move(out));
  }

  ChannelSequence sequence(Var v) const {
    const Node& n = sequence_node(v, "sequence value");
    ChannelSequence out(n.shape[0], n.shape[1]);
    std::copy(n.value.begin(), n.value.end(), out.values().begin());
    return out;
  }

  ProbabilitySequence probabilities(Var v) const { return ProbabilitySequence::from_columns(sequence(v)); }

  double scalar(Var v) const {
    const Node& n = node(v);
    if (!n.shape.empty()) throw shape_error("scalar: value has shape " + shape_string(n.shape));
    return n.value[0];
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Digest of every branch taken in the recorded forward pass (relu sign, truncation,
  /// log clamp). Two evaluations with equal signatures lie on the same smooth piece.
  /// Only maintained after track_branches(true).
  std::uint64_t branch_signature() const noexcept { return branches_; }
  void track_branches(bool on) noexcept { track_branches_ = on; }

  /// Reverse-mode pass from a scalar. Every parameter leaf on the tape gets an entry;
  /// leaves with no path to `loss` get zeros. Parameters recorded more than once
  /// under the same name have their gradients summed.
  Gradients backward(Var loss) {
    if (!loss.valid() || loss.index >= nodes_.size()) throw std::logic_error("backward: loss is not on this tape");
    if (!nodes_[loss.index].shape.empty()) throw std::logic_error("backward: loss must be a scalar");
    bool any_op = false;
    for (const Node& n : nodes_) any_op = any_op || static_cast<bool>(n.backward);
    if (!any_op) throw std::logic_error("backward: no forward operations were recorded");

    for (Node& n : nodes_) n.grad.assign(n.value.size(), 0.0);
    nodes_[loss.index].grad[0] = 1.0;
    for (std::size_t i = loss.index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.needs_grad) n.backward(*this, n);
    }

    Gradients out;
    for (const Node& n : nodes_) {
      if (n.param_name.empty()) continue;
      auto [it, inserted] = out.try_emplace(n.param_name, Tensor(n.shape));
      if (!inserted && it->second.shape() != n.shape) {
        throw shape_error("backward: parameter '" + n.param_name + "' recorded with two shapes");
      }
      for (std::size_t k = 0; k < n.grad.size(); ++k) it->second[k] += n.grad[k];
    }
    return out;
  }

 private:
  struct Node {
    std::vector<std::size_t> shape;  // {} for scalars, {C, T} for sequences
    detail::Buffer value;
    detail::Buffer grad;
    std::vector<std::size_t> inputs;
    std::function<void(GradientTape&, Node&)> backward;
    std::string param_name;
    bool needs_grad = false;
  };

  Var push(Node n) {
    n.needs_grad = !n.param_name.empty();
    for (std::size_t i : n.inputs) n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  const Node& node(Var v) const {
    if (!v.valid() || v.index >= nodes_.size()) throw std::logic_error("tape: invalid variable handle");
    return nodes_[v.index];
  }

  const Node& sequence_node(Var v, const char* what) const {
    const Node& n = node(v);
    if (n.shape.size() != 2) throw shape_error(std::string(what) + ": expected a sequence, got " + shape_string(n.shape));
    return n;
  }

  Tensor shape_only(Var v) const { return Tensor(node(v).shape); }

  void mix_branch(bool taken) noexcept {
    branches_ ^= static_cast<std::uint64_t>(taken) + 0x9e3779b97f4a7c15ULL + (branches_ << 6) + (branches_ >> 2);
  }

  std::vector<Node> nodes_;
  std::uint64_t branches_ = 0;
  bool track_branches_ = false;
};

}  // namespace dsmstcn
