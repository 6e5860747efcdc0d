#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace dsmstcn {

/// Raised when operand shapes disagree. The message names the offending dimension.
class shape_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

// Eigen peels vectorized loops according to the runtime alignment of each buffer. With
// allocator-aligned storage the peeling, and therefore the rounding, depends only on shapes.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

template <typename... Parts>
std::string concat(Parts&&... parts) {
  std::ostringstream oss;
  (oss << ... << std::forward<Parts>(parts));
  return oss.str();
}

inline void require_dim(std::size_t got, std::size_t expected, const char* what) {
  if (got != expected) {
    throw shape_error(concat(what, ": expected ", expected, ", got ", got));
  }
}

}  // namespace detail

/// Dense row-major array with an explicit shape. Used for learnable weights.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, const std::vector<double>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    detail::require_dim(data_.size(), element_count(shape_), "tensor payload size");
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  std::vector<std::size_t> shape_;
  detail::Buffer data_;
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// A multichannel time series, channels x length, stored row-major (one row per channel).
/// The shape is fixed at construction.
class ChannelSequence {
 public:
  ChannelSequence() = default;

  ChannelSequence(std::size_t channels, std::size_t length, double fill = 0.0)
      : channels_(channels), length_(length), values_(channels * length, fill) {}

  ChannelSequence(std::size_t channels, std::size_t length, const std::vector<double>& values)
      : channels_(channels), length_(length), values_(values.begin(), values.end()) {
    detail::require_dim(values_.size(), channels * length, "sequence payload size");
  }

  std::size_t channels() const noexcept { return channels_; }
  std::size_t length() const noexcept { return length_; }

  double& operator()(std::size_t c, std::size_t t) { return values_[c * length_ + t]; }
  double operator()(std::size_t c, std::size_t t) const { return values_[c * length_ + t]; }

  std::span<double> row(std::size_t c) { return {values_.data() + c * length_, length_}; }
  std::span<const double> row(std::size_t c) const { return {values_.data() + c * length_, length_}; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  const double* data() const noexcept { return values_.data(); }
  double* data() noexcept { return values_.data(); }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  /// Samples [start, start + count) of every channel. Samples past the end are zero.
  ChannelSequence window(std::size_t start, std::size_t count) const {
    ChannelSequence out(channels_, count);
    for (std::size_t c = 0; c < channels_; ++c) {
      for (std::size_t t = 0; t < count && start + t < length_; ++t) out(c, t) = (*this)(c, start + t);
    }
    return out;
  }

  friend bool operator==(const ChannelSequence&, const ChannelSequence&) = default;

 private:
  std::size_t channels_ = 0;
  std::size_t length_ = 0;
  detail::Buffer values_;
};

/// Per-sample class distributions, one column per time step. Only softmax_channels
/// constructs these from logits, so every column is a probability vector.
class ProbabilitySequence {
 public:
  ProbabilitySequence() = default;

  std::size_t classes() const noexcept { return seq_.channels(); }
  std::size_t length() const noexcept { return seq_.length(); }
  double operator()(std::size_t c, std::size_t t) const { return seq_(c, t); }
  const ChannelSequence& as_sequence() const noexcept { return seq_; }

  /// Wraps externally produced columns after checking they are distributions.
  static ProbabilitySequence from_columns(ChannelSequence seq, double tolerance = 1e-9) {
    for (std::size_t t = 0; t < seq.length(); ++t) {
      double sum = 0.0;
      for (std::size_t c = 0; c < seq.channels(); ++c) {
        if (!(seq(c, t) >= 0.0)) throw std::invalid_argument(detail::concat("negative probability at t=", t));
        sum += seq(c, t);
      }
      if (std::abs(sum - 1.0) > tolerance) {
        throw std::invalid_argument(detail::concat("column ", t, " sums to ", sum));
      }
    }
    ProbabilitySequence p;
    p.seq_ = std::move(seq);
    return p;
  }

  friend bool operator==(const ProbabilitySequence&, const ProbabilitySequence&) = default;

 private:
  friend ProbabilitySequence softmax_channels(const ChannelSequence& logits);
  explicit ProbabilitySequence(ChannelSequence seq) : seq_(std::move(seq)) {}
  ChannelSequence seq_;
};

/// 3-tap dilated convolution weights. Tap k reads offset (k - 1) * dilation,
/// so taps are {-d, 0, +d}. Layout: taps[3][out][in], bias[out].
struct KernelWeights {
  Tensor taps;
  Tensor bias;

  static KernelWeights zeros(std::size_t out_channels, std::size_t in_channels) {
    return {Tensor({3, out_channels, in_channels}), Tensor({out_channels})};
  }
  std::size_t out_channels() const { return taps.shape().at(1); }
  std::size_t in_channels() const { return taps.shape().at(2); }
  double& tap(std::size_t k, std::size_t out, std::size_t in) { return taps[(k * out_channels() + out) * in_channels() + in]; }
};

/// 1x1 convolution weights: matrix[out][in], bias[out].
struct PointwiseWeights {
  Tensor matrix;
  Tensor bias;

  static PointwiseWeights zeros(std::size_t out_channels, std::size_t in_channels) {
    return {Tensor({out_channels, in_channels}), Tensor({out_channels})};
  }
  std::size_t out_channels() const { return matrix.shape().at(0); }
  std::size_t in_channels() const { return matrix.shape().at(1); }
};

namespace kernels {

inline void check_kernel_shapes(const Tensor& taps, const Tensor& bias) {
  if (taps.shape().size() != 3 || taps.shape()[0] != 3) {
    throw shape_error("dilated kernel taps: expected shape [3 x out x in], got " + shape_string(taps.shape()));
  }
  if (bias.shape() != std::vector<std::size_t>{taps.shape()[1]}) {
    throw shape_error("dilated kernel bias: expected [" + std::to_string(taps.shape()[1]) + "], got " +
                      shape_string(bias.shape()));
  }
}

inline void check_pointwise_shapes(const Tensor& matrix, const Tensor& bias) {
  if (matrix.shape().size() != 2) {
    throw shape_error("pointwise weights: expected rank 2, got " + shape_string(matrix.shape()));
  }
  if (bias.shape() != std::vector<std::size_t>{matrix.shape()[0]}) {
    throw shape_error("pointwise bias: expected [" + std::to_string(matrix.shape()[0]) + "], got " +
                      shape_string(bias.shape()));
  }
}

// Valid output range for a tap with signed offset `offset` over length T.
inline std::pair<std::size_t, std::size_t> tap_range(long offset, std::size_t length) {
  const long T = static_cast<long>(length);
  const long lo = std::max(0L, -offset);
  const long hi = std::min(T, T - offset);
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi - lo)};
}

inline void dilated_conv_forward(const double* in, std::size_t cin, std::size_t length, const double* taps,
                                 const double* bias, std::size_t cout, std::size_t dilation, double* out) {
  detail::ConstMatMap x(in, static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(length));
  detail::MatMap y(out, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(length));
  for (std::size_t o = 0; o < cout; ++o) y.row(static_cast<Eigen::Index>(o)).setConstant(bias[o]);
  for (int k = 0; k < 3; ++k) {
    const long offset = static_cast<long>(k - 1) * static_cast<long>(dilation);
    const auto [t0, n] = tap_range(offset, length);
    if (n == 0) continue;
    detail::ConstMatMap w(taps + k * cout * cin, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin));
    const auto src = static_cast<Eigen::Index>(static_cast<long>(t0) + offset);
    y.middleCols(static_cast<Eigen::Index>(t0), static_cast<Eigen::Index>(n)).noalias() +=
        w * x.middleCols(src, static_cast<Eigen::Index>(n));
  }
}

// Accumulates into grad_in (may be null), grad_taps and grad_bias.
inline void dilated_conv_backward(const double* in, std::size_t cin, std::size_t length, const double* taps,
                                  std::size_t cout, std::size_t dilation, const double* grad_out, double* grad_in,
                                  double* grad_taps, double* grad_bias) {
  detail::ConstMatMap x(in, static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(length));
  detail::ConstMatMap g(grad_out, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(length));
  for (std::size_t o = 0; o < cout; ++o) grad_bias[o] += g.row(static_cast<Eigen::Index>(o)).sum();
  for (int k = 0; k < 3; ++k) {
    const long offset = static_cast<long>(k - 1) * static_cast<long>(dilation);
    const auto [t0, n] = tap_range(offset, length);
    if (n == 0) continue;
    const auto src = static_cast<Eigen::Index>(static_cast<long>(t0) + offset);
    const auto gcols = g.middleCols(static_cast<Eigen::Index>(t0), static_cast<Eigen::Index>(n));
    const auto xcols = x.middleCols(src, static_cast<Eigen::Index>(n));
    detail::MatMap gw(grad_taps + k * cout * cin, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin));
    gw.noalias() += gcols * xcols.transpose();
    if (grad_in != nullptr) {
      detail::ConstMatMap w(taps + k * cout * cin, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin));
      detail::MatMap gx(grad_in, static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(length));
      gx.middleCols(src, static_cast<Eigen::Index>(n)).noalias() += w.transpose() * gcols;
    }
  }
}

inline void pointwise_forward(const double* in, std::size_t cin, std::size_t length, const double* matrix,
                              const double* bias, std::size_t cout, double* out) {
  detail::ConstMatMap x(in, static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(length));
  detail::ConstMatMap w(matrix, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin));
  detail::MatMap y(out, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(length));
  for (std::size_t o = 0; o < cout; ++o) y.row(static_cast<Eigen::Index>(o)).setConstant(bias[o]);
  y.noalias() += w * x;
}

inline void pointwise_backward(const double* in, std::size_t cin, std::size_t length, const double* matrix,
                               std::size_t cout, const double* grad_out, double* grad_in, double* grad_matrix,
                               double* grad_bias) {
  detail::ConstMatMap x(in, static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(length));
  detail::ConstMatMap g(grad_out, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(length));
  detail::MatMap gw(grad_matrix, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin));
  for (std::size_t o = 0; o < cout; ++o) grad_bias[o] += g.row(static_cast<Eigen::Index>(o)).sum();
  gw.noalias() += g * x.transpose();
  if (grad_in != nullptr) {
    detail::ConstMatMap w(matrix, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin));
    detail::MatMap gx(grad_in, static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(length));
    gx.noalias() += w.transpose() * g;
  }
}

// Column-wise softmax with max subtraction.
inline void softmax_forward(const double* in, std::size_t classes, std::size_t length, double* out) {
  for (std::size_t t = 0; t < length; ++t) {
    double peak = in[t];
    for (std::size_t c = 1; c < classes; ++c) peak = std::max(peak, in[c * length + t]);
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      const double e = std::exp(in[c * length + t] - peak);
      out[c * length + t] = e;
      sum += e;
    }
    for (std::size_t c = 0; c < classes; ++c) out[c * length + t] /= sum;
  }
}

// grad_in[c,t] += p[c,t] * (g[c,t] - sum_k p[k,t] g[k,t])
inline void softmax_backward(const double* probs, std::size_t classes, std::size_t length, const double* grad_out,
                             double* grad_in) {
  for (std::size_t t = 0; t < length; ++t) {
    double dot = 0.0;
    for (std::size_t c = 0; c < classes; ++c) dot += probs[c * length + t] * grad_out[c * length + t];
    for (std::size_t c = 0; c < classes; ++c) {
      grad_in[c * length + t] += probs[c * length + t] * (grad_out[c * length + t] - dot);
    }
  }
}

}  // namespace kernels

inline ChannelSequence dilated_conv1d(const ChannelSequence& input, const KernelWeights& weights,
                                      std::size_t dilation) {
  kernels::check_kernel_shapes(weights.taps, weights.bias);
  if (dilation < 1) throw std::invalid_argument("dilation must be >= 1");
  detail::require_dim(input.channels(), weights.in_channels(), "dilated_conv1d input channels");
  ChannelSequence out(weights.out_channels(), input.length());
  kernels::dilated_conv_forward(input.data(), input.channels(), input.length(), weights.taps.data(),
                                weights.bias.data(), weights.out_channels(), dilation, out.data());
  return out;
}

inline ChannelSequence relu(ChannelSequence input) {
  for (double& v : input.values()) v = std::max(v, 0.0);
  return input;
}

inline ChannelSequence conv1x1(const ChannelSequence& input, const PointwiseWeights& weights) {
  kernels::check_pointwise_shapes(weights.matrix, weights.bias);
  detail::require_dim(input.channels(), weights.in_channels(), "conv1x1 input channels");
  ChannelSequence out(weights.out_channels(), input.length());
  kernels::pointwise_forward(input.data(), input.channels(), input.length(), weights.matrix.data(),
                             weights.bias.data(), weights.out_channels(), out.data());
  return out;
}

inline ProbabilitySequence softmax_channels(const ChannelSequence& logits) {
  if (logits.channels() < 2) throw shape_error("softmax_channels: need at least 2 channels");
  ChannelSequence out(logits.channels(), logits.length());
  kernels::softmax_forward(logits.data(), logits.channels(), logits.length(), out.data());
  return ProbabilitySequence(std::move(out));
}

}  // namespace dsmstcn
