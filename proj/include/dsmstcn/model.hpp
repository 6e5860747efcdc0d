#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dsmstcn/adam.hpp"
#include "dsmstcn/catalog.hpp"
#include "dsmstcn/numerics.hpp"
#include "dsmstcn/tape.hpp"

namespace dsmstcn {

enum class ModelMode { dual_scale, ablation_no_micro, dual_scale_two_micro };

inline std::string_view to_string(ModelMode m) {
  switch (m) {
    case ModelMode::dual_scale: return "dual_scale";
    case ModelMode::ablation_no_micro: return "ablation_no_micro";
    case ModelMode::dual_scale_two_micro: return "dual_scale_two_micro";
  }
  return "?";
}

inline ModelMode parse_mode(std::string_view s) {
  if (s == "dual_scale") return ModelMode::dual_scale;
  if (s == "ablation_no_micro") return ModelMode::ablation_no_micro;
  if (s == "dual_scale_two_micro") return ModelMode::dual_scale_two_micro;
  throw std::invalid_argument("unknown model mode '" + std::string(s) + "'");
}

/// 2^(L+1) - 1 samples for L layers with dilations 1, 2, ..., 2^(L-1) and 3-tap kernels.
inline std::size_t receptive_field(std::size_t num_layers) {
  if (num_layers < 1) throw std::invalid_argument("receptive_field: need at least one layer");
  return (std::size_t{1} << (num_layers + 1)) - 1;
}

struct StageConfig {
  std::size_t num_layers = 9;
  std::size_t num_filters = 64;
  std::size_t in_channels = 6;
  std::size_t out_classes = 5;
  Scale scale = Scale::macro;

  std::size_t dilation(std::size_t layer) const { return std::size_t{1} << layer; }
  std::size_t receptive_field() const { return dsmstcn::receptive_field(num_layers); }
};

struct ModelConfig {
  ModelMode mode = ModelMode::dual_scale;
  std::size_t num_layers = 9;
  std::size_t num_filters = 64;
  std::size_t input_channels = 6;

  std::size_t micro_classes() const { return ClassCatalog::micro().size(); }
  std::size_t macro_classes() const { return ClassCatalog::macro().size(); }

  /// Stage scales in order: [micro, macro, macro, macro] for dual_scale,
  /// four macro stages for the ablation, [micro, micro, macro, macro, macro] for two-micro.
  std::vector<Scale> stage_scales() const {
    switch (mode) {
      case ModelMode::dual_scale: return {Scale::micro, Scale::macro, Scale::macro, Scale::macro};
      case ModelMode::ablation_no_micro: return {Scale::macro, Scale::macro, Scale::macro, Scale::macro};
      case ModelMode::dual_scale_two_micro:
        return {Scale::micro, Scale::micro, Scale::macro, Scale::macro, Scale::macro};
    }
    return {};
  }

  std::vector<StageConfig> stages() const {
    if (num_layers < 1 || num_filters < 1) throw std::invalid_argument("model needs >= 1 layer and >= 1 filter");
    std::vector<StageConfig> out;
    std::size_t in = input_channels;
    for (Scale s : stage_scales()) {
      StageConfig st;
      st.num_layers = num_layers;
      st.num_filters = num_filters;
      st.in_channels = in;
      st.out_classes = ClassCatalog::for_scale(s).size();
      st.scale = s;
      out.push_back(st);
      in = st.out_classes;
    }
    return out;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

namespace names {
inline std::string stage(std::size_t s) { return "stage" + std::to_string(s + 1); }
inline std::string block(std::size_t s, std::size_t l) { return stage(s) + "/block" + std::to_string(l); }
}  // namespace names

/// Name -> shape of every learnable array. Stages are numbered from 1.
inline std::map<std::string, std::vector<std::size_t>> parameter_shapes(const ModelConfig& config) {
  std::map<std::string, std::vector<std::size_t>> shapes;
  const auto stages = config.stages();
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto& st = stages[s];
    const std::size_t D = st.num_filters;
    shapes[names::stage(s) + "/in/w"] = {D, st.in_channels};
    shapes[names::stage(s) + "/in/b"] = {D};
    for (std::size_t l = 0; l < st.num_layers; ++l) {
      shapes[names::block(s, l) + "/dil/w"] = {3, D, D};
      shapes[names::block(s, l) + "/dil/b"] = {D};
      shapes[names::block(s, l) + "/pw/w"] = {D, D};
      shapes[names::block(s, l) + "/pw/b"] = {D};
    }
    shapes[names::stage(s) + "/out/w"] = {st.out_classes, D};
    shapes[names::stage(s) + "/out/b"] = {st.out_classes};
  }
  return shapes;
}

inline std::size_t parameter_count(const ModelConfig& config) {
  std::size_t n = 0;
  for (const auto& [name, shape] : parameter_shapes(config)) n += Tensor::element_count(shape);
  return n;
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike, where fan_in is
/// in_channels * taps. Parameters are drawn in name order from one seeded generator.
inline ParameterSet init_parameters(const ModelConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterSet params;
  const auto all = parameter_shapes(config);
  for (const auto& [name, shape] : all) {
    // biases share the fan-in of their weight
    const auto& w = name.ends_with("/w") ? shape : all.at(name.substr(0, name.size() - 1) + "w");
    const std::size_t fan_in = w.size() == 3 ? w[0] * w[2] : w[1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(shape);
    for (double& v : t.values()) v = dist(rng);
    params.emplace(name, std::move(t));
  }
  return params;
}

/// Throws unless `params` holds exactly the arrays `config` needs, with matching shapes.
inline void check_parameters(const ModelConfig& config, const ParameterSet& params) {
  const auto shapes = parameter_shapes(config);
  for (const auto& [name, shape] : shapes) {
    auto it = params.find(name);
    if (it == params.end()) throw shape_error("missing parameter '" + name + "'");
    if (it->second.shape() != shape) {
      throw shape_error("parameter '" + name + "': expected " + shape_string(shape) + ", got " +
                        shape_string(it->second.shape()));
    }
  }
  for (const auto& [name, t] : params) {
    if (!shapes.contains(name)) throw shape_error("unexpected parameter '" + name + "'");
  }
}

// ---------------------------------------------------------------------------
// Inference (no tape)

/// x + conv1x1(relu(dilated_conv1d(x, d)))
inline ChannelSequence residual_block(const ChannelSequence& x, const KernelWeights& dilated,
                                      const PointwiseWeights& pointwise, std::size_t dilation) {
  detail::require_dim(x.channels(), dilated.in_channels(), "residual_block input channels");
  detail::require_dim(pointwise.out_channels(), x.channels(), "residual_block output channels");
  ChannelSequence h = conv1x1(relu(dilated_conv1d(x, dilated, dilation)), pointwise);
  for (std::size_t i = 0; i < h.values().size(); ++i) h.values()[i] += x.values()[i];
  return h;
}

inline ChannelSequence stage_logits(const ChannelSequence& input, const StageConfig& stage, const ParameterSet& params,
                                    std::size_t stage_index) {
  detail::require_dim(input.channels(), stage.in_channels, "stage input channels");
  const std::string prefix = names::stage(stage_index);
  ChannelSequence h = conv1x1(input, {params.at(prefix + "/in/w"), params.at(prefix + "/in/b")});
  for (std::size_t l = 0; l < stage.num_layers; ++l) {
    const std::string b = names::block(stage_index, l);
    h = residual_block(h, {params.at(b + "/dil/w"), params.at(b + "/dil/b")},
                       {params.at(b + "/pw/w"), params.at(b + "/pw/b")}, stage.dilation(l));
  }
  return conv1x1(h, {params.at(prefix + "/out/w"), params.at(prefix + "/out/b")});
}

/// One single-stage TCN: input projection, L residual blocks with dilations 1..2^(L-1),
/// output head, softmax over classes.
inline ProbabilitySequence sstcn_forward(const ChannelSequence& input, const StageConfig& stage,
                                         const ParameterSet& params, std::size_t stage_index) {
  return softmax_channels(stage_logits(input, stage, params, stage_index));
}

struct ModelOutput {
  std::vector<ProbabilitySequence> micro;  // micro-scale stages, in order
  std::vector<ProbabilitySequence> macro;  // macro-scale stages, in order
};

/// Runs every stage. Stage 1 consumes the IMU; each later stage consumes the previous
/// stage's probabilities.
inline ModelOutput dsmstcn_forward(const ChannelSequence& imu, const ModelConfig& config, const ParameterSet& params) {
  detail::require_dim(imu.channels(), config.input_channels, "model input channels");
  const auto stages = config.stages();
  ModelOutput out;
  const ChannelSequence* input = &imu;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    ProbabilitySequence p = sstcn_forward(*input, stages[s], params, s);
    auto& dest = stages[s].scale == Scale::micro ? out.micro : out.macro;
    dest.push_back(std::move(p));
    input = &dest.back().as_sequence();
  }
  return out;
}

/// Per-sample argmax; ties resolve to the lowest class id.
inline LabelTrack predict_labels(const ProbabilitySequence& probs) {
  LabelTrack labels(probs.length(), 0);
  for (std::size_t t = 0; t < probs.length(); ++t) {
    int best = 0;
    for (std::size_t c = 1; c < probs.classes(); ++c) {
      if (probs(c, t) > probs(static_cast<std::size_t>(best), t)) best = static_cast<int>(c);
    }
    labels[t] = best;
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Training forward (records on a tape)

struct TapedOutput {
  std::vector<Var> stages;       // softmax output of every stage, in order
  std::vector<Scale> scales;     // scale of each entry in `stages`
};

inline TapedOutput forward_on_tape(GradientTape& tape, const ChannelSequence& imu, const ModelConfig& config,
                                   const ParameterSet& params) {
  detail::require_dim(imu.channels(), config.input_channels, "model input channels");
  const auto stages = config.stages();
  TapedOutput out;
  Var input = tape.constant(imu);
  auto param = [&](const std::string& name) { return tape.parameter(name, params.at(name)); };
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string prefix = names::stage(s);
    Var h = tape.conv1x1(input, param(prefix + "/in/w"), param(prefix + "/in/b"));
    for (std::size_t l = 0; l < stages[s].num_layers; ++l) {
      const std::string b = names::block(s, l);
      Var conv = tape.dilated_conv1d(h, param(b + "/dil/w"), param(b + "/dil/b"), stages[s].dilation(l));
      Var pw = tape.conv1x1(tape.relu(conv), param(b + "/pw/w"), param(b + "/pw/b"));
      h = tape.add(h, pw);
    }
    Var logits = tape.conv1x1(h, param(prefix + "/out/w"), param(prefix + "/out/b"));
    input = tape.softmax_channels(logits);
    out.stages.push_back(input);
    out.scales.push_back(stages[s].scale);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint container
//
// Little-endian throughout:
//   magic   8 bytes "DSMSTCN\0"
//   u32     format version (1)
//   u32     mode (0 dual_scale, 1 ablation_no_micro, 2 dual_scale_two_micro)
//   u32     num_layers, u32 num_filters, u32 input_channels
//   u32     tensor count
//   per tensor: u32 name length, name bytes, u32 rank, u64 dims[rank], f64 payload (row-major)
// Tensors are the model parameters followed by any extras (for example "norm/mean").

struct Checkpoint {
  ModelConfig config;
  ParameterSet params;
  std::map<std::string, Tensor> extras;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b, 8);
}

inline std::uint64_t get_le(std::istream& is, int bytes) {
  unsigned char b[8] = {};
  if (!is.read(reinterpret_cast<char*>(b), bytes)) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  put_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(os, static_cast<std::uint32_t>(t.shape().size()));
  for (std::size_t d : t.shape()) put_u64(os, d);
  for (double v : t.values()) put_u64(os, std::bit_cast<std::uint64_t>(v));
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  check_parameters(ckpt.config, ckpt.params);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  os.write("DSMSTCN\0", 8);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(ckpt.config.mode));
  detail::put_u32(os, static_cast<std::uint32_t>(ckpt.config.num_layers));
  detail::put_u32(os, static_cast<std::uint32_t>(ckpt.config.num_filters));
  detail::put_u32(os, static_cast<std::uint32_t>(ckpt.config.input_channels));
  detail::put_u32(os, static_cast<std::uint32_t>(ckpt.params.size() + ckpt.extras.size()));
  for (const auto& [name, t] : ckpt.params) detail::put_tensor(os, name, t);
  for (const auto& [name, t] : ckpt.extras) detail::put_tensor(os, name, t);
  if (!os) throw std::runtime_error("error writing checkpoint " + path);
}

/// Reads a checkpoint. When `expected` is given, a checkpoint built for a different model
/// configuration is rejected before any payload is read.
inline Checkpoint load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, "DSMSTCN\0", 8) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  const auto version = detail::get_le(is, 4);
  if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  const auto mode = detail::get_le(is, 4);
  if (mode > 2) throw std::runtime_error("checkpoint: bad mode " + std::to_string(mode));
  ckpt.config.mode = static_cast<ModelMode>(mode);
  ckpt.config.num_layers = detail::get_le(is, 4);
  ckpt.config.num_filters = detail::get_le(is, 4);
  ckpt.config.input_channels = detail::get_le(is, 4);
  if (expected != nullptr && !(*expected == ckpt.config)) {
    throw shape_error("checkpoint model config (mode " + std::string(to_string(ckpt.config.mode)) + ", L=" +
                      std::to_string(ckpt.config.num_layers) + ", D=" + std::to_string(ckpt.config.num_filters) +
                      ") does not match the requested model (mode " + std::string(to_string(expected->mode)) +
                      ", L=" + std::to_string(expected->num_layers) + ", D=" +
                      std::to_string(expected->num_filters) + ")");
  }
  const auto shapes = parameter_shapes(ckpt.config);
  const auto count = detail::get_le(is, 4);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = detail::get_le(is, 4);
    if (name_len > 4096) throw std::runtime_error("checkpoint: implausible name length");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name_len))) throw std::runtime_error("checkpoint: truncated");
    const auto rank = detail::get_le(is, 4);
    if (rank > 8) throw std::runtime_error("checkpoint: implausible rank for '" + name + "'");
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = detail::get_le(is, 8);
    std::vector<double> data(Tensor::element_count(shape));
    for (double& v : data) v = std::bit_cast<double>(detail::get_le(is, 8));
    Tensor t(std::move(shape), std::move(data));
    if (shapes.contains(name)) {
      ckpt.params.emplace(name, std::move(t));
    } else {
      ckpt.extras.emplace(name, std::move(t));
    }
  }
  check_parameters(ckpt.config, ckpt.params);
  return ckpt;
}

}  // namespace dsmstcn
