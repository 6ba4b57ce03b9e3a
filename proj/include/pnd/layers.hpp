#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pnd/checkpoint.hpp"
#include "pnd/ops.hpp"

namespace pnd {

enum class Mode { train, eval };

using Rng = std::mt19937_64;

/// Receives every trainable parameter and every non-trainable buffer
/// (batchnorm running statistics) under a dotted name.
struct Registry {
  NamedTensors params;
  NamedTensors buffers;
  void param(const std::string& name, const Tensor& t) { params.emplace_back(name, t); }
  void buffer(const std::string& name, const Tensor& t) { buffers.emplace_back(name, t); }
};

// Fan-in scaled uniform in [-sqrt(1/fan_in), sqrt(1/fan_in)].
Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng);

struct Conv2d {
  Tensor weight;
  std::size_t stride = 1;
  std::size_t padding = 0;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding, Rng& rng);
  Tensor forward(const Tensor& x) const { return conv2d(x, weight, stride, padding); }
  void register_into(const std::string& prefix, Registry& reg) const;
};

struct BatchNorm2d {
  Tensor gamma;
  Tensor beta;
  BatchNormStats stats;

  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels);
  Tensor forward(const Tensor& x, Mode mode) { return batch_norm2d(x, gamma, beta, stats, mode == Mode::train); }
  void register_into(const std::string& prefix, Registry& reg) const;
};

struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng);
  Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }
  void register_into(const std::string& prefix, Registry& reg) const;
};

/// Two 3x3 conv/batchnorm pairs with an identity shortcut, or a strided 1x1
/// projection when the stride or width changes.
struct ResidualUnit {
  Conv2d conv1, conv2;
  BatchNorm2d bn1, bn2;
  std::optional<Conv2d> proj;
  std::optional<BatchNorm2d> proj_bn;

  ResidualUnit(std::size_t in, std::size_t out, std::size_t stride, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode);
  void register_into(const std::string& prefix, Registry& reg) const;
};

/// Stem (7x7/2 conv, batchnorm, ReLU, 3x3/2 max pool) followed by one stage
/// of residual units per entry of `block_channels`. Stages after the first
/// halve the spatial size on entry.
class Encoder {
 public:
  Encoder(const std::vector<std::size_t>& block_channels, std::size_t units_per_block, Rng& rng);
  // Returns the output map of every stage.
  std::vector<Tensor> forward(const Tensor& images, Mode mode);
  void register_into(const std::string& prefix, Registry& reg) const;
  std::size_t num_blocks() const { return blocks_.size(); }

 private:
  Conv2d stem_conv_;
  BatchNorm2d stem_bn_;
  std::vector<std::vector<ResidualUnit>> blocks_;
};

}  // namespace pnd
