#include "pnd/layers.hpp"

#include <cmath>

#include "pnd/errors.hpp"

namespace pnd {

Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const real bound = std::sqrt(1.0f / static_cast<real>(fan_in));
  std::uniform_real_distribution<real> dist(-bound, bound);
  std::vector<real> values(numel_of(shape));
  for (auto& v : values) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(values), true);
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_, std::size_t padding_, Rng& rng)
    : weight(fan_in_uniform({out, in, kernel, kernel}, in * kernel * kernel, rng)), stride(stride_), padding(padding_) {}

void Conv2d::register_into(const std::string& prefix, Registry& reg) const { reg.param(prefix + ".weight", weight); }

BatchNorm2d::BatchNorm2d(std::size_t channels)
    : gamma(Tensor::full({channels}, 1.0f, true)),
      beta(Tensor::zeros({channels}, true)),
      stats{Tensor::zeros({channels}), Tensor::full({channels}, 1.0f)} {}

void BatchNorm2d::register_into(const std::string& prefix, Registry& reg) const {
  reg.param(prefix + ".gamma", gamma);
  reg.param(prefix + ".beta", beta);
  reg.buffer(prefix + ".running_mean", stats.running_mean);
  reg.buffer(prefix + ".running_var", stats.running_var);
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight(fan_in_uniform({out, in}, in, rng)), bias(Tensor::zeros({out}, true)) {}

void Linear::register_into(const std::string& prefix, Registry& reg) const {
  reg.param(prefix + ".weight", weight);
  reg.param(prefix + ".bias", bias);
}

ResidualUnit::ResidualUnit(std::size_t in, std::size_t out, std::size_t stride, Rng& rng)
    : conv1(in, out, 3, stride, 1, rng), conv2(out, out, 3, 1, 1, rng), bn1(out), bn2(out) {
  if (stride != 1 || in != out) {
    proj.emplace(in, out, 1, stride, 0, rng);
    proj_bn.emplace(out);
  }
}

Tensor ResidualUnit::forward(const Tensor& x, Mode mode) {
  Tensor h = relu(bn1.forward(conv1.forward(x), mode));
  h = bn2.forward(conv2.forward(h), mode);
  Tensor shortcut = proj ? proj_bn->forward(proj->forward(x), mode) : x;
  return relu(add(h, shortcut));
}

void ResidualUnit::register_into(const std::string& prefix, Registry& reg) const {
  conv1.register_into(prefix + ".conv1", reg);
  bn1.register_into(prefix + ".bn1", reg);
  conv2.register_into(prefix + ".conv2", reg);
  bn2.register_into(prefix + ".bn2", reg);
  if (proj) {
    proj->register_into(prefix + ".proj", reg);
    proj_bn->register_into(prefix + ".proj_bn", reg);
  }
}

Encoder::Encoder(const std::vector<std::size_t>& block_channels, std::size_t units_per_block, Rng& rng)
    : stem_conv_(3, block_channels.at(0), 7, 2, 3, rng), stem_bn_(block_channels.at(0)) {
  if (units_per_block == 0) throw SpecError("encoder needs at least one residual unit per block");
  std::size_t in = block_channels[0];
  for (std::size_t b = 0; b < block_channels.size(); ++b) {
    std::vector<ResidualUnit> units;
    for (std::size_t u = 0; u < units_per_block; ++u) {
      const std::size_t stride = (b > 0 && u == 0) ? 2 : 1;
      units.emplace_back(in, block_channels[b], stride, rng);
      in = block_channels[b];
    }
    blocks_.push_back(std::move(units));
  }
}

std::vector<Tensor> Encoder::forward(const Tensor& images, Mode mode) {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw ShapeError("encoder: expected (batch, 3, S, S) images, got " + shape_str(images.shape()));
  }
  if (images.dim(2) < 32 || images.dim(3) < 32) {
    throw ShapeError("encoder: image side must be at least 32, got " + shape_str(images.shape()));
  }
  Tensor h = relu(stem_bn_.forward(stem_conv_.forward(images), mode));
  h = max_pool2d(h, 3, 2, 1);
  std::vector<Tensor> maps;
  for (auto& block : blocks_) {
    for (auto& unit : block) h = unit.forward(h, mode);
    maps.push_back(h);
  }
  return maps;
}

void Encoder::register_into(const std::string& prefix, Registry& reg) const {
  stem_conv_.register_into(prefix + ".stem.conv", reg);
  stem_bn_.register_into(prefix + ".stem.bn", reg);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    for (std::size_t u = 0; u < blocks_[b].size(); ++u) {
      blocks_[b][u].register_into(prefix + ".block" + std::to_string(b + 1) + ".unit" + std::to_string(u), reg);
    }
  }
}

}  // namespace pnd
