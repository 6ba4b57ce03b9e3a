#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pnd/layers.hpp"

namespace pnd {

struct ModelConfig {
  std::size_t M = 4;
  std::vector<std::size_t> block_channels{16, 32, 64, 128};
  // Residual units per encoder block; 2 reproduces the ResNet-18 stage layout.
  std::size_t units_per_block = 2;
  std::size_t expert_embed_dim = 64;
  // Width of the first expert trunk conv (the 128:512 ratio of the reference
  // expert, scaled to the embedding width).
  std::size_t expert_mid_channels = 16;
  std::size_t head_hidden = 16;
  std::size_t n_classes = 10;
  // One conv trunk applied to both branches instead of one per branch.
  bool shared_expert_trunk = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct FeatureSet {
  std::vector<Tensor> z_d;
  std::vector<Tensor> z_b;
};

struct ExpertEmbeddings {
  std::vector<Tensor> e_d;
  std::vector<Tensor> e_b;
};

struct PnDOutput {
  std::vector<Tensor> y_d_logits;
  std::vector<Tensor> y_b_logits;
  Tensor gate_p;   // (batch, M)
  Tensor y_mixed;  // (batch, n_classes)
};

struct PnDForward {
  PnDOutput out;
  ExpertEmbeddings emb;
};

struct ExpertResult {
  Tensor y_d_logits, y_b_logits;
  Tensor e_d, e_b;
};

struct GateResult {
  Tensor gate_p;
  Tensor y_mixed;
};

/// conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> ReLU -> adaptive avgpool.
struct ExpertTrunk {
  Conv2d conv1, conv2;
  BatchNorm2d bn1, bn2;

  ExpertTrunk(std::size_t in, std::size_t mid, std::size_t embed, Rng& rng);
  Tensor forward(const Tensor& z, Mode mode);
  void register_into(const std::string& prefix, Registry& reg) const;
};

/// affine -> ReLU -> affine over a concatenated (e_d, e_b) pair.
struct ExpertHead {
  Linear fc1, fc2;

  ExpertHead(std::size_t in, std::size_t hidden, std::size_t classes, Rng& rng);
  Tensor forward(const Tensor& x) const { return fc2.forward(relu(fc1.forward(x))); }
  void register_into(const std::string& prefix, Registry& reg) const;
};

/// One biases-specific expert: a debiased head reading (e_d, detach(e_b))
/// and a bias head reading (detach(e_d), e_b).
class Expert {
 public:
  Expert(std::size_t in_channels, const ModelConfig& cfg, Rng& rng);
  ExpertResult forward(const Tensor& z_d, const Tensor& z_b, Mode mode);
  Tensor debiased_logits(const Tensor& e_d, const Tensor& e_b) const;
  Tensor bias_logits(const Tensor& e_d, const Tensor& e_b) const;
  void register_into(const std::string& prefix, Registry& reg) const;

 private:
  std::size_t embed_;
  bool shared_;
  ExpertTrunk trunk_d_;
  std::optional<ExpertTrunk> trunk_b_;
  ExpertHead head_d_, head_b_;
};

/// The two-encoder mixture-of-experts network.
class PnDNet {
 public:
  PnDNet(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  FeatureSet encode(const Tensor& images, Mode mode);
  ExpertResult expert_forward(std::size_t i, const Tensor& z_d, const Tensor& z_b, Mode mode);
  // Counterfactual path: heads applied to caller-supplied embeddings.
  ExpertResult expert_swap(std::size_t i, const Tensor& e_d, const Tensor& e_b) const;
  Tensor expert_debiased(std::size_t i, const Tensor& e_d, const Tensor& e_b) const;
  Tensor expert_bias(std::size_t i, const Tensor& e_d, const Tensor& e_b) const;
  GateResult gate_mix(const std::vector<Tensor>& y_d_logits) const;
  PnDForward forward(const Tensor& images, Mode mode);

  const NamedTensors& parameters() const { return reg_.params; }
  const NamedTensors& buffers() const { return reg_.buffers; }
  NamedTensors state() const;
  // Parameter count per top-level component (encoder_d, encoder_b, expertI, gate).
  std::map<std::string, std::size_t> census() const;

 private:
  ModelConfig cfg_;
  Encoder enc_d_, enc_b_;
  std::vector<Expert> experts_;
  Linear gate_;
  Registry reg_;
};

/// Single encoder plus average-pool/affine head trained with plain CE.
class BaselineNet {
 public:
  BaselineNet(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  std::vector<Tensor> features(const Tensor& images, Mode mode) { return enc_.forward(images, mode); }
  Tensor forward(const Tensor& images, Mode mode);

  const NamedTensors& parameters() const { return reg_.params; }
  const NamedTensors& buffers() const { return reg_.buffers; }
  NamedTensors state() const;

 private:
  ModelConfig cfg_;
  Encoder enc_;
  Linear head_;
  Registry reg_;
};

std::size_t count_elements(const NamedTensors& tensors);

}  // namespace pnd
