#include "pnd/pnd_net.hpp"

#include "pnd/errors.hpp"
#include "pnd/rng.hpp"

namespace pnd {

void ModelConfig::validate() const {
  if (M < 1) throw SpecError("model: M must be at least 1");
  if (block_channels.size() != M) {
    throw SpecError("model: block_channels has " + std::to_string(block_channels.size()) + " entries, M is " +
                    std::to_string(M));
  }
  for (auto c : block_channels)
    if (c == 0) throw SpecError("model: block_channels entries must be positive");
  if (expert_embed_dim == 0 || expert_mid_channels == 0 || head_hidden == 0 || n_classes < 2 || units_per_block == 0) {
    throw SpecError("model: widths must be positive and n_classes at least 2");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"M", c.M},
       {"block_channels", c.block_channels},
       {"units_per_block", c.units_per_block},
       {"expert_embed_dim", c.expert_embed_dim},
       {"expert_mid_channels", c.expert_mid_channels},
       {"head_hidden", c.head_hidden},
       {"n_classes", c.n_classes},
       {"shared_expert_trunk", c.shared_expert_trunk}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.M = j.value("M", d.M);
  c.block_channels = j.value("block_channels", d.block_channels);
  c.units_per_block = j.value("units_per_block", d.units_per_block);
  c.expert_embed_dim = j.value("expert_embed_dim", d.expert_embed_dim);
  c.expert_mid_channels = j.value("expert_mid_channels", d.expert_mid_channels);
  c.head_hidden = j.value("head_hidden", d.head_hidden);
  c.n_classes = j.value("n_classes", d.n_classes);
  c.shared_expert_trunk = j.value("shared_expert_trunk", d.shared_expert_trunk);
}

ExpertTrunk::ExpertTrunk(std::size_t in, std::size_t mid, std::size_t embed, Rng& rng)
    : conv1(in, mid, 3, 1, 1, rng), conv2(mid, embed, 3, 1, 1, rng), bn1(mid), bn2(embed) {}

Tensor ExpertTrunk::forward(const Tensor& z, Mode mode) {
  Tensor h = relu(bn1.forward(conv1.forward(z), mode));
  h = relu(bn2.forward(conv2.forward(h), mode));
  return global_avg_pool(h);
}

void ExpertTrunk::register_into(const std::string& prefix, Registry& reg) const {
  conv1.register_into(prefix + ".conv1", reg);
  bn1.register_into(prefix + ".bn1", reg);
  conv2.register_into(prefix + ".conv2", reg);
  bn2.register_into(prefix + ".bn2", reg);
}

ExpertHead::ExpertHead(std::size_t in, std::size_t hidden, std::size_t classes, Rng& rng)
    : fc1(in, hidden, rng), fc2(hidden, classes, rng) {}

void ExpertHead::register_into(const std::string& prefix, Registry& reg) const {
  fc1.register_into(prefix + ".fc1", reg);
  fc2.register_into(prefix + ".fc2", reg);
}

Expert::Expert(std::size_t in_channels, const ModelConfig& cfg, Rng& rng)
    : embed_(cfg.expert_embed_dim),
      shared_(cfg.shared_expert_trunk),
      trunk_d_(in_channels, cfg.expert_mid_channels, cfg.expert_embed_dim, rng),
      head_d_(2 * cfg.expert_embed_dim, cfg.head_hidden, cfg.n_classes, rng),
      head_b_(2 * cfg.expert_embed_dim, cfg.head_hidden, cfg.n_classes, rng) {
  if (!shared_) trunk_b_.emplace(in_channels, cfg.expert_mid_channels, cfg.expert_embed_dim, rng);
}

ExpertResult Expert::forward(const Tensor& z_d, const Tensor& z_b, Mode mode) {
  if (z_d.shape() != z_b.shape()) {
    throw ShapeError("expert: z_d " + shape_str(z_d.shape()) + " and z_b " + shape_str(z_b.shape()) + " differ");
  }
  ExpertResult r;
  r.e_d = trunk_d_.forward(z_d, mode);
  r.e_b = shared_ ? trunk_d_.forward(z_b, mode) : trunk_b_->forward(z_b, mode);
  r.y_d_logits = debiased_logits(r.e_d, r.e_b);
  r.y_b_logits = bias_logits(r.e_d, r.e_b);
  return r;
}

namespace {
void check_embedding(const Tensor& e, std::size_t width, const char* which) {
  if (e.rank() != 2 || e.dim(1) != width) {
    throw ShapeError(std::string("expert swap: ") + which + " embedding has shape " + shape_str(e.shape()) +
                     ", expected (batch, " + std::to_string(width) + ")");
  }
}
}  // namespace

Tensor Expert::debiased_logits(const Tensor& e_d, const Tensor& e_b) const {
  check_embedding(e_d, embed_, "e_d");
  check_embedding(e_b, embed_, "e_b");
  return head_d_.forward(concat({e_d, detach(e_b)}, 1));
}

Tensor Expert::bias_logits(const Tensor& e_d, const Tensor& e_b) const {
  check_embedding(e_d, embed_, "e_d");
  check_embedding(e_b, embed_, "e_b");
  return head_b_.forward(concat({detach(e_d), e_b}, 1));
}

void Expert::register_into(const std::string& prefix, Registry& reg) const {
  trunk_d_.register_into(prefix + ".trunk_d", reg);
  if (trunk_b_) trunk_b_->register_into(prefix + ".trunk_b", reg);
  head_d_.register_into(prefix + ".head_d", reg);
  head_b_.register_into(prefix + ".head_b", reg);
}

namespace {
Rng component_rng(std::uint64_t seed, std::uint64_t tag) { return Rng(derive_seed(seed, {0x9a11, tag})); }
}  // namespace

PnDNet::PnDNet(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_((cfg.validate(), cfg)),
      enc_d_([&] {
        Rng r = component_rng(seed, 1);
        return Encoder(cfg.block_channels, cfg.units_per_block, r);
      }()),
      enc_b_([&] {
        Rng r = component_rng(seed, 2);
        return Encoder(cfg.block_channels, cfg.units_per_block, r);
      }()),
      gate_([&] {
        Rng r = component_rng(seed, 3);
        return Linear(cfg.M * cfg.n_classes, cfg.M, r);
      }()) {
  for (std::size_t i = 0; i < cfg.M; ++i) {
    Rng r = component_rng(seed, 100 + i);
    experts_.emplace_back(cfg.block_channels[i], cfg, r);
  }
  enc_d_.register_into("encoder_d", reg_);
  enc_b_.register_into("encoder_b", reg_);
  for (std::size_t i = 0; i < cfg.M; ++i) experts_[i].register_into("expert" + std::to_string(i + 1), reg_);
  gate_.register_into("gate", reg_);
}

FeatureSet PnDNet::encode(const Tensor& images, Mode mode) {
  return FeatureSet{enc_d_.forward(images, mode), enc_b_.forward(images, mode)};
}

ExpertResult PnDNet::expert_forward(std::size_t i, const Tensor& z_d, const Tensor& z_b, Mode mode) {
  return experts_.at(i).forward(z_d, z_b, mode);
}

ExpertResult PnDNet::expert_swap(std::size_t i, const Tensor& e_d, const Tensor& e_b) const {
  ExpertResult r;
  r.e_d = e_d;
  r.e_b = e_b;
  r.y_d_logits = experts_.at(i).debiased_logits(e_d, e_b);
  r.y_b_logits = experts_.at(i).bias_logits(e_d, e_b);
  return r;
}

Tensor PnDNet::expert_debiased(std::size_t i, const Tensor& e_d, const Tensor& e_b) const {
  return experts_.at(i).debiased_logits(e_d, e_b);
}

Tensor PnDNet::expert_bias(std::size_t i, const Tensor& e_d, const Tensor& e_b) const {
  return experts_.at(i).bias_logits(e_d, e_b);
}

GateResult PnDNet::gate_mix(const std::vector<Tensor>& y_d_logits) const {
  if (y_d_logits.size() != cfg_.M) throw ShapeError("gate_mix: expected " + std::to_string(cfg_.M) + " logit tensors");
  std::vector<Tensor> inputs;
  for (const auto& y : y_d_logits) {
    if (y.shape() != y_d_logits.front().shape()) {
      throw ShapeError("gate_mix: logits " + shape_str(y_d_logits.front().shape()) + " and " + shape_str(y.shape()) +
                       " differ");
    }
    inputs.push_back(detach(y));
  }
  GateResult r;
  r.gate_p = softmax(gate_.forward(concat(inputs, 1)));
  Tensor mixed;
  for (std::size_t i = 0; i < cfg_.M; ++i) {
    Tensor term = scale_rows(y_d_logits[i], column(r.gate_p, i));
    mixed = mixed.defined() ? add(mixed, term) : term;
  }
  r.y_mixed = mixed;
  return r;
}

PnDForward PnDNet::forward(const Tensor& images, Mode mode) {
  FeatureSet z = encode(images, mode);
  PnDForward f;
  for (std::size_t i = 0; i < cfg_.M; ++i) {
    ExpertResult r = expert_forward(i, z.z_d[i], z.z_b[i], mode);
    f.out.y_d_logits.push_back(r.y_d_logits);
    f.out.y_b_logits.push_back(r.y_b_logits);
    f.emb.e_d.push_back(r.e_d);
    f.emb.e_b.push_back(r.e_b);
  }
  GateResult g = gate_mix(f.out.y_d_logits);
  f.out.gate_p = g.gate_p;
  f.out.y_mixed = g.y_mixed;
  return f;
}

NamedTensors PnDNet::state() const {
  NamedTensors all = reg_.params;
  all.insert(all.end(), reg_.buffers.begin(), reg_.buffers.end());
  return all;
}

std::map<std::string, std::size_t> PnDNet::census() const {
  std::map<std::string, std::size_t> counts;
  for (const auto& [name, t] : reg_.params) counts[name.substr(0, name.find('.'))] += t.numel();
  return counts;
}

BaselineNet::BaselineNet(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_((cfg.validate(), cfg)),
      enc_([&] {
        Rng r = component_rng(seed, 1);
        return Encoder(cfg.block_channels, cfg.units_per_block, r);
      }()),
      head_([&] {
        Rng r = component_rng(seed, 4);
        return Linear(cfg.block_channels.back(), cfg.n_classes, r);
      }()) {
  enc_.register_into("encoder", reg_);
  head_.register_into("head", reg_);
}

Tensor BaselineNet::forward(const Tensor& images, Mode mode) {
  auto maps = enc_.forward(images, mode);
  return head_.forward(global_avg_pool(maps.back()));
}

NamedTensors BaselineNet::state() const {
  NamedTensors all = reg_.params;
  all.insert(all.end(), reg_.buffers.begin(), reg_.buffers.end());
  return all;
}

std::size_t count_elements(const NamedTensors& tensors) {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.numel();
  return n;
}

}  // namespace pnd
