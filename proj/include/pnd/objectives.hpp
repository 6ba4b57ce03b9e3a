#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pnd/pnd_net.hpp"

namespace pnd {

enum class Phase { initial, counterfactual };

/// Shortest decimal that reads back as the same float; keeps JSON echoes tidy.
double tidy(float v);

std::string to_string(Phase phase);

/// How counterfactual pairs are classified. `debiased` sends positives and
/// negatives through the debiased head; `split` sends positives through the
/// debiased head and negatives through the bias head.
enum class CfRouting { debiased, split };

struct TrainHyper {
  float alpha = 0.2f;  // weight of L_debias in the current phase
  float beta = 4.0f;   // weight of L_con
  float q = 0.7f;      // GCE exponent
  float tau = 0.1f;    // contrastive temperature
  std::size_t K = 16;  // counterfactual anchors per step
  std::size_t P = 8;   // negatives per anchor
  CfRouting routing = CfRouting::debiased;

  void validate() const;
};

/// Loss terms that can be dropped for ablations. L_cls is always on.
struct LossSwitches {
  bool gate = true;
  bool div = true;
  bool con = true;
};

void to_json(nlohmann::json& j, const TrainHyper& h);
void to_json(nlohmann::json& j, const LossSwitches& s);

struct LossBundle {
  Tensor L_bias, L_debias, L_div, L_con, L_gate, L_total;
  std::vector<std::vector<real>> w;  // [expert][sample]
};

struct CounterfactualBatch {
  std::size_t K = 0;
  std::size_t P = 0;
  std::vector<std::size_t> pos_bias_index;                 // q_j
  std::vector<std::vector<std::size_t>> neg_target_index;  // l_{j,1..P}
};

// Scalar GCE on one probability vector: (1 - p_y^q) / q.
double gce(std::span<const real> probs, int y, real q);
// Relative difficulty ce_b / (ce_d + ce_b); 0.5 when both vanish.
real debias_weight(real ce_d, real ce_b);

// Per-sample GCE of softmax(logits), shape (N,).
Tensor gce_per_sample(const Tensor& logits, std::span<const int> labels, real q);

Tensor loss_bias(const std::vector<Tensor>& y_b_logits, std::span<const int> labels, real q);

struct DebiasResult {
  Tensor loss;
  std::vector<std::vector<real>> w;
};
DebiasResult loss_debias(const std::vector<Tensor>& y_d_logits, const std::vector<Tensor>& y_b_logits,
                         std::span<const int> labels);

inline constexpr real kKlFloor = real(1e-8);
Tensor loss_div(const std::vector<Tensor>& y_b_logits);

CounterfactualBatch build_counterfactuals(std::size_t K, std::size_t P, std::mt19937_64& rng);

// anchor_logits, pos_logits: (K, C); neg_logits[l]: (K, C), row j holding the
// l-th negative of anchor j.
Tensor loss_con(const Tensor& anchor_logits, const Tensor& pos_logits, const std::vector<Tensor>& neg_logits,
                real tau);

Tensor loss_gate(const Tensor& y_mixed, std::span<const int> labels);

// Assembles L_total from the bundle's components; disabled terms are left out.
Tensor total_loss(Phase phase, const LossBundle& b, real alpha, real beta, const LossSwitches& sw = {});

/// Counterfactual contrastive term for one forward pass. The first K samples
/// of the batch are the anchors (the loader shuffles every epoch).
Tensor counterfactual_loss(const PnDNet& net, const PnDForward& fwd, const TrainHyper& h, std::mt19937_64& rng);

/// Every loss term for one batch. L_con is only evaluated in the
/// counterfactual phase with the switch on; otherwise it is a zero scalar.
LossBundle pnd_losses(const PnDNet& net, const PnDForward& fwd, std::span<const int> labels, Phase phase,
                      const TrainHyper& h, const LossSwitches& sw, std::mt19937_64& rng);

}  // namespace pnd
