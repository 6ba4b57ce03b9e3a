#include "pnd/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>

#include "pnd/errors.hpp"

namespace pnd {

std::string to_string(Phase phase) { return phase == Phase::initial ? "initial" : "counterfactual"; }

void TrainHyper::validate() const {
  if (!(q > 0.0f && q <= 1.0f)) throw SpecError("q must lie in (0, 1]");
  if (!(tau > 0.0f)) throw SpecError("tau must be positive");
  if (!(alpha >= 0.0f)) throw SpecError("alpha must be nonnegative");
  if (!(beta >= 0.0f)) throw SpecError("beta must be nonnegative");
  if (K < 2) throw SpecError("K must be at least 2");
}

double tidy(float v) {
  char buf[32];
  for (int digits = 6; digits < 10; ++digits) {
    std::snprintf(buf, sizeof buf, "%.*g", digits, static_cast<double>(v));
    if (std::strtof(buf, nullptr) == v) break;
  }
  return std::strtod(buf, nullptr);
}

void to_json(nlohmann::json& j, const TrainHyper& h) {
  j = {{"alpha", tidy(h.alpha)}, {"beta", tidy(h.beta)}, {"q", tidy(h.q)}, {"tau", tidy(h.tau)}, {"K", h.K}, {"P", h.P},
       {"routing", h.routing == CfRouting::debiased ? "debiased" : "split"}};
}

void to_json(nlohmann::json& j, const LossSwitches& s) { j = {{"gate", s.gate}, {"div", s.div}, {"con", s.con}}; }

double gce(std::span<const real> probs, int y, real q) {
  if (y < 0 || static_cast<std::size_t>(y) >= probs.size()) throw ShapeError("gce: label out of range");
  if (!(q > 0.0f && q <= 1.0f)) throw ContractError("gce: q must lie in (0, 1]");
  const double p = probs[static_cast<std::size_t>(y)];
  if (p <= 0.0) return 1.0 / q;
  return (1.0 - std::pow(p, static_cast<double>(q))) / q;
}

real debias_weight(real ce_d, real ce_b) {
  const real denom = ce_d + ce_b;
  if (denom <= 0.0f) return 0.5f;
  return ce_b / denom;
}

Tensor gce_per_sample(const Tensor& logits, std::span<const int> labels, real q) {
  // p_y^q = exp(q * log p_y) stays finite for saturated logits.
  Tensor p_q = exp(scale(gather(log_softmax(logits), labels), q));
  return scale(add_scalar(scale(p_q, -1.0f), 1.0f), 1.0f / q);
}

namespace {

Tensor accumulate(const Tensor& total, const Tensor& term) { return total.defined() ? add(total, term) : term; }

Tensor zero() { return Tensor::scalar(0.0f); }

}  // namespace

Tensor loss_bias(const std::vector<Tensor>& y_b_logits, std::span<const int> labels, real q) {
  Tensor total;
  for (const auto& y : y_b_logits) total = accumulate(total, mean(gce_per_sample(y, labels, q)));
  return total.defined() ? total : zero();
}

DebiasResult loss_debias(const std::vector<Tensor>& y_d_logits, const std::vector<Tensor>& y_b_logits,
                         std::span<const int> labels) {
  if (y_d_logits.size() != y_b_logits.size()) throw ShapeError("loss_debias: expert counts differ");
  DebiasResult r;
  Tensor total;
  for (std::size_t i = 0; i < y_d_logits.size(); ++i) {
    Tensor ce_d = cross_entropy(y_d_logits[i], labels);
    // Both CE values enter w through stop-gradients.
    Tensor ce_d_const = detach(ce_d);
    Tensor ce_b = cross_entropy(detach(y_b_logits[i]), labels);
    std::vector<real> w(ce_d.numel());
    for (std::size_t n = 0; n < w.size(); ++n) w[n] = debias_weight(ce_d_const.data()[n], ce_b.data()[n]);
    Tensor wt = Tensor::from({w.size()}, w);
    total = accumulate(total, mean(mul(wt, ce_d)));
    r.w.push_back(std::move(w));
  }
  r.loss = total.defined() ? total : zero();
  return r;
}

Tensor loss_div(const std::vector<Tensor>& y_b_logits) {
  if (y_b_logits.size() < 2) return zero();
  // ln max(p, eps) == max(ln p, ln eps), computed from log-softmax directly.
  const real log_floor = std::log(kKlFloor);
  Tensor total;
  Tensor prev_log = clamp_min(log_softmax(y_b_logits[0]), log_floor);
  for (std::size_t i = 1; i < y_b_logits.size(); ++i) {
    Tensor p = softmax(y_b_logits[i]);
    Tensor lp = clamp_min(log_softmax(y_b_logits[i]), log_floor);
    Tensor kl = sum_rows(mul(p, sub(lp, prev_log)));
    total = accumulate(total, mean(exp(scale(kl, -1.0f))));
    prev_log = lp;
  }
  return total;
}

CounterfactualBatch build_counterfactuals(std::size_t K, std::size_t P, std::mt19937_64& rng) {
  if (K < 2) throw ContractError("build_counterfactuals: K must be at least 2, got " + std::to_string(K));
  P = std::min(P, K - 1);
  CounterfactualBatch cf;
  cf.K = K;
  cf.P = P;
  cf.pos_bias_index.resize(K);
  cf.neg_target_index.resize(K);
  std::vector<std::size_t> others(K - 1);
  for (std::size_t j = 0; j < K; ++j) {
    std::uniform_int_distribution<std::size_t> pick(0, K - 2);
    const std::size_t r = pick(rng);
    cf.pos_bias_index[j] = r < j ? r : r + 1;
    // Partial Fisher-Yates over {0..K-1} \ {j}.
    for (std::size_t t = 0, v = 0; v < K; ++v)
      if (v != j) others[t++] = v;
    for (std::size_t t = 0; t < P; ++t) {
      std::uniform_int_distribution<std::size_t> swap_with(t, K - 2);
      std::swap(others[t], others[swap_with(rng)]);
    }
    cf.neg_target_index[j].assign(others.begin(), others.begin() + static_cast<long>(P));
  }
  return cf;
}

Tensor loss_con(const Tensor& anchor_logits, const Tensor& pos_logits, const std::vector<Tensor>& neg_logits,
                real tau) {
  if (!(tau > 0.0f)) throw ContractError("loss_con: tau must be positive");
  if (neg_logits.empty()) return zero();
  Tensor anchor = softmax(anchor_logits);
  std::vector<Tensor> scores;
  scores.push_back(scale(row_distance(anchor, softmax(pos_logits)), -1.0f / tau));
  for (const auto& neg : neg_logits) scores.push_back(scale(row_distance(anchor, softmax(neg)), -1.0f / tau));
  return scale(mean(column(log_softmax(stack_columns(scores)), 0)), -1.0f);
}

Tensor loss_gate(const Tensor& y_mixed, std::span<const int> labels) { return mean(cross_entropy(y_mixed, labels)); }

Tensor total_loss(Phase phase, const LossBundle& b, real alpha, real beta, const LossSwitches& sw) {
  Tensor total = add(scale(b.L_debias, alpha), b.L_bias);
  if (sw.gate) total = add(total, b.L_gate);
  if (sw.div) total = add(total, b.L_div);
  if (phase == Phase::counterfactual && sw.con) total = add(total, scale(b.L_con, beta));
  return total;
}

Tensor counterfactual_loss(const PnDNet& net, const PnDForward& fwd, const TrainHyper& h, std::mt19937_64& rng) {
  const std::size_t batch = fwd.out.y_mixed.dim(0);
  const std::size_t K = std::min(h.K, batch);
  if (K < 2) return zero();
  const CounterfactualBatch cf = build_counterfactuals(K, h.P, rng);
  std::vector<std::size_t> anchors(K);
  std::iota(anchors.begin(), anchors.end(), std::size_t{0});
  std::vector<std::vector<std::size_t>> neg_cols(cf.P, std::vector<std::size_t>(K));
  for (std::size_t j = 0; j < K; ++j)
    for (std::size_t l = 0; l < cf.P; ++l) neg_cols[l][j] = cf.neg_target_index[j][l];

  Tensor total;
  for (std::size_t i = 0; i < net.config().M; ++i) {
    Tensor e_d = index_rows(fwd.emb.e_d[i], anchors);
    Tensor e_b = index_rows(fwd.emb.e_b[i], anchors);
    Tensor anchor = index_rows(fwd.out.y_d_logits[i], anchors);
    // positive: own target, another sample's bias
    Tensor pos = net.expert_debiased(i, e_d, index_rows(e_b, cf.pos_bias_index));
    // negatives: another sample's target, own bias
    std::vector<Tensor> negs;
    for (const auto& col : neg_cols) {
      Tensor e_d_other = index_rows(e_d, col);
      negs.push_back(h.routing == CfRouting::debiased ? net.expert_debiased(i, e_d_other, e_b)
                                                      : net.expert_bias(i, e_d_other, e_b));
    }
    total = accumulate(total, loss_con(anchor, pos, negs, h.tau));
  }
  return total.defined() ? total : zero();
}

LossBundle pnd_losses(const PnDNet& net, const PnDForward& fwd, std::span<const int> labels, Phase phase,
                      const TrainHyper& h, const LossSwitches& sw, std::mt19937_64& rng) {
  const auto& out = fwd.out;
  LossBundle b;
  b.L_bias = loss_bias(out.y_b_logits, labels, h.q);
  DebiasResult deb = loss_debias(out.y_d_logits, out.y_b_logits, labels);
  b.L_debias = deb.loss;
  b.w = std::move(deb.w);
  b.L_div = loss_div(out.y_b_logits);
  b.L_gate = loss_gate(out.y_mixed, labels);
  b.L_con = (phase == Phase::counterfactual && sw.con) ? counterfactual_loss(net, fwd, h, rng) : zero();
  b.L_total = total_loss(phase, b, h.alpha, h.beta, sw);
  return b;
}

}  // namespace pnd
