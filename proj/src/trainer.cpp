#include "pnd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "pnd/checkpoint.hpp"
#include "pnd/errors.hpp"
#include "pnd/predict.hpp"
#include "pnd/rng.hpp"

namespace pnd {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (total_epochs() == 0) throw SpecError("at least one training epoch is required");
  if (batch_size < 2) throw SpecError("batch_size must be at least 2");
  if (!(lr_initial > 0) || !(lr_counterfactual > 0)) throw SpecError("learning rates must be positive");
  if (!(lr_decay_gamma > 0 && lr_decay_gamma <= 1)) throw SpecError("lr_decay_gamma must lie in (0, 1]");
  if (!(weight_decay >= 0)) throw SpecError("weight_decay must be nonnegative");
  if (!(alpha_counterfactual >= 0)) throw SpecError("alpha_counterfactual must be nonnegative");
  hyper.validate();
  model.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs_initial", c.epochs_initial},
       {"epochs_counterfactual", c.epochs_counterfactual},
       {"batch_size", c.batch_size},
       {"lr_initial", tidy(c.lr_initial)},
       {"lr_counterfactual", tidy(c.lr_counterfactual)},
       {"lr_decay_every", c.lr_decay_every},
       {"lr_decay_gamma", tidy(c.lr_decay_gamma)},
       {"weight_decay", tidy(c.weight_decay)},
       {"seed", c.seed},
       {"alpha_counterfactual", tidy(c.alpha_counterfactual)},
       {"reset_moments_at_phase", c.reset_moments_at_phase},
       {"deterministic", c.deterministic},
       {"hyper", c.hyper},
       {"switches", c.switches},
       {"model", c.model}};
}

namespace {

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& prefix = "") {
  if (!j.contains(key)) throw SpecError("missing required field \"" + prefix + key + "\"");
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw SpecError("field \"" + prefix + key + "\" has the wrong type");
  }
}

template <class T>
void read_optional(const nlohmann::json& j, const char* key, T& out, const std::string& prefix = "") {
  if (j.contains(key)) read_field(j, key, out, prefix);
}

}  // namespace

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw SpecError("train config must be a JSON object");
  static const std::vector<std::string> kKnown{"epochs_initial", "epochs_counterfactual", "batch_size",
                                               "lr_initial", "lr_counterfactual", "lr_decay_every",
                                               "lr_decay_gamma", "weight_decay", "seed", "alpha_counterfactual",
                                               "reset_moments_at_phase", "deterministic", "hyper", "switches",
                                               "model", "$schema", "comment"};
  for (const auto& [k, v] : j.items())
    if (std::find(kKnown.begin(), kKnown.end(), k) == kKnown.end()) throw SpecError("unknown field \"" + k + "\"");
  read_field(j, "epochs_initial", c.epochs_initial);
  read_field(j, "epochs_counterfactual", c.epochs_counterfactual);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "lr_initial", c.lr_initial);
  read_field(j, "lr_counterfactual", c.lr_counterfactual);
  read_field(j, "lr_decay_every", c.lr_decay_every);
  read_field(j, "lr_decay_gamma", c.lr_decay_gamma);
  read_field(j, "weight_decay", c.weight_decay);
  read_field(j, "seed", c.seed);
  read_field(j, "alpha_counterfactual", c.alpha_counterfactual);
  read_optional(j, "reset_moments_at_phase", c.reset_moments_at_phase);
  read_optional(j, "deterministic", c.deterministic);

  if (!j.contains("hyper")) throw SpecError("missing required field \"hyper\"");
  const auto& h = j["hyper"];
  read_field(h, "alpha", c.hyper.alpha, "hyper.");
  read_field(h, "beta", c.hyper.beta, "hyper.");
  read_field(h, "q", c.hyper.q, "hyper.");
  read_field(h, "tau", c.hyper.tau, "hyper.");
  read_field(h, "K", c.hyper.K, "hyper.");
  read_field(h, "P", c.hyper.P, "hyper.");
  std::string routing = "debiased";
  read_optional(h, "routing", routing, "hyper.");
  if (routing == "debiased")
    c.hyper.routing = CfRouting::debiased;
  else if (routing == "split")
    c.hyper.routing = CfRouting::split;
  else
    throw SpecError("field \"hyper.routing\" must be \"debiased\" or \"split\"");

  if (j.contains("switches")) {
    const auto& s = j["switches"];
    read_optional(s, "gate", c.switches.gate, "switches.");
    read_optional(s, "div", c.switches.div, "switches.");
    read_optional(s, "con", c.switches.con, "switches.");
  }
  if (j.contains("model")) c.model = j["model"].get<ModelConfig>();
}

TrainConfig parse_train_config(const nlohmann::json& j) {
  TrainConfig c = j.get<TrainConfig>();
  c.validate();
  return c;
}

Phase phase_at(std::size_t epoch, const TrainConfig& c) {
  return epoch < c.epochs_initial ? Phase::initial : Phase::counterfactual;
}

float lr_at(std::size_t epoch, const TrainConfig& c) {
  const bool first = phase_at(epoch, c) == Phase::initial;
  const float base = first ? c.lr_initial : c.lr_counterfactual;
  const std::size_t in_phase = first ? epoch : epoch - c.epochs_initial;
  if (c.lr_decay_every == 0) return base;
  const auto k = static_cast<float>(in_phase / c.lr_decay_every);
  return base * std::pow(c.lr_decay_gamma, k);
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, {0x0bd3ULL, epoch}));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

namespace {

std::vector<Tensor> param_list(const NamedTensors& named) {
  std::vector<Tensor> out;
  for (const auto& [n, t] : named) out.push_back(t);
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

struct StepLosses {
  double L_bias = 0, L_debias = 0, L_div = 0, L_con = 0, L_gate = 0, L_total = 0;
  bool finite() const {
    return std::isfinite(L_bias) && std::isfinite(L_debias) && std::isfinite(L_div) && std::isfinite(L_con) &&
           std::isfinite(L_gate) && std::isfinite(L_total);
  }
  std::string describe() const {
    return "L_bias=" + fmt(L_bias) + " L_debias=" + fmt(L_debias) + " L_div=" + fmt(L_div) + " L_con=" + fmt(L_con) +
           " L_gate=" + fmt(L_gate) + " L_total=" + fmt(L_total);
  }
};

/// Shared epoch/batch loop; `step` runs one forward/backward and returns the
/// losses plus the number of correct training predictions.
class Runner {
 public:
  Runner(std::string method, const TrainData& data, const TrainConfig& cfg, fs::path run_dir)
      : method_(std::move(method)), data_(data), cfg_(cfg), dir_(std::move(run_dir)) {
    cfg_.validate();
    if (!data_.train || !data_.val) throw ContractError("train: train and val datasets are required");
    if (data_.train->size() < cfg_.batch_size)
      throw SpecError("train split (" + std::to_string(data_.train->size()) + ") smaller than batch_size");
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create run directory " + dir_.string() + ": " + ec.message());
    record_.method = method_;
    record_.run_dir = dir_;
    record_.config = {{"method", method_}, {"train", cfg_}, {"dataset_hash", data_.dataset_hash},
                      {"n_train", data_.train->size()}, {"n_val", data_.val->size()}};
    // Config echo goes out before any work.
    write_text(dir_ / "config.json", record_.config.dump(2) + "\n");
    metrics_.open(dir_ / "metrics.csv");
    steps_.open(dir_ / "steps.csv");
    if (!metrics_ || !steps_) throw IoError("cannot write into " + dir_.string());
    metrics_ << "epoch,phase,lr,L_bias,L_debias,L_div,L_con,L_gate,L_total,train_acc,val_acc\n";
    steps_ << "step,epoch,phase,L_bias,L_debias,L_div,L_con,L_gate,L_total\n";
  }

  template <class Step, class Validate, class State>
  RunRecord run(Adam& opt, Step step, Validate validate, State state, const EpochCallback& on_epoch) {
    std::size_t global_step = 0;
    StepLosses last_finite;
    for (std::size_t epoch = 0; epoch < cfg_.total_epochs(); ++epoch) {
      const Phase phase = phase_at(epoch, cfg_);
      if (phase == Phase::counterfactual && epoch == cfg_.epochs_initial && epoch > 0) {
        record_.handoff_hash_end = tensors_hash(state());
        if (cfg_.reset_moments_at_phase) opt.reset();
        record_.handoff_hash_start = tensors_hash(state());
      }
      const float lr = lr_at(epoch, cfg_);
      const auto order = epoch_order(cfg_.seed, epoch, data_.train->size());
      const std::size_t n_batches = order.size() / cfg_.batch_size;  // drop the ragged tail
      std::mt19937_64 cf_rng(derive_seed(cfg_.seed, {0xcf00ULL, epoch}));
      EpochRow row;
      row.epoch = epoch;
      row.phase = phase;
      row.lr = lr;
      std::size_t correct = 0, seen = 0;
      for (std::size_t b = 0; b < n_batches; ++b, ++global_step) {
        std::span<const std::size_t> idx(order.data() + b * cfg_.batch_size, cfg_.batch_size);
        opt.zero_grad();
        StepLosses L;
        correct += step(idx, phase, cf_rng, L);
        seen += idx.size();
        steps_ << global_step << ',' << epoch << ',' << to_string(phase) << ',' << fmt(L.L_bias) << ','
               << fmt(L.L_debias) << ',' << fmt(L.L_div) << ',' << fmt(L.L_con) << ',' << fmt(L.L_gate) << ','
               << fmt(L.L_total) << '\n';
        if (!L.finite()) {
          steps_.flush();
          throw NumericError("non-finite loss at step " + std::to_string(global_step) + " (epoch " +
                             std::to_string(epoch) + "); last finite losses: " + last_finite.describe());
        }
        last_finite = L;
        opt.step(lr, cfg_.weight_decay);
        row.L_bias += L.L_bias;
        row.L_debias += L.L_debias;
        row.L_div += L.L_div;
        row.L_con += L.L_con;
        row.L_gate += L.L_gate;
        row.L_total += L.L_total;
      }
      opt.zero_grad();
      const double nb = static_cast<double>(std::max<std::size_t>(n_batches, 1));
      row.L_bias /= nb;
      row.L_debias /= nb;
      row.L_div /= nb;
      row.L_con /= nb;
      row.L_gate /= nb;
      row.L_total /= nb;
      row.train_acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
      row.val_acc = validate();
      record_.epochs.push_back(row);
      metrics_ << row.epoch << ',' << to_string(row.phase) << ',' << fmt(row.lr) << ',' << fmt(row.L_bias) << ','
               << fmt(row.L_debias) << ',' << fmt(row.L_div) << ',' << fmt(row.L_con) << ',' << fmt(row.L_gate)
               << ',' << fmt(row.L_total) << ',' << fmt(row.train_acc) << ',' << fmt(row.val_acc) << '\n';
      metrics_.flush();
      steps_.flush();
      if (row.val_acc > record_.best_val_acc) {
        record_.best_val_acc = row.val_acc;
        record_.best_epoch = epoch;
        record_.best_ckpt = dir_ / "ckpt_best";
        save_checkpoint(record_.best_ckpt, state(), meta(epoch, row.val_acc));
      }
      if (on_epoch) on_epoch(row);
    }
    record_.last_ckpt = dir_ / "ckpt_last";
    save_checkpoint(record_.last_ckpt, state(), meta(cfg_.total_epochs() - 1, record_.epochs.back().val_acc));
    return record_;
  }

 private:
  nlohmann::json meta(std::size_t epoch, double val_acc) const {
    return {{"method", method_}, {"model", cfg_.model}, {"epoch", epoch}, {"val_acc", val_acc},
            {"dataset_hash", data_.dataset_hash}, {"seed", cfg_.seed}};
  }

  static void write_text(const fs::path& p, const std::string& s) {
    std::ofstream out(p);
    if (!out) throw IoError("cannot write " + p.string());
    out << s;
  }

  std::string method_;
  TrainData data_;
  TrainConfig cfg_;
  fs::path dir_;
  std::ofstream metrics_, steps_;
  RunRecord record_;
};

std::size_t count_correct(const Tensor& logits, std::span<const int> y) {
  auto pred = argmax_rows(logits);
  std::size_t c = 0;
  for (std::size_t i = 0; i < y.size(); ++i) c += pred[i] == y[i];
  return c;
}

}  // namespace

RunRecord train_pnd(const TrainData& data, const TrainConfig& cfg, const fs::path& run_dir,
                    const EpochCallback& on_epoch) {
  Runner runner("pnd", data, cfg, run_dir);
  PnDNet net(cfg.model, derive_seed(cfg.seed, {0x6d6fULL}));
  Adam opt(param_list(net.parameters()));
  auto step = [&](std::span<const std::size_t> idx, Phase phase, std::mt19937_64& rng, StepLosses& L) {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = make_batch(*data.train, idx);
    const auto y = batch_targets(*data.train, idx);
    PnDForward fwd = net.forward(x, Mode::train);
    TrainHyper h = cfg.hyper;
    if (phase == Phase::counterfactual) h.alpha = cfg.alpha_counterfactual;
    LossBundle b = pnd_losses(net, fwd, y, phase, h, cfg.switches, rng);
    L = {b.L_bias.value(), b.L_debias.value(), b.L_div.value(), b.L_con.value(), b.L_gate.value(),
         b.L_total.value()};
    if (L.finite()) b.L_total.backward();
    return count_correct(fwd.out.y_mixed, y);
  };
  auto validate = [&] { return accuracy(predict(net, *data.val).final_pred, data.val->targets); };
  return runner.run(opt, step, validate, [&] { return net.state(); }, on_epoch);
}

RunRecord train_baseline(const TrainData& data, const TrainConfig& cfg, const fs::path& run_dir,
                         const EpochCallback& on_epoch) {
  Runner runner("baseline", data, cfg, run_dir);
  BaselineNet net(cfg.model, derive_seed(cfg.seed, {0x6d6fULL}));
  Adam opt(param_list(net.parameters()));
  auto step = [&](std::span<const std::size_t> idx, Phase, std::mt19937_64&, StepLosses& L) {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = make_batch(*data.train, idx);
    const auto y = batch_targets(*data.train, idx);
    Tensor logits = net.forward(x, Mode::train);
    Tensor loss = mean(cross_entropy(logits, y));
    L.L_total = loss.value();
    if (L.finite()) loss.backward();
    return count_correct(logits, y);
  };
  auto validate = [&] { return accuracy(predict(net, *data.val).final_pred, data.val->targets); };
  return runner.run(opt, step, validate, [&] { return net.state(); }, on_epoch);
}

}  // namespace pnd
