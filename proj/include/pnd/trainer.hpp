#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pnd/bias_forge.hpp"
#include "pnd/objectives.hpp"
#include "pnd/optim.hpp"
#include "pnd/pnd_net.hpp"

namespace pnd {

struct TrainConfig {
  std::size_t epochs_initial = 10;
  std::size_t epochs_counterfactual = 15;
  std::size_t batch_size = 128;
  float lr_initial = 1e-3f;
  float lr_counterfactual = 5e-4f;
  std::size_t lr_decay_every = 5;  // 0 disables decay
  float lr_decay_gamma = 0.5f;
  float weight_decay = 1e-5f;
  std::uint64_t seed = 0;
  TrainHyper hyper;                 // hyper.alpha is the initial-phase alpha
  float alpha_counterfactual = 2.0f;
  LossSwitches switches;
  // Fresh Adam moments when the counterfactual phase starts.
  bool reset_moments_at_phase = true;
  bool deterministic = true;
  ModelConfig model;

  void validate() const;
  std::size_t total_epochs() const { return epochs_initial + epochs_counterfactual; }
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Every field is required; a missing or mistyped field raises SpecError naming it.
void from_json(const nlohmann::json& j, TrainConfig& c);
TrainConfig parse_train_config(const nlohmann::json& j);

Phase phase_at(std::size_t epoch, const TrainConfig& c);
/// base_lr(phase) × gamma^floor(epoch_in_phase / decay_every).
float lr_at(std::size_t epoch, const TrainConfig& c);

struct EpochRow {
  std::size_t epoch = 0;
  Phase phase = Phase::initial;
  double lr = 0;
  double L_bias = 0, L_debias = 0, L_div = 0, L_con = 0, L_gate = 0, L_total = 0;
  double train_acc = 0;
  double val_acc = 0;
};

struct RunRecord {
  std::string method;
  nlohmann::json config;
  std::vector<EpochRow> epochs;
  std::size_t best_epoch = 0;
  double best_val_acc = -1;
  std::filesystem::path run_dir, best_ckpt, last_ckpt;
  // tensors_hash of the model at the end of the initial phase and at the start
  // of the counterfactual phase (0 when either phase is empty).
  std::uint64_t handoff_hash_end = 0, handoff_hash_start = 0;
};

struct TrainData {
  const Dataset* train = nullptr;
  const Dataset* val = nullptr;
  std::string dataset_hash;  // echoed into config.json and checkpoints
};

using EpochCallback = std::function<void(const EpochRow&)>;

/// Writes config.json, metrics.csv, steps.csv, ckpt_best.{json,bin} and
/// ckpt_last.{json,bin} into `run_dir`. A non-finite loss aborts with
/// NumericError naming the step and the last finite losses.
RunRecord train_pnd(const TrainData& data, const TrainConfig& cfg, const std::filesystem::path& run_dir,
                    const EpochCallback& on_epoch = {});
/// Single encoder + affine head with plain CE under the same schedule.
RunRecord train_baseline(const TrainData& data, const TrainConfig& cfg, const std::filesystem::path& run_dir,
                         const EpochCallback& on_epoch = {});

/// Sample order for one epoch; a pure function of (seed, epoch, n).
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n);

}  // namespace pnd
