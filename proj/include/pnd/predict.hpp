#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "pnd/bias_forge.hpp"
#include "pnd/pnd_net.hpp"

namespace pnd {

struct Predictions {
  std::size_t M = 0;                    // experts; 0 for the baseline
  std::vector<int> final_pred;          // from y_mixed (or the baseline head)
  std::vector<std::vector<int>> expert; // [expert][sample], from each y_d_logits
  std::vector<real> gate_p;             // n × M
};

// Eval-mode forward passes without recording.
Predictions predict(PnDNet& net, const Dataset& data, std::size_t batch = 200);
Predictions predict(BaselineNet& net, const Dataset& data, std::size_t batch = 200);

double accuracy(std::span<const int> pred, std::span<const std::uint8_t> targets);

/// A model restored from a checkpoint; exactly one of `pnd` / `baseline` is set.
struct LoadedModel {
  std::string method;
  ModelConfig config;
  nlohmann::json meta;
  std::unique_ptr<PnDNet> pnd;
  std::unique_ptr<BaselineNet> baseline;

  Predictions predict(const Dataset& data, std::size_t batch = 200);
  NamedTensors state() const;
};

/// Checkpoint meta must carry "method" ("pnd" | "baseline") and "model".
LoadedModel load_model(const std::filesystem::path& ckpt);

}  // namespace pnd
