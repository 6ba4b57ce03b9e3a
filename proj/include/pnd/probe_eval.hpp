#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pnd/bias_forge.hpp"
#include "pnd/predict.hpp"
#include "pnd/trainer.hpp"

namespace pnd {

inline constexpr std::size_t kMinGroupSize = 5;

struct GroupCell {
  std::size_t n = 0;
  std::size_t correct = 0;
  double acc() const { return n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0; }
};

/// cells[target][category] for one attribute.
using GroupGrid = std::array<std::array<GroupCell, kNumCategories>, kNumCategories>;

GroupGrid group_grid(std::span<const int> pred, const Dataset& data, std::size_t attr);

struct AttributeEval {
  std::string name;
  double aligned_acc = 0, conflicting_acc = 0, worst_group_acc = 0;
  std::size_t aligned_n = 0, conflicting_n = 0;
  int worst_target = -1, worst_category = -1;
  // (target, category) cells below the minimum group size.
  std::vector<std::pair<int, int>> excluded_cells;
};

struct EvalReport {
  std::string method;
  std::size_t n = 0;
  double overall_acc = 0;
  std::vector<AttributeEval> attrs;
  std::vector<double> expert_acc;  // empty for the baseline
  std::vector<double> gate_mean;
  std::array<std::array<std::uint64_t, kNumCategories>, kNumCategories> confusion{};  // [target][pred]
};

EvalReport evaluate(const Predictions& pred, const Dataset& data, std::size_t min_group = kMinGroupSize);
EvalReport evaluate(LoadedModel& model, const Dataset& data, std::size_t min_group = kMinGroupSize);

void to_json(nlohmann::json& j, const EvalReport& r);
std::string eval_csv(const EvalReport& r);
/// Per-expert accuracies with mean gate probabilities in parentheses, then the final accuracy.
std::string eval_markdown(const EvalReport& r);

struct ProbeConfig {
  std::size_t epochs = 5;
  float lr = 1e-3f;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
};

struct ProbeReport {
  std::vector<std::string> attributes;  // "digit" first
  std::vector<std::vector<double>> acc;  // [block][attribute]
  std::size_t best_block(std::size_t attribute) const;  // 0-based, ties to the earliest
};

/// Linear probes on frozen, globally pooled block features of a baseline
/// encoder. Attribute "digit" probes the target. The model is not modified.
std::vector<double> depth_probe(LoadedModel& model, const Dataset& train, const Dataset& test,
                                const std::string& attribute, const ProbeConfig& cfg = {});
ProbeReport probe_all(LoadedModel& model, const Dataset& train, const Dataset& test, const ProbeConfig& cfg = {});

std::string probe_csv(const ProbeReport& r);
std::string probe_markdown(const ProbeReport& r);

struct SweepConfig {
  double rho = 0.95;
  std::vector<std::size_t> counts{1, 2, 3, 4, 5, 6, 7};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  DatasetSpec data;  // bias_attributes and rho are overridden per count
  TrainConfig train;
  std::filesystem::path out;
  std::size_t threads = 1;
};

struct SweepRow {
  std::size_t count = 0;
  std::string method;
  std::uint64_t seed = 0;
  double test_acc = 0;
  std::string run_dir;
};

struct SweepPoint {
  std::size_t count = 0;
  std::string method;
  double mean = 0, std = 0;
  std::size_t n = 0;
};

/// Sample mean and (n-1) standard deviation per (count, method); the input order does not matter.
std::vector<SweepPoint> aggregate(const std::vector<SweepRow>& rows);

/// Trains baseline and PnD for every (count, seed) on paired datasets and
/// reports unbiased test accuracy of each best-validation checkpoint.
std::vector<SweepRow> sweep_bias_count(const SweepConfig& cfg);

std::string sweep_csv(const std::vector<SweepPoint>& pts);
std::string sweep_markdown(const std::vector<SweepPoint>& pts);
/// Accuracy vs bias count, one polyline per method.
std::string sweep_svg(const std::vector<SweepPoint>& pts);

/// Threads for parallel jobs: PND_THREADS if set, else `fallback`.
std::size_t worker_threads(std::size_t fallback = 1);

}  // namespace pnd
