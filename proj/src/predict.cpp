#include "pnd/predict.hpp"

#include <numeric>

#include "pnd/checkpoint.hpp"
#include "pnd/errors.hpp"

namespace pnd {

namespace {

template <class Fn>
void for_batches(const Dataset& data, std::size_t batch, Fn fn) {
  if (batch == 0) throw ContractError("predict: batch must be positive");
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t end = std::min(data.size(), start + batch);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    fn(make_batch(data, idx));
  }
}

}  // namespace

Predictions predict(PnDNet& net, const Dataset& data, std::size_t batch) {
  NoGradScope no_grad;
  Predictions p;
  p.M = net.config().M;
  p.expert.resize(p.M);
  for_batches(data, batch, [&](const Tensor& x) {
    PnDForward f = net.forward(x, Mode::eval);
    auto fin = argmax_rows(f.out.y_mixed);
    p.final_pred.insert(p.final_pred.end(), fin.begin(), fin.end());
    for (std::size_t i = 0; i < p.M; ++i) {
      auto e = argmax_rows(f.out.y_d_logits[i]);
      p.expert[i].insert(p.expert[i].end(), e.begin(), e.end());
    }
    auto g = f.out.gate_p.data();
    p.gate_p.insert(p.gate_p.end(), g.begin(), g.end());
  });
  return p;
}

Predictions predict(BaselineNet& net, const Dataset& data, std::size_t batch) {
  NoGradScope no_grad;
  Predictions p;
  for_batches(data, batch, [&](const Tensor& x) {
    auto fin = argmax_rows(net.forward(x, Mode::eval));
    p.final_pred.insert(p.final_pred.end(), fin.begin(), fin.end());
  });
  return p;
}

double accuracy(std::span<const int> pred, std::span<const std::uint8_t> targets) {
  if (pred.size() != targets.size()) throw ShapeError("accuracy: size mismatch");
  if (pred.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == targets[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

Predictions LoadedModel::predict(const Dataset& data, std::size_t batch) {
  return pnd ? pnd::predict(*pnd, data, batch) : pnd::predict(*baseline, data, batch);
}

NamedTensors LoadedModel::state() const { return pnd ? pnd->state() : baseline->state(); }

LoadedModel load_model(const std::filesystem::path& ckpt) {
  Checkpoint c = load_checkpoint(ckpt);
  LoadedModel m;
  m.meta = c.meta;
  if (!c.meta.contains("method") || !c.meta.contains("model"))
    throw FormatError(ckpt.string() + ": checkpoint meta lacks method/model");
  m.method = c.meta["method"].get<std::string>();
  m.config = c.meta["model"].get<ModelConfig>();
  NamedTensors dst;
  if (m.method == "pnd") {
    m.pnd = std::make_unique<PnDNet>(m.config, 0);
    dst = m.pnd->state();
  } else if (m.method == "baseline") {
    m.baseline = std::make_unique<BaselineNet>(m.config, 0);
    dst = m.baseline->state();
  } else {
    throw FormatError(ckpt.string() + ": unknown method \"" + m.method + "\"");
  }
  assign_tensors(c.tensors, dst);
  return m;
}

}  // namespace pnd
