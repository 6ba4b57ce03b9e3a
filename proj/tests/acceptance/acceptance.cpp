// Acceptance runner: one PASS/FAIL line per criterion.
//
//   pnd_acceptance --criteria 1,2,3,8 --cli <pnd binary> --work <dir>
//   pnd_acceptance --criteria 4,5,6,7 --trend-config configs/acceptance.json --work <dir>
//
// Exit status is 0 only when every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "oracle/scalar_oracle.hpp"
#include "pnd/bias_forge.hpp"
#include "pnd/checkpoint.hpp"
#include "pnd/gradcheck.hpp"
#include "pnd/objectives.hpp"
#include "pnd/ops.hpp"
#include "pnd/pnd_net.hpp"
#include "pnd/predict.hpp"
#include "pnd/probe_eval.hpp"
#include "pnd/rng.hpp"
#include "pnd/trainer.hpp"
#include "sampler_stats.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pnd;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-12); }

Tensor uniform(Shape shape, std::mt19937_64& rng, real lo, real hi, bool grad = true) {
  std::uniform_real_distribution<real> d(lo, hi);
  std::vector<real> v(numel_of(shape));
  for (auto& x : v) x = d(rng);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

// Entries in [0.05, 1] with random sign, so relu/clamp kinks stay outside the stencil.
Tensor away_from_zero(Shape shape, std::mt19937_64& rng, real margin = 0.05f) {
  std::uniform_real_distribution<real> mag(margin, 1.0f);
  std::bernoulli_distribution sign(0.5);
  std::vector<real> v(numel_of(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

oracle::Mat to_mat(const Tensor& t) {
  oracle::Mat m(t.dim(0), oracle::Row(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.data()[i * t.dim(1) + j];
  return m;
}

std::vector<oracle::Mat> to_mats(const std::vector<Tensor>& ts) {
  std::vector<oracle::Mat> out;
  for (const auto& t : ts) out.push_back(to_mat(t));
  return out;
}

// ------------------------------------------------------------ 1. oracle equivalence

Outcome criterion_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  constexpr std::size_t M = 4, C = 10, P = 8;
  double worst = 0.0;
  std::string worst_term;
  auto track = [&](const char* term, double got, double want) {
    const double e = rel(got, want);
    if (e > worst) {
      worst = e;
      worst_term = term;
    }
  };
  for (int b = 0; b < 100; ++b) {
    const std::size_t N = 2 + rng() % 15;
    std::vector<Tensor> y_d, y_b, negs;
    for (std::size_t i = 0; i < M; ++i) {
      y_d.push_back(uniform({N, C}, rng, -4, 4));
      y_b.push_back(uniform({N, C}, rng, -4, 4));
    }
    for (std::size_t p = 0; p < P; ++p) negs.push_back(uniform({N, C}, rng, -4, 4));
    Tensor pos = uniform({N, C}, rng, -4, 4), mixed = uniform({N, C}, rng, -4, 4);
    std::vector<int> y(N);
    for (auto& v : y) v = static_cast<int>(rng() % C);

    LossBundle lb;
    lb.L_bias = loss_bias(y_b, y, 0.7f);
    lb.L_debias = loss_debias(y_d, y_b, y).loss;
    lb.L_div = loss_div(y_b);
    lb.L_con = loss_con(y_d[0], pos, negs, 0.1f);
    lb.L_gate = loss_gate(mixed, y);
    const auto od = to_mats(y_d), ob = to_mats(y_b);
    const double o_bias = oracle::loss_bias(ob, y, 0.7);
    const double o_debias = oracle::loss_debias(od, ob, y);
    const double o_div = oracle::loss_div(ob);
    const double o_con = oracle::loss_con(od[0], to_mat(pos), to_mats(negs), 0.1);
    const double o_gate = oracle::loss_gate(to_mat(mixed), y);
    track("GCE", lb.L_bias.value(), o_bias);
    track("weighted CE", lb.L_debias.value(), o_debias);
    track("diversity", lb.L_div.value(), o_div);
    track("contrastive", lb.L_con.value(), o_con);
    track("gate", lb.L_gate.value(), o_gate);
    track("total (initial)", total_loss(Phase::initial, lb, 0.2f, 4.0f).value(),
          oracle::total(false, o_bias, o_debias, o_div, o_con, o_gate, 0.2, 4.0));
    track("total (counterfactual)", total_loss(Phase::counterfactual, lb, 2.0f, 4.0f).value(),
          oracle::total(true, o_bias, o_debias, o_div, o_con, o_gate, 2.0, 4.0));
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = worst <= 1e-4 && secs < 10.0;
  o.detail = "100 micro-batches (M=4, C=10), worst relative error " + fmt("%.2e", worst) + " (" +
             (worst_term.empty() ? std::string("-") : worst_term) + "), " + fmt("%.2f", secs) + " s";
  return o;
}

// ------------------------------------------------------------ 2. gradient suite

Outcome criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  // Operator inputs avoid kinks, so they take the central-difference step that
  // balances truncation against rounding, cbrt(machine epsilon). The model
  // check crosses many relu/max-pool kinks and keeps the smaller step.
  const real op_step = std::cbrt(std::numeric_limits<real>::epsilon());
  const real step = 1e-3f;
  double worst_op = 0.0;
  std::string worst_name;
  std::mt19937_64 rng(77);

  auto check = [&](const std::string& name, Shape shape, const std::function<Tensor(const Tensor&)>& op,
                   bool avoid_kinks = false, real lo = -1, real hi = 1) {
    for (int trial = 0; trial < 3; ++trial) {
      Tensor x = avoid_kinks ? away_from_zero(shape, rng) : uniform(shape, rng, lo, hi);
      Tensor probe;
      {
        NoGradScope ng;
        probe = op(x);
      }
      Tensor r = away_from_zero(probe.shape(), rng, 0.5f);
      r.set_requires_grad(false);
      const double e = finite_difference_check(
          [&](const Tensor& v) { return probe.rank() == 0 ? mul(op(v), r) : sum(mul(op(v), r)); }, x, op_step);
      if (e > worst_op) {
        worst_op = e;
        worst_name = name;
      }
    }
  };
  const std::vector<int> labels{1, 0, 3};
  const std::vector<std::size_t> rows{2, 0, 2, 1};
  Tensor other = uniform({3, 4}, rng, -1, 1, false);
  Tensor s3 = uniform({3}, rng, -1, 1, false);
  check("add", {3, 4}, [&](const Tensor& x) { return add(x, other); });
  check("sub", {3, 4}, [&](const Tensor& x) { return sub(other, x); });
  check("mul", {3, 4}, [&](const Tensor& x) { return mul(x, other); });
  check("scale", {3, 4}, [](const Tensor& x) { return scale(x, -1.7f); });
  check("exp", {3, 4}, [](const Tensor& x) { return exp(x); });
  check("log", {3, 4}, [](const Tensor& x) { return log(x); }, false, 0.5f, 2.0f);
  check("pow", {3, 4}, [](const Tensor& x) { return pow(x, 0.7f); }, false, 0.5f, 2.0f);
  check("relu", {3, 4}, [](const Tensor& x) { return relu(x); }, true);
  check("clamp_min", {3, 4}, [](const Tensor& x) { return clamp_min(x, 0.0f); }, true);
  check("sum", {3, 4}, [](const Tensor& x) { return sum(x); });
  check("mean", {3, 4}, [](const Tensor& x) { return mean(x); });
  check("sum_rows", {3, 4}, [](const Tensor& x) { return sum_rows(x); });
  check("reshape", {3, 4}, [](const Tensor& x) { return reshape(x, {2, 6}); });
  check("concat", {3, 4}, [](const Tensor& x) { return concat({x, scale(x, 2.0f)}, 1); });
  check("index_rows", {3, 4}, [&](const Tensor& x) { return index_rows(x, rows); });
  check("gather", {3, 4}, [&](const Tensor& x) { return gather(x, labels); });
  check("scale_rows", {3, 4}, [&](const Tensor& x) { return scale_rows(x, s3); });
  check("softmax", {3, 4}, [](const Tensor& x) { return softmax(x); }, false, -2, 2);
  check("log_softmax", {3, 4}, [](const Tensor& x) { return log_softmax(x); }, false, -2, 2);
  check("cross_entropy", {3, 4}, [&](const Tensor& x) { return cross_entropy(x, labels); }, false, -2, 2);
  check("row_distance", {3, 4}, [&](const Tensor& x) { return row_distance(x, other); });
  Tensor w = uniform({4, 5}, rng, -1, 1, false), b = uniform({4}, rng, -1, 1, false);
  check("linear", {3, 5}, [&](const Tensor& x) { return linear(x, w, b); });
  Tensor cw = uniform({3, 2, 3, 3}, rng, -1, 1, false);
  check("conv2d", {2, 2, 5, 5}, [&](const Tensor& x) { return conv2d(x, cw, 2, 1); });
  Tensor gamma = uniform({2}, rng, 0.5f, 1.5f, false), beta = uniform({2}, rng, -1, 1, false);
  BatchNormStats stats{Tensor::zeros({2}), Tensor::full({2}, 1.0f)};
  check("batch_norm2d", {3, 2, 2, 2}, [&](const Tensor& x) { return batch_norm2d(x, gamma, beta, stats, true); });
  check("max_pool2d", {1, 2, 5, 5}, [](const Tensor& x) { return max_pool2d(x, 3, 2, 1); });
  check("global_avg_pool", {2, 3, 4, 4}, [](const Tensor& x) { return global_avg_pool(x); });
  std::vector<int> y5{1, 4, 7, 2, 9};
  Tensor fixed = uniform({5, 10}, rng, -2, 2, false), neg = uniform({5, 10}, rng, -2, 2, false);
  check("gce", {5, 10}, [&](const Tensor& x) { return mean(gce_per_sample(x, y5, 0.7f)); }, false, -2, 2);
  check("loss_div", {5, 10}, [&](const Tensor& x) { return loss_div({fixed, x}); }, false, -2, 2);
  check("loss_con", {5, 10}, [&](const Tensor& x) { return loss_con(x, fixed, {neg}, 1.0f); }, false, -2, 2);
  check("loss_gate", {5, 10}, [&](const Tensor& x) { return loss_gate(x, y5); }, false, -2, 2);

  // Full initial-phase loss on a micro-model.
  ModelConfig mc;
  mc.M = 2;
  mc.block_channels = {4, 6};
  mc.units_per_block = 1;
  mc.expert_embed_dim = 4;
  mc.expert_mid_channels = 3;
  mc.head_hidden = 5;
  PnDNet net(mc, 18);
  Tensor x = uniform({4, 3, 32, 32}, rng, 0, 1, false);
  const std::vector<int> y{3, 3, 8, 0};
  std::vector<Tensor> params;
  for (const auto& [n, t] : net.parameters()) params.push_back(t);
  auto full_loss = [&] {
    std::mt19937_64 cf(0);
    PnDForward f = net.forward(x, Mode::train);
    return pnd_losses(net, f, y, Phase::initial, TrainHyper{}, LossSwitches{}, cf).L_total;
  };
  const GradCheckResult full = finite_difference_check(full_loss, params, step);

  // Zero-sensitivity contracts: FD through each stop-gradient must be exactly 0.
  auto with_prefix = [&](const std::string& p) {
    std::vector<Tensor> out;
    for (const auto& [n, t] : net.parameters())
      if (n.rfind(p, 0) == 0) out.push_back(t);
    return out;
  };
  auto zero = [](const GradCheckResult& g) {
    return g.coordinates_checked > 0 && g.analytic == 0.0 && g.numeric == 0.0 && g.overall_rel_error == 0.0;
  };
  const bool through_w = zero(finite_difference_check(
      [&] {
        PnDForward f = net.forward(x, Mode::train);
        return loss_debias(f.out.y_d_logits, f.out.y_b_logits, y).loss;
      },
      with_prefix("encoder_b."), step));
  const bool through_partner = zero(finite_difference_check(
      [&] { return loss_bias(net.forward(x, Mode::train).out.y_b_logits, y, 0.7f); }, with_prefix("encoder_d."),
      step));
  Tensor r = uniform({4, 2}, rng, -1, 1, false);
  const bool through_gate = zero(finite_difference_check(
      [&] { return sum(mul(net.forward(x, Mode::train).out.gate_p, r)); }, with_prefix("expert2.head_d"), step));

  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = worst_op <= 1e-3 && full.overall_rel_error <= 1e-2 && through_w && through_partner && through_gate &&
           secs < 120.0;
  o.detail = "worst operator " + worst_name + " " + fmt("%.2e", worst_op) + "; phase-1 loss " +
             fmt("%.2e", full.overall_rel_error) + " (" + std::to_string(full.coordinates_checked) + " coords, " +
             std::to_string(full.coordinates_skipped) + " kinks skipped); zero-sensitivity w/partner/gate " +
             (through_w ? "ok" : "VIOLATED") + "/" + (through_partner ? "ok" : "VIOLATED") + "/" +
             (through_gate ? "ok" : "VIOLATED") + ", " + fmt("%.1f", secs) + " s";
  return o;
}

// ------------------------------------------------------------ 3. sampler statistics

Outcome criterion_sampler() {
  const auto t0 = std::chrono::steady_clock::now();
  constexpr std::size_t kDraws = 100000;
  DatasetSpec spec;
  spec.bias_attributes = first_attributes(7);
  spec.rho = 0.95;
  std::vector<int> y;
  const auto train = testing::draw_attributes(spec, kDraws, false, y, 31);
  const auto a_train = testing::alignment(train, y, spec.rho);
  const auto ind = testing::independence(train, y);
  std::vector<int> yt;
  const auto test = testing::draw_attributes(spec, kDraws, true, yt, 32);
  const auto a_test = testing::alignment(test, yt, 0.1);

  double dev_train = 0.0, dev_test = 0.0;
  for (double f : a_train.aligned_fraction) dev_train = std::max(dev_train, std::abs(f - spec.rho) / a_train.binomial_se);
  for (double f : a_test.aligned_fraction) dev_test = std::max(dev_test, std::abs(f - 0.1) / a_test.binomial_se);
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = dev_train <= 3.0 && dev_test <= 3.0 && ind.pooled_statistic < ind.pooled_quantile_999 &&
           ind.max_statistic < ind.max_quantile_999 && secs < 60.0;
  o.detail = "100k draws: train max |dev| " + fmt("%.2f", dev_train) + " SE, test max |dev| " + fmt("%.2f", dev_test) +
             " SE; chi-square pooled " + fmt("%.1f", ind.pooled_statistic) + " < " +
             fmt("%.1f", ind.pooled_quantile_999) + ", worst pair " + fmt("%.1f", ind.max_statistic) + " < " +
             fmt("%.1f", ind.max_quantile_999) + ", " + fmt("%.1f", secs) + " s";
  return o;
}

// ------------------------------------------------------------ 8. reproducibility

std::map<std::string, std::string> hash_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = hex64(file_hash(e.path()));
  return out;
}

Outcome criterion_reproducibility(const fs::path& cli, const fs::path& work) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainConfig tc;
  tc.epochs_initial = 1;
  tc.epochs_counterfactual = 1;
  tc.batch_size = 20;
  tc.model.block_channels = {4, 4, 8, 8};
  tc.model.units_per_block = 1;
  tc.model.expert_embed_dim = 8;
  tc.model.expert_mid_channels = 4;
  const std::string cfg = json(tc).dump(2);

  // Relative paths inside one directory, so both passes see identical arguments.
  const std::vector<std::string> commands = {
      "synth --biases 3 --rho 0.95 --train 200 --val 60 --test 100 --size 32 --seed 4 --out data",
      "train --data data --config cfg.json --method pnd --seed 4 --out run_pnd",
      "train --data data --config cfg.json --method baseline --seed 4 --out run_base",
      "eval --model run_pnd/ckpt_best --data data --out eval",
      "probe --model run_base/ckpt_best --data data --epochs 1 --seed 4 --out probe",
      "sweep --rho 0.95 --counts 1 2 --seeds 0 1 --config cfg.json --train 100 --val 40 --test 60 --size 32 --out sweep",
      "report --runs run_pnd --format csv --out report_csv",
      "report --runs sweep --format md --out report_md",
      "report --runs sweep --format svg --out report_svg",
  };
  std::vector<std::map<std::string, std::string>> trees;
  std::string failure;
  for (int pass = 0; pass < 2 && failure.empty(); ++pass) {
    const fs::path dir = work / "repro";
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "cfg.json") << cfg;
    for (const auto& c : commands) {
      const std::string line = "cd \"" + dir.string() + "\" && \"" + cli.string() + "\" " + c + " > /dev/null 2>&1";
      if (std::system(line.c_str()) != 0) {
        failure = "command failed: pnd " + c;
        break;
      }
    }
    trees.push_back(hash_tree(dir));
  }
  Outcome o;
  if (!failure.empty()) {
    o.detail = failure;
    return o;
  }
  std::size_t differing = 0;
  std::string first;
  for (const auto& [name, h] : trees[0]) {
    auto it = trees[1].find(name);
    if (it == trees[1].end() || it->second != h) {
      ++differing;
      if (first.empty()) first = name;
    }
  }
  differing += trees[1].size() > trees[0].size() ? trees[1].size() - trees[0].size() : 0;
  o.pass = differing == 0 && !trees[0].empty();
  o.detail = std::to_string(commands.size()) + " commands run twice, " + std::to_string(trees[0].size()) +
             " output files compared, " + std::to_string(differing) + " differ" +
             (first.empty() ? "" : " (first: " + first + ")") + ", " + fmt("%.1f", seconds_since(t0)) + " s";
  return o;
}

// ------------------------------------------------------------ 4-7. trends

struct TrendConfig {
  DatasetSpec data;  // bias_attributes / rho / seed are set per experiment
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::size_t> counts{1, 2, 3, 4, 5, 6, 7};
  ProbeConfig probe;
  double max_run_minutes = 30.0;
};

TrendConfig load_trend_config(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open trend config " + p.string());
  const json j = json::parse(in);
  TrendConfig c;
  c.data.n_train = j.at("n_train");
  c.data.n_val = j.at("n_val");
  c.data.n_test = j.at("n_test");
  c.data.image_size = j.at("image_size");
  c.data.seed = j.value("data_seed", 0ULL);
  c.train = parse_train_config(j.at("train"));
  c.seeds = j.value("seeds", c.seeds);
  c.counts = j.value("counts", c.counts);
  c.probe.epochs = j.value("probe_epochs", c.probe.epochs);
  c.max_run_minutes = j.value("max_run_minutes", c.max_run_minutes);
  return c;
}

struct Stat {
  double mean = 0, std = 0;
};

Stat stat_of(const std::vector<double>& v) {
  Stat s;
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.std = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return s;
}

std::string pct(const Stat& s) { return fmt("%.2f", 100 * s.mean) + " ± " + fmt("%.2f", 100 * s.std); }

class TrendRunner {
 public:
  TrendRunner(TrendConfig cfg, fs::path work) : cfg_(std::move(cfg)), work_(std::move(work)) {}

  struct Arm {
    std::vector<double> acc;
    std::vector<fs::path> ckpts;
    double max_minutes = 0;
  };

  // Test accuracy of the best-validation checkpoint, per seed.
  Arm run_arm(const std::string& tag, std::size_t count, const std::string& method, const TrainConfig& tc_base) {
    Arm arm;
    for (auto seed : cfg_.seeds) {
      const DatasetSpec spec = spec_for(count, seed);
      const auto& d = datasets(spec);
      TrainConfig tc = tc_base;
      tc.seed = seed;
      const fs::path dir = work_ / (tag + "_count" + std::to_string(count) + "_seed" + std::to_string(seed));
      const auto t0 = std::chrono::steady_clock::now();
      const TrainData td{&d.train, &d.val, hex64(spec.seed)};
      RunRecord rec = method == "baseline" ? train_baseline(td, tc, dir) : train_pnd(td, tc, dir);
      arm.max_minutes = std::max(arm.max_minutes, seconds_since(t0) / 60.0);
      LoadedModel m = load_model(rec.best_ckpt);
      arm.acc.push_back(accuracy(m.predict(d.test).final_pred, d.test.targets));
      arm.ckpts.push_back(rec.best_ckpt);
      std::fprintf(stderr, "  [%s count %zu seed %llu] test %.4f (best val %.4f @ %zu) %.1f min\n", tag.c_str(), count,
                   static_cast<unsigned long long>(seed), arm.acc.back(), rec.best_val_acc, rec.best_epoch,
                   seconds_since(t0) / 60.0);
    }
    return arm;
  }

  Arm& cached(const std::string& tag, std::size_t count, const std::string& method, const TrainConfig& tc) {
    const auto key = tag + "/" + std::to_string(count);
    auto it = arms_.find(key);
    if (it == arms_.end()) it = arms_.emplace(key, run_arm(tag, count, method, tc)).first;
    return it->second;
  }

  Outcome trend_a() {
    Arm& base = cached("baseline", 7, "baseline", cfg_.train);
    Arm& pnd = cached("pnd", 7, "pnd", cfg_.train);
    const Stat b = stat_of(base.acc), p = stat_of(pnd.acc);
    const double minutes = std::max(base.max_minutes, pnd.max_minutes);
    Outcome o;
    o.pass = p.mean - b.mean >= 0.05 && minutes <= cfg_.max_run_minutes;
    o.detail = "7 biases, rho 0.95: PnD " + pct(p) + " vs baseline " + pct(b) + " (gap " +
               fmt("%+.2f", 100 * (p.mean - b.mean)) + " points, need >= +5.00); slowest run " + fmt("%.1f", minutes) +
               " min";
    return o;
  }

  Outcome trend_b() {
    std::vector<Stat> b, p;
    for (auto c : cfg_.counts) {
      b.push_back(stat_of(cached("baseline", c, "baseline", cfg_.train).acc));
      p.push_back(stat_of(cached("pnd", c, "pnd", cfg_.train).acc));
    }
    bool monotone = true, dominates = true;
    std::ostringstream curve;
    for (std::size_t k = 0; k < cfg_.counts.size(); ++k) {
      const std::size_t c = cfg_.counts[k];
      if (k > 0 && cfg_.counts[k - 1] >= 2) {
        // each step beyond count 1 goes down or stays flat within one std
        if (b[k].mean > b[k - 1].mean + std::max(b[k].std, b[k - 1].std)) monotone = false;
      }
      if (c >= 2 && p[k].mean + std::max(p[k].std, b[k].std) < b[k].mean) dominates = false;
      curve << (k ? "; " : "") << c << ": " << fmt("%.1f", 100 * b[k].mean) << "/" << fmt("%.1f", 100 * p[k].mean);
    }
    Outcome o;
    o.pass = monotone && dominates;
    o.detail = std::string("baseline non-increasing beyond 1: ") + (monotone ? "yes" : "no") +
               ", PnD >= baseline from 2 on: " + (dominates ? "yes" : "no") + " [count: baseline/PnD % " +
               curve.str() + "]";
    return o;
  }

  Outcome trend_c() {
    const Stat full = stat_of(cached("pnd", 7, "pnd", cfg_.train).acc);
    const std::size_t total = cfg_.train.total_epochs();
    TrainConfig init_only = cfg_.train, cf_only = cfg_.train, no_gate = cfg_.train;
    init_only.epochs_initial = total;
    init_only.epochs_counterfactual = 0;
    cf_only.epochs_initial = 0;
    cf_only.epochs_counterfactual = total;
    no_gate.switches.gate = false;
    const Stat a = stat_of(cached("pnd_initial_only", 7, "pnd", init_only).acc);
    const Stat c = stat_of(cached("pnd_counterfactual_only", 7, "pnd", cf_only).acc);
    const Stat g = stat_of(cached("pnd_no_gate", 7, "pnd", no_gate).acc);
    auto ok = [&](const Stat& v) { return full.mean + std::max(full.std, v.std) >= v.mean; };
    Outcome o;
    o.pass = ok(a) && ok(c) && ok(g);
    o.detail = "full " + pct(full) + " vs initial-only " + pct(a) + ", counterfactual-only " + pct(c) +
               ", without L_gate " + pct(g);
    return o;
  }

  Outcome trend_d() {
    Arm& base = cached("baseline", 7, "baseline", cfg_.train);
    int votes = 0;
    std::ostringstream per_seed;
    for (std::size_t k = 0; k < cfg_.seeds.size(); ++k) {
      const auto& d = datasets(spec_for(7, cfg_.seeds[k]));
      LoadedModel m = load_model(base.ckpts[k]);
      ProbeConfig pc = cfg_.probe;
      pc.seed = cfg_.seeds[k];
      ProbeReport r;
      r.attributes = {"texture_color", "digit_position"};
      r.acc.assign(m.config.M, std::vector<double>(2));
      for (std::size_t a = 0; a < 2; ++a) {
        const auto acc = depth_probe(m, d.train, d.test, r.attributes[a], pc);
        for (std::size_t b = 0; b < acc.size(); ++b) r.acc[b][a] = acc[b];
      }
      const std::size_t tex = r.best_block(0) + 1, pos = r.best_block(1) + 1;
      votes += tex < pos;
      per_seed << (k ? "; " : "") << "seed " << cfg_.seeds[k] << ": texture_color block " << tex
               << ", digit_position block " << pos;
    }
    Outcome o;
    o.pass = 2 * votes > static_cast<int>(cfg_.seeds.size());
    o.detail = std::to_string(votes) + "/" + std::to_string(cfg_.seeds.size()) + " seeds place texture earlier (" +
               per_seed.str() + ")";
    return o;
  }

 private:
  struct Splits {
    Dataset train, val, test;
  };

  DatasetSpec spec_for(std::size_t count, std::uint64_t seed) const {
    DatasetSpec s = cfg_.data;
    s.bias_attributes = first_attributes(count);
    s.rho = 0.95;
    s.seed = derive_seed(cfg_.data.seed, {count, seed});
    return s;
  }

  const Splits& datasets(const DatasetSpec& spec) {
    const auto key = json(spec).dump();
    auto it = data_.find(key);
    if (it == data_.end()) {
      // One dataset family at a time keeps memory bounded.
      if (data_.size() >= 3) data_.clear();
      it = data_.emplace(key, Splits{generate_split(spec, Split::train), generate_split(spec, Split::val),
                                     generate_split(spec, Split::test)})
               .first;
    }
    return it->second;
  }

  TrendConfig cfg_;
  fs::path work_;
  std::map<std::string, Arm> arms_;
  std::map<std::string, Splits> data_;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  std::vector<int> criteria{1, 2, 3, 8};
  std::string cli, work = "acceptance_work", trend_config;
  app.add_option("--criteria", criteria)->delimiter(',')->check(CLI::Range(1, 8));
  app.add_option("--cli", cli, "pnd binary (criterion 8)");
  app.add_option("--work", work, "Scratch directory");
  app.add_option("--trend-config", trend_config, "Scale for criteria 4-7");
  std::vector<int> known_fail;
  app.add_option("--known-fail", known_fail,
                 "Criteria whose FAIL is documented; they still print FAIL but do not set the exit code")
      ->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  fs::create_directories(work);
  std::unique_ptr<TrendRunner> trends;
  bool all = true;
  for (int c : criteria) {
    static const char* names[] = {"",           "oracle equivalence", "gradient suite", "sampler statistics",
                                  "trend A",    "trend B",            "trend C",        "trend D",
                                  "reproducibility"};
    Outcome o;
    bool errored = false;
    try {
      if ((c >= 4 && c <= 7) && !trends) {
        if (trend_config.empty()) throw std::runtime_error("--trend-config is required for criteria 4-7");
        trends = std::make_unique<TrendRunner>(load_trend_config(trend_config), fs::path(work) / "trends");
      }
      switch (c) {
        case 1: o = criterion_oracle(); break;
        case 2: o = criterion_gradients(); break;
        case 3: o = criterion_sampler(); break;
        case 4: o = trends->trend_a(); break;
        case 5: o = trends->trend_b(); break;
        case 6: o = trends->trend_c(); break;
        case 7: o = trends->trend_d(); break;
        case 8:
          if (cli.empty()) throw std::runtime_error("--cli is required for criterion 8");
          o = criterion_reproducibility(fs::absolute(cli), fs::absolute(work));
          break;
      }
    } catch (const std::exception& e) {
      o.pass = false;
      errored = true;
      o.detail = std::string("error: ") + e.what();
    }
    // an exception is never an accepted outcome, known failure or not
    const bool known = !errored && std::find(known_fail.begin(), known_fail.end(), c) != known_fail.end();
    all = all && (o.pass || known);
    std::printf("criterion %d %s: %s -- %s%s\n", c, o.pass ? "PASS" : "FAIL", names[c], o.detail.c_str(),
                !o.pass && known ? " [known failure]" : "");
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
