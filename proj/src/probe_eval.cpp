#include "pnd/probe_eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "pnd/checkpoint.hpp"
#include "pnd/errors.hpp"
#include "pnd/layers.hpp"
#include "pnd/optim.hpp"
#include "pnd/rng.hpp"

namespace pnd {

namespace {

std::string fmt(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double ratio(std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; }

}  // namespace

GroupGrid group_grid(std::span<const int> pred, const Dataset& data, std::size_t attr) {
  if (pred.size() != data.size()) throw ShapeError("group_grid: prediction count mismatch");
  if (attr >= data.n_attrs()) throw SpecError("group_grid: attribute index out of range");
  GroupGrid g{};
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto& cell = g[data.targets[i]][data.attrs_of(i)[attr]];
    ++cell.n;
    cell.correct += pred[i] == data.targets[i];
  }
  return g;
}

EvalReport evaluate(const Predictions& pred, const Dataset& data, std::size_t min_group) {
  if (pred.final_pred.size() != data.size()) throw ShapeError("evaluate: prediction count mismatch");
  EvalReport r;
  r.n = data.size();
  r.overall_acc = accuracy(pred.final_pred, data.targets);
  for (std::size_t i = 0; i < data.size(); ++i) ++r.confusion[data.targets[i]][pred.final_pred[i]];

  for (std::size_t a = 0; a < data.n_attrs(); ++a) {
    const GroupGrid g = group_grid(pred.final_pred, data, a);
    AttributeEval e;
    e.name = data.attr_names[a];
    std::size_t al_c = 0, co_c = 0;
    e.worst_group_acc = 1.0;
    for (int y = 0; y < static_cast<int>(kNumCategories); ++y)
      for (int c = 0; c < static_cast<int>(kNumCategories); ++c) {
        const GroupCell& cell = g[y][c];
        (y == c ? e.aligned_n : e.conflicting_n) += cell.n;
        (y == c ? al_c : co_c) += cell.correct;
        if (cell.n < min_group) {
          e.excluded_cells.emplace_back(y, c);
          continue;
        }
        if (e.worst_target < 0 || cell.acc() < e.worst_group_acc) {
          e.worst_group_acc = cell.acc();
          e.worst_target = y;
          e.worst_category = c;
        }
      }
    e.aligned_acc = ratio(al_c, e.aligned_n);
    e.conflicting_acc = ratio(co_c, e.conflicting_n);
    if (e.worst_target < 0) e.worst_group_acc = 0.0;
    r.attrs.push_back(std::move(e));
  }

  for (std::size_t i = 0; i < pred.M; ++i) r.expert_acc.push_back(accuracy(pred.expert[i], data.targets));
  if (pred.M) {
    r.gate_mean.assign(pred.M, 0.0);
    for (std::size_t n = 0; n < data.size(); ++n)
      for (std::size_t i = 0; i < pred.M; ++i) r.gate_mean[i] += pred.gate_p[n * pred.M + i];
    for (auto& v : r.gate_mean) v /= static_cast<double>(std::max<std::size_t>(data.size(), 1));
  }
  return r;
}

EvalReport evaluate(LoadedModel& model, const Dataset& data, std::size_t min_group) {
  EvalReport r = evaluate(model.predict(data), data, min_group);
  r.method = model.method;
  return r;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json attrs = nlohmann::json::array();
  for (const auto& a : r.attrs)
    attrs.push_back({{"name", a.name},
                     {"aligned_acc", a.aligned_acc},
                     {"conflicting_acc", a.conflicting_acc},
                     {"worst_group_acc", a.worst_group_acc},
                     {"aligned_n", a.aligned_n},
                     {"conflicting_n", a.conflicting_n},
                     {"worst_group", {a.worst_target, a.worst_category}},
                     {"excluded_cells", a.excluded_cells}});
  j = {{"method", r.method}, {"n", r.n},         {"overall_acc", r.overall_acc}, {"attributes", attrs},
       {"expert_acc", r.expert_acc}, {"gate_mean", r.gate_mean}, {"confusion", r.confusion}};
}

std::string eval_csv(const EvalReport& r) {
  std::ostringstream o;
  o << "metric,attribute,value\n";
  o << "overall_acc,," << fmt(r.overall_acc, 6) << '\n';
  for (const auto& a : r.attrs) {
    o << "aligned_acc," << a.name << ',' << fmt(a.aligned_acc, 6) << '\n';
    o << "conflicting_acc," << a.name << ',' << fmt(a.conflicting_acc, 6) << '\n';
    o << "worst_group_acc," << a.name << ',' << fmt(a.worst_group_acc, 6) << '\n';
  }
  for (std::size_t i = 0; i < r.expert_acc.size(); ++i) {
    o << "expert_acc,E" << i + 1 << ',' << fmt(r.expert_acc[i], 6) << '\n';
    o << "gate_mean,E" << i + 1 << ',' << fmt(r.gate_mean[i], 6) << '\n';
  }
  return o.str();
}

std::string eval_markdown(const EvalReport& r) {
  std::ostringstream o;
  o << "## Evaluation (" << (r.method.empty() ? "model" : r.method) << ", n = " << r.n << ")\n\n";
  if (!r.expert_acc.empty()) {
    o << '|';
    for (std::size_t i = 0; i < r.expert_acc.size(); ++i) o << " E" << i + 1 << " |";
    o << " Final |\n|";
    for (std::size_t i = 0; i <= r.expert_acc.size(); ++i) o << "---|";
    o << "\n|";
    for (std::size_t i = 0; i < r.expert_acc.size(); ++i)
      o << ' ' << fmt(100 * r.expert_acc[i], 2) << " (" << fmt(r.gate_mean[i], 2) << ") |";
    o << ' ' << fmt(100 * r.overall_acc, 2) << " |\n\n";
  } else {
    o << "| Final |\n|---|\n| " << fmt(100 * r.overall_acc, 2) << " |\n\n";
  }
  o << "| attribute | aligned | conflicting | worst group |\n|---|---|---|---|\n";
  for (const auto& a : r.attrs)
    o << "| " << a.name << " | " << fmt(100 * a.aligned_acc, 2) << " | " << fmt(100 * a.conflicting_acc, 2) << " | "
      << fmt(100 * a.worst_group_acc, 2) << " |\n";
  return o.str();
}

// ---------------------------------------------------------------- probes

namespace {

struct FeatureBank {
  std::vector<std::size_t> dims;          // channels per block
  std::vector<std::vector<real>> values;  // [block] n × dim
};

FeatureBank pooled_features(BaselineNet& net, const Dataset& data, std::size_t batch = 200) {
  NoGradScope no_grad;
  FeatureBank bank;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t end = std::min(data.size(), start + batch);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    auto maps = net.features(make_batch(data, idx), Mode::eval);
    if (bank.values.empty()) {
      bank.values.resize(maps.size());
      for (const auto& m : maps) bank.dims.push_back(m.dim(1));
    }
    for (std::size_t b = 0; b < maps.size(); ++b) {
      Tensor f = global_avg_pool(maps[b]);
      bank.values[b].insert(bank.values[b].end(), f.data().begin(), f.data().end());
    }
  }
  return bank;
}

std::vector<int> probe_labels(const Dataset& data, const std::string& attribute) {
  std::vector<int> y(data.size());
  if (attribute == "digit") {
    for (std::size_t i = 0; i < data.size(); ++i) y[i] = data.targets[i];
    return y;
  }
  const std::size_t a = data.attr_index(attribute);
  if (a == DatasetSpec::npos) throw SpecError("attribute \"" + attribute + "\" is not present in the dataset");
  for (std::size_t i = 0; i < data.size(); ++i) y[i] = data.attrs_of(i)[a];
  return y;
}

Tensor rows_of(const std::vector<real>& values, std::size_t dim, std::span<const std::size_t> idx) {
  std::vector<real> v(idx.size() * dim);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(values.data() + idx[r] * dim, dim, v.data() + r * dim);
  return Tensor::from({idx.size(), dim}, std::move(v));
}

double train_linear_probe(const std::vector<real>& xtr, const std::vector<int>& ytr, const std::vector<real>& xte,
                          const std::vector<int>& yte, std::size_t dim, const ProbeConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  Linear probe(dim, kNumCategories, rng);
  Adam opt({probe.weight, probe.bias});
  const std::size_t n = ytr.size();
  const std::size_t bs = std::min(cfg.batch_size, n);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(seed, epoch, n);
    for (std::size_t start = 0; start + bs <= n; start += bs) {
      std::span<const std::size_t> idx(order.data() + start, bs);
      std::vector<int> y(bs);
      for (std::size_t r = 0; r < bs; ++r) y[r] = ytr[idx[r]];
      Tape tape;
      TapeScope scope(tape);
      opt.zero_grad();
      Tensor loss = mean(cross_entropy(probe.forward(rows_of(xtr, dim, idx)), y));
      loss.backward();
      opt.step(cfg.lr, 0.0f);
    }
  }
  NoGradScope no_grad;
  std::vector<std::size_t> all(yte.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  auto pred = argmax_rows(probe.forward(rows_of(xte, dim, all)));
  std::size_t hit = 0;
  for (std::size_t i = 0; i < yte.size(); ++i) hit += pred[i] == yte[i];
  return ratio(hit, yte.size());
}

BaselineNet& require_baseline(LoadedModel& model) {
  if (!model.baseline) throw SpecError("depth probes need a baseline (single-encoder) checkpoint");
  return *model.baseline;
}

}  // namespace

std::size_t ProbeReport::best_block(std::size_t attribute) const {
  std::size_t best = 0;
  for (std::size_t b = 1; b < acc.size(); ++b)
    if (acc[b][attribute] > acc[best][attribute]) best = b;
  return best;
}

std::vector<double> depth_probe(LoadedModel& model, const Dataset& train, const Dataset& test,
                                const std::string& attribute, const ProbeConfig& cfg) {
  BaselineNet& net = require_baseline(model);
  const auto ytr = probe_labels(train, attribute);
  const auto yte = probe_labels(test, attribute);
  const FeatureBank ftr = pooled_features(net, train), fte = pooled_features(net, test);
  std::vector<double> out;
  for (std::size_t b = 0; b < ftr.dims.size(); ++b)
    out.push_back(train_linear_probe(ftr.values[b], ytr, fte.values[b], yte, ftr.dims[b], cfg,
                                     derive_seed(cfg.seed, {b, fnv1a(attribute.data(), attribute.size())})));
  return out;
}

ProbeReport probe_all(LoadedModel& model, const Dataset& train, const Dataset& test, const ProbeConfig& cfg) {
  BaselineNet& net = require_baseline(model);
  ProbeReport r;
  r.attributes.push_back("digit");
  for (const auto& n : train.attr_names) r.attributes.push_back(n);
  const FeatureBank ftr = pooled_features(net, train), fte = pooled_features(net, test);
  r.acc.assign(ftr.dims.size(), std::vector<double>(r.attributes.size()));
  for (std::size_t a = 0; a < r.attributes.size(); ++a) {
    const auto ytr = probe_labels(train, r.attributes[a]);
    const auto yte = probe_labels(test, r.attributes[a]);
    for (std::size_t b = 0; b < ftr.dims.size(); ++b)
      r.acc[b][a] = train_linear_probe(ftr.values[b], ytr, fte.values[b], yte, ftr.dims[b], cfg,
                                       derive_seed(cfg.seed, {b, fnv1a(r.attributes[a].data(), r.attributes[a].size())}));
  }
  return r;
}

std::string probe_csv(const ProbeReport& r) {
  std::ostringstream o;
  o << "block,attribute,accuracy\n";
  for (std::size_t b = 0; b < r.acc.size(); ++b)
    for (std::size_t a = 0; a < r.attributes.size(); ++a)
      o << b + 1 << ',' << r.attributes[a] << ',' << fmt(r.acc[b][a], 6) << '\n';
  return o.str();
}

std::string probe_markdown(const ProbeReport& r) {
  std::ostringstream o;
  o << "## Depth probes\n\n| block |";
  for (const auto& a : r.attributes) o << ' ' << a << " |";
  o << "\n|---|";
  for (std::size_t a = 0; a < r.attributes.size(); ++a) o << "---|";
  o << '\n';
  for (std::size_t b = 0; b < r.acc.size(); ++b) {
    o << "| " << b + 1 << " |";
    for (std::size_t a = 0; a < r.attributes.size(); ++a) o << ' ' << fmt(100 * r.acc[b][a], 2) << " |";
    o << '\n';
  }
  o << "| best |";
  for (std::size_t a = 0; a < r.attributes.size(); ++a) o << ' ' << r.best_block(a) + 1 << " |";
  o << '\n';
  return o.str();
}

// ---------------------------------------------------------------- sweep

std::size_t worker_threads(std::size_t fallback) {
  if (const char* env = std::getenv("PND_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(fallback, 1);
}

std::vector<SweepPoint> aggregate(const std::vector<SweepRow>& rows) {
  std::map<std::pair<std::size_t, std::string>, std::vector<double>> groups;
  for (const auto& r : rows) groups[{r.count, r.method}].push_back(r.test_acc);
  std::vector<SweepPoint> out;
  for (auto& [key, v] : groups) {
    // Sorted so the floating-point sum does not depend on row order.
    std::sort(v.begin(), v.end());
    SweepPoint p;
    p.count = key.first;
    p.method = key.second;
    p.n = v.size();
    p.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(p.n);
    double ss = 0.0;
    for (double x : v) ss += (x - p.mean) * (x - p.mean);
    p.std = p.n > 1 ? std::sqrt(ss / static_cast<double>(p.n - 1)) : 0.0;
    out.push_back(p);
  }
  return out;
}

std::vector<SweepRow> sweep_bias_count(const SweepConfig& cfg) {
  struct Job {
    std::size_t count;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (auto c : cfg.counts)
    for (auto s : cfg.seeds) jobs.push_back({c, s});
  for (auto c : cfg.counts) first_attributes(c);  // range check up front

  std::vector<SweepRow> rows(jobs.size() * 2);
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr err;
  auto worker = [&] {
    for (std::size_t j; (j = next++) < jobs.size();) {
      try {
        const Job job = jobs[j];
        DatasetSpec spec = cfg.data;
        spec.bias_attributes = first_attributes(job.count);
        spec.rho = cfg.rho;
        spec.seed = derive_seed(cfg.data.seed, {job.count, job.seed});
        const Dataset train = generate_split(spec, Split::train);
        const Dataset val = generate_split(spec, Split::val);
        const Dataset test = generate_split(spec, Split::test);
        TrainConfig tc = cfg.train;
        tc.seed = job.seed;
        const TrainData data{&train, &val, hex64(spec.seed)};
        const auto tag = "count" + std::to_string(job.count) + "_seed" + std::to_string(job.seed);
        for (int m = 0; m < 2; ++m) {
          const std::string method = m == 0 ? "baseline" : "pnd";
          const auto dir = cfg.out / (method + "_" + tag);
          RunRecord rec = m == 0 ? train_baseline(data, tc, dir) : train_pnd(data, tc, dir);
          LoadedModel model = load_model(rec.best_ckpt);
          rows[2 * j + m] = {job.count, method, job.seed, accuracy(model.predict(test).final_pred, test.targets),
                             dir.string()};
        }
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!err) err = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::min(std::max<std::size_t>(cfg.threads, 1), jobs.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
  return rows;
}

std::string sweep_csv(const std::vector<SweepPoint>& pts) {
  std::ostringstream o;
  o << "count,method,mean_acc,std_acc,n\n";
  for (const auto& p : pts) o << p.count << ',' << p.method << ',' << fmt(p.mean, 6) << ',' << fmt(p.std, 6) << ',' << p.n << '\n';
  return o.str();
}

std::string sweep_markdown(const std::vector<SweepPoint>& pts) {
  std::map<std::size_t, std::map<std::string, const SweepPoint*>> by_count;
  std::vector<std::string> methods;
  for (const auto& p : pts) {
    by_count[p.count][p.method] = &p;
    if (std::find(methods.begin(), methods.end(), p.method) == methods.end()) methods.push_back(p.method);
  }
  std::ostringstream o;
  o << "| biases |";
  for (const auto& m : methods) o << ' ' << m << " |";
  o << "\n|---|";
  for (std::size_t i = 0; i < methods.size(); ++i) o << "---|";
  o << '\n';
  for (const auto& [c, row] : by_count) {
    o << "| " << c << " |";
    for (const auto& m : methods) {
      auto it = row.find(m);
      if (it == row.end())
        o << " - |";
      else
        o << ' ' << fmt(100 * it->second->mean, 2) << " ± " << fmt(100 * it->second->std, 2) << " |";
    }
    o << '\n';
  }
  return o.str();
}

std::string sweep_svg(const std::vector<SweepPoint>& pts) {
  constexpr double W = 640, H = 400, L = 70, R = 150, T = 30, B = 60;
  std::map<std::string, std::vector<const SweepPoint*>> series;
  std::size_t cmin = SIZE_MAX, cmax = 0;
  double amin = 1.0, amax = 0.0;
  for (const auto& p : pts) {
    series[p.method].push_back(&p);
    cmin = std::min(cmin, p.count);
    cmax = std::max(cmax, p.count);
    amin = std::min(amin, p.mean);
    amax = std::max(amax, p.mean);
  }
  if (pts.empty()) cmin = cmax = 1;
  amin = std::max(0.0, std::floor(amin * 10 - 0.5) / 10);
  amax = std::min(1.0, std::ceil(amax * 10 + 0.5) / 10);
  if (amax <= amin) amax = amin + 0.1;
  const double span_c = cmax > cmin ? static_cast<double>(cmax - cmin) : 1.0;
  auto px = [&](std::size_t c) { return L + (W - L - R) * (static_cast<double>(c - cmin) / span_c); };
  auto py = [&](double a) { return T + (H - T - B) * (1.0 - (a - amin) / (amax - amin)); };

  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};
  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
    << ' ' << H << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (std::size_t c = cmin; c <= cmax; ++c)
    o << "<text x=\"" << fmt(px(c), 1) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\" font-size=\"12\">"
      << c << "</text>\n";
  for (int k = 0; k <= 4; ++k) {
    const double a = amin + (amax - amin) * k / 4.0;
    o << "<text x=\"" << L - 8 << "\" y=\"" << fmt(py(a) + 4, 1) << "\" text-anchor=\"end\" font-size=\"12\">"
      << fmt(100 * a, 0) << "</text>\n";
  }
  o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 15
    << "\" text-anchor=\"middle\" font-size=\"14\">number of bias types</text>\n";
  o << "<text x=\"18\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 18 "
    << (T + H - B) / 2 << ")\">unbiased test accuracy (%)</text>\n";
  std::size_t k = 0;
  for (auto& [method, s] : series) {
    std::sort(s.begin(), s.end(), [](auto* a, auto* b) { return a->count < b->count; });
    const char* color = kColors[k % 4];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.size(); ++i)
      o << (i ? " " : "") << fmt(px(s[i]->count), 1) << ',' << fmt(py(s[i]->mean), 1);
    o << "\"/>\n";
    const double ly = T + 20.0 * static_cast<double>(k);
    o << "<line x1=\"" << W - R + 15 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 40 << "\" y2=\"" << ly
      << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << W - R + 46 << "\" y=\"" << ly + 4 << "\" font-size=\"12\">" << method << "</text>\n";
    ++k;
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace pnd
