// Command-line entry point: synth, train, eval, probe, sweep, report.
//
// Exit codes: 0 success, 2 usage, 3 data/format, 4 numeric abort.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "pnd/bias_forge.hpp"
#include "pnd/checkpoint.hpp"
#include "pnd/errors.hpp"
#include "pnd/predict.hpp"
#include "pnd/probe_eval.hpp"
#include "pnd/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pnd;

namespace {

enum Exit { kOk = 0, kInternal = 1, kUsage = 2, kData = 3, kNumeric = 4 };

struct Globals {
  std::uint64_t seed = 0;
  bool deterministic = true;
  std::string out = ".";
};

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream o(p, std::ios::binary);
  if (!o) throw IoError("cannot write " + p.string());
  o << text;
  if (!o) throw IoError("write failed: " + p.string());
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

// Every subcommand echoes its resolved flags before doing any work.
void echo(const fs::path& out, const std::string& cmd, const json& flags, const Globals& g) {
  json j = flags;
  j["command"] = cmd;
  j["seed"] = g.seed;
  j["deterministic"] = g.deterministic;
  write_file(out / (cmd + "_invocation.json"), j.dump(2) + "\n");
}

std::string data_hash(const fs::path& data_dir) { return hex64(file_hash(split_path(data_dir, Split::train))); }

Dataset load_split(const fs::path& data, Split s) {
  const fs::path p = split_path(data, s);
  if (!fs::exists(p)) throw IoError("missing dataset file " + p.string());
  return load_dataset(p);
}

// ------------------------------------------------------------------ synth

struct SynthArgs {
  std::size_t biases = 7;
  double rho = 0.95;
  std::size_t n_train = 10000, n_val = 2000, n_test = 2000, size = 64;
};

int cmd_synth(const SynthArgs& a, const Globals& g) {
  DatasetSpec spec;
  spec.bias_attributes = first_attributes(a.biases);
  spec.rho = a.rho;
  spec.n_train = a.n_train;
  spec.n_val = a.n_val;
  spec.n_test = a.n_test;
  spec.image_size = a.size;
  spec.seed = g.seed;
  spec.validate();
  const fs::path out = g.out;
  fs::create_directories(out);
  echo(out, "synth", {{"spec", spec}}, g);
  const SynthesisResult r = synthesize(spec, out);
  std::printf("wrote %s, %s, %s\n", r.train.string().c_str(), r.val.string().c_str(), r.test.string().c_str());
  std::printf("train census (n = %zu, rho = %.3f):\n", spec.n_train, spec.rho);
  for (std::size_t k = 0; k < spec.bias_attributes.size(); ++k)
    std::printf("  %-15s aligned %.4f\n", attribute_name(spec.bias_attributes[k]).c_str(),
                r.train_census.aligned_fraction(k));
  return kOk;
}

// ------------------------------------------------------------------ train

struct TrainArgs {
  std::string data, method = "pnd", config;
  bool seed_set = false;
};

int cmd_train(const TrainArgs& a, const Globals& g) {
  TrainConfig cfg = parse_train_config(read_json(a.config));
  if (a.seed_set) cfg.seed = g.seed;
  cfg.deterministic = g.deterministic;
  const fs::path out = g.out;
  fs::create_directories(out);
  echo(out, "train", {{"data", a.data}, {"method", a.method}, {"config", cfg}}, g);
  const Dataset train = load_split(a.data, Split::train);
  const Dataset val = load_split(a.data, Split::val);
  const TrainData td{&train, &val, data_hash(a.data)};
  auto progress = [](const EpochRow& r) {
    std::fprintf(stderr, "epoch %zu [%s] lr %.2e loss %.4f train %.4f val %.4f\n", r.epoch, to_string(r.phase).c_str(),
                 r.lr, r.L_total, r.train_acc, r.val_acc);
  };
  const RunRecord rec = a.method == "pnd" ? train_pnd(td, cfg, out, progress) : train_baseline(td, cfg, out, progress);
  std::printf("best val %.4f at epoch %zu; checkpoint %s\n", rec.best_val_acc, rec.best_epoch,
              rec.best_ckpt.string().c_str());
  return kOk;
}

// ------------------------------------------------------------------ eval / probe

struct ModelArgs {
  std::string model, data, attribute;
  std::size_t probe_epochs = 5;
};

void warn_on_hash_mismatch(const LoadedModel& m, const std::string& data) {
  if (!m.meta.contains("dataset_hash")) return;
  const auto expected = m.meta["dataset_hash"].get<std::string>();
  const fs::path train = split_path(data, Split::train);
  if (!fs::is_directory(data) || !fs::exists(train)) return;
  const auto actual = hex64(file_hash(train));
  if (actual != expected)
    std::fprintf(stderr, "warning: checkpoint was trained on dataset %s, --data holds %s\n", expected.c_str(),
                 actual.c_str());
}

std::string output_tag(const fs::path& model, const fs::path& data_file) {
  fs::path bin = model;
  if (bin.extension() == ".json") bin.replace_extension(".bin");
  if (bin.extension() != ".bin") bin += ".bin";
  return hex64(file_hash(data_file)) + "_" + hex64(file_hash(bin));
}

int cmd_eval(const ModelArgs& a, const Globals& g) {
  const fs::path out = g.out;
  fs::create_directories(out);
  echo(out, "eval", {{"model", a.model}, {"data", a.data}}, g);
  LoadedModel m = load_model(a.model);
  warn_on_hash_mismatch(m, a.data);
  const fs::path test_file = split_path(a.data, Split::test);
  const Dataset test = load_split(a.data, Split::test);
  const EvalReport r = evaluate(m, test);
  const std::string tag = output_tag(a.model, test_file);
  write_file(out / ("eval_" + tag + ".csv"), eval_csv(r));
  write_file(out / ("eval_" + tag + ".md"), eval_markdown(r));
  write_file(out / ("eval_" + tag + ".json"), json(r).dump(2) + "\n");
  std::cout << eval_markdown(r);
  return kOk;
}

int cmd_probe(const ModelArgs& a, const Globals& g) {
  const fs::path out = g.out;
  fs::create_directories(out);
  echo(out, "probe", {{"model", a.model}, {"data", a.data}, {"attribute", a.attribute}, {"epochs", a.probe_epochs}},
       g);
  LoadedModel m = load_model(a.model);
  warn_on_hash_mismatch(m, a.data);
  const Dataset train = load_split(a.data, Split::train);
  const Dataset test = load_split(a.data, Split::test);
  ProbeConfig pc;
  pc.epochs = a.probe_epochs;
  pc.seed = g.seed;
  ProbeReport r;
  if (a.attribute.empty()) {
    r = probe_all(m, train, test, pc);
  } else {
    r.attributes = {a.attribute};
    for (double v : depth_probe(m, train, test, a.attribute, pc)) r.acc.push_back({v});
  }
  const std::string tag = output_tag(a.model, split_path(a.data, Split::test));
  write_file(out / ("probe_" + tag + ".csv"), probe_csv(r));
  write_file(out / ("probe_" + tag + ".md"), probe_markdown(r));
  std::cout << probe_markdown(r);
  return kOk;
}

// ------------------------------------------------------------------ sweep

struct SweepArgs {
  double rho = 0.95;
  std::vector<std::size_t> counts{1, 2, 3, 4, 5, 6, 7};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string config;
  std::size_t n_train = 10000, n_val = 2000, n_test = 2000, size = 64;
};

std::string rows_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream o;
  o << "count,method,seed,test_acc,run_dir\n";
  for (const auto& r : rows) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", r.test_acc);
    o << r.count << ',' << r.method << ',' << r.seed << ',' << buf << ',' << r.run_dir << '\n';
  }
  return o.str();
}

int cmd_sweep(const SweepArgs& a, const Globals& g) {
  SweepConfig sc;
  sc.rho = a.rho;
  sc.counts = a.counts;
  sc.seeds = a.seeds;
  sc.train = parse_train_config(read_json(a.config));
  sc.train.deterministic = g.deterministic;
  sc.data.n_train = a.n_train;
  sc.data.n_val = a.n_val;
  sc.data.n_test = a.n_test;
  sc.data.image_size = a.size;
  sc.data.seed = g.seed;
  sc.data.rho = a.rho;
  sc.data.validate();
  for (auto c : sc.counts) first_attributes(c);
  const fs::path out = g.out;
  fs::create_directories(out);
  sc.out = out / "runs";
  sc.threads = worker_threads(1);
  echo(out, "sweep",
       {{"rho", sc.rho}, {"counts", sc.counts}, {"seeds", sc.seeds}, {"train", sc.train}, {"data", sc.data}}, g);
  auto rows = sweep_bias_count(sc);
  for (auto& r : rows) r.run_dir = fs::relative(r.run_dir, out).string();
  const auto pts = aggregate(rows);
  write_file(out / "rows.csv", rows_csv(rows));
  write_file(out / "sweep.csv", sweep_csv(pts));
  write_file(out / "sweep.md", sweep_markdown(pts));
  write_file(out / "sweep.svg", sweep_svg(pts));
  std::cout << sweep_markdown(pts);
  return kOk;
}

// ------------------------------------------------------------------ report

struct ReportArgs {
  std::vector<std::string> runs;
  std::string format = "md";
};

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    rows.push_back(std::move(cells));
  }
  if (rows.empty()) throw FormatError(p.string() + ": empty CSV");
  return rows;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<SweepRow> sweep_rows(const fs::path& dir) {
  auto csv = read_csv(dir / "rows.csv");
  std::vector<SweepRow> rows;
  for (std::size_t i = 1; i < csv.size(); ++i) {
    if (csv[i].size() < 4) throw FormatError((dir / "rows.csv").string() + ": short row " + std::to_string(i));
    rows.push_back({std::stoul(csv[i][0]), csv[i][1], std::stoull(csv[i][2]), std::stod(csv[i][3]),
                    csv[i].size() > 4 ? csv[i][4] : ""});
  }
  return rows;
}

// Per-epoch means of every numeric metrics.csv column across runs.
std::string merge_metrics(const std::vector<fs::path>& runs, std::vector<std::string>& header,
                          std::vector<std::vector<double>>& mean) {
  std::vector<std::vector<std::vector<std::string>>> tables;
  for (const auto& r : runs) tables.push_back(read_csv(r / "metrics.csv"));
  header = tables[0][0];
  const std::size_t n_rows = tables[0].size() - 1;
  for (const auto& t : tables)
    if (t.size() - 1 != n_rows || t[0] != header) throw FormatError("runs have different metrics.csv layouts");
  mean.assign(n_rows, std::vector<double>(header.size(), 0.0));
  for (std::size_t r = 0; r < n_rows; ++r)
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (header[c] == "phase") continue;
      for (const auto& t : tables) mean[r][c] += std::stod(t[r + 1][c]);
      mean[r][c] /= static_cast<double>(tables.size());
    }
  return tables[0][1][1];
}

std::string metrics_svg(const std::vector<fs::path>& runs) {
  std::vector<SweepPoint> pts;
  for (std::size_t k = 0; k < runs.size(); ++k) {
    auto t = read_csv(runs[k] / "metrics.csv");
    std::size_t col = 0;
    for (std::size_t c = 0; c < t[0].size(); ++c)
      if (t[0][c] == "val_acc") col = c;
    for (std::size_t r = 1; r < t.size(); ++r)
      pts.push_back({r, runs[k].filename().string(), std::stod(t[r][col]), 0.0, 1});
  }
  std::string svg = sweep_svg(pts);
  const std::string from = ">number of bias types<";
  if (auto pos = svg.find(from); pos != std::string::npos) svg.replace(pos, from.size(), ">epoch<");
  const std::string from_y = ">unbiased test accuracy (%)<";
  if (auto pos = svg.find(from_y); pos != std::string::npos) svg.replace(pos, from_y.size(), ">unbiased val accuracy (%)<");
  return svg;
}

int cmd_report(const ReportArgs& a, const Globals& g) {
  if (a.format != "csv" && a.format != "md" && a.format != "svg")
    throw CLI::ValidationError("--format", "must be csv, md or svg");
  const fs::path out = g.out;
  fs::create_directories(out);
  echo(out, "report", {{"runs", a.runs}, {"format", a.format}}, g);
  std::vector<fs::path> sweeps, trains;
  for (const auto& r : a.runs) {
    const fs::path p = r;
    if (fs::exists(p / "rows.csv"))
      sweeps.push_back(p);
    else if (fs::exists(p / "metrics.csv"))
      trains.push_back(p);
    else
      throw IoError(r + " is neither a sweep nor a training run directory");
  }
  if (!sweeps.empty() && !trains.empty()) throw FormatError("cannot aggregate sweep and training runs together");

  std::string text;
  if (!sweeps.empty()) {
    std::vector<SweepRow> rows;
    std::set<std::string> hashes;
    for (const auto& s : sweeps) {
      auto r = sweep_rows(s);
      rows.insert(rows.end(), r.begin(), r.end());
      const json inv = read_json(s / "sweep_invocation.json");
      hashes.insert(inv.at("data").dump() + std::to_string(inv.at("rho").get<double>()));
    }
    if (hashes.size() > 1) throw FormatError("sweeps were run on different dataset specifications");
    const auto pts = aggregate(rows);
    text = a.format == "csv" ? sweep_csv(pts) : a.format == "md" ? sweep_markdown(pts) : sweep_svg(pts);
  } else {
    std::set<std::string> hashes;
    for (const auto& t : trains) hashes.insert(read_json(t / "config.json").value("dataset_hash", ""));
    if (hashes.size() > 1) throw FormatError("runs were trained on different datasets; refusing to aggregate");
    if (a.format == "svg") {
      text = metrics_svg(trains);
    } else if (trains.size() == 1 && a.format == "csv") {
      text = read_text(trains[0] / "metrics.csv");
    } else {
      std::vector<std::string> header;
      std::vector<std::vector<double>> mean;
      merge_metrics(trains, header, mean);
      auto phase_of = [&](std::size_t r) { return read_csv(trains[0] / "metrics.csv")[r + 1][1]; };
      std::ostringstream o;
      const bool md = a.format == "md";
      if (md) {
        o << "Mean over " << trains.size() << " run(s)\n\n|";
        for (const auto& h : header) o << ' ' << h << " |";
        o << "\n|";
        for (std::size_t c = 0; c < header.size(); ++c) o << "---|";
        o << '\n';
      } else {
        for (std::size_t c = 0; c < header.size(); ++c) o << (c ? "," : "") << header[c];
        o << '\n';
      }
      for (std::size_t r = 0; r < mean.size(); ++r) {
        if (md) o << '|';
        for (std::size_t c = 0; c < header.size(); ++c) {
          std::string cell;
          if (header[c] == "phase") {
            cell = phase_of(r);
          } else if (header[c] == "epoch") {
            cell = std::to_string(static_cast<long>(mean[r][c]));
          } else {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.6f", mean[r][c]);
            cell = buf;
          }
          if (md)
            o << ' ' << cell << " |";
          else
            o << (c ? "," : "") << cell;
        }
        o << '\n';
      }
      text = o.str();
    }
  }
  write_file(out / ("report." + a.format), text);
  std::cout << text;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Partition-and-debias toolkit: synthesize biased data, train, evaluate, probe, sweep, report"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  bool seed_given = false;
  auto* seed_opt = app.add_option("--seed", g.seed, "Seed for every random stream")->capture_default_str();
  app.add_option("--deterministic", g.deterministic, "Fix every stream order from the seed")->capture_default_str();
  app.add_option("--out", g.out, "Output directory")->capture_default_str();

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Synthesize a multi-bias dataset");
  synth->add_option("--biases", sa.biases, "Number of bias attributes")->check(CLI::Range(1, 7))->capture_default_str();
  synth->add_option("--rho", sa.rho, "Bias ratio")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  synth->add_option("--train", sa.n_train)->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--val", sa.n_val)->capture_default_str();
  synth->add_option("--test", sa.n_test)->capture_default_str();
  synth->add_option("--size", sa.size, "Image side")->check(CLI::Range(32, 1024))->capture_default_str();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train PnD or the plain-CE baseline");
  train->add_option("--data", ta.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--method", ta.method)->check(CLI::IsMember({"pnd", "baseline"}))->capture_default_str();
  train->add_option("--config", ta.config, "Train config JSON")->required()->check(CLI::ExistingFile);

  ModelArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the unbiased test split");
  eval->add_option("--model", ea.model, "Checkpoint stem or manifest")->required();
  eval->add_option("--data", ea.data, "Dataset directory or .pndb file")->required()->check(CLI::ExistingPath);

  ModelArgs pa;
  auto* probe = app.add_subcommand("probe", "Per-block linear probes on a baseline checkpoint");
  probe->add_option("--model", pa.model)->required();
  probe->add_option("--data", pa.data)->required()->check(CLI::ExistingDirectory);
  probe->add_option("--attribute", pa.attribute, "digit or a bias attribute (default: all)");
  probe->add_option("--epochs", pa.probe_epochs)->check(CLI::PositiveNumber)->capture_default_str();

  SweepArgs wa;
  auto* sweep = app.add_subcommand("sweep", "Baseline vs PnD over bias counts");
  sweep->add_option("--rho", wa.rho)->check(CLI::Range(0.0, 1.0))->capture_default_str();
  sweep->add_option("--counts", wa.counts)->check(CLI::Range(1, 7))->capture_default_str();
  sweep->add_option("--seeds", wa.seeds)->capture_default_str();
  sweep->add_option("--config", wa.config)->required()->check(CLI::ExistingFile);
  sweep->add_option("--train", wa.n_train)->check(CLI::PositiveNumber)->capture_default_str();
  sweep->add_option("--val", wa.n_val)->capture_default_str();
  sweep->add_option("--test", wa.n_test)->capture_default_str();
  sweep->add_option("--size", wa.size)->check(CLI::Range(32, 1024))->capture_default_str();

  ReportArgs ra;
  auto* report = app.add_subcommand("report", "Aggregate run or sweep directories");
  report->add_option("--runs", ra.runs)->required()->expected(1, -1);
  report->add_option("--format", ra.format)->check(CLI::IsMember({"csv", "md", "svg"}))->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  seed_given = seed_opt->count() > 0;
  ta.seed_set = seed_given;

  try {
    if (*synth) return cmd_synth(sa, g);
    if (*train) return cmd_train(ta, g);
    if (*eval) return cmd_eval(ea, g);
    if (*probe) return cmd_probe(pa, g);
    if (*sweep) return cmd_sweep(wa, g);
    if (*report) return cmd_report(ra, g);
  } catch (const CLI::Error& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const SpecError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const IoError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric abort: %s\n", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInternal;
  }
  return kUsage;
}
