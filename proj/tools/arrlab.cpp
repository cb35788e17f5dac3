// arrlab command-line entry point.
//
//   arrlab gen-data --config C [--seed S] [--out DIR]
//   arrlab train    --config C [--seed S] [--out DIR]
//   arrlab eval     --config C [--seed S] [--out DIR] [--checkpoint FILE]
//   arrlab sweep    --config C [--seed S] [--out DIR] --axis alpha|beta --values 1,2,3
//   arrlab capacity --config C [--seed S] [--out DIR] [--checkpoint FILE]

#include "arrlab/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

using namespace arrlab;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = true) {
  cmd->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile)->required(config_required);
  cmd->add_option("--seed", c.seed, "overrides the run and dataset seed");
  cmd->add_option("--out", c.out, "output directory");
}

ExperimentConfig experiment(const Common& c) {
  auto cfg = load_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.dataset.seed = *c.seed;
    if (!cfg.name.empty()) cfg.name += "-s" + std::to_string(*c.seed);
  }
  if (!c.out.empty()) cfg.output_dir = c.out;
  return cfg;
}

void print_metrics(const std::string& id, const MetricsReport& m) {
  std::printf("%s cvr %.4f ndcg %.4f", id.c_str(), m.cvr, m.ndcg);
  for (const auto& [k, v] : m.recall) std::printf(" R@%d %.4f", k, v);
  std::printf("\n");
}

int gen_data(const Common& c) {
  const auto cfg = experiment(c);
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  Taxonomy tax;
  const auto ds = generate_dataset(cfg.dataset, &tax);
  std::ofstream train(dir / "train.jsonl"), eval(dir / "eval.jsonl"), docs(dir / "documents.txt");
  write_jsonl(train, ds.train);
  write_jsonl(eval, ds.eval);
  for (const auto& d : ds.documents) docs << d << '\n';
  if (cfg.dataset.kind == "taxonomy") {
    std::ofstream edges(dir / "taxonomy.tsv");
    tax.write_edges(edges);
  }
  std::printf("wrote %zu train / %zu eval examples over %zu documents to %s\n", ds.train.size(), ds.eval.size(),
              ds.documents.size(), dir.c_str());
  return 0;
}

int train_cmd(const Common& c, bool verbose) {
  TrainOptions o;
  o.verbose = verbose;
  const auto rec = train(experiment(c), o);
  print_metrics(rec.run_id, rec.metrics);
  std::printf("wall clock %.1fs\n", rec.wall_clock_seconds);
  return 0;
}

int eval_cmd(const Common& c, const std::string& checkpoint) {
  ExperimentConfig cfg;
  TrainedModel model;
  if (!checkpoint.empty()) {
    auto ck = load_checkpoint(checkpoint);
    cfg = ck.config;
    model = std::move(ck.model);
    if (!c.config.empty()) cfg.dataset = experiment(c).dataset;
    if (c.seed) cfg.dataset.seed = *c.seed;
    if (!c.out.empty()) cfg.output_dir = c.out;
  } else {
    cfg = experiment(c);
    const auto ds = generate_dataset(cfg.dataset);
    model = init_model(cfg, ds);
  }
  const auto ds = generate_dataset(cfg.dataset);
  RunRecord rec;
  rec.run_id = run_id(cfg);
  rec.config_hash = config_hash(cfg);
  rec.method = method_label(cfg);
  rec.seed = cfg.seed;
  if (cfg.reweight.kind == ReweightSpec::Kind::fractional) rec.alpha = cfg.reweight.alpha;
  if (cfg.target.kind == TargetSpec::Kind::trie_marginal) rec.beta = cfg.target.beta;
  rec.metrics = evaluate_model(model, ds.eval, cfg.eval_ks);
  const fs::path dir = fs::path(cfg.output_dir) / "runs" / rec.run_id;
  fs::create_directories(dir);
  std::ofstream csv(dir / "eval.csv");
  detail::write_metrics_csv(csv, {rec}, cfg.eval_ks, true);
  print_metrics(rec.run_id, rec.metrics);
  return 0;
}

int sweep_cmd(const Common& c, const std::string& axis, const std::vector<double>& values, bool verbose) {
  TrainOptions o;
  o.verbose = verbose;
  for (const auto& rec : sweep(experiment(c), axis, values, o)) print_metrics(rec.run_id, rec.metrics);
  return 0;
}

int capacity_cmd(const Common& c, const std::string& checkpoint) {
  CapacitySuiteConfig cfg;
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    cfg = capacity_config_from_json(nlohmann::json::parse(in));
  }
  if (c.seed) cfg.seed = *c.seed;
  if (!checkpoint.empty()) cfg.checkpoint = checkpoint;
  const auto report = run_capacity_suite(cfg);
  const fs::path dir = c.out.empty() ? fs::path(".") : fs::path(c.out);
  fs::create_directories(dir);
  std::ofstream(dir / "capacity.json") << report.dump(2) << '\n';
  for (const auto& r : report.at("distance_permutations"))
    std::printf("k=%d n=%d achieved %zu of %.0f (bound %.0f, %s) %s\n", r.at("k").get<int>(), r.at("n").get<int>(),
                r.at("achieved").get<std::size_t>(), r.at("total").get<double>(), r.at("upper_bound").get<double>(),
                r.at("exact").get<bool>() ? "exact" : "lower bound", r.at("verdict").get<std::string>().c_str());
  std::printf("bottleneck matrices %zu, inconsistencies %d\n", report.at("bottleneck").size(),
              report.at("inconsistencies").get<int>());
  if (report.contains("checkpoint"))
    std::printf("checkpoint E': rank %d of %d\n", report.at("checkpoint").at("witness").at("rank_e_prime").get<int>(),
                report.at("checkpoint").at("witness").at("vocab").get<int>());
  std::printf("report written to %s\n", (dir / "capacity.json").c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"autoregressive ranking lab"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "print training progress");

  Common gen, tr, ev, sw, cap;
  std::string eval_ckpt, cap_ckpt, axis;
  std::vector<double> values;

  add_common(app.add_subcommand("gen-data", "generate and write a dataset"), gen);
  add_common(app.add_subcommand("train", "train and evaluate one run"), tr);
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint (or an untrained model)");
  add_common(e, ev, false);
  e->add_option("--checkpoint", eval_ckpt, "checkpoint.json from a train run")->check(CLI::ExistingFile);
  auto* s = app.add_subcommand("sweep", "one run per alpha or beta value");
  add_common(s, sw);
  s->add_option("--axis", axis, "alpha or beta")->required()->check(CLI::IsMember({"alpha", "beta"}));
  s->add_option("--values", values, "comma-separated values")->required()->delimiter(',');
  auto* c = app.add_subcommand("capacity", "capacity analyses");
  add_common(c, cap, false);
  c->add_option("--checkpoint", cap_ckpt, "ARR checkpoint supplying the embedding matrix")->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  try {
    if (app.got_subcommand("gen-data")) return gen_data(gen);
    if (app.got_subcommand("train")) return train_cmd(tr, verbose);
    if (app.got_subcommand("eval")) {
      if (ev.config.empty() && eval_ckpt.empty()) throw std::invalid_argument("eval needs --config or --checkpoint");
      return eval_cmd(ev, eval_ckpt);
    }
    if (app.got_subcommand("sweep")) return sweep_cmd(sw, axis, values, verbose);
    if (app.got_subcommand("capacity")) return capacity_cmd(cap, cap_ckpt);
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 1;
  }
  return 0;
}
