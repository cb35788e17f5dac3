#pragma once

// Experiment plumbing: configuration, training loops for the three scorer
// families, checkpoints, run records, sweeps and the capacity suite.
//
// Outputs of a run with id <id> under <output_dir>:
//   runs/<id>/record.jsonl   config line, one line per step, result line
//   runs/<id>/metrics.csv    run_id,method,alpha,beta,cvr,ndcg,r_at_1..r_at_K
//   runs/<id>/checkpoint.json
//   runs/<id>/curves.dat     "step loss", gnuplot-readable

#include "arrlab/capacity.hpp"
#include "arrlab/data.hpp"
#include "arrlab/encoders.hpp"
#include "arrlab/eval.hpp"
#include "arrlab/losses.hpp"
#include "arrlab/optim.hpp"
#include "arrlab/transformer.hpp"
#include "arrlab/vocab.hpp"

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace arrlab {

inline constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------------------
// configuration

inline nlohmann::json to_json(const DatasetSpec& s) {
  return {{"kind", s.kind},
          {"seed", s.seed},
          {"train_per_query", s.train_per_query},
          {"eval_per_query", s.eval_per_query},
          {"num_nodes", s.num_nodes},
          {"max_branching", s.max_branching},
          {"name_length", s.name_length},
          {"min_depth", s.min_depth},
          {"taxonomy_file", s.taxonomy_file},
          {"num_docs", s.num_docs},
          {"num_queries", s.num_queries},
          {"dim", s.dim},
          {"num_atoms", s.num_atoms},
          {"nonzero", s.nonzero},
          {"min_docs", s.min_docs},
          {"max_docs", s.max_docs},
          {"stride", s.stride}};
}

inline DatasetSpec dataset_from_json(const nlohmann::json& j) {
  DatasetSpec s;
  s.kind = j.value("kind", s.kind);
  s.seed = j.value("seed", s.seed);
  s.train_per_query = j.value("train_per_query", s.train_per_query);
  s.eval_per_query = j.value("eval_per_query", s.eval_per_query);
  s.num_nodes = j.value("num_nodes", s.num_nodes);
  s.max_branching = j.value("max_branching", s.max_branching);
  s.name_length = j.value("name_length", s.name_length);
  s.min_depth = j.value("min_depth", s.min_depth);
  s.taxonomy_file = j.value("taxonomy_file", s.taxonomy_file);
  s.num_docs = j.value("num_docs", s.num_docs);
  s.num_queries = j.value("num_queries", s.num_queries);
  s.dim = j.value("dim", s.dim);
  s.num_atoms = j.value("num_atoms", s.num_atoms);
  s.nonzero = j.value("nonzero", s.nonzero);
  s.min_docs = j.value("min_docs", s.min_docs);
  s.max_docs = j.value("max_docs", s.max_docs);
  s.stride = j.value("stride", s.stride);
  return s;
}

inline nlohmann::json to_json(const ArrConfig& c) {
  return {{"width", c.width},       {"layers", c.layers},           {"heads", c.heads},
          {"ff_width", c.ff_width}, {"max_context", c.max_context}, {"final_norm", c.final_norm}};
}

inline ArrConfig arr_config_from_json(const nlohmann::json& j) {
  ArrConfig c;
  c.width = j.value("width", c.width);
  c.ff_width = j.value("ff_width", 4 * c.width);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.max_context = j.value("max_context", c.max_context);
  c.final_norm = j.value("final_norm", c.final_norm);
  c.validate();
  return c;
}

struct ExperimentConfig {
  std::string name;  // run id; derived from the config hash when empty
  std::uint64_t seed = 0;
  std::string method = "arr";  // arr | de | ce
  DatasetSpec dataset;
  ArrConfig model;  // de / ce use model.width only
  ReweightSpec reweight;
  TargetSpec target;
  double tau = 0.05;
  OptimizerSpec optimizer;
  int steps = 1000;
  int batch_size = 16;
  std::vector<int> eval_ks{1, 2, 3, 4, 5};
  std::string output_dir = ".";

  void validate() const {
    if (method != "arr" && method != "de" && method != "ce") throw std::invalid_argument("unknown method: " + method);
    if (steps < 0) throw std::invalid_argument("steps must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
    if (eval_ks.empty()) throw std::invalid_argument("eval ks must be nonempty");
    for (int k : eval_ks)
      if (k < 1) throw std::invalid_argument("eval ks must be >= 1");
    if (method != "arr" && batch_size < 2) throw std::invalid_argument("de and ce need batch_size >= 2");
    if (method != "arr" && target.kind != TargetSpec::Kind::one_hot)
      throw std::invalid_argument("trie targets apply to the arr method only");
    if (!dataset.taxonomy_file.empty() && !std::filesystem::exists(dataset.taxonomy_file))
      throw std::invalid_argument("taxonomy file not found: " + dataset.taxonomy_file);
    model.validate();
    reweight.validate();
    target.validate();
    optimizer.validate();
  }
};

inline OptimizerSpec default_optimizer(const std::string& method) {
  OptimizerSpec s;
  if (method == "de") {
    s.kind = OptimizerSpec::Kind::sgd;
    s.lr = 1.0;
    s.momentum = 0.9;
  } else if (method == "ce") {
    s.kind = OptimizerSpec::Kind::adam;
    s.lr = 1e-3;
    s.weight_decay = 1e-3;
  } else {
    s.kind = OptimizerSpec::Kind::adam;
    s.lr = 3e-4;
  }
  return s;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"schema_version", kSchemaVersion},
          {"name", c.name},
          {"seed", c.seed},
          {"method", c.method},
          {"dataset", to_json(c.dataset)},
          {"model", to_json(c.model)},
          {"loss", {{"reweight", to_json(c.reweight)}, {"target", to_json(c.target)}, {"tau", c.tau}}},
          {"optimizer", to_json(c.optimizer)},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"eval", {{"ks", c.eval_ks}}},
          {"output_dir", c.output_dir}};
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  if (!j.contains("schema_version")) throw std::invalid_argument("config: missing schema_version");
  if (j.at("schema_version").get<int>() != kSchemaVersion)
    throw std::invalid_argument("config: unsupported schema_version " + j.at("schema_version").dump());
  ExperimentConfig c;
  c.name = j.value("name", c.name);
  c.seed = j.value("seed", c.seed);
  c.method = j.value("method", c.method);
  if (j.contains("dataset")) c.dataset = dataset_from_json(j.at("dataset"));
  if (j.contains("model")) c.model = arr_config_from_json(j.at("model"));
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    if (l.contains("reweight")) c.reweight = reweight_from_json(l.at("reweight"));
    if (l.contains("target")) c.target = target_from_json(l.at("target"));
    c.tau = l.value("tau", c.tau);
  }
  c.optimizer = default_optimizer(c.method);
  if (j.contains("optimizer")) c.optimizer = optimizer_from_json(j.at("optimizer"), c.optimizer);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("eval")) c.eval_ks = j.at("eval").value("ks", c.eval_ks);
  c.output_dir = j.value("output_dir", c.output_dir);
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  return config_from_json(nlohmann::json::parse(in));
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Hash of everything that affects results (name and output_dir excluded).
inline std::string config_hash(const ExperimentConfig& c) {
  auto j = to_json(c);
  j.erase("name");
  j.erase("output_dir");
  return hex64(fnv1a(j.dump()));
}

inline std::string run_id(const ExperimentConfig& c) {
  if (!c.name.empty()) return c.name;
  return c.method + "-" + config_hash(c).substr(0, 10) + "-s" + std::to_string(c.seed);
}

inline std::string method_label(const ExperimentConfig& c) {
  return c.method + ":" + to_string(c.reweight.kind) + ":" + to_string(c.target.kind);
}

// ---------------------------------------------------------------------------
// models and checkpoints

inline nlohmann::json to_json(const ParamSet& p) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, t] : p) j[name] = {{"shape", t.shape}, {"data", t.data}};
  return j;
}

/// Overwrites the tensors of `p` from JSON; names and shapes must match exactly.
inline void load_params(ParamSet& p, const nlohmann::json& j) {
  if (j.size() != p.tensor_count()) throw std::invalid_argument("checkpoint: tensor count mismatch");
  for (auto& [name, t] : p) {
    if (!j.contains(name)) throw std::invalid_argument("checkpoint: missing tensor " + name);
    const auto& e = j.at(name);
    if (e.at("shape").get<std::vector<std::size_t>>() != t.shape)
      throw std::invalid_argument("checkpoint: shape mismatch for " + name);
    auto data = e.at("data").get<std::vector<double>>();
    if (data.size() != t.data.size()) throw std::invalid_argument("checkpoint: size mismatch for " + name);
    t.data = std::move(data);
  }
}

/// One of the three scorers, tagged by method.
struct TrainedModel {
  std::string method;
  ArrModel arr;
  DeTable de;
  CeMlp ce;

  CandidateScorer scorer() const {
    if (method == "arr") return arr_scorer(arr);
    if (method == "de")
      return [this](const RankedExample& ex) {
        std::vector<double> s;
        for (const auto& c : ex.candidates()) s.push_back(de.score(query_key(ex.query), doc_key(c)));
        return s;
      };
    return [this](const RankedExample& ex) {
      std::vector<double> s;
      for (const auto& c : ex.candidates()) s.push_back(ce.score(query_key(ex.query), doc_key(c)));
      return s;
    };
  }

  ParamSet& params() { return method == "arr" ? arr.params() : method == "de" ? de.params() : ce.params(); }
  const ParamSet& params() const {
    return method == "arr" ? arr.params() : method == "de" ? de.params() : ce.params();
  }
};

inline std::vector<std::string> table_ids(const Dataset& ds) {
  std::vector<std::string> ids;
  for (const auto& q : ds.queries) ids.push_back(query_key(q));
  for (const auto& d : ds.documents) ids.push_back(doc_key(d));
  return ids;
}

inline std::vector<bool> docid_mask_for(const std::vector<std::string>& documents) {
  std::vector<bool> mask(Vocabulary::size(), false);
  mask[Vocabulary::kEod] = true;
  for (const auto& d : documents)
    for (TokenId t : Vocabulary::tokenize(d)) mask[t] = true;
  return mask;
}

inline TrainedModel init_model(const ExperimentConfig& c, const Dataset& ds) {
  TrainedModel m;
  m.method = c.method;
  const auto seed = derive_seed(c.seed, 100);
  if (c.method == "arr") {
    m.arr = ArrModel(c.model, seed);
    m.arr.set_docid_mask(docid_mask_for(ds.documents));
  } else if (c.method == "de") {
    m.de = DeTable(table_ids(ds), c.model.width, seed);
  } else {
    m.ce = CeMlp(table_ids(ds), c.model.width, seed);
  }
  return m;
}

inline nlohmann::json checkpoint_json(const ExperimentConfig& c, const TrainedModel& m) {
  nlohmann::json j{{"schema_version", kSchemaVersion}, {"config", to_json(c)}, {"method", m.method}};
  if (m.method == "arr") j["docid_mask"] = m.arr.docid_mask();
  if (m.method == "de") j["ids"] = m.de.ids().ids();
  if (m.method == "ce") j["ids"] = m.ce.ids().ids();
  j["params"] = to_json(m.params());
  return j;
}

inline void save_checkpoint(const std::string& path, const ExperimentConfig& c, const TrainedModel& m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out << checkpoint_json(c, m).dump() << '\n';
}

struct Checkpoint {
  ExperimentConfig config;
  TrainedModel model;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  const auto j = nlohmann::json::parse(in);
  Checkpoint ck;
  ck.config = config_from_json(j.at("config"));
  ck.model.method = j.at("method").get<std::string>();
  if (ck.model.method == "arr") {
    ck.model.arr = ArrModel(ck.config.model, 0);
    ck.model.arr.set_docid_mask(j.at("docid_mask").get<std::vector<bool>>());
  } else if (ck.model.method == "de") {
    ck.model.de = DeTable(j.at("ids").get<std::vector<std::string>>(), ck.config.model.width, 0);
  } else if (ck.model.method == "ce") {
    ck.model.ce = CeMlp(j.at("ids").get<std::vector<std::string>>(), ck.config.model.width, 0);
  } else {
    throw std::invalid_argument("checkpoint: unknown method " + ck.model.method);
  }
  load_params(ck.model.params(), j.at("params"));
  return ck;
}

/// Rows of the tied token embedding for the given docID tokens.
inline Matrix embedding_rows(const ArrModel& m, std::span<const TokenId> tokens) {
  const auto& e = m.params().at("tok_emb").matrix();
  Matrix out(tokens.size(), e.cols());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= e.rows()) throw std::out_of_range("token outside vocabulary");
    out.row(i) = e.row(tokens[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// training

struct RunRecord {
  std::string run_id;
  std::string config_hash;
  std::string method;
  std::uint64_t seed = 0;
  std::vector<double> loss_curve;
  MetricsReport metrics;
  double wall_clock_seconds = 0.0;
  std::optional<double> alpha, beta;
};

inline nlohmann::json to_json(const MetricsReport& m) {
  nlohmann::json r = nlohmann::json::object();
  for (const auto& [k, v] : m.recall) r[std::to_string(k)] = v;
  return {{"cvr", m.cvr}, {"ndcg", m.ndcg}, {"recall", r}, {"examples", m.examples}};
}

inline MetricsReport evaluate_model(const TrainedModel& m, const std::vector<RankedExample>& examples,
                                    std::span<const int> ks) {
  return evaluate(examples, m.scorer(), ks);
}

namespace detail {

/// Epoch-wise shuffled stream of indices in [0, n).
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    if (n == 0) throw std::invalid_argument("no training data");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    shuffle();
  }
  std::vector<std::size_t> next(std::size_t b) {
    std::vector<std::size_t> out;
    while (out.size() < b) {
      if (pos_ == order_.size()) shuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void shuffle() {
    for (std::size_t i = order_.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order_[i - 1], order_[pick(rng_)]);
    }
    pos_ = 0;
  }
  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t pos_ = 0;
};

struct PairItem {
  std::string query;
  std::string doc;
  int rank = 1;
  int list_size = 1;
};

/// Every (query, d_r) pair with positive weight.
inline std::vector<PairItem> pair_items(const std::vector<RankedExample>& train, const ReweightSpec& reweight) {
  std::vector<PairItem> out;
  for (const auto& ex : train) {
    const int nq = static_cast<int>(ex.list_size());
    for (int r = 1; r <= nq; ++r)
      if (lambda_weight(reweight, r, nq) > 0.0) out.push_back({ex.query, ex.docids[r - 1], r, nq});
  }
  return out;
}

/// Uniform permutation of [0, n) without fixed points (rejection sampling), n >= 2.
inline std::vector<std::size_t> derangement(std::size_t n, std::mt19937_64& rng) {
  if (n < 2) throw std::invalid_argument("derangement needs n >= 2");
  std::vector<std::size_t> p(n);
  while (true) {
    std::iota(p.begin(), p.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(p[i - 1], p[pick(rng)]);
    }
    bool fixed = false;
    for (std::size_t i = 0; i < n; ++i) fixed = fixed || p[i] == i;
    if (!fixed) return p;
  }
}

inline void check_finite(double loss, int step) {
  if (!std::isfinite(loss))
    throw std::runtime_error("training diverged: non-finite loss at step " + std::to_string(step));
}

/// Step callback: (step, loss).
using StepHook = std::function<void(int, double)>;

inline void train_arr(const ExperimentConfig& c, const Dataset& ds, TrainedModel& m, const StepHook& hook) {
  std::vector<StoicalItem> items;
  std::vector<int> ranks;
  for (const auto& ex : ds.train) {
    ranks.resize(ex.list_size());
    std::iota(ranks.begin(), ranks.end(), 1);
    items.push_back(build_stoical_item(ex, ranks, c.reweight, c.target));
  }
  Optimizer opt(c.optimizer, m.arr.params());
  BatchSampler sampler(items.size(), derive_seed(c.seed, 200));
  ParamSet grad = m.arr.params().zeros_like();
  for (int step = 0; step < c.steps; ++step) {
    grad.set_zero();
    double loss = 0.0;
    const auto batch = sampler.next(static_cast<std::size_t>(c.batch_size));
    for (std::size_t i : batch)
      if (!items[i].targets.empty()) loss += m.arr.loss(items[i].seq, items[i].targets, &grad);
    loss /= static_cast<double>(batch.size());
    check_finite(loss, step);
    grad.scale(1.0 / static_cast<double>(batch.size()));
    opt.step(m.arr.params(), grad);
    hook(step, loss);
  }
}

inline void train_de(const ExperimentConfig& c, const Dataset& ds, TrainedModel& m, const StepHook& hook) {
  const auto pairs = pair_items(ds.train, c.reweight);
  Optimizer opt(c.optimizer, m.de.params());
  BatchSampler sampler(pairs.size(), derive_seed(c.seed, 201));
  ParamSet grad = m.de.params().zeros_like();
  const int n = m.de.width();
  for (int step = 0; step < c.steps; ++step) {
    const auto batch = sampler.next(static_cast<std::size_t>(c.batch_size));
    const auto b = static_cast<Eigen::Index>(batch.size());
    Matrix q(b, n), d(b, n);
    std::vector<int> ranks, sizes;
    std::vector<std::size_t> qrow, drow;
    for (Eigen::Index i = 0; i < b; ++i) {
      const auto& p = pairs[batch[i]];
      qrow.push_back(m.de.ids().row(query_key(p.query)));
      drow.push_back(m.de.ids().row(doc_key(p.doc)));
      q.row(i) = m.de.embedding(query_key(p.query)).transpose();
      d.row(i) = m.de.embedding(doc_key(p.doc)).transpose();
      ranks.push_back(p.rank);
      sizes.push_back(p.list_size);
    }
    const auto l = de_batch_softmax_loss(q, d, ranks, sizes, c.tau, c.reweight);
    check_finite(l.value, step);
    grad.set_zero();
    auto g = grad.at("table").matrix();
    for (Eigen::Index i = 0; i < b; ++i) {
      g.row(qrow[i]) += l.grad_a.row(i);
      g.row(drow[i]) += l.grad_b.row(i);
    }
    opt.step(m.de.params(), grad);
    m.de.project_rows();
    hook(step, l.value);
  }
}

inline void train_ce(const ExperimentConfig& c, const Dataset& ds, TrainedModel& m, const StepHook& hook) {
  const auto pairs = pair_items(ds.train, c.reweight);
  Optimizer opt(c.optimizer, m.ce.params());
  BatchSampler sampler(pairs.size(), derive_seed(c.seed, 202));
  std::mt19937_64 neg_rng(derive_seed(c.seed, 203));
  ParamSet grad = m.ce.params().zeros_like();
  const auto n = static_cast<std::size_t>(m.ce.width());
  for (int step = 0; step < c.steps; ++step) {
    const auto batch = sampler.next(static_cast<std::size_t>(c.batch_size));
    const std::size_t b = batch.size();
    std::vector<double> pos(b), neg(b);
    std::vector<int> ranks, sizes;
    std::vector<CeMlp::Trace> tp(b), tn(b);
    const auto rho = derangement(b, neg_rng);
    for (std::size_t i = 0; i < b; ++i) {
      const auto& p = pairs[batch[i]];
      const auto eq = m.ce.embedding(query_key(p.query));
      const auto ed = m.ce.embedding(doc_key(p.doc));
      const auto en = m.ce.embedding(doc_key(pairs[batch[rho[i]]].doc));
      pos[i] = m.ce.forward({eq.data(), n}, {ed.data(), n}, &tp[i]);
      neg[i] = m.ce.forward({eq.data(), n}, {en.data(), n}, &tn[i]);
      ranks.push_back(p.rank);
      sizes.push_back(p.list_size);
    }
    const auto l = ce_pairwise_loss(pos, neg, ranks, sizes, c.reweight);
    check_finite(l.value, step);
    grad.set_zero();
    auto ge = grad.at("emb").matrix();
    auto scatter = [&](const std::string& qk, const std::string& dk, const Vector& dx) {
      ge.row(m.ce.ids().row(qk)) += dx.head(n).transpose();
      ge.row(m.ce.ids().row(dk)) += dx.tail(n).transpose();
    };
    for (std::size_t i = 0; i < b; ++i) {
      const auto& p = pairs[batch[i]];
      scatter(query_key(p.query), doc_key(p.doc), m.ce.backward(tp[i], l.grad_pos[i], grad));
      scatter(query_key(p.query), doc_key(pairs[batch[rho[i]]].doc), m.ce.backward(tn[i], l.grad_neg[i], grad));
    }
    opt.step(m.ce.params(), grad);
    hook(step, l.value);
  }
}

inline void write_metrics_csv(std::ostream& os, const std::vector<RunRecord>& rows, std::span<const int> ks,
                              bool header) {
  if (header) {
    os << "run_id,method,alpha,beta,cvr,ndcg";
    for (int k : ks) os << ",r_at_" << k;
    os << '\n';
  }
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    os << r.run_id << ',' << r.method << ',' << (r.alpha ? num(*r.alpha) : "") << ','
       << (r.beta ? num(*r.beta) : "") << ',' << num(r.metrics.cvr) << ',' << num(r.metrics.ndcg);
    for (int k : ks) os << ',' << (r.metrics.recall.count(k) ? num(r.metrics.recall.at(k)) : "");
    os << '\n';
  }
}

}  // namespace detail

struct TrainOptions {
  bool write_outputs = true;
  bool verbose = false;
};

struct TrainResult {
  RunRecord record;
  TrainedModel model;
  Dataset dataset;
};

/// Trains the configured method for `steps` steps and evaluates on the eval split.
inline TrainResult train_full(const ExperimentConfig& c, const TrainOptions& opts = {}) {
  c.validate();
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res;
  res.dataset = generate_dataset(c.dataset);
  res.model = init_model(c, res.dataset);

  auto& rec = res.record;
  rec.run_id = run_id(c);
  rec.config_hash = config_hash(c);
  rec.method = method_label(c);
  rec.seed = c.seed;
  if (c.reweight.kind == ReweightSpec::Kind::fractional) rec.alpha = c.reweight.alpha;
  if (c.target.kind == TargetSpec::Kind::trie_marginal) rec.beta = c.target.beta;

  namespace fs = std::filesystem;
  const fs::path dir = fs::path(c.output_dir) / "runs" / rec.run_id;
  std::ofstream record_out;
  if (opts.write_outputs) {
    fs::create_directories(dir);
    record_out.open(dir / "record.jsonl", std::ios::app);
    record_out << nlohmann::json{{"type", "config"}, {"config_hash", rec.config_hash}, {"config", to_json(c)}}.dump()
               << '\n';
  }
  const detail::StepHook hook = [&](int step, double loss) {
    rec.loss_curve.push_back(loss);
    if (record_out.is_open()) record_out << nlohmann::json{{"type", "step"}, {"step", step}, {"loss", loss}}.dump() << '\n';
    if (opts.verbose && (step % 50 == 0 || step + 1 == c.steps))
      std::fprintf(stderr, "[%s] step %d loss %.6f\n", rec.run_id.c_str(), step, loss);
  };
  if (c.method == "arr") detail::train_arr(c, res.dataset, res.model, hook);
  else if (c.method == "de") detail::train_de(c, res.dataset, res.model, hook);
  else detail::train_ce(c, res.dataset, res.model, hook);

  rec.metrics = evaluate_model(res.model, res.dataset.eval, c.eval_ks);
  rec.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (opts.write_outputs) {
    record_out << nlohmann::json{{"type", "result"},
                                 {"run_id", rec.run_id},
                                 {"seed", rec.seed},
                                 {"metrics", to_json(rec.metrics)},
                                 {"wall_clock_seconds", rec.wall_clock_seconds}}
                      .dump()
               << '\n';
    std::ofstream csv(dir / "metrics.csv");
    detail::write_metrics_csv(csv, {rec}, c.eval_ks, true);
    save_checkpoint((dir / "checkpoint.json").string(), c, res.model);
    std::ofstream curves(dir / "curves.dat");
    curves << "# step loss\n";
    char buf[64];
    for (std::size_t i = 0; i < rec.loss_curve.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%zu %.17g\n", i, rec.loss_curve[i]);
      curves << buf;
    }
  }
  return res;
}

inline RunRecord train(const ExperimentConfig& c, const TrainOptions& opts = {}) { return train_full(c, opts).record; }

// ---------------------------------------------------------------------------
// sweeps

/// One run per value of `axis` ("alpha" or "beta"); same dataset and seed for every row.
/// Rows are appended to <output_dir>/sweep.csv as they finish.
inline std::vector<RunRecord> sweep(const ExperimentConfig& base, const std::string& axis,
                                    const std::vector<double>& values, const TrainOptions& opts = {}) {
  base.validate();
  if (values.empty()) throw std::invalid_argument("sweep: empty value list");
  if (axis == "alpha") {
    if (base.reweight.kind != ReweightSpec::Kind::fractional)
      throw std::invalid_argument("sweep: alpha axis needs fractional reweighting");
  } else if (axis == "beta") {
    if (base.target.kind != TargetSpec::Kind::trie_marginal)
      throw std::invalid_argument("sweep: beta axis needs trie targets");
  } else {
    throw std::invalid_argument("sweep: unknown axis " + axis);
  }
  std::vector<ExperimentConfig> rows;
  for (double v : values) {
    auto c = base;
    if (axis == "alpha") c.reweight.alpha = v;
    else c.target.beta = v;
    c.name = (base.name.empty() ? base.method : base.name) + "-" + axis + "-" + [&] {
      std::ostringstream s;
      s << v;
      return s.str();
    }();
    c.validate();
    rows.push_back(std::move(c));
  }
  std::vector<RunRecord> out;
  const auto csv_path = std::filesystem::path(base.output_dir) / "sweep.csv";
  if (opts.write_outputs) std::filesystem::create_directories(base.output_dir);
  for (const auto& c : rows) {
    out.push_back(train(c, opts));
    if (opts.write_outputs) {
      const bool header = !std::filesystem::exists(csv_path);
      std::ofstream csv(csv_path, std::ios::app);
      detail::write_metrics_csv(csv, {out.back()}, base.eval_ks, header);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// capacity suite

struct CapacitySuiteConfig {
  std::vector<int> ks{2, 3, 4};
  std::vector<int> ns{1, 2};
  int resolution = 200;
  std::uint64_t seed = 0;
  int random_matrices = 50;
  std::vector<int> vocab_sizes{3, 4};
  std::vector<int> widths{1, 2, 3};
  std::string checkpoint;  // optional ARR checkpoint supplying E
  int checkpoint_tokens = 4;

  void validate() const {
    for (int k : ks)
      if (k < 2 || k > 6) throw std::invalid_argument("capacity: k must be in [2, 6]");
    for (int n : ns)
      if (n < 1 || n > 2) throw std::invalid_argument("capacity: n must be 1 or 2");
    for (int v : vocab_sizes)
      if (v < 1 || v > 5) throw std::invalid_argument("capacity: vocab size must be in [1, 5]");
    for (int w : widths)
      if (w < 1) throw std::invalid_argument("capacity: widths must be positive");
    if (resolution < 2 || resolution > 2000) throw std::invalid_argument("capacity: resolution must be in [2, 2000]");
    if (checkpoint_tokens < 1 || checkpoint_tokens > 5)
      throw std::invalid_argument("capacity: checkpoint_tokens must be in [1, 5]");
    if (random_matrices < 0) throw std::invalid_argument("capacity: random_matrices must be >= 0");
  }
};

inline CapacitySuiteConfig capacity_config_from_json(const nlohmann::json& j) {
  if (j.contains("schema_version") && j.at("schema_version").get<int>() != kSchemaVersion)
    throw std::invalid_argument("capacity config: unsupported schema_version");
  CapacitySuiteConfig c;
  c.ks = j.value("ks", c.ks);
  c.ns = j.value("ns", c.ns);
  c.resolution = j.value("resolution", c.resolution);
  c.seed = j.value("seed", c.seed);
  c.random_matrices = j.value("random_matrices", c.random_matrices);
  c.vocab_sizes = j.value("vocab_sizes", c.vocab_sizes);
  c.widths = j.value("widths", c.widths);
  c.checkpoint = j.value("checkpoint", c.checkpoint);
  c.checkpoint_tokens = j.value("checkpoint_tokens", c.checkpoint_tokens);
  c.validate();
  return c;
}

inline Matrix random_matrix(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

inline nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> r(m.cols());
    for (Eigen::Index j = 0; j < m.cols(); ++j) r[j] = m(i, j);
    rows.push_back(r);
  }
  return rows;
}

/// Witness + realizable-permutation analysis of one matrix, with the iff check.
inline nlohmann::json analyse_embedding(const Matrix& e, std::uint64_t seed) {
  const auto w = bottleneck_witness(e);
  const auto perms = realizable_token_permutations(e, 20000, "lp", seed);
  const bool all = perms.count() == perms.total;
  return {{"matrix", matrix_json(e)},
          {"witness", w.to_json()},
          {"permutations", perms.to_json()},
          {"consistent", all == w.full_rank}};
}

/// JSON report:
///   {"schema_version", "distance_permutations": [CapacityReport...],
///    "bottleneck": [{matrix, witness, permutations, consistent}...],
///    "checkpoint": {...} (when configured), "inconsistencies": int}
inline nlohmann::json run_capacity_suite(const CapacitySuiteConfig& c) {
  c.validate();
  nlohmann::json report{{"schema_version", kSchemaVersion}};
  std::mt19937_64 rng(derive_seed(c.seed, 300));

  auto& dp = report["distance_permutations"] = nlohmann::json::array();
  for (int n : c.ns)
    for (int k : c.ks) {
      const Matrix sites = random_matrix(k, n, rng);
      dp.push_back(count_distance_permutations(sites, c.resolution, derive_seed(c.seed, 301, k, n)).to_json());
    }

  int bad = 0;
  auto& bn = report["bottleneck"] = nlohmann::json::array();
  for (int i = 0; i < c.random_matrices; ++i) {
    const int v = c.vocab_sizes[i % c.vocab_sizes.size()];
    const int n = c.widths[(i / c.vocab_sizes.size()) % c.widths.size()];
    auto a = analyse_embedding(random_matrix(v, n, rng), derive_seed(c.seed, 302, i));
    if (!a.at("consistent").get<bool>()) ++bad;
    bn.push_back(std::move(a));
  }

  if (!c.checkpoint.empty()) {
    const auto ck = load_checkpoint(c.checkpoint);
    if (ck.model.method != "arr") throw std::invalid_argument("capacity: checkpoint is not an arr model");
    auto vocab = ck.model.arr.docid_vocabulary();
    vocab.erase(std::remove(vocab.begin(), vocab.end(), Vocabulary::kEod), vocab.end());
    if (vocab.size() > static_cast<std::size_t>(c.checkpoint_tokens)) vocab.resize(c.checkpoint_tokens);
    auto a = analyse_embedding(embedding_rows(ck.model.arr, vocab), derive_seed(c.seed, 303));
    std::vector<std::string> texts;
    for (TokenId t : vocab) texts.push_back(Vocabulary::text(t));
    a["tokens"] = texts;
    if (!a.at("consistent").get<bool>()) ++bad;
    report["checkpoint"] = std::move(a);
  }
  report["inconsistencies"] = bad;
  return report;
}

}  // namespace arrlab
