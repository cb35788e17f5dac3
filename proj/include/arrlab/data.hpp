#pragma once

// Synthetic ranking datasets.
//
//  * Taxonomy-style: a random rooted tree; a query node's relevant documents
//    are its ancestors from the parent upwards (root excluded), nearest first.
//  * Sparse-code-style: unit vectors in R^dim are encoded with orthogonal
//    matching pursuit over a fixed dictionary; the docID is the comma-joined
//    support sorted by descending |coefficient| (e.g. "25,36,39").
//
// Both emit RankedExample records and a seed-deterministic prompt that lists
// the example's docIDs (ranked ones plus the negative) in shuffled order.

#include "arrlab/diffcore.hpp"
#include "arrlab/vocab.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace arrlab {

/// Stateless 64-bit mixer used to derive independent seed streams.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  return mix_seed(mix_seed(mix_seed(mix_seed(base) ^ a) ^ b) ^ c);
}

// ---------------------------------------------------------------------------
// taxonomy

class Taxonomy {
 public:
  Taxonomy() = default;

  /// `parents[i]` is the parent index of node i, or -1 for the root.
  Taxonomy(std::vector<std::string> names, std::vector<int> parents)
      : names_(std::move(names)), parents_(std::move(parents)) {
    validate_and_index();
  }

  std::size_t size() const { return names_.size(); }
  int root() const { return root_; }
  const std::string& name(int i) const { return names_.at(i); }
  int parent(int i) const { return parents_.at(i); }
  int depth(int i) const { return depths_.at(i); }
  const std::vector<int>& children(int i) const { return children_.at(i); }
  const std::vector<std::string>& names() const { return names_; }

  int index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown taxonomy node: " + name);
    return it->second;
  }

  /// Ancestors of `node` from its parent up to and including the root.
  std::vector<int> ancestors(int node) const {
    std::vector<int> out;
    for (int p = parents_.at(node); p != -1; p = parents_[p]) out.push_back(p);
    return out;
  }

  void write_edges(std::ostream& os) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (parents_[i] != -1) os << names_[i] << '\t' << names_[parents_[i]] << '\n';
  }

  /// Reads a `child<TAB>parent` edge list. Node order follows first appearance.
  static Taxonomy read_edges(std::istream& is) {
    std::vector<std::string> names;
    std::unordered_map<std::string, int> index;
    std::vector<std::pair<int, int>> edges;
    auto intern = [&](const std::string& s) {
      auto [it, inserted] = index.try_emplace(s, static_cast<int>(names.size()));
      if (inserted) names.push_back(s);
      return it->second;
    };
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
        throw std::invalid_argument("taxonomy line " + std::to_string(lineno) + ": expected child<TAB>parent");
      const std::string child = line.substr(0, tab), par = line.substr(tab + 1);
      if (child.empty() || par.empty() || child == par)
        throw std::invalid_argument("taxonomy line " + std::to_string(lineno) + ": invalid edge");
      const int c = intern(child);
      const int p = intern(par);
      edges.emplace_back(c, p);
    }
    std::vector<int> parents(names.size(), -1);
    for (auto [c, p] : edges) {
      if (parents[c] != -1) throw std::invalid_argument("taxonomy node has two parents: " + names[c]);
      parents[c] = p;
    }
    return Taxonomy(std::move(names), std::move(parents));
  }

 private:
  std::vector<std::string> names_;
  std::vector<int> parents_;
  std::vector<int> depths_;
  std::vector<std::vector<int>> children_;
  std::unordered_map<std::string, int> index_;
  int root_ = -1;

  void validate_and_index() {
    const int n = static_cast<int>(names_.size());
    if (n < 2) throw std::invalid_argument("taxonomy needs at least two nodes");
    if (parents_.size() != names_.size()) throw std::invalid_argument("taxonomy names/parents size mismatch");
    children_.assign(n, {});
    for (int i = 0; i < n; ++i) {
      if (!index_.emplace(names_[i], i).second) throw std::invalid_argument("duplicate node name: " + names_[i]);
      const int p = parents_[i];
      if (p == -1) {
        if (root_ != -1) throw std::invalid_argument("taxonomy has more than one root");
        root_ = i;
      } else {
        if (p < 0 || p >= n || p == i) throw std::invalid_argument("invalid parent index");
        children_[p].push_back(i);
      }
    }
    if (root_ == -1) throw std::invalid_argument("taxonomy has no root (cycle)");
    // BFS from the root; unreachable nodes imply a cycle.
    depths_.assign(n, -1);
    std::vector<int> queue{root_};
    depths_[root_] = 0;
    for (std::size_t h = 0; h < queue.size(); ++h)
      for (int c : children_[queue[h]]) {
        depths_[c] = depths_[queue[h]] + 1;
        queue.push_back(c);
      }
    if (static_cast<int>(queue.size()) != n) throw std::invalid_argument("taxonomy contains a cycle");
  }
};

/// Random rooted tree: node i attaches to a uniformly chosen earlier node that
/// still has fewer than `max_branching` children. Names are distinct random
/// lowercase strings of `name_length` letters.
inline Taxonomy gen_taxonomy(int num_nodes, int max_branching, std::uint64_t seed, int name_length = 2) {
  if (num_nodes < 2) throw std::invalid_argument("gen_taxonomy: num_nodes must be >= 2");
  if (max_branching < 1) throw std::invalid_argument("gen_taxonomy: max_branching must be >= 1");
  if (name_length < 1) throw std::invalid_argument("gen_taxonomy: name_length must be >= 1");
  double capacity = std::pow(26.0, name_length);
  if (capacity < num_nodes) throw std::invalid_argument("gen_taxonomy: name_length too short for num_nodes");

  std::mt19937_64 rng(seed);
  std::vector<std::string> names;
  std::unordered_set<std::string> used;
  std::uniform_int_distribution<int> letter(0, 25);
  while (static_cast<int>(names.size()) < num_nodes) {
    std::string s;
    for (int i = 0; i < name_length; ++i) s += static_cast<char>('a' + letter(rng));
    if (used.insert(s).second) names.push_back(s);
  }

  std::vector<int> parents(num_nodes, -1);
  std::vector<int> child_count(num_nodes, 0);
  std::vector<int> open{0};  // nodes that can still take children
  for (int i = 1; i < num_nodes; ++i) {
    std::uniform_int_distribution<std::size_t> pick(0, open.size() - 1);
    const std::size_t slot = pick(rng);
    const int p = open[slot];
    parents[i] = p;
    if (++child_count[p] == max_branching) {
      open[slot] = open.back();
      open.pop_back();
    }
    open.push_back(i);
  }
  return Taxonomy(std::move(names), std::move(parents));
}

// ---------------------------------------------------------------------------
// ranked examples

struct RankedExample {
  std::string query;
  std::vector<std::string> docids;  // rank order, rank 1 first
  std::string negative;
  std::uint64_t prompt_seed = 0;

  std::size_t list_size() const { return docids.size(); }

  void validate() const {
    if (query.empty()) throw std::invalid_argument("RankedExample: empty query");
    if (docids.empty()) throw std::invalid_argument("RankedExample: empty ranked list");
    std::unordered_set<std::string> seen;
    for (const auto& d : docids) {
      if (d.empty()) throw std::invalid_argument("RankedExample: empty docID");
      if (!seen.insert(d).second) throw std::invalid_argument("RankedExample: duplicate docID " + d);
    }
    if (negative.empty() || seen.count(negative))
      throw std::invalid_argument("RankedExample: negative must be a docID outside the ranked list");
  }

  /// Ranked docIDs followed by the negative.
  std::vector<std::string> candidates() const {
    auto out = docids;
    out.push_back(negative);
    return out;
  }
};

inline nlohmann::json to_json(const RankedExample& ex) {
  return {{"query", ex.query}, {"docids", ex.docids}, {"negative", ex.negative}, {"prompt_seed", ex.prompt_seed}};
}

inline RankedExample example_from_json(const nlohmann::json& j) {
  RankedExample ex;
  ex.query = j.at("query").get<std::string>();
  ex.docids = j.at("docids").get<std::vector<std::string>>();
  ex.negative = j.at("negative").get<std::string>();
  ex.prompt_seed = j.at("prompt_seed").get<std::uint64_t>();
  ex.validate();
  return ex;
}

inline void write_jsonl(std::ostream& os, const std::vector<RankedExample>& examples) {
  for (const auto& ex : examples) os << to_json(ex).dump() << '\n';
}

inline std::vector<RankedExample> read_jsonl(std::istream& is) {
  std::vector<RankedExample> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(example_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

/// Ranked list = ancestors of `node` nearest-first with the root excluded;
/// the negative is uniform over nodes off the root-to-query path.
inline RankedExample make_ranking_example(const Taxonomy& tax, int node, std::uint64_t seed) {
  if (node < 0 || node >= static_cast<int>(tax.size())) throw std::out_of_range("node index out of range");
  if (node == tax.root()) throw std::invalid_argument("the root cannot be a query");
  auto path = tax.ancestors(node);
  path.pop_back();  // root
  if (path.empty()) throw std::invalid_argument("query at depth 1 has an empty ranked list");

  std::vector<char> on_path(tax.size(), 0);
  on_path[node] = 1;
  on_path[tax.root()] = 1;
  for (int a : path) on_path[a] = 1;
  const auto off_path = std::count(on_path.begin(), on_path.end(), 0);
  if (off_path == 0) throw std::invalid_argument("no node available as a negative");

  RankedExample ex;
  ex.query = tax.name(node);
  for (int a : path) ex.docids.push_back(tax.name(a));
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, tax.size() - 1);
  std::size_t neg;
  do neg = pick(rng);
  while (on_path[neg]);
  ex.negative = tax.name(static_cast<int>(neg));
  ex.prompt_seed = mix_seed(seed);
  return ex;
}

// ---------------------------------------------------------------------------
// orthogonal matching pursuit

struct SparseCode {
  std::vector<int> indices;  // sorted by descending |coefficient|
  std::vector<double> coefficients;

  std::string docid() const {
    std::string out;
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (i) out += ',';
      out += std::to_string(indices[i]);
    }
    return out;
  }
};

/// `num_atoms` random unit-norm atoms in R^dim, one per row.
inline Matrix random_dictionary(int num_atoms, int dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix d(num_atoms, dim);
  for (int i = 0; i < num_atoms; ++i) {
    for (int j = 0; j < dim; ++j) d(i, j) = g(rng);
    d.row(i).normalize();
  }
  return d;
}

/// Greedy OMP over the rows of `dict`: pick the atom most correlated with the
/// residual, refit least squares on the support, repeat `k_nonzero` times.
inline SparseCode omp_sparse_code(const Vector& v, const Matrix& dict, int k_nonzero) {
  const auto atoms = dict.rows();
  if (k_nonzero < 1 || k_nonzero > atoms) throw std::invalid_argument("omp: k_nonzero out of range");
  if (dict.cols() != v.size()) throw std::invalid_argument("omp: dimension mismatch");
  for (Eigen::Index i = 0; i < atoms; ++i)
    if (std::abs(dict.row(i).norm() - 1.0) > 1e-8) throw std::invalid_argument("omp: atoms must be unit-norm");

  std::vector<int> support;
  std::vector<char> used(atoms, 0);
  Vector residual = v;
  Vector coef;
  for (int step = 0; step < k_nonzero; ++step) {
    const Vector corr = dict * residual;
    int best = -1;
    double best_val = -1.0;
    for (Eigen::Index i = 0; i < atoms; ++i) {
      if (used[i]) continue;
      if (std::abs(corr(i)) > best_val) {
        best_val = std::abs(corr(i));
        best = static_cast<int>(i);
      }
    }
    support.push_back(best);
    used[best] = 1;
    Matrix sub(v.size(), support.size());
    for (std::size_t c = 0; c < support.size(); ++c) sub.col(c) = dict.row(support[c]).transpose();
    // Minimum-norm least squares also covers a rank-deficient support.
    coef = sub.completeOrthogonalDecomposition().solve(v);
    residual = v - sub * coef;
  }

  std::vector<std::size_t> order(support.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(coef(a)) > std::abs(coef(b));
  });
  SparseCode code;
  for (auto i : order) {
    code.indices.push_back(support[i]);
    code.coefficients.push_back(coef(i));
  }
  return code;
}

// ---------------------------------------------------------------------------
// prompts

/// Serialized prompt:
///
///   query: <query>
///   docids: <d_a> || <d_b> || ... || <d_z>
///   answer:
///
/// The docID line holds the ranked docIDs and the negative in a
/// seed-deterministic shuffled order.
struct AugmentedQuery {
  std::string text;
  std::string query;
  std::vector<std::string> docids;  // shuffled order as it appears in `text`
};

inline constexpr std::string_view kPromptDelimiter = " || ";

inline AugmentedQuery serialize_prompt(const RankedExample& example, std::uint64_t seed) {
  example.validate();
  auto docs = example.candidates();
  for (const auto& d : docs)
    if (d.find("||") != std::string::npos || d.find('\n') != std::string::npos)
      throw std::invalid_argument("docID contains the prompt delimiter: " + d);
  if (example.query.find('\n') != std::string::npos) throw std::invalid_argument("query contains a newline");
  std::mt19937_64 rng(seed);
  // Explicit Fisher-Yates: std::shuffle's algorithm is implementation-defined.
  for (std::size_t i = docs.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(docs[i - 1], docs[pick(rng)]);
  }
  AugmentedQuery q;
  q.query = example.query;
  q.docids = docs;
  std::ostringstream os;
  os << "query: " << example.query << "\ndocids: ";
  for (std::size_t i = 0; i < docs.size(); ++i) os << (i ? kPromptDelimiter : "") << docs[i];
  os << "\nanswer:";
  q.text = os.str();
  return q;
}

inline AugmentedQuery serialize_prompt(const RankedExample& example) {
  return serialize_prompt(example, example.prompt_seed);
}

/// Token form of a prompt: <bos> <q> query <docs> d_a <sep> d_b ... <ans>.
inline std::vector<TokenId> tokenize_prompt(const AugmentedQuery& q) {
  std::vector<TokenId> out{Vocabulary::kBos, Vocabulary::kQuery};
  for (TokenId t : Vocabulary::tokenize(q.query)) out.push_back(t);
  out.push_back(Vocabulary::kDocs);
  for (std::size_t i = 0; i < q.docids.size(); ++i) {
    if (i) out.push_back(Vocabulary::kSep);
    for (TokenId t : Vocabulary::tokenize(q.docids[i])) out.push_back(t);
  }
  out.push_back(Vocabulary::kAnswer);
  return out;
}

// ---------------------------------------------------------------------------
// dataset generation

struct DatasetSpec {
  std::string kind = "taxonomy";  // "taxonomy" | "esci"
  std::uint64_t seed = 1;
  int train_per_query = 4;
  int eval_per_query = 1;

  // taxonomy
  int num_nodes = 200;
  int max_branching = 5;
  int name_length = 2;
  int min_depth = 2;
  std::string taxonomy_file;  // overrides the generator when set

  // sparse-code ("esci") style
  int num_docs = 600;
  int num_queries = 150;
  int dim = 32;
  int num_atoms = 100;
  int nonzero = 3;
  int min_docs = 5;
  int max_docs = 30;
  int stride = 0;  // 0 = num_docs / (2 * max_docs)
};

struct Dataset {
  std::vector<RankedExample> train;
  std::vector<RankedExample> eval;
  std::vector<std::string> documents;  // every docID in the corpus
  std::vector<std::string> queries;
};

inline Dataset generate_taxonomy_dataset(const DatasetSpec& spec, const Taxonomy& tax) {
  Dataset ds;
  ds.documents = tax.names();
  for (int node = 0; node < static_cast<int>(tax.size()); ++node) {
    if (node == tax.root() || tax.depth(node) < std::max(2, spec.min_depth)) continue;
    ds.queries.push_back(tax.name(node));
    for (int r = 0; r < spec.train_per_query; ++r)
      ds.train.push_back(make_ranking_example(tax, node, derive_seed(spec.seed, 1, node, r)));
    for (int r = 0; r < spec.eval_per_query; ++r)
      ds.eval.push_back(make_ranking_example(tax, node, derive_seed(spec.seed, 2, node, r)));
  }
  if (ds.queries.empty()) throw std::invalid_argument("taxonomy has no node deep enough to be a query");
  return ds;
}

/// Sparse-code corpus: OMP docIDs over a random dictionary, queries rank the
/// corpus by inner product and keep every `stride`-th document.
inline Dataset generate_esci_dataset(const DatasetSpec& spec) {
  if (spec.min_docs < 1 || spec.max_docs < spec.min_docs)
    throw std::invalid_argument("esci: invalid document-count range");
  const int stride = spec.stride > 0 ? spec.stride : std::max(1, spec.num_docs / (2 * spec.max_docs));
  if (static_cast<long>(stride) * (spec.max_docs - 1) + 1 >= spec.num_docs)
    throw std::invalid_argument("esci: corpus too small for max_docs at this stride");

  const Matrix dict = random_dictionary(spec.num_atoms, spec.dim, derive_seed(spec.seed, 10));
  std::mt19937_64 rng(derive_seed(spec.seed, 11));
  std::normal_distribution<double> g(0.0, 1.0);
  auto unit = [&] {
    Vector v(spec.dim);
    for (int j = 0; j < spec.dim; ++j) v(j) = g(rng);
    return Vector(v.normalized());
  };

  Matrix docs(spec.num_docs, spec.dim);
  std::unordered_set<std::string> taken;
  Dataset ds;
  for (int i = 0; i < spec.num_docs; ++i) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) throw std::runtime_error("esci: could not draw a unique docID");
      Vector v = unit();
      auto id = omp_sparse_code(v, dict, spec.nonzero).docid();
      if (taken.insert(id).second) {
        docs.row(i) = v.transpose();
        ds.documents.push_back(id);
        break;
      }
    }
  }

  std::unordered_set<std::string> query_names;
  std::uniform_int_distribution<int> count(spec.min_docs, spec.max_docs);
  for (int qi = 0; qi < spec.num_queries; ++qi) {
    Vector q;
    std::string qname;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) throw std::runtime_error("esci: could not draw a unique query");
      q = unit();
      qname = omp_sparse_code(q, dict, spec.nonzero).docid();
      if (query_names.insert(qname).second) break;
    }
    const Vector sims = docs * q;
    std::vector<int> order(spec.num_docs);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sims(a) > sims(b); });
    const int nq = count(rng);
    RankedExample base;
    base.query = qname;
    std::unordered_set<int> chosen;
    for (int r = 0; r < nq; ++r) {
      base.docids.push_back(ds.documents[order[r * stride]]);
      chosen.insert(order[r * stride]);
    }
    ds.queries.push_back(qname);
    auto emit = [&](int split, int rep) {
      RankedExample ex = base;
      std::mt19937_64 nrng(derive_seed(spec.seed, 12 + split, qi, rep));
      std::uniform_int_distribution<int> pick(0, spec.num_docs - 1);
      int neg;
      do neg = pick(nrng);
      while (chosen.count(neg));
      ex.negative = ds.documents[neg];
      ex.prompt_seed = derive_seed(spec.seed, 20 + split, qi, rep);
      ex.validate();
      return ex;
    };
    for (int r = 0; r < spec.train_per_query; ++r) ds.train.push_back(emit(0, r));
    for (int r = 0; r < spec.eval_per_query; ++r) ds.eval.push_back(emit(1, r));
  }
  return ds;
}

inline Dataset generate_dataset(const DatasetSpec& spec, Taxonomy* taxonomy_out = nullptr) {
  if (spec.kind == "taxonomy") {
    Taxonomy tax;
    if (!spec.taxonomy_file.empty()) {
      std::ifstream in(spec.taxonomy_file);
      if (!in) throw std::runtime_error("cannot open taxonomy file: " + spec.taxonomy_file);
      tax = Taxonomy::read_edges(in);
    } else {
      tax = gen_taxonomy(spec.num_nodes, spec.max_branching, derive_seed(spec.seed, 0), spec.name_length);
    }
    auto ds = generate_taxonomy_dataset(spec, tax);
    if (taxonomy_out) *taxonomy_out = std::move(tax);
    return ds;
  }
  if (spec.kind == "esci") return generate_esci_dataset(spec);
  throw std::invalid_argument("unknown dataset kind: " + spec.kind);
}

}  // namespace arrlab
