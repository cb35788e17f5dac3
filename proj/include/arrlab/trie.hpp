#pragma once

// Prefix tree over tokenized docIDs. DocID nodes carry mu(r) = 1 / r^beta and
// every node caches the sum of mu over its subtree, so per-prefix target
// distributions are a normalisation of child marginals (plus the prefix
// node's own mu, routed to the end-of-docID slot).

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace arrlab {

/// mu(r) = 1 / r^beta, evaluated in log space so huge beta underflows cleanly to 0.
inline double rank_score(int rank, double beta) {
  if (rank < 1) throw std::invalid_argument("rank must be >= 1");
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
  return std::exp(-beta * std::log(static_cast<double>(rank)));
}

template <typename Token>
struct RankedTokens {
  std::vector<Token> tokens;
  int rank = 1;
};

/// Next-token targets at one prefix. `end_of_docid` is the mass on terminating
/// the docID at the prefix node.
template <typename Token>
struct TargetDistribution {
  std::vector<std::pair<Token, double>> tokens;  // ordered by token
  double end_of_docid = 0.0;
  std::size_t timestep = 0;  // 0-based position of the predicted token

  double total() const {
    double s = end_of_docid;
    for (const auto& [tok, p] : tokens) s += p;
    return s;
  }
  double prob(const Token& tok) const {
    for (const auto& [t, p] : tokens)
      if (t == tok) return p;
    return 0.0;
  }
};

template <typename Token>
class PrefixTrie {
 public:
  struct Node {
    Token token{};
    std::optional<int> rank;  // set on docID nodes
    double marginal = 0.0;
    std::map<Token, std::size_t> children;
  };

  PrefixTrie() { nodes_.emplace_back(); }

  /// Builds the trie over `docids`; ranks must be distinct and >= 1.
  /// Ranks need not start at 1, so a trie over the tail d_r..d_n is allowed.
  static PrefixTrie build(std::span<const RankedTokens<Token>> docids, double beta) {
    if (!(beta > 0.0)) throw std::invalid_argument("beta must be positive");
    PrefixTrie trie;
    trie.beta_ = beta;
    std::vector<bool> seen;
    for (const auto& d : docids) {
      if (d.rank < 1) throw std::invalid_argument("docID rank must be >= 1");
      if (static_cast<std::size_t>(d.rank) >= seen.size()) seen.resize(d.rank + 1, false);
      if (seen[d.rank]) throw std::invalid_argument("duplicate docID rank");
      seen[d.rank] = true;
      trie.insert(d.tokens, d.rank);
    }
    trie.recompute_marginals();
    return trie;
  }

  double beta() const { return beta_; }
  const Node& root() const { return nodes_.front(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  std::size_t node_count() const { return nodes_.size(); }
  std::size_t docid_count() const { return docid_count_; }

  /// Index of the node reached by `prefix`, or nullopt if it leaves the trie.
  std::optional<std::size_t> find(std::span<const Token> prefix) const {
    std::size_t cur = 0;
    for (const auto& tok : prefix) {
      auto it = nodes_[cur].children.find(tok);
      if (it == nodes_[cur].children.end()) return std::nullopt;
      cur = it->second;
    }
    return cur;
  }

  bool contains_docid(std::span<const Token> tokens) const {
    auto idx = find(tokens);
    return idx && nodes_[*idx].rank.has_value();
  }

  struct Continuations {
    std::vector<Token> tokens;
    bool end_of_docid = false;
  };

  Continuations valid_continuations(std::span<const Token> prefix) const {
    const auto idx = require(prefix);
    Continuations out;
    for (const auto& [tok, child] : nodes_[idx].children) out.tokens.push_back(tok);
    out.end_of_docid = nodes_[idx].rank.has_value();
    return out;
  }

  /// Normalised rank-aware targets for the token following `prefix`.
  TargetDistribution<Token> target_distribution(std::span<const Token> prefix) const {
    const auto idx = require(prefix);
    const Node& n = nodes_[idx];
    TargetDistribution<Token> out;
    out.timestep = prefix.size();
    double z = 0.0;
    for (const auto& [tok, child] : n.children) {
      out.tokens.emplace_back(tok, nodes_[child].marginal);
      z += nodes_[child].marginal;
    }
    if (n.rank) {
      out.end_of_docid = rank_score(*n.rank, beta_);
      z += out.end_of_docid;
    }
    if (out.tokens.empty() && !n.rank) throw std::logic_error("trie node without continuations");
    if (!(z > 0.0)) {
      // Every score underflowed; fall back to the best-ranked docID in the subtree.
      return one_hot_towards_best(idx, prefix.size());
    }
    for (auto& [tok, p] : out.tokens) p /= z;
    out.end_of_docid /= z;
    return out;
  }

  // -- serialisation: nested {token, rank?, children[]} --------------------

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["beta"] = beta_;
    j["root"] = node_to_json(0);
    return j;
  }

  static PrefixTrie from_json(const nlohmann::json& j) {
    PrefixTrie trie;
    trie.beta_ = j.at("beta").get<double>();
    trie.node_from_json(j.at("root"), 0);
    trie.recompute_marginals();
    return trie;
  }

 private:
  std::vector<Node> nodes_;
  double beta_ = 1.0;
  std::size_t docid_count_ = 0;

  std::size_t require(std::span<const Token> prefix) const {
    auto idx = find(prefix);
    if (!idx) throw std::out_of_range("prefix is not a path in the trie");
    return *idx;
  }

  void insert(const std::vector<Token>& tokens, int rank) {
    if (tokens.empty()) throw std::invalid_argument("empty docID tokenization");
    std::size_t cur = 0;
    for (const auto& tok : tokens) {
      auto it = nodes_[cur].children.find(tok);
      if (it == nodes_[cur].children.end()) {
        const std::size_t fresh = nodes_.size();
        Node child;
        child.token = tok;
        nodes_.push_back(std::move(child));
        nodes_[cur].children.emplace(tok, fresh);
        cur = fresh;
      } else {
        cur = it->second;
      }
    }
    if (nodes_[cur].rank) throw std::invalid_argument("duplicate docID token sequence");
    nodes_[cur].rank = rank;
    ++docid_count_;
  }

  // Children always have larger indices than their parent.
  void recompute_marginals() {
    docid_count_ = 0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      n.marginal = n.rank ? rank_score(*n.rank, beta_) : 0.0;
      if (n.rank) ++docid_count_;
      for (const auto& [tok, child] : n.children) n.marginal += nodes_[child].marginal;
    }
  }

  int best_rank(std::size_t idx) const {
    int best = nodes_[idx].rank.value_or(std::numeric_limits<int>::max());
    for (const auto& [tok, child] : nodes_[idx].children) best = std::min(best, best_rank(child));
    return best;
  }

  TargetDistribution<Token> one_hot_towards_best(std::size_t idx, std::size_t t) const {
    TargetDistribution<Token> out;
    out.timestep = t;
    const int best = best_rank(idx);
    for (const auto& [tok, child] : nodes_[idx].children)
      out.tokens.emplace_back(tok, best_rank(child) == best ? 1.0 : 0.0);
    out.end_of_docid = nodes_[idx].rank == best ? 1.0 : 0.0;
    return out;
  }

  nlohmann::json node_to_json(std::size_t idx) const {
    const Node& n = nodes_[idx];
    nlohmann::json j;
    if (idx == 0)
      j["token"] = nullptr;
    else
      j["token"] = n.token;
    if (n.rank) j["rank"] = *n.rank;
    j["children"] = nlohmann::json::array();
    for (const auto& [tok, child] : n.children) j["children"].push_back(node_to_json(child));
    return j;
  }

  void node_from_json(const nlohmann::json& j, std::size_t idx) {
    if (j.contains("rank")) nodes_[idx].rank = j.at("rank").get<int>();
    for (const auto& cj : j.at("children")) {
      Token tok = cj.at("token").template get<Token>();
      if (nodes_[idx].children.count(tok)) throw std::invalid_argument("duplicate child token in trie JSON");
      const std::size_t fresh = nodes_.size();
      Node child;
      child.token = tok;
      nodes_.push_back(std::move(child));
      nodes_[idx].children.emplace(tok, fresh);
      node_from_json(cj, fresh);
    }
  }
};

}  // namespace arrlab
