#pragma once

// Rank-aware training objectives.
//
//  * stoical: lambda(r) * sum_t CE(y(r,t), p(. | prompt, d_r[<t])), teacher
//    forced along d_r's tokens including <eod>. y is one-hot or the trie
//    marginal target.
//  * de_batch_softmax_loss: lambda-weighted in-batch softmax over inner
//    products divided by tau.
//  * ce_pairwise_loss: lambda-normalised log-sigmoid on positives plus a 1/B
//    weighted log-sigmoid on permuted negatives.

#include "arrlab/data.hpp"
#include "arrlab/diffcore.hpp"
#include "arrlab/transformer.hpp"
#include "arrlab/trie.hpp"
#include "arrlab/vocab.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace arrlab {

struct ReweightSpec {
  enum class Kind { fractional, stepwise, indicator };
  Kind kind = Kind::indicator;
  double alpha = 1.0;

  static ReweightSpec fractional(double a) { return {Kind::fractional, a}; }
  static ReweightSpec stepwise() { return {Kind::stepwise, 1.0}; }
  static ReweightSpec indicator() { return {Kind::indicator, 1.0}; }

  void validate() const {
    if (kind == Kind::fractional && !(alpha > 0.0)) throw std::invalid_argument("fractional reweighting needs alpha > 0");
  }
};

struct TargetSpec {
  enum class Kind { one_hot, trie_marginal };
  Kind kind = Kind::one_hot;
  double beta = 1.0;
  bool combined = false;  // trie for d_r is built over d_r..d_n only

  static TargetSpec one_hot() { return {}; }
  static TargetSpec trie(double b, bool comb = false) { return {Kind::trie_marginal, b, comb}; }

  void validate() const {
    if (kind == Kind::trie_marginal && !(beta > 0.0)) throw std::invalid_argument("trie targets need beta > 0");
  }
};

inline std::string to_string(ReweightSpec::Kind k) {
  switch (k) {
    case ReweightSpec::Kind::fractional: return "fractional";
    case ReweightSpec::Kind::stepwise: return "stepwise";
    case ReweightSpec::Kind::indicator: return "indicator";
  }
  return "?";
}

inline std::string to_string(TargetSpec::Kind k) {
  return k == TargetSpec::Kind::one_hot ? "one_hot" : "trie_marginal";
}

inline nlohmann::json to_json(const ReweightSpec& r) {
  nlohmann::json j{{"kind", to_string(r.kind)}};
  if (r.kind == ReweightSpec::Kind::fractional) j["alpha"] = r.alpha;
  return j;
}

inline nlohmann::json to_json(const TargetSpec& t) {
  nlohmann::json j{{"kind", to_string(t.kind)}};
  if (t.kind == TargetSpec::Kind::trie_marginal) {
    j["beta"] = t.beta;
    j["combined"] = t.combined;
  }
  return j;
}

inline ReweightSpec reweight_from_json(const nlohmann::json& j) {
  ReweightSpec r;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "fractional") {
    r.kind = ReweightSpec::Kind::fractional;
    r.alpha = j.at("alpha").get<double>();
  } else if (kind == "stepwise") {
    r.kind = ReweightSpec::Kind::stepwise;
  } else if (kind == "indicator") {
    r.kind = ReweightSpec::Kind::indicator;
  } else {
    throw std::invalid_argument("unknown reweight kind: " + kind);
  }
  r.validate();
  return r;
}

inline TargetSpec target_from_json(const nlohmann::json& j) {
  TargetSpec t;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "one_hot") {
    t.kind = TargetSpec::Kind::one_hot;
  } else if (kind == "trie_marginal" || kind == "trie") {
    t.kind = TargetSpec::Kind::trie_marginal;
    t.beta = j.at("beta").get<double>();
    t.combined = j.value("combined", false);
  } else {
    throw std::invalid_argument("unknown target kind: " + kind);
  }
  t.validate();
  return t;
}

/// lambda(r): fractional 1/r^alpha, stepwise (n_q - r + 1)/n_q, indicator [r == 1].
inline double lambda_weight(const ReweightSpec& spec, int r, int n_q) {
  if (n_q < 1 || r < 1 || r > n_q) throw std::out_of_range("lambda_weight: rank outside [1, n_q]");
  switch (spec.kind) {
    case ReweightSpec::Kind::fractional: return std::exp(-spec.alpha * std::log(static_cast<double>(r)));
    case ReweightSpec::Kind::stepwise: return static_cast<double>(n_q - r + 1) / n_q;
    case ReweightSpec::Kind::indicator: return r == 1 ? 1.0 : 0.0;
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// SToICaL

/// Everything needed to evaluate the loss of one example: the packed
/// prompt + continuations and one weighted soft target per predicted token.
struct StoicalItem {
  PackedSequence seq;
  std::vector<TokenTarget> targets;
};

namespace detail {

// One target per entry of `docid_with_eod`: the distribution at each proper prefix.
inline std::vector<TokenTarget> trie_targets(const PrefixTrie<TokenId>& trie, std::span<const TokenId> docid,
                                             std::span<const std::size_t> rows, double weight) {
  std::vector<TokenTarget> out;
  for (std::size_t t = 0; t < docid.size(); ++t) {
    const auto dist = trie.target_distribution(docid.first(t));
    TokenTarget tgt;
    tgt.row = rows[t];
    tgt.weight = weight;
    for (const auto& [tok, p] : dist.tokens)
      if (p > 0.0) tgt.dist.emplace_back(tok, p);
    if (dist.end_of_docid > 0.0) tgt.dist.emplace_back(Vocabulary::kEod, dist.end_of_docid);
    out.push_back(std::move(tgt));
  }
  return out;
}

inline PrefixTrie<TokenId> build_rank_trie(const std::vector<std::vector<TokenId>>& tokenized, int min_rank,
                                           double beta) {
  std::vector<RankedTokens<TokenId>> entries;
  for (std::size_t i = static_cast<std::size_t>(min_rank - 1); i < tokenized.size(); ++i)
    entries.push_back({tokenized[i], static_cast<int>(i) + 1});
  return PrefixTrie<TokenId>::build(entries, beta);
}

}  // namespace detail

/// Packs the prompt and, for each rank in `ranks` with lambda(r) > 0, the
/// teacher-forced tokens of d_r. Target weights carry lambda(r) * `scale`.
inline StoicalItem build_stoical_item(const RankedExample& example, std::span<const int> ranks,
                                      const ReweightSpec& reweight, const TargetSpec& target, double scale = 1.0) {
  reweight.validate();
  target.validate();
  const int n_q = static_cast<int>(example.list_size());
  const auto prompt = tokenize_prompt(serialize_prompt(example));

  std::vector<std::vector<TokenId>> tokenized;  // without <eod>
  for (const auto& d : example.docids) tokenized.push_back(Vocabulary::tokenize(d));

  StoicalItem item;
  item.seq = PackedSequence::causal(prompt);
  const std::size_t last_prompt_row = prompt.size() - 1;

  // With more than one contributing rank, the trie for d_r covers d_r..d_n only.
  const bool combined = target.combined || reweight.kind != ReweightSpec::Kind::indicator;
  std::optional<PrefixTrie<TokenId>> shared_trie;
  if (target.kind == TargetSpec::Kind::trie_marginal && !combined)
    shared_trie = detail::build_rank_trie(tokenized, 1, target.beta);

  for (int r : ranks) {
    const double lambda = lambda_weight(reweight, r, n_q);
    if (lambda == 0.0) continue;
    const auto& toks = tokenized[r - 1];
    std::vector<TokenId> with_eod = toks;
    with_eod.push_back(Vocabulary::kEod);

    // Inputs are d_r[0..m-2]; row for predicting token t is the row of token t-1.
    std::vector<std::size_t> rows{last_prompt_row};
    const std::size_t first =
        item.seq.add_segment(std::span<const TokenId>(with_eod).first(with_eod.size() - 1), static_cast<int>(prompt.size()));
    for (std::size_t t = 1; t < with_eod.size(); ++t) rows.push_back(first + t - 1);

    const double w = lambda * scale;
    if (target.kind == TargetSpec::Kind::one_hot) {
      for (std::size_t t = 0; t < with_eod.size(); ++t) item.targets.push_back({rows[t], {{with_eod[t], 1.0}}, w});
    } else {
      // Prefixes d_r[<t] for t = 0..m-1; the last one is the full docID (the <eod> step).
      const auto trie = combined ? detail::build_rank_trie(tokenized, r, target.beta) : *shared_trie;
      for (auto& t : detail::trie_targets(trie, with_eod, rows, w)) item.targets.push_back(std::move(t));
    }
  }
  return item;
}

/// Loss for a single (q, d_r, r) point.
inline ValueAndGrad stoical_loss(const ArrModel& model, const RankedExample& example, int r,
                                 const ReweightSpec& reweight, const TargetSpec& target) {
  if (r < 1 || r > static_cast<int>(example.list_size())) throw std::out_of_range("stoical_loss: rank out of range");
  const int ranks[] = {r};
  const auto item = build_stoical_item(example, ranks, reweight, target);
  ValueAndGrad out{0.0, model.params().zeros_like()};
  if (!item.targets.empty()) out.value = model.loss(item.seq, item.targets, &out.grad);
  return out;
}

/// Sum of stoical_loss over every rank of the example, evaluated in one packed pass.
inline ValueAndGrad stoical_example_loss(const ArrModel& model, const RankedExample& example,
                                         const ReweightSpec& reweight, const TargetSpec& target) {
  std::vector<int> ranks(example.list_size());
  std::iota(ranks.begin(), ranks.end(), 1);
  const auto item = build_stoical_item(example, ranks, reweight, target);
  ValueAndGrad out{0.0, model.params().zeros_like()};
  if (!item.targets.empty()) out.value = model.loss(item.seq, item.targets, &out.grad);
  return out;
}

// ---------------------------------------------------------------------------
// dual encoder: weighted batch softmax

struct BatchLoss {
  double value = 0.0;
  Matrix grad_a;  // d loss / d first input
  Matrix grad_b;  // d loss / d second input
};

/// -(1/B) sum_i lambda(r_i) log softmax_j(<q_i, d_j> / tau)_i.
inline BatchLoss de_batch_softmax_loss(const Matrix& q_embs, const Matrix& d_embs, std::span<const int> ranks,
                                       std::span<const int> list_sizes, double tau, const ReweightSpec& reweight) {
  const auto B = q_embs.rows();
  if (B < 1) throw std::invalid_argument("de_batch_softmax_loss: empty batch");
  if (d_embs.rows() != B || q_embs.cols() != d_embs.cols())
    throw std::invalid_argument("de_batch_softmax_loss: dimension mismatch");
  if (static_cast<Eigen::Index>(ranks.size()) != B || static_cast<Eigen::Index>(list_sizes.size()) != B)
    throw std::invalid_argument("de_batch_softmax_loss: ranks size mismatch");
  if (!(tau > 0.0)) throw std::invalid_argument("de_batch_softmax_loss: tau must be positive");

  const Matrix s = q_embs * d_embs.transpose() / tau;
  Matrix ds = Matrix::Zero(B, B);
  BatchLoss out;
  for (Eigen::Index i = 0; i < B; ++i) {
    const double lambda = lambda_weight(reweight, ranks[i], list_sizes[i]);
    const double m = s.row(i).maxCoeff();
    const Vector e = (s.row(i).array() - m).exp().transpose();
    const double z = e.sum();
    const double logp = s(i, i) - m - std::log(z);
    out.value -= lambda * logp / static_cast<double>(B);
    const double w = lambda / static_cast<double>(B);
    ds.row(i) = w * (e / z).transpose();
    ds(i, i) -= w;
  }
  out.grad_a = ds * d_embs / tau;
  out.grad_b = ds.transpose() * q_embs / tau;
  return out;
}

// ---------------------------------------------------------------------------
// cross encoder: weighted pairwise sigmoid

inline double log_sigmoid(double x) { return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

struct PairwiseLoss {
  double value = 0.0;
  std::vector<double> grad_pos;
  std::vector<double> grad_neg;
};

/// -sum_i [ lambda(r_i)/sum_j lambda(r_j) * log sig(pos_i) + (1/B) * log sig(-neg_i) ].
inline PairwiseLoss ce_pairwise_loss(std::span<const double> pos, std::span<const double> neg,
                                     std::span<const int> ranks, std::span<const int> list_sizes,
                                     const ReweightSpec& reweight) {
  const std::size_t B = pos.size();
  if (B == 0) throw std::invalid_argument("ce_pairwise_loss: empty batch");
  if (neg.size() != B || ranks.size() != B || list_sizes.size() != B)
    throw std::invalid_argument("ce_pairwise_loss: size mismatch");
  std::vector<double> lambdas(B);
  double total = 0.0;
  for (std::size_t i = 0; i < B; ++i) total += lambdas[i] = lambda_weight(reweight, ranks[i], list_sizes[i]);
  if (!(total > 0.0)) throw std::invalid_argument("ce_pairwise_loss: all positive weights are zero");

  PairwiseLoss out;
  out.grad_pos.resize(B);
  out.grad_neg.resize(B);
  for (std::size_t i = 0; i < B; ++i) {
    const double wp = lambdas[i] / total;
    const double wn = 1.0 / static_cast<double>(B);
    out.value -= wp * log_sigmoid(pos[i]) + wn * log_sigmoid(-neg[i]);
    out.grad_pos[i] = -wp * (1.0 - sigmoid(pos[i]));
    out.grad_neg[i] = wn * sigmoid(neg[i]);
  }
  return out;
}

}  // namespace arrlab
