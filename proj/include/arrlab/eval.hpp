#pragma once

// Decoding and ranking metrics.
//
// A docID's score is the mean log-probability of its tokens (including
// <eod>) given the prompt, under the unconstrained model distribution.
// Beam search expands only trie-valid continuations but ranks hypotheses by
// the same mean log-probability, so with a beam at least as wide as the
// corpus it reproduces exhaustive scoring.

#include "arrlab/data.hpp"
#include "arrlab/transformer.hpp"
#include "arrlab/trie.hpp"
#include "arrlab/vocab.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace arrlab {

struct ScoredDocId {
  std::string docid;
  double score = 0.0;  // mean token log-probability, <= 0
};

/// Sorts by descending score, ties broken by ascending docID.
inline void sort_scored(std::vector<ScoredDocId>& v) {
  std::sort(v.begin(), v.end(), [](const ScoredDocId& a, const ScoredDocId& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.docid < b.docid;
  });
}

inline double mean(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("mean of empty list");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Per-token log-probabilities of each candidate (tokens incl. <eod>) after
/// `prompt`, computed in one packed forward pass.
inline std::vector<std::vector<double>> candidate_token_logprobs(const ArrModel& model,
                                                                 std::span<const TokenId> prompt,
                                                                 std::span<const std::vector<TokenId>> candidates) {
  if (prompt.empty()) throw std::invalid_argument("empty prompt");
  PackedSequence seq = PackedSequence::causal(prompt);
  std::vector<std::size_t> rows;
  std::vector<std::size_t> offsets;
  for (const auto& cand : candidates) {
    if (cand.empty() || cand.back() != Vocabulary::kEod) throw std::invalid_argument("candidate must end in <eod>");
    offsets.push_back(rows.size());
    rows.push_back(prompt.size() - 1);
    const std::size_t first =
        seq.add_segment(std::span<const TokenId>(cand).first(cand.size() - 1), static_cast<int>(prompt.size()));
    for (std::size_t t = 1; t < cand.size(); ++t) rows.push_back(first + t - 1);
  }
  const Matrix z = model.logits(seq, rows);
  std::vector<std::vector<double>> out;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    std::vector<double> lp;
    for (std::size_t t = 0; t < candidates[c].size(); ++t) {
      const auto row = z.row(offsets[c] + t);
      const double m = row.maxCoeff();
      const double lse = m + std::log((row.array() - m).exp().sum());
      lp.push_back(row(candidates[c][t]) - lse);
    }
    out.push_back(std::move(lp));
  }
  return out;
}

/// Mean token log-probability for each candidate docID string.
inline std::vector<double> score_candidates(const ArrModel& model, const AugmentedQuery& prompt,
                                            std::span<const std::string> docids) {
  const auto ptoks = tokenize_prompt(prompt);
  std::vector<std::vector<TokenId>> cands;
  for (const auto& d : docids) cands.push_back(Vocabulary::docid_tokens(d));
  const auto lps = candidate_token_logprobs(model, ptoks, cands);
  std::vector<double> out;
  for (const auto& lp : lps) out.push_back(mean(lp));
  return out;
}

inline ScoredDocId score_docid(const ArrModel& model, const AugmentedQuery& prompt, const std::string& docid) {
  const std::string one[] = {docid};
  return {docid, score_candidates(model, prompt, one).front()};
}

inline PrefixTrie<TokenId> docid_trie(std::span<const std::string> docids, double beta = 1.0) {
  std::vector<RankedTokens<TokenId>> entries;
  for (std::size_t i = 0; i < docids.size(); ++i)
    entries.push_back({Vocabulary::tokenize(docids[i]), static_cast<int>(i) + 1});
  return PrefixTrie<TokenId>::build(entries, beta);
}

/// Top-k complete docIDs by mean log-probability, expanding only along the trie.
/// A beam wider than the corpus returns every docID, ranked.
inline std::vector<ScoredDocId> beam_search(const ArrModel& model, const AugmentedQuery& prompt,
                                            const PrefixTrie<TokenId>& trie, int k) {
  if (k < 1) throw std::invalid_argument("beam width must be >= 1");
  if (trie.docid_count() == 0) throw std::invalid_argument("beam search over an empty trie");
  const auto ptoks = tokenize_prompt(prompt);

  struct Hyp {
    std::vector<TokenId> tokens;
    double logp = 0.0;
  };
  auto mean_of = [](const Hyp& h, std::size_t len) { return h.logp / static_cast<double>(len); };

  std::vector<Hyp> live{Hyp{}};
  std::vector<ScoredDocId> finished;
  while (!live.empty() && static_cast<int>(finished.size()) < k) {
    // One packed pass scores the next token of every live hypothesis.
    PackedSequence seq = PackedSequence::causal(ptoks);
    std::vector<std::size_t> rows;
    for (const auto& h : live) {
      if (h.tokens.empty()) {
        rows.push_back(ptoks.size() - 1);
      } else {
        const std::size_t first = seq.add_segment(h.tokens, static_cast<int>(ptoks.size()));
        rows.push_back(first + h.tokens.size() - 1);
      }
    }
    const Matrix z = model.logits(seq, rows);

    struct Expansion {
      std::size_t parent;
      TokenId token;
      double logp;
      double score;
      std::string key;  // tie-break
    };
    std::vector<Expansion> exps;
    for (std::size_t i = 0; i < live.size(); ++i) {
      const auto row = z.row(i);
      const double m = row.maxCoeff();
      const double lse = m + std::log((row.array() - m).exp().sum());
      const auto cont = trie.valid_continuations(live[i].tokens);
      std::vector<TokenId> options = cont.tokens;
      if (cont.end_of_docid) options.push_back(Vocabulary::kEod);
      for (TokenId tok : options) {
        Expansion e{i, tok, live[i].logp + (row(tok) - lse), 0.0, {}};
        e.score = e.logp / static_cast<double>(live[i].tokens.size() + 1);
        std::vector<TokenId> full = live[i].tokens;
        full.push_back(tok);
        e.key = Vocabulary::detokenize(full);
        exps.push_back(std::move(e));
      }
    }
    std::sort(exps.begin(), exps.end(), [](const Expansion& a, const Expansion& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.key != b.key) return a.key < b.key;
      return a.token == Vocabulary::kEod && b.token != Vocabulary::kEod;
    });
    const std::size_t capacity = static_cast<std::size_t>(k) - finished.size();
    std::vector<Hyp> next;
    for (std::size_t i = 0; i < exps.size() && i < capacity; ++i) {
      const auto& e = exps[i];
      Hyp h{live[e.parent].tokens, e.logp};
      if (e.token == Vocabulary::kEod) {
        finished.push_back({Vocabulary::detokenize(h.tokens), mean_of(h, h.tokens.size() + 1)});
      } else {
        h.tokens.push_back(e.token);
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }
  sort_scored(finished);
  return finished;
}

/// Greedy constrained decoding: argmax over trie-valid tokens until <eod>.
inline ScoredDocId greedy_decode(const ArrModel& model, const AugmentedQuery& prompt, const PrefixTrie<TokenId>& trie) {
  auto ctx = tokenize_prompt(prompt);
  std::vector<TokenId> generated;
  double logp = 0.0;
  while (true) {
    const Vector z = model.next_token_logits(ctx);
    const auto logp_all = log_softmax(std::span<const double>(z.data(), z.size()));
    const auto cont = trie.valid_continuations(generated);
    std::vector<TokenId> options = cont.tokens;
    if (cont.end_of_docid) options.push_back(Vocabulary::kEod);
    TokenId best = options.front();
    for (TokenId t : options)
      if (logp_all[t] > logp_all[best]) best = t;
    logp += logp_all[best];
    if (best == Vocabulary::kEod) break;
    generated.push_back(best);
    ctx.push_back(best);
  }
  return {Vocabulary::detokenize(generated), logp / static_cast<double>(generated.size() + 1)};
}

/// Ancestral sampling from the constrained next-token distribution.
inline std::vector<TokenId> sample_constrained(const ArrModel& model, std::span<const TokenId> prompt,
                                               const PrefixTrie<TokenId>& trie, std::mt19937_64& rng) {
  std::vector<TokenId> ctx(prompt.begin(), prompt.end());
  std::vector<TokenId> generated;
  while (true) {
    const Vector z = model.next_token_logits(ctx);
    const auto cont = trie.valid_continuations(generated);
    std::vector<TokenId> valid = cont.tokens;
    if (cont.end_of_docid) valid.push_back(Vocabulary::kEod);
    const auto p = constrained_logits(std::span<const double>(z.data(), z.size()), valid);
    std::discrete_distribution<int> pick(p.begin(), p.end());
    const TokenId t = pick(rng);
    generated.push_back(t);
    if (t == Vocabulary::kEod) return generated;
    ctx.push_back(t);
  }
}

// ---------------------------------------------------------------------------
// metrics

/// True iff some positive scores strictly below the negative.
inline bool cvr(std::span<const double> pos_scores, double neg_score) {
  if (pos_scores.empty()) throw std::invalid_argument("cvr: no positive scores");
  return *std::min_element(pos_scores.begin(), pos_scores.end()) < neg_score;
}

/// Candidate docIDs ordered by descending predicted score (ties: ascending docID).
inline std::vector<std::string> predicted_ranking(const std::map<std::string, double>& scores) {
  std::vector<ScoredDocId> v;
  for (const auto& [d, s] : scores) v.push_back({d, s});
  sort_scored(v);
  std::vector<std::string> out;
  for (auto& s : v) out.push_back(std::move(s.docid));
  return out;
}

/// nDCG x 100 with gold gains ln(n_q + 2 - i) for rank i and 0 for the negative.
inline double ndcg(const RankedExample& example, const std::map<std::string, double>& predicted_scores) {
  const auto cands = example.candidates();
  for (const auto& c : cands)
    if (!predicted_scores.count(c)) throw std::invalid_argument("ndcg: missing score for " + c);
  const double nq = static_cast<double>(example.list_size());
  std::map<std::string, double> gain;
  for (std::size_t i = 0; i < example.docids.size(); ++i)
    gain[example.docids[i]] = std::log(nq + 2.0 - static_cast<double>(i + 1));
  gain[example.negative] = 0.0;

  std::map<std::string, double> restricted;
  for (const auto& c : cands) restricted[c] = predicted_scores.at(c);
  const auto order = predicted_ranking(restricted);
  double dcg = 0.0, ideal = 0.0;
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const double discount = 1.0 / std::log2(static_cast<double>(pos) + 2.0);
    dcg += gain.at(order[pos]) * discount;
    ideal += gain.at(cands[pos]) * discount;
  }
  return 100.0 * dcg / ideal;
}

/// |gold[:k] ∩ predicted[:k]| / k.
inline double recall_at_k(std::span<const std::string> gold, std::span<const std::string> predicted, int k) {
  if (k < 1 || static_cast<std::size_t>(k) > gold.size() || static_cast<std::size_t>(k) > predicted.size())
    throw std::out_of_range("recall_at_k: k out of range");
  std::vector<std::string> a(gold.begin(), gold.begin() + k), b(predicted.begin(), predicted.begin() + k);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<std::string> both;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
  return static_cast<double>(both.size()) / k;
}

struct MetricsReport {
  double cvr = 0.0;   // percent of examples with a violation
  double ndcg = 0.0;  // 0..100
  std::map<int, double> recall;            // R@k in [0, 1]
  std::map<int, std::size_t> recall_count;  // examples with at least k candidates
  std::size_t examples = 0;
};

/// Scores for every candidate (ranked docIDs then the negative), higher = more relevant.
using CandidateScorer = std::function<std::vector<double>(const RankedExample&)>;

/// Aggregates CVR, nDCG and R@k. The gold ranking is the ranked list followed
/// by the negative; R@k averages over examples with at least k candidates.
inline MetricsReport evaluate(std::span<const RankedExample> examples, const CandidateScorer& scorer,
                              std::span<const int> ks) {
  MetricsReport rep;
  double violations = 0.0, ndcg_sum = 0.0;
  std::map<int, double> rsum;
  for (const auto& ex : examples) {
    const auto cands = ex.candidates();
    const auto s = scorer(ex);
    if (s.size() != cands.size()) throw std::logic_error("scorer returned the wrong number of scores");
    std::map<std::string, double> by_doc;
    for (std::size_t i = 0; i < cands.size(); ++i) by_doc[cands[i]] = s[i];
    violations += cvr(std::span<const double>(s.data(), s.size() - 1), s.back()) ? 1.0 : 0.0;
    ndcg_sum += ndcg(ex, by_doc);
    const auto pred = predicted_ranking(by_doc);
    for (int k : ks) {
      if (k <= static_cast<int>(cands.size())) {
        rsum[k] += recall_at_k(cands, pred, k);
        ++rep.recall_count[k];
      }
    }
    ++rep.examples;
  }
  if (rep.examples == 0) return rep;
  rep.cvr = 100.0 * violations / static_cast<double>(rep.examples);
  rep.ndcg = ndcg_sum / static_cast<double>(rep.examples);
  for (int k : ks) rep.recall[k] = rep.recall_count[k] ? rsum[k] / static_cast<double>(rep.recall_count[k]) : 0.0;
  return rep;
}

inline CandidateScorer arr_scorer(const ArrModel& model) {
  return [&model](const RankedExample& ex) {
    const auto prompt = serialize_prompt(ex);
    const auto cands = ex.candidates();
    return score_candidates(model, prompt, cands);
  };
}

}  // namespace arrlab
