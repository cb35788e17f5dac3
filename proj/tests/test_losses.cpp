#include "arrlab/losses.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

using namespace arrlab;

namespace {

RankedExample small_example() {
  RankedExample ex;
  ex.query = "ab";
  ex.docids = {"ab", "a", "ac", "b"};
  ex.negative = "zz";
  ex.prompt_seed = 7;
  return ex;
}

ArrConfig tiny_config() {
  ArrConfig c;
  c.width = 8;
  c.layers = 1;
  c.heads = 2;
  c.ff_width = 16;
  c.max_context = 64;
  return c;
}

ArrModel zero_embedding_model() {
  ArrModel m(tiny_config(), 3);
  m.params().at("tok_emb").data.assign(m.params().at("tok_emb").size(), 0.0);
  return m;
}

}  // namespace

TEST(LambdaWeight, Schedules) {
  EXPECT_DOUBLE_EQ(lambda_weight(ReweightSpec::fractional(1.0), 4, 5), 0.25);
  EXPECT_DOUBLE_EQ(lambda_weight(ReweightSpec::fractional(2.0), 3, 5), 1.0 / 9.0);
  EXPECT_DOUBLE_EQ(lambda_weight(ReweightSpec::stepwise(), 1, 5), 1.0);
  EXPECT_DOUBLE_EQ(lambda_weight(ReweightSpec::stepwise(), 5, 5), 0.2);
  EXPECT_DOUBLE_EQ(lambda_weight(ReweightSpec::indicator(), 1, 5), 1.0);
  EXPECT_DOUBLE_EQ(lambda_weight(ReweightSpec::indicator(), 2, 5), 0.0);
  EXPECT_THROW(lambda_weight(ReweightSpec::indicator(), 6, 5), std::out_of_range);
  EXPECT_THROW(lambda_weight(ReweightSpec::indicator(), 0, 5), std::out_of_range);
  EXPECT_THROW(ReweightSpec::fractional(0.0).validate(), std::invalid_argument);
}

TEST(LambdaWeight, JsonRoundTrip) {
  const auto r = reweight_from_json(to_json(ReweightSpec::fractional(1.5)));
  EXPECT_EQ(r.kind, ReweightSpec::Kind::fractional);
  EXPECT_DOUBLE_EQ(r.alpha, 1.5);
  const auto t = target_from_json(to_json(TargetSpec::trie(3.0, true)));
  EXPECT_EQ(t.kind, TargetSpec::Kind::trie_marginal);
  EXPECT_TRUE(t.combined);
  EXPECT_THROW(target_from_json({{"kind", "nope"}}), std::invalid_argument);
}

TEST(Stoical, UniformLogitsOverTenTokens) {
  ArrConfig c = tiny_config();
  c.vocab_size = 10;
  ArrModel m(c, 1);
  m.params().at("tok_emb").data.assign(m.params().at("tok_emb").size(), 0.0);
  // prompt [1 2], docID tokens [3 4] then <eod>=0: three predicted steps
  auto seq = PackedSequence::causal(std::vector<TokenId>{1, 2});
  const std::size_t first = seq.add_segment(std::vector<TokenId>{3, 4}, 2);
  const std::vector<TokenTarget> targets{{1, {{3, 1.0}}, 1.0}, {first, {{4, 1.0}}, 1.0}, {first + 1, {{0, 1.0}}, 1.0}};
  EXPECT_NEAR(m.loss(seq, targets), 3.0 * std::log(10.0), 1e-12);
}

TEST(Stoical, UniformLogitsOverFullVocabulary) {
  const auto m = zero_embedding_model();
  const auto ex = small_example();
  const double v = std::log(static_cast<double>(Vocabulary::size()));
  // d_1 = "ab": two tokens plus <eod>
  EXPECT_NEAR(stoical_loss(m, ex, 1, ReweightSpec::indicator(), TargetSpec::one_hot()).value, 3.0 * v, 1e-10);
  EXPECT_NEAR(stoical_loss(m, ex, 2, ReweightSpec::indicator(), TargetSpec::one_hot()).value, 0.0, 0.0);
  EXPECT_NEAR(stoical_loss(m, ex, 3, ReweightSpec::fractional(1.0), TargetSpec::one_hot()).value, v, 1e-10);
}

TEST(Stoical, IndicatorOneHotEqualsNegativeLogLikelihood) {
  const ArrModel m(tiny_config(), 11);
  const auto ex = small_example();
  const auto prompt = tokenize_prompt(serialize_prompt(ex));
  std::vector<TokenId> ctx = prompt;
  double nll = 0.0;
  for (TokenId t : Vocabulary::docid_tokens(ex.docids[0])) {
    const Vector z = m.next_token_logits(ctx);
    const std::vector<double> zs(z.data(), z.data() + z.size());
    nll -= log_softmax(zs)[t];
    ctx.push_back(t);
  }
  EXPECT_NEAR(stoical_loss(m, ex, 1, ReweightSpec::indicator(), TargetSpec::one_hot()).value, nll, 1e-10);
}

TEST(Stoical, LinearInLambda) {
  const ArrModel m(tiny_config(), 5);
  const auto ex = small_example();
  for (int r = 1; r <= 4; ++r) {
    const double a1 = stoical_loss(m, ex, r, ReweightSpec::fractional(1.0), TargetSpec::one_hot()).value;
    const double a2 = stoical_loss(m, ex, r, ReweightSpec::fractional(2.0), TargetSpec::one_hot()).value;
    const double st = stoical_loss(m, ex, r, ReweightSpec::stepwise(), TargetSpec::one_hot()).value;
    EXPECT_NEAR(a2 * r, a1, 1e-10);
    EXPECT_NEAR(st / ((4.0 - r + 1.0) / 4.0), a1 * r, 1e-10);
  }
}

TEST(Stoical, ExampleLossSumsRanks) {
  const ArrModel m(tiny_config(), 9);
  const auto ex = small_example();
  for (const auto& tgt : {TargetSpec::one_hot(), TargetSpec::trie(1.0)}) {
    double sum = 0.0;
    for (int r = 1; r <= 4; ++r) sum += stoical_loss(m, ex, r, ReweightSpec::fractional(1.0), tgt).value;
    EXPECT_NEAR(stoical_example_loss(m, ex, ReweightSpec::fractional(1.0), tgt).value, sum, 1e-10);
  }
}

TEST(Stoical, HugeBetaMatchesOneHot) {
  const ArrModel m(tiny_config(), 13);
  const auto ex = small_example();
  for (const auto& rw : {ReweightSpec::fractional(1.0), ReweightSpec::stepwise(), ReweightSpec::indicator()})
    for (int r = 1; r <= 4; ++r) {
      const double oh = stoical_loss(m, ex, r, rw, TargetSpec::one_hot()).value;
      const double tr = stoical_loss(m, ex, r, rw, TargetSpec::trie(1e6)).value;
      EXPECT_NEAR(tr, oh, 1e-9) << "rank " << r;
    }
}

TEST(Stoical, TrieTargetsSpreadMassOverSiblings) {
  const auto ex = small_example();
  const int ranks[] = {1};
  const auto item = build_stoical_item(ex, ranks, ReweightSpec::indicator(), TargetSpec::trie(1.0));
  // step 0 of "ab": 'a' covers ranks 1..3, 'b' rank 4
  ASSERT_EQ(item.targets.size(), 3u);
  const auto& root = item.targets[0].dist;
  ASSERT_EQ(root.size(), 2u);
  const double total = 1.0 + 0.5 + 1.0 / 3.0 + 0.25;
  for (const auto& [tok, p] : root) {
    if (tok == Vocabulary::char_token('a')) {
      EXPECT_NEAR(p, (1.0 + 0.5 + 1.0 / 3.0) / total, 1e-12);
    } else {
      EXPECT_EQ(tok, Vocabulary::char_token('b'));
      EXPECT_NEAR(p, 0.25 / total, 1e-12);
    }
  }
}

TEST(Stoical, GradientsMatchFiniteDifferences) {
  const auto ex = small_example();
  GradCheckOptions opts;
  opts.max_coords_per_tensor = 6;
  opts.abs_floor = 1e-4;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ArrModel base(tiny_config(), seed);
    const auto rw = seed % 2 ? ReweightSpec::stepwise() : ReweightSpec::fractional(1.0 + 0.1 * seed);
    const auto tgt = seed % 3 ? TargetSpec::trie(0.5 + seed) : TargetSpec::one_hot();
    const DifferentiableFn f = [&](const ParamSet& p) {
      ArrModel m = base;
      m.params() = p;
      return stoical_example_loss(m, ex, rw, tgt);
    };
    opts.seed = static_cast<unsigned>(seed);
    EXPECT_LT(grad_check(f, base.params(), opts).max_error(), 1e-5) << "seed " << seed;
  }
}

TEST(DualEncoderLoss, IdenticalEmbeddingsGiveLogB) {
  const Matrix q = Matrix::Ones(2, 3) / std::sqrt(3.0);
  const std::vector<int> ranks{1, 1}, sizes{1, 1};
  EXPECT_NEAR(de_batch_softmax_loss(q, q, ranks, sizes, 0.05, ReweightSpec::indicator()).value, std::log(2.0), 1e-12);
  const std::vector<int> one{1};
  EXPECT_DOUBLE_EQ(de_batch_softmax_loss(q.topRows(1), q.topRows(1), one, one, 0.05, ReweightSpec::indicator()).value,
                   0.0);
}

TEST(DualEncoderLoss, PermutationInvariant) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  Matrix q(4, 3), d(4, 3);
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    q.data()[i] = g(rng);
    d.data()[i] = g(rng);
  }
  const std::vector<int> ranks{1, 2, 3, 1}, sizes{3, 3, 3, 2};
  const double a = de_batch_softmax_loss(q, d, ranks, sizes, 0.5, ReweightSpec::fractional(1.0)).value;
  const std::vector<int> perm{2, 0, 3, 1};
  Matrix qp(4, 3), dp(4, 3);
  std::vector<int> rp(4), sp(4);
  for (int i = 0; i < 4; ++i) {
    qp.row(i) = q.row(perm[i]);
    dp.row(i) = d.row(perm[i]);
    rp[i] = ranks[perm[i]];
    sp[i] = sizes[perm[i]];
  }
  EXPECT_NEAR(de_batch_softmax_loss(qp, dp, rp, sp, 0.5, ReweightSpec::fractional(1.0)).value, a, 1e-12);
}

TEST(DualEncoderLoss, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    ParamSet p;
    for (double& x : p.add("q", {3, 4}).data) x = g(rng);
    for (double& x : p.add("d", {3, 4}).data) x = g(rng);
    const std::vector<int> ranks{1, 2, 1}, sizes{2, 2, 4};
    const DifferentiableFn f = [&](const ParamSet& s) {
      const auto l = de_batch_softmax_loss(s.at("q").matrix(), s.at("d").matrix(), ranks, sizes, 0.7,
                                           ReweightSpec::fractional(1.0));
      ValueAndGrad out{l.value, s.zeros_like()};
      out.grad.at("q").matrix() = l.grad_a;
      out.grad.at("d").matrix() = l.grad_b;
      return out;
    };
    EXPECT_LT(grad_check(f, p).max_error(), 1e-6);
  }
}

TEST(DualEncoderLoss, RejectsBadInput) {
  const Matrix q = Matrix::Ones(2, 3);
  const std::vector<int> ranks{1, 1}, sizes{1, 1}, short_ranks{1};
  EXPECT_THROW(de_batch_softmax_loss(q, q, ranks, sizes, 0.0, ReweightSpec::indicator()), std::invalid_argument);
  EXPECT_THROW(de_batch_softmax_loss(q, q, short_ranks, sizes, 1.0, ReweightSpec::indicator()), std::invalid_argument);
  EXPECT_THROW(de_batch_softmax_loss(q, Matrix::Ones(2, 2), ranks, sizes, 1.0, ReweightSpec::indicator()),
               std::invalid_argument);
}

TEST(CrossEncoderLoss, ZeroScoresGiveTwoLogTwo) {
  const std::vector<double> zeros{0.0, 0.0};
  const std::vector<int> ranks{1, 2}, sizes{2, 2};
  EXPECT_NEAR(ce_pairwise_loss(zeros, zeros, ranks, sizes, ReweightSpec::fractional(1.0)).value, 2.0 * std::log(2.0),
              1e-12);
}

TEST(CrossEncoderLoss, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 3.0);
    ParamSet p;
    for (double& x : p.add("pos", {4}).data) x = g(rng);
    for (double& x : p.add("neg", {4}).data) x = g(rng);
    const std::vector<int> ranks{1, 3, 2, 1}, sizes{3, 3, 3, 1};
    const DifferentiableFn f = [&](const ParamSet& s) {
      const auto l = ce_pairwise_loss(s.at("pos").data, s.at("neg").data, ranks, sizes, ReweightSpec::stepwise());
      ValueAndGrad out{l.value, s.zeros_like()};
      out.grad.at("pos").data = l.grad_pos;
      out.grad.at("neg").data = l.grad_neg;
      return out;
    };
    GradCheckOptions opts;
    opts.abs_floor = 1e-4;
    EXPECT_LT(grad_check(f, p, opts).max_error(), 1e-6);
  }
}

TEST(CrossEncoderLoss, RejectsAllZeroWeights) {
  const std::vector<double> s{0.1, 0.2};
  const std::vector<int> ranks{2, 3}, sizes{3, 3};
  EXPECT_THROW(ce_pairwise_loss(s, s, ranks, sizes, ReweightSpec::indicator()), std::invalid_argument);
  EXPECT_THROW(ce_pairwise_loss({}, {}, {}, {}, ReweightSpec::indicator()), std::invalid_argument);
}
