#include "arrlab/data.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

using namespace arrlab;

namespace {

// root <- a1 <- a2 <- ... <- a{depth}
Taxonomy chain(int depth) {
  std::vector<std::string> names{"root"};
  std::vector<int> parents{-1};
  for (int i = 1; i <= depth; ++i) {
    names.push_back("n" + std::to_string(i));
    parents.push_back(i - 1);
  }
  // a side branch so negatives exist
  names.push_back("side");
  parents.push_back(0);
  names.push_back("leaf");
  parents.push_back(static_cast<int>(names.size()) - 2);
  return Taxonomy(names, parents);
}

double residual_norm(const Vector& v, const Matrix& dict, const std::vector<int>& support) {
  Matrix sub(v.size(), support.size());
  for (std::size_t c = 0; c < support.size(); ++c) sub.col(c) = dict.row(support[c]).transpose();
  const Vector coef = sub.completeOrthogonalDecomposition().solve(v);
  return (v - sub * coef).norm();
}

}  // namespace

TEST(Seeds, MixIsDeterministicAndSpreads) {
  EXPECT_EQ(mix_seed(7), mix_seed(7));
  EXPECT_NE(mix_seed(7), mix_seed(8));
  EXPECT_NE(derive_seed(1, 2, 3), derive_seed(1, 3, 2));
}

TEST(TaxonomyTest, SmallestTree) {
  const auto t = gen_taxonomy(2, 3, 1);
  EXPECT_EQ(t.size(), 2u);
  EXPECT_EQ(t.children(t.root()).size(), 1u);
}

TEST(TaxonomyTest, GenerationIsDeterministic) {
  const auto a = gen_taxonomy(200, 5, 7), b = gen_taxonomy(200, 5, 7);
  std::ostringstream sa, sb;
  a.write_edges(sa);
  b.write_edges(sb);
  EXPECT_EQ(sa.str(), sb.str());
  for (int i = 0; i < 200; ++i) EXPECT_LE(static_cast<int>(a.children(i).size()), 5);
}

TEST(TaxonomyTest, EveryPathEndsAtRoot) {
  const auto t = gen_taxonomy(200, 5, 11);
  for (int i = 0; i < 200; ++i) {
    if (i == t.root()) continue;
    const auto anc = t.ancestors(i);
    ASSERT_FALSE(anc.empty());
    EXPECT_EQ(anc.back(), t.root());
    EXPECT_EQ(static_cast<int>(anc.size()), t.depth(i));
  }
}

TEST(TaxonomyTest, EdgeListRoundTrip) {
  const auto t = gen_taxonomy(50, 3, 5);
  std::stringstream ss;
  ss << "# comment\n\n";
  t.write_edges(ss);
  const auto u = Taxonomy::read_edges(ss);
  ASSERT_EQ(u.size(), t.size());
  for (int i = 0; i < 50; ++i) {
    const int j = u.index_of(t.name(i));
    EXPECT_EQ(u.depth(j), t.depth(i));
    if (i != t.root()) {
      EXPECT_EQ(u.name(u.parent(j)), t.name(t.parent(i)));
    }
  }
}

TEST(TaxonomyTest, RejectsInvalidStructures) {
  EXPECT_THROW(gen_taxonomy(1, 3, 0), std::invalid_argument);
  EXPECT_THROW(gen_taxonomy(10, 0, 0), std::invalid_argument);
  EXPECT_THROW(Taxonomy({"a", "b"}, {-1, -1}), std::invalid_argument);
  EXPECT_THROW(Taxonomy({"a", "b", "c"}, {-1, 2, 1}), std::invalid_argument);
  std::stringstream cyc("a\tb\nb\ta\n");
  EXPECT_THROW(Taxonomy::read_edges(cyc), std::invalid_argument);
  std::stringstream two("a\tb\na\tc\n");
  EXPECT_THROW(Taxonomy::read_edges(two), std::invalid_argument);
}

TEST(RankingExample, DeepChainListsAncestorsNearestFirst) {
  const auto t = chain(14);  // n14 at depth 14
  const auto ex = make_ranking_example(t, t.index_of("n14"), 3);
  ASSERT_EQ(ex.list_size(), 13u);
  EXPECT_EQ(ex.docids.front(), "n13");
  EXPECT_EQ(ex.docids.back(), "n1");
  EXPECT_TRUE(ex.negative == "side" || ex.negative == "leaf");
}

TEST(RankingExample, DepthTwoHasOneDocId) {
  const auto t = chain(3);
  const auto ex = make_ranking_example(t, t.index_of("n2"), 1);
  ASSERT_EQ(ex.list_size(), 1u);
  EXPECT_EQ(ex.docids[0], "n1");
}

TEST(RankingExample, RejectsRootAndDepthOne) {
  const auto t = chain(3);
  EXPECT_THROW(make_ranking_example(t, t.root(), 0), std::invalid_argument);
  EXPECT_THROW(make_ranking_example(t, t.index_of("n1"), 0), std::invalid_argument);
}

TEST(RankingExample, NegativeNeverOnPath) {
  const auto t = gen_taxonomy(200, 5, 9);
  int draws = 0;
  for (int s = 0; draws < 1000; ++s) {
    const int node = s % 200;
    if (node == t.root() || t.depth(node) < 2) continue;
    const auto ex = make_ranking_example(t, node, static_cast<std::uint64_t>(s));
    const int neg = t.index_of(ex.negative);
    EXPECT_NE(neg, node);
    EXPECT_NE(neg, t.root());
    const auto anc = t.ancestors(node);
    EXPECT_EQ(std::count(anc.begin(), anc.end(), neg), 0);
    ++draws;
  }
}

TEST(RankingExample, JsonlRoundTrip) {
  const auto t = gen_taxonomy(30, 3, 2);
  std::vector<RankedExample> exs;
  for (int i = 0; i < 30; ++i)
    if (t.depth(i) >= 2) exs.push_back(make_ranking_example(t, i, static_cast<std::uint64_t>(i)));
  std::stringstream ss;
  write_jsonl(ss, exs);
  const auto back = read_jsonl(ss);
  ASSERT_EQ(back.size(), exs.size());
  for (std::size_t i = 0; i < exs.size(); ++i) {
    EXPECT_EQ(back[i].docids, exs[i].docids);
    EXPECT_EQ(back[i].negative, exs[i].negative);
    EXPECT_EQ(back[i].prompt_seed, exs[i].prompt_seed);
  }
  std::stringstream bad(R"({"query":"q","docids":["a","a"],"negative":"b","prompt_seed":1})");
  EXPECT_THROW(read_jsonl(bad), std::invalid_argument);
}

TEST(Omp, RecoversAnAtom) {
  const Matrix dict = random_dictionary(100, 32, 4);
  const Vector v = dict.row(25).transpose();
  const auto code = omp_sparse_code(v, dict, 3);
  ASSERT_EQ(code.indices.size(), 3u);
  EXPECT_EQ(code.indices[0], 25);
  EXPECT_NEAR(code.coefficients[0], 1.0, 1e-10);
  EXPECT_NEAR(code.coefficients[1], 0.0, 1e-10);
  EXPECT_NEAR(code.coefficients[2], 0.0, 1e-10);
  EXPECT_EQ(code.docid().rfind("25,", 0), 0u);
}

TEST(Omp, DocIdFormat) {
  SparseCode c{{25, 36, 39}, {0.9, -0.5, 0.1}};
  EXPECT_EQ(c.docid(), "25,36,39");
  const Matrix dict = random_dictionary(100, 32, 1);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g;
  Vector v(32);
  for (auto& x : v) x = g(rng);
  const auto code = omp_sparse_code(v, dict, 3);
  EXPECT_TRUE(Vocabulary::is_digit_group_list(code.docid()));
  EXPECT_GE(std::abs(code.coefficients[0]), std::abs(code.coefficients[1]));
  EXPECT_GE(std::abs(code.coefficients[1]), std::abs(code.coefficients[2]));
  std::set<int> distinct(code.indices.begin(), code.indices.end());
  EXPECT_EQ(distinct.size(), 3u);
}

TEST(Omp, BruteForceOverAllSupports) {
  // 6 atoms in 4 dimensions: OMP's own support is one of the 20 subsets, so
  // some subset is at least as good; its residual is consistent with refitting.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Matrix dict = random_dictionary(6, 4, seed);
    std::mt19937_64 rng(seed + 100);
    std::normal_distribution<double> g;
    Vector v(4);
    for (auto& x : v) x = g(rng);
    const auto code = omp_sparse_code(v, dict, 3);
    const Vector recon = [&] {
      Vector r = Vector::Zero(4);
      for (int i = 0; i < 3; ++i) r += code.coefficients[i] * dict.row(code.indices[i]).transpose();
      return r;
    }();
    const double omp_res = (v - recon).norm();
    double best = 1e300;
    for (int a = 0; a < 6; ++a)
      for (int b = a + 1; b < 6; ++b)
        for (int c = b + 1; c < 6; ++c) best = std::min(best, residual_norm(v, dict, {a, b, c}));
    EXPECT_GE(omp_res, best - 1e-12);
    EXPECT_NEAR(omp_res, residual_norm(v, dict, code.indices), 1e-12);
  }
  // Orthonormal atoms: OMP is optimal.
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    Matrix m(6, 6);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    const Matrix q = Eigen::HouseholderQR<Matrix>(m).householderQ();
    const Matrix dict = q.transpose();
    Vector v(6);
    for (auto& x : v) x = g(rng);
    const auto code = omp_sparse_code(v, dict, 3);
    double best = 1e300;
    for (int a = 0; a < 6; ++a)
      for (int b = a + 1; b < 6; ++b)
        for (int c = b + 1; c < 6; ++c) best = std::min(best, residual_norm(v, dict, {a, b, c}));
    EXPECT_NEAR(residual_norm(v, dict, code.indices), best, 1e-10);
  }
}

TEST(Omp, RejectsBadInput) {
  const Matrix dict = random_dictionary(5, 3, 0);
  EXPECT_THROW(omp_sparse_code(Vector::Ones(3), dict, 6), std::invalid_argument);
  EXPECT_THROW(omp_sparse_code(Vector::Ones(4), dict, 2), std::invalid_argument);
  Matrix unnorm = dict;
  unnorm.row(0) *= 2.0;
  EXPECT_THROW(omp_sparse_code(Vector::Ones(3), unnorm, 2), std::invalid_argument);
}

TEST(Prompt, DeterministicAndComplete) {
  RankedExample ex{"qq", {"aa", "bb", "cc", "dd", "ee", "ff"}, "zz", 17};
  const auto a = serialize_prompt(ex, 5), b = serialize_prompt(ex, 5);
  EXPECT_EQ(a.text, b.text);
  auto sorted = a.docids;
  std::sort(sorted.begin(), sorted.end());
  auto expect = ex.candidates();
  std::sort(expect.begin(), expect.end());
  EXPECT_EQ(sorted, expect);
  for (const auto& d : ex.candidates()) {
    std::size_t count = 0;
    for (auto pos = a.text.find(d); pos != std::string::npos; pos = a.text.find(d, pos + 1)) ++count;
    EXPECT_EQ(count, 1u) << d;
  }
  EXPECT_EQ(a.text.rfind("query: qq\ndocids: ", 0), 0u);
}

TEST(Prompt, ShuffleIsNotAlwaysIdentity) {
  RankedExample ex{"qq", {"aa", "bb", "cc", "dd", "ee"}, "zz", 0};
  int moved = 0;
  for (std::uint64_t s = 0; s < 20; ++s)
    if (serialize_prompt(ex, s).docids != ex.candidates()) ++moved;
  EXPECT_GT(moved, 15);
}

TEST(Prompt, RejectsDelimiterInDocId) {
  RankedExample ex{"qq", {"a||b"}, "zz", 0};
  EXPECT_THROW(serialize_prompt(ex, 0), std::invalid_argument);
}

TEST(Prompt, TokenizedLayout) {
  RankedExample ex{"qq", {"25,36,39"}, "1,2,3", 0};
  const auto toks = tokenize_prompt(serialize_prompt(ex, 0));
  EXPECT_EQ(toks.front(), Vocabulary::kBos);
  EXPECT_EQ(toks.back(), Vocabulary::kAnswer);
  EXPECT_EQ(std::count(toks.begin(), toks.end(), Vocabulary::kSep), 1);
  EXPECT_EQ(std::count(toks.begin(), toks.end(), Vocabulary::word_token(25)), 1);
}

TEST(Datasets, TaxonomyDatasetIsReproducible) {
  DatasetSpec spec;
  spec.num_nodes = 60;
  spec.seed = 3;
  const auto a = generate_dataset(spec), b = generate_dataset(spec);
  std::stringstream sa, sb;
  write_jsonl(sa, a.train);
  write_jsonl(sb, b.train);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(a.train.size(), a.queries.size() * 4);
  EXPECT_EQ(a.eval.size(), a.queries.size());
}

TEST(Datasets, SparseCodeDatasetIsBijectiveAndSized) {
  DatasetSpec spec;
  spec.kind = "esci";
  spec.num_docs = 300;
  spec.num_queries = 20;
  spec.seed = 2;
  const auto ds = generate_dataset(spec);
  std::set<std::string> ids(ds.documents.begin(), ds.documents.end());
  EXPECT_EQ(ids.size(), ds.documents.size());
  for (const auto& ex : ds.train) {
    EXPECT_GE(ex.list_size(), 5u);
    EXPECT_LE(ex.list_size(), 30u);
    EXPECT_TRUE(ids.count(ex.negative));
    for (const auto& d : ex.docids) EXPECT_TRUE(Vocabulary::is_digit_group_list(d));
  }
  std::stringstream sa, sb;
  write_jsonl(sa, ds.train);
  write_jsonl(sb, generate_dataset(spec).train);
  EXPECT_EQ(sa.str(), sb.str());
}

TEST(Datasets, UnknownKindThrows) {
  DatasetSpec spec;
  spec.kind = "wordnet";
  EXPECT_THROW(generate_dataset(spec), std::invalid_argument);
}
