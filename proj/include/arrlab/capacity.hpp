#pragma once

// Capacity analyses for the two scorer families.
//
// Dual encoder: how many orderings of k document embeddings can a query
// point induce (distance permutations), against the k^{2n} upper bound and
// the ln(k!)/(2 ln k) dimension threshold.
//
// Autoregressive ranker: what a single softmax over E.phi can express.
// Everything hinges on E' = [E | 1]; when its rows are dependent, a left
// null vector h forbids some orderings and distributions.

#include "arrlab/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace arrlab {

using Permutation = std::vector<int>;

inline double log_factorial(int k) { return std::lgamma(static_cast<double>(k) + 1.0); }

/// ln(k!) / (2 ln k). Integer dimensions strictly below this cannot realize every ranking.
inline double de_dimension_bound(int k) {
  if (k < 2) throw std::invalid_argument("de_dimension_bound: k must be >= 2");
  return log_factorial(k) / (2.0 * std::log(static_cast<double>(k)));
}

// ---------------------------------------------------------------------------
// distance permutations

struct CapacityReport {
  int k = 0;
  int n = 0;
  std::size_t achieved = 0;
  bool exact = false;  // false: achieved is a lower bound
  double upper_bound = 0.0;  // k^{2n}
  double total = 0.0;        // k!
  double threshold = 0.0;    // ln(k!) / (2 ln k)
  std::string verdict;

  nlohmann::json to_json() const {
    return {{"k", k},           {"n", n},         {"achieved", achieved}, {"exact", exact},
            {"upper_bound", upper_bound}, {"total", total}, {"threshold", threshold}, {"verdict", verdict}};
  }
};

namespace detail {

inline Permutation order_by_distance(const Matrix& sites, const Eigen::RowVectorXd& probe, bool* tie) {
  const auto k = static_cast<int>(sites.rows());
  std::vector<double> d(k);
  for (int i = 0; i < k; ++i) d[i] = (sites.row(i) - probe).squaredNorm();
  Permutation p(k);
  std::iota(p.begin(), p.end(), 0);
  std::sort(p.begin(), p.end(), [&](int a, int b) { return d[a] < d[b]; });
  *tie = false;
  for (int i = 0; i + 1 < k; ++i)
    if (d[p[i + 1]] - d[p[i]] <= 1e-12 * (1.0 + d[p[i + 1]])) *tie = true;
  return p;
}

inline std::string verdict_for(int k, int n, std::size_t achieved, double total, bool exact) {
  if (static_cast<double>(n) < de_dimension_bound(k)) return "insufficient";
  if (static_cast<double>(achieved) >= total) return "complete";
  // An exact count short of k! is itself a certificate.
  return exact ? "insufficient" : "undetermined";
}

}  // namespace detail

/// Counts distinct orderings of the k sites (rows) by distance from a probe point.
/// n = 1 is exact (one probe per interval between bisector points); n = 2 probes a
/// `resolution` x `resolution` grid plus as many random points and reports a lower bound.
inline CapacityReport count_distance_permutations(const Matrix& sites, int resolution = 200,
                                                  std::uint64_t seed = 0) {
  const int k = static_cast<int>(sites.rows());
  const int n = static_cast<int>(sites.cols());
  if (n < 1 || n > 2) throw std::invalid_argument("count_distance_permutations: n must be 1 or 2");
  if (k < 2 || k > 6) throw std::invalid_argument("count_distance_permutations: k must be in [2, 6]");
  if (!sites.allFinite()) throw std::invalid_argument("count_distance_permutations: non-finite site");
  for (int i = 0; i < k; ++i)
    for (int j = i + 1; j < k; ++j)
      if ((sites.row(i) - sites.row(j)).norm() == 0.0)
        throw std::invalid_argument("count_distance_permutations: coincident sites");
  if (resolution < 2) throw std::invalid_argument("count_distance_permutations: resolution must be >= 2");

  std::set<Permutation> seen;
  bool tie = false;
  CapacityReport rep;
  if (n == 1) {
    std::vector<double> cuts;
    for (int i = 0; i < k; ++i)
      for (int j = i + 1; j < k; ++j) cuts.push_back(0.5 * (sites(i, 0) + sites(j, 0)));
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
    std::vector<double> probes{cuts.front() - 1.0, cuts.back() + 1.0};
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) probes.push_back(0.5 * (cuts[i] + cuts[i + 1]));
    for (double x : probes) {
      Eigen::RowVectorXd p(1);
      p << x;
      seen.insert(detail::order_by_distance(sites, p, &tie));
    }
    rep.exact = true;
  } else {
    // Window: the sites plus every crossing of two bisectors, with margin.
    Eigen::RowVectorXd lo = sites.colwise().minCoeff(), hi = sites.colwise().maxCoeff();
    std::vector<std::pair<Eigen::RowVector2d, double>> lines;  // w.p = c
    for (int i = 0; i < k; ++i)
      for (int j = i + 1; j < k; ++j)
        lines.push_back({2.0 * (sites.row(j) - sites.row(i)), sites.row(j).squaredNorm() - sites.row(i).squaredNorm()});
    for (std::size_t x = 0; x < lines.size(); ++x)
      for (std::size_t y = x + 1; y < lines.size(); ++y) {
        Eigen::Matrix2d m;
        m << lines[x].first, lines[y].first;
        if (std::abs(m.determinant()) < 1e-12) continue;
        const Eigen::Vector2d c = m.partialPivLu().solve(Eigen::Vector2d(lines[x].second, lines[y].second));
        if (c.cwiseAbs().maxCoeff() > 1e6) continue;
        lo = lo.cwiseMin(c.transpose());
        hi = hi.cwiseMax(c.transpose());
      }
    const double span = std::max((hi - lo).maxCoeff(), 1e-9);
    const Eigen::RowVectorXd a = lo.array() - 2.0 * span, b = hi.array() + 2.0 * span;
    auto probe = [&](const Eigen::RowVectorXd& p) {
      auto perm = detail::order_by_distance(sites, p, &tie);
      if (!tie) seen.insert(std::move(perm));
    };
    for (int i = 0; i < resolution; ++i)
      for (int j = 0; j < resolution; ++j) {
        Eigen::RowVectorXd p(2);
        p << a(0) + (b(0) - a(0)) * (i + 0.5) / resolution, a(1) + (b(1) - a(1)) * (j + 0.5) / resolution;
        probe(p);
      }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u0(a(0), b(0)), u1(a(1), b(1));
    for (int s = 0; s < resolution * resolution; ++s) {
      Eigen::RowVectorXd p(2);
      p << u0(rng), u1(rng);
      probe(p);
    }
    rep.exact = false;
  }
  rep.k = k;
  rep.n = n;
  rep.achieved = seen.size();
  rep.upper_bound = std::pow(static_cast<double>(k), 2.0 * n);
  rep.total = std::round(std::exp(log_factorial(k)));
  rep.threshold = de_dimension_bound(k);
  rep.verdict = detail::verdict_for(k, n, rep.achieved, rep.total, rep.exact);
  return rep;
}

// ---------------------------------------------------------------------------
// softmax bottleneck

struct BottleneckWitness {
  int vocab = 0;
  int rank_e = 0;
  int rank_e_prime = 0;
  bool full_rank = false;
  Vector h;  // empty when full_rank
  std::vector<int> positive, negative;
  double residual = 0.0;  // ||E'^T h||_inf

  nlohmann::json to_json() const {
    nlohmann::json j{{"vocab", vocab}, {"rank_e", rank_e}, {"rank_e_prime", rank_e_prime}, {"full_rank", full_rank}};
    if (!full_rank) {
      j["h"] = std::vector<double>(h.data(), h.data() + h.size());
      j["positive"] = positive;
      j["negative"] = negative;
      j["residual"] = residual;
    }
    return j;
  }
};

inline Matrix augment_with_ones(const Matrix& e) {
  Matrix ep(e.rows(), e.cols() + 1);
  ep.leftCols(e.cols()) = e;
  ep.col(e.cols()).setOnes();
  return ep;
}

namespace detail {

inline double rank_tolerance(const Eigen::JacobiSVD<Matrix>& svd, const Matrix& m) {
  const double smax = svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
  return std::max<double>(m.rows(), m.cols()) * 1e-12 * std::max(smax, 1.0);
}

inline int numeric_rank(const Matrix& m) {
  if (m.size() == 0) return 0;
  Eigen::JacobiSVD<Matrix> svd(m);
  const double tol = rank_tolerance(svd, m);
  return static_cast<int>((svd.singularValues().array() > tol).count());
}

/// Orthonormal basis (columns) of {h : m^T h = 0}.
inline Matrix left_null_space(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeFullU);
  const double tol = rank_tolerance(svd, m);
  const auto r = (svd.singularValues().array() > tol).count();
  return svd.matrixU().rightCols(m.rows() - r);
}

/// Flips h so its first clearly nonzero entry is positive, and fills P/N.
inline void canonicalize(BottleneckWitness& w) {
  const double tol = 1e-12 * w.h.cwiseAbs().maxCoeff();
  for (Eigen::Index i = 0; i < w.h.size(); ++i)
    if (std::abs(w.h(i)) > tol) {
      if (w.h(i) < 0) w.h = -w.h;
      break;
    }
  w.positive.clear();
  w.negative.clear();
  for (Eigen::Index i = 0; i < w.h.size(); ++i) {
    if (w.h(i) > tol) w.positive.push_back(static_cast<int>(i));
    if (w.h(i) < -tol) w.negative.push_back(static_cast<int>(i));
  }
}

}  // namespace detail

/// Full-rank certificate for E' = [E | 1], or a unit vector h with h^T E' = 0.
inline BottleneckWitness bottleneck_witness(const Matrix& e) {
  if (e.rows() < 1 || e.cols() < 1) throw std::invalid_argument("bottleneck_witness: empty matrix");
  if (!e.allFinite()) throw std::invalid_argument("bottleneck_witness: non-finite entries");
  const Matrix ep = augment_with_ones(e);
  BottleneckWitness w;
  w.vocab = static_cast<int>(e.rows());
  w.rank_e = detail::numeric_rank(e);
  w.rank_e_prime = detail::numeric_rank(ep);
  w.full_rank = w.rank_e_prime == w.vocab;
  if (w.full_rank) return w;
  w.h = detail::left_null_space(ep).col(0);
  w.h.normalize();
  detail::canonicalize(w);
  w.residual = (ep.transpose() * w.h).cwiseAbs().maxCoeff();
  return w;
}

namespace detail {

/// Phase-I simplex: is {x >= 0 : A x = b} nonempty? Assumes b >= 0.
/// Dense tableau with Bland's rule; sizes here are tiny.
inline std::optional<bool> phase_one_feasible(Matrix a, Vector b, int max_pivots = 10000) {
  const Eigen::Index m = a.rows(), nv = a.cols();
  // Tableau columns: [x | artificials | rhs]; objective row minimizes sum of artificials.
  Matrix t = Matrix::Zero(m + 1, nv + m + 1);
  t.topLeftCorner(m, nv) = a;
  t.block(0, nv, m, m) = Matrix::Identity(m, m);
  t.topRightCorner(m, 1) = b;
  std::vector<Eigen::Index> basis(m);
  for (Eigen::Index i = 0; i < m; ++i) basis[i] = nv + i;
  // Reduced costs: objective row = -(sum of constraint rows) over non-artificial columns.
  for (Eigen::Index i = 0; i < m; ++i) {
    t.row(m).head(nv) -= t.row(i).head(nv);
    t(m, nv + m) -= t(i, nv + m);
  }
  const double eps = 1e-11;
  for (int pivots = 0; pivots < max_pivots; ++pivots) {
    Eigen::Index enter = -1;
    for (Eigen::Index j = 0; j < nv + m; ++j)
      if (t(m, j) < -eps) {
        enter = j;
        break;
      }
    if (enter < 0) return -t(m, nv + m) <= 1e-9;
    Eigen::Index leave = -1;
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < m; ++i)
      if (t(i, enter) > eps) {
        const double ratio = t(i, nv + m) / t(i, enter);
        if (ratio < best - 1e-15 || (std::abs(ratio - best) <= 1e-15 && basis[i] < basis[leave])) {
          best = ratio;
          leave = i;
        }
      }
    if (leave < 0) return std::nullopt;  // unbounded cannot happen in phase I; treat as failure
    t.row(leave) /= t(leave, enter);
    for (Eigen::Index i = 0; i <= m; ++i)
      if (i != leave && t(i, enter) != 0.0) t.row(i) -= t(i, enter) * t.row(leave);
    basis[leave] = enter;
  }
  return std::nullopt;
}

}  // namespace detail

/// Is there phi with (E phi)_{pi[0]} > (E phi)_{pi[1]} > ... ? Since the constraints
/// are homogeneous in phi, strict feasibility is equivalent to feasibility with margin 1.
/// Returns nullopt if the solver fails to terminate.
inline std::optional<bool> permutation_feasible(const Matrix& e, const Permutation& pi) {
  const Eigen::Index n = e.cols();
  const Eigen::Index m = static_cast<Eigen::Index>(pi.size()) - 1;
  if (m <= 0) return true;
  // D phi >= 1 with phi = u - v; D phi - s = 1, all of u, v, s >= 0.
  Matrix a = Matrix::Zero(m, 2 * n + m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::RowVectorXd d = e.row(pi[i]) - e.row(pi[i + 1]);
    a.block(i, 0, 1, n) = d;
    a.block(i, n, 1, n) = -d;
    a(i, 2 * n + i) = -1.0;
  }
  return detail::phase_one_feasible(a, Vector::Ones(m));
}

struct PermutationReport {
  std::vector<Permutation> feasible;
  std::size_t total = 0;
  bool exact = true;  // false when sphere sampling supplied any verdicts (lower bound)
  std::string method;

  std::size_t count() const { return feasible.size(); }
  nlohmann::json to_json() const {
    return {{"count", count()}, {"total", total}, {"exact", exact}, {"method", method}, {"feasible", feasible}};
  }
};

/// Every ordering of the rows of E realizable as an ordering of the logits E.phi.
/// method "lp" decides each permutation by linear feasibility (falling back to
/// sampling if the solver stalls); "sampling" draws `budget` directions on the sphere
/// and reports the orderings seen, a lower bound.
inline PermutationReport realizable_token_permutations(const Matrix& e, std::size_t budget = 20000,
                                                       const std::string& method = "lp",
                                                       std::uint64_t seed = 0) {
  const int v = static_cast<int>(e.rows());
  if (v < 1 || v > 5) throw std::invalid_argument("realizable_token_permutations: |V| must be in [1, 5]");
  if (e.cols() < 1 || !e.allFinite()) throw std::invalid_argument("realizable_token_permutations: bad matrix");
  if (method != "lp" && method != "sampling") throw std::invalid_argument("unknown method: " + method);
  PermutationReport rep;
  rep.method = method;
  rep.total = static_cast<std::size_t>(std::llround(std::exp(log_factorial(v))));

  std::set<Permutation> sampled;
  bool sampled_ready = false;
  auto sample_orders = [&] {
    if (sampled_ready) return;
    sampled_ready = true;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    for (std::size_t s = 0; s < budget; ++s) {
      Vector phi(e.cols());
      for (auto& x : phi) x = g(rng);
      const Vector z = e * phi.normalized();
      Permutation p(v);
      std::iota(p.begin(), p.end(), 0);
      std::sort(p.begin(), p.end(), [&](int a, int b) { return z(a) > z(b); });
      bool tie = false;
      for (int i = 0; i + 1 < v; ++i)
        if (z(p[i]) - z(p[i + 1]) <= 1e-12) tie = true;
      if (!tie) sampled.insert(p);
    }
  };

  Permutation pi(v);
  std::iota(pi.begin(), pi.end(), 0);
  do {
    bool ok = false;
    if (method == "lp") {
      const auto verdict = permutation_feasible(e, pi);
      if (verdict) {
        ok = *verdict;
      } else {
        sample_orders();
        ok = sampled.count(pi) != 0;
        rep.exact = false;
      }
    } else {
      sample_orders();
      ok = sampled.count(pi) != 0;
      rep.exact = false;
    }
    if (ok) rep.feasible.push_back(pi);
  } while (std::next_permutation(pi.begin(), pi.end()));
  return rep;
}

struct DistributionSolve {
  bool feasible = false;
  Vector phi;              // hidden vector, when feasible
  double sup_error = 0.0;  // ||softmax(E phi) - p||_inf of the least-squares candidate
  // When infeasible: h with h^T E' = 0 and sum_P h_i log p_i != sum_N |h_i| log p_i.
  Vector h;
  double positive_side = 0.0;
  double negative_side = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j{{"feasible", feasible}, {"sup_error", sup_error}};
    if (feasible) j["phi"] = std::vector<double>(phi.data(), phi.data() + phi.size());
    else {
      j["h"] = std::vector<double>(h.data(), h.data() + h.size());
      j["positive_side"] = positive_side;
      j["negative_side"] = negative_side;
    }
    return j;
  }
};

/// Finds phi with softmax(E phi) = p by least squares on E' phi' = log p, or
/// reports the null-space equality that p violates.
inline DistributionSolve solve_logits_for_distribution(const Matrix& e, std::span<const double> p) {
  if (static_cast<Eigen::Index>(p.size()) != e.rows())
    throw std::invalid_argument("solve_logits_for_distribution: size mismatch");
  for (double x : p)
    if (!(x > 0.0)) throw std::domain_error("solve_logits_for_distribution: p must be strictly positive");
  check_distribution(p, 1e-9);
  const Matrix ep = augment_with_ones(e);
  Vector logp(e.rows());
  for (Eigen::Index i = 0; i < logp.size(); ++i) logp(i) = std::log(p[i]);

  DistributionSolve out;
  const Vector sol = ep.completeOrthogonalDecomposition().solve(logp);
  const Vector phi = sol.head(e.cols());
  const Vector z = e * phi;
  const auto q = softmax(std::span<const double>(z.data(), z.size()));
  for (std::size_t i = 0; i < p.size(); ++i) out.sup_error = std::max(out.sup_error, std::abs(q[i] - p[i]));
  if (out.sup_error < 1e-9) {
    out.feasible = true;
    out.phi = phi;
    return out;
  }
  // The component of log p in the left null space of E' is the obstruction.
  const Matrix null = detail::left_null_space(ep);
  BottleneckWitness w;
  w.h = null * (null.transpose() * logp);
  if (w.h.norm() == 0.0) w.h = null.col(0);
  w.h.normalize();
  detail::canonicalize(w);
  out.h = w.h;
  for (int i : w.positive) out.positive_side += w.h(i) * logp(i);
  for (int i : w.negative) out.negative_side += -w.h(i) * logp(i);
  return out;
}

/// Joint distribution over two-token docIDs (a, b), matched position by position:
/// one hidden vector for the first token and one per first-token context.
struct TwoTokenSolve {
  bool feasible = false;
  Vector first;
  std::vector<Vector> second;  // indexed by first token
  double sup_error = 0.0;      // over the reconstructed joint
};

inline TwoTokenSolve solve_two_token_grid(const Matrix& e, const Matrix& joint) {
  if (joint.rows() != e.rows() || joint.cols() != e.rows())
    throw std::invalid_argument("solve_two_token_grid: joint must be |V| x |V|");
  const Eigen::Index v = e.rows();
  TwoTokenSolve out;
  const Vector marginal = joint.rowwise().sum();
  const auto s1 = solve_logits_for_distribution(e, std::span<const double>(marginal.data(), marginal.size()));
  if (!s1.feasible) return out;
  out.first = s1.phi;
  const Vector z1 = e * s1.phi;
  const auto p1 = softmax(std::span<const double>(z1.data(), z1.size()));
  for (Eigen::Index a = 0; a < v; ++a) {
    const Vector cond = joint.row(a).transpose() / marginal(a);
    const auto s2 = solve_logits_for_distribution(e, std::span<const double>(cond.data(), cond.size()));
    if (!s2.feasible) return out;
    const Vector z2 = e * s2.phi;
    const auto p2 = softmax(std::span<const double>(z2.data(), z2.size()));
    for (Eigen::Index b = 0; b < v; ++b)
      out.sup_error = std::max(out.sup_error, std::abs(p1[a] * p2[b] - joint(a, b)));
    out.second.push_back(s2.phi);
  }
  out.feasible = out.sup_error < 1e-9;
  return out;
}

}  // namespace arrlab
