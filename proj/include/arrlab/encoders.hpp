#pragma once

// Baseline scorers over atomic query/document ids:
//  * DeTable: lookup-table dual encoder, score = <E(q), E(d)>, rows kept on
//    the unit sphere by projection after every update.
//  * CeMlp: cross encoder, score = MLP(concat(E(q), E(d))) with three ReLU
//    hidden layers of width 2n and a scalar output.

#include "arrlab/diffcore.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace arrlab {

/// Lookup table from string ids to rows of a trainable matrix.
class IdTable {
 public:
  IdTable() = default;
  explicit IdTable(std::vector<std::string> ids) : ids_(std::move(ids)) {
    for (std::size_t i = 0; i < ids_.size(); ++i)
      if (!index_.emplace(ids_[i], i).second) throw std::invalid_argument("duplicate id: " + ids_[i]);
  }
  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }
  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  std::size_t row(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw std::out_of_range("unknown id: " + id);
    return it->second;
  }

 private:
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline std::string query_key(const std::string& q) { return "q:" + q; }
inline std::string doc_key(const std::string& d) { return "d:" + d; }

class DeTable {
 public:
  DeTable() = default;
  DeTable(std::vector<std::string> ids, int width, std::uint64_t seed) : ids_(std::move(ids)), width_(width) {
    if (width < 1) throw std::invalid_argument("DeTable: width must be positive");
    std::mt19937_64 rng(seed);
    fill_normal(params_.add("table", {ids_.size(), static_cast<std::size_t>(width)}), 1.0, rng);
    project_rows();
  }

  int width() const { return width_; }
  const IdTable& ids() const { return ids_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  Eigen::Map<const Vector> embedding(const std::string& id) const {
    const auto& t = params_.at("table");
    return {t.data.data() + ids_.row(id) * width_, width_};
  }

  double score(const std::string& q, const std::string& d) const { return embedding(q).dot(embedding(d)); }

  /// Rescale every row to unit L2 norm.
  void project_rows() {
    auto m = params_.at("table").matrix();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      const double norm = m.row(i).norm();
      if (norm > 0.0) m.row(i) /= norm;
    }
  }

 private:
  IdTable ids_;
  int width_ = 0;
  ParamSet params_;
};

inline double de_score(const DeTable& table, const std::string& q, const std::string& d) { return table.score(q, d); }

class CeMlp {
 public:
  static constexpr int kHidden = 3;

  CeMlp() = default;
  /// `width` is n; the MLP input is 2n. Weights ~ N(0, 1/(2n)), biases 0.
  CeMlp(std::vector<std::string> ids, int width, std::uint64_t seed) : ids_(std::move(ids)), width_(width) {
    if (width < 1) throw std::invalid_argument("CeMlp: width must be positive");
    std::mt19937_64 rng(seed);
    const auto n = static_cast<std::size_t>(width);
    const auto two_n = 2 * n;
    fill_normal(params_.add("emb", {ids_.size(), n}), 1.0 / std::sqrt(double(n)), rng);
    const double sd = std::sqrt(1.0 / double(two_n));
    for (int l = 0; l < kHidden; ++l) {
      fill_normal(params_.add(wname(l), {two_n, two_n}), sd, rng);
      params_.add(bname(l), {two_n}, 0.0);
    }
    fill_normal(params_.add(wname(kHidden), {two_n, 1}), sd, rng);
    params_.add(bname(kHidden), {1}, 0.0);
  }

  int width() const { return width_; }
  const IdTable& ids() const { return ids_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  Eigen::Map<const Vector> embedding(const std::string& id) const {
    const auto& t = params_.at("emb");
    return {t.data.data() + ids_.row(id) * width_, width_};
  }

  struct Trace {
    std::vector<Vector> pre;  // pre-activations of each hidden layer
    std::vector<Vector> act;  // act[0] = input, act[l+1] = relu(pre[l])
  };

  /// MLP(concat(q, d)).
  double forward(std::span<const double> q, std::span<const double> d, Trace* trace = nullptr) const {
    if (q.size() != static_cast<std::size_t>(width_) || d.size() != static_cast<std::size_t>(width_))
      throw std::invalid_argument("ce_score: embedding dimension mismatch");
    Vector a(2 * width_);
    for (int i = 0; i < width_; ++i) {
      a(i) = q[i];
      a(width_ + i) = d[i];
    }
    if (trace) {
      trace->pre.clear();
      trace->act = {a};
    }
    for (int l = 0; l < kHidden; ++l) {
      Vector z = params_.at(wname(l)).matrix().transpose() * a + params_.at(bname(l)).vector();
      a = z.cwiseMax(0.0);
      if (trace) {
        trace->pre.push_back(z);
        trace->act.push_back(a);
      }
    }
    return (params_.at(wname(kHidden)).matrix().transpose() * a)(0) + params_.at(bname(kHidden)).data[0];
  }

  /// Accumulates d(score)/d(params) * upstream into `grad`; returns d(score)/d(input) * upstream.
  Vector backward(const Trace& trace, double upstream, ParamSet& grad) const {
    Vector da = params_.at(wname(kHidden)).matrix().col(0) * upstream;
    grad.at(wname(kHidden)).matrix().col(0) += trace.act[kHidden] * upstream;
    grad.at(bname(kHidden)).data[0] += upstream;
    for (int l = kHidden - 1; l >= 0; --l) {
      Vector dz = da.array() * (trace.pre[l].array() > 0.0).cast<double>();
      grad.at(wname(l)).matrix() += trace.act[l] * dz.transpose();
      grad.at(bname(l)).vector() += dz;
      da = params_.at(wname(l)).matrix() * dz;
    }
    return da;
  }

  double score(const std::string& q, const std::string& d) const {
    const auto eq = embedding(q);
    const auto ed = embedding(d);
    return forward({eq.data(), static_cast<std::size_t>(width_)}, {ed.data(), static_cast<std::size_t>(width_)});
  }

 private:
  IdTable ids_;
  int width_ = 0;
  ParamSet params_;

  static std::string wname(int l) { return "w" + std::to_string(l); }
  static std::string bname(int l) { return "b" + std::to_string(l); }
};

inline double ce_score(const CeMlp& mlp, std::span<const double> q_emb, std::span<const double> d_emb) {
  return mlp.forward(q_emb, d_emb);
}

}  // namespace arrlab
