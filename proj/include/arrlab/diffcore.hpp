#pragma once

// Differentiable-computation contract shared by every trainable model:
// named parameter tensors, numerically stable (log-)softmax, soft-target
// cross entropy with its closed-form gradient, and a central-difference
// gradient checker.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace arrlab {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

/// Dense row-major tensor of 64-bit floats with an explicit shape.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0) : shape(std::move(s)) {
    data.assign(element_count(shape), fill);
  }

  static std::size_t element_count(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape.front(); }
  std::size_t cols() const { return shape.size() < 2 ? 1 : size() / rows(); }

  // 1-D tensors are viewed as a single row.
  MatrixMap matrix() {
    if (shape.size() == 1) return MatrixMap(data.data(), 1, static_cast<Eigen::Index>(size()));
    return MatrixMap(data.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols()));
  }
  ConstMatrixMap matrix() const {
    if (shape.size() == 1) return ConstMatrixMap(data.data(), 1, static_cast<Eigen::Index>(size()));
    return ConstMatrixMap(data.data(), static_cast<Eigen::Index>(rows()),
                          static_cast<Eigen::Index>(cols()));
  }
  Eigen::Map<Vector> vector() { return {data.data(), static_cast<Eigen::Index>(size())}; }
  Eigen::Map<const Vector> vector() const { return {data.data(), static_cast<Eigen::Index>(size())}; }
};

/// Named tensors. Shapes are fixed once added.
class ParamSet {
 public:
  Tensor& add(const std::string& name, std::vector<std::size_t> shape, double fill = 0.0) {
    auto [it, inserted] = tensors_.try_emplace(name, std::move(shape), fill);
    if (!inserted) throw std::invalid_argument("duplicate parameter tensor: " + name);
    return it->second;
  }

  Tensor& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown parameter tensor: " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown parameter tensor: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  std::size_t tensor_count() const { return tensors_.size(); }

  std::size_t element_count() const {
    std::size_t total = 0;
    for (const auto& [name, t] : tensors_) total += t.size();
    return total;
  }

  /// Same names and shapes, all zeros.
  ParamSet zeros_like() const {
    ParamSet out;
    for (const auto& [name, t] : tensors_) out.add(name, t.shape);
    return out;
  }

  void set_zero() {
    for (auto& [name, t] : tensors_) std::fill(t.data.begin(), t.data.end(), 0.0);
  }

  bool same_layout(const ParamSet& other) const {
    if (other.tensors_.size() != tensors_.size()) return false;
    for (const auto& [name, t] : tensors_) {
      auto it = other.tensors_.find(name);
      if (it == other.tensors_.end() || it->second.shape != t.shape) return false;
    }
    return true;
  }

  /// this += scale * other
  void axpy(double scale, const ParamSet& other) {
    if (!same_layout(other)) throw std::invalid_argument("ParamSet layout mismatch in axpy");
    for (auto& [name, t] : tensors_) {
      const auto& o = other.at(name);
      for (std::size_t i = 0; i < t.size(); ++i) t.data[i] += scale * o.data[i];
    }
  }

  void scale(double factor) {
    for (auto& [name, t] : tensors_)
      for (double& v : t.data) v *= factor;
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& [name, t] : tensors_)
      for (double v : t.data) s += v * v;
    return s;
  }

  bool all_finite() const {
    for (const auto& [name, t] : tensors_)
      for (double v : t.data)
        if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  std::map<std::string, Tensor> tensors_;
};

struct ValueAndGrad {
  double value = 0.0;
  ParamSet grad;
};

/// Loss as a function of parameters, returning the value and its analytic gradient.
using DifferentiableFn = std::function<ValueAndGrad(const ParamSet&)>;

/// Result of comparing analytic and central-difference gradients.
struct GradReport {
  std::map<std::string, double> max_rel_error;
  double eps = 0.0;
  std::size_t coordinates_checked = 0;

  double max_error() const {
    double m = 0.0;
    for (const auto& [name, e] : max_rel_error) m = std::max(m, e);
    return m;
  }
};

// ---------------------------------------------------------------------------
// softmax family

inline double log_sum_exp(std::span<const double> z) {
  if (z.empty()) throw std::invalid_argument("log_sum_exp of empty vector");
  const double m = *std::max_element(z.begin(), z.end());
  if (m == -std::numeric_limits<double>::infinity()) return m;
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

inline std::vector<double> log_softmax(std::span<const double> z) {
  const double lse = log_sum_exp(z);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - lse;
  return out;
}

inline std::vector<double> softmax(std::span<const double> z) {
  auto out = log_softmax(z);
  for (double& v : out) v = std::exp(v);
  return out;
}

/// Shannon entropy in nats; 0·log 0 is taken as 0.
inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

struct SoftCrossEntropy {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d logits = softmax(logits) - target
};

inline void check_distribution(std::span<const double> p, double tol = 1e-9) {
  double s = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw std::invalid_argument("target distribution has a negative or NaN entry");
    s += v;
  }
  if (std::abs(s - 1.0) > tol) throw std::invalid_argument("target distribution does not sum to 1");
}

/// -sum_i target_i * log softmax(logits)_i with its gradient w.r.t. logits.
inline SoftCrossEntropy cross_entropy_soft(std::span<const double> target, std::span<const double> logits) {
  if (target.size() != logits.size())
    throw std::invalid_argument("cross_entropy_soft: target/logits length mismatch");
  check_distribution(target);
  const auto logp = log_softmax(logits);
  SoftCrossEntropy out;
  out.grad.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (target[i] > 0.0) out.loss -= target[i] * logp[i];
    out.grad[i] = std::exp(logp[i]) - target[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// gradient checking

struct GradCheckOptions {
  double eps = 1e-5;
  // Below this magnitude the absolute error is reported instead of the relative one.
  double abs_floor = 1e-6;
  // 0 = check every coordinate; otherwise a seeded random subset per tensor.
  std::size_t max_coords_per_tensor = 0;
  unsigned seed = 0;
};

inline GradReport grad_check(const DifferentiableFn& loss_fn, const ParamSet& params,
                             const GradCheckOptions& opts = {}) {
  if (!(opts.eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  const ValueAndGrad base = loss_fn(params);
  if (!std::isfinite(base.value)) throw std::domain_error("grad_check: non-finite loss");
  if (!base.grad.same_layout(params))
    throw std::invalid_argument("grad_check: gradient layout differs from parameters");

  GradReport report;
  report.eps = opts.eps;
  ParamSet probe = params;
  std::mt19937_64 rng(opts.seed);

  for (const auto& [name, tensor] : params) {
    std::vector<std::size_t> coords(tensor.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_tensor != 0 && coords.size() > opts.max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_tensor);
    }
    double worst = 0.0;
    auto& slot = probe.at(name).data;
    const auto& analytic = base.grad.at(name).data;
    for (std::size_t i : coords) {
      const double orig = slot[i];
      slot[i] = orig + opts.eps;
      const double up = loss_fn(probe).value;
      slot[i] = orig - opts.eps;
      const double down = loss_fn(probe).value;
      slot[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw std::domain_error("grad_check: non-finite loss at perturbed point");
      const double fd = (up - down) / (2.0 * opts.eps);
      const double denom = std::max(std::abs(fd), std::abs(analytic[i]));
      const double err = std::abs(fd - analytic[i]) / (denom < opts.abs_floor ? 1.0 : denom);
      worst = std::max(worst, err);
      ++report.coordinates_checked;
    }
    report.max_rel_error[name] = worst;
  }
  return report;
}

// ---------------------------------------------------------------------------
// initialisation helpers

inline void fill_normal(Tensor& t, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.data) v = dist(rng);
}

}  // namespace arrlab
