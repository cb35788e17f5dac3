#pragma once

// Toy causal transformer ranker with tied input/output embeddings:
// logits = E * phi(context), phi = final hidden state.
//
// Sequences are "packed": a shared prefix (segment 0) followed by any number
// of continuation segments. A token attends to the prefix and to earlier
// tokens of its own segment, and continuation positions restart right after
// the prefix. A plain causal sequence is the special case with one segment.
//
// Forward and backward passes are hand-written; tests compare them against
// central differences.

#include "arrlab/diffcore.hpp"
#include "arrlab/vocab.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace arrlab {

struct ArrConfig {
  int vocab_size = Vocabulary::size();
  int width = 64;
  int layers = 2;
  int heads = 2;
  int ff_width = 256;
  int max_context = 512;
  bool final_norm = true;

  void validate() const {
    if (vocab_size < 1 || width < 1 || layers < 0 || heads < 1 || ff_width < 1 || max_context < 1)
      throw std::invalid_argument("ArrConfig: sizes must be positive");
    if (width % heads != 0) throw std::invalid_argument("ArrConfig: width must be divisible by heads");
  }
};

struct PackedSequence {
  std::vector<TokenId> tokens;
  std::vector<int> positions;
  std::vector<int> segments;  // 0 = shared prefix

  std::size_t size() const { return tokens.size(); }

  static PackedSequence causal(std::span<const TokenId> toks) {
    PackedSequence s;
    s.tokens.assign(toks.begin(), toks.end());
    for (std::size_t i = 0; i < toks.size(); ++i) {
      s.positions.push_back(static_cast<int>(i));
      s.segments.push_back(0);
    }
    return s;
  }

  /// Appends a continuation segment; returns the row index of its first token.
  std::size_t add_segment(std::span<const TokenId> toks, int prefix_length) {
    const int seg = segments.empty() ? 1 : std::max(1, *std::max_element(segments.begin(), segments.end()) + 1);
    const std::size_t first = tokens.size();
    for (std::size_t i = 0; i < toks.size(); ++i) {
      tokens.push_back(toks[i]);
      positions.push_back(prefix_length + static_cast<int>(i));
      segments.push_back(seg);
    }
    return first;
  }

  bool attends(std::size_t i, std::size_t j) const {
    return j <= i && (segments[j] == 0 || segments[j] == segments[i]);
  }
};

/// Sparse soft target for one logits row.
struct TokenTarget {
  std::size_t row = 0;
  std::vector<std::pair<TokenId, double>> dist;
  double weight = 1.0;
};

inline double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  constexpr double k = 0.7978845608028654;
  const double t = std::tanh(k * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x);
}

namespace detail {

struct NormCache {
  Matrix xhat;
  Vector inv_sigma;
};

inline Matrix layer_norm(const Matrix& x, const Tensor& gain, const Tensor& bias, NormCache* cache) {
  constexpr double eps = 1e-5;
  const auto n = x.cols();
  Matrix xhat(x.rows(), n);
  Vector inv(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    inv(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.row(i).array() - mu) * inv(i);
  }
  Matrix y = (xhat.array().rowwise() * gain.vector().transpose().array()).rowwise() + bias.vector().transpose().array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_sigma = std::move(inv);
  }
  return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const NormCache& c, const Tensor& gain, Tensor& dgain,
                                  Tensor& dbias) {
  dgain.matrix() += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  dbias.matrix() += dy.colwise().sum();
  Matrix dxhat = dy.array().rowwise() * gain.vector().transpose().array();
  const double n = static_cast<double>(dy.cols());
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).sum() / n;
    const double m2 = dxhat.row(i).dot(c.xhat.row(i)) / n;
    dx.row(i) = (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2) * c.inv_sigma(i);
  }
  return dx;
}

}  // namespace detail

class ArrModel {
 public:
  ArrModel() = default;

  explicit ArrModel(const ArrConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    build(seed);
    docid_mask_.assign(cfg_.vocab_size, true);
  }

  const ArrConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  /// Tokens that may appear inside a docID (the constrained-decoding subvocabulary).
  const std::vector<bool>& docid_mask() const { return docid_mask_; }
  void set_docid_mask(std::vector<bool> mask) {
    if (static_cast<int>(mask.size()) != cfg_.vocab_size) throw std::invalid_argument("docID mask size mismatch");
    if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; }))
      throw std::invalid_argument("docID subvocabulary must be nonempty");
    docid_mask_ = std::move(mask);
  }
  std::vector<TokenId> docid_vocabulary() const {
    std::vector<TokenId> out;
    for (int t = 0; t < cfg_.vocab_size; ++t)
      if (docid_mask_[t]) out.push_back(t);
    return out;
  }

  struct Cache {
    struct Block {
      Matrix x_in, y1, q, k, v, o, x_mid, y2, h, g;
      detail::NormCache ln1, ln2;
      std::vector<Matrix> attn;  // per head, T x T
    };
    std::vector<Block> blocks;
    Matrix x_out;
    detail::NormCache lnf;
    Matrix phi;
  };

  /// Final hidden states phi for every row of `seq` (T x width).
  Matrix hidden(const PackedSequence& seq, Cache* cache = nullptr) const {
    check_sequence(seq);
    const auto T = static_cast<Eigen::Index>(seq.size());
    const auto& emb = params_.at("tok_emb").matrix();
    const auto& pos = params_.at("pos_emb").matrix();
    Matrix x(T, cfg_.width);
    for (Eigen::Index i = 0; i < T; ++i) x.row(i) = emb.row(seq.tokens[i]) + pos.row(seq.positions[i]);

    if (cache) cache->blocks.assign(cfg_.layers, {});
    for (int l = 0; l < cfg_.layers; ++l) x = block_forward(l, x, seq, cache ? &cache->blocks[l] : nullptr);

    Matrix phi;
    if (cfg_.final_norm) {
      phi = detail::layer_norm(x, params_.at("lnf.g"), params_.at("lnf.b"), cache ? &cache->lnf : nullptr);
    } else {
      phi = x;
    }
    if (cache) {
      cache->x_out = x;
      cache->phi = phi;
    }
    return phi;
  }

  /// Logits over the full vocabulary at the given rows.
  Matrix logits(const PackedSequence& seq, std::span<const std::size_t> rows) const {
    const Matrix phi = hidden(seq);
    return logits_from_hidden(phi, rows);
  }

  Matrix logits_from_hidden(const Matrix& phi, std::span<const std::size_t> rows) const {
    const auto& emb = params_.at("tok_emb").matrix();
    Matrix sel(rows.size(), cfg_.width);
    for (std::size_t r = 0; r < rows.size(); ++r) sel.row(r) = phi.row(rows[r]);
    return sel * emb.transpose();
  }

  /// Next-token logits after a plain causal context.
  Vector next_token_logits(std::span<const TokenId> context) const {
    const auto seq = PackedSequence::causal(context);
    const std::size_t last = context.size() - 1;
    return logits(seq, std::span<const std::size_t>(&last, 1)).row(0).transpose();
  }

  /// sum_k weight_k * CE(dist_k, logits[row_k]); accumulates d/dparams into `grad` if given.
  double loss(const PackedSequence& seq, std::span<const TokenTarget> targets, ParamSet* grad = nullptr) const {
    Cache cache;
    const Matrix phi = hidden(seq, grad ? &cache : nullptr);
    std::vector<std::size_t> rows;
    rows.reserve(targets.size());
    for (const auto& t : targets) rows.push_back(t.row);
    const Matrix z = logits_from_hidden(phi, rows);

    double total = 0.0;
    Matrix dz = Matrix::Zero(z.rows(), z.cols());
    for (std::size_t k = 0; k < targets.size(); ++k) {
      const auto& tgt = targets[k];
      const double m = z.row(k).maxCoeff();
      const double lse = m + std::log((z.row(k).array() - m).exp().sum());
      double mass = 0.0;
      for (const auto& [tok, p] : tgt.dist) {
        if (tok < 0 || tok >= cfg_.vocab_size) throw std::out_of_range("target token outside vocabulary");
        if (p > 0.0) total -= tgt.weight * p * (z(k, tok) - lse);
        mass += p;
      }
      if (std::abs(mass - 1.0) > 1e-9) throw std::invalid_argument("target distribution does not sum to 1");
      if (grad) {
        dz.row(k) = tgt.weight * (z.row(k).array() - lse).exp().matrix();
        for (const auto& [tok, p] : tgt.dist) dz(k, tok) -= tgt.weight * p;
      }
    }
    if (grad) backward(seq, cache, rows, dz, *grad);
    return total;
  }

 private:
  ArrConfig cfg_;
  ParamSet params_;
  std::vector<bool> docid_mask_;

  static std::string bname(int l, const char* leaf) { return "b" + std::to_string(l) + "." + leaf; }

  void build(std::uint64_t seed) {
    const auto n = static_cast<std::size_t>(cfg_.width);
    const auto ff = static_cast<std::size_t>(cfg_.ff_width);
    std::mt19937_64 rng(seed);
    fill_normal(params_.add("tok_emb", {static_cast<std::size_t>(cfg_.vocab_size), n}), 0.02, rng);
    fill_normal(params_.add("pos_emb", {static_cast<std::size_t>(cfg_.max_context), n}), 0.02, rng);
    const double proj_scale = 1.0 / std::sqrt(2.0 * std::max(1, cfg_.layers));
    for (int l = 0; l < cfg_.layers; ++l) {
      params_.add(bname(l, "ln1.g"), {n}, 1.0);
      params_.add(bname(l, "ln1.b"), {n}, 0.0);
      fill_normal(params_.add(bname(l, "wq"), {n, n}), 1.0 / std::sqrt(double(n)), rng);
      fill_normal(params_.add(bname(l, "wk"), {n, n}), 1.0 / std::sqrt(double(n)), rng);
      fill_normal(params_.add(bname(l, "wv"), {n, n}), 1.0 / std::sqrt(double(n)), rng);
      fill_normal(params_.add(bname(l, "wo"), {n, n}), proj_scale / std::sqrt(double(n)), rng);
      params_.add(bname(l, "ln2.g"), {n}, 1.0);
      params_.add(bname(l, "ln2.b"), {n}, 0.0);
      fill_normal(params_.add(bname(l, "w1"), {n, ff}), 1.0 / std::sqrt(double(n)), rng);
      params_.add(bname(l, "b1"), {ff}, 0.0);
      fill_normal(params_.add(bname(l, "w2"), {ff, n}), proj_scale / std::sqrt(double(ff)), rng);
      params_.add(bname(l, "b2"), {n}, 0.0);
    }
    if (cfg_.final_norm) {
      params_.add("lnf.g", {n}, 1.0);
      params_.add("lnf.b", {n}, 0.0);
    }
  }

  void check_sequence(const PackedSequence& seq) const {
    if (seq.tokens.empty()) throw std::invalid_argument("empty sequence");
    if (seq.positions.size() != seq.size() || seq.segments.size() != seq.size())
      throw std::invalid_argument("packed sequence arrays differ in length");
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (seq.tokens[i] < 0 || seq.tokens[i] >= cfg_.vocab_size) throw std::out_of_range("token id out of range");
      if (seq.positions[i] < 0 || seq.positions[i] >= cfg_.max_context)
        throw std::length_error("context exceeds positional capacity");
    }
  }

  Matrix block_forward(int l, const Matrix& x, const PackedSequence& seq, Cache::Block* c) const {
    const auto T = x.rows();
    const int H = cfg_.heads;
    const int dh = cfg_.width / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    detail::NormCache ln1;
    Matrix y1 = detail::layer_norm(x, params_.at(bname(l, "ln1.g")), params_.at(bname(l, "ln1.b")), &ln1);
    Matrix q = y1 * params_.at(bname(l, "wq")).matrix();
    Matrix k = y1 * params_.at(bname(l, "wk")).matrix();
    Matrix v = y1 * params_.at(bname(l, "wv")).matrix();
    Matrix o(T, cfg_.width);
    std::vector<Matrix> attn(H);
    for (int h = 0; h < H; ++h) {
      Matrix s = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() * scale;
      Matrix a = Matrix::Zero(T, T);
      for (Eigen::Index i = 0; i < T; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j <= i; ++j)
          if (seq.attends(i, j)) m = std::max(m, s(i, j));
        double z = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j)
          if (seq.attends(i, j)) {
            a(i, j) = std::exp(s(i, j) - m);
            z += a(i, j);
          }
        a.row(i) /= z;
      }
      o.middleCols(h * dh, dh) = a * v.middleCols(h * dh, dh);
      attn[h] = std::move(a);
    }
    Matrix x_mid = x + o * params_.at(bname(l, "wo")).matrix();

    detail::NormCache ln2;
    Matrix y2 = detail::layer_norm(x_mid, params_.at(bname(l, "ln2.g")), params_.at(bname(l, "ln2.b")), &ln2);
    Matrix hpre = (y2 * params_.at(bname(l, "w1")).matrix()).rowwise() + params_.at(bname(l, "b1")).matrix().row(0);
    Matrix g = hpre.unaryExpr([](double t) { return gelu(t); });
    Matrix out = x_mid + ((g * params_.at(bname(l, "w2")).matrix()).rowwise() +
                          params_.at(bname(l, "b2")).matrix().row(0));
    if (c) {
      c->x_in = x;
      c->ln1 = std::move(ln1);
      c->y1 = std::move(y1);
      c->q = std::move(q);
      c->k = std::move(k);
      c->v = std::move(v);
      c->attn = std::move(attn);
      c->o = std::move(o);
      c->x_mid = std::move(x_mid);
      c->ln2 = std::move(ln2);
      c->y2 = std::move(y2);
      c->h = std::move(hpre);
      c->g = std::move(g);
    }
    return out;
  }

  Matrix block_backward(int l, const Matrix& dout, const Cache::Block& c, ParamSet& grad) const {
    const int H = cfg_.heads;
    const int dh = cfg_.width / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // feed-forward
    grad.at(bname(l, "b2")).matrix() += dout.colwise().sum();
    grad.at(bname(l, "w2")).matrix() += c.g.transpose() * dout;
    Matrix dg = dout * params_.at(bname(l, "w2")).matrix().transpose();
    Matrix dh_pre = dg.array() * c.h.unaryExpr([](double t) { return gelu_grad(t); }).array();
    grad.at(bname(l, "b1")).matrix() += dh_pre.colwise().sum();
    grad.at(bname(l, "w1")).matrix() += c.y2.transpose() * dh_pre;
    Matrix dy2 = dh_pre * params_.at(bname(l, "w1")).matrix().transpose();
    Matrix dx_mid = dout + detail::layer_norm_backward(dy2, c.ln2, params_.at(bname(l, "ln2.g")),
                                                       grad.at(bname(l, "ln2.g")), grad.at(bname(l, "ln2.b")));

    // attention
    grad.at(bname(l, "wo")).matrix() += c.o.transpose() * dx_mid;
    Matrix d_o = dx_mid * params_.at(bname(l, "wo")).matrix().transpose();
    Matrix dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()), dv(c.v.rows(), c.v.cols());
    for (int h = 0; h < H; ++h) {
      const Matrix& a = c.attn[h];
      const auto doh = d_o.middleCols(h * dh, dh);
      dv.middleCols(h * dh, dh) = a.transpose() * doh;
      Matrix da = doh * c.v.middleCols(h * dh, dh).transpose();
      const Vector rowdot = (da.array() * a.array()).rowwise().sum();
      Matrix ds = (a.array() * (da.colwise() - rowdot).array()) * scale;
      dq.middleCols(h * dh, dh) = ds * c.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh) = ds.transpose() * c.q.middleCols(h * dh, dh);
    }
    grad.at(bname(l, "wq")).matrix() += c.y1.transpose() * dq;
    grad.at(bname(l, "wk")).matrix() += c.y1.transpose() * dk;
    grad.at(bname(l, "wv")).matrix() += c.y1.transpose() * dv;
    Matrix dy1 = dq * params_.at(bname(l, "wq")).matrix().transpose() +
                 dk * params_.at(bname(l, "wk")).matrix().transpose() +
                 dv * params_.at(bname(l, "wv")).matrix().transpose();
    return dx_mid + detail::layer_norm_backward(dy1, c.ln1, params_.at(bname(l, "ln1.g")),
                                                grad.at(bname(l, "ln1.g")), grad.at(bname(l, "ln1.b")));
  }

  void backward(const PackedSequence& seq, const Cache& cache, std::span<const std::size_t> rows, const Matrix& dz,
                ParamSet& grad) const {
    const auto& emb = params_.at("tok_emb").matrix();
    auto demb = grad.at("tok_emb").matrix();
    Matrix dphi = Matrix::Zero(cache.phi.rows(), cache.phi.cols());
    const Matrix dsel = dz * emb;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      dphi.row(rows[r]) += dsel.row(r);
      demb += dz.row(r).transpose() * cache.phi.row(rows[r]);
    }
    Matrix dx = cfg_.final_norm ? detail::layer_norm_backward(dphi, cache.lnf, params_.at("lnf.g"), grad.at("lnf.g"),
                                                              grad.at("lnf.b"))
                                : dphi;
    for (int l = cfg_.layers - 1; l >= 0; --l) dx = block_backward(l, dx, cache.blocks[l], grad);
    auto dpos = grad.at("pos_emb").matrix();
    for (std::size_t i = 0; i < seq.size(); ++i) {
      demb.row(seq.tokens[i]) += dx.row(i);
      dpos.row(seq.positions[i]) += dx.row(i);
    }
  }
};

/// Softmax restricted to `valid`; every other entry is exactly 0.
inline std::vector<double> constrained_logits(std::span<const double> logits, std::span<const TokenId> valid) {
  if (valid.empty()) throw std::invalid_argument("constrained_logits: empty valid set");
  std::vector<double> sub;
  sub.reserve(valid.size());
  for (TokenId t : valid) {
    if (t < 0 || static_cast<std::size_t>(t) >= logits.size()) throw std::out_of_range("valid token out of range");
    sub.push_back(logits[t]);
  }
  const auto p = softmax(sub);
  std::vector<double> out(logits.size(), 0.0);
  for (std::size_t i = 0; i < valid.size(); ++i) out[valid[i]] += p[i];
  return out;
}

}  // namespace arrlab
