// Cosine-similarity classification, the batch contrastive loss, and the
// class-conditional kernel discrepancy (LMMD) with analytic gradients.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "facmic/core.hpp"

namespace facmic {

namespace detail {

inline std::vector<double> row_norms(const Matrix& m, const char* what) {
  std::vector<double> norms(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    norms[i] = std::sqrt(dot(m.row(i), m.row(i)));
    if (!(norms[i] > 0.0) || !std::isfinite(norms[i]))
      throw NumericError(std::string(what) + " row " + std::to_string(i) +
                         " has zero or non-finite norm");
  }
  return norms;
}

// Row-wise softmax of logits / tau, written into `out`.
inline void softmax_rows(const Matrix& logits, double tau, Matrix& out) {
  out = Matrix(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto in = logits.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : in) mx = std::max(mx, v / tau);
    double sum = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) sum += (out(i, j) = std::exp(in[j] / tau - mx));
    for (std::size_t j = 0; j < in.size(); ++j) out(i, j) /= sum;
  }
}

inline void check_tau(double tau) {
  if (!(tau > 0.0)) throw UsageError("temperature tau must be > 0");
}

}  // namespace detail

/// s(j, c) = <a_j, b_c> / (|a_j| |b_c|)
inline Matrix cosine_similarity(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw DataError("cosine_similarity: dimension mismatch");
  const auto na = detail::row_norms(a, "image feature");
  const auto nb = detail::row_norms(b, "text feature");
  Matrix s = matmul_nt(a, b);
  for (std::size_t i = 0; i < s.rows(); ++i)
    for (std::size_t j = 0; j < s.cols(); ++j) s(i, j) /= na[i] * nb[j];
  return s;
}

/// p(c | x_j): softmax over classes of cosine similarity / tau.
inline Matrix classify_probs(const Matrix& masked, const Matrix& text, double tau) {
  detail::check_tau(tau);
  Matrix probs;
  detail::softmax_rows(cosine_similarity(masked, text), tau, probs);
  return probs;
}

/// Argmax class per row of classify_probs; ties go to the lowest class id.
inline std::vector<std::uint16_t> pseudo_labels(const Matrix& masked, const Matrix& text,
                                                double tau) {
  const Matrix probs = classify_probs(masked, text, tau);
  std::vector<std::uint16_t> labels(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < probs.cols(); ++c)
      if (probs(i, c) > probs(i, best)) best = c;
    labels[i] = static_cast<std::uint16_t>(best);
  }
  return labels;
}

struct LossWithGrad {
  double loss = 0.0;
  Matrix d_masked;
};

/// Symmetric cross-entropy over the B x B image/text similarity matrix:
///   loss = -(1/B) sum_j 0.5 (log P_jj + log Q_jj),
/// P = row softmax of S/tau, Q = row softmax of S^T/tau.
/// Row j of `text_of_labels` is the prompt embedding of sample j's class.
inline LossWithGrad contrastive_loss(const Matrix& masked, const Matrix& text_of_labels,
                                     double tau) {
  detail::check_tau(tau);
  const std::size_t b = masked.rows();
  if (b < 1) throw DataError("contrastive_loss: empty batch");
  if (text_of_labels.rows() != b || text_of_labels.cols() != masked.cols())
    throw DataError("contrastive_loss: text batch shape does not match image batch");
  const auto nu = detail::row_norms(masked, "image feature");
  const auto nt = detail::row_norms(text_of_labels, "text feature");
  Matrix s = matmul_nt(masked, text_of_labels);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) s(i, j) /= nu[i] * nt[j];

  Matrix p, q, st(b, b);
  detail::softmax_rows(s, tau, p);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) st(i, j) = s(j, i);
  detail::softmax_rows(st, tau, q);

  // log-probabilities via log-sum-exp so tiny probabilities stay finite.
  auto log_diag = [tau](const Matrix& logits, std::size_t j) {
    auto row = logits.row(j);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : row) mx = std::max(mx, v / tau);
    double sum = 0.0;
    for (double v : row) sum += std::exp(v / tau - mx);
    return row[j] / tau - mx - std::log(sum);
  };
  double loss = 0.0;
  for (std::size_t j = 0; j < b; ++j) loss -= 0.5 * (log_diag(s, j) + log_diag(st, j));
  loss /= static_cast<double>(b);

  // dL/dS(i, j) = [(P_ij - [i=j]) + (Q_ji - [i=j])] / (2 B tau)
  const double scale = 1.0 / (2.0 * static_cast<double>(b) * tau);
  Matrix g(b, b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j)
      g(i, j) = scale * (p(i, j) + q(j, i) - (i == j ? 2.0 : 0.0));

  // dS(i, j)/du_i = t_j / (|u_i||t_j|) - S_ij u_i / |u_i|^2
  LossWithGrad out{loss, Matrix(b, masked.cols())};
  for (std::size_t i = 0; i < b; ++i) {
    auto du = out.d_masked.row(i);
    auto u = masked.row(i);
    double coeff_u = 0.0;
    for (std::size_t j = 0; j < b; ++j) {
      const double w = g(i, j) / (nu[i] * nt[j]);
      auto t = text_of_labels.row(j);
      for (std::size_t k = 0; k < du.size(); ++k) du[k] += w * t[k];
      coeff_u += g(i, j) * s(i, j);
    }
    const double inv_sq = 1.0 / (nu[i] * nu[i]);
    for (std::size_t k = 0; k < du.size(); ++k) du[k] -= coeff_u * u[k] * inv_sq;
  }
  return out;
}

/// k(x, y) = exp(-|x - y|^2 / bandwidth)
inline double gaussian_kernel(std::span<const double> x, std::span<const double> y,
                              double bandwidth) {
  if (!(bandwidth > 0.0)) throw UsageError("gaussian_kernel: bandwidth must be > 0");
  return std::exp(-squared_distance(x, y) / bandwidth);
}

/// Median squared Euclidean distance over all distinct pairs of the
/// concatenation of `a` and `b` (mean of the two middle values for an even
/// number of pairs).
inline double median_bandwidth(const Matrix& a, const Matrix& b) {
  const std::size_t n = a.rows() + b.rows();
  if (n < 2) throw NumericError("degenerate bandwidth: fewer than two points");
  if (a.rows() > 0 && b.rows() > 0 && a.cols() != b.cols())
    throw DataError("median_bandwidth: dimension mismatch");
  auto point = [&](std::size_t i) { return i < a.rows() ? a.row(i) : b.row(i - a.rows()); };
  std::vector<double> dist;
  dist.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) dist.push_back(squared_distance(point(i), point(j)));
  const std::size_t m = dist.size();
  const auto mid = dist.begin() + static_cast<std::ptrdiff_t>(m / 2);
  std::nth_element(dist.begin(), mid, dist.end());
  double median = *mid;
  if (m % 2 == 0) {
    const double lower = *std::max_element(dist.begin(), mid);
    median = 0.5 * (lower + median);
  }
  if (!(median > 0.0) || !std::isfinite(median))
    throw NumericError("degenerate bandwidth: median pairwise squared distance is " +
                       std::to_string(median));
  return median;
}

/// omega(i, c) = [y_i = c] / #{j : y_j = c}; absent classes give zero columns.
inline Matrix lmmd_weights(std::span<const std::uint16_t> labels, std::size_t k) {
  std::vector<std::size_t> counts(k, 0);
  for (auto l : labels) {
    if (l >= k) throw DataError("lmmd_weights: label " + std::to_string(l) + " outside [0, K)");
    ++counts[l];
  }
  Matrix w(labels.size(), k);
  for (std::size_t i = 0; i < labels.size(); ++i)
    w(i, labels[i]) = 1.0 / static_cast<double>(counts[labels[i]]);
  return w;
}

struct LmmdResult {
  double loss = 0.0;
  Matrix d_src;
  Matrix d_tgt;
  bool no_shared_class = false;  // loss forced to 0: the domains share no class
};

/// Per-class kernel mean discrepancy between source and target, averaged over
/// classes. A class contributes only when both domains have members; the
/// average divides by the number of classes present in at least one domain.
/// The bandwidth is treated as a constant for differentiation.
inline LmmdResult lmmd_loss(const Matrix& src, std::span<const std::uint16_t> src_labels,
                            const Matrix& tgt, std::span<const std::uint16_t> tgt_labels,
                            std::size_t k, double bandwidth) {
  if (!(bandwidth > 0.0)) throw UsageError("lmmd_loss: bandwidth must be > 0");
  const std::size_t ns = src.rows(), nt = tgt.rows();
  if (ns < 1 || nt < 1) throw DataError("lmmd_loss: both domains need at least one sample");
  if (src.cols() != tgt.cols()) throw DataError("lmmd_loss: dimension mismatch");
  if (src_labels.size() != ns || tgt_labels.size() != nt)
    throw DataError("lmmd_loss: label count does not match sample count");

  const Matrix ws = lmmd_weights(src_labels, k);
  const Matrix wt = lmmd_weights(tgt_labels, k);
  std::vector<bool> in_src(k, false), in_tgt(k, false);
  for (auto l : src_labels) in_src[l] = true;
  for (auto l : tgt_labels) in_tgt[l] = true;
  std::size_t present = 0;
  std::vector<double> active(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    if (in_src[c] || in_tgt[c]) ++present;
    if (in_src[c] && in_tgt[c]) active[c] = 1.0;
  }

  LmmdResult out{0.0, Matrix(ns, src.cols()), Matrix(nt, tgt.cols()), false};
  if (std::ranges::none_of(active, [](double a) { return a > 0.0; })) {
    out.no_shared_class = true;
    return out;
  }
  const double inv_k = 1.0 / static_cast<double>(present);

  // Pair coefficient A(i, j) = (1/K') sum_c active_c w_i,c w_j,c.
  auto pair_coeff = [&](const Matrix& wa, std::size_t i, const Matrix& wb, std::size_t j) {
    double a = 0.0;
    for (std::size_t c = 0; c < k; ++c) a += active[c] * wa(i, c) * wb(j, c);
    return a * inv_k;
  };
  const double two_over_bw = 2.0 / bandwidth;

  // Each term: coeff * k(x, y); d/dx = -coeff * k * 2 (x - y) / bw.
  auto accumulate = [&](const Matrix& x, std::size_t i, const Matrix& y, std::size_t j,
                        double coeff, Matrix* dx, Matrix* dy) {
    if (coeff == 0.0) return;
    const double kv = gaussian_kernel(x.row(i), y.row(j), bandwidth);
    out.loss += coeff * kv;
    const double g = -coeff * kv * two_over_bw;
    auto xi = x.row(i);
    auto yj = y.row(j);
    for (std::size_t f = 0; f < xi.size(); ++f) {
      const double diff = xi[f] - yj[f];
      if (dx) (*dx)(i, f) += g * diff;
      if (dy) (*dy)(j, f) -= g * diff;
    }
  };

  for (std::size_t i = 0; i < ns; ++i)
    for (std::size_t j = 0; j < ns; ++j)
      accumulate(src, i, src, j, pair_coeff(ws, i, ws, j), &out.d_src, &out.d_src);
  for (std::size_t i = 0; i < nt; ++i)
    for (std::size_t j = 0; j < nt; ++j)
      accumulate(tgt, i, tgt, j, pair_coeff(wt, i, wt, j), &out.d_tgt, &out.d_tgt);
  for (std::size_t i = 0; i < ns; ++i)
    for (std::size_t j = 0; j < nt; ++j)
      accumulate(src, i, tgt, j, -2.0 * pair_coeff(ws, i, wt, j), &out.d_src, &out.d_tgt);
  return out;
}

}  // namespace facmic
