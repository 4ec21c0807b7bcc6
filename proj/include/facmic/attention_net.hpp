// The client feature-attention adapter:
//   linear(D->H) -> batch norm -> LeakyReLU -> linear(H->D) -> softmax
// The softmax output is a mask over feature dimensions and the adapter
// returns mask (x) input, elementwise.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "facmic/core.hpp"

namespace facmic {

/// Hyperparameters that shape the adapter but are not trained.
struct AttentionConfig {
  double leaky_slope = 0.01;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
};

struct AttentionParams {
  Matrix w1;                    // D x H
  std::vector<double> b1;       // H
  std::vector<double> bn_gamma; // H
  std::vector<double> bn_beta;  // H
  Matrix w2;                    // H x D
  std::vector<double> b2;       // D
  std::vector<double> bn_running_mean;  // H, not optimized
  std::vector<double> bn_running_var;   // H, not optimized

  [[nodiscard]] std::size_t d() const noexcept { return w1.rows(); }
  [[nodiscard]] std::size_t h() const noexcept { return w1.cols(); }

  friend bool operator==(const AttentionParams&, const AttentionParams&) = default;
};

/// Gradients for the trainable fields only.
struct AttentionGrads {
  Matrix w1;
  std::vector<double> b1;
  std::vector<double> bn_gamma;
  std::vector<double> bn_beta;
  Matrix w2;
  std::vector<double> b2;
};

enum class Mode { train, eval };

constexpr std::size_t trainable_count(std::size_t d, std::size_t h) noexcept {
  return d * h + h + 2 * h + h * d + d;
}
constexpr std::size_t statistics_count(std::size_t h) noexcept { return 2 * h; }
constexpr std::size_t flat_count(std::size_t d, std::size_t h) noexcept {
  return trainable_count(d, h) + statistics_count(h);
}

inline AttentionParams init_params(std::size_t d, std::size_t h, std::uint64_t seed) {
  if (d < 1 || h < 1) throw UsageError("init_params: d and h must be >= 1");
  Rng rng(mix_seed(seed, 20));
  auto fill_uniform = [&rng](Matrix& m, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : m.data()) v = u(rng);
  };
  AttentionParams p;
  p.w1 = Matrix(d, h);
  fill_uniform(p.w1, d);
  p.b1.assign(h, 0.0);
  p.bn_gamma.assign(h, 1.0);
  p.bn_beta.assign(h, 0.0);
  p.w2 = Matrix(h, d);
  fill_uniform(p.w2, h);
  p.b2.assign(d, 0.0);
  p.bn_running_mean.assign(h, 0.0);
  p.bn_running_var.assign(h, 1.0);
  return p;
}

/// Intermediates of one forward pass, enough for exact reverse-mode gradients.
struct ForwardTape {
  Mode mode = Mode::train;
  Matrix input;       // B x D
  Matrix normalized;  // B x H, batch-norm output before the affine transform
  std::vector<double> inv_std;  // H
  Matrix activated;   // B x H, LeakyReLU output
  Matrix preact;      // B x H, LeakyReLU input (affine output)
  Matrix mask;        // B x D, softmax output
};

struct ForwardResult {
  Matrix mask;    // B x D, rows are probability vectors
  Matrix masked;  // B x D
  ForwardTape tape;
};

/// Runs the adapter on a batch.
///
/// In train mode batch statistics normalize the hidden layer and, when
/// `update_running_stats` is set, the running statistics move toward them with
/// the configured momentum (unbiased variance, as is conventional). Eval mode
/// uses the running statistics and never mutates `params`.
inline ForwardResult forward(AttentionParams& params, const Matrix& batch, Mode mode,
                             const AttentionConfig& cfg = {},
                             bool update_running_stats = true) {
  const std::size_t b = batch.rows();
  const std::size_t d = params.d();
  const std::size_t h = params.h();
  if (b < 1) throw DataError("forward: empty batch");
  if (batch.cols() != d)
    throw DataError("forward: batch width " + std::to_string(batch.cols()) +
                    " does not match adapter input dimension " + std::to_string(d));
  if (mode == Mode::train && b < 2)
    throw DataError("forward: train mode needs a batch of at least 2 for batch norm");

  ForwardTape tape;
  tape.mode = mode;
  tape.input = batch;

  Matrix z1 = matmul(batch, params.w1);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < h; ++j) z1(i, j) += params.b1[j];

  std::vector<double> mean(h, 0.0), var(h, 0.0);
  if (mode == Mode::train) {
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < h; ++j) mean[j] += z1(i, j);
    for (auto& m : mean) m /= static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < h; ++j) {
        const double c = z1(i, j) - mean[j];
        var[j] += c * c;
      }
    for (auto& v : var) v /= static_cast<double>(b);
    if (update_running_stats) {
      const double m = cfg.bn_momentum;
      const double unbias = static_cast<double>(b) / static_cast<double>(b - 1);
      for (std::size_t j = 0; j < h; ++j) {
        params.bn_running_mean[j] = (1.0 - m) * params.bn_running_mean[j] + m * mean[j];
        params.bn_running_var[j] = (1.0 - m) * params.bn_running_var[j] + m * var[j] * unbias;
      }
    }
  } else {
    mean = params.bn_running_mean;
    var = params.bn_running_var;
  }

  tape.inv_std.resize(h);
  for (std::size_t j = 0; j < h; ++j) tape.inv_std[j] = 1.0 / std::sqrt(var[j] + cfg.bn_eps);

  tape.normalized = Matrix(b, h);
  tape.preact = Matrix(b, h);
  tape.activated = Matrix(b, h);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < h; ++j) {
      const double xhat = (z1(i, j) - mean[j]) * tape.inv_std[j];
      const double y = params.bn_gamma[j] * xhat + params.bn_beta[j];
      tape.normalized(i, j) = xhat;
      tape.preact(i, j) = y;
      tape.activated(i, j) = y > 0.0 ? y : cfg.leaky_slope * y;
    }
  }

  Matrix z2 = matmul(tape.activated, params.w2);
  ForwardResult out;
  out.mask = Matrix(b, d);
  out.masked = Matrix(b, d);
  for (std::size_t i = 0; i < b; ++i) {
    auto zr = z2.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < d; ++j) {
      zr[j] += params.b2[j];
      mx = std::max(mx, zr[j]);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) sum += (out.mask(i, j) = std::exp(zr[j] - mx));
    for (std::size_t j = 0; j < d; ++j) {
      out.mask(i, j) /= sum;
      out.masked(i, j) = out.mask(i, j) * batch(i, j);
    }
  }
  tape.mask = out.mask;
  out.tape = std::move(tape);
  return out;
}

/// Eval-mode forward on a const parameter set.
inline ForwardResult forward_eval(const AttentionParams& params, const Matrix& batch,
                                  const AttentionConfig& cfg = {}) {
  AttentionParams copy = params;
  return forward(copy, batch, Mode::eval, cfg);
}

/// Gradient of a scalar loss with respect to every trainable field, given the
/// loss gradient with respect to the masked output.
inline AttentionGrads backward(const ForwardTape& tape, const AttentionParams& params,
                               const Matrix& d_masked, const AttentionConfig& cfg = {}) {
  const std::size_t b = tape.input.rows();
  const std::size_t d = params.d();
  const std::size_t h = params.h();
  if (d_masked.rows() != b || d_masked.cols() != d)
    throw DataError("backward: upstream gradient shape does not match the taped batch");
  if (tape.mask.rows() != b || tape.mask.cols() != d || tape.normalized.cols() != h)
    throw DataError("backward: tape does not match parameter shapes");

  // masked = mask * x  ->  d_mask = d_masked * x; softmax Jacobian per row.
  Matrix d_z2(b, d);
  for (std::size_t i = 0; i < b; ++i) {
    double inner = 0.0;
    for (std::size_t j = 0; j < d; ++j)
      inner += d_masked(i, j) * tape.input(i, j) * tape.mask(i, j);
    for (std::size_t j = 0; j < d; ++j)
      d_z2(i, j) = tape.mask(i, j) * (d_masked(i, j) * tape.input(i, j) - inner);
  }

  AttentionGrads g;
  g.w2 = matmul_tn(tape.activated, d_z2);
  g.b2.assign(d, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) g.b2[j] += d_z2(i, j);

  Matrix d_act = matmul_nt(d_z2, params.w2);  // B x H
  Matrix d_xhat(b, h);
  g.bn_gamma.assign(h, 0.0);
  g.bn_beta.assign(h, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < h; ++j) {
      const double dy = d_act(i, j) * (tape.preact(i, j) > 0.0 ? 1.0 : cfg.leaky_slope);
      g.bn_gamma[j] += dy * tape.normalized(i, j);
      g.bn_beta[j] += dy;
      d_xhat(i, j) = dy * params.bn_gamma[j];
    }
  }

  Matrix d_z1(b, h);
  if (tape.mode == Mode::train) {
    const double bn = static_cast<double>(b);
    for (std::size_t j = 0; j < h; ++j) {
      double sum = 0.0, sum_x = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        sum += d_xhat(i, j);
        sum_x += d_xhat(i, j) * tape.normalized(i, j);
      }
      for (std::size_t i = 0; i < b; ++i)
        d_z1(i, j) = tape.inv_std[j] / bn *
                     (bn * d_xhat(i, j) - sum - tape.normalized(i, j) * sum_x);
    }
  } else {
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < h; ++j) d_z1(i, j) = d_xhat(i, j) * tape.inv_std[j];
  }

  g.w1 = matmul_tn(tape.input, d_z1);
  g.b1.assign(h, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < h; ++j) g.b1[j] += d_z1(i, j);
  return g;
}

// ---------------------------------------------------------------------------
// Flat vectors. Field order (the aggregation wire contract):
//   w1 (row-major), b1, bn_gamma, bn_beta, w2 (row-major), b2,
//   bn_running_mean, bn_running_var
// The trainable fields form a prefix of length trainable_count(d, h).
// ---------------------------------------------------------------------------

namespace detail {
inline void append(std::vector<double>& out, const std::vector<double>& v) {
  out.insert(out.end(), v.begin(), v.end());
}
}  // namespace detail

inline std::vector<double> flatten(const AttentionParams& p) {
  std::vector<double> out;
  out.reserve(flat_count(p.d(), p.h()));
  detail::append(out, p.w1.data());
  detail::append(out, p.b1);
  detail::append(out, p.bn_gamma);
  detail::append(out, p.bn_beta);
  detail::append(out, p.w2.data());
  detail::append(out, p.b2);
  detail::append(out, p.bn_running_mean);
  detail::append(out, p.bn_running_var);
  return out;
}

inline std::vector<double> flatten_trainable(const AttentionParams& p) {
  auto flat = flatten(p);
  flat.resize(trainable_count(p.d(), p.h()));
  return flat;
}

inline std::vector<double> flatten(const AttentionGrads& g) {
  std::vector<double> out;
  out.reserve(trainable_count(g.w1.rows(), g.w1.cols()));
  detail::append(out, g.w1.data());
  detail::append(out, g.b1);
  detail::append(out, g.bn_gamma);
  detail::append(out, g.bn_beta);
  detail::append(out, g.w2.data());
  detail::append(out, g.b2);
  return out;
}

inline AttentionParams unflatten(std::span<const double> flat, std::size_t d, std::size_t h) {
  if (flat.size() != flat_count(d, h))
    throw DataError("unflatten: expected " + std::to_string(flat_count(d, h)) +
                    " values for D=" + std::to_string(d) + ", H=" + std::to_string(h) +
                    ", got " + std::to_string(flat.size()));
  std::size_t pos = 0;
  auto take = [&](std::size_t n) {
    std::vector<double> v(flat.begin() + static_cast<std::ptrdiff_t>(pos),
                          flat.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    return v;
  };
  AttentionParams p;
  p.w1 = Matrix(d, h);
  p.w1.data() = take(d * h);
  p.b1 = take(h);
  p.bn_gamma = take(h);
  p.bn_beta = take(h);
  p.w2 = Matrix(h, d);
  p.w2.data() = take(h * d);
  p.b2 = take(d);
  p.bn_running_mean = take(h);
  p.bn_running_var = take(h);
  for (double v : p.bn_running_var)
    if (!(v > 0.0)) throw DataError("unflatten: running variance must be strictly positive");
  return p;
}

/// Replaces the trainable prefix, leaving running statistics untouched.
inline void assign_trainable(AttentionParams& p, std::span<const double> trainable) {
  const std::size_t d = p.d(), h = p.h();
  if (trainable.size() != trainable_count(d, h))
    throw DataError("assign_trainable: length mismatch");
  std::vector<double> flat(trainable.begin(), trainable.end());
  detail::append(flat, p.bn_running_mean);
  detail::append(flat, p.bn_running_var);
  p = unflatten(flat, d, h);
}

}  // namespace facmic
