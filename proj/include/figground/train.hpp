#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "figground/model.hpp"

namespace figground {

namespace detail {

/// dL/dx for a row-wise layer norm, accumulating gain/bias gradients.
template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dout, const LayerNormCache<T>& c, const RowVector<T>& gain, RowVector<T>& dgain,
                              RowVector<T>& dbias) {
  dgain += (dout.array() * c.normed.array()).colwise().sum().matrix();
  dbias += dout.colwise().sum();
  const Matrix<T> dn = dout.array().rowwise() * gain.array();
  const auto d = static_cast<T>(dout.cols());
  const ColVector<T> mean_dn = dn.rowwise().sum() / d;
  const ColVector<T> mean_dn_n = (dn.array() * c.normed.array()).rowwise().sum().matrix() / d;
  Matrix<T> dx = dn;
  dx.colwise() -= mean_dn;
  dx -= (c.normed.array().colwise() * mean_dn_n.array()).matrix();
  return c.inv_std.asDiagonal() * dx;
}

}  // namespace detail

/// Summed cross-entropy over the masked positions of `grid` (targets are the
/// grid's own tokens there). When `grad` is given, accumulates
/// `weight * dLoss/dtheta` into it.
template <typename T>
double masked_loss_and_gradient(const Parameters<T>& p, const TokenGrid& grid, Parameters<T>* grad, T weight = T(1)) {
  const std::vector<int> rows = grid.masked_positions();
  if (rows.empty()) return 0.0;
  const ModelConfig& cfg = p.config;
  const int n = cfg.positions, d = cfg.d_model, heads = cfg.heads, dh = cfg.head_dim();

  detail::ForwardCache<T> cache;
  Matrix<T> logits = detail::forward_impl<T>(p, grid, {}, {}, rows, nullptr, grad ? &cache : nullptr);

  double loss = 0.0;
  Matrix<T> dlogits(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int target = grid.tokens[rows[r]];
    if (target < 0 || target >= cfg.vocab) fail(ErrorCode::ShapeMismatch, "target token outside the vocabulary");
    const T mx = logits.row(r).maxCoeff();
    auto e = (logits.row(r).array() - mx).exp();
    const T z = e.sum();
    loss += static_cast<double>(std::log(z) + mx - logits(r, target));
    dlogits.row(r) = e / z;
    dlogits(r, target) -= T(1);
  }
  if (!grad) return loss;
  dlogits *= weight;

  // unembedding and final layer norm
  Matrix<T> y_sel(static_cast<Eigen::Index>(rows.size()), d);
  for (std::size_t r = 0; r < rows.size(); ++r) y_sel.row(static_cast<Eigen::Index>(r)) = cache.final_out.row(rows[r]);
  grad->unembedding.noalias() += y_sel.transpose() * dlogits;
  Matrix<T> dy = Matrix<T>::Zero(n, d);
  const Matrix<T> dy_sel = dlogits * p.unembedding.transpose();
  for (std::size_t r = 0; r < rows.size(); ++r) dy.row(rows[r]) = dy_sel.row(static_cast<Eigen::Index>(r));
  Matrix<T> dx = detail::layer_norm_backward(dy, cache.final_ln, p.final_gain, grad->final_gain, grad->final_bias);

  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));
  for (int l = cfg.layers - 1; l >= 0; --l) {
    const LayerParams<T>& lp = p.layers[l];
    LayerParams<T>& gl = grad->layers[l];
    const detail::LayerCache<T>& c = cache.layers[l];

    // MLP sublayer
    gl.w2.noalias() += c.hidden.transpose() * dx;
    gl.b2 += dx.colwise().sum();
    Matrix<T> dhidden = dx * lp.w2.transpose();
    dhidden.array() *= gelu_grad(c.hidden_pre, c.hidden_tanh).array();
    gl.w1.noalias() += c.b.transpose() * dhidden;
    gl.b1 += dhidden.colwise().sum();
    const Matrix<T> db = dhidden * lp.w1.transpose();
    dx += detail::layer_norm_backward(db, c.ln2, lp.ln2_gain, gl.ln2_gain, gl.ln2_bias);

    // attention sublayer
    gl.wo.noalias() += c.z.transpose() * dx;
    const Matrix<T> dz = dx * lp.wo.transpose();
    Matrix<T> dq(n, d), dk(n, d), dv(n, d);
    for (int h = 0; h < heads; ++h) {
      const auto cols = [&](const Matrix<T>& m) { return m.middleCols(h * dh, dh); };
      const Matrix<T>& prob = c.probs[h];
      dv.middleCols(h * dh, dh) = prob.transpose() * cols(dz);
      Matrix<T> dp = cols(dz) * cols(c.v).transpose();
      const ColVector<T> row_dot = (dp.array() * prob.array()).rowwise().sum();
      Matrix<T> ds = (prob.array() * (dp.colwise() - row_dot).array()).matrix() * inv_sqrt_dh;
      dq.middleCols(h * dh, dh) = ds * cols(c.k);
      dk.middleCols(h * dh, dh) = ds.transpose() * cols(c.q);
    }
    gl.wq.noalias() += c.a.transpose() * dq;
    gl.wk.noalias() += c.a.transpose() * dk;
    gl.wv.noalias() += c.a.transpose() * dv;
    gl.bq += dq.colwise().sum();
    gl.bv += dv.colwise().sum();
    const Matrix<T> da = dq * lp.wq.transpose() + dk * lp.wk.transpose() + dv * lp.wv.transpose();
    dx += detail::layer_norm_backward(da, c.ln1, lp.ln1_gain, gl.ln1_gain, gl.ln1_bias);
  }

  for (int i = 0; i < n; ++i) {
    if (grid.mask[i]) grad->mask_embedding += dx.row(i);
    else grad->token_embedding.row(grid.tokens[i]) += dx.row(i);
  }
  grad->position_embedding += dx;
  return loss;
}

/// Mean masked cross-entropy of one sample.
template <typename T>
double masked_loss(const Parameters<T>& p, const TokenGrid& grid) {
  const auto count = grid.masked_positions().size();
  return count == 0 ? 0.0 : masked_loss_and_gradient<T>(p, grid, nullptr) / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_group;
  std::map<std::string, double> per_group;
};

/// Analytic gradients against central differences, per parameter group:
///   err = max|g_analytic - g_numeric| / max(max|g_analytic|, max|g_numeric|)
/// Groups whose gradients are both below 1e-10 use the absolute gap.
inline GradCheckResult grad_check(const Parameters<double>& params, const TokenGrid& sample, double eps = 1e-5) {
  const auto count = sample.masked_positions().size();
  const double norm = count == 0 ? 0.0 : 1.0 / static_cast<double>(count);
  Parameters<double> grad = Parameters<double>::zeros(params.config);
  masked_loss_and_gradient<double>(params, sample, &grad, norm);

  std::vector<std::pair<std::string, std::span<const double>>> analytic;
  grad.visit([&](std::string_view name, std::span<const double> s) { analytic.emplace_back(std::string(name), s); });

  Parameters<double> probe = params;
  std::vector<std::span<double>> slots;
  probe.visit([&](std::string_view, std::span<double> s) { slots.push_back(s); });

  GradCheckResult out;
  for (std::size_t g = 0; g < slots.size(); ++g) {
    double max_gap = 0.0, max_a = 0.0, max_n = 0.0;
    for (std::size_t i = 0; i < slots[g].size(); ++i) {
      const double saved = slots[g][i];
      slots[g][i] = saved + eps;
      const double up = masked_loss(probe, sample);
      slots[g][i] = saved - eps;
      const double down = masked_loss(probe, sample);
      slots[g][i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[g].second[i];
      max_gap = std::max(max_gap, std::abs(a - numeric));
      max_a = std::max(max_a, std::abs(a));
      max_n = std::max(max_n, std::abs(numeric));
    }
    const double scale = std::max(max_a, max_n);
    const double err = scale < 1e-10 ? max_gap : max_gap / scale;
    out.per_group[analytic[g].first] = err;
    if (err >= out.max_relative_error) {
      out.max_relative_error = err;
      out.worst_group = analytic[g].first;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer and training loop
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
  Parameters<T> m;
  Parameters<T> v;
  std::uint64_t step = 0;

  static AdamState zeros(const ModelConfig& cfg) { return {Parameters<T>::zeros(cfg), Parameters<T>::zeros(cfg), 0}; }
};

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
void adam_update(Parameters<T>& params, const Parameters<T>& grad, AdamState<T>& state, const AdamOptions& opt, double lr) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  std::vector<std::span<T>> ps, ms, vs;
  std::vector<std::span<const T>> gs;
  params.visit([&](std::string_view, std::span<T> s) { ps.push_back(s); });
  state.m.visit([&](std::string_view, std::span<T> s) { ms.push_back(s); });
  state.v.visit([&](std::string_view, std::span<T> s) { vs.push_back(s); });
  grad.visit([&](std::string_view, std::span<const T> s) { gs.push_back(s); });
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(opt.epsilon);
  for (std::size_t g = 0; g < ps.size(); ++g) {
    for (std::size_t i = 0; i < ps[g].size(); ++i) {
      const T gi = gs[g][i];
      ms[g][i] = b1 * ms[g][i] + (T(1) - b1) * gi;
      vs[g][i] = b2 * vs[g][i] + (T(1) - b2) * gi * gi;
      ps[g][i] -= step_size * ms[g][i] / (std::sqrt(vs[g][i] * inv_bc2) + eps);
    }
  }
}

enum class LrSchedule { Constant, Cosine };

struct TrainOptions {
  std::uint64_t steps = 1000;
  int batch = 16;
  AdamOptions adam;
  LrSchedule schedule = LrSchedule::Constant;
  std::uint64_t warmup = 0;
  double mask_fraction = 0.4;
  std::uint64_t seed = 0;  // masking / batching stream
  std::uint64_t stop_at = 0;  // if non-zero, return once this step is reached; the schedule still spans `steps`
};

struct LossPoint {
  std::uint64_t step = 0;
  double loss = 0.0;
};

inline double learning_rate_at(const TrainOptions& opt, std::uint64_t step) {
  double lr = opt.adam.learning_rate;
  if (opt.warmup > 0 && step < opt.warmup) lr *= static_cast<double>(step + 1) / static_cast<double>(opt.warmup);
  if (opt.schedule == LrSchedule::Cosine && opt.steps > 0)
    lr *= 0.5 * (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) / static_cast<double>(opt.steps)));
  return lr;
}

/// Uniform random patch masking: exactly round(fraction * N) positions
/// (at least one) drawn without replacement.
inline void random_mask(TokenGrid& grid, double fraction, Rng& rng) {
  const int n = grid.size();
  const int k = std::clamp(static_cast<int>(std::lround(fraction * n)), 1, n);
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  std::fill(grid.mask.begin(), grid.mask.end(), 0);
  for (int i = 0; i < k; ++i) grid.mask[idx[i]] = 1;
}

/// The batch and masks of a step depend only on (seed, step), so training
/// resumed from a checkpoint replays the same stream as an uninterrupted run.
inline std::vector<TokenGrid> training_batch(std::span<const TokenGrid> corpus, const TrainOptions& opt, std::uint64_t step) {
  Rng rng = make_rng(substream_seed(opt.seed, "masking", step));
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  std::vector<TokenGrid> batch;
  batch.reserve(opt.batch);
  for (int b = 0; b < opt.batch; ++b) {
    TokenGrid g = corpus[pick(rng)];
    random_mask(g, opt.mask_fraction, rng);
    batch.push_back(std::move(g));
  }
  return batch;
}

/// Runs Adam from `state.step` up to `opt.steps` (or `opt.stop_at`). Each step's loss is the mean
/// cross-entropy over every masked position in the batch.
template <typename T>
std::vector<LossPoint> train(Parameters<T>& params, AdamState<T>& state, std::span<const TokenGrid> corpus, const TrainOptions& opt,
                             const std::function<void(const LossPoint&)>& on_step = {}) {
  if (corpus.empty()) fail(ErrorCode::EmptyCorpus, "training corpus is empty");
  if (opt.batch < 1) fail(ErrorCode::InvalidArgument, "batch must be >= 1");
  std::vector<LossPoint> curve;
  Parameters<T> grad = Parameters<T>::zeros(params.config);
  const std::uint64_t end = opt.stop_at > 0 ? std::min(opt.stop_at, opt.steps) : opt.steps;
  while (state.step < end) {
    const std::uint64_t step = state.step;
    const auto batch = training_batch(corpus, opt, step);
    std::size_t masked = 0;
    for (const auto& g : batch) masked += g.masked_positions().size();
    grad.visit([](std::string_view, std::span<T> s) { std::fill(s.begin(), s.end(), T(0)); });
    const T weight = static_cast<T>(1.0 / static_cast<double>(masked));
    double loss = 0.0;
    for (const auto& g : batch) loss += masked_loss_and_gradient<T>(params, g, &grad, weight);
    loss /= static_cast<double>(masked);
    if (!std::isfinite(loss)) fail(ErrorCode::DivergenceDetected, "loss became non-finite at step " + std::to_string(step));
    adam_update(params, grad, state, opt.adam, learning_rate_at(opt, step));
    if (!all_finite(params)) fail(ErrorCode::DivergenceDetected, "parameters became non-finite at step " + std::to_string(step));
    curve.push_back({step, loss});
    if (on_step) on_step(curve.back());
  }
  return curve;
}

/// Masked top-1 accuracy: fraction of masked positions whose argmax logit is
/// the true token.
template <typename T>
double masked_top1(const Parameters<T>& params, std::span<const TokenGrid> grids) {
  std::size_t hits = 0, total = 0;
  for (const auto& g : grids) {
    const auto rows = g.masked_positions();
    if (rows.empty()) continue;
    const Matrix<T> logits = detail::forward_impl<T>(params, g, {}, {}, rows, nullptr, nullptr);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      Eigen::Index arg;
      logits.row(static_cast<Eigen::Index>(r)).maxCoeff(&arg);
      hits += static_cast<int>(arg) == g.tokens[rows[r]];
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace figground
