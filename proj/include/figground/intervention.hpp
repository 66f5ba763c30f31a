#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <span>
#include <string_view>
#include <vector>

#include "figground/geometry.hpp"
#include "figground/model.hpp"
#include "figground/tokenizer.hpp"

namespace figground {

/// Forward pass with the selected heads' residual contributions o_{l,h}
/// multiplied by alpha before they enter the stream.
template <typename T>
ForwardResult<T> scaled_forward(const Parameters<T>& params, const TokenGrid& grid, const InterventionConfig& cfg) {
  cfg.validate(params.config);
  return forward(params, grid, cfg);
}

/// 1 - JSD(p || q) with base-2 logarithms, so the result lies in [0, 1].
/// Per-index terms are summed in sorted order, which makes the value exactly
/// invariant under any joint permutation of the two distributions.
inline double js_similarity(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) fail(ErrorCode::ShapeMismatch, "distributions must have the same non-zero length");
  double sp = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0) || !(q[i] >= 0.0)) fail(ErrorCode::NotNormalized, "probabilities must be non-negative");
    sp += p[i];
    sq += q[i];
  }
  if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6) fail(ErrorCode::NotNormalized, "probabilities must sum to 1");

  std::vector<double> terms;
  terms.reserve(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    double t = 0.0;
    if (p[i] > 0.0) t += 0.5 * p[i] * std::log2(p[i] / m);
    if (q[i] > 0.0) t += 0.5 * q[i] * std::log2(q[i] / m);
    if (t != 0.0) terms.push_back(t);
  }
  std::sort(terms.begin(), terms.end());
  double jsd = 0.0;
  for (double t : terms) jsd += t;
  return std::clamp(1.0 - jsd, 0.0, 1.0);
}

enum class Decision { Convex, Concave, Tie };

inline std::string_view to_string(Decision d) {
  switch (d) {
    case Decision::Convex: return "convex";
    case Decision::Concave: return "concave";
    case Decision::Tie: return "tie";
  }
  return "tie";
}

inline Decision decide(double s_convex, double s_concave) {
  if (s_convex > s_concave) return Decision::Convex;
  if (s_concave > s_convex) return Decision::Concave;
  return Decision::Tie;
}

struct ManifoldPoint {
  double s_convex = 0.0;
  double s_concave = 0.0;
  Decision decision = Decision::Tie;
  double alpha = 1.0;
};

/// Idealized completions of the conflict patches: the hull raster's tokens
/// (convex) and the dart raster's tokens (concave) at each masked position.
struct ConflictTargets {
  std::vector<int> positions;
  std::vector<int> convex_tokens;
  std::vector<int> concave_tokens;
  std::vector<double> coverage;
};

inline ConflictTargets idealized_targets(const DartShape& shape, const ConflictRegion& region, const Codebook& cb, int width, int height) {
  const TokenGrid convex = tokenize(rasterize(region.hull, width, height), cb);
  const TokenGrid concave = tokenize(rasterize(shape.polygon(), width, height), cb);
  ConflictTargets t;
  for (int p : region.mask_patches) {
    t.positions.push_back(p);
    t.convex_tokens.push_back(convex.tokens[p]);
    t.concave_tokens.push_back(concave.tokens[p]);
    double cov = 0.0;
    for (const auto& [idx, frac] : region.coverage)
      if (idx == p) cov = frac;
    t.coverage.push_back(cov);
  }
  return t;
}

enum class PatchWeighting { Uniform, Coverage };

template <typename T>
std::vector<double> softmax_row(const Matrix<T>& logits, int row) {
  std::vector<double> p(static_cast<std::size_t>(logits.cols()));
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < logits.cols(); ++j) mx = std::max(mx, static_cast<double>(logits(row, j)));
  double z = 0.0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j) z += (p[j] = std::exp(static_cast<double>(logits(row, j)) - mx));
  for (double& v : p) v /= z;
  return p;
}

/// Mean JS similarity of the predicted patch distributions to one-hot convex
/// and concave targets over the conflict patches.
template <typename T>
ManifoldPoint manifold_point(const Matrix<T>& logits, const ConflictTargets& targets, PatchWeighting weighting = PatchWeighting::Uniform,
                             double alpha = 1.0) {
  if (targets.positions.empty()) fail(ErrorCode::EmptyConflict, "no conflict patches");
  const auto V = static_cast<std::size_t>(logits.cols());
  ManifoldPoint mp;
  mp.alpha = alpha;
  double wsum = 0.0;
  std::vector<double> onehot(V, 0.0);
  for (std::size_t i = 0; i < targets.positions.size(); ++i) {
    const std::vector<double> p = softmax_row(logits, targets.positions[i]);
    const double w = weighting == PatchWeighting::Coverage ? targets.coverage[i] : 1.0;
    auto sim = [&](int token) {
      if (token < 0 || static_cast<std::size_t>(token) >= V) fail(ErrorCode::IndexOutOfRange, "target token outside the vocabulary");
      onehot[token] = 1.0;
      const double s = js_similarity(p, onehot);
      onehot[token] = 0.0;
      return s;
    };
    mp.s_convex += w * sim(targets.convex_tokens[i]);
    mp.s_concave += w * sim(targets.concave_tokens[i]);
    wsum += w;
  }
  if (wsum <= 0.0) fail(ErrorCode::EmptyConflict, "conflict patches carry zero weight");
  mp.s_convex /= wsum;
  mp.s_concave /= wsum;
  mp.decision = decide(mp.s_convex, mp.s_concave);
  return mp;
}

/// Reconstruction: input tokens where visible, argmax prediction where masked.
template <typename T>
std::vector<int> argmax_grid(const Matrix<T>& logits, const TokenGrid& grid) {
  std::vector<int> out = grid.tokens;
  for (int i = 0; i < grid.size(); ++i) {
    if (!grid.mask[i]) continue;
    Eigen::Index arg;
    logits.row(i).maxCoeff(&arg);
    out[i] = static_cast<int>(arg);
  }
  return out;
}

/// Evenly spaced alpha values from lo to hi. When 1/step is an integer the
/// values are built as k / (1/step), so 1.0 and 0.0 land exactly on the grid.
/// The default is -2.0 to +2.0 in steps of 0.1 (41 points).
inline std::vector<double> default_alpha_grid(double lo = -2.0, double hi = 2.0, double step = 0.1) {
  if (!(step > 0.0) || hi < lo) fail(ErrorCode::InvalidArgument, "alpha grid needs step > 0 and lo <= hi");
  const double per_unit = 1.0 / step;
  const bool integral = std::abs(per_unit - std::round(per_unit)) < 1e-9;
  const long k0 = std::lround(lo / step), k1 = std::lround(hi / step);
  std::vector<double> g;
  for (long k = k0; k <= k1; ++k) g.push_back(integral ? static_cast<double>(k) / std::round(per_unit) : static_cast<double>(k) * step);
  return g;
}

struct SweepEntry {
  ManifoldPoint point;
  std::vector<int> argmax;
  int flipped_patches = 0;  // conflict patches whose argmax differs from the unscaled run
};

struct FlipPoint {
  double alpha_from = 0.0;
  double alpha_to = 0.0;
  Decision from = Decision::Tie;
  Decision to = Decision::Tie;

  bool operator==(const FlipPoint&) const = default;
};

struct SweepTrajectory {
  int layer = 0;
  int head = 0;
  ManifoldPoint baseline;
  std::vector<int> baseline_argmax;
  std::vector<SweepEntry> entries;  // ascending alpha
  std::vector<FlipPoint> flips;
};

/// Decision changes between consecutive alpha values (ascending).
inline std::vector<FlipPoint> find_flips(std::span<const SweepEntry> entries) {
  std::vector<FlipPoint> flips;
  for (std::size_t i = 1; i < entries.size(); ++i)
    if (entries[i].point.decision != entries[i - 1].point.decision)
      flips.push_back({entries[i - 1].point.alpha, entries[i].point.alpha, entries[i - 1].point.decision, entries[i].point.decision});
  return flips;
}

template <typename T>
bool logits_bitwise_equal(const Matrix<T>& a, const Matrix<T>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(T)) == 0;
}

/// One scaled forward per alpha on head (layer, head); the stimulus grid must
/// carry the conflict mask.
template <typename T>
SweepTrajectory alpha_sweep(const Parameters<T>& params, const TokenGrid& grid, const ConflictTargets& targets, int layer, int head,
                            std::vector<double> alphas, PatchWeighting weighting = PatchWeighting::Uniform) {
  InterventionConfig probe{{{layer, head, 1.0}}};
  probe.validate(params.config);
  std::sort(alphas.begin(), alphas.end());

  SweepTrajectory traj;
  traj.layer = layer;
  traj.head = head;
  const ForwardResult<T> base = forward(params, grid);
  traj.baseline = manifold_point(base.logits, targets, weighting, 1.0);
  traj.baseline_argmax = argmax_grid(base.logits, grid);

  for (double alpha : alphas) {
    const ForwardResult<T> run = scaled_forward(params, grid, InterventionConfig{{{layer, head, alpha}}});
    if (alpha == 1.0 && !logits_bitwise_equal(run.logits, base.logits))
      fail(ErrorCode::InvariantViolation, "unit scaling changed the logits");
    SweepEntry e;
    e.point = manifold_point(run.logits, targets, weighting, alpha);
    e.argmax = argmax_grid(run.logits, grid);
    for (int p : targets.positions) e.flipped_patches += e.argmax[p] != traj.baseline_argmax[p];
    traj.entries.push_back(std::move(e));
  }
  traj.flips = find_flips(traj.entries);
  return traj;
}

}  // namespace figground
