#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string_view>
#include <vector>

#include "figground/model.hpp"

namespace figground {

/// Reduction applied to the logits of a token set.
enum class Aggregation { Mean, Sum, LogSumExp };

inline std::string_view to_string(Aggregation a) {
  switch (a) {
    case Aggregation::Mean: return "mean";
    case Aggregation::Sum: return "sum";
    case Aggregation::LogSumExp: return "logsumexp";
  }
  return "mean";
}

inline Aggregation parse_aggregation(std::string_view s) {
  if (s == "mean") return Aggregation::Mean;
  if (s == "sum") return Aggregation::Sum;
  if (s == "logsumexp") return Aggregation::LogSumExp;
  fail(ErrorCode::InvalidArgument, "unknown aggregation '" + std::string(s) + "'");
}

struct TargetSets {
  std::vector<int> figure;
  std::vector<int> ground;
};

/// Final layer-norm statistics of one position, frozen from a forward pass.
struct FrozenNorm {
  double inv_std = 1.0;
};

template <typename T>
FrozenNorm frozen_norm(const ResidualTrace<T>& trace, int position) {
  return {1.0 / std::sqrt(static_cast<double>(trace.final_var(position)) + static_cast<double>(trace.ln_eps))};
}

namespace detail {

inline double aggregate(std::span<const double> values, Aggregation agg) {
  double acc = 0.0;
  switch (agg) {
    case Aggregation::Mean:
    case Aggregation::Sum:
      for (double v : values) acc += v;
      return agg == Aggregation::Mean ? acc / static_cast<double>(values.size()) : acc;
    case Aggregation::LogSumExp: {
      const double mx = *std::max_element(values.begin(), values.end());
      for (double v : values) acc += std::exp(v - mx);
      return mx + std::log(acc);
    }
  }
  return acc;
}

}  // namespace detail

/// Direct logit attribution of one residual-stream vector `o` at a position
/// with frozen final-norm statistics. The vector is centered, scaled by the
/// frozen inverse standard deviation and the final gain, projected through the
/// unembedding, and reduced to figure-minus-ground. The final-norm bias enters
/// only when `include_bias` is set; with it off the map is linear in `o`
/// (for the mean and sum reductions).
template <typename T>
double attribute_component(std::span<const T> o, FrozenNorm norm, const Parameters<T>& params, const TargetSets& targets,
                           Aggregation agg = Aggregation::Mean, bool include_bias = false) {
  if (targets.figure.empty() || targets.ground.empty()) fail(ErrorCode::EmptyTargetSet, "figure and ground token sets must be non-empty");
  const auto d = static_cast<std::size_t>(params.config.d_model);
  if (o.size() != d) fail(ErrorCode::ShapeMismatch, "component width differs from d_model");
  double mean = 0.0;
  for (T v : o) mean += static_cast<double>(v);
  mean /= static_cast<double>(d);
  std::vector<double> u(d);
  for (std::size_t k = 0; k < d; ++k) {
    u[k] = static_cast<double>(params.final_gain(k)) * (static_cast<double>(o[k]) - mean) * norm.inv_std;
    if (include_bias) u[k] += static_cast<double>(params.final_bias(k));
  }
  auto set_logits = [&](const std::vector<int>& set) {
    std::vector<double> out;
    out.reserve(set.size());
    for (int t : set) {
      if (t < 0 || t >= params.config.vocab) fail(ErrorCode::IndexOutOfRange, "target token outside the vocabulary");
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += u[k] * static_cast<double>(params.unembedding(k, t));
      out.push_back(acc);
    }
    return out;
  };
  const auto fig = set_logits(targets.figure);
  const auto gnd = set_logits(targets.ground);
  return detail::aggregate(fig, agg) - detail::aggregate(gnd, agg);
}

/// Figure-minus-ground difference read directly from a row of logits.
template <typename T>
double logit_difference(std::span<const T> logits, const TargetSets& targets, Aggregation agg = Aggregation::Mean) {
  std::vector<double> fig, gnd;
  for (int t : targets.figure) fig.push_back(static_cast<double>(logits[t]));
  for (int t : targets.ground) gnd.push_back(static_cast<double>(logits[t]));
  return detail::aggregate(fig, agg) - detail::aggregate(gnd, agg);
}

/// Scores of every residual component at one position (or averaged over a
/// set of positions).
struct ComponentScores {
  double embedding = 0.0;               // includes the final-norm bias
  std::vector<std::vector<double>> heads;  // [layer][head]
  std::vector<double> mlp;              // [layer]
  std::vector<double> attention;        // [layer] whole attention sublayer
  std::vector<double> cumulative;       // [layer] residual stream after the layer
  double total = 0.0;                   // frozen-norm projection of the final residual

  double component_sum() const {
    double acc = embedding;
    for (const auto& layer : heads)
      for (double h : layer) acc += h;
    for (double m : mlp) acc += m;
    return acc;
  }

  /// |sum of components - total| / |total|, or the absolute gap when the
  /// total is exactly zero.
  double completeness_error() const {
    const double gap = std::abs(component_sum() - total);
    return total == 0.0 ? gap : gap / std::abs(total);
  }
};

struct AttributionReport {
  std::uint64_t stimulus_seed = 0;
  Aggregation aggregation = Aggregation::Mean;
  std::vector<int> positions;
  std::vector<ComponentScores> per_position;
  ComponentScores mean;  // average over positions

  int layers() const { return static_cast<int>(mean.mlp.size()); }
  int heads() const { return mean.heads.empty() ? 0 : static_cast<int>(mean.heads[0].size()); }

  double max_completeness_error() const {
    double worst = mean.completeness_error();
    for (const auto& s : per_position) worst = std::max(worst, s.completeness_error());
    return worst;
  }

  /// Head with the largest |score| in the position-averaged scores.
  std::pair<int, int> top_head() const {
    std::pair<int, int> best{0, 0};
    double best_abs = -1.0;
    for (int l = 0; l < layers(); ++l)
      for (int h = 0; h < heads(); ++h)
        if (std::abs(mean.heads[l][h]) > best_abs) {
          best_abs = std::abs(mean.heads[l][h]);
          best = {l, h};
        }
    return best;
  }
};

/// Scores every traced component at each listed position and averages them.
template <typename T>
AttributionReport attribute_all(const ResidualTrace<T>& trace, const Parameters<T>& params, const TargetSets& targets,
                                std::span<const int> positions, Aggregation agg = Aggregation::Mean) {
  if (targets.figure.empty() || targets.ground.empty()) fail(ErrorCode::EmptyTargetSet, "figure and ground token sets must be non-empty");
  if (positions.empty()) fail(ErrorCode::EmptyConflict, "no positions to attribute");
  const int L = trace.layers(), H = trace.heads();
  const auto d = static_cast<std::size_t>(params.config.d_model);

  AttributionReport report;
  report.aggregation = agg;
  report.positions.assign(positions.begin(), positions.end());
  auto row = [&](const Matrix<T>& m, int pos) { return std::span<const T>(m.data() + static_cast<std::size_t>(pos) * d, d); };

  for (int pos : positions) {
    if (pos < 0 || pos >= trace.embedding.rows()) fail(ErrorCode::IndexOutOfRange, "attribution position outside the grid");
    const FrozenNorm norm = frozen_norm(trace, pos);
    auto score = [&](std::span<const T> v, bool bias) { return attribute_component(v, norm, params, targets, agg, bias); };

    ComponentScores s;
    s.embedding = score(row(trace.embedding, pos), true);
    s.heads.assign(L, std::vector<double>(H, 0.0));
    s.mlp.assign(L, 0.0);
    s.attention.assign(L, 0.0);
    s.cumulative.assign(L, 0.0);
    RowVector<T> running = trace.embedding.row(pos);
    for (int l = 0; l < L; ++l) {
      for (int h = 0; h < H; ++h) {
        s.heads[l][h] = score(row(trace.head_outputs[l][h], pos), false);
        running += trace.head_outputs[l][h].row(pos);
      }
      s.attention[l] = score(row(trace.attention_outputs[l], pos), false);
      s.mlp[l] = score(row(trace.mlp_outputs[l], pos), false);
      running += trace.mlp_outputs[l].row(pos);
      s.cumulative[l] = score(std::span<const T>(running.data(), d), true);
    }
    s.total = score(row(trace.final_residual, pos), true);
    report.per_position.push_back(std::move(s));
  }

  ComponentScores& m = report.mean;
  m.heads.assign(L, std::vector<double>(H, 0.0));
  m.mlp.assign(L, 0.0);
  m.attention.assign(L, 0.0);
  m.cumulative.assign(L, 0.0);
  const double inv = 1.0 / static_cast<double>(positions.size());
  for (const auto& s : report.per_position) {
    m.embedding += s.embedding * inv;
    m.total += s.total * inv;
    for (int l = 0; l < L; ++l) {
      for (int h = 0; h < H; ++h) m.heads[l][h] += s.heads[l][h] * inv;
      m.mlp[l] += s.mlp[l] * inv;
      m.attention[l] += s.attention[l] * inv;
      m.cumulative[l] += s.cumulative[l] * inv;
    }
  }
  return report;
}

}  // namespace figground
