// Acceptance suite: one PASS/FAIL line per criterion. Exit status is non-zero
// when any selected criterion fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "figground/attribution.hpp"
#include "figground/harness.hpp"
#include "figground/intervention.hpp"
#include "figground/train.hpp"
#include "run_fixture.hpp"
#include "support.hpp"

#include <CLI11.hpp>

using namespace figground;
namespace ft = figground::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::set<std::pair<double, double>> point_set(std::span<const Point> pts) {
  std::set<std::pair<double, double>> s;
  for (const auto& p : pts) s.insert({p.x, p.y});
  return s;
}

// 1. hull and conflict region against brute-force and pixel oracles
Outcome geometry_oracles() {
  const auto t0 = Clock::now();
  int hull_mismatch = 0, region_mismatch = 0, empty = 0;
  Rng rng = make_rng(substream_seed(1, "acceptance-extra-points"));
  std::uniform_real_distribution<double> u(0.0, 64.0);
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const DartShape s = generate_dart(substream_seed(1, "acceptance-darts", i));
    // the dart plus a handful of random points exercises general position too
    Polygon pts(s.polygon().begin(), s.polygon().end());
    for (int k = 0; k < 6; ++k) pts.push_back({u(rng), u(rng)});
    if (point_set(convex_hull(s.polygon())) != ft::brute_hull(s.polygon())) ++hull_mismatch;
    if (point_set(convex_hull(pts)) != ft::brute_hull(pts)) ++hull_mismatch;

    Polygon tri;
    for (int v = 0; v < 4; ++v)
      if (v != s.reflex_index) tri.push_back(s.vertices[v]);
    const BinaryImage hull_px = ft::raster_oracle(tri, 64, 64);
    const BinaryImage shape_px = ft::raster_oracle(s.polygon(), 64, 64);
    std::vector<int> expected;
    for (int p = 0; p < 64; ++p) {
      int hits = 0;
      for (int y = (p / 8) * 8; y < (p / 8) * 8 + 8; ++y)
        for (int x = (p % 8) * 8; x < (p % 8) * 8 + 8; ++x) hits += hull_px.at(x, y) && !shape_px.at(x, y);
      if (hits >= 32) expected.push_back(p);
    }
    try {
      if (conflict_region(s, 64, 64, 8, 0.5).mask_patches != expected) ++region_mismatch;
    } catch (const Error& e) {
      ++empty;
      if (e.code() != ErrorCode::EmptyConflict || !expected.empty()) ++region_mismatch;
    }
  }
  const double secs = seconds_since(t0);
  return {hull_mismatch == 0 && region_mismatch == 0 && secs < 30.0,
          "1000 darts, hull mismatches " + std::to_string(hull_mismatch) + ", region mismatches " + std::to_string(region_mismatch) +
              " (" + std::to_string(empty) + " empty), " + sci(secs) + " s"};
}

// 2. sum of trace components equals the final residual; in f64 the attention
// blocks are also recomputed as one monolithic output projection
template <typename T>
double additivity_gap(const ModelConfig& cfg, std::uint64_t seed) {
  const auto p = Parameters<T>::random(cfg, seed);
  const auto r = forward(p, ft::random_grid(8, cfg.vocab, seed + 1000));
  const auto& tr = r.trace;
  const double gap = ft::max_abs_diff<T>(sum_components(tr), tr.final_residual);
  if constexpr (std::is_same_v<T, float>) return gap;
  Matrix<T> rebuilt = tr.embedding;
  for (int l = 0; l < cfg.layers; ++l) {
    Matrix<T> concat(tr.embedding.rows(), cfg.d_model);
    for (int h = 0; h < cfg.heads; ++h) concat.middleCols(h * cfg.head_dim(), cfg.head_dim()) = tr.head_activations[l][h];
    rebuilt += concat * p.layers[l].wo;
    rebuilt += tr.mlp_outputs[l];
  }
  return std::max(gap, ft::max_abs_diff<T>(rebuilt, tr.final_residual));
}

Outcome residual_additivity() {
  double worst64 = 0.0, worst32 = 0.0;
  for (int i = 0; i < 100; ++i) {
    worst64 = std::max(worst64, additivity_gap<double>(ft::tiny_config(4, 4, 64, 128, 64, Precision::F64), 1000 + i));
    worst32 = std::max(worst32, additivity_gap<float>(ft::tiny_config(4, 4, 64, 128, 64, Precision::F32), 1000 + i));
  }
  return {worst64 <= 1e-10 && worst32 <= 1e-5, "100 pairs, f64 max " + sci(worst64) + ", f32 max " + sci(worst32)};
}

// 3. attribution completeness and head-sum identity
Outcome attribution_completeness() {
  const Codebook cb = ft::small_codebook(200, 64, 8, 64, 256, 3);
  GeometryConfig g;
  double worst_rel = 0.0, worst_heads = 0.0;
  int samples = 0;
  for (Precision prec : {Precision::F64, Precision::F32}) {
    auto mc = ft::tiny_config(4, 4, 64, cb.size(), 64, prec);
    mc.mlp_hidden = 256;
    with_precision(prec, [&]<typename T>() {
      const auto params = Parameters<T>::random(mc, 77, 0.3);
      const auto wide = params.template cast<double>();
      for (int i = 0; i < 100; ++i) {
        const Stimulus s = sample_stimulus(9, "acceptance", i, g);
        for (Aggregation agg : {Aggregation::Mean, Aggregation::Sum}) {
          const auto fwd = forward(params, conflict_grid(s, cb));
          const auto rep = attribute_all(fwd.trace, params, target_sets_of(cb), s.region.mask_patches, agg);
          worst_rel = std::max(worst_rel, rep.max_completeness_error());
          ++samples;
          if constexpr (std::is_same_v<T, float>) {
            // the path the CLI and service take for single-precision checkpoints
            const auto served = attribute_stimulus(wide, cb, s, agg);
            worst_rel = std::max(worst_rel, served.max_completeness_error());
            ++samples;
          }
          if constexpr (std::is_same_v<T, double>) {
            // per-head slices against the monolithic projection of the concatenated heads
            for (std::size_t l = 0; l < fwd.trace.head_outputs.size(); ++l) {
              Matrix<double> sum = Matrix<double>::Zero(64, 64), concat(64, 64);
              for (int h = 0; h < 4; ++h) {
                sum += fwd.trace.head_outputs[l][h];
                concat.middleCols(h * 16, 16) = fwd.trace.head_activations[l][h];
              }
              worst_heads = std::max(worst_heads, ft::max_abs_diff<double>(sum, concat * params.layers[l].wo));
            }
          }
        }
      }
    });
  }
  return {worst_rel <= 1e-4 && worst_heads <= 1e-10,
          std::to_string(samples) + " attributions, max relative completeness error " + sci(worst_rel) + ", head-sum max " + sci(worst_heads)};
}

// 4. analytic gradient against central differences
Outcome gradient_check() {
  const auto t0 = Clock::now();
  const auto cfg = ft::tiny_config(2, 2, 8, 16, 16);
  const auto p = Parameters<double>::random(cfg, 5, 0.4);
  const auto r = grad_check(p, ft::random_grid(4, 16, 6, 0.5), 1e-6);
  const double secs = seconds_since(t0);
  return {r.max_relative_error < 1e-4 && secs < 60.0,
          "max relative error " + sci(r.max_relative_error) + " (" + r.worst_group + "), " + sci(secs) + " s"};
}

// 5. head scaling identities
Outcome intervention_identities() {
  const auto cfg = ft::tiny_config(4, 4, 64, 128, 64);
  const auto p = Parameters<double>::random(cfg, 8);
  const auto grid = ft::random_grid(8, 128, 9);
  const auto base = forward(p, grid);
  Rng rng = make_rng(10);
  std::uniform_int_distribution<int> layer(0, 3), head(0, 3);
  std::uniform_real_distribution<double> alpha(-2.0, 2.0);
  int unit_fail = 0, linear_fail = 0;
  double ablation_gap = 0.0;
  for (int i = 0; i < 20; ++i) {
    const int l = layer(rng), h = head(rng);
    const double a = alpha(rng);
    if (!logits_bitwise_equal(scaled_forward(p, grid, InterventionConfig{{{l, h, 1.0}}}).logits, base.logits)) ++unit_fail;
    auto ablated = p;
    ablated.layers[l].wv.middleCols(h * 16, 16).setZero();
    ablated.layers[l].bv.segment(h * 16, 16).setZero();
    ablation_gap =
        std::max(ablation_gap, ft::max_abs_diff(scaled_forward(p, grid, InterventionConfig{{{l, h, 0.0}}}).logits, forward(ablated, grid).logits));
    const auto run = scaled_forward(p, grid, InterventionConfig{{{l, h, a}}});
    const Matrix<double> expected = base.trace.head_outputs[l][h] * a;
    if (run.trace.head_outputs[l][h] != expected) ++linear_fail;
  }
  return {unit_fail == 0 && linear_fail == 0 && ablation_gap <= 1e-12,
          "20 pairs, unit-scale mismatches " + std::to_string(unit_fail) + ", ablation gap " + sci(ablation_gap) + ", non-linear " +
              std::to_string(linear_fail)};
}

// 6. Jensen-Shannon similarity properties
Outcome js_metric() {
  Rng rng = make_rng(11);
  std::uniform_int_distribution<int> size(2, 64);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto draw = [&](int n) {
    std::vector<double> v(n);
    double s = 0.0;
    for (auto& x : v) s += (x = u(rng) < 0.25 ? 0.0 : u(rng));
    if (s == 0.0) v[0] = s = 1.0;
    for (auto& x : v) x /= s;
    return v;
  };
  double asym = 0.0, self = 0.0;
  int out_of_bounds = 0;
  for (int i = 0; i < 1000; ++i) {
    const int n = size(rng);
    const auto p = draw(n), q = draw(n);
    const double s = js_similarity(p, q);
    out_of_bounds += !(s >= 0.0 && s <= 1.0);
    asym = std::max(asym, std::abs(s - js_similarity(q, p)));
    self = std::max(self, std::abs(1.0 - js_similarity(p, p)));
  }
  const std::vector<double> a{0.5, 0.5}, b{1.0, 0.0};
  const double direct = 1.0 - 0.5 * (0.5 * std::log2(0.5 / 0.75) + 0.5 * std::log2(0.5 / 0.25) + std::log2(1.0 / 0.75));
  const double hand = std::abs(js_similarity(a, b) - direct);
  return {asym <= 1e-12 && self <= 1e-12 && out_of_bounds == 0 && hand <= 1e-12,
          "1000 pairs, asymmetry " + sci(asym) + ", identity gap " + sci(self) + ", out of bounds " + std::to_string(out_of_bounds) +
              ", hand case gap " + sci(hand)};
}

// 7. default-size run end to end
Outcome desk_scale_run(const fs::path& workdir) {
  ExperimentConfig cfg;
  cfg.output_dir = workdir.string();
  cfg.train.log_every = 500;
  fs::remove_all(workdir);
  const auto t0 = Clock::now();
  cmd_gen(cfg);
  cmd_build_codebook(cfg);
  const TrainResult tr = cmd_train(cfg, &std::cerr);
  const double train_secs = seconds_since(t0);
  const AttributeResult ar = cmd_attribute(cfg);
  const SweepResult sr = cmd_sweep(cfg);
  cmd_report(cfg);
  const double total_secs = seconds_since(t0);

  bool complete = sr.alphas.size() == 41 && !sr.trajectories.empty();
  for (const auto& t : sr.trajectories) complete = complete && t.entries.size() == 41 && t.flips == find_flips(t.entries);
  const json traj = read_json(RunPaths{workdir}.trajectory());
  for (const auto& s : traj.at("stimuli")) complete = complete && s.contains("flips");
  std::size_t flips = 0;
  for (const auto& t : sr.trajectories) flips += t.flips.size();

  const bool pass = tr.heldout_top1 >= 0.9 && train_secs <= 1800.0 && ar.top.stability >= 0.8 && ar.reports.size() == 200 && complete;
  return {pass, "held-out top-1 " + sci(tr.heldout_top1) + " (>= 0.9), train " + sci(train_secs) + " s, total " + sci(total_secs) +
                    " s (<= 1800), top head L" + std::to_string(ar.top.layer) + "H" + std::to_string(ar.top.head) + " stability " +
                    sci(ar.top.stability) + " over " + std::to_string(ar.reports.size()) + " (>= 0.8), sweep L" + std::to_string(sr.layer) +
                    "H" + std::to_string(sr.head) + " " + std::to_string(sr.alphas.size()) + " alphas, " + std::to_string(flips) +
                    " flip points, trajectory " + (complete ? "complete" : "incomplete")};
}

// 8. byte-identical reruns
Outcome reproducibility(const fs::path& workdir) {
  const fs::path a = workdir / "a", b = workdir / "b";
  fs::remove_all(workdir);
  ft::run_pipeline(ft::small_run_config(a));
  ft::run_pipeline(ft::small_run_config(b));
  int files = 0, differ = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    const fs::path other = b / fs::relative(e.path(), a);
    if (!fs::exists(other) || ft::slurp(e.path()) != ft::slurp(other)) ++differ;
  }
  return {differ == 0 && files > 0, std::to_string(files) + " artifacts compared, " + std::to_string(differ) + " differ"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"figground acceptance suite"};
  std::vector<int> only;
  std::vector<int> skip;
  std::string workdir = (fs::temp_directory_path() / "figground-acceptance").string();
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  app.add_option("--skip", skip, "criteria to skip")->delimiter(',');
  app.add_option("--workdir", workdir, "scratch directory for pipeline runs");
  CLI11_PARSE(app, argc, argv);

  const std::map<int, std::pair<std::string, std::function<Outcome()>>> criteria{
      {1, {"geometry oracles", geometry_oracles}},
      {2, {"residual additivity", residual_additivity}},
      {3, {"attribution completeness", attribution_completeness}},
      {4, {"gradient correctness", gradient_check}},
      {5, {"intervention identities", intervention_identities}},
      {6, {"JS metric", js_metric}},
      {7, {"desk-scale behavioral run", [&] { return desk_scale_run(fs::path(workdir) / "desk"); }}},
      {8, {"reproducibility", [&] { return reproducibility(fs::path(workdir) / "rerun"); }}},
  };

  int failed = 0;
  for (const auto& [id, entry] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    if (std::find(skip.begin(), skip.end(), id) != skip.end()) continue;
    Outcome o;
    try {
      o = entry.second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << "C" << id << " " << (o.pass ? "PASS" : "FAIL") << " " << entry.first << ": " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
