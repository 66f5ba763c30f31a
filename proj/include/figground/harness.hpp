#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "figground/attribution.hpp"
#include "figground/checkpoint.hpp"
#include "figground/config.hpp"
#include "figground/geometry.hpp"
#include "figground/intervention.hpp"
#include "figground/model.hpp"
#include "figground/tokenizer.hpp"
#include "figground/train.hpp"

namespace figground {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Formatting
// ---------------------------------------------------------------------------

/// Decimal text with 9 significant digits.
inline std::string fmt9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

/// A JSON number carrying at most 9 significant digits.
inline json num(double v) { return std::strtod(fmt9(v).c_str(), nullptr); }

inline json provenance(const ExperimentConfig& cfg) {
  return {{"config_hash", config_hash(cfg)}, {"code_version", std::string(kCodeVersion)}, {"seed", cfg.seed}};
}

inline std::string csv_preamble(const ExperimentConfig& cfg) {
  return "# config_hash=" + config_hash(cfg) + " code_version=" + std::string(kCodeVersion) + " seed=" + std::to_string(cfg.seed) + "\n";
}

/// Canonical JSON text: sorted keys, no whitespace, trailing newline.
inline std::string canonical(const json& j) { return j.dump() + "\n"; }

inline void write_text(const fs::path& path, std::string_view text) {
  fs::create_directories(path.parent_path());
  detail::write_file(path.string(), text);
}

inline json read_json(const fs::path& path) {
  const std::string text = detail::read_file(path.string());
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) fail(ErrorCode::IoError, "malformed JSON in " + path.string());
  return j;
}

template <typename F>
decltype(auto) with_precision(Precision p, F&& f) {
  if (p == Precision::F32) return f.template operator()<float>();
  return f.template operator()<double>();
}

// ---------------------------------------------------------------------------
// Layout of an experiment directory
// ---------------------------------------------------------------------------

struct RunPaths {
  fs::path root;

  fs::path split_dir(const std::string& split) const { return root / "corpus" / split; }
  fs::path metadata(const std::string& split) const { return split_dir(split) / "metadata.jsonl"; }
  fs::path corpus_manifest() const { return root / "corpus" / "manifest.json"; }
  fs::path codebook() const { return root / "codebook.bin"; }
  fs::path codebook_manifest() const { return root / "codebook.json"; }
  fs::path checkpoint() const { return root / "checkpoint.bin"; }
  fs::path loss_csv() const { return root / "loss.csv"; }
  fs::path train_metrics() const { return root / "train_metrics.json"; }
  fs::path scores_csv() const { return root / "attribution" / "scores.csv"; }
  fs::path reports_jsonl() const { return root / "attribution" / "reports.jsonl"; }
  fs::path attribution_summary() const { return root / "attribution" / "summary.json"; }
  fs::path sweep_csv() const { return root / "sweep" / "sweep.csv"; }
  fs::path sweep_aggregate_csv() const { return root / "sweep" / "aggregate.csv"; }
  fs::path trajectory() const { return root / "sweep" / "trajectory.json"; }
  fs::path report() const { return root / "report.json"; }
};

// ---------------------------------------------------------------------------
// Stimuli
// ---------------------------------------------------------------------------

struct Stimulus {
  int id = 0;
  std::uint64_t seed = 0;
  DartShape shape;
  ConflictRegion region;
  BinaryImage image;
};

/// The stimulus generated from one dart seed. Throws EmptyConflict when the
/// notch covers no patch at the mask threshold.
inline Stimulus make_stimulus(std::uint64_t seed, const GeometryConfig& g) {
  Stimulus s;
  s.seed = seed;
  s.shape = generate_dart(seed, g.dart_params());
  s.image = rasterize(s.shape.polygon(), g.image_size, g.image_size);
  s.region = conflict_region(s.shape, g.image_size, g.image_size, g.patch_size, g.theta_mask);
  return s;
}

/// Sample `id` of a split: the first seed in the sample's stream whose dart
/// yields a non-empty conflict mask.
inline Stimulus sample_stimulus(std::uint64_t master, const std::string& split, int id, const GeometryConfig& g) {
  std::uint64_t seed = substream_seed(master, "geometry/" + split, static_cast<std::uint64_t>(id));
  for (int attempt = 0; attempt < g.max_retries; ++attempt) {
    try {
      Stimulus s = make_stimulus(seed, g);
      s.id = id;
      return s;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::EmptyConflict) throw;
    }
    seed = splitmix64(seed);
  }
  fail(ErrorCode::RetryExhausted, "no dart with a non-empty conflict mask for sample " + std::to_string(id));
}

inline json points_json(std::span<const Point> pts) {
  json arr = json::array();
  for (const Point& p : pts) arr.push_back({p.x, p.y});
  return arr;
}

inline json stimulus_metadata(const Stimulus& s, const std::string& file) {
  json coverage = json::array();
  for (const auto& [idx, frac] : s.region.coverage) coverage.push_back({idx, num(frac)});
  return {{"id", s.id},
          {"seed", s.seed},
          {"file", file},
          {"vertices", points_json(s.shape.polygon())},
          {"reflex_index", s.shape.reflex_index},
          {"hull", points_json(s.region.hull)},
          {"mask_patches", s.region.mask_patches},
          {"coverage", coverage}};
}

inline std::string sample_file_name(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06d.pgm", id);
  return buf;
}

/// Loads `count` samples starting at `begin` (count < 0: to the end). The
/// conflict region is recomputed from the stored vertices and must agree with
/// the stored mask.
inline std::vector<Stimulus> load_stimuli(const RunPaths& paths, const std::string& split, const GeometryConfig& g, int begin = 0,
                                          int count = -1) {
  std::ifstream in(paths.metadata(split));
  if (!in) fail(ErrorCode::IoError, "missing corpus split '" + split + "' under " + paths.root.string());
  std::vector<Stimulus> out;
  std::string line;
  int index = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const int current = index++;
    if (current < begin) continue;
    if (count >= 0 && static_cast<int>(out.size()) >= count) break;
    const json meta = json::parse(line);
    Stimulus s;
    s.id = meta.at("id").get<int>();
    s.seed = meta.at("seed").get<std::uint64_t>();
    const auto& verts = meta.at("vertices");
    for (std::size_t i = 0; i < 4; ++i) s.shape.vertices[i] = {verts[i][0].get<double>(), verts[i][1].get<double>()};
    s.shape.reflex_index = meta.at("reflex_index").get<int>();
    s.shape.seed = s.seed;
    s.image = decode_pgm(detail::read_file((paths.split_dir(split) / meta.at("file").get<std::string>()).string()));
    s.region = conflict_region(s.shape, g.image_size, g.image_size, g.patch_size, g.theta_mask);
    if (s.region.mask_patches != meta.at("mask_patches").get<std::vector<int>>())
      fail(ErrorCode::InvariantViolation, "stored mask differs from the recomputed conflict region for sample " + std::to_string(s.id));
    out.push_back(std::move(s));
  }
  return out;
}

/// Token grid of a stimulus with its conflict patches masked.
inline TokenGrid conflict_grid(const Stimulus& s, const Codebook& cb) {
  TokenGrid grid = tokenize(s.image, cb);
  for (int p : s.region.mask_patches) grid.mask[p] = 1;
  return grid;
}

inline TargetSets target_sets_of(const Codebook& cb) {
  if (cb.figure_tokens.empty() || cb.ground_tokens.empty()) fail(ErrorCode::EmptySet, "codebook has an empty figure or ground set");
  return {cb.figure_tokens, cb.ground_tokens};
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

struct GenResult {
  int train = 0;
  int heldout = 0;
};

inline GenResult cmd_gen(const ExperimentConfig& cfg) {
  const RunPaths paths{cfg.output_dir};
  const auto& g = cfg.geometry;
  if (g.count < 0 || g.heldout_count < 0) fail(ErrorCode::InvalidArgument, "sample counts must be non-negative");
  const std::string comment = "figground config_hash=" + config_hash(cfg) + " code_version=" + std::string(kCodeVersion) +
                              " seed=" + std::to_string(cfg.seed);
  GenResult result;
  for (const auto& [split, n] : {std::pair<std::string, int>{"train", g.count}, {"heldout", g.heldout_count}}) {
    fs::create_directories(paths.split_dir(split));
    std::string meta;
    for (int id = 0; id < n; ++id) {
      const Stimulus s = sample_stimulus(cfg.seed, split, id, g);
      const std::string file = sample_file_name(id);
      write_text(paths.split_dir(split) / file, encode_pgm(s.image, comment));
      meta += stimulus_metadata(s, file).dump() + "\n";
    }
    write_text(paths.metadata(split), meta);
    (split == "train" ? result.train : result.heldout) = n;
  }
  json manifest = {{"provenance", provenance(cfg)},
                   {"image_size", g.image_size},
                   {"patch_size", g.patch_size},
                   {"theta_mask", num(g.theta_mask)},
                   {"splits", {{"train", result.train}, {"heldout", result.heldout}}}};
  write_text(paths.corpus_manifest(), canonical(manifest));
  return result;
}

// ---------------------------------------------------------------------------
// build-codebook
// ---------------------------------------------------------------------------

inline json codebook_manifest(const Codebook& cb, const ExperimentConfig& cfg) {
  json tokens = json::array();
  for (int t = 0; t < cb.size(); ++t) {
    const bool fig = std::binary_search(cb.figure_tokens.begin(), cb.figure_tokens.end(), t);
    const bool gnd = std::binary_search(cb.ground_tokens.begin(), cb.ground_tokens.end(), t);
    tokens.push_back({{"token", t}, {"fill", num(cb.fill_fraction(t))}, {"set", fig ? "figure" : gnd ? "ground" : "none"},
                      {"frequency", cb.frequency[t]}});
  }
  return {{"provenance", provenance(cfg)},
          {"size", cb.size()},
          {"patch_size", cb.patch_size},
          {"embedding_dim", cb.embedding_dim()},
          {"theta_figure", num(cb.theta_figure)},
          {"theta_ground", num(cb.theta_ground)},
          {"figure_count", cb.figure_tokens.size()},
          {"ground_count", cb.ground_tokens.size()},
          {"tokens", tokens}};
}

inline Codebook cmd_build_codebook(const ExperimentConfig& cfg) {
  const RunPaths paths{cfg.output_dir};
  const auto stimuli = load_stimuli(paths, "train", cfg.geometry);
  if (stimuli.empty()) fail(ErrorCode::EmptyCorpus, "training corpus is empty");
  std::vector<BinaryImage> images;
  images.reserve(stimuli.size());
  for (const auto& s : stimuli) images.push_back(s.image);
  CodebookOptions opt;
  opt.v_max = cfg.tokenizer.v_max;
  opt.patch_size = cfg.geometry.patch_size;
  opt.embedding_dim = cfg.model.d_model;
  opt.theta_figure = cfg.tokenizer.theta_figure;
  opt.theta_ground = cfg.tokenizer.theta_ground;
  opt.seed = substream_seed(cfg.seed, "codebook");
  Codebook cb = build_codebook(images, opt);
  target_sets(cb, opt.theta_figure, opt.theta_ground);  // EmptySet for degenerate corpora
  save_codebook(cb, paths.codebook().string());
  write_text(paths.codebook_manifest(), canonical(codebook_manifest(cb, cfg)));
  return cb;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainResult {
  std::uint64_t steps = 0;
  double final_loss = 0.0;
  double heldout_top1 = -1.0;
};

/// Held-out grids with random masks drawn from the evaluation stream.
inline std::vector<TokenGrid> evaluation_grids(const std::vector<Stimulus>& stimuli, const Codebook& cb, const ExperimentConfig& cfg) {
  std::vector<TokenGrid> grids;
  for (const auto& s : stimuli) {
    TokenGrid g = tokenize(s.image, cb);
    Rng rng = make_rng(substream_seed(cfg.seed, "eval", static_cast<std::uint64_t>(s.id)));
    random_mask(g, cfg.train.mask_fraction, rng);
    grids.push_back(std::move(g));
  }
  return grids;
}

inline std::vector<LossPoint> read_loss_csv(const fs::path& path) {
  std::vector<LossPoint> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("step", 0) == 0) continue;
    const auto comma = line.find(',');
    out.push_back({std::stoull(line.substr(0, comma)), std::stod(line.substr(comma + 1))});
  }
  return out;
}

inline TrainResult cmd_train(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  const RunPaths paths{cfg.output_dir};
  const Codebook cb = load_codebook(paths.codebook().string());
  const ModelConfig mc = cfg.model_config(cb.size());
  const TrainOptions opt = cfg.train_options();

  const auto stimuli = load_stimuli(paths, "train", cfg.geometry);
  if (stimuli.empty()) fail(ErrorCode::EmptyCorpus, "training corpus is empty");
  std::vector<TokenGrid> grids;
  grids.reserve(stimuli.size());
  for (const auto& s : stimuli) grids.push_back(tokenize(s.image, cb));

  return with_precision(mc.precision, [&]<typename T>() {
    Parameters<T> params;
    AdamState<T> state;
    std::vector<LossPoint> history;
    if (cfg.train.resume && fs::exists(paths.checkpoint())) {
      auto ck = load_checkpoint_with_state<T>(paths.checkpoint().string());
      if (!(ck.params.config == mc)) fail(ErrorCode::VersionMismatch, "checkpoint configuration differs from the experiment");
      params = std::move(ck.params);
      state = ck.optimizer ? std::move(*ck.optimizer) : AdamState<T>::zeros(mc);
      for (const auto& p : read_loss_csv(paths.loss_csv()))
        if (p.step < state.step) history.push_back(p);
    } else {
      params = Parameters<T>::initialize(mc, cb);
      state = AdamState<T>::zeros(mc);
    }

    auto on_step = [&](const LossPoint& p) {
      if (log && cfg.train.log_every > 0 && (p.step % cfg.train.log_every == 0 || p.step + 1 == opt.steps))
        *log << "step " << p.step << " loss " << fmt9(p.loss) << std::endl;
    };
    const auto curve = train(params, state, grids, opt, on_step);
    history.insert(history.end(), curve.begin(), curve.end());

    save_checkpoint(params, paths.checkpoint().string(), &state);
    std::string csv = csv_preamble(cfg) + "step,loss\n";
    for (const auto& p : history) csv += std::to_string(p.step) + "," + fmt9(p.loss) + "\n";
    write_text(paths.loss_csv(), csv);

    TrainResult r;
    r.steps = state.step;
    if (!history.empty()) {
      const std::size_t tail = std::min<std::size_t>(50, history.size());
      for (std::size_t i = history.size() - tail; i < history.size(); ++i) r.final_loss += history[i].loss / static_cast<double>(tail);
    }
    json metrics = {{"provenance", provenance(cfg)},
                    {"steps", r.steps},
                    {"parameter_count", params.parameter_count()},
                    {"vocab", cb.size()},
                    {"final_loss", num(r.final_loss)},
                    {"model", "toy pre-LN masked-token transformer (desk-scale stand-in)"}};
    if (fs::exists(paths.metadata("heldout"))) {
      const auto held = load_stimuli(paths, "heldout", cfg.geometry);
      if (!held.empty()) {
        r.heldout_top1 = masked_top1(params, evaluation_grids(held, cb, cfg));
        metrics["heldout_top1"] = num(r.heldout_top1);
        metrics["heldout_samples"] = held.size();
      }
    }
    write_text(paths.train_metrics(), canonical(metrics));
    return r;
  });
}

// ---------------------------------------------------------------------------
// attribute
// ---------------------------------------------------------------------------

inline json scores_json(const ComponentScores& s) {
  json heads = json::array();
  for (const auto& layer : s.heads) {
    json row = json::array();
    for (double v : layer) row.push_back(num(v));
    heads.push_back(row);
  }
  auto vec = [](const std::vector<double>& v) {
    json a = json::array();
    for (double x : v) a.push_back(num(x));
    return a;
  };
  return {{"embed", num(s.embedding)}, {"heads", heads},       {"mlp", vec(s.mlp)},     {"attention", vec(s.attention)},
          {"cumulative", vec(s.cumulative)}, {"total", num(s.total)}, {"component_sum", num(s.component_sum())}};
}

/// Wire form of an attribution report, shared by the CLI and the service.
inline json report_json(const AttributionReport& r) {
  json per = json::array();
  for (std::size_t i = 0; i < r.per_position.size(); ++i) {
    json s = scores_json(r.per_position[i]);
    s["position"] = r.positions[i];
    per.push_back(s);
  }
  return {{"schema_version", kSchemaVersion},
          {"stimulus_seed", r.stimulus_seed},
          {"aggregation", std::string(to_string(r.aggregation))},
          {"ln_mode", "frozen"},
          {"positions", r.positions},
          {"scores", scores_json(r.mean)},
          {"per_position", per},
          {"completeness_error", num(r.max_completeness_error())}};
}

/// Attribution of one stimulus, with the completeness invariant enforced for
/// the linear reductions. Weights are evaluated in double precision whatever
/// their stored type, so the check measures the decomposition rather than
/// single-precision accumulation in the residual stream.
inline AttributionReport attribute_stimulus(const Parameters<double>& params, const Codebook& cb, const Stimulus& s, Aggregation agg) {
  const TokenGrid grid = conflict_grid(s, cb);
  const ForwardResult<double> fwd = forward(params, grid);
  AttributionReport report = attribute_all(fwd.trace, params, target_sets_of(cb), s.region.mask_patches, agg);
  report.stimulus_seed = s.seed;
  if (agg != Aggregation::LogSumExp && report.max_completeness_error() > 1e-4)
    fail(ErrorCode::InvariantViolation, "attribution completeness error " + fmt9(report.max_completeness_error()) + " exceeds 1e-4");
  return report;
}

/// Linear-interpolated quantile of unsorted values.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (v[hi] - v[lo]) * (pos - static_cast<double>(lo));
}

inline json distribution_json(const std::vector<double>& v) {
  const double q1 = quantile(v, 0.25), q3 = quantile(v, 0.75);
  return {{"median", num(quantile(v, 0.5))}, {"q25", num(q1)}, {"q75", num(q3)}, {"iqr", num(q3 - q1)}};
}

struct TopHead {
  int layer = 0;
  int head = 0;
  double stability = 0.0;  // fraction of samples whose own top-|score| head is this one
};

/// Modal per-sample top-|score| head; ties go to the larger |median|.
inline TopHead stable_top_head(const std::vector<AttributionReport>& reports) {
  if (reports.empty()) fail(ErrorCode::EmptyCorpus, "no reports");
  const int L = reports[0].layers(), H = reports[0].heads();
  std::vector<int> counts(static_cast<std::size_t>(L) * H, 0);
  for (const auto& r : reports) {
    const auto [l, h] = r.top_head();
    ++counts[static_cast<std::size_t>(l) * H + h];
  }
  auto median_abs = [&](int l, int h) {
    std::vector<double> v;
    for (const auto& r : reports) v.push_back(r.mean.heads[l][h]);
    return std::abs(quantile(v, 0.5));
  };
  TopHead best;
  int best_count = -1;
  double best_med = -1.0;
  for (int l = 0; l < L; ++l)
    for (int h = 0; h < H; ++h) {
      const int c = counts[static_cast<std::size_t>(l) * H + h];
      if (c < best_count) continue;
      const double m = median_abs(l, h);
      if (c > best_count || m > best_med) {
        best = {l, h, 0.0};
        best_count = c;
        best_med = m;
      }
    }
  best.stability = static_cast<double>(best_count) / static_cast<double>(reports.size());
  return best;
}

inline json attribution_summary(const std::vector<AttributionReport>& reports, const ExperimentConfig& cfg) {
  const int L = reports[0].layers(), H = reports[0].heads();
  auto collect = [&](auto&& get) {
    std::vector<double> v;
    for (const auto& r : reports) v.push_back(get(r.mean));
    return v;
  };
  json heads = json::array(), mlp = json::array(), attn = json::array(), resid = json::array(), layer_marginal = json::array();
  for (int l = 0; l < L; ++l) {
    json row = json::array();
    for (int h = 0; h < H; ++h) row.push_back(distribution_json(collect([&](const ComponentScores& s) { return s.heads[l][h]; })));
    heads.push_back(row);
    mlp.push_back(distribution_json(collect([&](const ComponentScores& s) { return s.mlp[l]; })));
    attn.push_back(distribution_json(collect([&](const ComponentScores& s) { return s.attention[l]; })));
    resid.push_back(distribution_json(collect([&](const ComponentScores& s) { return s.cumulative[l]; })));
    layer_marginal.push_back(distribution_json(collect([&](const ComponentScores& s) {
      double acc = 0.0;
      for (double v : s.heads[l]) acc += v;
      return acc;
    })));
  }
  json head_marginal = json::array();
  for (int h = 0; h < H; ++h)
    head_marginal.push_back(distribution_json(collect([&](const ComponentScores& s) {
      double acc = 0.0;
      for (int l = 0; l < L; ++l) acc += s.heads[l][h];
      return acc;
    })));
  const TopHead top = stable_top_head(reports);
  json per_sample_top = json::array();
  double worst = 0.0;
  for (const auto& r : reports) {
    const auto [l, h] = r.top_head();
    per_sample_top.push_back({l, h});
    worst = std::max(worst, r.max_completeness_error());
  }
  return {{"provenance", provenance(cfg)},
          {"aggregation", cfg.attribution.aggregation},
          {"ln_mode", "frozen"},
          {"position_reduction", "mean over conflict patches"},
          {"model", "toy pre-LN masked-token transformer (desk-scale stand-in)"},
          {"samples", reports.size()},
          {"layers", L},
          {"heads_per_layer", H},
          {"embed", distribution_json(collect([](const ComponentScores& s) { return s.embedding; }))},
          {"total", distribution_json(collect([](const ComponentScores& s) { return s.total; }))},
          {"heads", heads},
          {"mlp", mlp},
          {"attention", attn},
          {"cumulative_residual", resid},
          {"layer_marginal", layer_marginal},
          {"head_marginal", head_marginal},
          {"top_head", {{"layer", top.layer}, {"head", top.head}, {"stability", num(top.stability)}}},
          {"per_sample_top_head", per_sample_top},
          {"max_completeness_error", num(worst)}};
}

struct AttributeResult {
  std::vector<AttributionReport> reports;
  TopHead top;
};

inline std::vector<Stimulus> stimulus_slice(const ExperimentConfig& cfg, const std::string& split, int begin, int count) {
  if (count <= 0) fail(ErrorCode::EmptyCorpus, "corpus slice is empty");
  auto s = load_stimuli(RunPaths{cfg.output_dir}, split, cfg.geometry, begin, count);
  if (s.empty()) fail(ErrorCode::EmptyCorpus, "corpus slice is empty");
  return s;
}

inline AttributeResult cmd_attribute(const ExperimentConfig& cfg) {
  const RunPaths paths{cfg.output_dir};
  const auto stimuli = stimulus_slice(cfg, cfg.attribution.split, cfg.attribution.begin, cfg.attribution.count);
  const Codebook cb = load_codebook(paths.codebook().string());
  const std::string ckpt_bytes = detail::read_file(paths.checkpoint().string());
  const Aggregation agg = parse_aggregation(cfg.attribution.aggregation);

  AttributeResult result;
  with_precision(peek_checkpoint_config(ckpt_bytes).precision, [&]<typename T>() {
    const Parameters<double> params = deserialize_checkpoint<T>(ckpt_bytes).params.template cast<double>();
    for (const auto& s : stimuli) result.reports.push_back(attribute_stimulus(params, cb, s, agg));
  });

  std::string csv = csv_preamble(cfg) + "sample_id,layer,component,score\n";
  std::string jsonl = canonical({{"provenance", provenance(cfg)}});
  for (std::size_t i = 0; i < stimuli.size(); ++i) {
    const auto& m = result.reports[i].mean;
    const std::string id = std::to_string(stimuli[i].id);
    csv += id + ",-1,embed," + fmt9(m.embedding) + "\n";
    for (int l = 0; l < static_cast<int>(m.mlp.size()); ++l) {
      for (std::size_t h = 0; h < m.heads[l].size(); ++h)
        csv += id + "," + std::to_string(l) + ",head" + std::to_string(h) + "," + fmt9(m.heads[l][h]) + "\n";
      csv += id + "," + std::to_string(l) + ",mlp," + fmt9(m.mlp[l]) + "\n";
      csv += id + "," + std::to_string(l) + ",attn," + fmt9(m.attention[l]) + "\n";
      csv += id + "," + std::to_string(l) + ",resid," + fmt9(m.cumulative[l]) + "\n";
    }
    csv += id + ",-1,total," + fmt9(m.total) + "\n";
    jsonl += canonical(report_json(result.reports[i]));
  }
  write_text(paths.scores_csv(), csv);
  write_text(paths.reports_jsonl(), jsonl);
  write_text(paths.attribution_summary(), canonical(attribution_summary(result.reports, cfg)));
  result.top = stable_top_head(result.reports);
  return result;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

inline json point_json(const ManifoldPoint& p) {
  return {{"alpha", num(p.alpha)}, {"s_convex", num(p.s_convex)}, {"s_concave", num(p.s_concave)}, {"decision", std::string(to_string(p.decision))}};
}

inline json flips_json(std::span<const FlipPoint> flips) {
  json arr = json::array();
  for (const auto& f : flips)
    arr.push_back({{"alpha_from", num(f.alpha_from)}, {"alpha_to", num(f.alpha_to)}, {"from", std::string(to_string(f.from))},
                   {"to", std::string(to_string(f.to))}});
  return arr;
}

/// Single-alpha evaluation used by the service and cross-checked against the
/// sweep artifacts.
struct InterventionResult {
  ManifoldPoint point;
  std::vector<int> argmax;
  std::vector<int> flipped;
};

template <typename T>
InterventionResult intervene(const Parameters<T>& params, const Codebook& cb, const Stimulus& s, int layer, int head, double alpha,
                             PatchWeighting weighting, const ExperimentConfig& cfg) {
  const TokenGrid grid = conflict_grid(s, cb);
  const ConflictTargets targets = idealized_targets(s.shape, s.region, cb, cfg.geometry.image_size, cfg.geometry.image_size);
  const auto base = forward(params, grid);
  const auto run = scaled_forward(params, grid, InterventionConfig{{{layer, head, alpha}}});
  InterventionResult r;
  r.point = manifold_point(run.logits, targets, weighting, alpha);
  r.argmax = argmax_grid(run.logits, grid);
  const auto base_argmax = argmax_grid(base.logits, grid);
  for (int p : targets.positions)
    if (r.argmax[p] != base_argmax[p]) r.flipped.push_back(p);
  return r;
}

struct SweepResult {
  int layer = 0;
  int head = 0;
  std::vector<double> alphas;
  std::vector<SweepTrajectory> trajectories;
  std::vector<ManifoldPoint> aggregate;
  std::vector<FlipPoint> aggregate_flips;
};

inline std::pair<int, int> sweep_head(const ExperimentConfig& cfg) {
  if (cfg.intervention.layer >= 0 && cfg.intervention.head >= 0) return {cfg.intervention.layer, cfg.intervention.head};
  const RunPaths paths{cfg.output_dir};
  if (!fs::exists(paths.attribution_summary()))
    fail(ErrorCode::InvalidArgument, "no head given and no attribution summary to pick the top head from");
  const json top = read_json(paths.attribution_summary()).at("top_head");
  return {top.at("layer").get<int>(), top.at("head").get<int>()};
}

inline SweepResult cmd_sweep(const ExperimentConfig& cfg) {
  const RunPaths paths{cfg.output_dir};
  const auto& iv = cfg.intervention;
  const auto stimuli = stimulus_slice(cfg, iv.split, iv.begin, iv.count);
  const Codebook cb = load_codebook(paths.codebook().string());
  const std::string ckpt_bytes = detail::read_file(paths.checkpoint().string());
  const PatchWeighting weighting = cfg.weighting();

  SweepResult result;
  std::tie(result.layer, result.head) = sweep_head(cfg);
  result.alphas = default_alpha_grid(iv.alpha_min, iv.alpha_max, iv.alpha_step);
  with_precision(peek_checkpoint_config(ckpt_bytes).precision, [&]<typename T>() {
    const Parameters<T> params = deserialize_checkpoint<T>(ckpt_bytes).params;
    for (const auto& s : stimuli) {
      const ConflictTargets targets = idealized_targets(s.shape, s.region, cb, cfg.geometry.image_size, cfg.geometry.image_size);
      result.trajectories.push_back(alpha_sweep(params, conflict_grid(s, cb), targets, result.layer, result.head, result.alphas, weighting));
    }
  });

  std::vector<SweepEntry> agg_entries(result.alphas.size());
  for (std::size_t a = 0; a < result.alphas.size(); ++a) {
    ManifoldPoint& p = agg_entries[a].point;
    p.alpha = result.alphas[a];
    for (const auto& t : result.trajectories) {
      p.s_convex += t.entries[a].point.s_convex / static_cast<double>(result.trajectories.size());
      p.s_concave += t.entries[a].point.s_concave / static_cast<double>(result.trajectories.size());
    }
    p.decision = decide(p.s_convex, p.s_concave);
    result.aggregate.push_back(p);
  }
  result.aggregate_flips = find_flips(agg_entries);

  std::string csv = csv_preamble(cfg) + "stimulus_id,alpha,s_convex,s_concave,decision,flipped_patch_count\n";
  json stimuli_json = json::array();
  for (std::size_t i = 0; i < stimuli.size(); ++i) {
    const auto& t = result.trajectories[i];
    json entries = json::array();
    for (const auto& e : t.entries) {
      csv += std::to_string(stimuli[i].id) + "," + fmt9(e.point.alpha) + "," + fmt9(e.point.s_convex) + "," + fmt9(e.point.s_concave) + "," +
             std::string(to_string(e.point.decision)) + "," + std::to_string(e.flipped_patches) + "\n";
      json ej = point_json(e.point);
      ej["flipped_patch_count"] = e.flipped_patches;
      ej["argmax_grid"] = e.argmax;
      entries.push_back(ej);
    }
    const ConflictTargets targets = idealized_targets(stimuli[i].shape, stimuli[i].region, cb, cfg.geometry.image_size, cfg.geometry.image_size);
    stimuli_json.push_back({{"id", stimuli[i].id},
                            {"seed", stimuli[i].seed},
                            {"mask_patches", stimuli[i].region.mask_patches},
                            {"convex_targets", targets.convex_tokens},
                            {"concave_targets", targets.concave_tokens},
                            {"baseline", {{"point", point_json(t.baseline)}, {"argmax_grid", t.baseline_argmax}}},
                            {"entries", entries},
                            {"flips", flips_json(t.flips)}});
  }
  std::string agg_csv = csv_preamble(cfg) + "alpha,s_convex,s_concave,decision\n";
  json agg_json = json::array();
  for (const auto& p : result.aggregate) {
    agg_csv += fmt9(p.alpha) + "," + fmt9(p.s_convex) + "," + fmt9(p.s_concave) + "," + std::string(to_string(p.decision)) + "\n";
    agg_json.push_back(point_json(p));
  }
  json alphas = json::array();
  for (double a : result.alphas) alphas.push_back(num(a));
  const json traj = {{"provenance", provenance(cfg)},
                     {"layer", result.layer},
                     {"head", result.head},
                     {"alphas", alphas},
                     {"weighting", iv.weighting},
                     {"grid_rows", cfg.geometry.grid_side()},
                     {"grid_cols", cfg.geometry.grid_side()},
                     {"stimuli", stimuli_json},
                     {"aggregate", {{"entries", agg_json}, {"flips", flips_json(result.aggregate_flips)}}}};
  write_text(paths.sweep_csv(), csv);
  write_text(paths.sweep_aggregate_csv(), agg_csv);
  write_text(paths.trajectory(), canonical(traj));
  return result;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

inline json cmd_report(const ExperimentConfig& cfg) {
  const RunPaths paths{cfg.output_dir};
  json report = {{"provenance", provenance(cfg)},
                 {"model", "toy pre-LN masked-token transformer (desk-scale stand-in, not a pretrained vision model)"},
                 {"reference_protocol",
                  {{"seed_head_reported_elsewhere", "L0H9"}, {"reference_flip_alpha", 0.3}, {"note", "reported for comparison only; not asserted"}}}};
  json artifacts = json::object();
  for (const fs::path& p : {paths.corpus_manifest(), paths.metadata("train"), paths.metadata("heldout"), paths.codebook(), paths.checkpoint(),
                            paths.loss_csv(), paths.scores_csv(), paths.attribution_summary(), paths.sweep_csv(), paths.trajectory()}) {
    if (!fs::exists(p)) continue;
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(detail::read_file(p.string()))));
    artifacts[fs::relative(p, paths.root).generic_string()] = buf;
  }
  report["artifacts"] = artifacts;
  if (fs::exists(paths.codebook_manifest())) {
    const json cb = read_json(paths.codebook_manifest());
    report["codebook"] = {{"size", cb.at("size")}, {"figure_count", cb.at("figure_count")}, {"ground_count", cb.at("ground_count")}};
  }
  if (fs::exists(paths.train_metrics())) {
    json m = read_json(paths.train_metrics());
    m.erase("provenance");
    report["training"] = m;
  }
  if (fs::exists(paths.attribution_summary())) {
    const json s = read_json(paths.attribution_summary());
    report["attribution"] = {{"samples", s.at("samples")}, {"top_head", s.at("top_head")}, {"max_completeness_error", s.at("max_completeness_error")},
                             {"cumulative_residual", s.at("cumulative_residual")}};
  }
  if (fs::exists(paths.trajectory())) {
    const json t = read_json(paths.trajectory());
    json per = json::array();
    for (const auto& s : t.at("stimuli")) per.push_back({{"id", s.at("id")}, {"flips", s.at("flips")}});
    report["sweep"] = {{"layer", t.at("layer")}, {"head", t.at("head")}, {"alpha_points", t.at("alphas").size()},
                       {"aggregate_flips", t.at("aggregate").at("flips")}, {"per_stimulus_flips", per}};
  }
  write_text(paths.report(), canonical(report));
  return report;
}

}  // namespace figground
