#pragma once

#include <cstdint>
#include <cstdio>
#include <string>

#include <json.hpp>

#include "figground/attribution.hpp"
#include "figground/error.hpp"
#include "figground/geometry.hpp"
#include "figground/intervention.hpp"
#include "figground/model.hpp"
#include "figground/rng.hpp"
#include "figground/train.hpp"

namespace figground {

using json = nlohmann::json;

#ifndef FIGGROUND_VERSION
#define FIGGROUND_VERSION "0.1.0"
#endif

inline constexpr std::string_view kCodeVersion = "figground-" FIGGROUND_VERSION;
inline constexpr int kSchemaVersion = 1;

struct GeometryConfig {
  int image_size = 64;
  int patch_size = 8;
  int count = 10000;
  int heldout_count = 200;
  double theta_mask = 0.5;
  double margin = 2.0;
  double scale_min = 0.28;
  double scale_max = 0.45;
  double angle_jitter = 0.35;
  double depth_min = 0.35;
  double depth_max = 0.85;
  int max_retries = 1000;

  DartParams dart_params() const {
    DartParams p;
    p.width = p.height = image_size;
    p.margin = margin;
    p.scale_min = scale_min;
    p.scale_max = scale_max;
    p.angle_jitter = angle_jitter;
    p.depth_min = depth_min;
    p.depth_max = depth_max;
    p.max_retries = max_retries;
    return p;
  }
  int grid_side() const { return image_size / patch_size; }
};

struct TokenizerConfig {
  int v_max = 1024;
  double theta_figure = 0.9;
  double theta_ground = 0.1;
};

struct ModelSection {
  int layers = 4;
  int heads = 4;
  int d_model = 64;
  int mlp_hidden = 256;
  double ln_eps = 1e-6;
  std::string precision = "f32";
};

struct TrainSection {
  std::uint64_t steps = 20000;
  int batch = 32;
  double learning_rate = 3e-3;
  std::string schedule = "cosine";
  std::uint64_t warmup = 200;
  double mask_fraction = 0.4;
  bool resume = false;
  std::uint64_t stop_after = 0;  // interrupt the run at this step (0: run to the end)
  std::uint64_t log_every = 100;
};

struct AttributionSection {
  std::string aggregation = "mean";
  std::string split = "heldout";
  int begin = 0;
  int count = 200;
};

struct InterventionSection {
  double alpha_min = -2.0;
  double alpha_max = 2.0;
  double alpha_step = 0.1;
  int layer = -1;  // -1: use the top head from the attribution summary
  int head = -1;
  std::string split = "heldout";
  int begin = 0;
  int count = 20;
  std::string weighting = "uniform";
};

struct ServiceSection {
  std::string host = "127.0.0.1";
  int port = 8080;
  int cache_capacity = 64;
  std::string ui_dir;
};

struct ExperimentConfig {
  std::uint64_t seed = 20240601;
  std::string output_dir = "run";
  GeometryConfig geometry;
  TokenizerConfig tokenizer;
  ModelSection model;
  TrainSection train;
  AttributionSection attribution;
  InterventionSection intervention;
  ServiceSection service;

  Precision precision() const {
    if (model.precision == "f32") return Precision::F32;
    if (model.precision == "f64") return Precision::F64;
    fail(ErrorCode::InvalidArgument, "precision must be f32 or f64");
  }

  ModelConfig model_config(int vocab) const {
    ModelConfig c;
    c.layers = model.layers;
    c.heads = model.heads;
    c.d_model = model.d_model;
    c.mlp_hidden = model.mlp_hidden;
    c.vocab = vocab;
    c.positions = geometry.grid_side() * geometry.grid_side();
    c.ln_eps = model.ln_eps;
    c.seed = seed;
    c.precision = precision();
    return c;
  }

  TrainOptions train_options() const {
    TrainOptions o;
    o.steps = train.steps;
    o.batch = train.batch;
    o.adam.learning_rate = train.learning_rate;
    if (train.schedule == "constant") o.schedule = LrSchedule::Constant;
    else if (train.schedule == "cosine") o.schedule = LrSchedule::Cosine;
    else fail(ErrorCode::InvalidArgument, "schedule must be constant or cosine");
    o.warmup = train.warmup;
    o.mask_fraction = train.mask_fraction;
    o.seed = substream_seed(seed, "train");
    o.stop_at = train.stop_after;
    return o;
  }

  PatchWeighting weighting() const {
    if (intervention.weighting == "uniform") return PatchWeighting::Uniform;
    if (intervention.weighting == "coverage") return PatchWeighting::Coverage;
    fail(ErrorCode::InvalidArgument, "weighting must be uniform or coverage");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GeometryConfig, image_size, patch_size, count, heldout_count, theta_mask, margin, scale_min,
                                                scale_max, angle_jitter, depth_min, depth_max, max_retries)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TokenizerConfig, v_max, theta_figure, theta_ground)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelSection, layers, heads, d_model, mlp_hidden, ln_eps, precision)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainSection, steps, batch, learning_rate, schedule, warmup, mask_fraction, resume,
                                                stop_after, log_every)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AttributionSection, aggregation, split, begin, count)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(InterventionSection, alpha_min, alpha_max, alpha_step, layer, head, split, begin, count,
                                                weighting)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ServiceSection, host, port, cache_capacity, ui_dir)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, seed, output_dir, geometry, tokenizer, model, train, attribution,
                                                intervention, service)

/// Hash of everything that determines artifact content. The output location,
/// the service section and the run-control fields (resume, stop, logging) are
/// excluded so that the same experiment carries the same hash wherever and
/// however often it is run.
inline std::string config_hash(const ExperimentConfig& cfg) {
  json j = cfg;
  j.erase("output_dir");
  j.erase("service");
  j["train"].erase("resume");
  j["train"].erase("stop_after");
  j["train"].erase("log_every");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

/// Applies a "dotted.path=value" override. The value is parsed as JSON when
/// possible, otherwise taken as a string.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) fail(ErrorCode::InvalidArgument, "override must look like key.path=value");
  std::string path = "/" + assignment.substr(0, eq);
  for (char& c : path)
    if (c == '.') c = '/';
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  const json::json_pointer ptr(path);
  if (!j.contains(ptr)) fail(ErrorCode::InvalidArgument, "unknown config key '" + assignment.substr(0, eq) + "'");
  j[ptr] = value;
}

inline ExperimentConfig config_from_json(const json& j) {
  try {
    return j.get<ExperimentConfig>();
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("bad config: ") + e.what());
  }
}

}  // namespace figground
