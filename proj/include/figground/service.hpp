#pragma once

#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <variant>

#include "figground/harness.hpp"

// must follow Eigen: httplib pulls in resolv.h, whose _res macro clashes with Eigen internals
#include <httplib.h>

namespace figground {

/// Small LRU map. Not thread-safe on its own.
template <typename K, typename V>
class LruCache {
 public:
  explicit LruCache(std::size_t capacity) : capacity_(capacity) {}

  std::optional<V> get(const K& key) {
    auto it = index_.find(key);
    if (it == index_.end()) return std::nullopt;
    order_.splice(order_.begin(), order_, it->second);
    return it->second->second;
  }

  void put(const K& key, V value) {
    if (capacity_ == 0) return;
    if (auto it = index_.find(key); it != index_.end()) {
      it->second->second = std::move(value);
      order_.splice(order_.begin(), order_, it->second);
      return;
    }
    order_.emplace_front(key, std::move(value));
    index_[key] = order_.begin();
    if (order_.size() > capacity_) {
      index_.erase(order_.back().first);
      order_.pop_back();
    }
  }

  void clear() {
    order_.clear();
    index_.clear();
  }

  std::size_t size() const { return order_.size(); }

 private:
  std::size_t capacity_;
  std::list<std::pair<K, V>> order_;
  std::unordered_map<K, typename std::list<std::pair<K, V>>::iterator> index_;
};

/// HTTP status plus JSON body; handlers are plain functions so tests can call
/// them without a socket.
struct Reply {
  int status = 200;
  json body;
};

inline Reply error_reply(int status, std::string_view code, const std::string& message) {
  return {status, {{"schema_version", kSchemaVersion}, {"error", std::string(code)}, {"message", message}}};
}

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::ShapeMismatch:
    case ErrorCode::NotNormalized: return 400;
    case ErrorCode::IndexOutOfRange:
    case ErrorCode::EmptyConflict:
    case ErrorCode::RetryExhausted:
    case ErrorCode::DegenerateInput: return 422;
    default: return 500;
  }
}

class Service {
 public:
  explicit Service(ExperimentConfig cfg) : cfg_(std::move(cfg)), cache_(static_cast<std::size_t>(std::max(0, cfg_.service.cache_capacity))) {
    std::unique_lock lock(state_mutex_);
    load_locked();
  }

  const ExperimentConfig& config() const { return cfg_; }

  Reply healthz() const { return {200, {{"schema_version", kSchemaVersion}, {"status", "ok"}}}; }

  Reply model() {
    return guarded([&] {
      json body = {{"schema_version", kSchemaVersion},
                   {"code_version", std::string(kCodeVersion)},
                   {"config_hash", config_hash(cfg_)},
                   {"seed", cfg_.seed},
                   {"checkpoint_loaded", model_ != nullptr},
                   {"codebook_loaded", codebook_ != nullptr},
                   {"image_size", cfg_.geometry.image_size},
                   {"patch_size", cfg_.geometry.patch_size},
                   {"grid_side", cfg_.geometry.grid_side()},
                   {"aggregation", cfg_.attribution.aggregation},
                   {"weighting", cfg_.intervention.weighting}};
      if (codebook_) {
        // one byte per pixel (0 or 255), token-major, row-major within a patch
        std::string bits;
        bits.reserve(static_cast<std::size_t>(codebook_->size()) * codebook_->patch_dim());
        for (const PatchPattern& c : codebook_->centroids)
          for (int b = 0; b < codebook_->patch_dim(); ++b) bits.push_back(c.test(b) ? '\xff' : '\0');
        body["codebook"] = {{"id", codebook_id_},
                            {"size", codebook_->size()},
                            {"patch_size", codebook_->patch_size},
                            {"centroids", httplib::detail::base64_encode(bits)},
                            {"figure_tokens", codebook_->figure_tokens},
                            {"ground_tokens", codebook_->ground_tokens}};
      }
      if (model_) {
        const ModelConfig& mc = model_config();
        body["checkpoint"] = {{"id", checkpoint_id_},
                              {"layers", mc.layers},
                              {"heads", mc.heads},
                              {"d_model", mc.d_model},
                              {"mlp_hidden", mc.mlp_hidden},
                              {"vocab", mc.vocab},
                              {"positions", mc.positions},
                              {"precision", mc.precision == Precision::F32 ? "f32" : "f64"}};
      }
      return Reply{200, body};
    });
  }

  Reply stimulus(const std::string& seed_text) {
    const auto seed = parse_seed(seed_text);
    if (!seed) return error_reply(400, "InvalidArgument", "seed must be a non-negative integer");
    return guarded([&] {
      const Stimulus s = make_stimulus(*seed, cfg_.geometry);
      json coverage = json::array();
      for (const auto& [idx, frac] : s.region.coverage) coverage.push_back({idx, num(frac)});
      return Reply{200,
                   {{"schema_version", kSchemaVersion},
                    {"stimulus_seed", s.seed},
                    {"width", s.image.width},
                    {"height", s.image.height},
                    {"grid_side", cfg_.geometry.grid_side()},
                    {"image", httplib::detail::base64_encode(encode_pgm(s.image))},
                    {"vertices", points_json(s.shape.polygon())},
                    {"reflex_index", s.shape.reflex_index},
                    {"hull", points_json(s.region.hull)},
                    {"mask_patches", s.region.mask_patches},
                    {"coverage", coverage}}};
    });
  }

  Reply attribution(const std::string& body_text) {
    const json body = json::parse(body_text, nullptr, false);
    const auto seed = body_seed(body);
    if (!seed) return error_reply(400, "InvalidArgument", "body must be a JSON object with a non-negative integer stimulus_seed");
    return guarded([&] {
      if (!model_ || !codebook_) return error_reply(409, "NoCheckpoint", "no checkpoint or codebook is loaded");
      const Aggregation agg = parse_aggregation(body.value("aggregation", cfg_.attribution.aggregation));
      const auto entry = baseline(*seed);
      const AttributionReport report = attribute_stimulus(*wide_, *codebook_, entry->stimulus, agg);
      return Reply{200, report_json(report)};
    });
  }

  Reply intervene(const std::string& body_text) {
    const json body = json::parse(body_text, nullptr, false);
    const auto seed = body_seed(body);
    if (!seed || !body.contains("layer") || !body.contains("head") || !body.contains("alpha") || !body["layer"].is_number_integer() ||
        !body["head"].is_number_integer() || !body["alpha"].is_number())
      return error_reply(400, "InvalidArgument", "body needs stimulus_seed, integer layer and head, numeric alpha");
    return guarded([&] {
      if (!model_ || !codebook_) return error_reply(409, "NoCheckpoint", "no checkpoint or codebook is loaded");
      const int layer = body["layer"].get<int>(), head = body["head"].get<int>();
      const double alpha = body["alpha"].get<double>();
      const ModelConfig& mc = model_config();
      if (layer < 0 || layer >= mc.layers || head < 0 || head >= mc.heads)
        return error_reply(422, "IndexOutOfRange", "head (" + std::to_string(layer) + ", " + std::to_string(head) + ") is outside the model");
      const PatchWeighting weighting = body.contains("weighting") ? parse_weighting(body["weighting"].get<std::string>()) : cfg_.weighting();
      const auto entry = baseline(*seed);
      const Stimulus& s = entry->stimulus;
      const ConflictTargets targets = idealized_targets(s.shape, s.region, *codebook_, cfg_.geometry.image_size, cfg_.geometry.image_size);
      const TokenGrid grid = conflict_grid(s, *codebook_);
      json out = std::visit(
          [&](const auto& base) {
            using T = typename std::decay_t<decltype(base.logits)>::Scalar;
            const auto run = scaled_forward(params<T>(), grid, InterventionConfig{{{layer, head, alpha}}});
            const ManifoldPoint mp = manifold_point(run.logits, targets, weighting, alpha);
            const ManifoldPoint bp = manifold_point(base.logits, targets, weighting, 1.0);
            const auto argmax = argmax_grid(run.logits, grid);
            const auto base_argmax = argmax_grid(base.logits, grid);
            std::vector<int> flipped;
            for (int p : targets.positions)
              if (argmax[p] != base_argmax[p]) flipped.push_back(p);
            return json{{"schema_version", kSchemaVersion},
                        {"stimulus_seed", *seed},
                        {"layer", layer},
                        {"head", head},
                        {"alpha", num(alpha)},
                        {"manifold_point", point_json(mp)},
                        {"baseline", point_json(bp)},
                        {"argmax_grid", argmax},
                        {"baseline_argmax_grid", base_argmax},
                        {"mask_patches", targets.positions},
                        {"flipped_patches", flipped}};
          },
          entry->forward);
      return Reply{200, out};
    });
  }

  /// Reloads codebook and checkpoint from the run directory. Requests that
  /// arrive meanwhile get 503.
  Reply reload() {
    std::unique_lock lock(state_mutex_);
    try {
      load_locked();
    } catch (const Error& e) {
      return error_reply(500, to_string(e.code()), e.what());
    }
    return {200, {{"schema_version", kSchemaVersion}, {"reloaded", true}, {"checkpoint_loaded", model_ != nullptr}}};
  }

  std::size_t cache_size() {
    std::lock_guard lock(cache_mutex_);
    return cache_.size();
  }

  /// Registers all routes on `server`.
  void mount(httplib::Server& server) {
    auto send = [](httplib::Response& res, const Reply& r) {
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json");
    };
    server.Get("/healthz", [this, send](const httplib::Request&, httplib::Response& res) { send(res, healthz()); });
    server.Get("/model", [this, send](const httplib::Request&, httplib::Response& res) { send(res, model()); });
    server.Get("/stimulus", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, req.has_param("seed") ? stimulus(req.get_param_value("seed")) : error_reply(400, "InvalidArgument", "missing seed"));
    });
    server.Post("/attribution", [this, send](const httplib::Request& req, httplib::Response& res) { send(res, attribution(req.body)); });
    server.Post("/intervene", [this, send](const httplib::Request& req, httplib::Response& res) { send(res, intervene(req.body)); });
    server.Post("/reload", [this, send](const httplib::Request&, httplib::Response& res) { send(res, reload()); });
    server.set_exception_handler([send](const httplib::Request&, httplib::Response& res, std::exception_ptr) {
      send(res, error_reply(500, "Internal", "unhandled exception"));
    });
    if (!cfg_.service.ui_dir.empty() && fs::exists(cfg_.service.ui_dir)) server.set_mount_point("/ui", cfg_.service.ui_dir);
  }

 private:
  struct Baseline {
    Stimulus stimulus;
    std::variant<ForwardResult<float>, ForwardResult<double>> forward;
  };

  static std::optional<std::uint64_t> parse_seed(const std::string& text) {
    if (text.empty() || text.size() > 20) return std::nullopt;
    for (char c : text)
      if (c < '0' || c > '9') return std::nullopt;
    try {
      return std::stoull(text);
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }

  static std::optional<std::uint64_t> body_seed(const json& body) {
    if (!body.is_object() || !body.contains("stimulus_seed") || !body["stimulus_seed"].is_number_unsigned()) return std::nullopt;
    return body["stimulus_seed"].get<std::uint64_t>();
  }

  static PatchWeighting parse_weighting(const std::string& w) {
    if (w == "uniform") return PatchWeighting::Uniform;
    if (w == "coverage") return PatchWeighting::Coverage;
    fail(ErrorCode::InvalidArgument, "weighting must be uniform or coverage");
  }

  /// Runs `f` under a shared lock, or answers 503 while a reload holds it.
  template <typename F>
  Reply guarded(F&& f) {
    std::shared_lock lock(state_mutex_, std::try_to_lock);
    if (!lock.owns_lock()) return error_reply(503, "Reloading", "checkpoint reload in progress");
    try {
      return f();
    } catch (const Error& e) {
      return error_reply(http_status(e.code()), to_string(e.code()), e.what());
    } catch (const json::exception& e) {
      return error_reply(400, "InvalidArgument", e.what());
    }
  }

  void load_locked() {
    const RunPaths paths{cfg_.output_dir};
    codebook_.reset();
    model_.reset();
    wide_.reset();
    codebook_id_.clear();
    checkpoint_id_.clear();
    {
      std::lock_guard lock(cache_mutex_);
      cache_.clear();
    }
    if (fs::exists(paths.codebook())) {
      const std::string bytes = detail::read_file(paths.codebook().string());
      codebook_ = std::make_shared<Codebook>(deserialize_codebook(bytes));
      codebook_id_ = hex(fnv1a64(bytes));
    }
    if (codebook_ && fs::exists(paths.checkpoint())) {
      const std::string bytes = detail::read_file(paths.checkpoint().string());
      if (peek_checkpoint_config(bytes).precision == Precision::F32)
        model_ = std::make_shared<ModelVariant>(deserialize_checkpoint<float>(bytes).params);
      else
        model_ = std::make_shared<ModelVariant>(deserialize_checkpoint<double>(bytes).params);
      wide_ = std::make_shared<Parameters<double>>(std::visit([](const auto& p) { return p.template cast<double>(); }, *model_));
      checkpoint_id_ = hex(fnv1a64(bytes));
      if (model_config().vocab != codebook_->size()) fail(ErrorCode::DimensionMismatch, "checkpoint vocabulary differs from the codebook");
    }
  }

  static std::string hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  const ModelConfig& model_config() const {
    return std::visit([](const auto& p) -> const ModelConfig& { return p.config; }, *model_);
  }

  template <typename T>
  const Parameters<T>& params() const {
    return std::get<Parameters<T>>(*model_);
  }

  std::shared_ptr<const Baseline> baseline(std::uint64_t seed) {
    {
      std::lock_guard lock(cache_mutex_);
      if (auto hit = cache_.get(seed)) return *hit;
    }
    auto entry = std::make_shared<Baseline>();
    entry->stimulus = make_stimulus(seed, cfg_.geometry);
    const TokenGrid grid = conflict_grid(entry->stimulus, *codebook_);
    std::visit([&](const auto& p) { entry->forward = forward(p, grid); }, *model_);
    std::lock_guard lock(cache_mutex_);
    cache_.put(seed, entry);
    return entry;
  }

  using ModelVariant = std::variant<Parameters<float>, Parameters<double>>;

  ExperimentConfig cfg_;
  std::shared_mutex state_mutex_;
  std::shared_ptr<const Codebook> codebook_;
  std::shared_ptr<const ModelVariant> model_;
  std::shared_ptr<const Parameters<double>> wide_;
  std::string codebook_id_;
  std::string checkpoint_id_;
  std::mutex cache_mutex_;
  LruCache<std::uint64_t, std::shared_ptr<const Baseline>> cache_;
};

}  // namespace figground
