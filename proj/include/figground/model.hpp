#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "figground/error.hpp"
#include "figground/rng.hpp"
#include "figground/tokenizer.hpp"

namespace figground {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using ColVector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

enum class Precision : std::uint8_t { F32 = 4, F64 = 8 };

template <typename T>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? Precision::F32 : Precision::F64;
}

inline std::string_view to_string(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

struct ModelConfig {
  int layers = 4;
  int heads = 4;
  int d_model = 64;
  int mlp_hidden = 256;
  int vocab = 0;
  int positions = 64;
  double ln_eps = 1e-6;
  std::uint64_t seed = 0;
  Precision precision = Precision::F32;

  int head_dim() const { return d_model / heads; }

  void validate() const {
    if (layers < 1 || heads < 1 || d_model < 1 || mlp_hidden < 1 || vocab < 1 || positions < 1)
      fail(ErrorCode::InvalidArgument, "all model dimensions must be >= 1");
    if (d_model % heads != 0) fail(ErrorCode::InvalidArgument, "d_model must be divisible by heads");
    if (!(ln_eps > 0.0)) fail(ErrorCode::InvalidArgument, "ln_eps must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// One pre-LN block. The attention output projection `wo` is d x d; rows
/// [h*d_h, (h+1)*d_h) form head h's slice. It carries no bias so the
/// sublayer output is exactly the sum of the per-head contributions.
template <typename T>
struct LayerParams {
  RowVector<T> ln1_gain, ln1_bias;
  Matrix<T> wq, wk, wv;
  RowVector<T> bq, bv;  // no key bias: softmax is invariant to it
  Matrix<T> wo;
  RowVector<T> ln2_gain, ln2_bias;
  Matrix<T> w1;
  RowVector<T> b1;
  Matrix<T> w2;
  RowVector<T> b2;
};

template <typename T>
struct Parameters {
  ModelConfig config;
  Matrix<T> token_embedding;     // V x d
  RowVector<T> mask_embedding;   // d
  Matrix<T> position_embedding;  // N x d
  std::vector<LayerParams<T>> layers;
  RowVector<T> final_gain, final_bias;
  Matrix<T> unembedding;         // d x V, no bias

  /// Calls f(name, span) for every tensor in a fixed canonical order. The
  /// order defines the checkpoint layout and the optimizer state layout.
  template <typename F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <typename F>
  void visit(F&& f) const { visit_impl(*this, f); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](std::string_view, auto s) { n += s.size(); });
    return n;
  }

  /// Element-wise conversion to another scalar type.
  template <typename U>
  Parameters<U> cast() const {
    auto out = Parameters<U>::zeros(config);
    std::vector<std::span<const T>> src;
    visit([&](std::string_view, std::span<const T> s) { src.push_back(s); });
    std::size_t i = 0;
    out.visit([&](std::string_view, std::span<U> dst) {
      std::transform(src[i].begin(), src[i].end(), dst.begin(), [](T v) { return static_cast<U>(v); });
      ++i;
    });
    return out;
  }

  static Parameters zeros(const ModelConfig& cfg) {
    cfg.validate();
    Parameters p;
    p.config = cfg;
    p.config.precision = precision_of<T>();
    const int d = cfg.d_model, f = cfg.mlp_hidden;
    p.token_embedding = Matrix<T>::Zero(cfg.vocab, d);
    p.mask_embedding = RowVector<T>::Zero(d);
    p.position_embedding = Matrix<T>::Zero(cfg.positions, d);
    p.layers.resize(cfg.layers);
    for (auto& l : p.layers) {
      l.ln1_gain = RowVector<T>::Zero(d);
      l.ln1_bias = RowVector<T>::Zero(d);
      l.wq = Matrix<T>::Zero(d, d);
      l.wk = Matrix<T>::Zero(d, d);
      l.wv = Matrix<T>::Zero(d, d);
      l.bq = RowVector<T>::Zero(d);
      l.bv = RowVector<T>::Zero(d);
      l.wo = Matrix<T>::Zero(d, d);
      l.ln2_gain = RowVector<T>::Zero(d);
      l.ln2_bias = RowVector<T>::Zero(d);
      l.w1 = Matrix<T>::Zero(d, f);
      l.b1 = RowVector<T>::Zero(f);
      l.w2 = Matrix<T>::Zero(f, d);
      l.b2 = RowVector<T>::Zero(d);
    }
    p.final_gain = RowVector<T>::Zero(d);
    p.final_bias = RowVector<T>::Zero(d);
    p.unembedding = Matrix<T>::Zero(d, cfg.vocab);
    return p;
  }

  /// Every tensor i.i.d. normal with the given scale; layer-norm gains
  /// centered on one. Used by tests and gradient checks.
  static Parameters random(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.5) {
    Parameters p = zeros(cfg);
    Rng rng = make_rng(seed);
    std::normal_distribution<double> normal(0.0, scale);
    p.visit([&](std::string_view name, std::span<T> s) {
      const bool gain = name.ends_with("gain");
      for (T& v : s) v = static_cast<T>((gain ? 1.0 : 0.0) + normal(rng));
    });
    return p;
  }

  /// Training initialization. Token embedding and unembedding come from the
  /// codebook; the rest is scaled Gaussian.
  static Parameters initialize(const ModelConfig& cfg, const Codebook& cb) {
    Parameters p = zeros(cfg);
    if (cb.size() != cfg.vocab || cb.embedding_dim() != cfg.d_model)
      fail(ErrorCode::ShapeMismatch, "codebook does not match the model vocabulary or width");
    Rng rng = make_rng(substream_seed(cfg.seed, "init"));
    const double d = cfg.d_model, f = cfg.mlp_hidden, depth = std::sqrt(2.0 * cfg.layers);
    auto fill = [&](auto& m, double sd) {
      std::normal_distribution<double> normal(0.0, sd);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(normal(rng));
    };
    p.token_embedding = cb.embedding.cast<T>();
    p.unembedding = cb.unembedding.cast<T>();
    fill(p.mask_embedding, 0.02);
    fill(p.position_embedding, 0.02);
    for (auto& l : p.layers) {
      l.ln1_gain.setOnes();
      l.ln2_gain.setOnes();
      fill(l.wq, 1.0 / std::sqrt(d));
      fill(l.wk, 1.0 / std::sqrt(d));
      fill(l.wv, 1.0 / std::sqrt(d));
      fill(l.wo, 1.0 / std::sqrt(d) / depth);
      fill(l.w1, 1.0 / std::sqrt(d));
      fill(l.w2, 1.0 / std::sqrt(f) / depth);
    }
    p.final_gain.setOnes();
    return p;
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    auto sp = [](auto& m) { return std::span(m.data(), static_cast<std::size_t>(m.size())); };
    f("token_embedding", sp(self.token_embedding));
    f("mask_embedding", sp(self.mask_embedding));
    f("position_embedding", sp(self.position_embedding));
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string pre = "layer" + std::to_string(i) + ".";
      f(pre + "ln1_gain", sp(l.ln1_gain));
      f(pre + "ln1_bias", sp(l.ln1_bias));
      f(pre + "wq", sp(l.wq));
      f(pre + "wk", sp(l.wk));
      f(pre + "wv", sp(l.wv));
      f(pre + "bq", sp(l.bq));
      f(pre + "bv", sp(l.bv));
      f(pre + "wo", sp(l.wo));
      f(pre + "ln2_gain", sp(l.ln2_gain));
      f(pre + "ln2_bias", sp(l.ln2_bias));
      f(pre + "w1", sp(l.w1));
      f(pre + "b1", sp(l.b1));
      f(pre + "w2", sp(l.w2));
      f(pre + "b2", sp(l.b2));
    }
    f("final_gain", sp(self.final_gain));
    f("final_bias", sp(self.final_bias));
    f("unembedding", sp(self.unembedding));
  }
};

template <typename T>
bool all_finite(const Parameters<T>& p) {
  bool ok = true;
  p.visit([&](std::string_view, std::span<const T> s) {
    for (T v : s) ok = ok && std::isfinite(v);
  });
  return ok;
}

template <typename T>
bool bitwise_equal(const Parameters<T>& a, const Parameters<T>& b) {
  std::vector<std::span<const T>> lhs, rhs;
  a.visit([&](std::string_view, std::span<const T> s) { lhs.push_back(s); });
  b.visit([&](std::string_view, std::span<const T> s) { rhs.push_back(s); });
  if (lhs.size() != rhs.size() || !(a.config == b.config)) return false;
  for (std::size_t i = 0; i < lhs.size(); ++i)
    if (lhs[i].size() != rhs[i].size() || std::memcmp(lhs[i].data(), rhs[i].data(), lhs[i].size_bytes()) != 0) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Interventions
// ---------------------------------------------------------------------------

struct HeadScale {
  int layer = 0;
  int head = 0;
  double alpha = 1.0;
};

/// Multiplicative scaling of selected heads' residual contributions.
struct InterventionConfig {
  std::vector<HeadScale> targets;

  bool empty() const { return targets.empty(); }

  void validate(const ModelConfig& cfg) const {
    for (const auto& t : targets) {
      if (t.layer < 0 || t.layer >= cfg.layers || t.head < 0 || t.head >= cfg.heads)
        fail(ErrorCode::IndexOutOfRange, "head (" + std::to_string(t.layer) + ", " + std::to_string(t.head) + ") outside the model");
      if (!std::isfinite(t.alpha)) fail(ErrorCode::InvalidArgument, "alpha must be finite");
    }
  }
};

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Additive components written into the residual stream during one forward
/// pass, plus the final layer-norm statistics needed to project them.
template <typename T>
struct ResidualTrace {
  Matrix<T> embedding;                                 // N x d (token/mask + position)
  std::vector<std::vector<Matrix<T>>> head_outputs;     // [layer][head] N x d, after W_O slice and scaling
  std::vector<std::vector<Matrix<T>>> head_activations; // [layer][head] N x d_h, before W_O
  std::vector<std::vector<Matrix<T>>> attention;        // [layer][head] N x N row-stochastic
  std::vector<Matrix<T>> attention_outputs;            // [layer] sublayer output
  std::vector<Matrix<T>> mlp_outputs;                  // [layer] N x d
  Matrix<T> final_residual;                            // N x d, input to the final layer norm
  ColVector<T> final_mean;                             // N
  ColVector<T> final_var;                              // N (biased, without eps)
  T ln_eps = T(0);

  int layers() const { return static_cast<int>(mlp_outputs.size()); }
  int heads() const { return head_outputs.empty() ? 0 : static_cast<int>(head_outputs[0].size()); }
};

template <typename T>
struct ForwardResult {
  Matrix<T> logits;  // N x V
  ResidualTrace<T> trace;
};

template <typename T>
struct LayerNormCache {
  Matrix<T> normed;       // (x - mean) / sqrt(var + eps)
  ColVector<T> inv_std;
  ColVector<T> mean;
  ColVector<T> var;
};

/// Row-wise layer norm. Writes the affine output into `out`.
template <typename T>
void layer_norm(const Matrix<T>& x, const RowVector<T>& gain, const RowVector<T>& bias, T eps, LayerNormCache<T>& cache,
                Matrix<T>& out) {
  const Eigen::Index d = x.cols();
  cache.mean = x.rowwise().mean();
  cache.normed = x.colwise() - cache.mean;
  cache.var = cache.normed.rowwise().squaredNorm() / static_cast<T>(d);
  cache.inv_std = (cache.var.array() + eps).rsqrt().matrix();
  cache.normed = cache.inv_std.asDiagonal() * cache.normed;
  out = (cache.normed.array().rowwise() * gain.array()).rowwise() + bias.array();
}

template <typename T>
void softmax_rows(Matrix<T>& m) {
  const ColVector<T> mx = m.rowwise().maxCoeff();
  m = (m.colwise() - mx).array().exp().matrix();
  const ColVector<T> inv = m.rowwise().sum().cwiseInverse();
  m = inv.asDiagonal() * m;
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
inline constexpr double kGeluA = 0.044715;

/// tanh-approximated GELU. `t` receives tanh(c * (x + a x^3)) for the backward pass.
template <typename T>
Matrix<T> gelu(const Matrix<T>& x, Matrix<T>& t) {
  const T c = static_cast<T>(kGeluC), a = static_cast<T>(kGeluA);
  t = (c * (x.array() + a * x.array().cube())).tanh().matrix();
  return (T(0.5) * x.array() * (T(1) + t.array())).matrix();
}

template <typename T>
Matrix<T> gelu_grad(const Matrix<T>& x, const Matrix<T>& t) {
  const T c = static_cast<T>(kGeluC), a = static_cast<T>(kGeluA);
  return (T(0.5) * (T(1) + t.array()) +
          T(0.5) * x.array() * (T(1) - t.array().square()) * c * (T(1) + T(3) * a * x.array().square()))
      .matrix();
}

/// Splits a layer's per-head activations into their residual-stream
/// contributions: o_h = z_h * W_O[h*d_h:(h+1)*d_h, :].
template <typename T>
std::vector<Matrix<T>> head_decomposition(std::span<const Matrix<T>> head_activations, const Matrix<T>& wo) {
  const auto heads = static_cast<Eigen::Index>(head_activations.size());
  if (heads == 0 || wo.rows() % heads != 0) fail(ErrorCode::ShapeMismatch, "W_O rows must split evenly across heads");
  const Eigen::Index dh = wo.rows() / heads;
  std::vector<Matrix<T>> out;
  out.reserve(head_activations.size());
  for (Eigen::Index h = 0; h < heads; ++h) {
    if (head_activations[h].cols() != dh) fail(ErrorCode::ShapeMismatch, "head activation width differs from the W_O slice");
    out.emplace_back(head_activations[h] * wo.middleRows(h * dh, dh));
  }
  return out;
}

namespace detail {

/// Intermediates kept for the manual backward pass.
template <typename T>
struct LayerCache {
  Matrix<T> x_in;
  LayerNormCache<T> ln1;
  Matrix<T> a;
  Matrix<T> q, k, v;            // N x d, heads side by side
  std::vector<Matrix<T>> probs; // per head N x N
  Matrix<T> z;                  // N x d, heads side by side
  LayerNormCache<T> ln2;
  Matrix<T> b;
  Matrix<T> hidden_pre, hidden, hidden_tanh;
};

template <typename T>
struct ForwardCache {
  std::vector<LayerCache<T>> layers;
  LayerNormCache<T> final_ln;
  Matrix<T> final_out;
};

template <typename T>
std::vector<std::vector<T>> head_scales(const ModelConfig& cfg, const InterventionConfig& iv) {
  iv.validate(cfg);
  std::vector<std::vector<T>> s(cfg.layers, std::vector<T>(cfg.heads, T(1)));
  for (const auto& t : iv.targets) s[t.layer][t.head] = static_cast<T>(t.alpha);
  return s;
}

template <typename T>
void check_finite(const Matrix<T>& m, const char* where) {
  if (!m.allFinite()) fail(ErrorCode::NonFiniteActivation, std::string("non-finite activation in ") + where);
}

/// Core forward pass shared by inference and training. Logits are produced
/// for `logit_rows` only (all rows when empty).
template <typename T>
Matrix<T> forward_impl(const Parameters<T>& p, const TokenGrid& grid, const InterventionConfig& iv,
                       std::span<const int> head_order, std::span<const int> logit_rows, ResidualTrace<T>* trace,
                       ForwardCache<T>* cache) {
  const ModelConfig& cfg = p.config;
  const int n = cfg.positions, d = cfg.d_model, heads = cfg.heads, dh = cfg.head_dim();
  if (grid.size() != n || static_cast<int>(grid.mask.size()) != n) fail(ErrorCode::ShapeMismatch, "token grid length differs from the model's positions");
  const auto scales = head_scales<T>(cfg, iv);
  std::vector<int> order(heads);
  if (head_order.empty()) {
    std::iota(order.begin(), order.end(), 0);
  } else {
    if (static_cast<int>(head_order.size()) != heads) fail(ErrorCode::ShapeMismatch, "head order must list every head");
    order.assign(head_order.begin(), head_order.end());
  }
  const T eps = static_cast<T>(cfg.ln_eps);
  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

  Matrix<T> x(n, d);
  for (int i = 0; i < n; ++i) {
    const int tok = grid.tokens[i];
    if (!grid.mask[i] && (tok < 0 || tok >= cfg.vocab)) fail(ErrorCode::ShapeMismatch, "token outside the vocabulary");
    x.row(i) = (grid.mask[i] ? p.mask_embedding : RowVector<T>(p.token_embedding.row(tok))) + p.position_embedding.row(i);
  }
  if (trace) {
    trace->embedding = x;
    trace->head_outputs.assign(cfg.layers, std::vector<Matrix<T>>(heads));
    trace->head_activations.assign(cfg.layers, std::vector<Matrix<T>>(heads));
    trace->attention.assign(cfg.layers, std::vector<Matrix<T>>(heads));
    trace->attention_outputs.assign(cfg.layers, Matrix<T>());
    trace->mlp_outputs.assign(cfg.layers, Matrix<T>());
  }
  if (cache) cache->layers.resize(cfg.layers);

  LayerNormCache<T> ln_local;
  Matrix<T> a, bmat;
  std::vector<Matrix<T>> head_out(heads);
  std::vector<Matrix<T>> probs(heads);
  for (int l = 0; l < cfg.layers; ++l) {
    const LayerParams<T>& lp = p.layers[l];
    LayerCache<T>* lc = cache ? &cache->layers[l] : nullptr;
    if (lc) lc->x_in = x;

    LayerNormCache<T>& ln1 = lc ? lc->ln1 : ln_local;
    layer_norm(x, lp.ln1_gain, lp.ln1_bias, eps, ln1, a);
    Matrix<T> q = (a * lp.wq).rowwise() + lp.bq;
    Matrix<T> k = a * lp.wk;
    Matrix<T> v = (a * lp.wv).rowwise() + lp.bv;
    Matrix<T> z(n, d);

    // Each head's contribution is computed independently (in any order) and
    // summed into the residual in canonical head order.
    for (int h : order) {
      Matrix<T> s = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * inv_sqrt_dh;
      softmax_rows(s);
      z.middleCols(h * dh, dh) = s * v.middleCols(h * dh, dh);
      head_out[h] = z.middleCols(h * dh, dh) * lp.wo.middleRows(h * dh, dh);
      if (scales[l][h] != T(1)) head_out[h] *= scales[l][h];
      probs[h] = std::move(s);
    }
    Matrix<T> attn_out = Matrix<T>::Zero(n, d);
    for (int h = 0; h < heads; ++h) attn_out += head_out[h];
    for (int h = 0; h < heads; ++h) x += head_out[h];
    check_finite(x, "attention");

    if (trace) {
      for (int h = 0; h < heads; ++h) {
        trace->head_outputs[l][h] = head_out[h];
        trace->head_activations[l][h] = z.middleCols(h * dh, dh);
        trace->attention[l][h] = probs[h];
      }
      trace->attention_outputs[l] = attn_out;
    }

    LayerNormCache<T>& ln2 = lc ? lc->ln2 : ln_local;
    layer_norm(x, lp.ln2_gain, lp.ln2_bias, eps, ln2, bmat);
    Matrix<T> hidden_pre = (bmat * lp.w1).rowwise() + lp.b1;
    Matrix<T> hidden_tanh;
    Matrix<T> hidden = gelu(hidden_pre, hidden_tanh);
    Matrix<T> mlp_out = (hidden * lp.w2).rowwise() + lp.b2;
    x += mlp_out;
    check_finite(x, "mlp");
    if (trace) trace->mlp_outputs[l] = std::move(mlp_out);

    if (lc) {
      lc->a = a;
      lc->q = std::move(q);
      lc->k = std::move(k);
      lc->v = std::move(v);
      lc->probs = probs;
      lc->z = std::move(z);
      lc->b = bmat;
      lc->hidden_pre = std::move(hidden_pre);
      lc->hidden = std::move(hidden);
      lc->hidden_tanh = std::move(hidden_tanh);
    }
  }

  LayerNormCache<T> final_ln;
  Matrix<T> y;
  layer_norm(x, p.final_gain, p.final_bias, eps, final_ln, y);
  if (trace) {
    trace->final_residual = x;
    trace->final_mean = final_ln.mean;
    trace->final_var = final_ln.var;
    trace->ln_eps = eps;
  }
  Matrix<T> logits;
  if (logit_rows.empty()) {
    logits = y * p.unembedding;
  } else {
    Matrix<T> sel(static_cast<Eigen::Index>(logit_rows.size()), d);
    for (std::size_t r = 0; r < logit_rows.size(); ++r) sel.row(static_cast<Eigen::Index>(r)) = y.row(logit_rows[r]);
    logits = sel * p.unembedding;
  }
  check_finite(logits, "logits");
  if (cache) {
    cache->final_ln = std::move(final_ln);
    cache->final_out = std::move(y);
  }
  return logits;
}

}  // namespace detail

/// Full forward pass: logits for every position and the residual trace.
/// `head_order` permutes the evaluation order of heads within each layer and
/// does not change the result.
template <typename T>
ForwardResult<T> forward(const Parameters<T>& params, const TokenGrid& grid, const InterventionConfig& intervention = {},
                         std::span<const int> head_order = {}) {
  ForwardResult<T> out;
  out.logits = detail::forward_impl<T>(params, grid, intervention, head_order, {}, &out.trace, nullptr);
  return out;
}

/// Sum of every traced component at each position, in the order the
/// forward pass accumulates them.
template <typename T>
Matrix<T> sum_components(const ResidualTrace<T>& trace) {
  Matrix<T> acc = trace.embedding;
  for (int l = 0; l < trace.layers(); ++l) {
    for (const auto& o : trace.head_outputs[l]) acc += o;
    acc += trace.mlp_outputs[l];
  }
  return acc;
}

}  // namespace figground
