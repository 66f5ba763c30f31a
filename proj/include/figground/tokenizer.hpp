#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "figground/error.hpp"
#include "figground/geometry.hpp"
#include "figground/rng.hpp"

namespace figground {

/// A binary patch pattern packed row-major into 64-bit words.
struct PatchPattern {
  std::vector<std::uint64_t> words;

  int popcount() const {
    int n = 0;
    for (auto w : words) n += std::popcount(w);
    return n;
  }
  bool test(int bit) const { return (words[bit / 64] >> (bit % 64)) & 1ULL; }

  friend bool operator==(const PatchPattern&, const PatchPattern&) = default;
  friend auto operator<=>(const PatchPattern&, const PatchPattern&) = default;
};

struct PatchPatternHash {
  std::size_t operator()(const PatchPattern& p) const noexcept {
    std::uint64_t h = 0x84222325cbf29ce4ULL;
    for (auto w : p.words) h = splitmix64(h ^ w);
    return static_cast<std::size_t>(h);
  }
};

inline int hamming(const PatchPattern& a, const PatchPattern& b) {
  int d = 0;
  for (std::size_t i = 0; i < a.words.size(); ++i) d += std::popcount(a.words[i] ^ b.words[i]);
  return d;
}

inline int words_for(int patch_size) { return (patch_size * patch_size + 63) / 64; }

inline PatchPattern uniform_pattern(int patch_size, bool foreground) {
  const int bits = patch_size * patch_size;
  PatchPattern p{std::vector<std::uint64_t>(words_for(patch_size), 0)};
  if (foreground)
    for (int b = 0; b < bits; ++b) p.words[b / 64] |= 1ULL << (b % 64);
  return p;
}

inline PatchPattern extract_patch(const BinaryImage& img, int patch_size, int patch_row, int patch_col) {
  PatchPattern p{std::vector<std::uint64_t>(words_for(patch_size), 0)};
  int bit = 0;
  for (int y = patch_row * patch_size; y < (patch_row + 1) * patch_size; ++y)
    for (int x = patch_col * patch_size; x < (patch_col + 1) * patch_size; ++x, ++bit)
      if (img.at(x, y)) p.words[bit / 64] |= 1ULL << (bit % 64);
  return p;
}

struct Codebook {
  int patch_size = 0;
  std::vector<PatchPattern> centroids;     // token index -> pattern
  std::vector<std::uint64_t> frequency;    // corpus patches assigned to each token (after merging)
  Eigen::MatrixXf embedding;               // V x d initial input embedding
  Eigen::MatrixXf unembedding;             // d x V initial output projection
  std::vector<int> figure_tokens;
  std::vector<int> ground_tokens;
  double theta_figure = 0.9;
  double theta_ground = 0.1;

  int size() const { return static_cast<int>(centroids.size()); }
  int patch_dim() const { return patch_size * patch_size; }
  int embedding_dim() const { return static_cast<int>(embedding.cols()); }
  double fill_fraction(int token) const { return static_cast<double>(centroids.at(token).popcount()) / patch_dim(); }
};

struct TokenGrid {
  int rows = 0;
  int cols = 0;
  std::vector<int> tokens;
  std::vector<std::uint8_t> mask;

  TokenGrid() = default;
  TokenGrid(int r, int c) : rows(r), cols(c), tokens(static_cast<std::size_t>(r) * c, 0), mask(tokens.size(), 0) {}

  int size() const { return rows * cols; }
  std::vector<int> masked_positions() const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i)
      if (mask[i]) out.push_back(i);
    return out;
  }
  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

/// Every distinct patch pattern of the corpus with its frequency.
inline std::unordered_map<PatchPattern, std::uint64_t, PatchPatternHash> count_patterns(std::span<const BinaryImage> corpus,
                                                                                        int patch_size) {
  std::unordered_map<PatchPattern, std::uint64_t, PatchPatternHash> counts;
  for (const BinaryImage& img : corpus) {
    if (img.width % patch_size != 0 || img.height % patch_size != 0)
      fail(ErrorCode::DimensionMismatch, "image dimensions must be divisible by the patch size");
    for (int r = 0; r < img.height / patch_size; ++r)
      for (int c = 0; c < img.width / patch_size; ++c) ++counts[extract_patch(img, patch_size, r, c)];
  }
  return counts;
}

inline int nearest_token(const PatchPattern& p, std::span<const PatchPattern> centroids) {
  int best = 0;
  int best_dist = std::numeric_limits<int>::max();
  for (std::size_t t = 0; t < centroids.size(); ++t) {
    const int d = hamming(p, centroids[t]);
    if (d < best_dist) {
      best_dist = d;
      best = static_cast<int>(t);
      if (d == 0) break;
    }
  }
  return best;
}

/// Token sets by centroid fill fraction: figure iff fill >= theta_figure,
/// ground iff fill <= theta_ground.
inline std::pair<std::vector<int>, std::vector<int>> target_sets(const Codebook& cb, double theta_figure, double theta_ground) {
  if (!(0.0 <= theta_ground && theta_ground < theta_figure && theta_figure <= 1.0))
    fail(ErrorCode::InvalidArgument, "thresholds must satisfy 0 <= theta_ground < theta_figure <= 1");
  std::vector<int> figure, ground;
  for (int t = 0; t < cb.size(); ++t) {
    const double fill = cb.fill_fraction(t);
    if (fill >= theta_figure) figure.push_back(t);
    else if (fill <= theta_ground) ground.push_back(t);
  }
  if (figure.empty() || ground.empty()) fail(ErrorCode::EmptySet, "figure or ground token set is empty");
  return {std::move(figure), std::move(ground)};
}

/// Initial embeddings: each centroid as a +-1 vector, projected to `dim` by a
/// fixed Gaussian map when the patch dimension differs, then scaled to unit
/// norm. The unembedding starts as the transpose and is trained separately.
inline void initialize_embeddings(Codebook& cb, int dim, std::uint64_t seed) {
  const int pd = cb.patch_dim();
  Eigen::MatrixXf signs(cb.size(), pd);
  for (int t = 0; t < cb.size(); ++t)
    for (int b = 0; b < pd; ++b) signs(t, b) = cb.centroids[t].test(b) ? 1.0f : -1.0f;
  Eigen::MatrixXf emb;
  if (pd == dim) {
    emb = signs;
  } else {
    Rng rng = make_rng(substream_seed(seed, "codebook-projection"));
    std::normal_distribution<float> normal(0.0f, 1.0f);
    Eigen::MatrixXf proj(pd, dim);
    for (int i = 0; i < pd; ++i)
      for (int j = 0; j < dim; ++j) proj(i, j) = normal(rng);
    emb = signs * proj;
  }
  for (int t = 0; t < cb.size(); ++t) {
    const float n = emb.row(t).norm();
    if (n > 0.0f) emb.row(t) /= n;
  }
  cb.embedding = emb;
  cb.unembedding = emb.transpose();
}

struct CodebookOptions {
  int v_max = 1024;
  int patch_size = 8;
  int embedding_dim = 64;
  double theta_figure = 0.9;
  double theta_ground = 0.1;
  std::uint64_t seed = 0;
};

/// Corpus-derived Hamming codebook. Token 0 is the all-background pattern,
/// token 1 the all-foreground pattern when the corpus contains one; the rest
/// follow by descending frequency (ties by pattern order). When more than
/// v_max patterns exist the rarest are merged into their nearest kept pattern.
inline Codebook build_codebook(std::span<const BinaryImage> corpus, const CodebookOptions& opt) {
  if (opt.v_max < 2 || opt.patch_size <= 0) fail(ErrorCode::InvalidArgument, "v_max must be >= 2 and patch_size positive");
  const auto counts = count_patterns(corpus, opt.patch_size);

  const PatchPattern background = uniform_pattern(opt.patch_size, false);
  const PatchPattern foreground = uniform_pattern(opt.patch_size, true);
  std::vector<std::pair<PatchPattern, std::uint64_t>> rest;
  rest.reserve(counts.size());
  for (const auto& [pattern, n] : counts)
    if (pattern != background && pattern != foreground) rest.emplace_back(pattern, n);
  std::sort(rest.begin(), rest.end(), [](const auto& a, const auto& b) { return a.second != b.second ? a.second > b.second : a.first < b.first; });

  Codebook cb;
  cb.patch_size = opt.patch_size;
  cb.centroids.push_back(background);
  cb.frequency.push_back(counts.contains(background) ? counts.at(background) : 0);
  if (counts.contains(foreground)) {
    cb.centroids.push_back(foreground);
    cb.frequency.push_back(counts.at(foreground));
  }
  std::size_t kept = 0;
  while (kept < rest.size() && cb.centroids.size() < static_cast<std::size_t>(opt.v_max)) {
    cb.centroids.push_back(rest[kept].first);
    cb.frequency.push_back(rest[kept].second);
    ++kept;
  }
  for (std::size_t i = kept; i < rest.size(); ++i) cb.frequency[nearest_token(rest[i].first, cb.centroids)] += rest[i].second;

  cb.theta_figure = opt.theta_figure;
  cb.theta_ground = opt.theta_ground;
  if (cb.size() >= 2) {
    try {
      std::tie(cb.figure_tokens, cb.ground_tokens) = target_sets(cb, opt.theta_figure, opt.theta_ground);
    } catch (const Error&) {
      // degenerate corpora leave the sets empty; target_sets reports it when asked
    }
  }
  if (opt.embedding_dim > 0) initialize_embeddings(cb, opt.embedding_dim, opt.seed);
  return cb;
}

/// Nearest centroid per patch by Hamming distance, lowest index on ties.
inline TokenGrid tokenize(const BinaryImage& img, const Codebook& cb) {
  if (cb.patch_size <= 0 || img.width % cb.patch_size != 0 || img.height % cb.patch_size != 0)
    fail(ErrorCode::DimensionMismatch, "image dimensions incompatible with the codebook patch size");
  TokenGrid grid(img.height / cb.patch_size, img.width / cb.patch_size);
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c)
      grid.tokens[r * grid.cols + c] = nearest_token(extract_patch(img, cb.patch_size, r, c), cb.centroids);
  return grid;
}

/// Centroid lookup: paints every patch with its token's pattern.
inline BinaryImage detokenize(const TokenGrid& grid, const Codebook& cb) {
  const int p = cb.patch_size;
  BinaryImage img(grid.cols * p, grid.rows * p);
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c) {
      const int tok = grid.tokens[r * grid.cols + c];
      if (tok < 0 || tok >= cb.size()) fail(ErrorCode::IndexOutOfRange, "token outside the codebook");
      const PatchPattern& pat = cb.centroids[tok];
      for (int b = 0; b < p * p; ++b) img.at(c * p + b % p, r * p + b / p) = pat.test(b) ? 1 : 0;
    }
  return img;
}

// ---------------------------------------------------------------------------
// Binary codebook file:
//   "FGCB" | u32 version | u32 V | u32 patch_size | u32 patch_dim | u32 d
//   | u32 words per pattern | V * words u64 centroid bitmaps | V u64 frequencies
//   | f32 embedding (V x d, row-major) | f32 unembedding (d x V, row-major)
//   | u64 FNV-1a checksum of all preceding bytes
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCodebookVersion = 1;

namespace detail {

template <typename T>
void put(std::string& out, const T& v) {
  const char* p = reinterpret_cast<const char*>(&v);
  out.append(p, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > data_.size()) fail(ErrorCode::ChecksumMismatch, "unexpected end of file");
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::size_t position() const { return pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoError, "write failed for " + path);
}

/// Splits off and verifies the trailing checksum; returns the payload.
inline std::string_view verified_payload(std::string_view bytes) {
  if (bytes.size() < sizeof(std::uint64_t)) fail(ErrorCode::ChecksumMismatch, "file too short");
  const std::string_view payload = bytes.substr(0, bytes.size() - sizeof(std::uint64_t));
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + payload.size(), sizeof stored);
  if (stored != fnv1a64(payload)) fail(ErrorCode::ChecksumMismatch, "content checksum does not match");
  return payload;
}

}  // namespace detail

inline std::string serialize_codebook(const Codebook& cb) {
  std::string out = "FGCB";
  const auto words = static_cast<std::uint32_t>(words_for(cb.patch_size));
  detail::put(out, kCodebookVersion);
  detail::put(out, static_cast<std::uint32_t>(cb.size()));
  detail::put(out, static_cast<std::uint32_t>(cb.patch_size));
  detail::put(out, static_cast<std::uint32_t>(cb.patch_dim()));
  detail::put(out, static_cast<std::uint32_t>(cb.embedding.cols()));
  detail::put(out, words);
  detail::put(out, cb.theta_figure);
  detail::put(out, cb.theta_ground);
  for (const auto& c : cb.centroids)
    for (auto w : c.words) detail::put(out, w);
  for (auto f : cb.frequency) detail::put(out, f);
  for (int i = 0; i < cb.embedding.rows(); ++i)
    for (int j = 0; j < cb.embedding.cols(); ++j) detail::put(out, cb.embedding(i, j));
  for (int i = 0; i < cb.unembedding.rows(); ++i)
    for (int j = 0; j < cb.unembedding.cols(); ++j) detail::put(out, cb.unembedding(i, j));
  detail::put(out, fnv1a64(out));
  return out;
}

inline Codebook deserialize_codebook(std::string_view bytes) {
  const std::string_view payload = detail::verified_payload(bytes);
  if (payload.substr(0, 4) != "FGCB") fail(ErrorCode::VersionMismatch, "not a codebook file");
  detail::Reader rd(payload.substr(4));
  if (rd.get<std::uint32_t>() != kCodebookVersion) fail(ErrorCode::VersionMismatch, "unsupported codebook version");
  Codebook cb;
  const auto v = rd.get<std::uint32_t>();
  cb.patch_size = static_cast<int>(rd.get<std::uint32_t>());
  const auto patch_dim = rd.get<std::uint32_t>();
  const auto d = rd.get<std::uint32_t>();
  const auto words = rd.get<std::uint32_t>();
  if (patch_dim != static_cast<std::uint32_t>(cb.patch_dim()) || words != static_cast<std::uint32_t>(words_for(cb.patch_size)))
    fail(ErrorCode::VersionMismatch, "inconsistent codebook header");
  cb.theta_figure = rd.get<double>();
  cb.theta_ground = rd.get<double>();
  cb.centroids.resize(v);
  for (auto& c : cb.centroids) {
    c.words.resize(words);
    for (auto& w : c.words) w = rd.get<std::uint64_t>();
  }
  cb.frequency.resize(v);
  for (auto& f : cb.frequency) f = rd.get<std::uint64_t>();
  cb.embedding.resize(v, d);
  for (Eigen::Index i = 0; i < cb.embedding.rows(); ++i)
    for (Eigen::Index j = 0; j < cb.embedding.cols(); ++j) cb.embedding(i, j) = rd.get<float>();
  cb.unembedding.resize(d, v);
  for (Eigen::Index i = 0; i < cb.unembedding.rows(); ++i)
    for (Eigen::Index j = 0; j < cb.unembedding.cols(); ++j) cb.unembedding(i, j) = rd.get<float>();
  if (v >= 2) {
    try {
      std::tie(cb.figure_tokens, cb.ground_tokens) = target_sets(cb, cb.theta_figure, cb.theta_ground);
    } catch (const Error&) {
    }
  }
  return cb;
}

inline void save_codebook(const Codebook& cb, const std::string& path) { detail::write_file(path, serialize_codebook(cb)); }
inline Codebook load_codebook(const std::string& path) { return deserialize_codebook(detail::read_file(path)); }

}  // namespace figground
