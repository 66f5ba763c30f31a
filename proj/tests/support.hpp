#pragma once

#include <algorithm>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "figground/geometry.hpp"
#include "figground/model.hpp"
#include "figground/rng.hpp"
#include "figground/tokenizer.hpp"

namespace figground::testing {

// Crossing-number point-in-polygon, written independently of rasterize().
inline bool inside_crossing(std::span<const Point> poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point& a = poly[i];
    const Point& b = poly[j];
    if ((a.y > y) != (b.y > y)) {
      const double xi = b.x + (y - b.y) / (a.y - b.y) * (a.x - b.x);
      if (x < xi) in = !in;
    }
  }
  return in;
}

inline BinaryImage raster_oracle(std::span<const Point> poly, int w, int h) {
  BinaryImage img(w, h);
  if (poly.size() < 3) return img;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) img.at(x, y) = inside_crossing(poly, x + 0.5, y + 0.5);
  return img;
}

inline double orient(const Point& a, const Point& b, const Point& c) { return (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x); }

inline bool strictly_inside_triangle(const Point& p, const Point& a, const Point& b, const Point& c) {
  const double d1 = orient(a, b, p), d2 = orient(b, c, p), d3 = orient(c, a, p);
  return (d1 > 0 && d2 > 0 && d3 > 0) || (d1 < 0 && d2 < 0 && d3 < 0);
}

inline bool on_open_segment(const Point& p, const Point& a, const Point& b) {
  if (orient(a, b, p) != 0.0) return false;
  return std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) && std::min(a.y, b.y) <= p.y && p.y <= std::max(a.y, b.y) && !(p == a) &&
         !(p == b);
}

/// Hull vertices by brute force: a point is extreme iff it is neither strictly
/// inside a triangle of other points nor on a segment between two others.
inline std::set<std::pair<double, double>> brute_hull(std::span<const Point> pts) {
  std::set<std::pair<double, double>> out;
  const std::size_t n = pts.size();
  for (std::size_t i = 0; i < n; ++i) {
    bool extreme = true;
    for (std::size_t a = 0; a < n && extreme; ++a)
      for (std::size_t b = a + 1; b < n && extreme; ++b) {
        if (a == i || b == i) continue;
        if (on_open_segment(pts[i], pts[a], pts[b])) extreme = false;
        for (std::size_t c = b + 1; c < n && extreme; ++c)
          if (c != i && strictly_inside_triangle(pts[i], pts[a], pts[b], pts[c])) extreme = false;
      }
    if (extreme) out.insert({pts[i].x, pts[i].y});
  }
  return out;
}

inline std::vector<BinaryImage> dart_images(int count, int size, std::uint64_t seed) {
  DartParams p;
  p.width = p.height = size;
  std::vector<BinaryImage> out;
  for (int i = 0; i < count; ++i) out.push_back(rasterize(generate_dart(substream_seed(seed, "test-darts", i), p).polygon(), size, size));
  return out;
}

inline Codebook small_codebook(int count = 60, int size = 32, int patch = 8, int dim = 16, int v_max = 1024, std::uint64_t seed = 7) {
  const auto images = dart_images(count, size, seed);
  CodebookOptions opt;
  opt.v_max = v_max;
  opt.patch_size = patch;
  opt.embedding_dim = dim;
  opt.seed = seed;
  return build_codebook(images, opt);
}

inline ModelConfig tiny_config(int layers, int heads, int d, int vocab, int positions, Precision prec = Precision::F64) {
  ModelConfig c;
  c.layers = layers;
  c.heads = heads;
  c.d_model = d;
  c.mlp_hidden = 2 * d;
  c.vocab = vocab;
  c.positions = positions;
  c.precision = prec;
  c.seed = 11;
  return c;
}

/// Random token grid with roughly `fraction` of positions masked.
inline TokenGrid random_grid(int side, int vocab, std::uint64_t seed, double fraction = 0.4) {
  Rng rng = make_rng(seed);
  std::uniform_int_distribution<int> tok(0, vocab - 1);
  std::bernoulli_distribution masked(fraction);
  TokenGrid g;
  g.rows = g.cols = side;
  g.tokens.resize(static_cast<std::size_t>(side) * side);
  g.mask.resize(g.tokens.size());
  for (auto& t : g.tokens) t = tok(rng);
  for (auto& m : g.mask) m = masked(rng);
  g.mask[0] = 1;
  return g;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("figground-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

template <typename T>
double max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  return static_cast<double>((a - b).cwiseAbs().maxCoeff());
}

}  // namespace figground::testing
