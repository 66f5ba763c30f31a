#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cctype>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "figground/error.hpp"
#include "figground/rng.hpp"

namespace figground {

struct Point {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

using Polygon = std::vector<Point>;

/// z-component of (b - a) x (c - a).
inline double cross(const Point& a, const Point& b, const Point& c) {
  return (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
}

/// Signed shoelace area; positive for counterclockwise vertex order in a
/// y-up frame.
inline double signed_area(std::span<const Point> poly) {
  double acc = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Point& a = poly[i];
    const Point& b = poly[(i + 1) % poly.size()];
    acc += a.x * b.y - b.x * a.y;
  }
  return 0.5 * acc;
}

inline double area(std::span<const Point> poly) { return std::abs(signed_area(poly)); }

inline double perimeter(std::span<const Point> poly) {
  double acc = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Point& a = poly[i];
    const Point& b = poly[(i + 1) % poly.size()];
    acc += std::hypot(b.x - a.x, b.y - a.y);
  }
  return acc;
}

/// Indices of vertices whose turn direction disagrees with the polygon's
/// overall orientation.
inline std::vector<std::size_t> reflex_vertices(std::span<const Point> poly) {
  std::vector<std::size_t> out;
  const double orient = signed_area(poly) >= 0.0 ? 1.0 : -1.0;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double z = cross(poly[(i + n - 1) % n], poly[i], poly[(i + 1) % n]);
    if (z * orient < 0.0) out.push_back(i);
  }
  return out;
}

namespace detail {

inline bool segments_intersect(const Point& p1, const Point& p2, const Point& q1, const Point& q2) {
  const double d1 = cross(q1, q2, p1);
  const double d2 = cross(q1, q2, p2);
  const double d3 = cross(p1, p2, q1);
  const double d4 = cross(p1, p2, q2);
  return ((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0)) && d1 != 0 && d2 != 0 && d3 != 0 && d4 != 0;
}

}  // namespace detail

/// True when no two non-adjacent edges cross.
inline bool is_simple(std::span<const Point> poly) {
  const std::size_t n = poly.size();
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (j == i + 1 || (i == 0 && j == n - 1)) continue;
      if (detail::segments_intersect(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n])) return false;
    }
  }
  return true;
}

/// Andrew's monotone chain. Returns the hull counterclockwise, starting at the
/// lowest-x (then lowest-y) point, with collinear boundary points dropped.
inline Polygon convex_hull(std::span<const Point> points) {
  std::vector<Point> pts(points.begin(), points.end());
  std::sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) fail(ErrorCode::DegenerateInput, "convex hull needs at least three distinct points");

  Polygon hull(2 * pts.size());
  std::size_t k = 0;
  for (const Point& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0.0) --k;
    hull[k++] = p;
  }
  const std::size_t lower = k + 1;
  for (std::size_t i = pts.size() - 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0.0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  if (hull.size() < 3) fail(ErrorCode::DegenerateInput, "all points are collinear");
  return hull;
}

/// Inside-or-on test for a counterclockwise convex polygon, tolerance in
/// coordinate units.
inline bool convex_contains(std::span<const Point> hull, const Point& p, double eps = 1e-9) {
  const std::size_t n = hull.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Point& a = hull[i];
    const Point& b = hull[(i + 1) % n];
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    if (cross(a, b, p) < -eps * len) return false;
  }
  return true;
}

struct BinaryImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, 1 = foreground

  BinaryImage() = default;
  BinaryImage(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(pixels.begin(), pixels.end(), std::uint8_t{1})); }

  friend bool operator==(const BinaryImage&, const BinaryImage&) = default;
};

/// Scanline even-odd fill sampled at pixel centers. A center is foreground
/// when it falls in a half-open span [x_enter, x_exit) of the row; rows use the
/// same half-open rule on edge y-extents, so shared edges are never double-filled.
inline BinaryImage rasterize(std::span<const Point> poly, int width, int height) {
  if (width <= 0 || height <= 0) fail(ErrorCode::InvalidArgument, "raster dimensions must be positive");
  BinaryImage img(width, height);
  const std::size_t n = poly.size();
  if (n < 3) return img;
  std::vector<double> xs;
  for (int py = 0; py < height; ++py) {
    const double cy = py + 0.5;
    xs.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const Point& a = poly[i];
      const Point& b = poly[(i + 1) % n];
      if ((a.y > cy) != (b.y > cy)) xs.push_back(a.x + (cy - a.y) * (b.x - a.x) / (b.y - a.y));
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      // first center >= xs[k], last center < xs[k+1]
      const int x0 = std::max(0, static_cast<int>(std::ceil(xs[k] - 0.5)));
      const int x1 = std::min(width, static_cast<int>(std::ceil(xs[k + 1] - 0.5)));
      for (int px = x0; px < x1; ++px) img.at(px, py) = 1;
    }
  }
  return img;
}

struct DartShape {
  std::array<Point, 4> vertices{};
  int reflex_index = 0;
  std::uint64_t seed = 0;

  std::span<const Point> polygon() const { return vertices; }
  friend bool operator==(const DartShape&, const DartShape&) = default;
};

/// Sampling ranges for dart synthesis. Lengths are fractions of the frame size
/// so one set of defaults serves every resolution.
struct DartParams {
  int width = 64;
  int height = 64;
  double margin = 2.0;              // pixels kept clear at every border
  double scale_min = 0.28;          // circumradius of the base triangle / min(width, height)
  double scale_max = 0.45;
  double angle_jitter = 0.35;       // radians of perturbation of the triangle's vertex angles
  double depth_min = 0.35;          // notch depth: fraction of the way from an edge midpoint to the centroid
  double depth_max = 0.85;
  int max_retries = 1000;
};

inline void validate(const DartParams& p) {
  if (p.width <= 0 || p.height <= 0) fail(ErrorCode::InvalidArgument, "frame dimensions must be positive");
  if (!(p.scale_min > 0.0 && p.scale_min <= p.scale_max)) fail(ErrorCode::InvalidArgument, "scale range is empty");
  if (!(p.depth_min > 0.0 && p.depth_min <= p.depth_max && p.depth_max < 1.0))
    fail(ErrorCode::InvalidArgument, "depth range must lie in (0, 1)");
  if (p.angle_jitter < 0.0 || p.margin < 0.0 || p.max_retries < 1) fail(ErrorCode::InvalidArgument, "invalid dart parameters");
}

inline bool is_valid_dart(const DartShape& s, const DartParams& p) {
  for (const Point& v : s.vertices) {
    if (v.x < p.margin || v.x > p.width - p.margin || v.y < p.margin || v.y > p.height - p.margin) return false;
  }
  const auto reflex = reflex_vertices(s.vertices);
  return reflex.size() == 1 && static_cast<int>(reflex[0]) == s.reflex_index && is_simple(s.vertices) && area(s.vertices) > 1.0;
}

/// A triangle with one edge midpoint pulled toward the centroid; the pulled
/// point becomes the single reflex vertex. Output is counterclockwise.
inline DartShape generate_dart(std::uint64_t seed, const DartParams& params = {}) {
  validate(params);
  Rng rng = make_rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double frame = std::min(params.width, params.height);
  for (int attempt = 0; attempt < params.max_retries; ++attempt) {
    const double radius = frame * (params.scale_min + (params.scale_max - params.scale_min) * unit(rng));
    const double lo_x = params.margin + radius, hi_x = params.width - params.margin - radius;
    const double lo_y = params.margin + radius, hi_y = params.height - params.margin - radius;
    const double cx = lo_x <= hi_x ? lo_x + (hi_x - lo_x) * unit(rng) : 0.5 * params.width;
    const double cy = lo_y <= hi_y ? lo_y + (hi_y - lo_y) * unit(rng) : 0.5 * params.height;
    const double theta = 2.0 * std::numbers::pi * unit(rng);
    std::array<Point, 3> tri;
    for (int k = 0; k < 3; ++k) {
      const double jitter = k == 0 ? 0.0 : params.angle_jitter * (2.0 * unit(rng) - 1.0);
      const double a = theta + k * 2.0 * std::numbers::pi / 3.0 + jitter;
      tri[k] = {cx + radius * std::cos(a), cy + radius * std::sin(a)};
    }
    const int edge = static_cast<int>(unit(rng) * 3.0) % 3;
    const double depth = params.depth_min + (params.depth_max - params.depth_min) * unit(rng);

    const Point& a = tri[edge];
    const Point& b = tri[(edge + 1) % 3];
    const Point& c = tri[(edge + 2) % 3];
    const Point centroid{(a.x + b.x + c.x) / 3.0, (a.y + b.y + c.y) / 3.0};
    const Point mid{0.5 * (a.x + b.x), 0.5 * (a.y + b.y)};
    const Point notch{mid.x + depth * (centroid.x - mid.x), mid.y + depth * (centroid.y - mid.y)};

    DartShape shape;
    shape.vertices = {a, notch, b, c};
    shape.reflex_index = 1;
    shape.seed = seed;
    if (is_valid_dart(shape, params)) return shape;
  }
  fail(ErrorCode::RetryExhausted, "no valid dart within " + std::to_string(params.max_retries) + " attempts");
}

struct ConflictRegion {
  Polygon hull;
  std::vector<int> mask_patches;                        // ascending patch indices, row-major over the patch grid
  std::vector<std::pair<int, double>> coverage;         // every patch intersecting M, ascending index
  BinaryImage conflict;                                 // per-pixel hull AND NOT shape
};

/// Conflict mask M = hull(S) \ S at patch resolution.
inline ConflictRegion conflict_region(std::span<const Point> shape, int width, int height, int patch_size, double theta_mask) {
  if (patch_size <= 0 || width % patch_size != 0 || height % patch_size != 0)
    fail(ErrorCode::DimensionMismatch, "image dimensions must be divisible by the patch size");
  if (!(theta_mask > 0.0 && theta_mask <= 1.0)) fail(ErrorCode::InvalidArgument, "theta_mask must lie in (0, 1]");

  ConflictRegion region;
  region.hull = convex_hull(shape);
  const BinaryImage hull_raster = rasterize(region.hull, width, height);
  const BinaryImage shape_raster = rasterize(shape, width, height);
  region.conflict = BinaryImage(width, height);
  for (std::size_t i = 0; i < region.conflict.pixels.size(); ++i)
    region.conflict.pixels[i] = hull_raster.pixels[i] && !shape_raster.pixels[i];

  const int cols = width / patch_size;
  const int rows = height / patch_size;
  const double area_px = static_cast<double>(patch_size) * patch_size;
  for (int pr = 0; pr < rows; ++pr) {
    for (int pc = 0; pc < cols; ++pc) {
      int hits = 0;
      for (int y = pr * patch_size; y < (pr + 1) * patch_size; ++y)
        for (int x = pc * patch_size; x < (pc + 1) * patch_size; ++x) hits += region.conflict.at(x, y);
      if (hits == 0) continue;
      const int idx = pr * cols + pc;
      const double frac = hits / area_px;
      region.coverage.emplace_back(idx, frac);
      if (frac >= theta_mask) region.mask_patches.push_back(idx);
    }
  }
  if (region.mask_patches.empty()) fail(ErrorCode::EmptyConflict, "no patch reaches the mask coverage threshold");
  return region;
}

inline ConflictRegion conflict_region(const DartShape& shape, int width, int height, int patch_size, double theta_mask) {
  return conflict_region(shape.polygon(), width, height, patch_size, theta_mask);
}

/// Binary PGM (P5). Foreground is written black (0), background white (255).
inline std::string encode_pgm(const BinaryImage& img, std::string_view comment = {}) {
  std::string out = "P5\n";
  if (!comment.empty()) {
    out += "# ";
    out += comment;
    out += '\n';
  }
  out += std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  for (std::uint8_t p : img.pixels) out.push_back(static_cast<char>(p ? 0 : 255));
  return out;
}

inline BinaryImage decode_pgm(std::string_view data) {
  std::size_t pos = 0;
  auto next_token = [&]() {
    while (pos < data.size()) {
      if (data[pos] == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(data[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < data.size() && !std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
    return std::string(data.substr(start, pos - start));
  };
  if (next_token() != "P5") fail(ErrorCode::IoError, "not a binary PGM");
  const int w = std::stoi(next_token());
  const int h = std::stoi(next_token());
  const int maxval = std::stoi(next_token());
  if (maxval != 255 || w <= 0 || h <= 0) fail(ErrorCode::IoError, "unsupported PGM header");
  ++pos;  // single whitespace after maxval
  if (data.size() - pos < static_cast<std::size_t>(w) * h) fail(ErrorCode::IoError, "truncated PGM payload");
  BinaryImage img(w, h);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<unsigned char>(data[pos + i]) < 128 ? 1 : 0;
  return img;
}

}  // namespace figground
