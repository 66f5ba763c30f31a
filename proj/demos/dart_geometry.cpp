// Prints one dart stimulus as ASCII: '#' figure, '+' conflict pixels
// (inside the hull, outside the dart), '.' background. Masked patches are listed.
// Seeds whose notch is too shallow to mask any patch are skipped.

#include <cstdlib>
#include <iostream>

#include "figground/geometry.hpp"

int main(int argc, char** argv) {
  using namespace figground;
  std::uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 3;
  DartShape dart;
  ConflictRegion region;
  for (;; ++seed) {
    dart = generate_dart(seed);
    try {
      region = conflict_region(dart, 64, 64, 8, 0.5);
      break;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::EmptyConflict) throw;
    }
  }
  const BinaryImage shape = rasterize(dart.polygon(), 64, 64);
  const BinaryImage hull = rasterize(region.hull, 64, 64);

  std::cout << "seed " << seed << ", reflex vertex " << dart.reflex_index << "\n";
  for (int y = 0; y < 64; y += 2) {
    for (int x = 0; x < 64; ++x) std::cout << (shape.at(x, y) ? '#' : hull.at(x, y) ? '+' : '.');
    std::cout << "\n";
  }
  std::cout << "masked patches:";
  for (int p : region.mask_patches) std::cout << " " << p;
  std::cout << "\n";
}
