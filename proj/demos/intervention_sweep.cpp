// Sweeps one head of a trained run over the default alpha grid for a single
// held-out stimulus and prints the manifold trajectory.
//
//   figground gen -o run && figground build-codebook -o run && figground train -o run
//   intervention_sweep run 0 3 1

#include <cstdio>
#include <cstdlib>
#include <iostream>

#include "figground/harness.hpp"

int main(int argc, char** argv) {
  using namespace figground;
  if (argc < 5) {
    std::cerr << "usage: intervention_sweep <run-dir> <heldout-id> <layer> <head>\n";
    return 2;
  }
  try {
    ExperimentConfig cfg = config_from_json(read_json(fs::path(argv[1]) / "config.json"));
    cfg.output_dir = argv[1];
    const RunPaths paths{cfg.output_dir};
    const Stimulus s = load_stimuli(paths, "heldout", cfg.geometry, std::atoi(argv[2]), 1).at(0);
    const Codebook cb = load_codebook(paths.codebook().string());
    const auto params = load_checkpoint<float>(paths.checkpoint().string());
    const auto targets = idealized_targets(s.shape, s.region, cb, cfg.geometry.image_size, cfg.geometry.image_size);
    const auto traj = alpha_sweep(params, conflict_grid(s, cb), targets, std::atoi(argv[3]), std::atoi(argv[4]), default_alpha_grid());

    std::printf("%6s %10s %10s  %s\n", "alpha", "s_convex", "s_concave", "decision");
    for (const auto& e : traj.entries)
      std::printf("%6.1f %10.6f %10.6f  %s\n", e.point.alpha, e.point.s_convex, e.point.s_concave, std::string(to_string(e.point.decision)).c_str());
    for (const auto& f : traj.flips)
      std::printf("flip between %.1f and %.1f: %s -> %s\n", f.alpha_from, f.alpha_to, std::string(to_string(f.from)).c_str(),
                  std::string(to_string(f.to)).c_str());
  } catch (const Error& e) {
    std::cerr << to_string(e.code()) << ": " << e.what() << "\n";
    return 1;
  }
}
