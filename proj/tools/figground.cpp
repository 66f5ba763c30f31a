// Command-line driver for the experiment pipeline.

#include <csignal>
#include <iostream>

#include <CLI11.hpp>

#include "figground/harness.hpp"
#include "figground/service.hpp"

namespace fg = figground;

namespace {

httplib::Server* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

int report_error(std::string_view code, const std::string& message) {
  std::cerr << fg::json{{"error", std::string(code)}, {"message", message}}.dump() << std::endl;
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"figure/ground completion experiments on a toy masked-token transformer"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  std::string output;
  std::optional<std::uint64_t> seed;
  app.add_option("-c,--config", config_path, "JSON experiment config");
  app.add_option("-s,--set", overrides, "override a config value, e.g. train.steps=100")->allow_extra_args(false);
  app.add_option("-o,--output", output, "experiment directory");
  app.add_option("--seed", seed, "master seed");
  app.set_version_flag("--version", std::string(fg::kCodeVersion));

  auto* gen = app.add_subcommand("gen", "generate the dart corpus");
  auto* codebook = app.add_subcommand("build-codebook", "derive the patch codebook from the training corpus");
  auto* train = app.add_subcommand("train", "train or resume the model");
  bool resume = false;
  train->add_flag("--resume", resume, "continue from the checkpoint in the output directory");
  auto* attribute = app.add_subcommand("attribute", "direct logit attribution over a corpus slice");
  auto* sweep = app.add_subcommand("sweep", "activation-scaling sweep on one head");
  auto* serve = app.add_subcommand("serve", "run the HTTP service");
  auto* report = app.add_subcommand("report", "collect headline numbers into report.json");
  auto* show = app.add_subcommand("config", "print the effective config");

  CLI11_PARSE(app, argc, argv);

  try {
    // Base config: --config, else the one saved in the experiment directory.
    fg::json j = fg::ExperimentConfig{};
    const fg::fs::path saved = fg::fs::path(output.empty() ? j["output_dir"].get<std::string>() : output) / "config.json";
    if (!config_path.empty()) j.merge_patch(fg::read_json(config_path));
    else if (!*gen && fg::fs::exists(saved)) j.merge_patch(fg::read_json(saved));
    for (const auto& o : overrides) fg::apply_override(j, o);
    if (!output.empty()) j["output_dir"] = output;
    if (seed) j["seed"] = *seed;
    if (resume) j["train"]["resume"] = true;
    const fg::ExperimentConfig cfg = fg::config_from_json(j);

    if (*show) {
      std::cout << fg::json(cfg).dump(2) << "\n# config_hash " << fg::config_hash(cfg) << std::endl;
    } else if (*gen) {
      const auto r = fg::cmd_gen(cfg);
      fg::json stored = cfg;
      stored["train"]["resume"] = false;
      fg::write_text(fg::fs::path(cfg.output_dir) / "config.json", stored.dump(2) + "\n");
      std::cout << "wrote " << r.train << " training and " << r.heldout << " held-out stimuli to " << cfg.output_dir << "/corpus" << std::endl;
    } else if (*codebook) {
      const auto cb = fg::cmd_build_codebook(cfg);
      std::cout << "codebook: " << cb.size() << " tokens, " << cb.figure_tokens.size() << " figure, " << cb.ground_tokens.size() << " ground"
                << std::endl;
    } else if (*train) {
      const auto r = fg::cmd_train(cfg, &std::cout);
      std::cout << "trained to step " << r.steps << ", final loss " << fg::fmt9(r.final_loss);
      if (r.heldout_top1 >= 0) std::cout << ", held-out masked top-1 " << fg::fmt9(r.heldout_top1);
      std::cout << std::endl;
    } else if (*attribute) {
      const auto r = fg::cmd_attribute(cfg);
      std::cout << "attributed " << r.reports.size() << " stimuli; top head L" << r.top.layer << "H" << r.top.head << " (stability "
                << fg::fmt9(r.top.stability) << ")" << std::endl;
    } else if (*sweep) {
      const auto r = fg::cmd_sweep(cfg);
      std::cout << "swept L" << r.layer << "H" << r.head << " over " << r.alphas.size() << " alphas on " << r.trajectories.size()
                << " stimuli; aggregate flips: " << r.aggregate_flips.size() << std::endl;
    } else if (*serve) {
      fg::Service service(cfg);
      httplib::Server server;
      service.mount(server);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "listening on http://" << cfg.service.host << ":" << cfg.service.port << std::endl;
      if (!server.listen(cfg.service.host, cfg.service.port)) return report_error("IoError", "could not bind " + cfg.service.host);
    } else if (*report) {
      fg::cmd_report(cfg);
      std::cout << "wrote " << fg::RunPaths{cfg.output_dir}.report().string() << std::endl;
    }
  } catch (const fg::Error& e) {
    return report_error(fg::to_string(e.code()), e.what());
  } catch (const std::exception& e) {
    return report_error("Internal", e.what());
  }
  return 0;
}
