#include <gtest/gtest.h>

#include <charconv>
#include <map>

#include "run_fixture.hpp"
#include "support.hpp"

using namespace figground;
using figground::testing::lines_of;
using figground::testing::run_pipeline;
using figground::testing::slurp;
using figground::testing::small_run_config;
using figground::testing::temp_dir;

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  return out;
}

std::map<std::string, std::string> artifact_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
  return out;
}

class PipelineRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(temp_dir("pipeline"));
    run_pipeline(small_run_config(*dir_));
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static ExperimentConfig config() { return small_run_config(*dir_); }
  static RunPaths paths() { return RunPaths{*dir_}; }
  static fs::path* dir_;
};

fs::path* PipelineRun::dir_ = nullptr;

}  // namespace

TEST(Gen, SingleSampleWritesOneImageAndOneLine) {
  auto cfg = small_run_config(temp_dir("gen-one"));
  cfg.geometry.count = 1;
  cfg.geometry.heldout_count = 0;
  const auto r = cmd_gen(cfg);
  EXPECT_EQ(r.train, 1);
  const RunPaths paths{cfg.output_dir};
  int images = 0;
  for (const auto& e : fs::directory_iterator(paths.split_dir("train"))) images += e.path().extension() == ".pgm";
  EXPECT_EQ(images, 1);
  const auto lines = lines_of(paths.metadata("train"));
  ASSERT_EQ(lines.size(), 1u);
  const json meta = json::parse(lines[0]);
  EXPECT_EQ(meta.at("file").get<std::string>(), "000000.pgm");
  EXPECT_FALSE(meta.at("mask_patches").empty());
  // the image on disk decodes to the rasterized dart from the stored vertices
  const BinaryImage img = decode_pgm(slurp(paths.split_dir("train") / "000000.pgm"));
  std::vector<Point> verts;
  for (const auto& v : meta.at("vertices")) verts.push_back({v[0].get<double>(), v[1].get<double>()});
  EXPECT_EQ(img, rasterize(verts, 64, 64));
}

TEST(Gen, SeedsComeFromSplitSubstreams) {
  const auto cfg = small_run_config(temp_dir("gen-seeds"));
  cmd_gen(cfg);
  const auto train = load_stimuli(RunPaths{cfg.output_dir}, "train", cfg.geometry);
  const auto held = load_stimuli(RunPaths{cfg.output_dir}, "heldout", cfg.geometry);
  ASSERT_EQ(train.size(), 24u);
  ASSERT_EQ(held.size(), 4u);
  std::set<std::uint64_t> seeds;
  for (const auto& s : train) seeds.insert(s.seed);
  for (const auto& s : held) EXPECT_FALSE(seeds.count(s.seed));
  // every stored sample reproduces from its seed alone
  for (const auto& s : held) {
    const Stimulus again = make_stimulus(s.seed, cfg.geometry);
    EXPECT_EQ(again.image, s.image);
    EXPECT_EQ(again.region.mask_patches, s.region.mask_patches);
  }
}

TEST(Gen, NegativeCountRejected) {
  auto cfg = small_run_config(temp_dir("gen-bad"));
  cfg.geometry.count = -1;
  EXPECT_THROW(cmd_gen(cfg), Error);
}

TEST_F(PipelineRun, RerunIsByteIdentical) {
  const auto other = temp_dir("pipeline-again");
  run_pipeline(small_run_config(other));
  const auto a = artifact_bytes(*dir_);
  const auto b = artifact_bytes(other);
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [name, bytes] : a) {
    ASSERT_TRUE(b.count(name)) << name;
    EXPECT_TRUE(bytes == b.at(name)) << name;
  }
  EXPECT_GE(a.size(), 40u);
}

TEST_F(PipelineRun, ArtifactsCarryProvenance) {
  const auto cfg = config();
  const std::string hash = config_hash(cfg);
  for (const fs::path& csv : {paths().loss_csv(), paths().scores_csv(), paths().sweep_csv(), paths().sweep_aggregate_csv()})
    EXPECT_EQ(lines_of(csv).at(0), "# config_hash=" + hash + " code_version=" + std::string(kCodeVersion) + " seed=4242") << csv;
  for (const fs::path& j : {paths().train_metrics(), paths().attribution_summary(), paths().trajectory(), paths().report()})
    EXPECT_EQ(read_json(j).at("provenance").at("config_hash").get<std::string>(), hash) << j;
}

TEST_F(PipelineRun, LossCurveHasOneRowPerStep) {
  const auto rows = lines_of(paths().loss_csv());
  ASSERT_EQ(rows.size(), 2u + 12u);
  EXPECT_EQ(rows[1], "step,loss");
  for (int i = 0; i < 12; ++i) EXPECT_EQ(split_csv(rows[2 + i]).at(0), std::to_string(i));
}

TEST_F(PipelineRun, ZeroStepsLeavesInitialization) {
  auto cfg = config();
  const auto dir = temp_dir("zero-steps");
  fs::copy(*dir_, dir, fs::copy_options::recursive);
  cfg.output_dir = dir.string();
  cfg.train.steps = 0;
  cmd_train(cfg);
  const Codebook cb = load_codebook(RunPaths{dir}.codebook().string());
  const auto loaded = load_checkpoint<float>(RunPaths{dir}.checkpoint().string());
  EXPECT_TRUE(bitwise_equal(loaded, Parameters<float>::initialize(cfg.model_config(cb.size()), cb)));
  EXPECT_EQ(lines_of(RunPaths{dir}.loss_csv()).size(), 2u);
}

TEST_F(PipelineRun, ResumedTrainingMatchesUninterruptedRun) {
  auto cfg = config();
  const auto dir = temp_dir("resume");
  fs::copy(*dir_, dir, fs::copy_options::recursive);
  fs::remove(RunPaths{dir}.checkpoint());
  fs::remove(RunPaths{dir}.loss_csv());
  cfg.output_dir = dir.string();
  cfg.train.stop_after = 5;
  EXPECT_EQ(cmd_train(cfg).steps, 5u);
  EXPECT_EQ(lines_of(RunPaths{dir}.loss_csv()).size(), 2u + 5u);
  cfg.train.stop_after = 0;
  cfg.train.resume = true;
  EXPECT_EQ(cmd_train(cfg).steps, 12u);
  EXPECT_EQ(slurp(RunPaths{dir}.loss_csv()), slurp(paths().loss_csv()));
  EXPECT_EQ(slurp(RunPaths{dir}.checkpoint()), slurp(paths().checkpoint()));
  EXPECT_EQ(slurp(RunPaths{dir}.train_metrics()), slurp(paths().train_metrics()));
}

TEST_F(PipelineRun, ResumeRejectsDifferentModel) {
  auto cfg = config();
  const auto dir = temp_dir("resume-bad");
  fs::copy(*dir_, dir, fs::copy_options::recursive);
  cfg.output_dir = dir.string();
  cfg.train.resume = true;
  cfg.model.d_model = 32;
  try {
    cmd_train(cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::VersionMismatch);
  }
}

TEST_F(PipelineRun, EmptyAttributionSliceIsEmptyCorpus) {
  auto cfg = config();
  for (auto [begin, count] : {std::pair{0, 0}, std::pair{100, 4}}) {
    cfg.attribution.begin = begin;
    cfg.attribution.count = count;
    try {
      cmd_attribute(cfg);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::EmptyCorpus);
    }
  }
}

TEST_F(PipelineRun, ReportsSatisfyCompletenessWhenResummed) {
  const auto lines = lines_of(paths().reports_jsonl());
  ASSERT_EQ(lines.size(), 1u + 4u);
  EXPECT_TRUE(json::parse(lines[0]).contains("provenance"));
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const json r = json::parse(lines[i]);
    const json& s = r.at("scores");
    double sum = s.at("embed").get<double>();
    for (std::size_t l = 0; l < s.at("mlp").size(); ++l) {
      double heads = 0.0;
      for (const auto& h : s.at("heads")[l]) heads += h.get<double>();
      EXPECT_NEAR(heads, s.at("attention")[l].get<double>(), 1e-6);
      sum += heads + s.at("mlp")[l].get<double>();
    }
    const double total = s.at("total").get<double>();
    EXPECT_LE(std::abs(sum - total), 1e-4 * std::max(1.0, std::abs(total))) << "report " << i;
    EXPECT_EQ(r.at("ln_mode"), "frozen");
    EXPECT_EQ(r.at("positions").size(), r.at("per_position").size());
  }
}

TEST_F(PipelineRun, ScoresCsvAgreesWithReports) {
  const auto rows = lines_of(paths().scores_csv());
  const auto reports = lines_of(paths().reports_jsonl());
  // per sample: embed, (heads + mlp + attn + resid) per layer, total
  ASSERT_EQ(rows.size(), 2u + 4u * (1 + 2 * (2 + 3) + 1));
  std::map<int, double> totals;
  for (std::size_t i = 2; i < rows.size(); ++i) {
    const auto cells = split_csv(rows[i]);
    if (cells.at(2) == "total") totals[std::stoi(cells[0])] = std::stod(cells[3]);
  }
  ASSERT_EQ(totals.size(), 4u);
  int id = 0;
  for (std::size_t i = 1; i < reports.size(); ++i, ++id)
    EXPECT_NEAR(totals.at(id), json::parse(reports[i]).at("scores").at("total").get<double>(), 1e-8);
}

TEST_F(PipelineRun, SummaryTopHeadMatchesPerSampleMode) {
  const json s = read_json(paths().attribution_summary());
  std::map<std::pair<int, int>, int> votes;
  for (const auto& t : s.at("per_sample_top_head")) ++votes[{t[0].get<int>(), t[1].get<int>()}];
  int best = 0;
  for (const auto& [k, v] : votes) best = std::max(best, v);
  const auto top = s.at("top_head");
  EXPECT_EQ(votes[std::pair(top.at("layer").get<int>(), top.at("head").get<int>())], best);
  EXPECT_DOUBLE_EQ(top.at("stability").get<double>(), best / 4.0);
}

TEST_F(PipelineRun, FlipListMatchesCsvScan) {
  const json traj = read_json(paths().trajectory());
  const auto rows = lines_of(paths().sweep_csv());
  ASSERT_EQ(rows.size(), 2u + 2u * 41u);
  std::map<int, std::vector<std::pair<double, std::string>>> by_id;
  for (std::size_t i = 2; i < rows.size(); ++i) {
    const auto c = split_csv(rows[i]);
    by_id[std::stoi(c.at(0))].push_back({std::stod(c.at(1)), c.at(4)});
  }
  for (const auto& s : traj.at("stimuli")) {
    const auto& seq = by_id.at(s.at("id").get<int>());
    ASSERT_EQ(seq.size(), 41u);
    std::vector<std::pair<double, double>> scanned;
    for (std::size_t i = 1; i < seq.size(); ++i) {
      EXPECT_LT(seq[i - 1].first, seq[i].first);
      if (seq[i].second != seq[i - 1].second) scanned.push_back({seq[i - 1].first, seq[i].first});
    }
    const auto& flips = s.at("flips");
    ASSERT_EQ(flips.size(), scanned.size());
    for (std::size_t k = 0; k < scanned.size(); ++k) {
      EXPECT_DOUBLE_EQ(flips[k].at("alpha_from").get<double>(), scanned[k].first);
      EXPECT_DOUBLE_EQ(flips[k].at("alpha_to").get<double>(), scanned[k].second);
    }
  }
}

TEST_F(PipelineRun, SweepUnitAlphaReproducesBaseline) {
  const json traj = read_json(paths().trajectory());
  for (const auto& s : traj.at("stimuli")) {
    const auto& unit = s.at("entries")[30];
    EXPECT_EQ(unit.at("alpha").get<double>(), 1.0);
    EXPECT_EQ(unit.at("argmax_grid"), s.at("baseline").at("argmax_grid"));
    EXPECT_EQ(unit.at("s_convex"), s.at("baseline").at("point").at("s_convex"));
    EXPECT_EQ(unit.at("flipped_patch_count").get<int>(), 0);
  }
}

TEST_F(PipelineRun, SweepUsesTopHeadUnlessConfigured) {
  const json traj = read_json(paths().trajectory());
  const json top = read_json(paths().attribution_summary()).at("top_head");
  EXPECT_EQ(traj.at("layer"), top.at("layer"));
  EXPECT_EQ(traj.at("head"), top.at("head"));
  auto cfg = config();
  cfg.intervention.layer = 5;
  cfg.intervention.head = 0;
  const auto dir = temp_dir("sweep-bad");
  fs::copy(*dir_, dir, fs::copy_options::recursive);
  cfg.output_dir = dir.string();
  try {
    cmd_sweep(cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IndexOutOfRange);
  }
}

TEST_F(PipelineRun, ReportSummarizesArtifacts) {
  const json r = read_json(paths().report());
  EXPECT_EQ(r.at("sweep").at("alpha_points").get<int>(), 41);
  EXPECT_EQ(r.at("attribution").at("samples").get<int>(), 4);
  EXPECT_EQ(r.at("training").at("steps").get<int>(), 12);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(slurp(paths().checkpoint()))));
  EXPECT_EQ(r.at("artifacts").at("checkpoint.bin").get<std::string>(), buf);
}

TEST_F(PipelineRun, TamperedMetadataIsDetected) {
  auto cfg = config();
  const auto dir = temp_dir("tamper");
  fs::copy(*dir_, dir, fs::copy_options::recursive);
  cfg.output_dir = dir.string();
  auto lines = lines_of(RunPaths{dir}.metadata("heldout"));
  json first = json::parse(lines[0]);
  first["mask_patches"] = json::array({0});
  lines[0] = first.dump();
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  write_text(RunPaths{dir}.metadata("heldout"), text);
  try {
    cmd_attribute(cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvariantViolation);
  }
}
