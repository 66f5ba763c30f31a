#include <gtest/gtest.h>

#include "figground/checkpoint.hpp"
#include "figground/train.hpp"
#include "support.hpp"

using namespace figground;
using figground::testing::random_grid;
using figground::testing::tiny_config;

TEST(GradCheck, TinyModelBelowTolerance) {
  const auto cfg = tiny_config(2, 2, 8, 12, 16);
  const auto p = Parameters<double>::random(cfg, 21, 0.4);
  const auto g = random_grid(4, 12, 22, 0.5);
  const auto fine = grad_check(p, g, 1e-6);
  const auto coarse = grad_check(p, g, 1e-5);
  EXPECT_LT(fine.max_relative_error, 1e-4) << fine.worst_group;
  EXPECT_LT(coarse.max_relative_error, 1e-4) << coarse.worst_group;
  EXPECT_EQ(coarse.per_group.size(), fine.per_group.size());
  EXPECT_GT(coarse.per_group.size(), 20u);
}

TEST(GradCheck, NoMaskedPositionsGivesZeroGradient) {
  const auto cfg = tiny_config(2, 2, 8, 12, 16);
  const auto p = Parameters<double>::random(cfg, 1);
  auto g = random_grid(4, 12, 2);
  g.mask.assign(16, 0);
  auto grad = Parameters<double>::zeros(cfg);
  EXPECT_EQ(masked_loss_and_gradient(p, g, &grad), 0.0);
  grad.visit([](std::string_view, std::span<const double> s) {
    for (double v : s) EXPECT_EQ(v, 0.0);
  });
}

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  const auto cfg = tiny_config(1, 2, 8, 12, 16, Precision::F32);
  auto p = Parameters<float>::random(cfg, 3);
  const auto before = p;
  std::vector<TokenGrid> corpus{random_grid(4, 12, 1), random_grid(4, 12, 2)};
  TrainOptions opt;
  opt.steps = 5;
  opt.batch = 2;
  opt.adam.learning_rate = 0.0;
  auto st = AdamState<float>::zeros(cfg);
  const auto curve = train(p, st, corpus, opt);
  EXPECT_EQ(curve.size(), 5u);
  EXPECT_TRUE(bitwise_equal(p, before));
}

TEST(Train, MemorizesSmallCorpus) {
  const Codebook cb = figground::testing::small_codebook(50, 32, 8, 16);
  const auto images = figground::testing::dart_images(50, 32, 7);
  std::vector<TokenGrid> corpus;
  for (const auto& img : images) corpus.push_back(tokenize(img, cb));
  auto cfg = tiny_config(1, 2, 16, cb.size(), 16, Precision::F32);
  cfg.mlp_hidden = 64;
  auto p = Parameters<float>::initialize(cfg, cb);
  auto st = AdamState<float>::zeros(cfg);
  TrainOptions opt;
  opt.steps = 2000;
  opt.batch = 16;
  opt.adam.learning_rate = 3e-3;
  opt.seed = 5;
  // fixed evaluation masks
  std::vector<TokenGrid> eval = corpus;
  Rng rng = make_rng(9);
  for (auto& g : eval) random_mask(g, 0.4, rng);
  auto mean_loss = [&] {
    double s = 0.0;
    for (const auto& g : eval) s += masked_loss(p, g);
    return s / static_cast<double>(eval.size());
  };
  const double initial = mean_loss();
  train(p, st, corpus, opt);
  const double final_loss = mean_loss();
  EXPECT_LT(final_loss, 0.1 * initial) << "initial " << initial << " final " << final_loss;
}

TEST(Train, EmptyCorpusAndDivergence) {
  const auto cfg = tiny_config(1, 2, 8, 12, 16, Precision::F32);
  auto p = Parameters<float>::random(cfg, 3);
  auto st = AdamState<float>::zeros(cfg);
  TrainOptions opt;
  try {
    train(p, st, std::span<const TokenGrid>{}, opt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyCorpus);
  }
  std::vector<TokenGrid> corpus{random_grid(4, 12, 1)};
  opt.steps = 50;
  opt.batch = 1;
  opt.adam.learning_rate = std::numeric_limits<double>::infinity();
  try {
    train(p, st, corpus, opt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DivergenceDetected);
  }
}

TEST(Train, StoppedRunResumesOnTheSameStream) {
  const auto cfg = tiny_config(1, 2, 8, 12, 16, Precision::F32);
  std::vector<TokenGrid> corpus;
  for (int i = 0; i < 8; ++i) corpus.push_back(random_grid(4, 12, 40 + i));
  TrainOptions opt;
  opt.steps = 30;
  opt.batch = 3;
  opt.schedule = LrSchedule::Cosine;
  opt.warmup = 5;
  opt.seed = 77;

  auto full = Parameters<float>::random(cfg, 3);
  auto full_state = AdamState<float>::zeros(cfg);
  const auto full_curve = train(full, full_state, corpus, opt);

  auto part = Parameters<float>::random(cfg, 3);
  auto part_state = AdamState<float>::zeros(cfg);
  TrainOptions first = opt;
  first.stop_at = 12;
  auto curve = train(part, part_state, corpus, first);
  EXPECT_EQ(curve.size(), 12u);
  const auto restored = deserialize_checkpoint<float>(serialize_checkpoint(part, &part_state));
  part = restored.params;
  part_state = *restored.optimizer;
  const auto rest = train(part, part_state, corpus, opt);
  curve.insert(curve.end(), rest.begin(), rest.end());

  ASSERT_EQ(curve.size(), full_curve.size());
  for (std::size_t i = 0; i < curve.size(); ++i) {
    EXPECT_EQ(curve[i].step, full_curve[i].step);
    EXPECT_EQ(curve[i].loss, full_curve[i].loss);
  }
  EXPECT_TRUE(bitwise_equal(part, full));
}

TEST(Schedule, WarmupAndCosine) {
  TrainOptions opt;
  opt.steps = 100;
  opt.warmup = 10;
  opt.adam.learning_rate = 1.0;
  opt.schedule = LrSchedule::Cosine;
  EXPECT_NEAR(learning_rate_at(opt, 0), 0.1 * 1.0, 1e-12);
  EXPECT_NEAR(learning_rate_at(opt, 50), 0.5, 1e-12);
  EXPECT_LT(learning_rate_at(opt, 99), 1e-3);
  opt.schedule = LrSchedule::Constant;
  EXPECT_EQ(learning_rate_at(opt, 50), 1.0);
}

TEST(Masking, ExactFractionWithoutReplacement) {
  auto g = random_grid(8, 12, 1);
  Rng rng = make_rng(3);
  random_mask(g, 0.4, rng);
  EXPECT_EQ(g.masked_positions().size(), 26u);
  random_mask(g, 0.0, rng);
  EXPECT_EQ(g.masked_positions().size(), 1u);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto cfg = tiny_config(2, 2, 8, 12, 16);
  const auto p = Parameters<double>::random(cfg, 4);
  auto st = AdamState<double>::zeros(cfg);
  st.step = 17;
  st.m = Parameters<double>::random(cfg, 5);
  const std::string bytes = serialize_checkpoint(p, &st);
  const auto back = deserialize_checkpoint<double>(bytes);
  EXPECT_TRUE(bitwise_equal(back.params, p));
  ASSERT_TRUE(back.optimizer.has_value());
  EXPECT_EQ(back.optimizer->step, 17u);
  EXPECT_TRUE(bitwise_equal(back.optimizer->m, st.m));
  EXPECT_EQ(back.params.config, p.config);

  const auto dir = figground::testing::temp_dir("ckpt");
  save_checkpoint(p, (dir / "a.bin").string());
  EXPECT_TRUE(bitwise_equal(load_checkpoint<double>((dir / "a.bin").string()), p));
}

TEST(Checkpoint, TruncationIsDetected) {
  const auto cfg = tiny_config(1, 2, 8, 12, 16);
  const std::string bytes = serialize_checkpoint(Parameters<double>::random(cfg, 4));
  for (std::size_t cut : {std::size_t{1}, std::size_t{8}, bytes.size() / 2, bytes.size() - 4}) {
    try {
      deserialize_checkpoint<double>(std::string_view(bytes).substr(0, bytes.size() - cut));
      FAIL() << cut;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::ChecksumMismatch) << cut;
    }
  }
}

TEST(Checkpoint, PrecisionMismatchIsVersionError) {
  const auto cfg = tiny_config(1, 2, 8, 12, 16);
  const std::string bytes = serialize_checkpoint(Parameters<double>::random(cfg, 4));
  try {
    deserialize_checkpoint<float>(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::VersionMismatch);
  }
  EXPECT_EQ(peek_checkpoint_config(bytes).precision, Precision::F64);
}
