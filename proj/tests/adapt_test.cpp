// tests/adapt_test.cpp

// Copyright 2026  MT-KWS Authors

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#include "mtkws/adapt.hpp"

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace mtkws {
namespace {

struct AdaptFixture {
  test::TempDir dir{"adapt"};
  Manifest manifest;
  WaveformLookup lookup;
  BackboneConfig cfg;

  AdaptFixture() {
    manifest = generate_synthetic_corpus(4, 5, 0.25, 16000, 31, dir.path());
    lookup = manifest_waveform_lookup(manifest);
    cfg.input_dim = 40;
    cfg.model_dim = 16;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.ffn_dim = 32;
    cfg.conv_kernels = {3};
    cfg.dropout = 0.0;
    cfg.codebook_size = 8;
  }

  FewShotSubset subset(int shots, uint64_t seed = 77) {
    return sample_few_shot(manifest, shots, 1, seed)[0];
  }
};

TEST(BuildAdaptationExamples, CleanStrategyIsOneHot) {
  AdaptFixture fx;
  auto examples = build_adaptation_examples(fx.subset(3), fx.manifest, AdaptStrategy::kClean,
                                            1.0, 5, fx.lookup);
  EXPECT_EQ(examples.size(), 12u);  // 3 shots x 4 classes
  for (const auto& ex : examples) {
    EXPECT_DOUBLE_EQ(ex.label.sum(), 1.0);
    EXPECT_DOUBLE_EQ(ex.label.maxCoeff(), 1.0);
  }
}

TEST(BuildAdaptationExamples, MixupLambdaOneIsExactlyTheFirstSource) {
  Waveform a = test::sine_wave(0.3, 500.0, 0.05, 16000);
  Waveform b = test::sine_wave(0.2, 900.0, 0.05, 16000);
  Eigen::VectorXd ya = Eigen::VectorXd::Zero(4), yb = Eigen::VectorXd::Zero(4);
  ya(1) = 1.0;
  yb(3) = 1.0;
  AdaptExample ex = make_mixup_example(a, b, ya, yb, 1.0);
  ASSERT_EQ(ex.waveform.samples.size(), a.samples.size());
  for (size_t i = 0; i < a.samples.size(); ++i)
    EXPECT_EQ(ex.waveform.samples[i], a.samples[i]);
  EXPECT_EQ(ex.label, ya);
}

TEST(BuildAdaptationExamples, MixupLabelsSumToExactlyOne) {
  AdaptFixture fx;
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    auto examples = build_adaptation_examples(fx.subset(4), fx.manifest, AdaptStrategy::kMixup,
                                              1.0, seed, fx.lookup);
    EXPECT_EQ(examples.size(), 16u);
    for (const auto& ex : examples) EXPECT_EQ(ex.label.sum(), 1.0);  // exact
  }
}

TEST(BuildAdaptationExamples, MtMixesHaveDistinctClassesAndCleanHalf) {
  AdaptFixture fx;
  auto examples = build_adaptation_examples(fx.subset(3), fx.manifest, AdaptStrategy::kMt, 1.0,
                                            9, fx.lookup);
  ASSERT_EQ(examples.size(), 24u);  // 12 clean + 12 mixed
  size_t clean = 0, mixed = 0;
  for (const auto& ex : examples) {
    double sum = ex.label.sum();
    if (sum == 1.0) {
      ++clean;
    } else {
      EXPECT_DOUBLE_EQ(sum, 2.0);  // union labels of distinct classes
      ++mixed;
    }
  }
  EXPECT_EQ(clean, 12u);
  EXPECT_EQ(mixed, 12u);
}

TEST(BuildAdaptationExamples, MixingNeedsTwoRecords) {
  AdaptFixture fx;
  FewShotSubset tiny;
  tiny.shots = 1;
  tiny.repeat_index = 0;
  tiny.record_ids = {fx.manifest.records[0].id};
  EXPECT_THROW(build_adaptation_examples(tiny, fx.manifest, AdaptStrategy::kMt, 1.0, 1,
                                         fx.lookup),
               Error);
}

TEST(AdaptRun, BackboneIsBitIdenticalAfterTraining) {
  AdaptFixture fx;
  Backbone bb(fx.cfg, 2);
  uint64_t before = tensors_hash(bb.params.tensors());
  auto examples = build_adaptation_examples(fx.subset(2), fx.manifest, AdaptStrategy::kClean,
                                            1.0, 5, fx.lookup);
  AdaptConfig cfg;
  cfg.strategy = AdaptStrategy::kClean;
  cfg.shots = 2;
  cfg.epochs = 12;
  cfg.hidden_dim = 32;
  cfg.seed = 8;
  auto result = adapt_run(bb, examples, cfg);
  EXPECT_EQ(result.epoch_heads.size(), 12u);
  EXPECT_EQ(tensors_hash(bb.params.tensors()), before);
}

TEST(AdaptRun, OverfitsOneExample) {
  AdaptFixture fx;
  Backbone bb(fx.cfg, 2);
  auto examples = build_adaptation_examples(fx.subset(1), fx.manifest, AdaptStrategy::kClean,
                                            1.0, 5, fx.lookup);
  examples.resize(1);
  AdaptConfig cfg;
  cfg.strategy = AdaptStrategy::kClean;
  cfg.shots = 1;
  cfg.epochs = 400;
  cfg.hidden_dim = 32;
  cfg.learning_rate = 0.001;
  cfg.seed = 8;
  auto result = adapt_run(bb, examples, cfg);
  EXPECT_LT(result.epoch_losses.back(), 0.05);
}

TEST(AdaptRun, DeterministicGivenSeed) {
  AdaptFixture fx;
  Backbone bb(fx.cfg, 2);
  auto examples = build_adaptation_examples(fx.subset(2), fx.manifest, AdaptStrategy::kMt, 1.0,
                                            5, fx.lookup);
  AdaptConfig cfg;
  cfg.strategy = AdaptStrategy::kMt;
  cfg.shots = 2;
  cfg.epochs = 15;
  cfg.hidden_dim = 32;
  cfg.seed = 77;
  auto a = adapt_run(bb, examples, cfg);
  auto b = adapt_run(bb, examples, cfg);
  EXPECT_EQ(tensors_hash(a.epoch_heads.back().tensors()),
            tensors_hash(b.epoch_heads.back().tensors()));
}

TEST(AverageCheckpoints, IdenticalHeadsAverageToThemselves) {
  Rng rng(3);
  KwsHead head;
  head.init_random(8, 6, 4, rng);
  std::vector<KwsHead> heads(10, head);
  KwsHead avg = average_checkpoints(heads);
  auto near = [](const Matrix& a, const Matrix& b) {
    ASSERT_EQ(a.rows(), b.rows());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      for (Eigen::Index j = 0; j < a.cols(); ++j)
        EXPECT_LE(test::rel_err(a(i, j), b(i, j)), 1e-12);
  };
  near(avg.w1, head.w1);
  near(avg.b1, head.b1);
  near(avg.w2, head.w2);
  near(avg.b2, head.b2);
}

TEST(AverageCheckpoints, HandComputedMean) {
  KwsHead base;
  base.init_shapes(2, 2, 2);
  std::vector<KwsHead> heads(10, base);
  for (auto& h : heads) h.w1(0, 0) = 1.0;
  heads[0].w1(0, 0) = 0.0;
  heads[9].w1(0, 0) = 2.0;
  KwsHead avg = average_checkpoints(heads);
  EXPECT_DOUBLE_EQ(avg.w1(0, 0), 1.0);
}

TEST(AverageCheckpoints, MatchesScalarLoopOracle) {
  Rng rng(5);
  std::vector<KwsHead> heads;
  for (int i = 0; i < 13; ++i) {
    KwsHead h;
    h.init_random(5, 4, 3, rng);
    heads.push_back(std::move(h));
  }
  KwsHead avg = average_checkpoints(heads);  // averages the last 10
  for (Eigen::Index r = 0; r < avg.w1.rows(); ++r) {
    for (Eigen::Index c = 0; c < avg.w1.cols(); ++c) {
      double acc = 0.0;
      for (size_t i = 3; i < 13; ++i) acc += heads[i].w1(r, c);
      EXPECT_LE(test::rel_err(avg.w1(r, c), acc / 10.0), 1e-12);
    }
  }
}

TEST(AverageCheckpoints, PermutationInvariantWithinTolerance) {
  Rng rng(6);
  std::vector<KwsHead> heads;
  for (int i = 0; i < 10; ++i) {
    KwsHead h;
    h.init_random(4, 3, 2, rng);
    heads.push_back(std::move(h));
  }
  KwsHead fwd = average_checkpoints(heads);
  std::reverse(heads.begin(), heads.end());
  KwsHead rev = average_checkpoints(heads);
  for (Eigen::Index r = 0; r < fwd.w1.rows(); ++r)
    for (Eigen::Index c = 0; c < fwd.w1.cols(); ++c)
      EXPECT_LE(test::rel_err(fwd.w1(r, c), rev.w1(r, c)), 1e-12);
}

TEST(AverageCheckpoints, FewerThanTenRejected) {
  std::vector<KwsHead> heads(9);
  for (auto& h : heads) h.init_shapes(2, 2, 2);
  EXPECT_THROW(average_checkpoints(heads), Error);
}

TEST(ScoreUtterance, ZeroHeadGivesHalfEverywhere) {
  AdaptFixture fx;
  Backbone bb(fx.cfg, 2);
  KwsHead head;
  head.init_shapes(16, 8, 4);  // all-zero weights and biases
  Waveform w = fx.lookup(fx.manifest.records[0].id);
  Eigen::VectorXd scores = score_utterance(normalize_rms(w), bb, head);
  ASSERT_EQ(scores.size(), 4);
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(scores(i), 0.5);
}

TEST(ScoreUtterance, PoolingInvariantToFrameDuplication) {
  Rng rng(9);
  Matrix rows(6, 8);
  for (Eigen::Index i = 0; i < rows.rows(); ++i)
    for (Eigen::Index j = 0; j < rows.cols(); ++j) rows(i, j) = rng.normal();
  Matrix doubled(12, 8);
  doubled << rows, rows;
  KwsHead head;
  head.init_random(8, 6, 5, rng);
  Eigen::VectorXd a = score_pooled(pool_mean(rows), head);
  Eigen::VectorXd b = score_pooled(pool_mean(doubled), head);
  for (Eigen::Index i = 0; i < a.size(); ++i) EXPECT_NEAR(a(i), b(i), 1e-12);
}

TEST(ScoreUtterance, ScoresAlwaysInOpenUnitInterval) {
  AdaptFixture fx;
  Backbone bb(fx.cfg, 2);
  Rng rng(10);
  KwsHead head;
  head.init_random(16, 8, 4, rng);
  for (int i = 0; i < 5; ++i) {
    Waveform w = fx.lookup(fx.manifest.records[static_cast<size_t>(i)].id);
    Eigen::VectorXd scores = score_utterance(normalize_rms(w), bb, head);
    for (Eigen::Index c = 0; c < scores.size(); ++c) {
      EXPECT_GT(scores(c), 0.0);
      EXPECT_LT(scores(c), 1.0);
    }
  }
}

}  // namespace
}  // namespace mtkws
