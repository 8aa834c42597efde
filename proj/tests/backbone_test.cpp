// tests/backbone_test.cpp

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

#include "mtkws/backbone.hpp"

#include <gtest/gtest.h>

#include "mtkws/pretrain.hpp"
#include "test_util.hpp"

namespace mtkws {
namespace {

BackboneConfig small_config() {
  BackboneConfig cfg;
  cfg.input_dim = 4;
  cfg.model_dim = 8;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.ffn_dim = 16;
  cfg.conv_kernels = {3};
  cfg.dropout = 0.0;
  cfg.codebook_size = 5;
  cfg.temperature = 0.1;
  return cfg;
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

TEST(EncodeLocal, PreservesFrameCount) {
  Backbone bb(small_config(), 1);
  FeatureMatrix f;
  Rng rng(2);
  f.frames = random_matrix(98, 4, rng);
  HiddenSequence h = bb.encode_local(f);
  EXPECT_EQ(h.vectors.rows(), 98);
  EXPECT_EQ(h.vectors.cols(), 8);
}

TEST(EncodeLocal, ZeroParametersGiveZeroOutput) {
  BackboneConfig cfg = small_config();
  Backbone bb(cfg, 1);
  for (auto& w : bb.params.conv_w) w.setZero();
  for (auto& b : bb.params.conv_b) b.setZero();
  FeatureMatrix f;
  Rng rng(3);
  f.frames = random_matrix(12, 4, rng);
  HiddenSequence h = bb.encode_local(f);
  EXPECT_DOUBLE_EQ(h.vectors.cwiseAbs().maxCoeff(), 0.0);
}

// naive direct convolution with explicit loops, double accumulation
Matrix conv_oracle(const Matrix& x, const std::vector<Matrix>& weights,
                   const std::vector<Matrix>& biases, const std::vector<int>& kernels,
                   bool use_gelu) {
  Matrix cur = x;
  for (size_t l = 0; l < weights.size(); ++l) {
    const int k = kernels[l];
    const int pad = (k - 1) / 2;
    const Eigen::Index t_len = cur.rows(), in_ch = cur.cols();
    const Eigen::Index out_ch = weights[l].cols();
    Matrix next(t_len, out_ch);
    for (Eigen::Index t = 0; t < t_len; ++t) {
      for (Eigen::Index o = 0; o < out_ch; ++o) {
        double acc = biases[l](0, o);
        for (int j = 0; j < k; ++j) {
          Eigen::Index src = t + j - pad;
          if (src < 0 || src >= t_len) continue;
          for (Eigen::Index c = 0; c < in_ch; ++c)
            acc += cur(src, c) * weights[l](j * in_ch + c, o);
        }
        next(t, o) = use_gelu ? nn::gelu(acc) : acc;
      }
    }
    cur = next;
  }
  return cur;
}

TEST(EncodeLocal, MatchesDirectConvolutionOracle) {
  BackboneConfig cfg = small_config();
  cfg.conv_kernels = {3, 5};
  Backbone bb(cfg, 7);
  Rng rng(11);
  FeatureMatrix f;
  f.frames = random_matrix(17, 4, rng);
  HiddenSequence h = bb.encode_local(f);
  Matrix expect = conv_oracle(f.frames, bb.params.conv_w, bb.params.conv_b, cfg.conv_kernels,
                              cfg.conv_gelu);
  ASSERT_EQ(h.vectors.rows(), expect.rows());
  for (Eigen::Index i = 0; i < expect.rows(); ++i)
    for (Eigen::Index j = 0; j < expect.cols(); ++j)
      EXPECT_LE(test::rel_err(h.vectors(i, j), expect(i, j)), 1e-9);
}

TEST(ApplyMask, EmptyMaskIsIdentity) {
  Rng rng(5);
  HiddenSequence h;
  h.vectors = random_matrix(8, 8, rng);
  Matrix emb = random_matrix(1, 8, rng);
  HiddenSequence out = Backbone::apply_mask(h, {}, emb);
  EXPECT_EQ(out.vectors, h.vectors);
  EXPECT_TRUE(out.masked_positions.empty());
}

TEST(ApplyMask, FullMaskSaturates) {
  Rng rng(5);
  HiddenSequence h;
  h.vectors = random_matrix(6, 8, rng);
  Matrix emb = random_matrix(1, 8, rng);
  std::vector<int> all = {0, 1, 2, 3, 4, 5};
  HiddenSequence out = Backbone::apply_mask(h, all, emb);
  for (int t = 0; t < 6; ++t) EXPECT_EQ(out.vectors.row(t), emb.row(0));
}

TEST(ApplyMask, LocalityIsBitExact) {
  Rng rng(6);
  HiddenSequence h;
  h.vectors = random_matrix(8, 8, rng);
  Matrix emb = random_matrix(1, 8, rng);
  HiddenSequence out = Backbone::apply_mask(h, {2, 5}, emb);
  for (int t : {0, 1, 3, 4, 6, 7}) EXPECT_EQ(out.vectors.row(t), h.vectors.row(t));
  EXPECT_EQ(out.vectors.row(2), emb.row(0));
  EXPECT_EQ(out.vectors.row(5), emb.row(0));
  EXPECT_EQ(out.masked_positions, std::vector<int>({2, 5}));
}

TEST(ApplyMask, IdempotentForFixedMask) {
  Rng rng(7);
  HiddenSequence h;
  h.vectors = random_matrix(8, 8, rng);
  Matrix emb = random_matrix(1, 8, rng);
  HiddenSequence once = Backbone::apply_mask(h, {1, 4}, emb);
  HiddenSequence twice = Backbone::apply_mask(once, {1, 4}, emb);
  EXPECT_EQ(once.vectors, twice.vectors);
}

TEST(ApplyMask, OutOfRangeRejected) {
  HiddenSequence h;
  h.vectors = Matrix::Zero(4, 8);
  Matrix emb = Matrix::Zero(1, 8);
  EXPECT_THROW(Backbone::apply_mask(h, {4}, emb), Error);
}

TEST(EncodeContext, ZeroLayersIsIdentity) {
  BackboneConfig cfg = small_config();
  cfg.layers = 0;
  Backbone bb(cfg, 1);
  Rng rng(9);
  HiddenSequence h;
  h.vectors = random_matrix(10, 8, rng);
  HiddenSequence out = bb.encode_context(h);
  EXPECT_EQ(out.vectors, h.vectors);
}

// Independent single-token evaluation of one pre-norm encoder layer. With
// T = 1 the attention weights collapse to 1, so Z = V.
Eigen::RowVectorXd one_token_layer_oracle(const Eigen::RowVectorXd& x_with_pe,
                                          const EncoderLayerParams& p) {
  auto layer_norm_row = [](const Eigen::RowVectorXd& v, const Matrix& g, const Matrix& b) {
    double mu = v.mean();
    double var = (v.array() - mu).square().mean();
    Eigen::RowVectorXd xhat = (v.array() - mu) / std::sqrt(var + 1e-5);
    return (xhat.array() * g.row(0).array() + b.row(0).array()).matrix().eval();
  };
  Eigen::RowVectorXd y1 = layer_norm_row(x_with_pe, p.ln1_g, p.ln1_b);
  Eigen::RowVectorXd v = y1 * p.wv + p.bv.row(0);
  Eigen::RowVectorXd attn = v * p.wo + p.bo.row(0);
  Eigen::RowVectorXd x_mid = x_with_pe + attn;
  Eigen::RowVectorXd y2 = layer_norm_row(x_mid, p.ln2_g, p.ln2_b);
  Eigen::RowVectorXd pre = y2 * p.w1 + p.b1.row(0);
  Eigen::RowVectorXd act = pre.unaryExpr([](double t) { return nn::gelu(t); });
  return x_mid + act * p.w2 + p.b2.row(0);
}

TEST(EncodeContext, SingleTokenMatchesHandEvaluation) {
  BackboneConfig cfg = small_config();
  cfg.layers = 1;
  Backbone bb(cfg, 21);
  Rng rng(22);
  HiddenSequence h;
  h.vectors = random_matrix(1, 8, rng);
  HiddenSequence out = bb.encode_context(h);
  Eigen::RowVectorXd x = h.vectors.row(0) + sinusoidal_positions(1, 8).row(0);
  Eigen::RowVectorXd expect = one_token_layer_oracle(x, bb.params.layers[0]);
  for (Eigen::Index j = 0; j < 8; ++j)
    EXPECT_LE(test::rel_err(out.vectors(0, j), expect(j)), 1e-9) << j;
}

TEST(EncodeContext, PermutationEquivariantWithoutPositions) {
  BackboneConfig cfg = small_config();
  cfg.layers = 2;
  cfg.sinusoidal_positions = false;
  Backbone bb(cfg, 13);
  Rng rng(14);
  HiddenSequence h;
  h.vectors = random_matrix(3, 8, rng);
  HiddenSequence out = bb.encode_context(h);
  // permutation (2, 0, 1)
  std::vector<int> perm = {2, 0, 1};
  HiddenSequence hp;
  hp.vectors.resize(3, 8);
  for (int i = 0; i < 3; ++i) hp.vectors.row(i) = h.vectors.row(perm[static_cast<size_t>(i)]);
  HiddenSequence outp = bb.encode_context(hp);
  for (int i = 0; i < 3; ++i)
    for (Eigen::Index j = 0; j < 8; ++j)
      EXPECT_LE(test::rel_err(outp.vectors(i, j), out.vectors(perm[static_cast<size_t>(i)], j)),
                1e-9);
}

TEST(Composition, IdentityLocalAndZeroLayersIsIdentity) {
  BackboneConfig cfg;
  cfg.input_dim = 6;
  cfg.model_dim = 6;
  cfg.layers = 0;
  cfg.heads = 2;
  cfg.ffn_dim = 8;
  cfg.conv_kernels = {1};
  cfg.conv_gelu = false;
  cfg.dropout = 0.0;
  cfg.codebook_size = 4;
  Backbone bb(cfg, 1);
  bb.params.conv_w[0] = Matrix::Identity(6, 6);
  bb.params.conv_b[0].setZero();
  Rng rng(31);
  Matrix feats = random_matrix(9, 6, rng);
  Matrix out = bb.forward(feats, {}, false, nullptr, nullptr);
  EXPECT_EQ(out, feats);
}

TEST(UnitScores, ParallelVectorScoresOneOverTau) {
  PredictionHead head;
  head.projection = Matrix::Identity(4, 4);
  head.unit_embeddings = Matrix::Zero(3, 4);
  head.unit_embeddings.row(0) << 2, 0, 0, 0;   // parallel to probe
  head.unit_embeddings.row(1) << 0, 5, 0, 0;   // orthogonal
  head.unit_embeddings.row(2) << -1, 0, 0, 0;  // antiparallel
  head.temperature = 0.1;
  Eigen::VectorXd o(4);
  o << 3, 0, 0, 0;
  Eigen::VectorXd s = unit_scores(o, head);
  EXPECT_NEAR(s(0), 10.0, 1e-12);
  EXPECT_NEAR(s(1), 0.0, 1e-12);
  EXPECT_NEAR(s(2), -10.0, 1e-12);
}

TEST(UnitScores, MatchesHighPrecisionOracle) {
  Rng rng(41);
  for (int trial = 0; trial < 100; ++trial) {
    PredictionHead head;
    head.projection = random_matrix(3, 3, rng);
    head.unit_embeddings = random_matrix(4, 3, rng);
    head.temperature = 0.1;
    Eigen::VectorXd o = random_matrix(3, 1, rng).col(0);
    Eigen::VectorXd s = unit_scores(o, head);
    // scalar-loop oracle at long double
    long double u[3] = {0, 0, 0};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) u[i] += static_cast<long double>(head.projection(i, j)) * o(j);
    long double nu = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
    for (int c = 0; c < 4; ++c) {
      long double dot = 0, ne = 0;
      for (int j = 0; j < 3; ++j) {
        dot += u[j] * static_cast<long double>(head.unit_embeddings(c, j));
        ne += static_cast<long double>(head.unit_embeddings(c, j)) * head.unit_embeddings(c, j);
      }
      ne = std::sqrt(ne);
      long double expect = dot / (nu * ne) / 0.1L;
      EXPECT_LE(test::rel_err(s(c), static_cast<double>(expect)), 1e-9);
    }
  }
}

TEST(UnitScores, BoundedByInverseTemperature) {
  Rng rng(43);
  PredictionHead head;
  head.projection = random_matrix(6, 6, rng);
  head.unit_embeddings = random_matrix(9, 6, rng);
  head.temperature = 0.1;
  for (int trial = 0; trial < 200; ++trial) {
    Eigen::VectorXd o = random_matrix(6, 1, rng, 3.0).col(0);
    Eigen::VectorXd s = unit_scores(o, head);
    EXPECT_LE(s.cwiseAbs().maxCoeff(), 10.0 + 1e-9);
  }
}

TEST(UnitScores, ZeroProjectedVectorGivesZeroScores) {
  PredictionHead head;
  head.projection = Matrix::Zero(4, 4);
  head.unit_embeddings = Matrix::Ones(3, 4);
  head.temperature = 0.1;
  Eigen::VectorXd o = Eigen::VectorXd::Ones(4);
  Eigen::VectorXd s = unit_scores(o, head);
  EXPECT_DOUBLE_EQ(s.cwiseAbs().maxCoeff(), 0.0);
}

TEST(PosteriorSoftmax, EqualScoresAreUniform) {
  Eigen::VectorXd s(2);
  s << 3.7, 3.7;
  Eigen::VectorXd p = posterior_softmax(s);
  EXPECT_DOUBLE_EQ(p(0), 0.5);
  EXPECT_DOUBLE_EQ(p(1), 0.5);
}

TEST(PosteriorSoftmax, FrozenTwoClassValue) {
  Eigen::VectorXd s(2);
  s << 10.0, 0.0;
  Eigen::VectorXd p = posterior_softmax(s);
  EXPECT_NEAR(p(0), 0.9999546, 1e-7);
  EXPECT_NEAR(p(1), 0.0000454, 1e-7);
}

TEST(PosteriorSoftmax, NormalizesForArbitraryInputs) {
  Rng rng(51);
  for (int trial = 0; trial < 200; ++trial) {
    Eigen::VectorXd s = random_matrix(1 + rng.uniform_int(16), 1, rng, 20.0).col(0);
    Eigen::VectorXd p = posterior_softmax(s);
    EXPECT_NEAR(p.sum(), 1.0, 1e-6);
    EXPECT_GE(p.minCoeff(), 0.0);
  }
}

TEST(UnitSigmoid, KnownValues) {
  Eigen::VectorXd s(3);
  s << 0.0, 1.0, -1.0;
  Eigen::VectorXd p = unit_probability_sigmoid(s);
  EXPECT_DOUBLE_EQ(p(0), 0.5);
  EXPECT_NEAR(p(1), 0.7310586, 1e-7);
  EXPECT_NEAR(p(1) + p(2), 1.0, 1e-12);  // sigma(s) + sigma(-s) = 1
}

TEST(Checkpoint, BitExactRoundTrip) {
  test::TempDir dir("ckpt");
  BackboneConfig cfg = small_config();
  Backbone bb(cfg, 77);
  PredictionHead head;
  Rng rng(78);
  head.init_random(cfg, rng);
  auto tensors = bb.params.tensors();
  auto ht = head.tensors();
  tensors.insert(tensors.end(), ht.begin(), ht.end());
  save_checkpoint(dir.path() / "model.ckpt", cfg.serialize(), tensors);

  Backbone bb2(cfg, 1);  // different init
  PredictionHead head2;
  head2.init_random(cfg, rng);
  auto tensors2 = bb2.params.tensors();
  auto ht2 = head2.tensors();
  tensors2.insert(tensors2.end(), ht2.begin(), ht2.end());
  std::string cfg_text = load_checkpoint(dir.path() / "model.ckpt", tensors2);
  EXPECT_EQ(cfg_text, cfg.serialize());
  EXPECT_EQ(tensors_hash(tensors), tensors_hash(tensors2));
  BackboneConfig cfg2 = BackboneConfig::deserialize(cfg_text);
  EXPECT_EQ(cfg2.model_dim, cfg.model_dim);
  EXPECT_EQ(cfg2.conv_kernels, cfg.conv_kernels);
}

// Full-network Jacobian check: analytic gradients of a scalar loss through
// conv + mask + transformer + head vs central finite differences.
struct GradCheckSetup {
  BackboneConfig cfg = small_config();
  Backbone backbone{cfg, 5};
  PredictionHead head;
  Matrix features;
  std::vector<int> mask;
  PretrainTargets targets;

  explicit GradCheckSetup(PretrainMode mode, uint64_t seed) {
    Rng rng(seed);
    head.init_random(cfg, rng);
    features = random_matrix(6, cfg.input_dim, rng);
    mask = {1, 2, 4};
    if (mode == PretrainMode::kMtBce) {
      targets.nhot.bits.setZero(6, cfg.codebook_size);
      for (int t = 0; t < 6; ++t) {
        targets.nhot.bits(t, static_cast<Eigen::Index>(rng.uniform_int(5))) = 1;
        targets.nhot.bits(t, static_cast<Eigen::Index>(rng.uniform_int(5))) = 1;
      }
    } else {
      for (int t = 0; t < 6; ++t)
        targets.tokens.tokens.push_back(static_cast<int>(rng.uniform_int(5)));
    }
  }

  double loss(PretrainMode mode) {
    Matrix out = backbone.forward(features, mask, false, nullptr, nullptr);
    HiddenSequence h;
    h.vectors = out;
    h.masked_positions = mask;
    if (mode == PretrainMode::kMtBce) return loss_mt_bce(h, targets.nhot, head).total;
    return loss_clean_nll(h, targets.tokens, head).total;
  }
};

double gradient_check_max_err(PretrainMode mode, uint64_t seed) {
  GradCheckSetup setup(mode, seed);
  BackboneWorkspace ws;
  Matrix out = setup.backbone.forward(setup.features, setup.mask, false, nullptr, &ws);
  BackboneParams bgrads;
  bgrads.init_shapes(setup.cfg);
  PredictionHead hgrads;
  hgrads.init_shapes(setup.cfg);
  Matrix d_out;
  loss_backward(mode, out, setup.mask, setup.targets, setup.head, d_out, hgrads);
  setup.backbone.backward(ws, d_out, bgrads);

  auto params = setup.backbone.params.tensors();
  auto hp = setup.head.tensors();
  params.insert(params.end(), hp.begin(), hp.end());
  auto grads = bgrads.tensors();
  auto hg = hgrads.tensors();
  grads.insert(grads.end(), hg.begin(), hg.end());

  const double h = 1e-5;
  double max_err = 0.0;
  for (size_t p = 0; p < params.size(); ++p) {
    Matrix& tensor = *params[p].tensor;
    for (Eigen::Index i = 0; i < tensor.rows(); ++i) {
      for (Eigen::Index j = 0; j < tensor.cols(); ++j) {
        const double saved = tensor(i, j);
        tensor(i, j) = saved + h;
        double up = setup.loss(mode);
        tensor(i, j) = saved - h;
        double down = setup.loss(mode);
        tensor(i, j) = saved;
        double numeric = (up - down) / (2.0 * h);
        double analytic = (*grads[p].tensor)(i, j);
        max_err = std::max(max_err, test::rel_err(analytic, numeric));
      }
    }
  }
  return max_err;
}

TEST(GradientCheck, CleanNllThroughFullBackbone) {
  EXPECT_LT(gradient_check_max_err(PretrainMode::kCleanNll, 101), 1e-4);
}

TEST(GradientCheck, MtBceThroughFullBackbone) {
  EXPECT_LT(gradient_check_max_err(PretrainMode::kMtBce, 202), 1e-4);
}

}  // namespace
}  // namespace mtkws
