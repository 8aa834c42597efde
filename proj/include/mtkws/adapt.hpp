// mtkws/adapt.hpp

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
//
// Few-shot KWS adaptation: the backbone stays frozen; a two-layer head is
// trained with multi-label BCE on clean, mixup or MT-constructed examples.

#ifndef MTKWS_ADAPT_HPP
#define MTKWS_ADAPT_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "mtkws/backbone.hpp"
#include "mtkws/common.hpp"
#include "mtkws/corpus.hpp"
#include "mtkws/mixing.hpp"
#include "mtkws/pretrain.hpp"
#include "mtkws/rng.hpp"
#include "mtkws/tokenizer.hpp"

namespace mtkws {

enum class AdaptStrategy { kClean, kMixup, kMt };

inline const char* adapt_strategy_name(AdaptStrategy s) {
  switch (s) {
    case AdaptStrategy::kClean: return "clean";
    case AdaptStrategy::kMixup: return "mixup";
    case AdaptStrategy::kMt: return "mt";
  }
  return "?";
}

inline AdaptStrategy parse_adapt_strategy(const std::string& s) {
  if (s == "clean") return AdaptStrategy::kClean;
  if (s == "mixup") return AdaptStrategy::kMixup;
  if (s == "mt") return AdaptStrategy::kMt;
  raise(ErrorKind::kValidation, "unknown adaptation strategy: " + s +
                                    " (expected clean, mixup or mt)");
}

struct AdaptConfig {
  AdaptStrategy strategy = AdaptStrategy::kMt;
  int shots = 15;
  int repeats = 5;
  int epochs = 50;
  double learning_rate = 0.001;
  double mixup_alpha = 1.0;
  int hidden_dim = 256;
  int batch_size = 32;
  uint64_t seed = 0;
};

struct AdaptExample {
  Waveform waveform;
  Eigen::VectorXd label;  // K-dim, binary or soft
};

// lambda x_i + (1 - lambda) x_j with matching label interpolation; sources
// are truncated to the shorter one. Exposed so boundary draws are testable.
inline AdaptExample make_mixup_example(const Waveform& x_i, const Waveform& x_j,
                                       const Eigen::VectorXd& y_i, const Eigen::VectorXd& y_j,
                                       double lambda) {
  MTKWS_REQUIRE(lambda >= 0.0 && lambda <= 1.0, ErrorKind::kPrecondition,
                "mixup lambda must lie in [0, 1]");
  MTKWS_REQUIRE(x_i.sample_rate == x_j.sample_rate, ErrorKind::kIncompatibility,
                "sample-rate mismatch in mixup pair");
  AdaptExample ex;
  const double mu = 1.0 - lambda;
  const size_t n = std::min(x_i.samples.size(), x_j.samples.size());
  ex.waveform.sample_rate = x_i.sample_rate;
  ex.waveform.samples.resize(n);
  for (size_t t = 0; t < n; ++t)
    ex.waveform.samples[t] = lambda * x_i.samples[t] + mu * x_j.samples[t];
  ex.label = lambda * y_i + mu * y_j;
  return ex;
}

inline Eigen::VectorXd binary_to_vector(const std::vector<uint8_t>& bits) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(bits.size()));
  for (size_t i = 0; i < bits.size(); ++i) v(static_cast<Eigen::Index>(i)) = bits[i] ? 1.0 : 0.0;
  return v;
}

// Clean: the subset as-is with one-hot labels. Mixup: as many interpolated
// pairs as the subset has records, lambda ~ Beta(alpha, alpha) over
// RMS-normalized sources. MT: the clean examples plus an equal count of
// Eq.-1 2-mix examples with distinct keywords (clean fraction 0.5).
inline std::vector<AdaptExample> build_adaptation_examples(const FewShotSubset& subset,
                                                           const Manifest& manifest,
                                                           AdaptStrategy strategy,
                                                           double mixup_alpha, uint64_t seed,
                                                           const WaveformLookup& lookup) {
  const int k = manifest.num_keywords();
  const size_t n = subset.record_ids.size();
  MTKWS_REQUIRE(n >= 1, ErrorKind::kPrecondition, "empty few-shot subset");
  if (strategy != AdaptStrategy::kClean)
    MTKWS_REQUIRE(n >= 2, ErrorKind::kInsufficientData,
                  "mixing strategies need at least 2 subset records");

  std::vector<AdaptExample> out;
  Rng rng(derive_seed(seed, {UINT64_C(0xada7), static_cast<uint64_t>(subset.shots),
                             static_cast<uint64_t>(subset.repeat_index)}));

  auto clean_example = [&](const std::string& id) {
    AdaptExample ex;
    const auto& rec = manifest.by_id(id);
    ex.waveform = lookup(id);
    ex.label = binary_to_vector(one_hot(rec.keyword, k));
    return ex;
  };

  switch (strategy) {
    case AdaptStrategy::kClean: {
      for (const auto& id : subset.record_ids) out.push_back(clean_example(id));
      break;
    }
    case AdaptStrategy::kMixup: {
      for (size_t i = 0; i < n; ++i) {
        size_t a = rng.uniform_int(n);
        size_t b = rng.uniform_int(n - 1);
        if (b >= a) ++b;
        const auto& rec_a = manifest.by_id(subset.record_ids[a]);
        const auto& rec_b = manifest.by_id(subset.record_ids[b]);
        double lambda = rng.beta(mixup_alpha, mixup_alpha);
        out.push_back(make_mixup_example(normalize_rms(lookup(rec_a.id)),
                                         normalize_rms(lookup(rec_b.id)),
                                         binary_to_vector(one_hot(rec_a.keyword, k)),
                                         binary_to_vector(one_hot(rec_b.keyword, k)), lambda));
      }
      break;
    }
    case AdaptStrategy::kMt: {
      for (const auto& id : subset.record_ids) out.push_back(clean_example(id));
      // pairs with distinct keywords so every mixed label has popcount 2
      size_t made = 0, guard = 0;
      while (made < n) {
        MTKWS_REQUIRE(++guard < 100 * n + 100, ErrorKind::kInsufficientData,
                      "could not draw distinct-keyword pairs from the subset");
        size_t a = rng.uniform_int(n);
        size_t b = rng.uniform_int(n - 1);
        if (b >= a) ++b;
        const auto& rec_a = manifest.by_id(subset.record_ids[a]);
        const auto& rec_b = manifest.by_id(subset.record_ids[b]);
        if (rec_a.keyword == rec_b.keyword) continue;
        auto scales = sample_scales(2, rng);
        AdaptExample ex;
        ex.waveform = mix_waveforms(
            {normalize_rms(lookup(rec_a.id)), normalize_rms(lookup(rec_b.id))}, scales);
        for (double& s : ex.waveform.samples) s = std::clamp(s, -1.0, 1.0);
        ex.label = binary_to_vector(union_labels({one_hot(rec_a.keyword, k),
                                                  one_hot(rec_b.keyword, k)}));
        out.push_back(std::move(ex));
        ++made;
      }
      break;
    }
  }
  return out;
}

struct KwsHead {
  Matrix w1, b1;  // d x h, 1 x h
  Matrix w2, b2;  // h x K, 1 x K

  void init_shapes(int d, int h, int k) {
    w1 = Matrix::Zero(d, h);
    b1 = Matrix::Zero(1, h);
    w2 = Matrix::Zero(h, k);
    b2 = Matrix::Zero(1, k);
  }

  void init_random(int d, int h, int k, Rng& rng) {
    init_shapes(d, h, k);
    double s1 = std::sqrt(2.0 / d), s2 = std::sqrt(2.0 / h);
    for (Eigen::Index i = 0; i < w1.rows(); ++i)
      for (Eigen::Index j = 0; j < w1.cols(); ++j) w1(i, j) = s1 * rng.normal();
    for (Eigen::Index i = 0; i < w2.rows(); ++i)
      for (Eigen::Index j = 0; j < w2.cols(); ++j) w2(i, j) = s2 * rng.normal();
  }

  std::vector<TensorRef> tensors() {
    return {{"kws.w1", &w1}, {"kws.b1", &b1}, {"kws.w2", &w2}, {"kws.b2", &b2}};
  }

  std::string serialize_config() const {
    return "kws_head=1\nin_dim=" + std::to_string(w1.rows()) +
           "\nhidden=" + std::to_string(w1.cols()) + "\nclasses=" + std::to_string(w2.cols()) +
           "\n";
  }
};

inline Eigen::VectorXd pool_mean(const Matrix& rows) {
  MTKWS_REQUIRE(rows.rows() >= 1, ErrorKind::kPrecondition, "cannot pool zero frames");
  return rows.colwise().mean().transpose();
}

// pooled -> layer1 -> ReLU -> layer2 -> sigmoid.
inline Eigen::VectorXd score_pooled(const Eigen::VectorXd& pooled, const KwsHead& head) {
  Eigen::RowVectorXd h = pooled.transpose() * head.w1 + head.b1.row(0);
  h = h.cwiseMax(0.0);
  Eigen::RowVectorXd logits = h * head.w2 + head.b2.row(0);
  return logits.transpose().unaryExpr([](double s) { return 1.0 / (1.0 + std::exp(-s)); });
}

// Frozen-backbone embedding: features -> backbone (no masking, eval mode) ->
// mean-pool over frames.
inline Eigen::VectorXd embed_features(const Matrix& features, const Backbone& backbone) {
  BackboneWorkspace ws;
  Matrix out = backbone.forward(features, {}, false, nullptr, &ws);
  return pool_mean(out);
}

inline Eigen::VectorXd score_utterance(const Waveform& w, const Backbone& backbone,
                                       const KwsHead& head, const FeatureConfig& feat_cfg = {}) {
  FeatureMatrix f = extract_features(w, feat_cfg);
  return score_pooled(embed_features(f.frames, backbone), head);
}

struct AdaptRunResult {
  std::vector<KwsHead> epoch_heads;  // one per epoch
  std::vector<double> epoch_losses;  // mean per-example BCE
};

// Trains the head on cached pooled embeddings; the backbone is consulted
// read-only so its parameters are bitwise untouched. Minibatch Adam with a
// constant learning rate.
inline AdaptRunResult adapt_run(const Backbone& backbone, const std::vector<AdaptExample>& examples,
                                const AdaptConfig& cfg, const FeatureConfig& feat_cfg = {}) {
  MTKWS_REQUIRE(!examples.empty(), ErrorKind::kPrecondition, "no adaptation examples");
  const int k = static_cast<int>(examples[0].label.size());
  const int d = backbone.config.model_dim;
  const size_t n = examples.size();

  for (const auto& ex : examples)
    MTKWS_REQUIRE(static_cast<int>(ex.label.size()) == k, ErrorKind::kPrecondition,
                  "inconsistent label dimension");
  Matrix embeddings(static_cast<Eigen::Index>(n), d);
  Matrix labels(static_cast<Eigen::Index>(n), k);
  parallel_for(n, [&](size_t i) {
    FeatureMatrix f = extract_features(normalize_rms(examples[i].waveform), feat_cfg);
    embeddings.row(static_cast<Eigen::Index>(i)) = embed_features(f.frames, backbone).transpose();
    labels.row(static_cast<Eigen::Index>(i)) = examples[i].label.transpose();
  });

  Rng rng(derive_seed(cfg.seed, {UINT64_C(0xad09), static_cast<uint64_t>(cfg.shots)}));
  KwsHead head;
  head.init_random(d, cfg.hidden_dim, k, rng);
  KwsHead grads;
  grads.init_shapes(d, cfg.hidden_dim, k);
  AdamOptimizer optimizer(head.tensors());

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});

  AdaptRunResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle_prefix(order, order.size());
    double epoch_loss = 0.0;
    for (size_t start = 0; start < n; start += static_cast<size_t>(cfg.batch_size)) {
      const size_t stop = std::min(n, start + static_cast<size_t>(cfg.batch_size));
      const Eigen::Index b = static_cast<Eigen::Index>(stop - start);
      Matrix x(b, d), y(b, k);
      for (Eigen::Index i = 0; i < b; ++i) {
        x.row(i) = embeddings.row(static_cast<Eigen::Index>(order[start + i]));
        y.row(i) = labels.row(static_cast<Eigen::Index>(order[start + i]));
      }
      Matrix z1 = (x * head.w1).rowwise() + head.b1.row(0);
      Matrix a = z1.cwiseMax(0.0);
      Matrix z2 = (a * head.w2).rowwise() + head.b2.row(0);
      Matrix p = z2.unaryExpr([](double s) { return 1.0 / (1.0 + std::exp(-s)); });
      double loss = 0.0;
      for (Eigen::Index i = 0; i < b; ++i)
        for (Eigen::Index c = 0; c < k; ++c)
          loss -= y(i, c) * std::log(std::max(p(i, c), 1e-12)) +
                  (1.0 - y(i, c)) * std::log(std::max(1.0 - p(i, c), 1e-12));
      if (!std::isfinite(loss))
        raise(ErrorKind::kNumeric, "non-finite adaptation loss at epoch " +
                                       std::to_string(epoch));
      epoch_loss += loss;
      Matrix dz2 = (p - y) / static_cast<double>(b);
      grads.w2 = a.transpose() * dz2;
      grads.b2.row(0) = dz2.colwise().sum();
      Matrix da = dz2 * head.w2.transpose();
      Matrix dz1 = (z1.array() > 0.0).select(da, Matrix::Zero(b, cfg.hidden_dim));
      grads.w1 = x.transpose() * dz1;
      grads.b1.row(0) = dz1.colwise().sum();
      optimizer.step(grads.tensors(), cfg.learning_rate);
    }
    result.epoch_heads.push_back(head);
    result.epoch_losses.push_back(epoch_loss / (static_cast<double>(n) * k));
  }
  return result;
}

// Parameterwise arithmetic mean of the last 10 heads.
inline KwsHead average_checkpoints(const std::vector<KwsHead>& heads) {
  constexpr size_t kWindow = 10;
  MTKWS_REQUIRE(heads.size() >= kWindow, ErrorKind::kPrecondition,
                "checkpoint averaging needs at least 10 heads");
  KwsHead avg;
  avg.init_shapes(static_cast<int>(heads[0].w1.rows()), static_cast<int>(heads[0].w1.cols()),
                  static_cast<int>(heads[0].w2.cols()));
  const size_t first = heads.size() - kWindow;
  for (size_t i = first; i < heads.size(); ++i) {
    avg.w1 += heads[i].w1;
    avg.b1 += heads[i].b1;
    avg.w2 += heads[i].w2;
    avg.b2 += heads[i].b2;
  }
  const double inv = 1.0 / static_cast<double>(kWindow);
  avg.w1 *= inv;
  avg.b1 *= inv;
  avg.w2 *= inv;
  avg.b2 *= inv;
  return avg;
}

}  // namespace mtkws

#endif  // MTKWS_ADAPT_HPP
