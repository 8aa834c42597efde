// mtkws/pretrain.hpp

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
// Masked-prediction objectives over the unit codebook: single-label NLL on
// clean targets, multi-label BCE on n-hot targets, and the mixture-token
// baseline, plus the Adam training loop.

#ifndef MTKWS_PRETRAIN_HPP
#define MTKWS_PRETRAIN_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "mtkws/backbone.hpp"
#include "mtkws/common.hpp"
#include "mtkws/rng.hpp"
#include "mtkws/tokenizer.hpp"

namespace mtkws {

enum class PretrainMode { kCleanNll, kMtBce, kMpcNll };

inline const char* pretrain_mode_name(PretrainMode m) {
  switch (m) {
    case PretrainMode::kCleanNll: return "clean_nll";
    case PretrainMode::kMtBce: return "mt_bce";
    case PretrainMode::kMpcNll: return "mpc_nll";
  }
  return "?";
}

inline PretrainMode parse_pretrain_mode(const std::string& s) {
  if (s == "clean_nll") return PretrainMode::kCleanNll;
  if (s == "mt_bce") return PretrainMode::kMtBce;
  if (s == "mpc_nll") return PretrainMode::kMpcNll;
  raise(ErrorKind::kValidation, "unknown pretrain mode: " + s +
                                    " (expected clean_nll, mt_bce or mpc_nll)");
}

struct PretrainConfig {
  PretrainMode mode = PretrainMode::kMtBce;
  int steps = 2000;
  double learning_rate = 5e-4;
  int warmup_steps = 200;
  int batch_size = 16;
  int checkpoint_every = 500;
  uint64_t seed = 0;
};

struct LossValue {
  double total = 0.0;          // raw sum over masked frames, as in the objective
  int masked_frame_count = 0;

  double per_frame() const { return total / std::max(1, masked_frame_count); }
};

struct MaskSpec {
  double start_prob = 0.08;
  int span = 10;
};

// Each frame is independently a span start with probability start_prob; the
// spans are unioned and clipped to [0, T). An empty draw is retried a bounded
// number of times, then forced to a single random span.
inline std::vector<int> sample_mask(int t_len, double start_prob, int span, Rng& rng) {
  MTKWS_REQUIRE(t_len >= 1, ErrorKind::kPrecondition, "need at least one frame");
  MTKWS_REQUIRE(span >= 1, ErrorKind::kPrecondition, "span must be positive");
  constexpr int kMaxRetries = 16;
  std::vector<uint8_t> hit(static_cast<size_t>(t_len), 0);
  for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
    bool any = false;
    for (int t = 0; t < t_len; ++t) {
      if (rng.uniform() >= start_prob) continue;
      for (int j = t; j < std::min(t_len, t + span); ++j) hit[static_cast<size_t>(j)] = 1;
      any = true;
    }
    if (any) break;
  }
  std::vector<int> mask;
  for (int t = 0; t < t_len; ++t)
    if (hit[static_cast<size_t>(t)]) mask.push_back(t);
  if (mask.empty()) {
    int start = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(t_len)));
    for (int j = start; j < std::min(t_len, start + span); ++j) mask.push_back(j);
  }
  return mask;
}

namespace loss_detail {

constexpr double kLogClamp = 1e-12;

inline Matrix gather_rows(const Matrix& m, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

// Returns the raw-sum NLL over rows of `scores` and fills d_scores.
inline double nll_rows(const Matrix& scores, const std::vector<int>& targets, Matrix* d_scores) {
  double total = 0.0;
  if (d_scores) d_scores->resize(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const int z = targets[static_cast<size_t>(i)];
    MTKWS_REQUIRE(z >= 0 && z < scores.cols(), ErrorKind::kPrecondition,
                  "target token out of codebook range");
    double mx = scores.row(i).maxCoeff();
    Eigen::RowVectorXd e = (scores.row(i).array() - mx).exp();
    double sum = e.sum();
    total += std::log(sum) + mx - scores(i, z);
    if (d_scores) {
      d_scores->row(i) = e / sum;
      (*d_scores)(i, z) -= 1.0;
    }
  }
  return total;
}

// Raw-sum multi-label BCE per Eq.-4 conventions; log arguments clamped.
inline double bce_rows(const Matrix& scores,
                       const Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic>& targets,
                       Matrix* d_scores) {
  double total = 0.0;
  if (d_scores) d_scores->resize(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    for (Eigen::Index c = 0; c < scores.cols(); ++c) {
      const double p = 1.0 / (1.0 + std::exp(-scores(i, c)));
      const double z = targets(i, c) ? 1.0 : 0.0;
      total -= z * std::log(std::max(p, kLogClamp)) +
               (1.0 - z) * std::log(std::max(1.0 - p, kLogClamp));
      if (d_scores) (*d_scores)(i, c) = p - z;
    }
  }
  return total;
}

}  // namespace loss_detail

// L = -sum_{t in MSK} log p(z_t | o_t) with the Eq.-3 softmax posterior.
// Unmasked frames contribute nothing.
inline LossValue loss_clean_nll(const HiddenSequence& o, const TokenSequence& targets,
                                const PredictionHead& head) {
  MTKWS_REQUIRE(static_cast<Eigen::Index>(targets.tokens.size()) == o.vectors.rows(),
                ErrorKind::kPrecondition, "target length does not match frames");
  MTKWS_REQUIRE(!o.masked_positions.empty(), ErrorKind::kPrecondition,
                "no masked positions for the loss");
  Matrix rows = loss_detail::gather_rows(o.vectors, o.masked_positions);
  Matrix scores = unit_scores_all(rows, head);
  std::vector<int> z;
  z.reserve(o.masked_positions.size());
  for (int t : o.masked_positions) z.push_back(targets.tokens[static_cast<size_t>(t)]);
  LossValue lv;
  lv.total = loss_detail::nll_rows(scores, z, nullptr);
  lv.masked_frame_count = static_cast<int>(o.masked_positions.size());
  return lv;
}

// L = -sum_{t in MSK} sum_c [z log p + (1-z) log(1-p)], p per Eq. 5.
inline LossValue loss_mt_bce(const HiddenSequence& o, const NHotTargets& targets,
                             const PredictionHead& head) {
  MTKWS_REQUIRE(targets.bits.rows() == o.vectors.rows(), ErrorKind::kPrecondition,
                "target rows do not match frames");
  MTKWS_REQUIRE(targets.bits.cols() == head.unit_embeddings.rows(), ErrorKind::kPrecondition,
                "target width does not match the codebook");
  MTKWS_REQUIRE(!o.masked_positions.empty(), ErrorKind::kPrecondition,
                "no masked positions for the loss");
  Matrix rows = loss_detail::gather_rows(o.vectors, o.masked_positions);
  Matrix scores = unit_scores_all(rows, head);
  Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic> bits(
      static_cast<Eigen::Index>(o.masked_positions.size()), targets.bits.cols());
  for (size_t i = 0; i < o.masked_positions.size(); ++i)
    bits.row(static_cast<Eigen::Index>(i)) = targets.bits.row(o.masked_positions[i]);
  LossValue lv;
  lv.total = loss_detail::bce_rows(scores, bits, nullptr);
  lv.masked_frame_count = static_cast<int>(o.masked_positions.size());
  return lv;
}

// Same functional form as loss_clean_nll, with mixture-derived targets.
inline LossValue loss_mpc_nll(const HiddenSequence& o, const TokenSequence& mixture_targets,
                              const PredictionHead& head) {
  return loss_clean_nll(o, mixture_targets, head);
}

// Training-path loss: fills d_output (zero at unmasked rows) and accumulates
// head gradients. Targets beyond the masked set never touch the result.
struct PretrainTargets {
  // exactly one is used, depending on the mode
  TokenSequence tokens;
  NHotTargets nhot;
};

inline LossValue loss_backward(PretrainMode mode, const Matrix& output,
                               const std::vector<int>& mask, const PretrainTargets& targets,
                               const PredictionHead& head, Matrix& d_output,
                               PredictionHead& head_grads) {
  MTKWS_REQUIRE(!mask.empty(), ErrorKind::kPrecondition, "no masked positions for the loss");
  Matrix rows = loss_detail::gather_rows(output, mask);
  HeadScoreCache cache;
  Matrix scores = head_scores_forward(rows, head, cache);
  LossValue lv;
  lv.masked_frame_count = static_cast<int>(mask.size());
  Matrix d_scores;
  if (mode == PretrainMode::kMtBce) {
    Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic> bits(
        static_cast<Eigen::Index>(mask.size()), targets.nhot.bits.cols());
    for (size_t i = 0; i < mask.size(); ++i)
      bits.row(static_cast<Eigen::Index>(i)) = targets.nhot.bits.row(mask[i]);
    lv.total = loss_detail::bce_rows(scores, bits, &d_scores);
  } else {
    std::vector<int> z;
    z.reserve(mask.size());
    for (int t : mask) z.push_back(targets.tokens.tokens[static_cast<size_t>(t)]);
    lv.total = loss_detail::nll_rows(scores, z, &d_scores);
  }
  Matrix d_rows = head_scores_backward(d_scores, head, cache, head_grads);
  d_output = Matrix::Zero(output.rows(), output.cols());
  for (size_t i = 0; i < mask.size(); ++i)
    d_output.row(mask[i]) = d_rows.row(static_cast<Eigen::Index>(i));
  return lv;
}

// Adam over named tensor lists. Parameter and gradient lists must align.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<TensorRef> params, double beta1 = 0.9, double beta2 = 0.98,
                double eps = 1e-6)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.push_back(Matrix::Zero(p.tensor->rows(), p.tensor->cols()));
      v_.push_back(Matrix::Zero(p.tensor->rows(), p.tensor->cols()));
    }
  }

  void step(const std::vector<TensorRef>& grads, double lr) {
    MTKWS_REQUIRE(grads.size() == params_.size(), ErrorKind::kPrecondition,
                  "gradient/parameter list mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      const Matrix& g = *grads[i].tensor;
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
      Matrix mhat = m_[i] / bc1;
      Matrix vhat = v_[i] / bc2;
      *params_[i].tensor -=
          lr * mhat.cwiseQuotient(vhat.cwiseSqrt() + Matrix::Constant(vhat.rows(), vhat.cols(), eps_));
    }
  }

 private:
  std::vector<TensorRef> params_;
  double beta1_, beta2_, eps_;
  std::vector<Matrix> m_, v_;
  int64_t t_ = 0;
};

// Linear warmup to learning_rate, then linear decay to zero at `steps`.
inline double lr_schedule(const PretrainConfig& cfg, int step) {
  if (cfg.steps <= 0) return 0.0;
  if (step < cfg.warmup_steps)
    return cfg.learning_rate * static_cast<double>(step + 1) / cfg.warmup_steps;
  if (cfg.steps <= cfg.warmup_steps) return cfg.learning_rate;
  return cfg.learning_rate * static_cast<double>(cfg.steps - step) /
         static_cast<double>(cfg.steps - cfg.warmup_steps);
}

struct PretrainExample {
  std::string id;
  Matrix features;  // T x F
  PretrainTargets targets;
};

struct PretrainStepLog {
  int step;
  double loss;  // per-masked-frame
  int masked_frames;
  double lr;
};

struct PretrainRunResult {
  std::vector<PretrainStepLog> log;
  std::vector<int> checkpoint_steps;
};

// Runs the masked-prediction loop. Checkpoints: step 0 always, every
// checkpoint_every steps, and the final step. Deterministic given cfg.seed:
// batch order, masks and dropout all derive from it, and per-item gradients
// are reduced in slot order.
inline PretrainRunResult pretrain_run(
    const PretrainConfig& cfg, const std::vector<PretrainExample>& data, Backbone& backbone,
    PredictionHead& head,
    const std::function<void(int step)>& checkpoint_cb = {},
    const std::function<void(const PretrainStepLog&)>& log_cb = {}) {
  MTKWS_REQUIRE(!data.empty(), ErrorKind::kPrecondition, "empty pre-training dataset");
  for (const auto& ex : data) {
    if (cfg.mode == PretrainMode::kMtBce)
      MTKWS_REQUIRE(ex.targets.nhot.bits.rows() == ex.features.rows(), ErrorKind::kPrecondition,
                    "mode mt_bce requires n-hot targets for every example");
    else
      MTKWS_REQUIRE(static_cast<Eigen::Index>(ex.targets.tokens.tokens.size()) ==
                        ex.features.rows(),
                    ErrorKind::kPrecondition, "mode requires token targets for every example");
  }

  PretrainRunResult result;
  auto emit_checkpoint = [&](int step) {
    result.checkpoint_steps.push_back(step);
    if (checkpoint_cb) checkpoint_cb(step);
  };
  emit_checkpoint(0);
  if (cfg.steps == 0) return result;

  AdamOptimizer optimizer([&] {
    auto t = backbone.params.tensors();
    auto h = head.tensors();
    t.insert(t.end(), h.begin(), h.end());
    return t;
  }());

  BackboneParams grad_params;
  grad_params.init_shapes(backbone.config);
  PredictionHead grad_head;
  grad_head.init_shapes(backbone.config);

  const int batch = std::min<int>(cfg.batch_size, static_cast<int>(data.size()));
  std::vector<BackboneParams> slot_bgrads(static_cast<size_t>(batch));
  std::vector<PredictionHead> slot_hgrads(static_cast<size_t>(batch));
  std::vector<Matrix> slot_doutput(static_cast<size_t>(batch));
  std::vector<BackboneWorkspace> slot_ws(static_cast<size_t>(batch));
  std::vector<LossValue> slot_loss(static_cast<size_t>(batch));
  for (int s = 0; s < batch; ++s) {
    slot_bgrads[static_cast<size_t>(s)].init_shapes(backbone.config);
    slot_hgrads[static_cast<size_t>(s)].init_shapes(backbone.config);
  }

  Rng order_rng(derive_seed(cfg.seed, {UINT64_C(0x5b0d)}));
  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), size_t{0});
  size_t cursor = order.size();  // trigger a shuffle on first use
  MaskSpec mask_spec;

  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<size_t> items(static_cast<size_t>(batch));
    for (int s = 0; s < batch; ++s) {
      if (cursor >= order.size()) {
        order_rng.shuffle_prefix(order, order.size());
        cursor = 0;
      }
      items[static_cast<size_t>(s)] = order[cursor++];
    }

    parallel_for(static_cast<size_t>(batch), [&](size_t slot) {
      const auto& ex = data[items[slot]];
      Rng item_rng(derive_seed(cfg.seed, {UINT64_C(0x6d73), static_cast<uint64_t>(step), slot}));
      auto mask = sample_mask(static_cast<int>(ex.features.rows()), mask_spec.start_prob,
                              mask_spec.span, item_rng);
      slot_bgrads[slot].init_shapes(backbone.config);  // zero
      slot_hgrads[slot].init_shapes(backbone.config);
      Matrix output = backbone.forward(ex.features, mask, true, &item_rng, &slot_ws[slot]);
      slot_loss[slot] =
          loss_backward(cfg.mode, output, mask, ex.targets, head, slot_doutput[slot],
                        slot_hgrads[slot]);
      backbone.backward(slot_ws[slot], slot_doutput[slot], slot_bgrads[slot]);
    });

    double total_loss = 0.0;
    int total_masked = 0;
    for (int s = 0; s < batch; ++s) {
      total_loss += slot_loss[static_cast<size_t>(s)].total;
      total_masked += slot_loss[static_cast<size_t>(s)].masked_frame_count;
    }
    if (!std::isfinite(total_loss)) {
      std::string ids;
      for (size_t i : items) ids += (ids.empty() ? "" : ",") + data[i].id;
      raise(ErrorKind::kNumeric, "non-finite loss at step " + std::to_string(step) +
                                     " (batch: " + ids + ")");
    }

    // deterministic slot-order reduction, then per-masked-frame scaling
    grad_params.init_shapes(backbone.config);
    grad_head.init_shapes(backbone.config);
    auto accum = [](std::vector<TensorRef> dst, std::vector<TensorRef> src, double scale) {
      for (size_t i = 0; i < dst.size(); ++i) *dst[i].tensor += scale * *src[i].tensor;
    };
    const double inv_masked = 1.0 / static_cast<double>(std::max(1, total_masked));
    for (int s = 0; s < batch; ++s) {
      accum(grad_params.tensors(), slot_bgrads[static_cast<size_t>(s)].tensors(), inv_masked);
      accum(grad_head.tensors(), slot_hgrads[static_cast<size_t>(s)].tensors(), inv_masked);
    }

    const double lr = lr_schedule(cfg, step);
    auto grads = grad_params.tensors();
    auto hg = grad_head.tensors();
    grads.insert(grads.end(), hg.begin(), hg.end());
    optimizer.step(grads, lr);

    PretrainStepLog entry{step + 1, total_loss * inv_masked, total_masked, lr};
    result.log.push_back(entry);
    if (log_cb) log_cb(entry);
    const int done = step + 1;
    if ((cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.steps)
      if (result.checkpoint_steps.empty() || result.checkpoint_steps.back() != done)
        emit_checkpoint(done);
  }
  return result;
}

}  // namespace mtkws

#endif  // MTKWS_PRETRAIN_HPP
