// mtkws/backbone.hpp

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
// Frame-level encoder: stride-1 convolution stack, mask replacement, and a
// pre-norm transformer, plus the cosine-similarity unit-prediction head.
// Forward passes cache what the hand-written backward needs; everything is
// double precision so finite-difference checks are meaningful.

#ifndef MTKWS_BACKBONE_HPP
#define MTKWS_BACKBONE_HPP

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mtkws/common.hpp"
#include "mtkws/rng.hpp"
#include "mtkws/tokenizer.hpp"

namespace mtkws {

using Matrix = Eigen::MatrixXd;

struct BackboneConfig {
  int input_dim = 40;   // F
  int model_dim = 64;   // d
  int layers = 2;       // L
  int heads = 4;
  int ffn_dim = 128;
  std::vector<int> conv_kernels = {3, 3};  // stride 1, same padding, channels F->d->d
  bool conv_gelu = true;
  bool sinusoidal_positions = true;
  double dropout = 0.1;
  int codebook_size = 32;  // C
  double temperature = 0.1;

  int head_dim() const { return model_dim / heads; }

  void validate() const {
    MTKWS_REQUIRE(model_dim > 0 && heads > 0 && model_dim % heads == 0, ErrorKind::kValidation,
                  "model_dim must be a positive multiple of heads");
    MTKWS_REQUIRE(temperature > 0.0, ErrorKind::kValidation, "temperature must be positive");
    MTKWS_REQUIRE(codebook_size >= 2, ErrorKind::kValidation, "codebook_size must be >= 2");
    MTKWS_REQUIRE(dropout >= 0.0 && dropout < 1.0, ErrorKind::kValidation,
                  "dropout must lie in [0, 1)");
    MTKWS_REQUIRE(!conv_kernels.empty(), ErrorKind::kValidation, "need at least one conv layer");
    for (int k : conv_kernels)
      MTKWS_REQUIRE(k >= 1 && k % 2 == 1, ErrorKind::kValidation,
                    "conv kernels must be odd for same-padding stride-1 convs");
  }

  std::string serialize() const {
    std::string s;
    s += "input_dim=" + std::to_string(input_dim) + "\n";
    s += "model_dim=" + std::to_string(model_dim) + "\n";
    s += "layers=" + std::to_string(layers) + "\n";
    s += "heads=" + std::to_string(heads) + "\n";
    s += "ffn_dim=" + std::to_string(ffn_dim) + "\n";
    s += "conv_kernels=";
    for (size_t i = 0; i < conv_kernels.size(); ++i) {
      if (i) s += ',';
      s += std::to_string(conv_kernels[i]);
    }
    s += "\nconv_gelu=" + std::string(conv_gelu ? "1" : "0") + "\n";
    s += "sinusoidal_positions=" + std::string(sinusoidal_positions ? "1" : "0") + "\n";
    s += "dropout=" + format_double_exact(dropout) + "\n";
    s += "codebook_size=" + std::to_string(codebook_size) + "\n";
    s += "temperature=" + format_double_exact(temperature) + "\n";
    return s;
  }

  static BackboneConfig deserialize(const std::string& text) {
    BackboneConfig cfg;
    for (const auto& raw : split(text, '\n')) {
      std::string line = strip(raw);
      if (line.empty()) continue;
      auto pos = line.find('=');
      MTKWS_REQUIRE(pos != std::string::npos, ErrorKind::kValidation,
                    "bad backbone config line: " + line);
      std::string key = line.substr(0, pos), val = line.substr(pos + 1);
      if (key == "input_dim") cfg.input_dim = std::stoi(val);
      else if (key == "model_dim") cfg.model_dim = std::stoi(val);
      else if (key == "layers") cfg.layers = std::stoi(val);
      else if (key == "heads") cfg.heads = std::stoi(val);
      else if (key == "ffn_dim") cfg.ffn_dim = std::stoi(val);
      else if (key == "conv_kernels") {
        cfg.conv_kernels.clear();
        for (auto& k : split(val, ','))
          if (!k.empty()) cfg.conv_kernels.push_back(std::stoi(k));
      } else if (key == "conv_gelu") cfg.conv_gelu = val == "1";
      else if (key == "sinusoidal_positions") cfg.sinusoidal_positions = val == "1";
      else if (key == "dropout") cfg.dropout = std::stod(val);
      else if (key == "codebook_size") cfg.codebook_size = std::stoi(val);
      else if (key == "temperature") cfg.temperature = std::stod(val);
      else raise(ErrorKind::kValidation, "unknown backbone config key: " + key);
    }
    cfg.validate();
    return cfg;
  }
};

struct HiddenSequence {
  Matrix vectors;                   // T x d
  std::vector<int> masked_positions;  // sorted, subset of [0, T)
};

struct TensorRef {
  std::string name;
  Matrix* tensor;
};

namespace nn {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
  double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

inline Matrix gelu(const Matrix& x) { return x.unaryExpr([](double v) { return gelu(v); }); }

constexpr double kLnEps = 1e-5;

}  // namespace nn

struct LayerNormCache {
  Matrix xhat;              // T x d
  Eigen::VectorXd inv_std;  // T
};

inline Matrix layer_norm_forward(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                                 LayerNormCache& cache) {
  const Eigen::Index t_len = x.rows(), d = x.cols();
  cache.xhat.resize(t_len, d);
  cache.inv_std.resize(t_len);
  Matrix y(t_len, d);
  for (Eigen::Index t = 0; t < t_len; ++t) {
    double mu = x.row(t).mean();
    double var = (x.row(t).array() - mu).square().mean();
    double inv = 1.0 / std::sqrt(var + nn::kLnEps);
    cache.inv_std(t) = inv;
    cache.xhat.row(t) = (x.row(t).array() - mu) * inv;
    y.row(t) = cache.xhat.row(t).cwiseProduct(gamma.row(0)) + beta.row(0);
  }
  return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const LayerNormCache& cache,
                                  const Matrix& gamma, Matrix& dgamma, Matrix& dbeta) {
  const Eigen::Index t_len = dy.rows(), d = dy.cols();
  Matrix dx(t_len, d);
  for (Eigen::Index t = 0; t < t_len; ++t) {
    Eigen::RowVectorXd dxhat = dy.row(t).cwiseProduct(gamma.row(0));
    double m1 = dxhat.mean();
    double m2 = dxhat.cwiseProduct(cache.xhat.row(t)).mean();
    dx.row(t) =
        cache.inv_std(t) * (dxhat.array() - m1 - cache.xhat.row(t).array() * m2).matrix();
    dgamma.row(0) += dy.row(t).cwiseProduct(cache.xhat.row(t));
    dbeta.row(0) += dy.row(t);
  }
  return dx;
}

struct EncoderLayerParams {
  Matrix ln1_g, ln1_b;      // 1 x d
  Matrix wq, wk, wv, wo;    // d x d
  Matrix bq, bk, bv, bo;    // 1 x d
  Matrix ln2_g, ln2_b;      // 1 x d
  Matrix w1, b1;            // d x ff, 1 x ff
  Matrix w2, b2;            // ff x d, 1 x d
};

struct BackboneParams {
  std::vector<Matrix> conv_w;  // (k * in_ch) x out_ch
  std::vector<Matrix> conv_b;  // 1 x out_ch
  Matrix mask_embedding;       // 1 x d
  std::vector<EncoderLayerParams> layers;

  void init_shapes(const BackboneConfig& cfg) {
    conv_w.clear();
    conv_b.clear();
    int in_ch = cfg.input_dim;
    for (int k : cfg.conv_kernels) {
      conv_w.emplace_back(Matrix::Zero(k * in_ch, cfg.model_dim));
      conv_b.emplace_back(Matrix::Zero(1, cfg.model_dim));
      in_ch = cfg.model_dim;
    }
    mask_embedding = Matrix::Zero(1, cfg.model_dim);
    layers.assign(cfg.layers, {});
    for (auto& l : layers) {
      l.ln1_g = Matrix::Zero(1, cfg.model_dim);
      l.ln1_b = Matrix::Zero(1, cfg.model_dim);
      l.wq = l.wk = l.wv = l.wo = Matrix::Zero(cfg.model_dim, cfg.model_dim);
      l.bq = l.bk = l.bv = l.bo = Matrix::Zero(1, cfg.model_dim);
      l.ln2_g = Matrix::Zero(1, cfg.model_dim);
      l.ln2_b = Matrix::Zero(1, cfg.model_dim);
      l.w1 = Matrix::Zero(cfg.model_dim, cfg.ffn_dim);
      l.b1 = Matrix::Zero(1, cfg.ffn_dim);
      l.w2 = Matrix::Zero(cfg.ffn_dim, cfg.model_dim);
      l.b2 = Matrix::Zero(1, cfg.model_dim);
    }
  }

  void init_random(const BackboneConfig& cfg, Rng& rng) {
    init_shapes(cfg);
    auto fill = [&rng](Matrix& m, double std) {
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = std * rng.normal();
    };
    for (size_t l = 0; l < conv_w.size(); ++l)
      fill(conv_w[l], std::sqrt(2.0 / static_cast<double>(conv_w[l].rows())));
    fill(mask_embedding, 0.1);
    for (auto& l : layers) {
      l.ln1_g.setOnes();
      l.ln2_g.setOnes();
      double attn_std = std::sqrt(1.0 / cfg.model_dim);
      fill(l.wq, attn_std);
      fill(l.wk, attn_std);
      fill(l.wv, attn_std);
      fill(l.wo, attn_std);
      fill(l.w1, std::sqrt(2.0 / cfg.model_dim));
      fill(l.w2, std::sqrt(1.0 / cfg.ffn_dim));
    }
  }

  std::vector<TensorRef> tensors() {
    std::vector<TensorRef> out;
    for (size_t i = 0; i < conv_w.size(); ++i) {
      out.push_back({"conv." + std::to_string(i) + ".weight", &conv_w[i]});
      out.push_back({"conv." + std::to_string(i) + ".bias", &conv_b[i]});
    }
    out.push_back({"mask_embedding", &mask_embedding});
    for (size_t i = 0; i < layers.size(); ++i) {
      auto& l = layers[i];
      std::string p = "layer." + std::to_string(i) + ".";
      out.push_back({p + "ln1.gamma", &l.ln1_g});
      out.push_back({p + "ln1.beta", &l.ln1_b});
      out.push_back({p + "attn.wq", &l.wq});
      out.push_back({p + "attn.bq", &l.bq});
      out.push_back({p + "attn.wk", &l.wk});
      out.push_back({p + "attn.bk", &l.bk});
      out.push_back({p + "attn.wv", &l.wv});
      out.push_back({p + "attn.bv", &l.bv});
      out.push_back({p + "attn.wo", &l.wo});
      out.push_back({p + "attn.bo", &l.bo});
      out.push_back({p + "ln2.gamma", &l.ln2_g});
      out.push_back({p + "ln2.beta", &l.ln2_b});
      out.push_back({p + "ffn.w1", &l.w1});
      out.push_back({p + "ffn.b1", &l.b1});
      out.push_back({p + "ffn.w2", &l.w2});
      out.push_back({p + "ffn.b2", &l.b2});
    }
    return out;
  }
};

// Projection A plus unit embeddings e_c; scores are cosine(A o_t, e_c) / tau.
struct PredictionHead {
  Matrix projection;       // d x d
  Matrix unit_embeddings;  // C x d
  double temperature = 0.1;

  void init_shapes(const BackboneConfig& cfg) {
    projection = Matrix::Zero(cfg.model_dim, cfg.model_dim);
    unit_embeddings = Matrix::Zero(cfg.codebook_size, cfg.model_dim);
    temperature = cfg.temperature;
  }

  void init_random(const BackboneConfig& cfg, Rng& rng) {
    init_shapes(cfg);
    double std = std::sqrt(1.0 / cfg.model_dim);
    for (Eigen::Index i = 0; i < projection.rows(); ++i)
      for (Eigen::Index j = 0; j < projection.cols(); ++j) projection(i, j) = std * rng.normal();
    for (Eigen::Index i = 0; i < unit_embeddings.rows(); ++i)
      for (Eigen::Index j = 0; j < unit_embeddings.cols(); ++j)
        unit_embeddings(i, j) = rng.normal();
  }

  std::vector<TensorRef> tensors() {
    return {{"head.projection", &projection}, {"head.unit_embeddings", &unit_embeddings}};
  }
};

struct LayerCache {
  Matrix x_in;   // T x d, layer input
  LayerNormCache ln1;
  Matrix q, k, v;             // T x d
  std::vector<Matrix> probs;  // per-head T x T attention rows
  Matrix z;                   // T x d, concatenated head outputs
  Matrix drop_attn;           // dropout mask (scaled) or empty
  Matrix x_mid;               // x_in + attention branch
  LayerNormCache ln2;
  Matrix ffn_pre;             // T x ff, pre-activation
  Matrix ffn_act;             // T x ff
  Matrix drop_ffn;
};

struct BackboneWorkspace {
  std::vector<Matrix> conv_in;   // input of each conv layer (unpadded)
  std::vector<Matrix> conv_pre;  // pre-activation conv outputs
  Matrix h_local;                // conv stack output
  std::vector<int> mask;
  Matrix stack_in;               // masked + positions (+ input dropout)
  Matrix drop_in;
  std::vector<LayerCache> layer_caches;
  Matrix output;
};

inline Matrix sinusoidal_positions(Eigen::Index t_len, Eigen::Index d) {
  Matrix pe(t_len, d);
  for (Eigen::Index t = 0; t < t_len; ++t) {
    for (Eigen::Index i = 0; i < d; i += 2) {
      double angle = static_cast<double>(t) /
                     std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      pe(t, i) = std::sin(angle);
      if (i + 1 < d) pe(t, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

class Backbone {
 public:
  BackboneConfig config;
  BackboneParams params;

  Backbone() = default;
  Backbone(const BackboneConfig& cfg, uint64_t seed) : config(cfg) {
    cfg.validate();
    Rng rng(derive_seed(seed, {UINT64_C(0xb0b0)}));
    params.init_random(cfg, rng);
  }

  // Stride-1 same-padding convolution stack; frame count is preserved.
  HiddenSequence encode_local(const FeatureMatrix& features) const {
    BackboneWorkspace ws;
    HiddenSequence h;
    h.vectors = conv_forward(features.frames, &ws);
    return h;
  }

  // Masked rows are replaced by the learned mask embedding.
  static HiddenSequence apply_mask(const HiddenSequence& h, const std::vector<int>& mask,
                                   const Matrix& mask_embedding) {
    for (int idx : mask)
      MTKWS_REQUIRE(idx >= 0 && idx < h.vectors.rows(), ErrorKind::kPrecondition,
                    "mask index out of range");
    HiddenSequence out;
    out.vectors = h.vectors;
    out.masked_positions = mask;
    std::sort(out.masked_positions.begin(), out.masked_positions.end());
    for (int idx : out.masked_positions) out.vectors.row(idx) = mask_embedding.row(0);
    return out;
  }

  // Pre-norm transformer stack with full bidirectional attention. L = 0 is
  // the identity (no positions are added either).
  HiddenSequence encode_context(const HiddenSequence& h_m) const {
    MTKWS_REQUIRE(h_m.vectors.cols() == config.model_dim, ErrorKind::kPrecondition,
                  "hidden dimension mismatch");
    HiddenSequence out;
    out.masked_positions = h_m.masked_positions;
    if (config.layers == 0) {
      out.vectors = h_m.vectors;
      return out;
    }
    BackboneWorkspace ws;
    out.vectors = context_forward(h_m.vectors, false, nullptr, &ws);
    return out;
  }

  // Full training-path forward: conv -> mask -> positions -> transformer.
  Matrix forward(const Matrix& features, const std::vector<int>& mask, bool training, Rng* rng,
                 BackboneWorkspace* ws) const {
    BackboneWorkspace local;
    BackboneWorkspace& w = ws ? *ws : local;
    w.mask = mask;
    std::sort(w.mask.begin(), w.mask.end());
    w.h_local = conv_forward(features, &w);
    Matrix h = w.h_local;
    for (int idx : w.mask) {
      MTKWS_REQUIRE(idx >= 0 && idx < h.rows(), ErrorKind::kPrecondition,
                    "mask index out of range");
      h.row(idx) = params.mask_embedding.row(0);
    }
    if (config.layers == 0) {
      w.stack_in = h;
      w.output = h;
      return w.output;
    }
    w.output = context_forward(h, training, rng, &w);
    return w.output;
  }

  // Accumulates parameter gradients into `grads` (same shapes as params).
  void backward(const BackboneWorkspace& ws, const Matrix& d_output,
                BackboneParams& grads) const {
    Matrix dx = d_output;
    if (config.layers > 0) {
      for (int l = config.layers - 1; l >= 0; --l)
        dx = layer_backward(ws.layer_caches[static_cast<size_t>(l)],
                            params.layers[static_cast<size_t>(l)], dx,
                            grads.layers[static_cast<size_t>(l)]);
      if (ws.drop_in.size() > 0) dx = dx.cwiseProduct(ws.drop_in);
    }
    // mask replacement: masked rows feed the mask embedding, not the convs
    for (int idx : ws.mask) {
      grads.mask_embedding.row(0) += dx.row(idx);
      dx.row(idx).setZero();
    }
    conv_backward(ws, dx, grads);
  }

 private:
  Matrix conv_forward(const Matrix& input, BackboneWorkspace* ws) const {
    MTKWS_REQUIRE(input.cols() == config.input_dim, ErrorKind::kPrecondition,
                  "feature dimension does not match backbone input_dim");
    MTKWS_REQUIRE(input.rows() >= 1, ErrorKind::kPrecondition, "empty feature matrix");
    Matrix x = input;
    if (ws) {
      ws->conv_in.clear();
      ws->conv_pre.clear();
    }
    for (size_t l = 0; l < params.conv_w.size(); ++l) {
      const int k = config.conv_kernels[l];
      const int pad = (k - 1) / 2;
      const Eigen::Index t_len = x.rows(), in_ch = x.cols();
      const Eigen::Index out_ch = params.conv_w[l].cols();
      Matrix padded = Matrix::Zero(t_len + k - 1, in_ch);
      padded.middleRows(pad, t_len) = x;
      Matrix pre = Matrix::Zero(t_len, out_ch);
      for (int j = 0; j < k; ++j)
        pre.noalias() += padded.middleRows(j, t_len) * params.conv_w[l].middleRows(j * in_ch, in_ch);
      pre.rowwise() += params.conv_b[l].row(0);
      if (ws) {
        ws->conv_in.push_back(std::move(x));
        ws->conv_pre.push_back(pre);
      }
      x = config.conv_gelu ? nn::gelu(pre) : pre;
    }
    return x;
  }

  void conv_backward(const BackboneWorkspace& ws, const Matrix& d_out,
                     BackboneParams& grads) const {
    Matrix dx = d_out;
    for (int l = static_cast<int>(params.conv_w.size()) - 1; l >= 0; --l) {
      const auto& pre = ws.conv_pre[static_cast<size_t>(l)];
      const auto& x_in = ws.conv_in[static_cast<size_t>(l)];
      Matrix dpre = dx;
      if (config.conv_gelu) {
        for (Eigen::Index i = 0; i < dpre.rows(); ++i)
          for (Eigen::Index j = 0; j < dpre.cols(); ++j)
            dpre(i, j) *= nn::gelu_grad(pre(i, j));
      }
      const int k = config.conv_kernels[static_cast<size_t>(l)];
      const int pad = (k - 1) / 2;
      const Eigen::Index t_len = x_in.rows(), in_ch = x_in.cols();
      Matrix padded = Matrix::Zero(t_len + k - 1, in_ch);
      padded.middleRows(pad, t_len) = x_in;
      grads.conv_b[static_cast<size_t>(l)].row(0) += dpre.colwise().sum();
      Matrix dpadded = Matrix::Zero(t_len + k - 1, in_ch);
      for (int j = 0; j < k; ++j) {
        grads.conv_w[static_cast<size_t>(l)].middleRows(j * in_ch, in_ch).noalias() +=
            padded.middleRows(j, t_len).transpose() * dpre;
        dpadded.middleRows(j, t_len).noalias() +=
            dpre * params.conv_w[static_cast<size_t>(l)].middleRows(j * in_ch, in_ch).transpose();
      }
      dx = dpadded.middleRows(pad, t_len);
    }
  }

  Matrix make_dropout_mask(Eigen::Index rows, Eigen::Index cols, Rng& rng) const {
    const double p = config.dropout;
    const double scale = 1.0 / (1.0 - p);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.uniform() < p ? 0.0 : scale;
    return m;
  }

  Matrix context_forward(const Matrix& h, bool training, Rng* rng, BackboneWorkspace* ws) const {
    const Eigen::Index t_len = h.rows(), d = h.cols();
    Matrix x = h;
    if (config.sinusoidal_positions) x += sinusoidal_positions(t_len, d);
    const bool use_dropout = training && config.dropout > 0.0;
    if (use_dropout) {
      MTKWS_REQUIRE(rng != nullptr, ErrorKind::kPrecondition, "dropout requires an rng");
      ws->drop_in = make_dropout_mask(t_len, d, *rng);
      x = x.cwiseProduct(ws->drop_in);
    } else if (ws) {
      ws->drop_in.resize(0, 0);
    }
    ws->stack_in = x;
    ws->layer_caches.assign(static_cast<size_t>(config.layers), {});
    for (int l = 0; l < config.layers; ++l)
      x = layer_forward(x, params.layers[static_cast<size_t>(l)], use_dropout, rng,
                        ws->layer_caches[static_cast<size_t>(l)]);
    return x;
  }

  Matrix layer_forward(const Matrix& x, const EncoderLayerParams& p, bool use_dropout, Rng* rng,
                       LayerCache& cache) const {
    const Eigen::Index t_len = x.rows();
    const int heads = config.heads;
    const Eigen::Index dh = config.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    cache.x_in = x;
    Matrix y1 = layer_norm_forward(x, p.ln1_g, p.ln1_b, cache.ln1);
    cache.q = (y1 * p.wq).rowwise() + p.bq.row(0);
    cache.k = (y1 * p.wk).rowwise() + p.bk.row(0);
    cache.v = (y1 * p.wv).rowwise() + p.bv.row(0);
    cache.z.resize(t_len, config.model_dim);
    cache.probs.assign(static_cast<size_t>(heads), Matrix());
    for (int hd = 0; hd < heads; ++hd) {
      auto qh = cache.q.middleCols(hd * dh, dh);
      auto kh = cache.k.middleCols(hd * dh, dh);
      auto vh = cache.v.middleCols(hd * dh, dh);
      Matrix scores = qh * kh.transpose() * inv_sqrt_dh;
      Matrix& probs = cache.probs[static_cast<size_t>(hd)];
      probs.resize(t_len, t_len);
      for (Eigen::Index t = 0; t < t_len; ++t) {
        double mx = scores.row(t).maxCoeff();
        Eigen::RowVectorXd e = (scores.row(t).array() - mx).exp();
        probs.row(t) = e / e.sum();
      }
      cache.z.middleCols(hd * dh, dh).noalias() = probs * vh;
    }
    Matrix attn_out = (cache.z * p.wo).rowwise() + p.bo.row(0);
    if (use_dropout) {
      cache.drop_attn = make_dropout_mask(t_len, config.model_dim, *rng);
      attn_out = attn_out.cwiseProduct(cache.drop_attn);
    }
    cache.x_mid = x + attn_out;

    Matrix y2 = layer_norm_forward(cache.x_mid, p.ln2_g, p.ln2_b, cache.ln2);
    cache.ffn_pre = (y2 * p.w1).rowwise() + p.b1.row(0);
    cache.ffn_act = nn::gelu(cache.ffn_pre);
    Matrix ffn_out = (cache.ffn_act * p.w2).rowwise() + p.b2.row(0);
    if (use_dropout) {
      cache.drop_ffn = make_dropout_mask(t_len, config.model_dim, *rng);
      ffn_out = ffn_out.cwiseProduct(cache.drop_ffn);
    }
    return cache.x_mid + ffn_out;
  }

  Matrix layer_backward(const LayerCache& cache, const EncoderLayerParams& p, const Matrix& d_out,
                        EncoderLayerParams& g) const {
    const Eigen::Index t_len = d_out.rows();
    const int heads = config.heads;
    const Eigen::Index dh = config.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    // FFN branch
    Matrix d_ffn_out = cache.drop_ffn.size() > 0 ? d_out.cwiseProduct(cache.drop_ffn) : d_out;
    g.b2.row(0) += d_ffn_out.colwise().sum();
    g.w2.noalias() += cache.ffn_act.transpose() * d_ffn_out;
    Matrix d_act = d_ffn_out * p.w2.transpose();
    Matrix d_pre(d_act.rows(), d_act.cols());
    for (Eigen::Index i = 0; i < d_pre.rows(); ++i)
      for (Eigen::Index j = 0; j < d_pre.cols(); ++j)
        d_pre(i, j) = d_act(i, j) * nn::gelu_grad(cache.ffn_pre(i, j));
    g.b1.row(0) += d_pre.colwise().sum();
    Matrix y2 = cache.ln2.xhat.array().rowwise() * p.ln2_g.row(0).array();
    y2 = y2.matrix().rowwise() + p.ln2_b.row(0);
    g.w1.noalias() += y2.transpose() * d_pre;
    Matrix d_y2 = d_pre * p.w1.transpose();
    Matrix d_x_mid = d_out + layer_norm_backward(d_y2, cache.ln2, p.ln2_g, g.ln2_g, g.ln2_b);

    // attention branch
    Matrix d_attn_out =
        cache.drop_attn.size() > 0 ? d_x_mid.cwiseProduct(cache.drop_attn) : d_x_mid;
    g.bo.row(0) += d_attn_out.colwise().sum();
    g.wo.noalias() += cache.z.transpose() * d_attn_out;
    Matrix dz = d_attn_out * p.wo.transpose();
    Matrix dq(t_len, config.model_dim), dk(t_len, config.model_dim), dv(t_len, config.model_dim);
    for (int hd = 0; hd < heads; ++hd) {
      auto qh = cache.q.middleCols(hd * dh, dh);
      auto kh = cache.k.middleCols(hd * dh, dh);
      auto vh = cache.v.middleCols(hd * dh, dh);
      const Matrix& probs = cache.probs[static_cast<size_t>(hd)];
      auto dzh = dz.middleCols(hd * dh, dh);
      Matrix d_probs = dzh * vh.transpose();
      dv.middleCols(hd * dh, dh).noalias() = probs.transpose() * dzh;
      Matrix d_scores(t_len, t_len);
      for (Eigen::Index t = 0; t < t_len; ++t) {
        double dot = d_probs.row(t).cwiseProduct(probs.row(t)).sum();
        d_scores.row(t) = probs.row(t).cwiseProduct(d_probs.row(t).array().matrix() -
                                                    Eigen::RowVectorXd::Constant(t_len, dot));
      }
      d_scores *= inv_sqrt_dh;
      dq.middleCols(hd * dh, dh).noalias() = d_scores * kh;
      dk.middleCols(hd * dh, dh).noalias() = d_scores.transpose() * qh;
    }
    g.bq.row(0) += dq.colwise().sum();
    g.bk.row(0) += dk.colwise().sum();
    g.bv.row(0) += dv.colwise().sum();
    Matrix y1 = cache.ln1.xhat.array().rowwise() * p.ln1_g.row(0).array();
    y1 = y1.matrix().rowwise() + p.ln1_b.row(0);
    g.wq.noalias() += y1.transpose() * dq;
    g.wk.noalias() += y1.transpose() * dk;
    g.wv.noalias() += y1.transpose() * dv;
    Matrix d_y1 = dq * p.wq.transpose() + dk * p.wk.transpose() + dv * p.wv.transpose();
    return d_x_mid + layer_norm_backward(d_y1, cache.ln1, p.ln1_g, g.ln1_g, g.ln1_b);
  }
};

// scores[c] = cosine(A o_t, e_c) / tau, with cosine(0, e) defined as 0.
inline Eigen::VectorXd unit_scores(const Eigen::VectorXd& o_t, const PredictionHead& head) {
  Eigen::VectorXd u = head.projection * o_t;
  const double nu = u.norm();
  const Eigen::Index c = head.unit_embeddings.rows();
  Eigen::VectorXd scores = Eigen::VectorXd::Zero(c);
  if (nu == 0.0) return scores;
  for (Eigen::Index i = 0; i < c; ++i) {
    double ne = head.unit_embeddings.row(i).norm();
    MTKWS_REQUIRE(ne > 0.0, ErrorKind::kPrecondition, "zero-norm unit embedding");
    scores(i) = head.unit_embeddings.row(i).dot(u.transpose()) / (nu * ne * head.temperature);
  }
  return scores;
}

// Rows of O scored in one shot: returns (rows x C).
inline Matrix unit_scores_all(const Matrix& o_rows, const PredictionHead& head) {
  Matrix u = o_rows * head.projection.transpose();
  Eigen::VectorXd nu = u.rowwise().norm();
  Eigen::VectorXd ne = head.unit_embeddings.rowwise().norm();
  MTKWS_REQUIRE((ne.array() > 0.0).all(), ErrorKind::kPrecondition, "zero-norm unit embedding");
  Matrix dots = u * head.unit_embeddings.transpose();
  Matrix scores(o_rows.rows(), head.unit_embeddings.rows());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    if (nu(i) == 0.0) {
      scores.row(i).setZero();
      continue;
    }
    scores.row(i) =
        (dots.row(i).array() / (ne.transpose().array() * nu(i) * head.temperature)).matrix();
  }
  return scores;
}

struct HeadScoreCache {
  Matrix o_rows;  // M x d
  Matrix u;       // M x d
  Eigen::VectorXd nu;
  Eigen::VectorXd ne;
  Matrix dots;    // M x C
  Matrix scores;  // M x C
};

inline Matrix head_scores_forward(const Matrix& o_rows, const PredictionHead& head,
                                  HeadScoreCache& cache) {
  cache.o_rows = o_rows;
  cache.u = o_rows * head.projection.transpose();
  cache.nu = cache.u.rowwise().norm();
  cache.ne = head.unit_embeddings.rowwise().norm();
  MTKWS_REQUIRE((cache.ne.array() > 0.0).all(), ErrorKind::kPrecondition,
                "zero-norm unit embedding");
  cache.dots = cache.u * head.unit_embeddings.transpose();
  cache.scores.resize(o_rows.rows(), head.unit_embeddings.rows());
  for (Eigen::Index i = 0; i < cache.scores.rows(); ++i) {
    if (cache.nu(i) == 0.0) {
      cache.scores.row(i).setZero();
      continue;
    }
    cache.scores.row(i) =
        (cache.dots.row(i).array() / (cache.ne.transpose().array() * cache.nu(i))) /
        head.temperature;
  }
  return cache.scores;
}

// Backward through cosine/temperature scoring. Returns d(o_rows); accumulates
// projection and embedding gradients.
inline Matrix head_scores_backward(const Matrix& d_scores, const PredictionHead& head,
                                   const HeadScoreCache& cache, PredictionHead& grads) {
  const Eigen::Index m = d_scores.rows();
  Matrix du = Matrix::Zero(m, cache.u.cols());
  for (Eigen::Index i = 0; i < m; ++i) {
    if (cache.nu(i) == 0.0) continue;  // cosine pinned to 0 there
    const double nu = cache.nu(i);
    Eigen::RowVectorXd w = d_scores.row(i) / head.temperature;
    // d/du of dot/(nu*ne): e/(nu*ne) - dot*u/(nu^3*ne)
    Eigen::RowVectorXd w_over_ne = (w.array() / cache.ne.transpose().array()).matrix();
    du.row(i) = w_over_ne * head.unit_embeddings / nu;
    double coef = (w.array() * cache.dots.row(i).array() / cache.ne.transpose().array()).sum();
    du.row(i) -= cache.u.row(i) * (coef / (nu * nu * nu));
    // d/de: u/(nu*ne) - dot*e/(nu*ne^3)
    for (Eigen::Index c = 0; c < head.unit_embeddings.rows(); ++c) {
      const double ne = cache.ne(c);
      grads.unit_embeddings.row(c) += w(c) * (cache.u.row(i) / (nu * ne) -
                                              cache.dots(i, c) / (nu * ne * ne * ne) *
                                                  head.unit_embeddings.row(c));
    }
  }
  grads.projection.noalias() += du.transpose() * cache.o_rows;
  return du * head.projection;
}

// Eq-style softmax posterior, stabilized by max subtraction.
inline Eigen::VectorXd posterior_softmax(const Eigen::VectorXd& scores) {
  double mx = scores.maxCoeff();
  Eigen::VectorXd e = (scores.array() - mx).exp();
  return e / e.sum();
}

// Elementwise logistic sigmoid.
inline Eigen::VectorXd unit_probability_sigmoid(const Eigen::VectorXd& scores) {
  return scores.unaryExpr([](double s) { return 1.0 / (1.0 + std::exp(-s)); });
}

// --- checkpoint container ---------------------------------------------------
// Binary, versioned, bit-exact on the writing platform: named double tensors
// plus a config text block.

namespace ckpt_detail {

constexpr char kMagic[8] = {'M', 'T', 'K', 'W', 'C', 'P', '0', '1'};

inline void put_u32(std::string& s, uint32_t v) { s.append(reinterpret_cast<char*>(&v), 4); }
inline void put_u64(std::string& s, uint64_t v) { s.append(reinterpret_cast<char*>(&v), 8); }

}  // namespace ckpt_detail

inline void save_checkpoint(const std::filesystem::path& path, const std::string& config_text,
                            std::vector<TensorRef> tensors) {
  using namespace ckpt_detail;
  std::string out(kMagic, 8);
  put_u32(out, 1);
  put_u32(out, static_cast<uint32_t>(config_text.size()));
  out += config_text;
  put_u32(out, static_cast<uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put_u32(out, static_cast<uint32_t>(t.name.size()));
    out += t.name;
    put_u64(out, static_cast<uint64_t>(t.tensor->rows()));
    put_u64(out, static_cast<uint64_t>(t.tensor->cols()));
    out.append(reinterpret_cast<const char*>(t.tensor->data()),
               static_cast<size_t>(t.tensor->size()) * sizeof(double));
  }
  write_text_file(path, out);
}

// Loads into the provided tensor refs; shapes and names must match exactly.
inline std::string load_checkpoint(const std::filesystem::path& path,
                                   std::vector<TensorRef> tensors) {
  std::string buf = read_text_file(path);
  MTKWS_REQUIRE(buf.size() >= 16 && std::memcmp(buf.data(), ckpt_detail::kMagic, 8) == 0,
                ErrorKind::kIo, "not a checkpoint file: " + path.string());
  size_t pos = 8;
  auto get_u32 = [&](const char* what) {
    MTKWS_REQUIRE(pos + 4 <= buf.size(), ErrorKind::kIo, std::string("truncated: ") + what);
    uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  };
  auto get_u64 = [&](const char* what) {
    MTKWS_REQUIRE(pos + 8 <= buf.size(), ErrorKind::kIo, std::string("truncated: ") + what);
    uint64_t v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  };
  uint32_t version = get_u32("version");
  MTKWS_REQUIRE(version == 1, ErrorKind::kIo, "unsupported checkpoint version");
  uint32_t cfg_len = get_u32("config length");
  MTKWS_REQUIRE(pos + cfg_len <= buf.size(), ErrorKind::kIo, "truncated config");
  std::string config_text = buf.substr(pos, cfg_len);
  pos += cfg_len;
  uint32_t count = get_u32("tensor count");
  MTKWS_REQUIRE(count == tensors.size(), ErrorKind::kIo, "checkpoint tensor count mismatch");
  for (auto& t : tensors) {
    uint32_t name_len = get_u32("name length");
    MTKWS_REQUIRE(pos + name_len <= buf.size(), ErrorKind::kIo, "truncated name");
    std::string name = buf.substr(pos, name_len);
    pos += name_len;
    MTKWS_REQUIRE(name == t.name, ErrorKind::kIo,
                  "checkpoint tensor name mismatch: " + name + " vs " + t.name);
    uint64_t rows = get_u64("rows"), cols = get_u64("cols");
    MTKWS_REQUIRE(rows == static_cast<uint64_t>(t.tensor->rows()) &&
                      cols == static_cast<uint64_t>(t.tensor->cols()),
                  ErrorKind::kIo, "checkpoint tensor shape mismatch for " + name);
    size_t bytes = static_cast<size_t>(rows) * cols * sizeof(double);
    MTKWS_REQUIRE(pos + bytes <= buf.size(), ErrorKind::kIo, "truncated tensor data");
    std::memcpy(t.tensor->data(), buf.data() + pos, bytes);
    pos += bytes;
  }
  return config_text;
}

inline uint64_t tensors_hash(std::vector<TensorRef> tensors) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& t : tensors) {
    h = fnv1a64(t.name.data(), t.name.size(), h);
    h = fnv1a64(t.tensor->data(), static_cast<size_t>(t.tensor->size()) * sizeof(double), h);
  }
  return h;
}

}  // namespace mtkws

#endif  // MTKWS_BACKBONE_HPP
