// mtkws/tokenizer.hpp

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

#ifndef MTKWS_TOKENIZER_HPP
#define MTKWS_TOKENIZER_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "mtkws/audio.hpp"
#include "mtkws/common.hpp"
#include "mtkws/rng.hpp"

namespace mtkws {

struct FeatureConfig {
  int sample_rate = 16000;
  int window = 400;   // 25 ms at 16 kHz
  int hop = 160;      // 10 ms
  int n_mels = 40;
  double log_floor = 1e-6;

  std::string describe() const {
    return "logmel:sr=" + std::to_string(sample_rate) + ",win=" + std::to_string(window) +
           ",hop=" + std::to_string(hop) + ",nmel=" + std::to_string(n_mels);
  }
  bool operator==(const FeatureConfig&) const = default;
};

struct FeatureMatrix {
  Eigen::MatrixXd frames;  // T x F
  double frame_rate = 0.0;
  std::string source_id;
};

struct Codebook {
  Eigen::MatrixXd centroids;  // C x F
  std::string feature_config;

  int size() const { return static_cast<int>(centroids.rows()); }
  int dim() const { return static_cast<int>(centroids.cols()); }
};

struct TokenSequence {
  std::vector<int> tokens;  // each in [0, C)
};

struct NHotTargets {
  // T x C, entries in {0, 1}
  Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic> bits;
};

namespace feat_detail {

// Iterative radix-2 FFT, in place. n must be a power of two.
inline void fft_pow2(std::vector<std::complex<double>>& a) {
  const size_t n = a.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    double ang = -2.0 * M_PI / static_cast<double>(len);
    std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t j = 0; j < len / 2; ++j) {
        auto u = a[i + j];
        auto v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

inline size_t next_pow2(size_t n) {
  size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular mel filterbank over the power spectrum bins.
inline Eigen::MatrixXd mel_filterbank(const FeatureConfig& cfg, size_t n_fft) {
  const size_t n_bins = n_fft / 2 + 1;
  const double f_lo = 0.0, f_hi = cfg.sample_rate / 2.0;
  const double m_lo = hz_to_mel(f_lo), m_hi = hz_to_mel(f_hi);
  std::vector<double> centers(cfg.n_mels + 2);
  for (int i = 0; i < cfg.n_mels + 2; ++i)
    centers[i] = mel_to_hz(m_lo + (m_hi - m_lo) * i / (cfg.n_mels + 1));
  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(cfg.n_mels, static_cast<Eigen::Index>(n_bins));
  const double bin_hz = static_cast<double>(cfg.sample_rate) / static_cast<double>(n_fft);
  for (int m = 0; m < cfg.n_mels; ++m) {
    double lo = centers[m], mid = centers[m + 1], hi = centers[m + 2];
    for (size_t b = 0; b < n_bins; ++b) {
      double f = b * bin_hz;
      if (f <= lo || f >= hi) continue;
      fb(m, static_cast<Eigen::Index>(b)) = f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
    }
  }
  return fb;
}

}  // namespace feat_detail

// Log-mel filterbank frames: Hann window, power spectrum, triangular mel
// bands, ln(energy + floor). T = 1 + floor((len - window) / hop).
inline FeatureMatrix extract_features(const Waveform& w, const FeatureConfig& cfg = {},
                                      const std::string& source_id = "") {
  MTKWS_REQUIRE(w.sample_rate == cfg.sample_rate, ErrorKind::kPrecondition,
                "waveform sample rate does not match the feature config");
  const size_t len = w.samples.size();
  MTKWS_REQUIRE(len >= static_cast<size_t>(cfg.window), ErrorKind::kDegenerateAudio,
                "waveform shorter than one analysis window");
  const int t_frames = 1 + static_cast<int>((len - cfg.window) / cfg.hop);
  const size_t n_fft = feat_detail::next_pow2(static_cast<size_t>(cfg.window));
  const size_t n_bins = n_fft / 2 + 1;

  static thread_local Eigen::MatrixXd fb_cache;
  static thread_local std::string fb_key;
  const std::string key = cfg.describe();
  if (fb_key != key) {
    fb_cache = feat_detail::mel_filterbank(cfg, n_fft);
    fb_key = key;
  }

  std::vector<double> hann(cfg.window);
  for (int i = 0; i < cfg.window; ++i)
    hann[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / (cfg.window - 1));

  FeatureMatrix out;
  out.source_id = source_id;
  out.frame_rate = static_cast<double>(cfg.sample_rate) / cfg.hop;
  out.frames.resize(t_frames, cfg.n_mels);
  std::vector<std::complex<double>> spec(n_fft);
  Eigen::VectorXd power(static_cast<Eigen::Index>(n_bins));
  for (int t = 0; t < t_frames; ++t) {
    const size_t off = static_cast<size_t>(t) * cfg.hop;
    for (size_t i = 0; i < n_fft; ++i) {
      double s = i < static_cast<size_t>(cfg.window) ? w.samples[off + i] * hann[i] : 0.0;
      spec[i] = {s, 0.0};
    }
    feat_detail::fft_pow2(spec);
    for (size_t b = 0; b < n_bins; ++b) power(static_cast<Eigen::Index>(b)) = std::norm(spec[b]);
    Eigen::VectorXd mel = fb_cache * power;
    for (int m = 0; m < cfg.n_mels; ++m) out.frames(t, m) = std::log(mel(m) + cfg.log_floor);
  }
  return out;
}

struct KMeansStats {
  std::vector<double> inertia_history;  // after each assignment step
  int iterations = 0;
  bool converged = false;
};

namespace kmeans_detail {

inline double sq_dist(const Eigen::MatrixXd& points, Eigen::Index i, const Eigen::MatrixXd& c,
                      Eigen::Index j) {
  return (points.row(i) - c.row(j)).squaredNorm();
}

inline Eigen::MatrixXd kmeanspp_init(const Eigen::MatrixXd& points, int c, Rng& rng) {
  const Eigen::Index n = points.rows();
  Eigen::MatrixXd centroids(c, points.cols());
  centroids.row(0) = points.row(static_cast<Eigen::Index>(rng.uniform_int(n)));
  Eigen::VectorXd d2(n);
  for (Eigen::Index i = 0; i < n; ++i) d2(i) = sq_dist(points, i, centroids, 0);
  for (int j = 1; j < c; ++j) {
    double total = d2.sum();
    MTKWS_REQUIRE(total > 0.0, ErrorKind::kPrecondition,
                  "fewer distinct frames than requested clusters");
    double target = rng.uniform() * total;
    Eigen::Index pick = n - 1;
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      acc += d2(i);
      if (acc >= target) {
        pick = i;
        break;
      }
    }
    centroids.row(j) = points.row(pick);
    for (Eigen::Index i = 0; i < n; ++i)
      d2(i) = std::min(d2(i), sq_dist(points, i, centroids, j));
  }
  return centroids;
}

}  // namespace kmeans_detail

inline std::vector<int> assign_nearest(const Eigen::MatrixXd& points,
                                       const Eigen::MatrixXd& centroids) {
  const Eigen::Index n = points.rows(), c = centroids.rows();
  // argmin over squared distances via the expansion |p|^2 - 2 p.c + |c|^2;
  // computed in full to keep ties bit-stable (lowest index wins).
  std::vector<int> assign(static_cast<size_t>(n), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int best_j = 0;
    for (Eigen::Index j = 0; j < c; ++j) {
      double d = (points.row(i) - centroids.row(j)).squaredNorm();
      if (d < best) {
        best = d;
        best_j = static_cast<int>(j);
      }
    }
    assign[static_cast<size_t>(i)] = best_j;
  }
  return assign;
}

inline double kmeans_inertia(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centroids,
                             const std::vector<int>& assign) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    total += (points.row(i) - centroids.row(assign[static_cast<size_t>(i)]).eval()).squaredNorm();
  return total;
}

// Lloyd's algorithm with k-means++ init. Stops at the assignment fixpoint or
// after `iters` iterations. Empty clusters are reseeded to the point farthest
// from its current centroid.
inline Codebook fit_codebook(const std::vector<FeatureMatrix>& features, int c, int iters,
                             uint64_t seed, KMeansStats* stats = nullptr) {
  MTKWS_REQUIRE(c >= 2, ErrorKind::kPrecondition, "codebook size must be at least 2");
  Eigen::Index total_rows = 0;
  for (const auto& f : features) total_rows += f.frames.rows();
  MTKWS_REQUIRE(total_rows >= c, ErrorKind::kPrecondition,
                "fewer frames than requested clusters");
  const Eigen::Index dim = features.empty() ? 0 : features[0].frames.cols();
  Eigen::MatrixXd points(total_rows, dim);
  Eigen::Index row = 0;
  for (const auto& f : features) {
    MTKWS_REQUIRE(f.frames.cols() == dim, ErrorKind::kPrecondition,
                  "feature dimension mismatch across utterances");
    points.middleRows(row, f.frames.rows()) = f.frames;
    row += f.frames.rows();
  }

  Rng rng(derive_seed(seed, {UINT64_C(0x6b6d)}));
  Eigen::MatrixXd centroids = kmeans_detail::kmeanspp_init(points, c, rng);
  std::vector<int> assign = assign_nearest(points, centroids);
  if (stats) {
    stats->inertia_history.clear();
    stats->inertia_history.push_back(kmeans_inertia(points, centroids, assign));
  }
  bool converged = false;
  int it = 0;
  for (; it < iters; ++it) {
    // update step
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(c, dim);
    std::vector<Eigen::Index> counts(static_cast<size_t>(c), 0);
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
      sums.row(assign[static_cast<size_t>(i)]) += points.row(i);
      ++counts[static_cast<size_t>(assign[static_cast<size_t>(i)])];
    }
    for (int j = 0; j < c; ++j) {
      if (counts[static_cast<size_t>(j)] > 0) {
        centroids.row(j) = sums.row(j) / static_cast<double>(counts[static_cast<size_t>(j)]);
      } else {
        // reseed to the point farthest from its assigned centroid
        double worst = -1.0;
        Eigen::Index pick = 0;
        for (Eigen::Index i = 0; i < points.rows(); ++i) {
          double d =
              (points.row(i) - centroids.row(assign[static_cast<size_t>(i)]).eval()).squaredNorm();
          if (d > worst) {
            worst = d;
            pick = i;
          }
        }
        centroids.row(j) = points.row(pick);
      }
    }
    std::vector<int> next = assign_nearest(points, centroids);
    if (stats) stats->inertia_history.push_back(kmeans_inertia(points, centroids, next));
    if (next == assign) {
      converged = true;
      assign = std::move(next);
      ++it;
      break;
    }
    assign = std::move(next);
  }
  if (stats) {
    stats->iterations = it;
    stats->converged = converged;
  }
  Codebook cb;
  cb.centroids = std::move(centroids);
  cb.feature_config = features.empty() ? "" : FeatureConfig{}.describe();
  return cb;
}

// tokens[t] = argmin_c ||frames[t] - centroid_c||, ties to the lowest index.
inline TokenSequence tokenize_frames(const FeatureMatrix& features, const Codebook& cb) {
  MTKWS_REQUIRE(features.frames.cols() == cb.centroids.cols(), ErrorKind::kPrecondition,
                "feature dimension does not match the codebook");
  TokenSequence seq;
  seq.tokens = assign_nearest(features.frames, cb.centroids);
  return seq;
}

// Per-frame label union over the codebook: bits[t][c] = 1 iff some source's
// token at t equals c. A single source yields one-hot rows.
inline NHotTargets make_nhot_targets(const std::vector<TokenSequence>& per_source_tokens, int c) {
  MTKWS_REQUIRE(!per_source_tokens.empty(), ErrorKind::kPrecondition, "no token sequences");
  const size_t t_len = per_source_tokens[0].tokens.size();
  for (const auto& seq : per_source_tokens)
    MTKWS_REQUIRE(seq.tokens.size() == t_len, ErrorKind::kPrecondition,
                  "token sequence length mismatch");
  NHotTargets out;
  out.bits.setZero(static_cast<Eigen::Index>(t_len), c);
  for (const auto& seq : per_source_tokens) {
    for (size_t t = 0; t < t_len; ++t) {
      int tok = seq.tokens[t];
      MTKWS_REQUIRE(tok >= 0 && tok < c, ErrorKind::kPrecondition, "token out of codebook range");
      out.bits(static_cast<Eigen::Index>(t), tok) = 1;
    }
  }
  return out;
}

// MPC-style targets: tokenize the mixture's own features.
inline TokenSequence make_mixture_targets(const FeatureMatrix& mixture_features,
                                          const Codebook& cb) {
  return tokenize_frames(mixture_features, cb);
}

// Codebook file: header `C F`, C rows of F decimal floats, feature_config
// footer.
inline std::string format_codebook(const Codebook& cb) {
  std::string out = std::to_string(cb.size()) + " " + std::to_string(cb.dim()) + "\n";
  for (Eigen::Index i = 0; i < cb.centroids.rows(); ++i) {
    for (Eigen::Index j = 0; j < cb.centroids.cols(); ++j) {
      if (j) out += ' ';
      out += format_double_exact(cb.centroids(i, j));
    }
    out += '\n';
  }
  out += "#feature_config:" + cb.feature_config + "\n";
  return out;
}

inline void write_codebook(const std::filesystem::path& path, const Codebook& cb) {
  write_text_file(path, format_codebook(cb));
}

inline Codebook load_codebook(const std::filesystem::path& path) {
  std::string text = read_text_file(path);
  auto lines = split(text, '\n');
  MTKWS_REQUIRE(!lines.empty(), ErrorKind::kIo, "empty codebook file");
  auto header = split(strip(lines[0]), ' ');
  MTKWS_REQUIRE(header.size() == 2, ErrorKind::kIo, "bad codebook header");
  int c = std::stoi(header[0]), f = std::stoi(header[1]);
  MTKWS_REQUIRE(static_cast<int>(lines.size()) >= c + 1, ErrorKind::kIo, "truncated codebook");
  Codebook cb;
  cb.centroids.resize(c, f);
  for (int i = 0; i < c; ++i) {
    auto vals = split(strip(lines[static_cast<size_t>(i) + 1]), ' ');
    MTKWS_REQUIRE(static_cast<int>(vals.size()) == f, ErrorKind::kIo, "bad codebook row");
    for (int j = 0; j < f; ++j) cb.centroids(i, j) = std::stod(vals[static_cast<size_t>(j)]);
  }
  for (size_t i = static_cast<size_t>(c) + 1; i < lines.size(); ++i)
    if (starts_with(lines[i], "#feature_config:"))
      cb.feature_config = strip(lines[i].substr(16));
  return cb;
}

// Token file: utt_id<TAB>space-separated ints, one utterance per line.
inline void write_token_file(const std::filesystem::path& path,
                             const std::vector<std::pair<std::string, TokenSequence>>& entries) {
  std::string out;
  for (const auto& [id, seq] : entries) {
    out += id + '\t';
    for (size_t t = 0; t < seq.tokens.size(); ++t) {
      if (t) out += ' ';
      out += std::to_string(seq.tokens[t]);
    }
    out += '\n';
  }
  write_text_file(path, out);
}

inline std::vector<std::pair<std::string, TokenSequence>> load_token_file(
    const std::filesystem::path& path) {
  std::vector<std::pair<std::string, TokenSequence>> out;
  for (const auto& raw : split(read_text_file(path), '\n')) {
    std::string line = strip(raw);
    if (line.empty()) continue;
    auto fields = split(line, '\t');
    MTKWS_REQUIRE(fields.size() == 2, ErrorKind::kIo, "bad token file line");
    TokenSequence seq;
    for (auto& tok : split(fields[1], ' '))
      if (!tok.empty()) seq.tokens.push_back(std::stoi(tok));
    out.emplace_back(fields[0], std::move(seq));
  }
  return out;
}

// N-hot file: mix_id<TAB>per-frame unit sets, frames space-separated, units
// comma-separated within a frame.
inline void write_nhot_file(const std::filesystem::path& path,
                            const std::vector<std::pair<std::string, NHotTargets>>& entries) {
  std::string out;
  for (const auto& [id, targets] : entries) {
    out += id + '\t';
    for (Eigen::Index t = 0; t < targets.bits.rows(); ++t) {
      if (t) out += ' ';
      bool first = true;
      for (Eigen::Index c = 0; c < targets.bits.cols(); ++c) {
        if (!targets.bits(t, c)) continue;
        if (!first) out += ',';
        out += std::to_string(c);
        first = false;
      }
    }
    out += '\n';
  }
  write_text_file(path, out);
}

inline std::vector<std::pair<std::string, NHotTargets>> load_nhot_file(
    const std::filesystem::path& path, int c) {
  std::vector<std::pair<std::string, NHotTargets>> out;
  for (const auto& raw : split(read_text_file(path), '\n')) {
    std::string line = strip(raw);
    if (line.empty()) continue;
    auto fields = split(line, '\t');
    MTKWS_REQUIRE(fields.size() == 2, ErrorKind::kIo, "bad n-hot file line");
    auto frames = split(fields[1], ' ');
    NHotTargets targets;
    targets.bits.setZero(static_cast<Eigen::Index>(frames.size()), c);
    for (size_t t = 0; t < frames.size(); ++t)
      for (auto& unit : split(frames[t], ','))
        if (!unit.empty()) targets.bits(static_cast<Eigen::Index>(t), std::stoi(unit)) = 1;
    out.emplace_back(fields[0], std::move(targets));
  }
  return out;
}

}  // namespace mtkws

#endif  // MTKWS_TOKENIZER_HPP
