// mtkws/mixing.hpp

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

#ifndef MTKWS_MIXING_HPP
#define MTKWS_MIXING_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "mtkws/audio.hpp"
#include "mtkws/common.hpp"
#include "mtkws/corpus.hpp"
#include "mtkws/rng.hpp"

namespace mtkws {

constexpr double kTargetRms = 0.1;
constexpr double kScaleLo = 0.1;
constexpr double kScaleHi = 0.9;

struct MixtureSpec {
  std::string mix_id;
  std::vector<std::string> source_ids;  // n in {1, 2, 3}
  std::vector<double> scales;           // one per source
};

struct MixtureExample {
  MixtureSpec spec;
  Waveform waveform;
  std::vector<uint8_t> label;  // K-dim binary vector
  size_t clipped_samples = 0;
};

// Scales to RMS 0.1. Idempotent up to rounding.
inline Waveform normalize_rms(const Waveform& w) {
  double r = rms(w);
  MTKWS_REQUIRE(r > 0.0, ErrorKind::kDegenerateAudio, "all-zero waveform");
  Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples.resize(w.samples.size());
  const double g = kTargetRms / r;
  for (size_t i = 0; i < w.samples.size(); ++i) out.samples[i] = w.samples[i] * g;
  return out;
}

// out[t] = sum_k scales[k] * sources[k][t], truncated to the minimum length.
// Pure linear sum at double precision; clipping is the caller's business.
inline Waveform mix_waveforms(const std::vector<Waveform>& sources,
                              const std::vector<double>& scales) {
  MTKWS_REQUIRE(!sources.empty(), ErrorKind::kPrecondition, "empty source list");
  MTKWS_REQUIRE(sources.size() == scales.size(), ErrorKind::kPrecondition,
                "sources and scales length mismatch");
  size_t min_len = sources[0].samples.size();
  for (const auto& s : sources) {
    MTKWS_REQUIRE(s.sample_rate == sources[0].sample_rate, ErrorKind::kIncompatibility,
                  "sample-rate mismatch between mixture sources");
    min_len = std::min(min_len, s.samples.size());
  }
  for (double sc : scales)
    MTKWS_REQUIRE(sc > 0.0, ErrorKind::kPrecondition, "scales must be positive");
  Waveform out;
  out.sample_rate = sources[0].sample_rate;
  out.samples.assign(min_len, 0.0);
  for (size_t k = 0; k < sources.size(); ++k) {
    const double sc = scales[k];
    const auto& src = sources[k].samples;
    for (size_t t = 0; t < min_len; ++t) out.samples[t] += sc * src[t];
  }
  return out;
}

// n independent draws from U(0.1, 0.9).
inline std::vector<double> sample_scales(size_t n, Rng& rng) {
  MTKWS_REQUIRE(n >= 1, ErrorKind::kPrecondition, "need at least one scale");
  std::vector<double> out(n);
  for (auto& v : out) v = rng.uniform(kScaleLo, kScaleHi);
  return out;
}

// Per-component logical OR.
inline std::vector<uint8_t> union_labels(const std::vector<std::vector<uint8_t>>& labels) {
  MTKWS_REQUIRE(!labels.empty(), ErrorKind::kPrecondition, "empty label list");
  const size_t k = labels[0].size();
  std::vector<uint8_t> out(k, 0);
  for (const auto& l : labels) {
    MTKWS_REQUIRE(l.size() == k, ErrorKind::kPrecondition, "label dimension mismatch");
    for (size_t c = 0; c < k; ++c) out[c] = out[c] || l[c];
  }
  return out;
}

inline std::vector<uint8_t> one_hot(int index, int k) {
  MTKWS_REQUIRE(index >= 0 && index < k, ErrorKind::kPrecondition, "one_hot index out of range");
  std::vector<uint8_t> v(k, 0);
  v[index] = 1;
  return v;
}

inline size_t popcount(const std::vector<uint8_t>& label) {
  size_t n = 0;
  for (uint8_t b : label) n += b != 0;
  return n;
}

using WaveformLookup = std::function<Waveform(const std::string& id)>;

// Reads each source wav once per call. For hot loops wrap a cache around it.
inline WaveformLookup manifest_waveform_lookup(const Manifest& m) {
  return [&m](const std::string& id) { return read_wav(m.audio_path(m.by_id(id))); };
}

// Realizes a mixture from its spec: RMS-normalize each source, sum the
// (source, scale) pairs in ascending source_id order at double precision,
// then clamp to [-1, 1]. n=1 keeps the clean waveform (scale 1.0).
inline MixtureExample realize_mixture(const MixtureSpec& spec, const Manifest& manifest,
                                      const WaveformLookup& lookup,
                                      const std::vector<uint8_t>& label) {
  MTKWS_REQUIRE(spec.source_ids.size() == spec.scales.size(), ErrorKind::kPrecondition,
                "spec source/scale length mismatch");
  std::vector<size_t> order(spec.source_ids.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return spec.source_ids[a] < spec.source_ids[b];
  });
  std::vector<Waveform> sources;
  std::vector<double> scales;
  sources.reserve(order.size());
  for (size_t idx : order) {
    sources.push_back(normalize_rms(lookup(spec.source_ids[idx])));
    scales.push_back(spec.scales[idx]);
  }
  MixtureExample ex;
  ex.spec = spec;
  ex.waveform = mix_waveforms(sources, scales);
  ex.label = label;
  for (double& s : ex.waveform.samples) {
    if (s > 1.0 || s < -1.0) {
      s = std::clamp(s, -1.0, 1.0);
      ++ex.clipped_samples;
    }
  }
  (void)manifest;
  return ex;
}

inline std::vector<uint8_t> spec_label(const MixtureSpec& spec, const Manifest& manifest) {
  std::vector<std::vector<uint8_t>> labels;
  for (const auto& id : spec.source_ids)
    labels.push_back(one_hot(manifest.by_id(id).keyword, manifest.num_keywords()));
  return union_labels(labels);
}

namespace mix_detail {

inline std::string make_mix_id(const char* prefix, size_t index) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%06zu", prefix, index);
  return buf;
}

}  // namespace mix_detail

// Pre-training set: a clean_fraction of n=1 examples (scale 1.0), the rest
// 2-mix with U(0.1, 0.9) scales over uniformly drawn distinct records.
// Example i depends only on (seed, i).
inline std::vector<MixtureSpec> build_pretrain_mixture_specs(const Manifest& manifest,
                                                             int mix_cardinality,
                                                             double clean_fraction, size_t count,
                                                             uint64_t seed) {
  MTKWS_REQUIRE(mix_cardinality == 2, ErrorKind::kPrecondition,
                "pre-training mixtures are limited to 2-mix");
  MTKWS_REQUIRE(clean_fraction >= 0.0 && clean_fraction <= 1.0, ErrorKind::kPrecondition,
                "clean_fraction must lie in [0, 1]");
  MTKWS_REQUIRE(!manifest.records.empty(), ErrorKind::kPrecondition, "empty manifest");
  if (clean_fraction < 1.0)
    MTKWS_REQUIRE(manifest.records.size() >= 2, ErrorKind::kInsufficientData,
                  "2-mix requested but manifest has fewer than 2 records");
  const size_t n_rec = manifest.records.size();
  std::vector<MixtureSpec> specs;
  specs.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, {UINT64_C(0x4d49), i}));
    MixtureSpec spec;
    spec.mix_id = mix_detail::make_mix_id("mix", i);
    if (rng.uniform() < clean_fraction) {
      spec.source_ids = {manifest.records[rng.uniform_int(n_rec)].id};
      spec.scales = {1.0};
    } else {
      size_t a = rng.uniform_int(n_rec);
      size_t b = rng.uniform_int(n_rec - 1);
      if (b >= a) ++b;
      spec.source_ids = {manifest.records[a].id, manifest.records[b].id};
      spec.scales = sample_scales(2, rng);
    }
    specs.push_back(std::move(spec));
  }
  return specs;
}

inline std::vector<MixtureExample> build_pretrain_mixtures(const Manifest& manifest,
                                                           int mix_cardinality,
                                                           double clean_fraction, size_t count,
                                                           uint64_t seed,
                                                           const WaveformLookup& lookup) {
  auto specs =
      build_pretrain_mixture_specs(manifest, mix_cardinality, clean_fraction, count, seed);
  std::vector<MixtureExample> out;
  out.reserve(specs.size());
  for (const auto& spec : specs)
    out.push_back(realize_mixture(spec, manifest, lookup, spec_label(spec, manifest)));
  return out;
}

// Evaluation set: n sources with pairwise-distinct keywords, all scales equal
// so the energy ratio is exactly 1:...:1 after RMS normalization.
inline std::vector<MixtureSpec> build_eval_mixture_specs(const Manifest& test_manifest, int n,
                                                         size_t count, uint64_t seed) {
  MTKWS_REQUIRE(n == 2 || n == 3, ErrorKind::kPrecondition, "eval mixtures use n in {2, 3}");
  auto groups = test_manifest.by_class();
  std::vector<size_t> nonempty;
  for (size_t k = 0; k < groups.size(); ++k)
    if (!groups[k].empty()) nonempty.push_back(k);
  MTKWS_REQUIRE(static_cast<int>(nonempty.size()) >= n, ErrorKind::kInsufficientData,
                "test manifest has fewer than n distinct keyword classes");
  std::vector<MixtureSpec> specs;
  specs.reserve(count);
  const double scale = 1.0 / static_cast<double>(n);
  for (size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, {UINT64_C(0x4556), static_cast<uint64_t>(n), i}));
    std::vector<size_t> classes = nonempty;
    rng.shuffle_prefix(classes, static_cast<size_t>(n));
    MixtureSpec spec;
    spec.mix_id = mix_detail::make_mix_id(n == 2 ? "mix2" : "mix3", i);
    for (int j = 0; j < n; ++j) {
      const auto& group = groups[classes[j]];
      spec.source_ids.push_back(test_manifest.records[group[rng.uniform_int(group.size())]].id);
      spec.scales.push_back(scale);
    }
    specs.push_back(std::move(spec));
  }
  return specs;
}

inline std::vector<MixtureExample> build_eval_mixture_set(const Manifest& test_manifest, int n,
                                                          size_t count, uint64_t seed,
                                                          const WaveformLookup& lookup) {
  auto specs = build_eval_mixture_specs(test_manifest, n, count, seed);
  std::vector<MixtureExample> out;
  out.reserve(specs.size());
  for (const auto& spec : specs)
    out.push_back(realize_mixture(spec, test_manifest, lookup, spec_label(spec, test_manifest)));
  return out;
}

// Mixture manifest: mix_id<TAB>source_ids(comma)<TAB>scales(comma)<TAB>label_bits(comma).
inline std::string format_mixture_specs(const std::vector<MixtureSpec>& specs,
                                        const Manifest& manifest) {
  std::string out;
  for (const auto& spec : specs) {
    auto label = spec_label(spec, manifest);
    out += spec.mix_id + '\t';
    for (size_t i = 0; i < spec.source_ids.size(); ++i) {
      if (i) out += ',';
      out += spec.source_ids[i];
    }
    out += '\t';
    for (size_t i = 0; i < spec.scales.size(); ++i) {
      if (i) out += ',';
      out += format_double_exact(spec.scales[i]);
    }
    out += '\t';
    for (size_t i = 0; i < label.size(); ++i) {
      if (i) out += ',';
      out += label[i] ? '1' : '0';
    }
    out += '\n';
  }
  return out;
}

inline void write_mixture_manifest(const std::filesystem::path& path,
                                   const std::vector<MixtureSpec>& specs,
                                   const Manifest& manifest) {
  write_text_file(path, format_mixture_specs(specs, manifest));
}

inline std::vector<MixtureSpec> load_mixture_manifest(const std::filesystem::path& path) {
  std::string text = read_text_file(path);
  std::vector<MixtureSpec> specs;
  size_t lineno = 0;
  for (const auto& raw : split(text, '\n')) {
    ++lineno;
    std::string line = strip(raw);
    if (line.empty()) continue;
    auto fields = split(line, '\t');
    MTKWS_REQUIRE(fields.size() == 4, ErrorKind::kMalformedManifest,
                  "mixture manifest line " + std::to_string(lineno) + ": expected 4 fields");
    MixtureSpec spec;
    spec.mix_id = fields[0];
    for (auto& id : split(fields[1], ',')) spec.source_ids.push_back(id);
    try {
      for (auto& s : split(fields[2], ',')) spec.scales.push_back(std::stod(s));
    } catch (const std::exception&) {
      raise(ErrorKind::kMalformedManifest,
            "mixture manifest line " + std::to_string(lineno) + ": bad scale");
    }
    MTKWS_REQUIRE(spec.source_ids.size() == spec.scales.size(), ErrorKind::kMalformedManifest,
                  "mixture manifest line " + std::to_string(lineno) + ": arity mismatch");
    specs.push_back(std::move(spec));
  }
  return specs;
}

}  // namespace mtkws

#endif  // MTKWS_MIXING_HPP
