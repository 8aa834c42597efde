// mtkws/corpus.hpp

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

#ifndef MTKWS_CORPUS_HPP
#define MTKWS_CORPUS_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mtkws/audio.hpp"
#include "mtkws/common.hpp"
#include "mtkws/rng.hpp"

namespace mtkws {

struct UtteranceRecord {
  std::string id;
  std::string path;  // relative to the manifest's directory
  int keyword = -1;  // class index in [0, K)
  double duration_s = 0.0;
  int sample_rate = 0;

  bool operator==(const UtteranceRecord&) const = default;
};

struct Manifest {
  std::vector<UtteranceRecord> records;
  std::vector<std::string> keyword_names;
  std::string split_tag;                // train | valid | test
  std::filesystem::path base_dir;       // directory the manifest was loaded from

  int num_keywords() const { return static_cast<int>(keyword_names.size()); }

  const UtteranceRecord& by_id(const std::string& id) const {
    for (const auto& r : records)
      if (r.id == id) return r;
    raise(ErrorKind::kIntegrity, "unknown utterance id: " + id);
  }

  std::filesystem::path audio_path(const UtteranceRecord& r) const {
    return base_dir / r.path;
  }

  // Record indices grouped by keyword class, in manifest order.
  std::vector<std::vector<size_t>> by_class() const {
    std::vector<std::vector<size_t>> groups(keyword_names.size());
    for (size_t i = 0; i < records.size(); ++i) groups[records[i].keyword].push_back(i);
    return groups;
  }
};

struct FewShotSubset {
  int shots = 0;
  int repeat_index = 0;
  std::vector<std::string> record_ids;
};

inline void validate_manifest(const Manifest& m) {
  std::unordered_set<std::string> seen;
  const int k = m.num_keywords();
  for (const auto& r : m.records) {
    MTKWS_REQUIRE(seen.insert(r.id).second, ErrorKind::kIntegrity,
                  "duplicate utterance id: " + r.id);
    MTKWS_REQUIRE(r.keyword >= 0 && r.keyword < k, ErrorKind::kIntegrity,
                  "keyword index out of range for id " + r.id);
    MTKWS_REQUIRE(r.duration_s > 0.0 && r.sample_rate > 0, ErrorKind::kIntegrity,
                  "non-positive duration or sample rate for id " + r.id);
  }
}

// Manifest file: line 1 `#keywords:a,b,...`, line 2 `#split:tag`, then one
// record per line: id<TAB>path<TAB>keyword<TAB>duration_s<TAB>sample_rate.
inline Manifest load_manifest(const std::filesystem::path& path) {
  std::string text = read_text_file(path);
  auto lines = split(text, '\n');
  Manifest m;
  m.base_dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  size_t lineno = 0;
  MTKWS_REQUIRE(!lines.empty() && starts_with(lines[0], "#keywords:"),
                ErrorKind::kMalformedManifest, "line 1: expected #keywords: header");
  for (auto& name : split(strip(lines[0].substr(10)), ','))
    if (!name.empty()) m.keyword_names.push_back(name);
  MTKWS_REQUIRE(lines.size() >= 2 && starts_with(lines[1], "#split:"),
                ErrorKind::kMalformedManifest, "line 2: expected #split: header");
  m.split_tag = strip(lines[1].substr(7));
  for (size_t i = 2; i < lines.size(); ++i) {
    lineno = i + 1;
    std::string line = strip(lines[i]);
    if (line.empty()) continue;
    auto fields = split(line, '\t');
    MTKWS_REQUIRE(fields.size() == 5, ErrorKind::kMalformedManifest,
                  "line " + std::to_string(lineno) + ": expected 5 tab-separated fields");
    UtteranceRecord r;
    r.id = fields[0];
    r.path = fields[1];
    try {
      r.keyword = std::stoi(fields[2]);
      r.duration_s = std::stod(fields[3]);
      r.sample_rate = std::stoi(fields[4]);
    } catch (const std::exception&) {
      raise(ErrorKind::kMalformedManifest,
            "line " + std::to_string(lineno) + ": numeric field parse failure");
    }
    m.records.push_back(std::move(r));
  }
  validate_manifest(m);
  return m;
}

inline std::string format_manifest(const Manifest& m) {
  std::string out = "#keywords:";
  for (size_t i = 0; i < m.keyword_names.size(); ++i) {
    if (i) out += ',';
    out += m.keyword_names[i];
  }
  out += "\n#split:" + m.split_tag + "\n";
  for (const auto& r : m.records) {
    out += r.id + '\t' + r.path + '\t' + std::to_string(r.keyword) + '\t' +
           format_double_exact(r.duration_s) + '\t' + std::to_string(r.sample_rate) + '\n';
  }
  return out;
}

inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  validate_manifest(m);
  write_text_file(path, format_manifest(m));
}

struct SynthesisParams {
  double chirp_amplitude = 0.5;
  double noise_snr_db = 20.0;          // white noise relative to the chirp
  double base_freq_lo = 300.0;         // class base frequencies span [lo, hi]
  double base_freq_hi = 6000.0;
  double min_spacing_hz = 300.0;
  double chirp_span = 0.25;            // sweep to base * (1 + span)
  double gain_lo = 0.6, gain_hi = 1.0;
  double onset_jitter_frac = 0.1;      // template start within [0, frac*dur]
};

inline double class_base_frequency(int keyword, int n_keywords, const SynthesisParams& p = {}) {
  double spacing = n_keywords > 1 ? (p.base_freq_hi - p.base_freq_lo) / (n_keywords - 1)
                                  : 0.0;
  MTKWS_REQUIRE(n_keywords < 2 || spacing >= p.min_spacing_hz, ErrorKind::kValidation,
                "too many keyword classes for the frequency band");
  return p.base_freq_lo + spacing * keyword;
}

// One utterance: class-specific linear chirp with random gain, random onset
// and white noise at the configured SNR. Randomness is keyed on
// (seed, keyword, index) so generation order never matters.
inline Waveform synthesize_utterance(int keyword, int n_keywords, int index, double duration_s,
                                     int sample_rate, uint64_t seed,
                                     const SynthesisParams& p = {}) {
  Rng r(derive_seed(seed, {static_cast<uint64_t>(keyword), static_cast<uint64_t>(index)}));
  const size_t n = static_cast<size_t>(std::llround(duration_s * sample_rate));
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.assign(n, 0.0);

  const double f0 = class_base_frequency(keyword, n_keywords, p);
  const double f1 = f0 * (1.0 + p.chirp_span);
  const double gain = r.uniform(p.gain_lo, p.gain_hi);
  const double phase0 = r.uniform(0.0, 2.0 * M_PI);
  const size_t onset = static_cast<size_t>(r.uniform_int(
      static_cast<uint64_t>(p.onset_jitter_frac * static_cast<double>(n)) + 1));

  const double sweep_len = duration_s;  // chirp rate defined over the full clip
  const double rate = (f1 - f0) / sweep_len;
  double signal_power = 0.0;
  for (size_t i = onset; i < n; ++i) {
    double t = static_cast<double>(i - onset) / sample_rate;
    double s = gain * p.chirp_amplitude *
               std::sin(phase0 + 2.0 * M_PI * (f0 * t + 0.5 * rate * t * t));
    w.samples[i] = s;
    signal_power += s * s;
  }
  signal_power /= static_cast<double>(n);
  const double noise_power = signal_power / std::pow(10.0, p.noise_snr_db / 10.0);
  const double noise_std = std::sqrt(noise_power);
  for (size_t i = 0; i < n; ++i) w.samples[i] += noise_std * r.normal();
  for (double& s : w.samples) s = std::clamp(s, -1.0, 1.0);
  return w;
}

// Writes per-class WAVs under out_dir/wav/ and a manifest at
// out_dir/manifest.tsv. Pure function of its arguments.
inline Manifest generate_synthetic_corpus(int n_keywords, int per_class, double duration_s,
                                          int sample_rate, uint64_t seed,
                                          const std::filesystem::path& out_dir,
                                          const std::string& split_tag = "train",
                                          const SynthesisParams& params = {}) {
  MTKWS_REQUIRE(n_keywords >= 2, ErrorKind::kPrecondition, "need at least 2 keyword classes");
  MTKWS_REQUIRE(per_class >= 1, ErrorKind::kPrecondition, "need at least 1 utterance per class");
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "wav", ec);
  MTKWS_REQUIRE(std::filesystem::is_directory(out_dir / "wav"), ErrorKind::kIo,
                "cannot create output directory: " + (out_dir / "wav").string());

  Manifest m;
  m.base_dir = out_dir;
  m.split_tag = split_tag;
  for (int k = 0; k < n_keywords; ++k) m.keyword_names.push_back("kw" + std::to_string(k));
  for (int k = 0; k < n_keywords; ++k) {
    for (int i = 0; i < per_class; ++i) {
      char idbuf[64];
      std::snprintf(idbuf, sizeof(idbuf), "%s_k%02d_u%04d", split_tag.c_str(), k, i);
      UtteranceRecord r;
      r.id = idbuf;
      r.path = std::string("wav/") + idbuf + ".wav";
      r.keyword = k;
      r.duration_s = duration_s;
      r.sample_rate = sample_rate;
      Waveform w = synthesize_utterance(k, n_keywords, i, duration_s, sample_rate, seed, params);
      write_wav(out_dir / r.path, w);
      m.records.push_back(std::move(r));
    }
  }
  write_manifest(out_dir / "manifest.tsv", m);
  return m;
}

// `repeats` independent draws of `shots` records per class, uniform without
// replacement. Child seed per (shots, repeat) so changing `repeats` never
// perturbs earlier subsets.
inline std::vector<FewShotSubset> sample_few_shot(const Manifest& manifest, int shots,
                                                  int repeats, uint64_t seed) {
  MTKWS_REQUIRE(shots >= 1 && repeats >= 1, ErrorKind::kPrecondition,
                "shots and repeats must be positive");
  auto groups = manifest.by_class();
  for (size_t k = 0; k < groups.size(); ++k) {
    if (static_cast<int>(groups[k].size()) < shots)
      raise(ErrorKind::kInsufficientData,
            "class " + manifest.keyword_names[k] + " has " + std::to_string(groups[k].size()) +
                " records, fewer than shots=" + std::to_string(shots));
  }
  std::vector<FewShotSubset> subsets;
  subsets.reserve(repeats);
  for (int rep = 0; rep < repeats; ++rep) {
    Rng rng(derive_seed(seed, {UINT64_C(0xfe57), static_cast<uint64_t>(shots),
                               static_cast<uint64_t>(rep)}));
    FewShotSubset s;
    s.shots = shots;
    s.repeat_index = rep;
    for (auto& group : groups) {
      std::vector<size_t> pool = group;
      rng.shuffle_prefix(pool, static_cast<size_t>(shots));
      for (int i = 0; i < shots; ++i) s.record_ids.push_back(manifest.records[pool[i]].id);
    }
    subsets.push_back(std::move(s));
  }
  return subsets;
}

}  // namespace mtkws

#endif  // MTKWS_CORPUS_HPP
