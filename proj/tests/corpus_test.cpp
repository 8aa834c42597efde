// tests/corpus_test.cpp

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

#include "mtkws/corpus.hpp"

#include <gtest/gtest.h>

#include <complex>
#include <map>
#include <set>

#include "test_util.hpp"

namespace mtkws {
namespace {

using test::TempDir;

Manifest tiny_manifest() {
  Manifest m;
  m.keyword_names = {"yes", "no"};
  m.split_tag = "train";
  m.records = {{"a", "wav/a.wav", 0, 1.0, 16000},
               {"b", "wav/b.wav", 1, 1.0, 16000},
               {"c", "wav/c.wav", 0, 1.0, 16000}};
  return m;
}

TEST(Manifest, RoundTripPreservesOrder) {
  TempDir dir("manifest");
  Manifest m = tiny_manifest();
  write_manifest(dir.path() / "manifest.tsv", m);
  Manifest loaded = load_manifest(dir.path() / "manifest.tsv");
  ASSERT_EQ(loaded.records.size(), 3u);
  EXPECT_EQ(loaded.records[0].id, "a");
  EXPECT_EQ(loaded.records[1].id, "b");
  EXPECT_EQ(loaded.records[2].id, "c");
  EXPECT_EQ(loaded.records, m.records);
  EXPECT_EQ(loaded.keyword_names, m.keyword_names);
  EXPECT_EQ(loaded.split_tag, m.split_tag);
}

TEST(Manifest, DuplicateIdIsIntegrityError) {
  TempDir dir("manifest");
  std::string text =
      "#keywords:yes,no\n#split:train\n"
      "a\twav/a.wav\t0\t1.0\t16000\n"
      "a\twav/a2.wav\t1\t1.0\t16000\n";
  write_text_file(dir.path() / "manifest.tsv", text);
  try {
    load_manifest(dir.path() / "manifest.tsv");
    FAIL() << "expected integrity error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIntegrity);
  }
}

TEST(Manifest, HeaderOnlyFileIsValidAndEmpty) {
  TempDir dir("manifest");
  write_text_file(dir.path() / "manifest.tsv", "#keywords:yes,no\n#split:test\n");
  Manifest m = load_manifest(dir.path() / "manifest.tsv");
  EXPECT_TRUE(m.records.empty());
  EXPECT_EQ(m.num_keywords(), 2);
  EXPECT_EQ(m.split_tag, "test");
}

TEST(Manifest, ParseFailureNamesTheLine) {
  TempDir dir("manifest");
  write_text_file(dir.path() / "manifest.tsv",
                  "#keywords:yes,no\n#split:train\na\twav/a.wav\t0\t1.0\n");
  try {
    load_manifest(dir.path() / "manifest.tsv");
    FAIL() << "expected malformed-manifest error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kMalformedManifest);
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(SyntheticCorpus, CountsAndBalance) {
  TempDir dir("synth");
  Manifest m = generate_synthetic_corpus(10, 20, 1.0, 16000, 7, dir.path());
  EXPECT_EQ(m.records.size(), 200u);
  std::map<int, int> per_class;
  for (const auto& r : m.records) per_class[r.keyword]++;
  ASSERT_EQ(per_class.size(), 10u);
  for (const auto& [k, n] : per_class) EXPECT_EQ(n, 20) << "class " << k;
  // duration/sample-count invariant on disk
  Waveform w = read_wav(m.audio_path(m.records[0]));
  EXPECT_EQ(w.samples.size(), 16000u);
  EXPECT_EQ(w.sample_rate, 16000);
}

TEST(SyntheticCorpus, SameSeedGivesByteIdenticalAudio) {
  TempDir d1("synth_a"), d2("synth_b");
  Manifest m1 = generate_synthetic_corpus(3, 2, 0.5, 16000, 7, d1.path());
  Manifest m2 = generate_synthetic_corpus(3, 2, 0.5, 16000, 7, d2.path());
  ASSERT_EQ(m1.records.size(), m2.records.size());
  for (size_t i = 0; i < m1.records.size(); ++i) {
    std::string b1 = read_text_file(m1.audio_path(m1.records[i]));
    std::string b2 = read_text_file(m2.audio_path(m2.records[i]));
    EXPECT_EQ(b1, b2) << m1.records[i].id;
  }
}

TEST(SyntheticCorpus, DifferentSeedChangesAudio) {
  TempDir d1("synth_a"), d2("synth_b");
  Manifest m1 = generate_synthetic_corpus(2, 1, 0.5, 16000, 7, d1.path());
  Manifest m2 = generate_synthetic_corpus(2, 1, 0.5, 16000, 8, d2.path());
  EXPECT_NE(read_text_file(m1.audio_path(m1.records[0])),
            read_text_file(m2.audio_path(m2.records[0])));
}

// Goertzel-style magnitude at one frequency.
double dft_magnitude(const Waveform& w, double freq_hz) {
  std::complex<double> acc(0.0, 0.0);
  for (size_t i = 0; i < w.samples.size(); ++i) {
    double phase = -2.0 * M_PI * freq_hz * static_cast<double>(i) / w.sample_rate;
    acc += w.samples[i] * std::complex<double>(std::cos(phase), std::sin(phase));
  }
  return std::abs(acc);
}

TEST(SyntheticCorpus, ClassTemplatesHaveDistinctSpectralPeaks) {
  TempDir dir("synth");
  Manifest m = generate_synthetic_corpus(2, 1, 1.0, 16000, 3, dir.path());
  ASSERT_EQ(m.records.size(), 2u);
  // probe each file at both class bands (chirp sweeps base..1.25*base)
  double f0 = class_base_frequency(0, 2);
  double f1 = class_base_frequency(1, 2);
  for (const auto& r : m.records) {
    Waveform w = read_wav(m.audio_path(r));
    double own = 0.0, other = 0.0;
    for (double frac : {1.0, 1.05, 1.1, 1.15, 1.2, 1.25}) {
      double base_own = r.keyword == 0 ? f0 : f1;
      double base_other = r.keyword == 0 ? f1 : f0;
      own = std::max(own, dft_magnitude(w, base_own * frac));
      other = std::max(other, dft_magnitude(w, base_other * frac));
    }
    EXPECT_GT(own, 3.0 * other) << "utterance " << r.id;
  }
}

TEST(FewShot, PaperShapedSampling) {
  Manifest m;
  m.split_tag = "train";
  for (int k = 0; k < 35; ++k) m.keyword_names.push_back("w" + std::to_string(k));
  for (int k = 0; k < 35; ++k)
    for (int i = 0; i < 20; ++i)
      m.records.push_back({"u" + std::to_string(k) + "_" + std::to_string(i), "x.wav", k, 1.0,
                           16000});
  auto subsets = sample_few_shot(m, 15, 5, 1);
  ASSERT_EQ(subsets.size(), 5u);
  for (const auto& s : subsets) {
    EXPECT_EQ(s.record_ids.size(), 525u);
    std::map<int, int> per_class;
    std::set<std::string> uniq(s.record_ids.begin(), s.record_ids.end());
    EXPECT_EQ(uniq.size(), s.record_ids.size());  // without replacement
    for (const auto& id : s.record_ids) per_class[m.by_id(id).keyword]++;
    for (const auto& [k, n] : per_class) EXPECT_EQ(n, 15) << "class " << k;
  }
}

TEST(FewShot, ExhaustionEqualsFullInventory) {
  Manifest m = tiny_manifest();
  m.records.push_back({"d", "wav/d.wav", 1, 1.0, 16000});
  auto subsets = sample_few_shot(m, 2, 3, 9);
  for (const auto& s : subsets) {
    std::set<std::string> got(s.record_ids.begin(), s.record_ids.end());
    EXPECT_EQ(got, std::set<std::string>({"a", "b", "c", "d"}));
  }
}

TEST(FewShot, InsufficientClassNamesTheClass) {
  Manifest m = tiny_manifest();
  m.records.push_back({"e", "wav/e.wav", 0, 1.0, 16000});
  m.records.push_back({"f", "wav/f.wav", 1, 1.0, 16000});  // "no" now has 2 < 3
  try {
    sample_few_shot(m, 3, 1, 0);
    FAIL() << "expected insufficient-data error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInsufficientData);
    EXPECT_NE(std::string(e.what()).find("no"), std::string::npos);
  }
}

TEST(FewShot, ChangingRepeatsKeepsEarlierSubsets) {
  Manifest m;
  m.split_tag = "train";
  for (int k = 0; k < 4; ++k) m.keyword_names.push_back("w" + std::to_string(k));
  for (int k = 0; k < 4; ++k)
    for (int i = 0; i < 8; ++i)
      m.records.push_back({"u" + std::to_string(k) + "_" + std::to_string(i), "x.wav", k, 1.0,
                           16000});
  auto two = sample_few_shot(m, 3, 2, 42);
  auto five = sample_few_shot(m, 3, 5, 42);
  EXPECT_EQ(two[0].record_ids, five[0].record_ids);
  EXPECT_EQ(two[1].record_ids, five[1].record_ids);
}

TEST(FewShot, SubsetsShapedForRandomParams) {
  Manifest m;
  m.split_tag = "train";
  for (int k = 0; k < 6; ++k) m.keyword_names.push_back("w" + std::to_string(k));
  for (int k = 0; k < 6; ++k)
    for (int i = 0; i < 9; ++i)
      m.records.push_back({"u" + std::to_string(k) + "_" + std::to_string(i), "x.wav", k, 1.0,
                           16000});
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    int shots = 1 + static_cast<int>(rng.uniform_int(9));
    uint64_t seed = rng.raw();
    auto subsets = sample_few_shot(m, shots, 2, seed);
    for (const auto& s : subsets) {
      EXPECT_EQ(s.record_ids.size(), static_cast<size_t>(shots) * 6);
      std::map<int, int> per_class;
      for (const auto& id : s.record_ids) per_class[m.by_id(id).keyword]++;
      for (const auto& [k, n] : per_class) EXPECT_EQ(n, shots);
    }
  }
}

}  // namespace
}  // namespace mtkws
