// mtkws/audio.hpp

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

#ifndef MTKWS_AUDIO_HPP
#define MTKWS_AUDIO_HPP

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "mtkws/common.hpp"

namespace mtkws {

struct Waveform {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate = 0;          // Hz

  size_t size() const { return samples.size(); }
};

inline double rms(const Waveform& w) {
  double acc = 0.0;
  for (double s : w.samples) acc += s * s;
  return w.samples.empty() ? 0.0 : std::sqrt(acc / static_cast<double>(w.samples.size()));
}

namespace wav_detail {

inline void put_u32(std::vector<unsigned char>& b, uint32_t v) {
  b.push_back(v & 0xff);
  b.push_back((v >> 8) & 0xff);
  b.push_back((v >> 16) & 0xff);
  b.push_back((v >> 24) & 0xff);
}

inline void put_u16(std::vector<unsigned char>& b, uint16_t v) {
  b.push_back(v & 0xff);
  b.push_back((v >> 8) & 0xff);
}

inline uint32_t get_u32(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

inline uint16_t get_u16(const unsigned char* p) {
  return static_cast<uint16_t>(p[0]) | (static_cast<uint16_t>(p[1]) << 8);
}

}  // namespace wav_detail

inline int16_t sample_to_pcm16(double s) {
  if (s > 1.0) s = 1.0;
  if (s < -1.0) s = -1.0;
  double v = s * 32767.0;
  return static_cast<int16_t>(v >= 0.0 ? v + 0.5 : v - 0.5);
}

// 16-bit PCM mono.
inline void write_wav(const std::filesystem::path& path, const Waveform& w) {
  MTKWS_REQUIRE(w.sample_rate > 0, ErrorKind::kPrecondition, "sample rate must be positive");
  using namespace wav_detail;
  const uint32_t n = static_cast<uint32_t>(w.samples.size());
  const uint32_t data_bytes = n * 2;
  std::vector<unsigned char> buf;
  buf.reserve(44 + data_bytes);
  const char* riff = "RIFF";
  buf.insert(buf.end(), riff, riff + 4);
  put_u32(buf, 36 + data_bytes);
  const char* wave_fmt = "WAVEfmt ";
  buf.insert(buf.end(), wave_fmt, wave_fmt + 8);
  put_u32(buf, 16);                                    // fmt chunk size
  put_u16(buf, 1);                                     // PCM
  put_u16(buf, 1);                                     // mono
  put_u32(buf, static_cast<uint32_t>(w.sample_rate));  // sample rate
  put_u32(buf, static_cast<uint32_t>(w.sample_rate) * 2);
  put_u16(buf, 2);   // block align
  put_u16(buf, 16);  // bits per sample
  const char* data = "data";
  buf.insert(buf.end(), data, data + 4);
  put_u32(buf, data_bytes);
  for (uint32_t i = 0; i < n; ++i) {
    int16_t v = sample_to_pcm16(w.samples[i]);
    buf.push_back(static_cast<unsigned char>(v & 0xff));
    buf.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
  }
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  MTKWS_REQUIRE(out.good(), ErrorKind::kIo, "cannot open for write: " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  out.flush();
  MTKWS_REQUIRE(out.good(), ErrorKind::kIo, "short write: " + path.string());
}

inline Waveform read_wav(const std::filesystem::path& path) {
  using namespace wav_detail;
  std::ifstream in(path, std::ios::binary);
  MTKWS_REQUIRE(in.good(), ErrorKind::kIo, "cannot open: " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  MTKWS_REQUIRE(buf.size() >= 44 && std::memcmp(buf.data(), "RIFF", 4) == 0 &&
                    std::memcmp(buf.data() + 8, "WAVE", 4) == 0,
                ErrorKind::kIo, "not a RIFF/WAVE file: " + path.string());
  size_t pos = 12;
  int sample_rate = 0;
  uint16_t bits = 0, channels = 0, format = 0;
  const unsigned char* data_ptr = nullptr;
  uint32_t data_len = 0;
  while (pos + 8 <= buf.size()) {
    const unsigned char* hdr = buf.data() + pos;
    uint32_t chunk_len = get_u32(hdr + 4);
    const unsigned char* body = hdr + 8;
    if (pos + 8 + chunk_len > buf.size()) break;
    if (std::memcmp(hdr, "fmt ", 4) == 0 && chunk_len >= 16) {
      format = get_u16(body);
      channels = get_u16(body + 2);
      sample_rate = static_cast<int>(get_u32(body + 4));
      bits = get_u16(body + 14);
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data_ptr = body;
      data_len = chunk_len;
    }
    pos += 8 + chunk_len + (chunk_len & 1);  // chunks are word-aligned
  }
  MTKWS_REQUIRE(format == 1 && bits == 16 && channels == 1, ErrorKind::kIo,
                "expected 16-bit PCM mono: " + path.string());
  MTKWS_REQUIRE(data_ptr != nullptr, ErrorKind::kIo, "no data chunk: " + path.string());
  Waveform w;
  w.sample_rate = sample_rate;
  size_t n = data_len / 2;
  w.samples.resize(n);
  for (size_t i = 0; i < n; ++i) {
    int16_t v = static_cast<int16_t>(get_u16(data_ptr + 2 * i));
    w.samples[i] = static_cast<double>(v) / 32767.0;
  }
  return w;
}

}  // namespace mtkws

#endif  // MTKWS_AUDIO_HPP
