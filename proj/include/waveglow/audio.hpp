#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "waveglow/errors.hpp"

namespace waveglow {

inline constexpr int kSampleRate = 22050;

struct AudioClip {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate = kSampleRate;

  std::int64_t size() const { return static_cast<std::int64_t>(samples.size()); }
};

namespace detail {

template <typename T>
T read_le(std::istream& in, const char* field) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T)))
    throw FormatError(std::string("wav: truncated while reading ") + field);
  std::uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

template <typename T>
void write_le(std::ostream& out, T v) {
  auto u = static_cast<std::uint64_t>(static_cast<std::make_unsigned_t<T>>(v));
  for (size_t i = 0; i < sizeof(T); ++i)
    out.put(static_cast<char>((u >> (8 * i)) & 0xff));
}

}  // namespace detail

// 16-bit PCM mono RIFF/WAVE only; any other layout is rejected with the
// offending field named. Integer samples map to [-1,1) by division by 32768.
inline AudioClip load_wav(const std::string& path, int expected_rate = kSampleRate) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("wav: cannot open '" + path + "'");
  char tag[4];
  if (!in.read(tag, 4) || std::memcmp(tag, "RIFF", 4) != 0)
    throw FormatError("wav: '" + path + "': missing RIFF header");
  detail::read_le<std::uint32_t>(in, "riff size");
  if (!in.read(tag, 4) || std::memcmp(tag, "WAVE", 4) != 0)
    throw FormatError("wav: '" + path + "': form type is not WAVE");

  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0, format = 0;
  std::uint32_t rate = 0;
  AudioClip clip;
  bool have_data = false;
  while (in.peek() != std::char_traits<char>::eof()) {
    if (!in.read(tag, 4)) break;
    auto chunk_size = detail::read_le<std::uint32_t>(in, "chunk size");
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      format = detail::read_le<std::uint16_t>(in, "audio format");
      channels = detail::read_le<std::uint16_t>(in, "channels");
      rate = detail::read_le<std::uint32_t>(in, "sample rate");
      detail::read_le<std::uint32_t>(in, "byte rate");
      detail::read_le<std::uint16_t>(in, "block align");
      bits = detail::read_le<std::uint16_t>(in, "bits per sample");
      if (chunk_size > 16) in.seekg(chunk_size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw FormatError("wav: '" + path + "': data chunk before fmt");
      if (format != 1)
        throw FormatError("wav: '" + path + "': format=" + std::to_string(format) +
                          ", expected PCM (1)");
      if (channels != 1)
        throw FormatError("wav: '" + path + "': channels=" + std::to_string(channels) +
                          ", expected mono");
      if (bits != 16)
        throw FormatError("wav: '" + path + "': bits=" + std::to_string(bits) +
                          ", expected 16");
      if (static_cast<int>(rate) != expected_rate)
        throw FormatError("wav: '" + path + "': sample rate=" + std::to_string(rate) +
                          ", expected " + std::to_string(expected_rate) +
                          " (resampling not supported)");
      const std::uint32_t n = chunk_size / 2;
      clip.samples.resize(n);
      clip.sample_rate = static_cast<int>(rate);
      for (std::uint32_t i = 0; i < n; ++i)
        clip.samples[i] = detail::read_le<std::int16_t>(in, "sample data") / 32768.0;
      if (chunk_size % 2) in.seekg(1, std::ios::cur);  // pad byte
      have_data = true;
    } else {
      in.seekg(chunk_size + (chunk_size % 2), std::ios::cur);
    }
  }
  if (!have_data) throw FormatError("wav: '" + path + "': no data chunk");
  return clip;
}

inline void save_wav(const std::string& path, const AudioClip& clip) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("wav: cannot write '" + path + "'");
  const auto n = static_cast<std::uint32_t>(clip.samples.size());
  out.write("RIFF", 4);
  detail::write_le<std::uint32_t>(out, 36 + 2 * n);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  detail::write_le<std::uint32_t>(out, 16);
  detail::write_le<std::uint16_t>(out, 1);  // PCM
  detail::write_le<std::uint16_t>(out, 1);  // mono
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(clip.sample_rate));
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(clip.sample_rate) * 2);
  detail::write_le<std::uint16_t>(out, 2);   // block align
  detail::write_le<std::uint16_t>(out, 16);  // bits
  out.write("data", 4);
  detail::write_le<std::uint32_t>(out, 2 * n);
  for (double s : clip.samples) {
    auto q = static_cast<long>(std::lround(s * 32768.0));
    q = std::clamp(q, -32768L, 32767L);
    detail::write_le<std::int16_t>(out, static_cast<std::int16_t>(q));
  }
  if (!out) throw FormatError("wav: write failed for '" + path + "'");
}

}  // namespace waveglow
