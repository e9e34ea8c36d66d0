#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "waveglow/audio.hpp"
#include "waveglow/dsp.hpp"
#include "waveglow/errors.hpp"

namespace waveglow {

inline constexpr int kNumMels = 80;
inline constexpr double kLogFloor = 1e-5;

// HTK mel scale.
inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

enum class MelNorm {
  kArea,     // each filter scaled by 2/(f_upper - f_lower)
  kUnitSum,  // each row divided by its sum
};

struct MelFilterbank {
  Eigen::MatrixXd weights;          // n_mels x n_bins
  std::vector<double> centers_hz;   // peak frequency per filter
  int sample_rate = kSampleRate;
};

inline MelFilterbank mel_filterbank(int n_mels = kNumMels, int n_fft = kNFft,
                                    int sample_rate = kSampleRate,
                                    MelNorm norm = MelNorm::kArea) {
  if (n_mels >= n_fft / 2)
    throw ConfigError("mel_filterbank: n_mels " + std::to_string(n_mels) +
                      " must be < n_fft/2 = " + std::to_string(n_fft / 2));
  const int n_bins = n_fft / 2 + 1;
  // n_mels + 2 equally spaced mel points spanning 0 .. Nyquist.
  std::vector<double> edges(static_cast<size_t>(n_mels) + 2);
  const double mel_max = hz_to_mel(sample_rate / 2.0);
  for (int i = 0; i < n_mels + 2; ++i)
    edges[static_cast<size_t>(i)] = mel_to_hz(mel_max * i / (n_mels + 1));

  MelFilterbank fb;
  fb.sample_rate = sample_rate;
  fb.weights = Eigen::MatrixXd::Zero(n_mels, n_bins);
  fb.centers_hz.resize(static_cast<size_t>(n_mels));
  for (int m = 0; m < n_mels; ++m) {
    const double lo = edges[static_cast<size_t>(m)];
    const double mid = edges[static_cast<size_t>(m) + 1];
    const double hi = edges[static_cast<size_t>(m) + 2];
    fb.centers_hz[static_cast<size_t>(m)] = mid;
    for (int k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / n_fft;
      const double up = (f - lo) / (mid - lo);
      const double down = (hi - f) / (hi - mid);
      double w = std::max(0.0, std::min(up, down));
      if (norm == MelNorm::kArea) w *= 2.0 / (hi - lo);
      fb.weights(m, k) = w;
    }
    if (norm == MelNorm::kUnitSum) {
      const double s = fb.weights.row(m).sum();
      if (s > 0) fb.weights.row(m) /= s;
    }
  }
  return fb;
}

struct MelSpectrogram {
  Eigen::MatrixXd values;  // n_mels x frames, natural log with floor kLogFloor
  int sample_rate = kSampleRate;

  std::int64_t n_mels() const { return values.rows(); }
  std::int64_t frames() const { return values.cols(); }
};

// log(max(filterbank . |STFT|, 1e-5)); natural log.
inline MelSpectrogram mel_spectrogram(const AudioClip& clip, const MelFilterbank& fb) {
  const Spectrogram spec = stft(clip.samples);
  const Eigen::MatrixXd mag = spec.cwiseAbs();
  MelSpectrogram mel;
  mel.sample_rate = clip.sample_rate;
  mel.values = (fb.weights * mag).cwiseMax(kLogFloor).array().log().matrix();
  return mel;
}

// ---------------------------------------------------------------------------
// Binary mel container: 16-byte header ("WGLOWMELSPEC" + u32 version), two
// u64 little-endian dims (mels, frames), then row-major f32 values.
// ---------------------------------------------------------------------------

inline constexpr char kMelMagic[12] = {'W', 'G', 'L', 'O', 'W', 'M',
                                       'E', 'L', 'S', 'P', 'E', 'C'};
inline constexpr std::uint32_t kMelVersion = 1;

inline void save_mel(const std::string& path, const MelSpectrogram& mel) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("mel: cannot write '" + path + "'");
  out.write(kMelMagic, sizeof(kMelMagic));
  detail::write_le<std::uint32_t>(out, kMelVersion);
  detail::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(mel.values.rows()));
  detail::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(mel.values.cols()));
  for (Eigen::Index r = 0; r < mel.values.rows(); ++r)
    for (Eigen::Index c = 0; c < mel.values.cols(); ++c) {
      const auto v = static_cast<float>(mel.values(r, c));
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      detail::write_le<std::uint32_t>(out, bits);
    }
  if (!out) throw FormatError("mel: write failed for '" + path + "'");
}

inline MelSpectrogram load_mel(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("mel: cannot open '" + path + "'");
  char magic[sizeof(kMelMagic)];
  if (!in.read(magic, sizeof(magic)) ||
      std::memcmp(magic, kMelMagic, sizeof(magic)) != 0)
    throw FormatError("mel: '" + path + "': bad magic");
  const auto version = detail::read_le<std::uint32_t>(in, "mel version");
  if (version != kMelVersion)
    throw FormatError("mel: '" + path + "': unsupported version " +
                      std::to_string(version));
  const auto rows = detail::read_le<std::uint64_t>(in, "mel rows");
  const auto cols = detail::read_le<std::uint64_t>(in, "mel cols");
  if (rows == 0 || cols == 0 || rows > 1 << 20 || cols > 1u << 30)
    throw FormatError("mel: '" + path + "': implausible dims " +
                      std::to_string(rows) + "x" + std::to_string(cols));
  MelSpectrogram mel;
  mel.values.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::uint64_t r = 0; r < rows; ++r)
    for (std::uint64_t c = 0; c < cols; ++c) {
      const auto bits = detail::read_le<std::uint32_t>(in, "mel data");
      float v;
      std::memcpy(&v, &bits, 4);
      mel.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v;
    }
  return mel;
}

}  // namespace waveglow
