#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "waveglow/audio.hpp"
#include "waveglow/flow.hpp"
#include "waveglow/mel.hpp"
#include "waveglow/rng.hpp"

namespace waveglow {

struct SynthesisRequest {
  double sigma = 0.6;
  std::uint64_t seed = 1;

  void validate() const {
    if (sigma < 0) throw ConfigError("synthesize: sigma must be >= 0");
  }
};

template <typename T>
struct SynthResult {
  AudioClip audio;
  Tensor<T> z;                // the latent actually used, [1, group, Tg]
  double clip_fraction = 0;   // fraction of samples clamped to [-1, 1]
};

// Samples z ~ N(0, sigma^2 I) from the seeded generator and runs the flow
// backwards. Output length is frames*hop trimmed down to a group multiple.
template <typename T>
SynthResult<T> synthesize(const WaveGlowModel<T>& model, const MelSpectrogram& mel,
                          const SynthesisRequest& req) {
  req.validate();
  NoGradGuard ng;
  const auto group = model.config().group;
  const std::int64_t raw_len = mel.frames() * kHop;
  const std::int64_t out_len = raw_len - raw_len % group;
  if (out_len < group)
    throw ShapeError("synthesize: mel with " + std::to_string(mel.frames()) +
                     " frames yields no audio");
  Rng rng(req.seed);
  SynthResult<T> result;
  result.z = Tensor<T>::randn({1, group, out_len / group}, rng, req.sigma);
  Tensor<T> mel_t = mel_to_tensor<T>(mel);
  Tensor<T> audio = model.inverse(result.z, mel_t);

  result.audio.sample_rate = mel.sample_rate;
  result.audio.samples.resize(static_cast<size_t>(out_len));
  std::int64_t clipped = 0;
  for (std::int64_t i = 0; i < out_len; ++i) {
    double v = static_cast<double>(audio.at(i));
    if (v < -1.0 || v > 1.0) {
      v = std::clamp(v, -1.0, 1.0);
      ++clipped;
    }
    result.audio.samples[static_cast<size_t>(i)] = v;
  }
  result.clip_fraction = static_cast<double>(clipped) / static_cast<double>(out_len);
  return result;
}

inline constexpr double kClipWarnFraction = 1e-3;

struct BenchReport {
  std::int64_t samples = 0;
  double seconds = 0;          // median over timed repetitions
  double rate_khz = 0;         // samples / seconds / 1000
  double realtime_factor = 0;  // rate_khz / 22.05
  std::vector<double> per_rep_seconds;

  std::string text() const {
    std::string s;
    s += "samples\t" + std::to_string(samples) + "\n";
    s += "median_seconds\t" + std::to_string(seconds) + "\n";
    s += "rate_khz\t" + std::to_string(rate_khz) + "\n";
    s += "realtime_factor\t" + std::to_string(realtime_factor) + "\n";
    s += "prng\t" + std::string(Rng::kAlgorithm) + "\n";
    for (size_t i = 0; i < per_rep_seconds.size(); ++i)
      s += "rep" + std::to_string(i) + "_seconds\t" + std::to_string(per_rep_seconds[i]) +
           "\n";
    return s;
  }
};

// Times synthesis over `repetitions` runs; the first is discarded as warm-up
// and the median of the rest is reported.
template <typename T>
BenchReport benchmark(const WaveGlowModel<T>& model, const MelSpectrogram& mel,
                      int repetitions, const SynthesisRequest& req) {
  if (repetitions < 3)
    throw ConfigError("benchmark: need at least 3 repetitions, got " +
                      std::to_string(repetitions));
  BenchReport report;
  for (int r = 0; r < repetitions; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto result = synthesize(model, mel, req);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.samples = result.audio.size();
    if (r > 0) report.per_rep_seconds.push_back(secs);
  }
  std::vector<double> sorted = report.per_rep_seconds;
  std::sort(sorted.begin(), sorted.end());
  const size_t n = sorted.size();
  report.seconds = (n % 2 == 1) ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  report.rate_khz = static_cast<double>(report.samples) / report.seconds / 1000.0;
  report.realtime_factor = report.rate_khz / (kSampleRate / 1000.0);
  return report;
}

}  // namespace waveglow
