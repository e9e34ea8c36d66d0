#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <complex>

#include "waveglow/audio.hpp"
#include "waveglow/dsp.hpp"
#include "waveglow/errors.hpp"

namespace waveglow {

// ||  |STFT(y)| - M ||_2 / ||M||_2
inline double spectral_distance(const Eigen::MatrixXd& target,
                                const std::vector<double>& y) {
  const Eigen::MatrixXd mag = stft(y).cwiseAbs();
  if (mag.rows() != target.rows() || mag.cols() != target.cols())
    throw ShapeError("spectral_distance: frame mismatch " + std::to_string(mag.cols()) +
                     " vs " + std::to_string(target.cols()));
  const double denom = target.norm();
  if (denom < 1e-12) return mag.norm();
  return (mag - target).norm() / denom;
}

// Iterative phase recovery from a magnitude spectrogram. Phase starts at
// zero; each round runs inverse-STFT then STFT and swaps the magnitude back
// in. iterations=0 returns the zero-phase inverse STFT. Output is
// peak-normalized to 0.99 (skipped for near-silent results). When
// distance_trace is given it receives ||  |STFT(y_it)| - M || / ||M|| for each
// iterate including the final one (iterations+1 entries).
inline AudioClip griffin_lim(const Eigen::MatrixXd& magnitude, int iterations = 60,
                             int sample_rate = kSampleRate,
                             std::vector<double>* distance_trace = nullptr) {
  if (magnitude.rows() != kNumBins)
    throw ShapeError("griffin_lim: expected " + std::to_string(kNumBins) +
                     " bins, got " + std::to_string(magnitude.rows()));
  if (magnitude.minCoeff() < 0.0)
    throw NumericError("griffin_lim: magnitude must be non-negative");
  const auto frames = magnitude.cols();
  const std::int64_t out_len = (frames - 1) * kHop;
  if (out_len < 1)
    throw ShapeError("griffin_lim: need at least 2 frames");

  const double mnorm = magnitude.norm();
  Spectrogram spec = magnitude.cast<std::complex<double>>();  // zero phase
  std::vector<double> y = istft(spec, out_len);
  for (int it = 0; it < iterations; ++it) {
    const Spectrogram analyzed = stft(y);
    if (distance_trace)
      distance_trace->push_back(mnorm < 1e-12
                                    ? 0.0
                                    : (analyzed.cwiseAbs() - magnitude).norm() / mnorm);
    for (Eigen::Index c = 0; c < frames; ++c)
      for (Eigen::Index r = 0; r < kNumBins; ++r)
        spec(r, c) = std::polar(magnitude(r, c), std::arg(analyzed(r, c)));
    y = istft(spec, out_len);
  }
  if (distance_trace)
    distance_trace->push_back(
        mnorm < 1e-12 ? 0.0 : (stft(y).cwiseAbs() - magnitude).norm() / mnorm);

  AudioClip clip;
  clip.sample_rate = sample_rate;
  clip.samples = std::move(y);
  double peak = 0.0;
  for (double s : clip.samples) peak = std::max(peak, std::abs(s));
  if (peak >= 1e-9)
    for (double& s : clip.samples) s *= 0.99 / peak;
  return clip;
}

}  // namespace waveglow
