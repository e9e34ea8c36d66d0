#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <vector>

#include "waveglow/audio.hpp"
#include "waveglow/errors.hpp"

namespace waveglow {

inline constexpr int kNFft = 1024;
inline constexpr int kHop = 256;
inline constexpr int kNumBins = kNFft / 2 + 1;  // one-sided

// Complex one-sided spectrogram, kNumBins x frames.
using Spectrogram = Eigen::MatrixXcd;

namespace detail {

// Iterative radix-2 Cooley-Tukey; n must be a power of two.
inline void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
  const size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0)
    throw ShapeError("fft: length " + std::to_string(n) + " is not a power of two");
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? 2.0 : -2.0) * std::numbers::pi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse)
    for (auto& x : a) x /= static_cast<double>(n);
}

}  // namespace detail

// Periodic Hann of length n: w[k] = 0.5 - 0.5*cos(2*pi*k/n).
inline std::vector<double> hann_periodic(int n) {
  std::vector<double> w(static_cast<size_t>(n));
  for (int k = 0; k < n; ++k)
    w[static_cast<size_t>(k)] =
        0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * k / n);
  return w;
}

// Mirror padding without repeating the edge sample (bounces until in range).
inline std::vector<double> reflect_pad(const std::vector<double>& x, std::int64_t pad) {
  const auto n = static_cast<std::int64_t>(x.size());
  if (n < 1) throw ShapeError("reflect_pad: empty input");
  std::vector<double> y(static_cast<size_t>(n + 2 * pad));
  for (std::int64_t i = -pad; i < n + pad; ++i) {
    std::int64_t j = i;
    if (n == 1) {
      j = 0;
    } else {
      while (j < 0 || j >= n) {
        if (j < 0) j = -j;
        if (j >= n) j = 2 * (n - 1) - j;
      }
    }
    y[static_cast<size_t>(i + pad)] = x[static_cast<size_t>(j)];
  }
  return y;
}

// Centered STFT: reflect-pad by kNFft/2, periodic Hann, one-sided bins.
// frames = 1 + floor(len/kHop).
inline Spectrogram stft(const std::vector<double>& samples) {
  if (samples.empty()) throw ShapeError("stft: empty input");
  const auto padded = reflect_pad(samples, kNFft / 2);
  const auto win = hann_periodic(kNFft);
  const auto frames =
      1 + (static_cast<std::int64_t>(padded.size()) - kNFft) / kHop;
  Spectrogram spec(kNumBins, frames);
  std::vector<std::complex<double>> buf(kNFft);
  for (std::int64_t f = 0; f < frames; ++f) {
    const auto start = static_cast<size_t>(f * kHop);
    for (int k = 0; k < kNFft; ++k)
      buf[static_cast<size_t>(k)] = padded[start + static_cast<size_t>(k)] *
                                    win[static_cast<size_t>(k)];
    detail::fft_inplace(buf, false);
    for (int k = 0; k < kNumBins; ++k) spec(k, f) = buf[static_cast<size_t>(k)];
  }
  return spec;
}

// Overlap-add inverse with window-square normalization; returns out_len
// samples with the center padding removed. Accepts any out_len whose frame
// count matches the spectrogram.
inline std::vector<double> istft(const Spectrogram& spec, std::int64_t out_len) {
  const auto frames = spec.cols();
  if (spec.rows() != kNumBins)
    throw ShapeError("istft: expected " + std::to_string(kNumBins) + " bins, got " +
                     std::to_string(spec.rows()));
  if (1 + out_len / kHop != frames)
    throw ShapeError("istft: output length " + std::to_string(out_len) +
                     " implies " + std::to_string(1 + out_len / kHop) +
                     " frames, spectrogram has " + std::to_string(frames));
  const auto win = hann_periodic(kNFft);
  const auto padded_len = static_cast<std::int64_t>(out_len + kNFft);
  std::vector<double> acc(static_cast<size_t>(padded_len), 0.0);
  std::vector<double> wsq(static_cast<size_t>(padded_len), 0.0);
  std::vector<std::complex<double>> buf(kNFft);
  for (Eigen::Index f = 0; f < frames; ++f) {
    for (int k = 0; k < kNumBins; ++k) buf[static_cast<size_t>(k)] = spec(k, f);
    for (int k = kNumBins; k < kNFft; ++k)
      buf[static_cast<size_t>(k)] = std::conj(spec(kNFft - k, f));
    detail::fft_inplace(buf, true);
    const auto start = static_cast<size_t>(f) * kHop;
    for (int k = 0; k < kNFft; ++k) {
      const auto w = win[static_cast<size_t>(k)];
      acc[start + static_cast<size_t>(k)] += buf[static_cast<size_t>(k)].real() * w;
      wsq[start + static_cast<size_t>(k)] += w * w;
    }
  }
  std::vector<double> out(static_cast<size_t>(out_len));
  const auto off = static_cast<size_t>(kNFft / 2);
  for (std::int64_t i = 0; i < out_len; ++i) {
    const auto idx = off + static_cast<size_t>(i);
    out[static_cast<size_t>(i)] = wsq[idx] > 1e-11 ? acc[idx] / wsq[idx] : 0.0;
  }
  return out;
}

}  // namespace waveglow
