#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "waveglow/mel.hpp"
#include "waveglow/ops.hpp"
#include "waveglow/rng.hpp"
#include "waveglow/tensor.hpp"

namespace waveglow {

struct WNConfig {
  int n_layers = 8;
  int residual_channels = 512;
  int skip_channels = 256;
  int kernel = 3;  // odd; symmetric padding keeps time length
  int in_half_channels = 4;
  int out_half_channels = 4;
  int cond_channels = 640;

  std::int64_t dilation(int layer) const { return std::int64_t(1) << layer; }
};

// Weight-normalized convolution parameters: effective weight = g * v/||v||.
template <typename T>
struct NormConv {
  Tensor<T> v;  // direction [Cout, Cin, K]
  Tensor<T> g;  // per-output-channel magnitude [Cout]
  Tensor<T> b;  // bias [Cout]

  static NormConv init(std::int64_t cout, std::int64_t cin, std::int64_t k, Rng& rng) {
    NormConv c;
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(cin * k));
    c.v = Tensor<T>::randn({cout, cin, k}, rng, std_dev, true);
    // g starts at ||v|| so the effective weight equals v at step 0.
    c.g = Tensor<T>::zeros({cout}, true);
    for (std::int64_t r = 0; r < cout; ++r) {
      T n = T(0);
      for (std::int64_t i = 0; i < cin * k; ++i) {
        const T x = c.v.at(r * cin * k + i);
        n += x * x;
      }
      c.g.at(r) = std::sqrt(n);
    }
    c.b = Tensor<T>::zeros({cout}, true);
    return c;
  }

  Tensor<T> weight() const { return weight_norm(v, g); }
};

template <typename T>
struct WNParams {
  WNConfig cfg;
  NormConv<T> input_proj;              // in_half -> residual, K=1
  std::vector<NormConv<T>> dilated;    // residual -> 2*residual, K=kernel
  std::vector<NormConv<T>> cond_proj;  // cond -> 2*residual, K=1
  std::vector<NormConv<T>> res_proj;   // residual -> residual, K=1 (layers 0..L-2)
  std::vector<NormConv<T>> skip_proj;  // residual -> skip, K=1
  Tensor<T> final_w;                   // skip -> 2*out_half, K=1; zero init
  Tensor<T> final_b;

  static WNParams init(const WNConfig& cfg, Rng& rng) {
    WNParams p;
    p.cfg = cfg;
    const std::int64_t R = cfg.residual_channels, S = cfg.skip_channels;
    p.input_proj = NormConv<T>::init(R, cfg.in_half_channels, 1, rng);
    for (int i = 0; i < cfg.n_layers; ++i) {
      p.dilated.push_back(NormConv<T>::init(2 * R, R, cfg.kernel, rng));
      p.cond_proj.push_back(NormConv<T>::init(2 * R, cfg.cond_channels, 1, rng));
      if (i + 1 < cfg.n_layers) p.res_proj.push_back(NormConv<T>::init(R, R, 1, rng));
      p.skip_proj.push_back(NormConv<T>::init(S, R, 1, rng));
    }
    // Zero final projection: the coupling starts as the identity. Left
    // un-normalized because a zero direction has no well-defined norm.
    p.final_w = Tensor<T>::zeros({2 * cfg.out_half_channels, S, 1}, true);
    p.final_b = Tensor<T>::zeros({2 * cfg.out_half_channels}, true);
    return p;
  }

  template <typename Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    auto norm = [&](const std::string& name, NormConv<T>& c) {
      fn(prefix + name + ".v", c.v);
      fn(prefix + name + ".g", c.g);
      fn(prefix + name + ".b", c.b);
    };
    norm("input", input_proj);
    for (int i = 0; i < cfg.n_layers; ++i) {
      const std::string l = "layer" + std::to_string(i) + ".";
      norm(l + "dilated", dilated[static_cast<size_t>(i)]);
      norm(l + "cond", cond_proj[static_cast<size_t>(i)]);
      if (i + 1 < cfg.n_layers) norm(l + "res", res_proj[static_cast<size_t>(i)]);
      norm(l + "skip", skip_proj[static_cast<size_t>(i)]);
    }
    fn(prefix + "final.w", final_w);
    fn(prefix + "final.b", final_b);
  }
};

// Dilated gated conditioner: returns (log_s, t), each [B, out_half, Tg].
template <typename T>
std::pair<Tensor<T>, Tensor<T>> wn_apply(const Tensor<T>& x_a, const Tensor<T>& cond,
                                         const WNParams<T>& p) {
  const auto& cfg = p.cfg;
  if (cond.dim(2) != x_a.dim(2))
    throw ShapeError("wn_apply: conditioning length " + std::to_string(cond.dim(2)) +
                     " != input length " + std::to_string(x_a.dim(2)));
  const std::int64_t R = cfg.residual_channels;
  Tensor<T> resid = conv1d(x_a, p.input_proj.weight(), p.input_proj.b, 1, 0);
  Tensor<T> skip_sum;
  for (int i = 0; i < cfg.n_layers; ++i) {
    const auto d = cfg.dilation(i);
    const auto pad = d * (cfg.kernel - 1) / 2;
    const auto& dl = p.dilated[static_cast<size_t>(i)];
    const auto& cl = p.cond_proj[static_cast<size_t>(i)];
    Tensor<T> h = add(conv1d(resid, dl.weight(), dl.b, d, pad),
                      conv1d(cond, cl.weight(), cl.b, 1, 0));
    auto [ga, gb] = split_channels(h, R);
    Tensor<T> z = mul(tanh(ga), sigmoid(gb));
    if (i + 1 < cfg.n_layers) {
      const auto& rl = p.res_proj[static_cast<size_t>(i)];
      resid = add(resid, conv1d(z, rl.weight(), rl.b, 1, 0));
    }
    const auto& sl = p.skip_proj[static_cast<size_t>(i)];
    Tensor<T> s = conv1d(z, sl.weight(), sl.b, 1, 0);
    skip_sum = (i == 0) ? s : add(skip_sum, s);
  }
  Tensor<T> out = conv1d(skip_sum, p.final_w, p.final_b, 1, 0);
  return split_channels(out, cfg.out_half_channels);
}

// ---------------------------------------------------------------------------
// Mel conditioning: learned transposed-convolution upsampling to sample rate,
// then folding groups of samples into channels to match squeezed audio.
// ---------------------------------------------------------------------------

template <typename T>
struct Upsampler {
  Tensor<T> w;  // [n_mels, n_mels, kernel]
  Tensor<T> b;  // [n_mels]
  std::int64_t kernel = 1024;
  std::int64_t stride = 256;

  static Upsampler init(std::int64_t n_mels, std::int64_t kernel, std::int64_t stride,
                        Rng& rng) {
    Upsampler u;
    u.kernel = kernel;
    u.stride = stride;
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(n_mels * kernel));
    u.w = Tensor<T>::randn({n_mels, n_mels, kernel}, rng, std_dev, true);
    u.b = Tensor<T>::zeros({n_mels}, true);
    return u;
  }

  // mel [B, n_mels, frames] -> [B, n_mels*group, target_samples/group]
  Tensor<T> apply(const Tensor<T>& mel, std::int64_t group,
                  std::int64_t target_samples) const {
    if (target_samples % group != 0)
      throw ShapeError("upsample: target length " + std::to_string(target_samples) +
                       " not divisible by group " + std::to_string(group));
    const auto frames = mel.dim(2);
    const auto produced = (frames - 1) * stride + kernel;
    if (produced < target_samples) {
      const auto needed =
          (target_samples <= kernel) ? 1 : (target_samples - kernel + stride - 1) / stride + 1;
      throw ShapeError("upsample: mel covers " + std::to_string(produced) +
                       " samples from " + std::to_string(frames) + " frames, need " +
                       std::to_string(target_samples) + " (" + std::to_string(needed) +
                       " frames)");
    }
    Tensor<T> up = conv_transpose1d(mel, w, b, stride);
    up = trim_time(up, target_samples);
    return fold_groups(up, group);
  }
};

// Converts a log-mel matrix to a [1, n_mels, frames] tensor.
template <typename T>
Tensor<T> mel_to_tensor(const MelSpectrogram& mel) {
  const auto rows = static_cast<std::int64_t>(mel.values.rows());
  const auto cols = static_cast<std::int64_t>(mel.values.cols());
  Tensor<T> t = Tensor<T>::zeros({1, rows, cols});
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < cols; ++c)
      t.at(0, r, c) = static_cast<T>(mel.values(r, c));
  return t;
}

}  // namespace waveglow
