#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "waveglow/ops.hpp"
#include "waveglow/rng.hpp"
#include "waveglow/tensor.hpp"
#include "waveglow/wn.hpp"

namespace waveglow {

struct ModelConfig {
  std::string preset = "tiny";
  int n_flows = 2;
  int group = 4;
  int early_every = 0;  // 0 disables early outputs
  int early_size = 2;
  int wn_layers = 2;
  int wn_residual = 16;
  int wn_skip = 16;
  int wn_kernel = 3;
  int n_mels = kNumMels;
  std::int64_t upsample_kernel = 1024;
  std::int64_t upsample_stride = 256;

  // Verification-scale model: group 4, 2 flows, WN 2 layers x 16 channels.
  static ModelConfig tiny() { return ModelConfig{}; }

  // Desk-scale training model: 4 flows, no early outputs, WN 4x64/64.
  static ModelConfig desk() {
    ModelConfig c;
    c.preset = "desk";
    c.n_flows = 4;
    c.group = 8;
    c.early_every = 0;
    c.wn_layers = 4;
    c.wn_residual = 64;
    c.wn_skip = 64;
    return c;
  }

  // Full-scale hyperparameters: 12 flows, group 8, early outputs of 2
  // channels every 4 flows, WN 8 layers x 512 residual / 256 skip.
  static ModelConfig paper() {
    ModelConfig c;
    c.preset = "paper";
    c.n_flows = 12;
    c.group = 8;
    c.early_every = 4;
    c.early_size = 2;
    c.wn_layers = 8;
    c.wn_residual = 512;
    c.wn_skip = 256;
    return c;
  }

  static ModelConfig by_name(const std::string& name) {
    if (name == "tiny") return tiny();
    if (name == "desk") return desk();
    if (name == "paper") return paper();
    throw ConfigError("unknown model preset '" + name + "' (tiny|desk|paper)");
  }

  // Channel width entering each flow, after any early diversion.
  std::vector<int> flow_widths() const {
    std::vector<int> widths;
    int c = group;
    for (int k = 0; k < n_flows; ++k) {
      if (early_every > 0 && k > 0 && k % early_every == 0) c -= early_size;
      if (c < 2)
        throw ConfigError("model config: early outputs exhaust channels at flow " +
                          std::to_string(k) + " (width " + std::to_string(c) + ")");
      widths.push_back(c);
    }
    return widths;
  }

  int final_width() const { return flow_widths().back(); }
};

// All three fields are graph tensors so the likelihood is differentiable.
template <typename T>
struct FlowOutput {
  Tensor<T> z;             // [B, group, T/group]
  Tensor<T> sum_log_s;     // scalar
  Tensor<T> sum_logdet_w;  // scalar
};

template <typename T>
class WaveGlowModel {
 public:
  WaveGlowModel(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    const auto widths = cfg.flow_widths();
    upsampler_ = Upsampler<T>::init(cfg.n_mels, cfg.upsample_kernel,
                                    cfg.upsample_stride, rng);
    for (int k = 0; k < cfg.n_flows; ++k) {
      const int c = widths[static_cast<size_t>(k)];
      conv_w_.push_back(orthonormal(c, rng));
      WNConfig wn;
      wn.n_layers = cfg.wn_layers;
      wn.residual_channels = cfg.wn_residual;
      wn.skip_channels = cfg.wn_skip;
      wn.kernel = cfg.wn_kernel;
      wn.in_half_channels = c / 2;
      wn.out_half_channels = c - c / 2;
      wn.cond_channels = cfg.n_mels * cfg.group;
      couplings_.push_back(WNParams<T>::init(wn, rng));
    }
    inv_cache_.resize(static_cast<size_t>(cfg.n_flows));
    register_params();
  }

  const ModelConfig& config() const { return cfg_; }
  const Upsampler<T>& upsampler() const { return upsampler_; }
  Tensor<T> conv_w(int k) const { return conv_w_[static_cast<size_t>(k)]; }
  const WNParams<T>& coupling(int k) const { return couplings_[static_cast<size_t>(k)]; }

  std::vector<std::pair<std::string, Tensor<T>>>& named_params() { return params_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& named_params() const {
    return params_;
  }

  Tensor<T> param(const std::string& name) {
    for (auto& [n, t] : params_)
      if (n == name) return t;
    throw ConfigError("no parameter named '" + name + "'");
  }

  // [B, n_mels, frames] conditioning for T samples of audio.
  Tensor<T> condition(const Tensor<T>& mel, std::int64_t target_samples) const {
    return upsampler_.apply(mel, cfg_.group, target_samples);
  }

  FlowOutput<T> forward(const Tensor<T>& audio, const Tensor<T>& mel) const {
    const auto B = audio.dim(0), Tn = audio.dim(1);
    Tensor<T> x = squeeze_groups(audio, cfg_.group);
    const auto Tg = x.dim(2);
    Tensor<T> cond = condition(mel, Tn);
    std::vector<Tensor<T>> z_parts;
    Tensor<T> sum_log_s = Tensor<T>::scalar(T(0));
    Tensor<T> sum_logdet = Tensor<T>::scalar(T(0));
    for (int k = 0; k < cfg_.n_flows; ++k) {
      if (cfg_.early_every > 0 && k > 0 && k % cfg_.early_every == 0) {
        auto [early, rest] = split_channels(x, cfg_.early_size);
        z_parts.push_back(early);
        x = rest;
      }
      const auto& W = conv_w_[static_cast<size_t>(k)];
      sum_logdet = add(sum_logdet, scale(logabsdet(W), static_cast<T>(B * Tg)));
      x = channel_mix(x, W);
      const auto half = x.dim(1) / 2;
      auto [xa, xb] = split_channels(x, half);
      auto [log_s, t] = wn_apply(xa, cond, couplings_[static_cast<size_t>(k)]);
      if (!all_finite(log_s))
        throw NumericError("flow " + std::to_string(k) +
                           ": non-finite log-scale in coupling");
      Tensor<T> xb2 = add(mul(exp(log_s), xb), t);
      sum_log_s = add(sum_log_s, sum(log_s));
      x = concat_channels<T>({xa, xb2});
    }
    z_parts.push_back(x);
    return FlowOutput<T>{concat_channels(z_parts), sum_log_s, sum_logdet};
  }

  Tensor<T> inverse(const Tensor<T>& z, const Tensor<T>& mel) const {
    if (z.ndim() != 3 || z.dim(1) != cfg_.group)
      throw ShapeError("inverse: expected z[B," + std::to_string(cfg_.group) +
                       ",Tg], got " + shape_str(z.shape()));
    const auto Tn = z.dim(2) * cfg_.group;
    Tensor<T> cond = condition(mel, Tn);
    // Peel the early outputs off the front of z in diversion order.
    std::vector<Tensor<T>> early;
    std::int64_t off = 0;
    const int n_early = cfg_.early_every > 0
                            ? (cfg_.n_flows - 1) / cfg_.early_every
                            : 0;
    for (int i = 0; i < n_early; ++i) {
      early.push_back(narrow_channels(z, off, cfg_.early_size));
      off += cfg_.early_size;
    }
    Tensor<T> x = narrow_channels(z, off, cfg_.group - off);
    for (int k = cfg_.n_flows - 1; k >= 0; --k) {
      const auto half = x.dim(1) / 2;
      auto [xa, xb2] = split_channels(x, half);
      auto [log_s, t] = wn_apply(xa, cond, couplings_[static_cast<size_t>(k)]);
      Tensor<T> xb = mul(sub(xb2, t), exp(neg(log_s)));
      x = concat_channels<T>({xa, xb});
      x = channel_mix(x, inverse_mixer(k));
      if (cfg_.early_every > 0 && k > 0 && k % cfg_.early_every == 0) {
        x = concat_channels<T>({early.back(), x});
        early.pop_back();
      }
    }
    return unsqueeze_groups(x);
  }

  // W^{-1} via LU with partial pivoting, cached against the current W values.
  Tensor<T> inverse_mixer(int k) const {
    const auto& W = conv_w_[static_cast<size_t>(k)];
    auto& cache = inv_cache_[static_cast<size_t>(k)];
    const auto n = static_cast<size_t>(W.numel());
    if (cache.key.size() == n &&
        std::memcmp(cache.key.data(), W.data().data(), n * sizeof(T)) == 0)
      return cache.inverse;
    const auto C = W.dim(0);
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> m(C, C);
    m = detail::CMapM<T>(W.data().data(), C, C);
    Eigen::PartialPivLU<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>> lu(m);
    T lad = T(0);
    for (std::int64_t i = 0; i < C; ++i) lad += std::log(std::abs(lu.matrixLU()(i, i)));
    if (!(lad > static_cast<T>(std::log(kSingularDetFloor))))
      throw NumericError("flow " + std::to_string(k) +
                         ": channel mixer is singular, |det| <= 1e-12");
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> inv = lu.inverse();
    Tensor<T> winv = Tensor<T>::zeros({C, C});
    detail::MapM<T>(winv.data().data(), C, C) = inv;
    cache.key.assign(W.data().begin(), W.data().end());
    cache.inverse = winv;
    return winv;
  }

 private:
  struct InvCache {
    std::vector<T> key;
    Tensor<T> inverse;
  };

  static Tensor<T> orthonormal(int c, Rng& rng) {
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> a(c, c);
    for (int i = 0; i < c; ++i)
      for (int j = 0; j < c; ++j) a(i, j) = static_cast<T>(rng.normal());
    Eigen::HouseholderQR<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>> qr(a);
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> q = qr.householderQ();
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> r = qr.matrixQR();
    // Fix the sign ambiguity so the factorization is unique: make diag(R) > 0.
    for (int j = 0; j < c; ++j)
      if (r(j, j) < T(0)) q.col(j) = -q.col(j);
    Tensor<T> w = Tensor<T>::zeros({c, c}, true);
    detail::MapM<T>(w.data().data(), c, c) = q;
    return w;
  }

  void register_params() {
    params_.emplace_back("upsample.w", upsampler_.w);
    params_.emplace_back("upsample.b", upsampler_.b);
    for (int k = 0; k < cfg_.n_flows; ++k) {
      const std::string prefix = "flow" + std::to_string(k) + ".";
      params_.emplace_back(prefix + "W", conv_w_[static_cast<size_t>(k)]);
      couplings_[static_cast<size_t>(k)].visit_params(
          prefix + "wn.",
          [this](const std::string& name, Tensor<T>& t) { params_.emplace_back(name, t); });
    }
  }

  ModelConfig cfg_;
  Upsampler<T> upsampler_;
  std::vector<Tensor<T>> conv_w_;
  std::vector<WNParams<T>> couplings_;
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  mutable std::vector<InvCache> inv_cache_;
};

// Per-element NLL without the Gaussian normalizer:
//   [ z.z/(2 sigma^2) - sum_log_s - sum_logdet_W ] / (B*T)
template <typename T>
Tensor<T> negative_log_likelihood(const FlowOutput<T>& out, T sigma,
                                  std::int64_t batch, std::int64_t samples) {
  if (!(sigma > T(0))) throw ConfigError("nll: sigma must be positive");
  Tensor<T> zz = scale(sum(mul(out.z, out.z)), T(1) / (T(2) * sigma * sigma));
  Tensor<T> core = sub(sub(zz, out.sum_log_s), out.sum_logdet_w);
  return scale(core, T(1) / static_cast<T>(batch * samples));
}

// The dropped per-element constant, 0.5*log(2 pi sigma^2); add to the value
// above for the full negative log density per sample.
template <typename T>
T nll_constant(T sigma) {
  return T(0.5) * std::log(T(2) * static_cast<T>(std::numbers::pi) * sigma * sigma);
}

}  // namespace waveglow
