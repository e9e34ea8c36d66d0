#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "oracles.hpp"
#include "waveglow/wn.hpp"

using namespace waveglow;

namespace {

WNConfig small_cfg(int layers, int residual) {
  WNConfig cfg;
  cfg.n_layers = layers;
  cfg.residual_channels = residual;
  cfg.skip_channels = residual;
  cfg.kernel = 3;
  cfg.in_half_channels = 2;
  cfg.out_half_channels = 2;
  cfg.cond_channels = 3;
  return cfg;
}

}  // namespace

TEST_CASE("zero-initialized output layer yields an identity coupling", "[wn]") {
  Rng rng(1);
  const auto cfg = small_cfg(3, 8);
  auto p = WNParams<double>::init(cfg, rng);
  auto x = Tensor<double>::randn({2, 2, 12}, rng, 1.0);
  auto cond = Tensor<double>::randn({2, 3, 12}, rng, 1.0);
  auto [log_s, t] = wn_apply(x, cond, p);
  REQUIRE(log_s.dim(1) == 2);
  REQUIRE(log_s.dim(2) == 12);
  for (auto v : log_s.data()) REQUIRE(v == 0.0);
  for (auto v : t.data()) REQUIRE(v == 0.0);
}

TEST_CASE("weight-normalized convs start at their raw direction", "[wn]") {
  Rng rng(2);
  auto c = NormConv<double>::init(4, 3, 3, rng);
  auto w = c.weight();
  for (std::int64_t i = 0; i < w.numel(); ++i)
    REQUIRE(w.at(i) == Catch::Approx(c.v.at(i)).epsilon(1e-12));
}

TEST_CASE("wn output length tracks the input for every dilation", "[wn]") {
  Rng rng(3);
  const auto cfg = small_cfg(5, 6);  // dilations 1..16
  auto p = WNParams<double>::init(cfg, rng);
  // non-trivial final layer so the outputs are informative
  for (auto& v : p.final_w.data()) v = rng.normal() * 0.1;
  for (const std::int64_t len : {std::int64_t{7}, std::int64_t{40}, std::int64_t{65}}) {
    auto x = Tensor<double>::randn({1, 2, len}, rng, 1.0);
    auto cond = Tensor<double>::randn({1, 3, len}, rng, 1.0);
    auto [log_s, t] = wn_apply(x, cond, p);
    REQUIRE(log_s.dim(2) == len);
    REQUIRE(t.dim(2) == len);
  }

  auto x = Tensor<double>::randn({1, 2, 8}, rng, 1.0);
  auto cond_short = Tensor<double>::randn({1, 3, 7}, rng, 1.0);
  REQUIRE_THROWS_AS(wn_apply(x, cond_short, p), ShapeError);
}

TEST_CASE("receptive field spans 511 samples for 8 dilated layers", "[wn]") {
  Rng rng(4);
  WNConfig cfg = small_cfg(8, 4);  // dilations 1..128 -> radius 2*(2^8-1)/2 = 255
  auto p = WNParams<double>::init(cfg, rng);
  for (auto& v : p.final_w.data()) v = rng.normal() * 0.1;

  const std::int64_t len = 600;
  const std::int64_t center = 300;
  auto x = Tensor<double>::randn({1, 2, len}, rng, 1.0);
  auto cond = Tensor<double>::zeros({1, 3, len});
  auto [base_s, base_t] = wn_apply(x, cond, p);

  auto x2 = Tensor<double>::from(x.shape(), {x.data().begin(), x.data().end()});
  x2.at(0, 0, center) += 10.0;
  auto [pert_s, pert_t] = wn_apply(x2, cond, p);

  const std::int64_t radius = 255;
  std::int64_t last_changed = -1, first_changed = len;
  for (std::int64_t t = 0; t < len; ++t) {
    double diff = 0;
    for (std::int64_t c = 0; c < 2; ++c)
      diff = std::max(diff, std::abs(pert_s.at(0, c, t) - base_s.at(0, c, t)) +
                                std::abs(pert_t.at(0, c, t) - base_t.at(0, c, t)));
    if (diff > 1e-12) {
      first_changed = std::min(first_changed, t);
      last_changed = std::max(last_changed, t);
    }
  }
  // the perturbation is felt somewhere, spreads no further than the receptive
  // field radius, and actually reaches deep into it
  REQUIRE(first_changed >= center - radius);
  REQUIRE(last_changed <= center + radius);
  REQUIRE(first_changed <= center - radius + 16);
  REQUIRE(last_changed >= center + radius - 16);
}

TEST_CASE("symmetric kernels give a time-flip-symmetric response", "[wn]") {
  Rng rng(5);
  const auto cfg = small_cfg(3, 4);
  auto p = WNParams<double>::init(cfg, rng);
  for (auto& v : p.final_w.data()) v = rng.normal() * 0.1;
  // symmetrize every width-3 kernel: w[..., 0] = w[..., 2]
  for (auto& layer : p.dilated) {
    const auto K = layer.v.dim(2);
    for (std::int64_t r = 0; r < layer.v.dim(0); ++r)
      for (std::int64_t c = 0; c < layer.v.dim(1); ++c)
        layer.v.at((r * layer.v.dim(1) + c) * K + 0) =
            layer.v.at((r * layer.v.dim(1) + c) * K + (K - 1));
    // refresh g so the weight remains v after symmetrization
    for (std::int64_t r = 0; r < layer.v.dim(0); ++r) {
      double n = 0;
      for (std::int64_t i = 0; i < layer.v.dim(1) * K; ++i) {
        const double x = layer.v.at(r * layer.v.dim(1) * K + i);
        n += x * x;
      }
      layer.g.at(r) = std::sqrt(n);
    }
  }

  const std::int64_t len = 33;
  auto x = Tensor<double>::randn({1, 2, len}, rng, 1.0);
  auto cond = Tensor<double>::randn({1, 3, len}, rng, 1.0);
  auto flip = [len](const Tensor<double>& t) {
    auto out = Tensor<double>::zeros(t.shape());
    for (std::int64_t c = 0; c < t.dim(1); ++c)
      for (std::int64_t i = 0; i < len; ++i)
        out.at(0, c, i) = t.at(0, c, len - 1 - i);
    return out;
  };
  auto [s1, t1] = wn_apply(x, cond, p);
  auto [s2, t2] = wn_apply(flip(x), flip(cond), p);
  auto fs2 = flip(s2);
  auto ft2 = flip(t2);
  for (std::int64_t i = 0; i < s1.numel(); ++i) {
    REQUIRE(fs2.at(i) == Catch::Approx(s1.at(i)).margin(1e-12));
    REQUIRE(ft2.at(i) == Catch::Approx(t1.at(i)).margin(1e-12));
  }
}

TEST_CASE("upsampler covers the requested window and folds groups", "[wn]") {
  Rng rng(6);
  auto up = Upsampler<double>::init(4, 16, 4, rng);  // 4 channels, K=16, stride 4
  auto mel = Tensor<double>::randn({1, 4, 5}, rng, 1.0);
  // coverage: (5-1)*4 + 16 = 32 samples
  auto cond = up.apply(mel, 2, 32);
  REQUIRE(cond.dim(1) == 8);
  REQUIRE(cond.dim(2) == 16);

  REQUIRE_THROWS_WITH(up.apply(mel, 2, 40), Catch::Matchers::ContainsSubstring("frames"));
  REQUIRE_THROWS_AS(up.apply(mel, 3, 32), ShapeError);  // not divisible by group
}

TEST_CASE("upsampling with an identity-like kernel interleaves frame values", "[wn]") {
  // kernel = stride = 2 and w[c][c][k] = 1: each frame is duplicated onto its
  // own two output steps, so folding with group 2 stacks them as channels.
  auto up = Upsampler<double>{};
  up.kernel = 2;
  up.stride = 2;
  up.w = Tensor<double>::zeros({1, 1, 2});
  up.w.at(0) = 1.0;
  up.w.at(1) = 1.0;
  up.b = Tensor<double>::zeros({1});
  auto mel = Tensor<double>::from({1, 1, 3}, {5, 6, 7});
  auto cond = up.apply(mel, 2, 6);
  REQUIRE(cond.dim(1) == 2);
  REQUIRE(cond.dim(2) == 3);
  for (std::int64_t t = 0; t < 3; ++t) {
    REQUIRE(cond.at(0, 0, t) == mel.at(0, 0, t));
    REQUIRE(cond.at(0, 1, t) == mel.at(0, 0, t));
  }
}

TEST_CASE("mel tensors preserve the matrix layout", "[wn]") {
  MelSpectrogram mel;
  mel.sample_rate = kSampleRate;
  mel.values.resize(3, 2);
  mel.values << 1, 2, 3, 4, 5, 6;
  auto t = mel_to_tensor<double>(mel);
  REQUIRE(t.dim(0) == 1);
  REQUIRE(t.dim(1) == 3);
  REQUIRE(t.dim(2) == 2);
  REQUIRE(t.at(0, 0, 1) == 2.0);
  REQUIRE(t.at(0, 2, 0) == 5.0);
}
