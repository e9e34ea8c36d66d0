#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <fstream>

#include "oracles.hpp"
#include "waveglow/checkpoint.hpp"
#include "waveglow/flow.hpp"
#include "waveglow/verify.hpp"

using namespace waveglow;

TEST_CASE("model presets pin their hyperparameters", "[flow]") {
  const auto tiny = ModelConfig::by_name("tiny");
  REQUIRE(tiny.n_flows == 2);
  REQUIRE(tiny.group == 4);
  REQUIRE(tiny.early_every == 0);
  REQUIRE(tiny.wn_layers == 2);
  REQUIRE(tiny.wn_residual == 16);

  const auto desk = ModelConfig::by_name("desk");
  REQUIRE(desk.n_flows == 4);
  REQUIRE(desk.group == 8);
  REQUIRE(desk.wn_layers == 4);
  REQUIRE(desk.wn_residual == 64);

  const auto paper = ModelConfig::by_name("paper");
  REQUIRE(paper.n_flows == 12);
  REQUIRE(paper.group == 8);
  REQUIRE(paper.early_every == 4);
  REQUIRE(paper.early_size == 2);
  REQUIRE(paper.wn_layers == 8);
  REQUIRE(paper.wn_residual == 512);
  REQUIRE(paper.wn_skip == 256);
  REQUIRE(paper.upsample_kernel == 1024);
  REQUIRE(paper.upsample_stride == 256);

  REQUIRE_THROWS_WITH(ModelConfig::by_name("huge"),
                      Catch::Matchers::ContainsSubstring("tiny|desk|paper"));
}

TEST_CASE("early outputs thin the flow widths on schedule", "[flow]") {
  const auto widths = ModelConfig::paper().flow_widths();
  const std::vector<int> expect{8, 8, 8, 8, 6, 6, 6, 6, 4, 4, 4, 4};
  REQUIRE(widths == expect);

  ModelConfig bad = ModelConfig::paper();
  bad.n_flows = 20;  // diversions at 4, 8, 12, 16 exhaust 8 channels
  REQUIRE_THROWS_AS(bad.flow_widths(), ConfigError);
}

TEST_CASE("fresh models start orthonormal and isometric", "[flow]") {
  const VerifyOptions opt{.preset = "tiny", .use_f64 = true, .seed = 9};
  const auto checks = run_verification(opt);
  for (const auto& c : checks) {
    INFO(c.line());
    REQUIRE((c.skipped || c.passed));
  }
}

TEST_CASE("forward then inverse recovers the input", "[flow]") {
  Rng rng(31);
  auto cfg = ModelConfig::tiny();
  WaveGlowModel<double> model(cfg, rng);
  detail::randomize_coupling_outputs(model, rng);
  NoGradGuard ng;
  const std::int64_t samples = 512;
  auto mel = Tensor<double>::randn(
      {2, cfg.n_mels, detail::frames_covering(samples)}, rng, 1.0);
  auto x = Tensor<double>::randn({2, samples}, rng, 1.0);
  const auto out = model.forward(x, mel);
  REQUIRE(out.z.dim(0) == 2);
  REQUIRE(out.z.dim(1) == cfg.group);
  REQUIRE(out.z.dim(2) == samples / cfg.group);
  const auto x2 = model.inverse(out.z, mel);
  REQUIRE(detail::max_abs_diff(x, x2) < 1e-12);
}

TEST_CASE("early-output models still invert exactly", "[flow]") {
  ModelConfig cfg;
  cfg.preset = "tiny";
  cfg.n_flows = 6;
  cfg.group = 8;
  cfg.early_every = 2;
  cfg.early_size = 2;
  cfg.wn_layers = 2;
  cfg.wn_residual = 8;
  cfg.wn_skip = 8;
  REQUIRE(cfg.flow_widths() == std::vector<int>{8, 8, 6, 6, 4, 4});

  Rng rng(33);
  WaveGlowModel<double> model(cfg, rng);
  detail::randomize_coupling_outputs(model, rng);
  NoGradGuard ng;
  const std::int64_t samples = 256;
  auto mel = detail::random_mel_like<double>(cfg, detail::frames_covering(samples), rng);
  auto x = Tensor<double>::randn({1, samples}, rng, 1.0);
  const auto out = model.forward(x, mel);
  REQUIRE(out.z.dim(1) == cfg.group);  // early parts re-join the latent
  const auto x2 = model.inverse(out.z, mel);
  REQUIRE(detail::max_abs_diff(x, x2) < 1e-12);

  // the analytic log-det still matches the assembled Jacobian with early
  // outputs in play (small enough to assemble: 1 x 16)
  ModelConfig micro = cfg;
  micro.wn_layers = 1;
  Rng init2(35);
  WaveGlowModel<double> m2(micro, init2);
  Rng r2(36);
  detail::randomize_coupling_outputs(m2, r2);
  const std::int64_t n = 16;
  auto mel2 = detail::random_mel_like<double>(micro, detail::frames_covering(n), r2);
  auto x3 = Tensor<double>::randn({1, n}, r2, 1.0);
  const auto o3 = m2.forward(x3, mel2);
  const double analytic = o3.sum_log_s.item() + o3.sum_logdet_w.item();
  const double numeric = detail::numerical_logdet_jacobian(m2, x3, mel2, 1e-6);
  REQUIRE(std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)) < 1e-6);
}

TEST_CASE("singular mixers are refused in both directions", "[flow]") {
  Rng rng(37);
  auto cfg = ModelConfig::tiny();
  WaveGlowModel<double> model(cfg, rng);
  auto w = model.param("flow0.W");
  for (std::int64_t j = 0; j < w.dim(1); ++j) w.at(0, j) = 0.0;

  NoGradGuard ng;
  const std::int64_t samples = 64;
  auto mel = detail::random_mel_like<double>(cfg, detail::frames_covering(samples), rng);
  auto x = Tensor<double>::randn({1, samples}, rng, 1.0);
  REQUIRE_THROWS_AS(model.forward(x, mel), NumericError);
  auto z = Tensor<double>::randn({1, cfg.group, samples / cfg.group}, rng, 1.0);
  REQUIRE_THROWS_WITH(model.inverse(z, mel),
                      Catch::Matchers::ContainsSubstring("singular"));
}

TEST_CASE("the likelihood splits into its three terms", "[flow]") {
  Rng rng(39);
  auto cfg = ModelConfig::tiny();
  WaveGlowModel<double> model(cfg, rng);
  detail::randomize_coupling_outputs(model, rng);
  NoGradGuard ng;
  const std::int64_t samples = 128;
  auto mel = detail::random_mel_like<double>(cfg, detail::frames_covering(samples), rng);
  auto x = Tensor<double>::randn({1, samples}, rng, 1.0);
  const auto out = model.forward(x, mel);

  const double sigma = 0.8;
  double zz = 0;
  for (auto v : out.z.data()) zz += v * v;
  const double expect = (zz / (2 * sigma * sigma) - out.sum_log_s.item() -
                         out.sum_logdet_w.item()) /
                        static_cast<double>(samples);
  const auto nll = negative_log_likelihood(out, sigma, 1, samples);
  REQUIRE(nll.item() == Catch::Approx(expect).epsilon(1e-12));

  REQUIRE_THROWS_AS(negative_log_likelihood(out, 0.0, 1, samples), ConfigError);
  REQUIRE(nll_constant(1.0) ==
          Catch::Approx(0.5 * std::log(2.0 * std::numbers::pi)).epsilon(1e-12));
}

TEST_CASE("sigma scales the latent penalty exactly", "[flow]") {
  Rng rng(41);
  auto cfg = ModelConfig::tiny();
  WaveGlowModel<double> model(cfg, rng);
  NoGradGuard ng;
  const std::int64_t samples = 64;
  auto mel = detail::random_mel_like<double>(cfg, detail::frames_covering(samples), rng);
  auto x = Tensor<double>::randn({1, samples}, rng, 1.0);
  const auto out = model.forward(x, mel);
  const double n1 = negative_log_likelihood(out, std::sqrt(0.5), 1, samples).item();
  const double n2 = negative_log_likelihood(out, 1.0, 1, samples).item();
  double zz = 0;
  for (auto v : out.z.data()) zz += v * v;
  REQUIRE(n1 - n2 == Catch::Approx(zz * 0.5 / samples).epsilon(1e-10));
}

TEST_CASE("checkpoints restore every parameter bit-for-bit", "[checkpoint]") {
  const auto dir = oracles::scratch_dir("ckpt");
  Rng rng(43);
  auto cfg = ModelConfig::tiny();
  WaveGlowModel<float> model(cfg, rng);
  detail::randomize_coupling_outputs(model, rng);

  nlohmann::json meta;
  meta["iteration"] = 17;
  meta["note"] = "roundtrip";
  const std::string path = dir + "/model.ckpt";
  save_checkpoint(path, model, {}, meta);

  const auto ck = read_checkpoint(path);
  REQUIRE(ck.config.preset == "tiny");
  REQUIRE(ck.meta.at("iteration").get<int>() == 17);
  const auto rebuilt = build_model<float>(ck);
  for (const auto& [name, t] : model.named_params()) {
    const auto* vals = ck.find(name);
    REQUIRE(vals != nullptr);
    const auto got = rebuilt.named_params();
    bool found = false;
    for (const auto& [n2, t2] : got)
      if (n2 == name) {
        found = true;
        REQUIRE(t2.numel() == t.numel());
        for (std::int64_t i = 0; i < t.numel(); ++i) REQUIRE(t2.at(i) == t.at(i));
      }
    REQUIRE(found);
  }
}

TEST_CASE("corrupted checkpoints are rejected with specifics", "[checkpoint]") {
  const auto dir = oracles::scratch_dir("ckptbad");
  Rng rng(47);
  WaveGlowModel<float> model(ModelConfig::tiny(), rng);
  const std::string path = dir + "/model.ckpt";
  save_checkpoint(path, model, {}, {});

  SECTION("flipped body byte fails the checksum") {
    auto size = std::filesystem::file_size(path);
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(static_cast<std::streamoff>(size - 100));
    f.put(static_cast<char>(0x5a));
    f.close();
    REQUIRE_THROWS_WITH(read_checkpoint(path),
                        Catch::Matchers::ContainsSubstring("checksum"));
  }

  SECTION("truncation is caught") {
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 64);
    REQUIRE_THROWS_WITH(read_checkpoint(path),
                        Catch::Matchers::ContainsSubstring("truncated"));
  }

  SECTION("bad magic is caught") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("NOTPAOLO", 8);
    f.close();
    REQUIRE_THROWS_WITH(read_checkpoint(path),
                        Catch::Matchers::ContainsSubstring("magic"));
  }

  SECTION("a renamed manifest entry surfaces as a missing parameter") {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    in.close();
    const auto pos = bytes.find("flow0.W");
    REQUIRE(pos != std::string::npos);
    bytes[pos + 6] = 'X';  // same length, so offsets and checksum still hold
    std::ofstream(path, std::ios::binary).write(bytes.data(),
                                                static_cast<std::streamsize>(bytes.size()));
    const auto ck = read_checkpoint(path);
    REQUIRE_THROWS_WITH(build_model<float>(ck),
                        Catch::Matchers::ContainsSubstring("flow0.W"));
  }
}

TEST_CASE("checkpoints carry a verifiable singular mixer to verify", "[checkpoint]") {
  const auto dir = oracles::scratch_dir("ckptsing");
  Rng rng(49);
  WaveGlowModel<float> model(ModelConfig::tiny(), rng);
  auto w = model.param("flow1.W");
  for (std::int64_t j = 0; j < w.dim(1); ++j) w.at(1, j) = 0.0;
  const std::string path = dir + "/singular.ckpt";
  save_checkpoint(path, model, {}, {});

  VerifyOptions opt;
  opt.ckpt_path = path;
  opt.use_f64 = false;
  const auto checks = run_verification(opt);
  bool mixer_failed = false;
  for (const auto& c : checks)
    if (c.name == "mixer_invertibility") {
      REQUIRE_FALSE(c.skipped);
      mixer_failed = !c.passed;
    }
  REQUIRE(mixer_failed);
  REQUIRE_FALSE(all_passed(checks));
}
