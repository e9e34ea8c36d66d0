#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "waveglow/train.hpp"

using namespace waveglow;

namespace {

TrainConfig quick_cfg() {
  TrainConfig cfg;
  cfg.preset = "tiny";
  cfg.clip_len = 2048;
  cfg.batch = 1;
  cfg.max_iters = 6;
  cfg.seed = 5;
  cfg.checkpoint_every = 0;  // only initial + final
  return cfg;
}

std::vector<AudioClip> tone_dataset() { return {oracles::three_tone_clip(0.5, 11)}; }

std::vector<std::vector<double>> read_metrics(const std::string& dir) {
  std::ifstream f(dir + "/metrics.tsv");
  REQUIRE(f.good());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    std::vector<double> row;
    double v;
    while (is >> v) row.push_back(v);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

TEST_CASE("config files parse with defaults, comments, and validation", "[train]") {
  std::istringstream good(R"(
# training setup
preset = desk
clip_len=8000
  lr = 2e-4

sigma = 0.7071
)");
  const auto cfg = parse_train_config(good);
  REQUIRE(cfg.preset == "desk");
  REQUIRE(cfg.clip_len == 8000);
  REQUIRE(cfg.lr == Catch::Approx(2e-4));
  REQUIRE(cfg.sigma == Catch::Approx(0.7071));
  REQUIRE(cfg.batch == 2);  // untouched default

  std::istringstream unknown("lr = 1e-4\nmomentum = 0.9\n");
  REQUIRE_THROWS_WITH(parse_train_config(unknown),
                      Catch::Matchers::ContainsSubstring("momentum") &&
                          Catch::Matchers::ContainsSubstring("line 2"));

  std::istringstream badval("clip_len = many\n");
  REQUIRE_THROWS_WITH(parse_train_config(badval),
                      Catch::Matchers::ContainsSubstring("many"));

  std::istringstream noeq("just words\n");
  REQUIRE_THROWS_AS(parse_train_config(noeq), ConfigError);

  TrainConfig invalid;
  invalid.lr = 1e-5;
  invalid.lr_drop = 1e-4;  // must be below lr
  REQUIRE_THROWS_AS(invalid.validate(), ConfigError);
  TrainConfig badnorm;
  badnorm.mel_norm = "sloppy";
  REQUIRE_THROWS_AS(badnorm.validate(), ConfigError);
}

TEST_CASE("adam takes bias-corrected steps and skips bad gradients", "[train]") {
  auto p = Tensor<double>::from({2}, {1.0, -2.0}, true);
  std::vector<std::pair<std::string, Tensor<double>>> params{{"p", p}};
  AdamState<double> adam;
  adam.init(params);

  p.grad()[0] = 0.5;
  p.grad()[1] = -0.5;
  REQUIRE(adam.apply(params, 0.1).empty());
  REQUIRE(adam.step == 1);
  // first step: m_hat = g, v_hat = g^2  =>  delta = lr * g/(|g|+eps) ~ lr*sign(g)
  REQUIRE(p.at(0) == Catch::Approx(1.0 - 0.1).epsilon(1e-6));
  REQUIRE(p.at(1) == Catch::Approx(-2.0 + 0.1).epsilon(1e-6));

  const double before = p.at(0);
  p.grad()[0] = std::numeric_limits<double>::quiet_NaN();
  const auto offender = adam.apply(params, 0.1);
  REQUIRE(offender == "p");
  REQUIRE(adam.step == 1);          // whole step skipped
  REQUIRE(p.at(0) == before);       // no partial update
}

TEST_CASE("batch sampling pads short clips and flags it", "[train]") {
  TrainConfig cfg = quick_cfg();
  cfg.clip_len = 4096;
  const auto fb = mel_filterbank();
  Rng rng(3);

  std::vector<AudioClip> shorties{oracles::sinusoid(440.0, 0.05)};  // ~1102 samples
  const auto batch = sample_clips<float>(shorties, cfg, fb, rng);
  REQUIRE(batch.any_padded);
  REQUIRE(batch.audio.dim(1) == 4096);
  REQUIRE(batch.mel.dim(2) == 1 + 4096 / kHop);
  for (std::int64_t i = 2000; i < 4096; ++i) REQUIRE(batch.audio.at(i) == 0.0f);

  std::vector<AudioClip> longer{oracles::sinusoid(440.0, 1.0)};
  Rng r2(3);
  const auto b2 = sample_clips<float>(longer, cfg, fb, r2);
  REQUIRE_FALSE(b2.any_padded);

  REQUIRE_THROWS_AS(sample_clips<float>({}, cfg, fb, rng), ConfigError);
}

TEST_CASE("training writes metrics rows and checkpoints", "[train]") {
  const auto dir = oracles::scratch_dir("train_basic");
  auto cfg = quick_cfg();
  const auto result = train_loop<float>(cfg, tone_dataset(), dir);
  REQUIRE(result.iterations == 6);
  REQUIRE(static_cast<std::int64_t>(result.nll_trace.size()) == 6);
  REQUIRE(std::filesystem::exists(dir + "/ckpt_0000000.ckpt"));
  REQUIRE(std::filesystem::exists(dir + "/ckpt_0000006.ckpt"));
  REQUIRE(result.last_checkpoint == dir + "/ckpt_0000006.ckpt");

  const auto rows = read_metrics(dir);
  REQUIRE(rows.size() == 6);
  for (size_t i = 0; i < rows.size(); ++i) {
    REQUIRE(rows[i].size() == 4);  // iter, nll, lr, seconds
    REQUIRE(rows[i][0] == static_cast<double>(i + 1));
    REQUIRE(std::isfinite(rows[i][1]));
    REQUIRE(rows[i][2] == Catch::Approx(cfg.lr));
    if (i > 0) REQUIRE(rows[i][3] >= rows[i - 1][3]);  // cumulative seconds
  }
  // metric nll matches the returned trace (full NLL including the constant)
  for (size_t i = 0; i < rows.size(); ++i)
    REQUIRE(rows[i][1] == Catch::Approx(result.nll_trace[i]).epsilon(1e-9));
}

TEST_CASE("zero-iteration training only writes the initial checkpoint", "[train]") {
  const auto dir = oracles::scratch_dir("train_zero");
  auto cfg = quick_cfg();
  cfg.max_iters = 0;
  const auto result = train_loop<float>(cfg, tone_dataset(), dir);
  REQUIRE(result.iterations == 0);
  REQUIRE(std::filesystem::exists(dir + "/ckpt_0000000.ckpt"));
  REQUIRE(result.last_checkpoint == dir + "/ckpt_0000000.ckpt");
  int n_ckpts = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".ckpt") ++n_ckpts;
  REQUIRE(n_ckpts == 1);
  REQUIRE(read_metrics(dir).empty());
}

TEST_CASE("clip length must respect the squeeze group", "[train]") {
  const auto dir = oracles::scratch_dir("train_groups");
  auto cfg = quick_cfg();
  cfg.clip_len = 2046;  // not divisible by 4
  REQUIRE_THROWS_WITH(train_loop<float>(cfg, tone_dataset(), dir),
                      Catch::Matchers::ContainsSubstring("group"));
}

TEST_CASE("two seeded runs produce bitwise-identical traces", "[train]") {
  const auto dir1 = oracles::scratch_dir("train_rep1");
  const auto dir2 = oracles::scratch_dir("train_rep2");
  auto cfg = quick_cfg();
  cfg.max_iters = 8;
  const auto r1 = train_loop<float>(cfg, tone_dataset(), dir1);
  const auto r2 = train_loop<float>(cfg, tone_dataset(), dir2);
  REQUIRE(r1.nll_trace.size() == r2.nll_trace.size());
  for (size_t i = 0; i < r1.nll_trace.size(); ++i)
    REQUIRE(r1.nll_trace[i] == r2.nll_trace[i]);
}

TEST_CASE("interrupted training resumes to the same parameters", "[train]") {
  const auto base = oracles::scratch_dir("train_resume");
  auto cfg = quick_cfg();
  cfg.max_iters = 8;
  cfg.checkpoint_every = 4;

  const auto full = train_loop<float>(cfg, tone_dataset(), base + "/full");
  REQUIRE(full.last_checkpoint == base + "/full/ckpt_0000008.ckpt");

  auto half_cfg = cfg;
  half_cfg.max_iters = 4;
  const auto half = train_loop<float>(half_cfg, tone_dataset(), base + "/split");
  REQUIRE(half.last_checkpoint == base + "/split/ckpt_0000004.ckpt");
  const auto resumed =
      train_loop<float>(cfg, tone_dataset(), base + "/split", half.last_checkpoint);
  REQUIRE(resumed.iterations == 4);

  const auto a = read_checkpoint(base + "/full/ckpt_0000008.ckpt");
  const auto b = read_checkpoint(base + "/split/ckpt_0000008.ckpt");
  REQUIRE(a.names == b.names);
  std::int64_t diff = 0;
  for (size_t i = 0; i < a.values.size(); ++i) {
    REQUIRE(a.values[i].size() == b.values[i].size());
    for (size_t j = 0; j < a.values[i].size(); ++j)
      if (a.values[i][j] != b.values[i][j]) ++diff;
  }
  REQUIRE(diff == 0);

  // the resumed run's trace matches the tail of the uninterrupted one
  REQUIRE(resumed.nll_trace.size() == 4);
  for (size_t i = 0; i < 4; ++i)
    REQUIRE(resumed.nll_trace[i] == full.nll_trace[i + 4]);
}

TEST_CASE("a flat loss triggers the one-time learning-rate drop", "[train]") {
  const auto dir = oracles::scratch_dir("train_plateau");
  TrainConfig cfg;
  cfg.preset = "tiny";
  cfg.batch = 1;
  cfg.seed = 7;
  cfg.plateau_window = 3;
  cfg.checkpoint_every = 0;
  cfg.lr = 1e-12;  // so small the loss cannot move
  cfg.lr_drop = 5e-13;
  cfg.max_iters = 8;

  // a clip exactly clip_len long makes every sampled batch identical
  auto clip = oracles::three_tone_clip(0.1, 13);
  clip.samples.resize(2048);
  cfg.clip_len = 2048;
  const auto result = train_loop<float>(cfg, {clip}, dir);
  REQUIRE(result.lr_dropped);
  REQUIRE(result.final_lr == Catch::Approx(cfg.lr_drop));

  const auto rows = read_metrics(dir);
  REQUIRE(rows.size() == 8);
  REQUIRE(rows[4][2] == Catch::Approx(cfg.lr));       // before the 2-window history fills
  REQUIRE(rows.back()[2] == Catch::Approx(cfg.lr_drop));
}
