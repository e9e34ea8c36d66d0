// Command-line front end: feature extraction, training, synthesis,
// Griffin-Lim baseline, verification, and benchmarking.

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "waveglow/audio.hpp"
#include "waveglow/checkpoint.hpp"
#include "waveglow/dsp.hpp"
#include "waveglow/errors.hpp"
#include "waveglow/flow.hpp"
#include "waveglow/griffin_lim.hpp"
#include "waveglow/mel.hpp"
#include "waveglow/synth.hpp"
#include "waveglow/train.hpp"
#include "waveglow/verify.hpp"

namespace {

using namespace waveglow;
namespace fs = std::filesystem;

std::vector<AudioClip> load_dataset(const std::string& dir) {
  if (!fs::is_directory(dir))
    throw FormatError("data: '" + dir + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".wav")
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw FormatError("data: no .wav files in '" + dir + "'");
  std::vector<AudioClip> clips;
  clips.reserve(files.size());
  for (const auto& f : files) clips.push_back(load_wav(f.string()));
  return clips;
}

struct CommonFlags {
  std::uint64_t seed = 1;
  bool seed_given = false;
  std::string config_path;
};

void add_common(CLI::App* sub, CommonFlags& flags) {
  sub->add_option_function<std::uint64_t>(
      "--seed",
      [&flags](const std::uint64_t& v) {
        flags.seed = v;
        flags.seed_given = true;
      },
      "Random seed (default 1)");
  sub->add_option("--config", flags.config_path,
                  "Training-config file; supplies defaults where applicable");
}

int cmd_mel(const std::string& in, const std::string& out, const CommonFlags& common) {
  MelNorm norm = MelNorm::kArea;
  if (!common.config_path.empty()) {
    const TrainConfig cfg = load_train_config(common.config_path);
    cfg.validate();
    norm = cfg.mel_norm_enum();
  }
  const AudioClip clip = load_wav(in);
  const MelFilterbank fb = mel_filterbank(kNumMels, kNFft, kSampleRate, norm);
  const MelSpectrogram mel = mel_spectrogram(clip, fb);
  save_mel(out, mel);
  std::printf("wrote %s: %lld mel channels x %lld frames\n", out.c_str(),
              static_cast<long long>(mel.n_mels()), static_cast<long long>(mel.frames()));
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& out_dir,
              const std::string& resume, std::int64_t max_iters_override,
              bool max_iters_given, const CommonFlags& common) {
  TrainConfig cfg;
  if (!common.config_path.empty()) cfg = load_train_config(common.config_path);
  if (common.seed_given) cfg.seed = common.seed;
  if (max_iters_given) cfg.max_iters = max_iters_override;
  cfg.validate();
  const auto dataset = load_dataset(data_dir);
  const TrainResult result = train_loop<float>(cfg, dataset, out_dir, resume);
  std::printf("ran %lld iterations", static_cast<long long>(result.iterations));
  if (!result.nll_trace.empty())
    std::printf(", final nll %.6f", result.nll_trace.back());
  std::printf("\nlast checkpoint: %s\n", result.last_checkpoint.c_str());
  return 0;
}

int cmd_synth(const std::string& ckpt, const std::string& mel_path, double sigma,
              const std::string& out, const CommonFlags& common) {
  const RawCheckpoint ck = read_checkpoint(ckpt);
  const WaveGlowModel<float> model = build_model<float>(ck);
  const MelSpectrogram mel = load_mel(mel_path);
  if (mel.n_mels() != model.config().n_mels)
    throw FormatError("checkpoint expects " + std::to_string(model.config().n_mels) +
                      " mel channels, '" + mel_path + "' has " +
                      std::to_string(mel.n_mels()));
  SynthesisRequest req;
  req.sigma = sigma;
  req.seed = common.seed;
  const auto result = synthesize(model, mel, req);
  if (result.clip_fraction > kClipWarnFraction)
    std::fprintf(stderr, "warning: %.2f%% of samples clipped to [-1, 1]\n",
                 100.0 * result.clip_fraction);
  save_wav(out, result.audio);
  std::printf("wrote %s: %lld samples (%.2f s)\n", out.c_str(),
              static_cast<long long>(result.audio.size()),
              static_cast<double>(result.audio.size()) / kSampleRate);
  return 0;
}

int cmd_griffinlim(const std::string& in, int iters, const std::string& out) {
  const AudioClip clip = load_wav(in);
  const Spectrogram spec = stft(clip.samples);
  const Eigen::MatrixXd magnitude = spec.cwiseAbs();
  std::vector<double> trace;
  const AudioClip recon = griffin_lim(magnitude, iters, clip.sample_rate, &trace);
  save_wav(out, recon);
  std::printf("wrote %s: %lld samples, spectral distance %.6f -> %.6f over %d iterations\n",
              out.c_str(), static_cast<long long>(recon.size()),
              trace.empty() ? 0.0 : trace.front(), trace.empty() ? 0.0 : trace.back(),
              iters);
  return 0;
}

int cmd_verify(const std::string& preset, const std::string& mode,
               const std::string& ckpt, const CommonFlags& common) {
  VerifyOptions opt;
  opt.preset = preset;
  opt.use_f64 = (mode == "f64");
  opt.seed = common.seed;
  opt.ckpt_path = ckpt;
  const auto checks = run_verification(opt);
  for (const auto& c : checks) std::puts(c.line().c_str());
  if (!all_passed(checks)) {
    std::puts("verification FAILED");
    return 3;
  }
  std::puts("verification passed");
  return 0;
}

int cmd_bench(const std::string& ckpt, const std::vector<double>& seconds, int reps,
              const std::string& out_dir, const CommonFlags& common) {
  const RawCheckpoint ck = read_checkpoint(ckpt);
  const WaveGlowModel<float> model = build_model<float>(ck);
  fs::create_directories(out_dir);
  Rng rng(common.seed);
  SynthesisRequest req;
  req.sigma = 0.6;
  req.seed = common.seed;
  for (const double sec : seconds) {
    const auto samples = static_cast<std::int64_t>(sec * kSampleRate);
    const std::int64_t frames = std::max<std::int64_t>(1, (samples + kHop / 2) / kHop);
    MelSpectrogram mel;
    mel.sample_rate = kSampleRate;
    mel.values.resize(kNumMels, frames);
    for (std::int64_t r = 0; r < kNumMels; ++r)
      for (std::int64_t c = 0; c < frames; ++c) mel.values(r, c) = rng.normal();
    const BenchReport report = benchmark(model, mel, reps, req);
    std::printf("%.3g s utterance: %lld samples in %.4f s -> %.1f kHz (%.2fx realtime)\n",
                sec, static_cast<long long>(report.samples), report.seconds,
                report.rate_khz, report.realtime_factor);
    std::ostringstream name;
    name << "bench_" << sec << "s.txt";
    std::ofstream f((fs::path(out_dir) / name.str()).string());
    f << report.text();
  }
  std::printf("reports written to %s\n", out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"WaveGlow-style flow vocoder: feature extraction, training, synthesis, "
               "verification, benchmarking"};
  app.require_subcommand(1);

  CommonFlags common;

  auto* mel = app.add_subcommand("mel", "Extract a mel-spectrogram from a WAV file");
  std::string mel_in, mel_out;
  mel->add_option("--in", mel_in, "Input WAV (22050 Hz mono 16-bit)")->required();
  mel->add_option("--out", mel_out, "Output mel container")->required();
  add_common(mel, common);

  auto* train = app.add_subcommand("train", "Train on a directory of WAV files");
  std::string train_data, train_out, train_resume;
  std::int64_t train_max_iters = 0;
  train->add_option("--data", train_data, "Directory of training WAVs")->required();
  train->add_option("--out", train_out, "Checkpoint/metrics output directory")->required();
  train->add_option("--resume", train_resume, "Checkpoint to resume from");
  auto* mi = train->add_option("--max-iters", train_max_iters,
                               "Override max_iters from the config");
  add_common(train, common);

  auto* synth = app.add_subcommand("synth", "Synthesize audio from a mel-spectrogram");
  std::string synth_ckpt, synth_mel, synth_out;
  double synth_sigma = 0.6;
  synth->add_option("--ckpt", synth_ckpt, "Model checkpoint")->required();
  synth->add_option("--mel", synth_mel, "Mel container from `mel`")->required();
  synth->add_option("--sigma", synth_sigma, "Latent standard deviation (default 0.6)");
  synth->add_option("--out", synth_out, "Output WAV")->required();
  add_common(synth, common);

  auto* gl = app.add_subcommand("griffinlim",
                                "Phase-reconstruction baseline from a WAV's |STFT|");
  std::string gl_in, gl_out;
  int gl_iters = 60;
  gl->add_option("--in", gl_in, "Input WAV")->required();
  gl->add_option("--iters", gl_iters, "Iterations (default 60)");
  gl->add_option("--out", gl_out, "Output WAV")->required();
  add_common(gl, common);

  auto* verify = app.add_subcommand("verify", "Run the invertibility/oracle check suite");
  std::string verify_preset = "tiny", verify_mode = "f64", verify_ckpt;
  verify->add_option("--preset", verify_preset, "Model preset (default tiny)")
      ->check(CLI::IsMember({"tiny", "desk", "paper"}));
  verify->add_option("--mode", verify_mode, "Numeric mode (default f64)")
      ->check(CLI::IsMember({"f32", "f64"}));
  verify->add_option("--ckpt", verify_ckpt, "Check a stored model instead of a fresh one");
  add_common(verify, common);

  auto* bench = app.add_subcommand("bench", "Measure synthesis throughput");
  std::string bench_ckpt, bench_out = "bench_report";
  std::vector<double> bench_seconds{1.0, 10.0};
  int bench_reps = 5;
  bench->add_option("--ckpt", bench_ckpt, "Model checkpoint")->required();
  bench->add_option("--seconds", bench_seconds, "Utterance lengths in seconds (default 1,10)")
      ->delimiter(',');
  bench->add_option("--reps", bench_reps, "Repetitions per length, first discarded (default 5)");
  bench->add_option("--out", bench_out, "Report directory (default bench_report)");
  add_common(bench, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  const auto guarded = [](const std::function<int()>& fn) {
    try {
      return fn();
    } catch (const ConfigError& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return 1;
    } catch (const std::exception& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return 2;
    }
  };

  if (*mel) return guarded([&] { return cmd_mel(mel_in, mel_out, common); });
  if (*train)
    return guarded([&] {
      return cmd_train(train_data, train_out, train_resume, train_max_iters,
                       mi->count() > 0, common);
    });
  if (*synth)
    return guarded([&] { return cmd_synth(synth_ckpt, synth_mel, synth_sigma, synth_out,
                                          common); });
  if (*gl) return guarded([&] { return cmd_griffinlim(gl_in, gl_iters, gl_out); });
  if (*verify)
    return guarded([&] { return cmd_verify(verify_preset, verify_mode, verify_ckpt,
                                           common); });
  if (*bench)
    return guarded([&] {
      return cmd_bench(bench_ckpt, bench_seconds, bench_reps, bench_out, common);
    });
  return 1;
}
