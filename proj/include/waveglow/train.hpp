#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "waveglow/audio.hpp"
#include "waveglow/checkpoint.hpp"
#include "waveglow/flow.hpp"
#include "waveglow/mel.hpp"
#include "waveglow/rng.hpp"

namespace waveglow {

struct TrainConfig {
  std::string preset = "desk";
  std::int64_t clip_len = 8000;
  std::int64_t batch = 2;
  double lr = 1e-4;
  double lr_drop = 5e-5;
  double sigma = std::sqrt(0.5);
  std::int64_t max_iters = 1000;
  std::uint64_t seed = 1;
  std::int64_t plateau_window = 100;
  std::int64_t checkpoint_every = 250;
  std::string mel_norm = "area";

  void validate() const {
    if (clip_len < 1) throw ConfigError("train config: clip_len must be positive");
    if (batch < 1) throw ConfigError("train config: batch must be positive");
    if (!(lr > lr_drop) || !(lr_drop > 0))
      throw ConfigError("train config: need lr > lr_drop > 0");
    if (!(sigma > 0)) throw ConfigError("train config: sigma must be positive");
    if (plateau_window < 1)
      throw ConfigError("train config: plateau_window must be positive");
    if (mel_norm != "area" && mel_norm != "unit_sum")
      throw ConfigError("train config: mel_norm must be area or unit_sum");
  }

  MelNorm mel_norm_enum() const {
    return mel_norm == "area" ? MelNorm::kArea : MelNorm::kUnitSum;
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"preset", c.preset},
                     {"clip_len", c.clip_len},
                     {"batch", c.batch},
                     {"lr", c.lr},
                     {"lr_drop", c.lr_drop},
                     {"sigma", c.sigma},
                     {"max_iters", c.max_iters},
                     {"seed", c.seed},
                     {"plateau_window", c.plateau_window},
                     {"checkpoint_every", c.checkpoint_every},
                     {"mel_norm", c.mel_norm}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("preset").get_to(c.preset);
  j.at("clip_len").get_to(c.clip_len);
  j.at("batch").get_to(c.batch);
  j.at("lr").get_to(c.lr);
  j.at("lr_drop").get_to(c.lr_drop);
  j.at("sigma").get_to(c.sigma);
  j.at("max_iters").get_to(c.max_iters);
  j.at("seed").get_to(c.seed);
  j.at("plateau_window").get_to(c.plateau_window);
  j.at("checkpoint_every").get_to(c.checkpoint_every);
  j.at("mel_norm").get_to(c.mel_norm);
}

// Flat key=value text; '#' starts a comment line. Unknown keys are errors.
inline TrainConfig parse_train_config(std::istream& in) {
  TrainConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key=value, got '" + line + "'");
    auto strip = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = strip(line.substr(0, eq));
    const std::string value = strip(line.substr(eq + 1));
    try {
      if (key == "preset") cfg.preset = value;
      else if (key == "clip_len") cfg.clip_len = std::stoll(value);
      else if (key == "batch") cfg.batch = std::stoll(value);
      else if (key == "lr") cfg.lr = std::stod(value);
      else if (key == "lr_drop") cfg.lr_drop = std::stod(value);
      else if (key == "sigma") cfg.sigma = std::stod(value);
      else if (key == "max_iters") cfg.max_iters = std::stoll(value);
      else if (key == "seed") cfg.seed = std::stoull(value);
      else if (key == "plateau_window") cfg.plateau_window = std::stoll(value);
      else if (key == "checkpoint_every") cfg.checkpoint_every = std::stoll(value);
      else if (key == "mel_norm") cfg.mel_norm = value;
      else
        throw ConfigError("config line " + std::to_string(lineno) +
                          ": unknown key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw ConfigError("config line " + std::to_string(lineno) + ": bad value '" +
                        value + "' for key '" + key + "'");
    }
  }
  return cfg;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  return parse_train_config(in);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
  std::int64_t step = 0;
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  std::vector<std::vector<T>> m, v;

  void init(const std::vector<std::pair<std::string, Tensor<T>>>& params) {
    m.clear();
    v.clear();
    for (const auto& [name, p] : params) {
      (void)name;
      m.emplace_back(static_cast<size_t>(p.numel()), T(0));
      v.emplace_back(static_cast<size_t>(p.numel()), T(0));
    }
  }

  // Bias-corrected update. If any gradient is non-finite the whole step is
  // skipped and the offending parameter's name is returned.
  std::string apply(std::vector<std::pair<std::string, Tensor<T>>>& params, T lr) {
    for (auto& [name, p] : params) {
      for (T gval : p.grad())
        if (!std::isfinite(static_cast<double>(gval))) return name;
    }
    ++step;
    const T bc1 = T(1) - std::pow(beta1, static_cast<T>(step));
    const T bc2 = T(1) - std::pow(beta2, static_cast<T>(step));
    for (size_t i = 0; i < params.size(); ++i) {
      auto vals = params[i].second.data();
      auto grads = params[i].second.grad();
      auto& mi = m[i];
      auto& vi = v[i];
      for (size_t j = 0; j < vals.size(); ++j) {
        const T gj = grads[j];
        mi[j] = beta1 * mi[j] + (T(1) - beta1) * gj;
        vi[j] = beta2 * vi[j] + (T(1) - beta2) * gj * gj;
        const T mhat = mi[j] / bc1;
        const T vhat = vi[j] / bc2;
        vals[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
    return {};
  }
};

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

template <typename T>
struct SampledBatch {
  Tensor<T> audio;  // [B, clip_len]
  Tensor<T> mel;    // [B, n_mels, frames]
  bool any_padded = false;
};

// Uniform random file, uniform random offset; the mel is computed over the
// exact clip window. Clips shorter than clip_len are right-padded with zeros.
template <typename T>
SampledBatch<T> sample_clips(const std::vector<AudioClip>& dataset,
                             const TrainConfig& cfg, const MelFilterbank& fb,
                             Rng& rng) {
  if (dataset.empty()) throw ConfigError("sample_clips: empty dataset");
  const auto L = cfg.clip_len;
  SampledBatch<T> batch;
  const std::int64_t frames = 1 + L / kHop;
  batch.audio = Tensor<T>::zeros({cfg.batch, L});
  batch.mel = Tensor<T>::zeros({cfg.batch, kNumMels, frames});
  for (std::int64_t b = 0; b < cfg.batch; ++b) {
    const auto& clip = dataset[static_cast<size_t>(rng.below(dataset.size()))];
    const auto n = clip.size();
    std::int64_t offset = 0;
    if (n > L) offset = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n - L + 1)));
    AudioClip window;
    window.sample_rate = clip.sample_rate;
    window.samples.assign(static_cast<size_t>(L), 0.0);
    const auto copy = std::min(L, n - offset);
    for (std::int64_t i = 0; i < copy; ++i)
      window.samples[static_cast<size_t>(i)] =
          clip.samples[static_cast<size_t>(offset + i)];
    if (copy < L) batch.any_padded = true;
    const MelSpectrogram mel = mel_spectrogram(window, fb);
    if (mel.frames() != frames)
      throw ShapeError("sample_clips: expected " + std::to_string(frames) +
                       " mel frames, got " + std::to_string(mel.frames()));
    for (std::int64_t i = 0; i < L; ++i)
      batch.audio.at(b * L + i) = static_cast<T>(window.samples[static_cast<size_t>(i)]);
    for (std::int64_t r = 0; r < kNumMels; ++r)
      for (std::int64_t c = 0; c < frames; ++c)
        batch.mel.at((b * kNumMels + r) * frames + c) = static_cast<T>(mel.values(r, c));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainResult {
  std::vector<double> nll_trace;  // per-element NLL including the Gaussian constant
  std::int64_t iterations = 0;
  double final_lr = 0.0;
  bool lr_dropped = false;
  std::string last_checkpoint;
};

namespace detail {

inline std::string ckpt_name(std::int64_t iter) {
  std::ostringstream os;
  os << "ckpt_" << std::setw(7) << std::setfill('0') << iter << ".ckpt";
  return os.str();
}

}  // namespace detail

// Runs (or resumes) training. Emits metrics.tsv lines `iter nll lr seconds`
// (nll includes the Gaussian constant; seconds are cumulative wall time) and
// periodic checkpoints into out_dir.
template <typename T>
TrainResult train_loop(const TrainConfig& cfg, const std::vector<AudioClip>& dataset,
                       const std::string& out_dir,
                       const std::string& resume_path = {}) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  const ModelConfig mcfg = ModelConfig::by_name(cfg.preset);
  if (cfg.clip_len % mcfg.group != 0)
    throw ConfigError("train config: clip_len " + std::to_string(cfg.clip_len) +
                      " not divisible by group " + std::to_string(mcfg.group));
  const MelFilterbank fb = mel_filterbank(kNumMels, kNFft, kSampleRate,
                                          cfg.mel_norm_enum());

  Rng rng(cfg.seed);
  std::int64_t start_iter = 0;
  std::vector<double> nll_history;
  double lr = cfg.lr;
  bool dropped = false;

  WaveGlowModel<T>* model_ptr = nullptr;
  WaveGlowModel<T> fresh = [&] {
    if (resume_path.empty()) return WaveGlowModel<T>(mcfg, rng);
    Rng throwaway(cfg.seed);
    return WaveGlowModel<T>(mcfg, throwaway);
  }();
  AdamState<T> adam;
  adam.init(fresh.named_params());

  if (!resume_path.empty()) {
    const RawCheckpoint ck = read_checkpoint(resume_path);
    fresh = build_model<T>(ck);
    adam.init(fresh.named_params());
    auto& params = fresh.named_params();
    for (size_t i = 0; i < params.size(); ++i) {
      const auto* mv = ck.find("adam.m." + params[i].first);
      const auto* vv = ck.find("adam.v." + params[i].first);
      if (!mv || !vv)
        throw FormatError("checkpoint: missing optimizer state for '" +
                          params[i].first + "'");
      for (size_t j = 0; j < mv->size(); ++j) adam.m[i][j] = static_cast<T>((*mv)[j]);
      for (size_t j = 0; j < vv->size(); ++j) adam.v[i][j] = static_cast<T>((*vv)[j]);
    }
    const auto& meta = ck.meta;
    adam.step = meta.at("adam_step").get<std::int64_t>();
    start_iter = meta.at("iteration").get<std::int64_t>();
    rng.set_state(meta.at("rng").get<std::string>());
    lr = meta.at("lr").get<double>();
    dropped = meta.at("lr_dropped").get<bool>();
    nll_history = meta.value("nll_history", std::vector<double>{});
  }
  model_ptr = &fresh;
  WaveGlowModel<T>& model = *model_ptr;

  auto save = [&](std::int64_t iter, const std::string& filename) {
    std::vector<std::pair<std::string, Tensor<T>>> extras;
    auto& params = model.named_params();
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor<T> mt = Tensor<T>::from(params[i].second.shape(),
                                     std::vector<T>(adam.m[i].begin(), adam.m[i].end()));
      Tensor<T> vt = Tensor<T>::from(params[i].second.shape(),
                                     std::vector<T>(adam.v[i].begin(), adam.v[i].end()));
      extras.emplace_back("adam.m." + params[i].first, mt);
      extras.emplace_back("adam.v." + params[i].first, vt);
    }
    nlohmann::json meta;
    meta["iteration"] = iter;
    meta["adam_step"] = adam.step;
    meta["rng"] = rng.state();
    meta["lr"] = lr;
    meta["lr_dropped"] = dropped;
    // Keep just enough loss history for the plateau rule to survive a resume.
    const size_t keep = static_cast<size_t>(2 * cfg.plateau_window);
    std::vector<double> tail = nll_history;
    if (tail.size() > keep) tail.erase(tail.begin(), tail.end() - static_cast<long>(keep));
    meta["nll_history"] = tail;
    meta["train"] = cfg;
    const std::string path = (fs::path(out_dir) / filename).string();
    save_checkpoint(path, model, extras, meta);
    return path;
  };

  TrainResult result;
  result.last_checkpoint = save(start_iter, detail::ckpt_name(start_iter));

  std::ofstream metrics((fs::path(out_dir) / "metrics.tsv").string(), std::ios::app);
  if (!metrics) throw FormatError("train: cannot open metrics.tsv in " + out_dir);
  metrics << std::setprecision(10);

  const auto t0 = std::chrono::steady_clock::now();
  const T constant = nll_constant(static_cast<T>(cfg.sigma));

  for (std::int64_t iter = start_iter; iter < cfg.max_iters; ++iter) {
    const SampledBatch<T> batch = sample_clips<T>(dataset, cfg, fb, rng);
    for (auto& [name, p] : model.named_params()) {
      (void)name;
      p.zero_grad();
    }
    const FlowOutput<T> out = model.forward(batch.audio, batch.mel);
    const Tensor<T> loss = negative_log_likelihood(out, static_cast<T>(cfg.sigma),
                                                   cfg.batch, cfg.clip_len);
    const double nll_core = static_cast<double>(loss.item());
    const double nll_full = nll_core + static_cast<double>(constant);
    if (!std::isfinite(nll_core)) {
      save(iter, "emergency.ckpt");
      throw NumericError("train: non-finite loss at iteration " +
                         std::to_string(iter) + "; emergency checkpoint written");
    }
    backward(loss);
    const std::string bad = adam.apply(model.named_params(), static_cast<T>(lr));
    if (!bad.empty())
      metrics << "# iteration " << iter << ": skipped update, non-finite gradient in "
              << bad << "\n";

    nll_history.push_back(nll_full);
    result.nll_trace.push_back(nll_full);

    // Plateau rule: once the mean NLL of the last window improves on the
    // window before it by less than 0.1%, drop the learning rate (one time).
    if (!dropped &&
        static_cast<std::int64_t>(nll_history.size()) >= 2 * cfg.plateau_window) {
      const auto w = static_cast<size_t>(cfg.plateau_window);
      double prev = 0, recent = 0;
      for (size_t i = nll_history.size() - 2 * w; i < nll_history.size() - w; ++i)
        prev += nll_history[i];
      for (size_t i = nll_history.size() - w; i < nll_history.size(); ++i)
        recent += nll_history[i];
      prev /= static_cast<double>(w);
      recent /= static_cast<double>(w);
      if (prev - recent < 0.001 * std::abs(prev)) {
        lr = cfg.lr_drop;
        dropped = true;
      }
    }

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    metrics << (iter + 1) << '\t' << nll_full << '\t' << lr << '\t' << secs << '\n';
    metrics.flush();

    if (cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0)
      result.last_checkpoint = save(iter + 1, detail::ckpt_name(iter + 1));
  }
  if (cfg.max_iters > start_iter &&
      (cfg.checkpoint_every <= 0 || cfg.max_iters % cfg.checkpoint_every != 0))
    result.last_checkpoint = save(cfg.max_iters, detail::ckpt_name(cfg.max_iters));
  result.iterations = cfg.max_iters - start_iter;
  result.final_lr = lr;
  result.lr_dropped = dropped;
  return result;
}

}  // namespace waveglow
