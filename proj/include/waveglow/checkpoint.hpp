#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "waveglow/errors.hpp"
#include "waveglow/flow.hpp"

namespace waveglow {

inline constexpr char kCkptMagic[8] = {'W', 'G', 'L', 'O', 'W', 'C', 'P', '1'};

inline std::uint64_t fnv1a64(const unsigned char* data, size_t n,
                             std::uint64_t seed = 14695981039346656037ULL) {
  std::uint64_t h = seed;
  for (size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"preset", c.preset},
                     {"n_flows", c.n_flows},
                     {"group", c.group},
                     {"early_every", c.early_every},
                     {"early_size", c.early_size},
                     {"wn_layers", c.wn_layers},
                     {"wn_residual", c.wn_residual},
                     {"wn_skip", c.wn_skip},
                     {"wn_kernel", c.wn_kernel},
                     {"n_mels", c.n_mels},
                     {"upsample_kernel", c.upsample_kernel},
                     {"upsample_stride", c.upsample_stride},
                     // Recorded so the inverse direction re-attaches the same
                     // channels the forward diverted.
                     {"early_channels", "first"}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("preset").get_to(c.preset);
  j.at("n_flows").get_to(c.n_flows);
  j.at("group").get_to(c.group);
  j.at("early_every").get_to(c.early_every);
  j.at("early_size").get_to(c.early_size);
  j.at("wn_layers").get_to(c.wn_layers);
  j.at("wn_residual").get_to(c.wn_residual);
  j.at("wn_skip").get_to(c.wn_skip);
  j.at("wn_kernel").get_to(c.wn_kernel);
  j.at("n_mels").get_to(c.n_mels);
  j.at("upsample_kernel").get_to(c.upsample_kernel);
  j.at("upsample_stride").get_to(c.upsample_stride);
}

// Layout: magic(8) | u64 manifest_len | manifest JSON (UTF-8) | u64 body_len |
// body (raw f32 LE in manifest order) | u64 FNV-1a checksum of the body.
template <typename T>
void save_checkpoint(const std::string& path, const WaveGlowModel<T>& model,
                     const std::vector<std::pair<std::string, Tensor<T>>>& extras,
                     const nlohmann::json& meta) {
  std::vector<std::pair<std::string, Tensor<T>>> all = model.named_params();
  for (const auto& e : extras) all.push_back(e);

  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["model"] = model.config();
  manifest["meta"] = meta;
  auto& plist = manifest["params"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : all) {
    plist.push_back({{"name", name},
                     {"shape", t.shape()},
                     {"dtype", "f32"},
                     {"offset", offset},
                     {"numel", t.numel()}});
    offset += static_cast<std::uint64_t>(t.numel()) * 4;
  }
  const std::string mtext = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("checkpoint: cannot write '" + path + "'");
  out.write(kCkptMagic, 8);
  detail::write_le<std::uint64_t>(out, mtext.size());
  out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  detail::write_le<std::uint64_t>(out, offset);
  std::uint64_t hash = 14695981039346656037ULL;
  std::vector<unsigned char> buf;
  for (const auto& [name, t] : all) {
    (void)name;
    buf.resize(static_cast<size_t>(t.numel()) * 4);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      const auto f = static_cast<float>(t.at(i));
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      for (int byte = 0; byte < 4; ++byte)
        buf[static_cast<size_t>(i) * 4 + static_cast<size_t>(byte)] =
            static_cast<unsigned char>((bits >> (8 * byte)) & 0xff);
    }
    hash = fnv1a64(buf.data(), buf.size(), hash);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
  }
  detail::write_le<std::uint64_t>(out, hash);
  if (!out) throw FormatError("checkpoint: write failed for '" + path + "'");
}

struct RawCheckpoint {
  ModelConfig config;
  nlohmann::json meta;
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<std::vector<float>> values;

  const std::vector<float>* find(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return &values[i];
    return nullptr;
  }
  const Shape* find_shape(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return &shapes[i];
    return nullptr;
  }
};

inline RawCheckpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open '" + path + "'");
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw FormatError("checkpoint: '" + path + "': bad magic");
  const auto mlen = detail::read_le<std::uint64_t>(in, "manifest length");
  if (mlen > (1ULL << 30))
    throw FormatError("checkpoint: '" + path + "': implausible manifest length");
  std::string mtext(mlen, '\0');
  if (!in.read(mtext.data(), static_cast<std::streamsize>(mlen)))
    throw FormatError("checkpoint: '" + path + "': truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mtext);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint: '" + path + "': manifest parse error: " + e.what());
  }

  RawCheckpoint ck;
  ck.config = manifest.at("model").get<ModelConfig>();
  ck.meta = manifest.value("meta", nlohmann::json::object());

  const auto body_len = detail::read_le<std::uint64_t>(in, "body length");
  std::vector<unsigned char> body(body_len);
  if (!in.read(reinterpret_cast<char*>(body.data()),
               static_cast<std::streamsize>(body_len)))
    throw FormatError("checkpoint: '" + path + "': truncated body");
  const auto stored_hash = detail::read_le<std::uint64_t>(in, "checksum");
  const auto computed = fnv1a64(body.data(), body.size());
  if (stored_hash != computed)
    throw FormatError("checkpoint: '" + path + "': checksum mismatch (stored " +
                      std::to_string(stored_hash) + ", computed " +
                      std::to_string(computed) + ")");

  for (const auto& entry : manifest.at("params")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto numel = entry.at("numel").get<std::int64_t>();
    if (numel != shape_numel(shape) || offset + static_cast<std::uint64_t>(numel) * 4 > body_len)
      throw FormatError("checkpoint: '" + path + "': bad record for " + name);
    std::vector<float> vals(static_cast<size_t>(numel));
    for (std::int64_t i = 0; i < numel; ++i) {
      std::uint32_t bits = 0;
      for (int byte = 0; byte < 4; ++byte)
        bits |= static_cast<std::uint32_t>(
                    body[offset + static_cast<std::uint64_t>(i) * 4 +
                         static_cast<std::uint64_t>(byte)])
                << (8 * byte);
      std::memcpy(&vals[static_cast<size_t>(i)], &bits, 4);
    }
    ck.names.push_back(name);
    ck.shapes.push_back(shape);
    ck.values.push_back(std::move(vals));
  }
  return ck;
}

// Rebuilds a model from a checkpoint; every model parameter must be present
// with a matching shape.
template <typename T>
WaveGlowModel<T> build_model(const RawCheckpoint& ck) {
  Rng rng(0);  // initialization is fully overwritten below
  WaveGlowModel<T> model(ck.config, rng);
  for (auto& [name, t] : model.named_params()) {
    const auto* vals = ck.find(name);
    if (!vals) throw FormatError("checkpoint: missing parameter '" + name + "'");
    const auto* shape = ck.find_shape(name);
    if (*shape != t.shape())
      throw FormatError("checkpoint: parameter '" + name + "' has shape " +
                        shape_str(*shape) + ", model expects " + shape_str(t.shape()));
    auto dst = t.data();
    for (size_t i = 0; i < vals->size(); ++i) dst[i] = static_cast<T>((*vals)[i]);
  }
  return model;
}

}  // namespace waveglow
