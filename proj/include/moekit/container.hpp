#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "moekit/arch.hpp"
#include "moekit/model.hpp"
#include "moekit/quant.hpp"

namespace moekit {

// Weight container:
//   "MMOE" | version u32 LE | manifest length u64 LE | manifest JSON
//   | 64-byte-aligned blob region
// The manifest is a JSON array of {name, dtype in {f32, q4g32}, shape,
// offset, nbytes}; offsets are relative to the blob region, whose start is
// the first 64-byte-aligned position after the manifest, so every blob is
// 64-byte aligned in the file. q4g32 blobs hold the packed codes (two per
// byte, code+8, low nibble = even column) followed by the per-group f32
// scales, both row-major.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr uint32_t kContainerVersion = 1;

struct TensorEntry {
  std::string name;
  std::string dtype;  // "f32" or "q4g32"
  std::vector<int64_t> shape;
  std::vector<uint8_t> bytes;
};

namespace containerdetail {

inline uint64_t align64(uint64_t x) { return (x + 63) & ~uint64_t{63}; }

template <typename T>
inline void put_le(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

}  // namespace containerdetail

inline void write_container(const std::string& path,
                            const std::vector<TensorEntry>& entries) {
  using containerdetail::align64;
  nlohmann::json manifest = nlohmann::json::array();
  uint64_t offset = 0;
  for (const TensorEntry& e : entries) {
    manifest.push_back({{"name", e.name},
                        {"dtype", e.dtype},
                        {"shape", e.shape},
                        {"offset", offset},
                        {"nbytes", e.bytes.size()}});
    offset = align64(offset + e.bytes.size());
  }
  const std::string mstr = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  std::string header = "MMOE";
  containerdetail::put_le<uint32_t>(header, kContainerVersion);
  containerdetail::put_le<uint64_t>(header, mstr.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));

  uint64_t pos = header.size() + mstr.size();
  const uint64_t region = align64(pos);
  for (uint64_t i = pos; i < region; ++i) out.put('\0');
  pos = 0;
  for (const TensorEntry& e : entries) {
    out.write(reinterpret_cast<const char*>(e.bytes.data()),
              static_cast<std::streamsize>(e.bytes.size()));
    pos += e.bytes.size();
    const uint64_t next = align64(pos);
    for (uint64_t i = pos; i < next; ++i) out.put('\0');
    pos = next;
  }
  if (!out) throw IoError("write failed: " + path);
}

inline std::vector<TensorEntry> read_container(const std::string& path) {
  using containerdetail::align64;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "MMOE", 4) != 0) {
    throw IoError("not a MMOE container: " + path);
  }
  uint32_t version = 0;
  uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  if (!in || version != kContainerVersion) {
    throw IoError("unsupported container version");
  }
  std::string mstr(mlen, '\0');
  in.read(mstr.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw IoError("truncated manifest");
  const uint64_t region = align64(16 + mlen);

  nlohmann::json manifest = nlohmann::json::parse(mstr);
  std::vector<TensorEntry> entries;
  for (const auto& j : manifest) {
    TensorEntry e;
    e.name = j.at("name").get<std::string>();
    e.dtype = j.at("dtype").get<std::string>();
    e.shape = j.at("shape").get<std::vector<int64_t>>();
    const uint64_t offset = j.at("offset").get<uint64_t>();
    const uint64_t nbytes = j.at("nbytes").get<uint64_t>();
    e.bytes.resize(nbytes);
    in.seekg(static_cast<std::streamoff>(region + offset));
    in.read(reinterpret_cast<char*>(e.bytes.data()),
            static_cast<std::streamsize>(nbytes));
    if (!in) throw IoError("truncated blob: " + e.name);
    entries.push_back(std::move(e));
  }
  return entries;
}

// --- tensor payload encoding ---------------------------------------------------

inline std::vector<uint8_t> f32_bytes(const std::vector<double>& v) {
  std::vector<uint8_t> out(v.size() * 4);
  for (size_t i = 0; i < v.size(); ++i) {
    const float f = static_cast<float>(v[i]);
    std::memcpy(&out[i * 4], &f, 4);
  }
  return out;
}

inline std::vector<double> f32_values(const TensorEntry& e) {
  if (e.dtype != "f32") throw IoError("expected f32 tensor: " + e.name);
  std::vector<double> out(e.bytes.size() / 4);
  for (size_t i = 0; i < out.size(); ++i) {
    float f;
    std::memcpy(&f, &e.bytes[i * 4], 4);
    out[i] = f;
  }
  return out;
}

inline std::vector<uint8_t> q4_bytes(const QuantizedTensor& q) {
  std::vector<uint8_t> out = q.codes;
  const size_t base = out.size();
  out.resize(base + q.scales.size() * 4);
  std::memcpy(&out[base], q.scales.data(), q.scales.size() * 4);
  return out;
}

inline QuantizedTensor q4_tensor(const TensorEntry& e) {
  if (e.dtype != "q4g32") throw IoError("expected q4g32 tensor: " + e.name);
  if (e.shape.size() != 2) throw IoError("q4g32 tensors are 2-D: " + e.name);
  QuantizedTensor q;
  q.rows = e.shape[0];
  q.cols = e.shape[1];
  q.group_size = 32;
  q.bits = 4;
  const size_t code_bytes = q.rows * q.row_code_bytes();
  const size_t scale_count = q.rows * q.groups_per_row();
  if (e.bytes.size() != code_bytes + scale_count * 4) {
    throw IoError("q4g32 payload size mismatch: " + e.name);
  }
  q.codes.assign(e.bytes.begin(), e.bytes.begin() + code_bytes);
  q.scales.resize(scale_count);
  std::memcpy(q.scales.data(), &e.bytes[code_bytes], scale_count * 4);
  return q;
}

// --- model serialization --------------------------------------------------------

namespace containerdetail {

// Scalar hyperparameters ride along as a plain f32 tensor; every value used
// here is exactly representable.
inline std::vector<double> hparams_vector(const ModelConfig& c) {
  return {static_cast<double>(c.backbone.d_model),
          static_cast<double>(c.backbone.d_ff),
          static_cast<double>(c.backbone.n_h),
          static_cast<double>(c.backbone.n_kv),
          static_cast<double>(c.backbone.d_h),
          static_cast<double>(c.backbone.n_l),
          static_cast<double>(c.backbone.vocab_size),
          c.backbone.rope_theta,
          static_cast<double>(c.moe.e),
          static_cast<double>(c.moe.g),
          static_cast<double>(c.moe.k),
          c.moe.shared ? 1.0 : 0.0,
          static_cast<double>(c.moe.shared_units),
          c.moe.capacity_factor,
          c.moe.dispatch == DispatchMode::kDropAndPad ? 1.0 : 0.0};
}

inline ModelConfig hparams_config(const std::vector<double>& v) {
  if (v.size() < 15) throw IoError("hparams tensor too short");
  ModelConfig c;
  c.backbone.d_model = static_cast<int64_t>(v[0]);
  c.backbone.d_ff = static_cast<int64_t>(v[1]);
  c.backbone.n_h = static_cast<int64_t>(v[2]);
  c.backbone.n_kv = static_cast<int64_t>(v[3]);
  c.backbone.d_h = static_cast<int64_t>(v[4]);
  c.backbone.n_l = static_cast<int64_t>(v[5]);
  c.backbone.vocab_size = static_cast<int64_t>(v[6]);
  c.backbone.rope_theta = v[7];
  c.moe.e = static_cast<int64_t>(v[8]);
  c.moe.g = static_cast<int64_t>(v[9]);
  c.moe.k = static_cast<int64_t>(v[10]);
  c.moe.shared = v[11] != 0.0;
  c.moe.shared_units = static_cast<int64_t>(v[12]);
  c.moe.capacity_factor = v[13];
  c.moe.dispatch =
      v[14] != 0.0 ? DispatchMode::kDropAndPad : DispatchMode::kDropless;
  return c;
}

}  // namespace containerdetail

inline void save_model(ModelWeights& model, const std::string& path) {
  std::vector<TensorEntry> entries;
  entries.push_back({"hparams", "f32", {15},
                     f32_bytes(containerdetail::hparams_vector(model.config))});
  const int64_t d = model.d_model();
  model.for_each_param([&](const std::string& name, std::vector<double>& w) {
    TensorEntry e;
    e.name = name;
    e.dtype = "f32";
    if (name == "embedding") {
      e.shape = {model.vocab(), d};
    } else if (name.find("norm") != std::string::npos) {
      e.shape = {static_cast<int64_t>(w.size())};
    } else {
      // all remaining tensors are [out, in]; wo and the expert down
      // projections have out == d_model, everything else has in == d_model
      const bool out_is_d = name.find(".down") != std::string::npos ||
                            name.find(".wo") != std::string::npos;
      const int64_t in = out_is_d ? static_cast<int64_t>(w.size()) / d : d;
      e.shape = {static_cast<int64_t>(w.size()) / in, in};
    }
    e.bytes = f32_bytes(w);
    entries.push_back(std::move(e));
  });
  for (size_t l = 0; l < model.layers.size(); ++l) {
    TensorEntry e;
    e.name = "layers." + std::to_string(l) + ".router.bias";
    e.dtype = "f32";
    e.shape = {static_cast<int64_t>(model.layers[l].router.balance_bias.size())};
    e.bytes = f32_bytes(model.layers[l].router.balance_bias);
    entries.push_back(std::move(e));
  }
  write_container(path, entries);
}

// Loads a float container back into a trainable model. Quantized tensors are
// dequantized on the way in.
inline ModelWeights load_model(const std::string& path) {
  const auto entries = read_container(path);
  std::map<std::string, const TensorEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  const auto* hp = by_name.count("hparams") ? by_name.at("hparams") : nullptr;
  if (!hp) throw IoError("container missing hparams tensor");
  const ModelConfig cfg = containerdetail::hparams_config(f32_values(*hp));

  ModelWeights model;
  Rng rng(0);
  model.init(cfg, rng);

  auto fetch = [&](const std::string& name, std::vector<double>& dst) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("container missing tensor: " + name);
    const TensorEntry& e = *it->second;
    std::vector<double> v =
        e.dtype == "f32" ? f32_values(e) : dequantize(q4_tensor(e));
    if (v.size() != dst.size()) throw IoError("tensor size mismatch: " + name);
    dst = std::move(v);
  };
  model.for_each_param(
      [&](const std::string& name, std::vector<double>& w) { fetch(name, w); });
  for (size_t l = 0; l < model.layers.size(); ++l) {
    fetch("layers." + std::to_string(l) + ".router.bias",
          model.layers[l].router.balance_bias);
  }
  return model;
}

inline bool is_quantizable_linear(const std::string& name) {
  // every linear weight except the router; norms and biases are not linears
  if (name == "hparams") return false;
  if (name.find("router") != std::string::npos) return false;
  if (name.find("norm") != std::string::npos) return false;
  return true;
}

// Rewrites a container with INT4 group-32 codes for all linear weights.
// Router tensors stay in full precision.
inline void quantize_container(const std::string& in_path,
                               const std::string& out_path) {
  auto entries = read_container(in_path);
  for (TensorEntry& e : entries) {
    if (e.dtype != "f32" || !is_quantizable_linear(e.name)) continue;
    if (e.shape.size() != 2) continue;
    const QuantizedTensor q =
        quantize_weights(f32_values(e), e.shape[0], e.shape[1]);
    e.dtype = "q4g32";
    e.bytes = q4_bytes(q);
  }
  write_container(out_path, entries);
}

}  // namespace moekit
