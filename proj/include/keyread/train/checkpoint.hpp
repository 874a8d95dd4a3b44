#pragma once

// "KRM1" container: 4-byte magic, u64 little-endian header length, UTF-8 JSON
// header, then float32 little-endian payloads in directory order.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "keyread/json_util.hpp"
#include "keyread/model/config.hpp"
#include "keyread/numcore/adam.hpp"
#include "keyread/numcore/tensor.hpp"

namespace keyread::train {

inline constexpr char kMagic[4] = {'K', 'R', 'M', '1'};

struct Checkpoint {
  model::ModelConfig model;
  std::string vocab;
  std::string phase = "init";  // init | pretrain | phase1 | phase2
  long step = 0;
  json rng = json::object();
  json extra = json::object();
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  AdamConfig adam_config;
  std::map<std::string, AdamSlot<float>> adam;
};

namespace detail {

inline std::uint32_t crc(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline std::string float_bytes(const Tensor<float>& t) {
  std::string out(t.size() * 4, '\0');
  for (std::size_t i = 0; i < t.size(); ++i) {
    auto u = std::bit_cast<std::uint32_t>(t[i]);
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
    std::memcpy(out.data() + i * 4, &u, 4);
  }
  return out;
}

inline Tensor<float> float_tensor(const Shape& shape, const char* data) {
  Tensor<float> t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, data + i * 4, 4);
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
    t[i] = std::bit_cast<float>(u);
  }
  return t;
}

}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  std::vector<std::pair<std::string, const Tensor<float>*>> all;
  for (const auto& [n, t] : ck.tensors) all.emplace_back("model/" + n, &t);
  json steps = json::object();
  for (const auto& [n, slot] : ck.adam) {
    all.emplace_back("adam_m/" + n, &slot.m);
    all.emplace_back("adam_v/" + n, &slot.v);
    steps[n] = slot.step;
  }
  json dir = json::array();
  std::string payload;
  for (const auto& [name, t] : all) {
    const std::string bytes = detail::float_bytes(*t);
    dir.push_back({{"name", name}, {"shape", t->shape()}, {"offset", payload.size()}, {"crc32", detail::crc(bytes)}});
    payload += bytes;
  }
  json mc;
  model::to_json(mc, ck.model);
  const json header{{"model", mc},
                    {"vocab", ck.vocab},
                    {"phase", ck.phase},
                    {"step", ck.step},
                    {"rng", ck.rng},
                    {"extra", ck.extra},
                    {"adam",
                     {{"lr", ck.adam_config.lr},
                      {"beta1", ck.adam_config.beta1},
                      {"beta2", ck.adam_config.beta2},
                      {"epsilon", ck.adam_config.epsilon},
                      {"steps", steps}}},
                    {"tensors", dir}};
  const std::string h = header.dump();
  std::string out(kMagic, 4);
  std::uint64_t len = h.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xFF));
  out += h;
  out += payload;
  return out;
}

inline Checkpoint deserialize(const std::string& data, const std::string& origin = "checkpoint") {
  if (data.size() < 12 || std::memcmp(data.data(), kMagic, 4) != 0) throw Error(origin + ": bad magic, not a KRM1 checkpoint");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[4 + i])) << (8 * i);
  if (len > data.size() - 12) throw Error(origin + ": truncated header");
  json h;
  try {
    h = json::parse(data.substr(12, len));
  } catch (const json::parse_error& e) {
    throw Error(origin + ": malformed header (" + std::string(e.what()) + ")");
  }
  const std::size_t base = 12 + len;
  Checkpoint ck;
  try {
    model::merge_model_config(h.at("model"), ck.model);
    ck.vocab = h.at("vocab").get<std::string>();
    ck.phase = h.at("phase").get<std::string>();
    ck.step = h.at("step").get<long>();
    ck.rng = h.at("rng");
    ck.extra = h.at("extra");
    const json& a = h.at("adam");
    ck.adam_config = {a.at("lr").get<double>(), a.at("beta1").get<double>(), a.at("beta2").get<double>(),
                      a.at("epsilon").get<double>()};
    std::size_t expected_offset = 0;
    for (const auto& e : h.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const std::size_t bytes = shape_size(shape) * 4;
      if (offset != expected_offset) throw Error(origin + ": tensor " + name + " has an unexpected offset");
      expected_offset += bytes;
      if (base + offset + bytes > data.size()) throw Error(origin + ": truncated payload for tensor " + name);
      const std::string raw = data.substr(base + offset, bytes);
      if (detail::crc(raw) != e.at("crc32").get<std::uint32_t>()) throw Error(origin + ": checksum mismatch for tensor " + name);
      Tensor<float> t = detail::float_tensor(shape, raw.data());
      const auto slash = name.find('/');
      const std::string kind = name.substr(0, slash), rest = name.substr(slash + 1);
      if (kind == "model") {
        ck.tensors.emplace_back(rest, std::move(t));
      } else if (kind == "adam_m") {
        ck.adam[rest].m = std::move(t);
      } else if (kind == "adam_v") {
        ck.adam[rest].v = std::move(t);
      } else {
        throw Error(origin + ": unknown tensor kind in " + name);
      }
    }
    if (base + expected_offset != data.size()) throw Error(origin + ": trailing bytes after the last tensor");
    for (auto& [n, slot] : ck.adam) {
      slot.step = a.at("steps").at(n).get<long>();
      if (slot.m.shape() != slot.v.shape()) throw Error(origin + ": adam moments for " + n + " disagree in shape");
    }
  } catch (const json::exception& e) {
    throw Error(origin + ": malformed header field (" + std::string(e.what()) + ")");
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = serialize(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint not found: " + path.string());
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(data, path.string());
}

}  // namespace keyread::train
