#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "dotlens/common.hpp"
#include "json.hpp"

namespace dotlens {

// Single-file model checkpoint: 8-byte LE header length, JSON header, raw f32
// weight stream in collection order. Header must carry "n_params".
inline void write_checkpoint(const std::string& path, const nlohmann::json& header,
                             const std::vector<float>& flat) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw LookupError("cannot write checkpoint: " + path);
  const std::string h = header.dump();
  const std::uint64_t len = h.size();
  f.write(reinterpret_cast<const char*>(&len), sizeof(len));
  f.write(h.data(), static_cast<std::streamsize>(h.size()));
  f.write(reinterpret_cast<const char*>(flat.data()),
          static_cast<std::streamsize>(flat.size() * sizeof(float)));
}

inline std::pair<nlohmann::json, std::vector<float>> read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LookupError("cannot read checkpoint: " + path);
  std::uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string h(len, '\0');
  f.read(h.data(), static_cast<std::streamsize>(len));
  nlohmann::json header = nlohmann::json::parse(h);
  std::vector<float> flat(header.at("n_params").get<std::size_t>());
  f.read(reinterpret_cast<char*>(flat.data()),
         static_cast<std::streamsize>(flat.size() * sizeof(float)));
  if (!f) throw ShapeError("checkpoint truncated: " + path);
  return {std::move(header), std::move(flat)};
}

}  // namespace dotlens
