#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "zfcl/tensor.hpp"

namespace zfcl {

// Binary tensor container: 4-byte magic, uint32 LE version, uint64 LE header
// length, UTF-8 JSON header, then raw little-endian tensor payloads. Entries
// are laid out (and listed) in name order with offsets relative to the
// payload start, so serialization is canonical: save(load(f)) == f.
inline constexpr uint32_t kContainerVersion = 1;
inline constexpr char kMagicBank[5] = "ZFCB";
inline constexpr char kMagicCheckpoint[5] = "ZFCK";
inline constexpr char kMagicTensors[5] = "ZFCT";

std::string hash_to_hex(uint64_t h);
uint64_t hex_to_hash(const std::string& s);

struct RawEntry {
  std::string dtype;  // "f16" | "f32"
  std::vector<int> shape;
  std::vector<uint8_t> bytes;
};

class ContainerWriter {
 public:
  void put_f32(const std::string& name, const Tensor<float>& t);
  void put_f16(const std::string& name, const std::vector<int>& shape,
               const std::vector<uint16_t>& bits);
  nlohmann::json meta = nlohmann::json::object();

  void write(const std::string& path, const char* magic) const;

 private:
  std::map<std::string, RawEntry> entries_;
};

class Container {
 public:
  static Container read(const std::string& path, const char* expected_magic);

  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  const RawEntry& entry(const std::string& name) const;
  Tensor<float> f32(const std::string& name) const;
  void f16(const std::string& name, std::vector<int>& shape_out,
           std::vector<uint16_t>& bits_out) const;
  std::vector<std::string> names_with_prefix(const std::string& prefix) const;

  nlohmann::json meta;

 private:
  std::map<std::string, RawEntry> entries_;
};

}  // namespace zfcl
