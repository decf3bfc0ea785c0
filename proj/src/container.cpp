#include "zfcl/container.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

#include "zfcl/error.hpp"

namespace zfcl {

std::string hash_to_hex(uint64_t h) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "0x%016llx", (unsigned long long)h);
  return buf;
}

uint64_t hex_to_hash(const std::string& s) {
  if (s.size() < 3 || s[0] != '0' || s[1] != 'x')
    fail(Errc::BadConfig, "bad hash literal '" + s + "'");
  return std::strtoull(s.c_str() + 2, nullptr, 16);
}

void ContainerWriter::put_f32(const std::string& name, const Tensor<float>& t) {
  RawEntry e;
  e.dtype = "f32";
  e.shape = t.shape;
  e.bytes.resize(t.data.size() * 4);
  if (!t.data.empty()) std::memcpy(e.bytes.data(), t.data.data(), e.bytes.size());
  entries_[name] = std::move(e);
}

void ContainerWriter::put_f16(const std::string& name, const std::vector<int>& shape,
                              const std::vector<uint16_t>& bits) {
  if (Tensor<float>::numel_of(shape) != (int64_t)bits.size())
    fail(Errc::ShapeMismatch, "f16 entry '" + name + "' size mismatch");
  RawEntry e;
  e.dtype = "f16";
  e.shape = shape;
  e.bytes.resize(bits.size() * 2);
  if (!bits.empty()) std::memcpy(e.bytes.data(), bits.data(), e.bytes.size());
  entries_[name] = std::move(e);
}

void ContainerWriter::write(const std::string& path, const char* magic) const {
  nlohmann::json entries = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, e] : entries_) {  // std::map: name order
    entries.push_back({{"name", name},
                       {"dtype", e.dtype},
                       {"shape", e.shape},
                       {"offset", offset},
                       {"length", e.bytes.size()}});
    offset += e.bytes.size();
  }
  nlohmann::json header = {{"entries", entries}, {"meta", meta}};
  std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::IoError, "cannot open '" + path + "' for writing");
  out.write(magic, 4);
  uint32_t version = kContainerVersion;
  out.write((const char*)&version, 4);
  uint64_t hlen = header_str.size();
  out.write((const char*)&hlen, 8);
  out.write(header_str.data(), (std::streamsize)header_str.size());
  for (const auto& [name, e] : entries_)
    out.write((const char*)e.bytes.data(), (std::streamsize)e.bytes.size());
  if (!out) fail(Errc::IoError, "write failed for '" + path + "'");
}

Container Container::read(const std::string& path, const char* expected_magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::IoError, "cannot open '" + path + "'");
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  size_t n = buf.size();
  if (n < 16) fail(Errc::Truncated, "file ends at byte " + std::to_string(n) + ", header needs 16");
  if (std::memcmp(buf.data(), expected_magic, 4) != 0)
    fail(Errc::BadMagic, "expected magic '" + std::string(expected_magic) + "' in '" + path + "'");
  uint32_t version;
  std::memcpy(&version, buf.data() + 4, 4);
  if (version != kContainerVersion)
    fail(Errc::BadVersion, "container version " + std::to_string(version) + ", expected " +
                               std::to_string(kContainerVersion));
  uint64_t hlen;
  std::memcpy(&hlen, buf.data() + 8, 8);
  if (16 + hlen > n)
    fail(Errc::Truncated, "header of " + std::to_string(hlen) + " bytes exceeds file size " +
                              std::to_string(n) + " at byte 16");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.begin() + 16, buf.begin() + 16 + (ptrdiff_t)hlen);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::BadConfig, std::string("malformed container header: ") + e.what());
  }
  Container c;
  c.meta = header.value("meta", nlohmann::json::object());
  size_t payload_start = 16 + (size_t)hlen;
  size_t payload_size = n - payload_start;
  for (const auto& je : header.at("entries")) {
    RawEntry e;
    std::string name = je.at("name").get<std::string>();
    e.dtype = je.at("dtype").get<std::string>();
    e.shape = je.at("shape").get<std::vector<int>>();
    uint64_t off = je.at("offset").get<uint64_t>();
    uint64_t len = je.at("length").get<uint64_t>();
    if (e.dtype != "f16" && e.dtype != "f32")
      fail(Errc::BadConfig, "entry '" + name + "' has dtype '" + e.dtype + "'");
    uint64_t want = (uint64_t)Tensor<float>::numel_of(e.shape) * (e.dtype == "f16" ? 2 : 4);
    if (len != want)
      fail(Errc::BadConfig, "entry '" + name + "' length " + std::to_string(len) +
                                " does not match shape " + shape_str(e.shape));
    if (off + len > payload_size)
      fail(Errc::Truncated, "payload for '" + name + "' ends at byte " +
                                std::to_string(payload_start + off + len) + ", file has " +
                                std::to_string(n));
    e.bytes.assign(buf.begin() + (ptrdiff_t)(payload_start + off),
                   buf.begin() + (ptrdiff_t)(payload_start + off + len));
    c.entries_[name] = std::move(e);
  }
  return c;
}

const RawEntry& Container::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) fail(Errc::BadConfig, "container has no entry '" + name + "'");
  return it->second;
}

Tensor<float> Container::f32(const std::string& name) const {
  const RawEntry& e = entry(name);
  if (e.dtype != "f32") fail(Errc::BadConfig, "entry '" + name + "' is not f32");
  std::vector<float> data(e.bytes.size() / 4);
  if (!data.empty()) std::memcpy(data.data(), e.bytes.data(), e.bytes.size());
  return Tensor<float>(e.shape, std::move(data));
}

void Container::f16(const std::string& name, std::vector<int>& shape_out,
                    std::vector<uint16_t>& bits_out) const {
  const RawEntry& e = entry(name);
  if (e.dtype != "f16") fail(Errc::BadConfig, "entry '" + name + "' is not f16");
  shape_out = e.shape;
  bits_out.resize(e.bytes.size() / 2);
  if (!bits_out.empty()) std::memcpy(bits_out.data(), e.bytes.data(), e.bytes.size());
}

std::vector<std::string> Container::names_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, e] : entries_)
    if (name.rfind(prefix, 0) == 0) out.push_back(name);
  return out;
}

}  // namespace zfcl
