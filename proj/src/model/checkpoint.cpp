#include "tlm/model/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "tlm/core/error.hpp"

namespace tlm {
namespace {

constexpr char kMagic[8] = {'T', 'L', 'M', 'C', 'K', 'P', 'T', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

void write_u64(std::ostream& os, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf, 8);
}

std::uint64_t read_u64(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  if (!is) throw IoError("truncated checkpoint header");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | buf[i];
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ParamStore& params) {
  params.validate(config);
  nlohmann::json manifest;
  manifest["config"] = config;
  manifest["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : params) {
    manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel();
  }
  const std::string text = manifest.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof kMagic);
  write_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [_, t] : params) {
    os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) throw IoError(path.string() + " is not a checkpoint");
  const auto len = read_u64(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError("truncated checkpoint manifest");

  Checkpoint ck;
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
    ck.config = manifest.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad checkpoint manifest: " + std::string(e.what()));
  }
  const auto payload_start = is.tellg();
  for (const auto& entry : manifest.at("tensors")) {
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    Tensor t(shape, 0.0);
    is.seekg(payload_start + static_cast<std::streamoff>(offset * sizeof(double)));
    is.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!is) throw IoError("truncated checkpoint payload at " + entry.at("name").get<std::string>());
    ck.params.set(entry.at("name").get<std::string>(), std::move(t));
  }
  ck.params.validate(ck.config);
  return ck;
}

}  // namespace tlm
