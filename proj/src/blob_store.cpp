#include "fusiondiff/blob_store.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "fusiondiff/errors.hpp"

namespace fusiondiff {

static_assert(std::endian::native == std::endian::little, "blob format assumes a little-endian host");

std::filesystem::path blob_path_for(const std::filesystem::path& manifest_path) {
  auto p = manifest_path;
  p.replace_extension(".bin");
  return p;
}

void BlobWriter::add(const std::string& name, std::vector<int> shape, std::span<const double> values) {
  size_t n = 1;
  for (int d : shape) n *= static_cast<size_t>(d);
  if (n != values.size()) throw ConfigError("blob tensor '" + name + "': shape does not match value count");
  records_.push_back(BlobRecord{name, std::move(shape), values_.size() * sizeof(float)});
  for (double v : values) values_.push_back(static_cast<float>(v));
}

void BlobWriter::write(const std::filesystem::path& manifest_path, const nlohmann::json& meta) const {
  auto blob_path = blob_path_for(manifest_path);
  if (manifest_path.has_parent_path()) std::filesystem::create_directories(manifest_path.parent_path());

  nlohmann::json j;
  j["format"] = kBlobFormat;
  j["meta"] = meta;
  j["blob"] = blob_path.filename().string();
  j["tensors"] = nlohmann::json::array();
  for (const auto& r : records_) j["tensors"].push_back({{"name", r.name}, {"shape", r.shape}, {"offset", r.offset}});

  std::ofstream bin(blob_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw UsageError("cannot write " + blob_path.string());
  bin.write(reinterpret_cast<const char*>(values_.data()), static_cast<std::streamsize>(values_.size() * sizeof(float)));

  std::ofstream man(manifest_path, std::ios::trunc);
  if (!man) throw UsageError("cannot write " + manifest_path.string());
  man << j.dump(2) << '\n';
}

BlobFile BlobFile::read(const std::filesystem::path& manifest_path) {
  std::ifstream man(manifest_path);
  if (!man) throw UsageError("cannot open " + manifest_path.string());
  nlohmann::json j;
  try {
    man >> j;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  if (j.value("format", "") != kBlobFormat) throw UsageError("not a blob manifest: " + manifest_path.string());

  BlobFile f;
  f.meta_ = j["meta"];
  auto blob_path = manifest_path.parent_path() / j["blob"].get<std::string>();
  std::ifstream bin(blob_path, std::ios::binary);
  if (!bin) throw UsageError("cannot open " + blob_path.string());
  auto bytes = std::filesystem::file_size(blob_path);
  if (bytes % sizeof(float)) throw UsageError("truncated blob " + blob_path.string());
  f.values_.resize(bytes / sizeof(float));
  bin.read(reinterpret_cast<char*>(f.values_.data()), static_cast<std::streamsize>(bytes));

  for (const auto& t : j["tensors"]) {
    BlobRecord r{t["name"], t["shape"].get<std::vector<int>>(), t["offset"]};
    size_t n = 1;
    for (int d : r.shape) n *= static_cast<size_t>(d);
    if (r.offset % sizeof(float) || r.offset / sizeof(float) + n > f.values_.size())
      throw UsageError("tensor '" + r.name + "' lies outside blob " + blob_path.string());
    f.records_.push_back(std::move(r));
  }
  return f;
}

bool BlobFile::contains(const std::string& name) const {
  for (const auto& r : records_)
    if (r.name == name) return true;
  return false;
}

Tensor BlobFile::tensor(const std::string& name, const std::vector<int>& expect) const {
  for (const auto& r : records_) {
    if (r.name != name) continue;
    if (!expect.empty() && expect != r.shape) throw ConfigError("tensor '" + name + "' has unexpected shape");
    size_t n = 1;
    for (int d : r.shape) n *= static_cast<size_t>(d);
    Tensor t{r.shape, TensorData(n)};
    const float* src = values_.data() + r.offset / sizeof(float);
    for (size_t i = 0; i < n; ++i) t.data[i] = src[i];
    return t;
  }
  throw UsageError("blob has no tensor '" + name + "'");
}

uint64_t json_hash(const nlohmann::json& j) {
  std::string s = j.dump();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace fusiondiff
