#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusiondiff/param_store.hpp"

namespace fusiondiff {

// On-disk format shared by corpora, galleries, samples and checkpoints:
//   <stem>.json  {"format": ..., "meta": {...}, "blob": "<stem>.bin",
//                 "tensors": [{"name", "shape", "offset"}...]}
//   <stem>.bin   raw little-endian float32 values, tensors back to back.
inline constexpr const char* kBlobFormat = "fusiondiff-blob-v1";
inline constexpr const char* kToolVersion = "fusiondiff 0.3.0";

struct BlobRecord {
  std::string name;
  std::vector<int> shape;
  uint64_t offset = 0;  // bytes into the blob
};

class BlobWriter {
 public:
  void add(const std::string& name, std::vector<int> shape, std::span<const double> values);
  void add(const std::string& name, const Tensor& t) { add(name, t.shape, t.data); }
  // Writes manifest to `manifest_path` and the blob next to it (".bin").
  void write(const std::filesystem::path& manifest_path, const nlohmann::json& meta) const;

 private:
  std::vector<BlobRecord> records_;
  std::vector<float> values_;
};

class BlobFile {
 public:
  static BlobFile read(const std::filesystem::path& manifest_path);

  const nlohmann::json& meta() const { return meta_; }
  const std::vector<BlobRecord>& records() const { return records_; }
  bool contains(const std::string& name) const;
  // Values widened to double; shape checked against `expect` when non-empty.
  Tensor tensor(const std::string& name, const std::vector<int>& expect = {}) const;

 private:
  nlohmann::json meta_;
  std::vector<BlobRecord> records_;
  std::vector<float> values_;
};

std::filesystem::path blob_path_for(const std::filesystem::path& manifest_path);

// Stable 64-bit hash of a JSON value's canonical dump; stamps artifacts.
uint64_t json_hash(const nlohmann::json& j);
std::string hex64(uint64_t v);

}  // namespace fusiondiff
