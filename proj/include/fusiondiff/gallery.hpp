#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "fusiondiff/linalg.hpp"

namespace fusiondiff {

// Gallery embeddings with stable ids, one unit-norm row per entry.
struct GalleryIndex {
  std::vector<uint64_t> ids;
  Mat embs;

  size_t size() const { return ids.size(); }
  // Row count matches ids, ids unique, rows unit-norm within tol.
  void validate(double tol = 1e-6) const;
  // Row index of an id, or -1.
  long find(uint64_t id) const;

  void save(const std::filesystem::path& manifest, const nlohmann::json& meta) const;
  static GalleryIndex load(const std::filesystem::path& manifest);
};

}  // namespace fusiondiff
