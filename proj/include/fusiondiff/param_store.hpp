#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fusiondiff/linalg.hpp"

namespace fusiondiff {

// Aligned so vectorized reductions see the same address alignment, and thus
// the same summation order, on every run.
using TensorData = std::vector<double, Eigen::aligned_allocator<double>>;

struct Tensor {
  std::vector<int> shape;
  TensorData data;

  size_t size() const { return data.size(); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  MatMap mat() { return MatMap(data.data(), rows(), cols()); }
  ConstMatMap mat() const { return ConstMatMap(data.data(), rows(), cols()); }
  VecMap vec() { return VecMap(data.data(), static_cast<Eigen::Index>(data.size())); }
  ConstVecMap vec() const { return ConstVecMap(data.data(), static_cast<Eigen::Index>(data.size())); }
};

// Ordered, named collection of tensors. Indices are stable for the lifetime
// of an entry; erasing only ever removes a suffix (see erase_prefix).
class ParamStore {
 public:
  size_t add(std::string name, std::vector<int> shape);
  size_t index(std::string_view name) const;
  bool contains(std::string_view name) const;

  Tensor& operator[](size_t i) { return tensors_[i]; }
  const Tensor& operator[](size_t i) const { return tensors_[i]; }
  Tensor& at(std::string_view name) { return tensors_[index(name)]; }
  const Tensor& at(std::string_view name) const { return tensors_[index(name)]; }
  const std::string& name(size_t i) const { return names_[i]; }

  size_t count() const { return tensors_.size(); }
  size_t scalar_count() const;

  // Same names and shapes, all zeros.
  ParamStore zeros_like() const;
  void set_zero();
  // this += other (layouts must match).
  void accumulate(const ParamStore& other);
  bool same_layout(const ParamStore& other) const;

  // Removes every tensor whose name starts with prefix. Such tensors must form
  // a contiguous tail of the store.
  void erase_prefix(std::string_view prefix);

  // Rounds every value to the nearest float32, matching what a checkpoint holds.
  void round_to_float();

  bool all_finite() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, size_t> lookup_;
};

// FNV-1a over names, shapes and float32-rounded values of the tensors whose
// name passes the filter (empty prefix = all). Used to pin checkpoints.
uint64_t hash_tensors(const ParamStore& store, std::string_view prefix = {}, bool exclude_prefix = false);

}  // namespace fusiondiff
