#include "fusiondiff/param_store.hpp"

#include <cmath>
#include <cstring>

#include "fusiondiff/errors.hpp"

namespace fusiondiff {

size_t ParamStore::add(std::string name, std::vector<int> shape) {
  if (lookup_.count(name)) throw ConfigError("duplicate tensor name: " + name);
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ConfigError("non-positive dimension in tensor " + name);
    n *= static_cast<size_t>(d);
  }
  size_t idx = tensors_.size();
  lookup_.emplace(name, idx);
  names_.push_back(std::move(name));
  tensors_.push_back(Tensor{std::move(shape), TensorData(n, 0.0)});
  return idx;
}

size_t ParamStore::index(std::string_view name) const {
  auto it = lookup_.find(std::string(name));
  if (it == lookup_.end()) throw ConfigError("unknown tensor: " + std::string(name));
  return it->second;
}

bool ParamStore::contains(std::string_view name) const { return lookup_.count(std::string(name)) > 0; }

size_t ParamStore::scalar_count() const {
  size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

ParamStore ParamStore::zeros_like() const {
  ParamStore out;
  out.names_ = names_;
  out.lookup_ = lookup_;
  out.tensors_.reserve(tensors_.size());
  for (const auto& t : tensors_) out.tensors_.push_back(Tensor{t.shape, TensorData(t.size(), 0.0)});
  return out;
}

void ParamStore::set_zero() {
  for (auto& t : tensors_) std::fill(t.data.begin(), t.data.end(), 0.0);
}

bool ParamStore::same_layout(const ParamStore& other) const {
  if (other.count() != count()) return false;
  for (size_t i = 0; i < count(); ++i)
    if (names_[i] != other.names_[i] || tensors_[i].shape != other.tensors_[i].shape) return false;
  return true;
}

void ParamStore::accumulate(const ParamStore& other) {
  if (!same_layout(other)) throw ConfigError("accumulate: layout mismatch");
  for (size_t i = 0; i < count(); ++i) tensors_[i].vec() += other.tensors_[i].vec();
}

void ParamStore::erase_prefix(std::string_view prefix) {
  size_t first = names_.size();
  for (size_t i = 0; i < names_.size(); ++i) {
    if (names_[i].rfind(prefix, 0) == 0) {
      first = i;
      break;
    }
  }
  for (size_t i = first; i < names_.size(); ++i)
    if (names_[i].rfind(prefix, 0) != 0)
      throw ConfigError("erase_prefix: tensors with prefix are not a contiguous tail");
  for (size_t i = first; i < names_.size(); ++i) lookup_.erase(names_[i]);
  names_.resize(first);
  tensors_.resize(first);
}

void ParamStore::round_to_float() {
  for (auto& t : tensors_)
    for (double& v : t.data) v = static_cast<double>(static_cast<float>(v));
}

bool ParamStore::all_finite() const {
  for (const auto& t : tensors_)
    if (!t.vec().allFinite()) return false;
  return true;
}

namespace {

constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr uint64_t kFnvPrime = 0x100000001b3ULL;

void fnv(uint64_t& h, const void* data, size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}

}  // namespace

uint64_t hash_tensors(const ParamStore& store, std::string_view prefix, bool exclude_prefix) {
  uint64_t h = kFnvOffset;
  for (size_t i = 0; i < store.count(); ++i) {
    const std::string& name = store.name(i);
    bool match = prefix.empty() || name.rfind(prefix, 0) == 0;
    if (exclude_prefix ? match && !prefix.empty() : !match) continue;
    fnv(h, name.data(), name.size());
    for (int d : store[i].shape) fnv(h, &d, sizeof d);
    for (double v : store[i].data) {
      float f = static_cast<float>(v);
      fnv(h, &f, sizeof f);
    }
  }
  return h;
}

}  // namespace fusiondiff
