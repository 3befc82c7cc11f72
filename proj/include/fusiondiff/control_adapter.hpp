#pragma once

#include <cstdint>
#include <vector>

#include "fusiondiff/dit.hpp"

namespace fusiondiff {

// Adapter tensors live in the same store as the backbone under this prefix:
//   ctrl.z1.{w,b}          zero linear d_vl -> D applied to the query
//   ctrl.<l>.*             trainable copy of encoder block l
//   ctrl.z2.<l>.{w,b}      zero linear D -> D on control block l's output
inline constexpr const char* kAdapterPrefix = "ctrl.";

// Copies the encoder blocks and appends zero-initialized Z1/Z2. The seed is
// unused by the zero/copy init but recorded for symmetry with the backbone.
void attach_adapter(Denoiser& model, uint64_t seed = 0);
void detach_adapter(Denoiser& model);

// true = trainable. Backbone entries false, adapter entries true.
std::vector<bool> freeze_backbone_mask(const Denoiser& model);
// All entries trainable.
std::vector<bool> full_mask(const Denoiser& model);

// encoder copy + Z1 + L * Z2
size_t adapter_param_count(const DitConfig& c);

// Per-depth decoder injections y_{c,l}, as used by denoise().
struct ControlSignal {
  std::vector<Mat> y;  // L entries, tokens x hidden
  double delta = 1.0;
};

// Runs the backbone encoder and control branch for one input and returns the
// signal the decoder would consume (exposed for inspection and tests).
ControlSignal control_signal(const Denoiser& model, const Vec& z, int n, const Conditioning& cond);

}  // namespace fusiondiff
