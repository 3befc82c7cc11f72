#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include <json.hpp>

#include "fusiondiff/linalg.hpp"
#include "fusiondiff/param_store.hpp"
#include "fusiondiff/synth_world.hpp"

namespace fusiondiff {

struct DitConfig {
  int d_vl = 64;
  int channels = 4;  // C
  int height = 8;    // H
  int width = 8;     // W
  int patch = 2;     // p
  int hidden = 64;   // D
  int heads = 4;
  int depth = 2;     // L encoder blocks, L decoder blocks
  int text_dim = 32;
  int mlp_ratio = 4;

  int tokens() const { return (height / patch) * (width / patch); }
  int patch_dim() const { return patch * patch * channels; }
  int spatial() const { return channels * height * width; }
  int head_dim() const { return hidden / heads; }
  void validate() const;

  // The configuration used for the published model; expressible, never trained here.
  static DitConfig full_scale();
};

void to_json(nlohmann::json& j, const DitConfig& c);
void from_json(const nlohmann::json& j, DitConfig& c);

// Closed-form tensor sizes, independent of any instantiated model.
size_t block_param_count(const DitConfig& c);
size_t backbone_param_count(const DitConfig& c);

namespace detail {
struct ForwardState;
}

// Everything backward() needs from one denoise() call.
struct DenoiseCache {
  std::shared_ptr<detail::ForwardState> state;
};

// Conditioning for one evaluation. `text` null = text ABSENT (cross-attention
// skipped). `query` null = control ABSENT; when an adapter is attached the
// control branch then sees the all-zero query it was trained to treat as "no
// query". delta scales every skip injected into the decoder.
struct Conditioning {
  const TextCondition* text = nullptr;
  const Vec* query = nullptr;
  double delta = 1.0;
};

// The conditional encoder-decoder diffusion transformer over joint-space vectors.
class Denoiser {
 public:
  Denoiser(const DitConfig& config, uint64_t init_seed);
  Denoiser(const DitConfig& config, ParamStore params);

  const DitConfig& config() const { return config_; }
  const ParamStore& params() const { return params_; }
  // Mutable access invalidates outstanding caches.
  ParamStore& mutable_params() {
    ++generation_;
    return params_;
  }

  bool has_adapter() const { return params_.contains("ctrl.z1.w"); }

  Vec denoise(const Vec& z, int n, const Conditioning& cond, DenoiseCache* cache = nullptr) const;
  // Accumulates d(loss)/d(params) into grads given d(loss)/d(eps_hat).
  void backward(const DenoiseCache& cache, const Vec& grad_eps, ParamStore& grads) const;

  // Sinusoidal timestep features (width = hidden), before the MLP.
  static Vec time_features(int n, int dim);
  Vec time_embed(int n) const;

  // Fixed 2-D sinusoidal positional table (tokens x hidden); not a parameter.
  const Mat& positional_table() const { return pos_; }

  // Internal: index of the permutation used by patchify/unpatchify.
  const std::vector<int>& patch_permutation() const { return perm_; }

 private:
  // Unchecked construction from a known-good layout.
  Denoiser(const DitConfig& config, ParamStore params, int unchecked);
  void build_tables();

  DitConfig config_;
  ParamStore params_;
  Mat pos_;
  std::vector<int> perm_;
  uint64_t generation_ = 0;
};

}  // namespace fusiondiff
