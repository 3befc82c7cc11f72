#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusiondiff/dit.hpp"
#include "fusiondiff/schedule.hpp"
#include "fusiondiff/synth_world.hpp"

namespace fusiondiff {

enum class LrSchedule { cosine, constant };

struct TrainConfig {
  int stage = 1;
  int batch_size = 128;
  double lr = 1e-2;
  double weight_decay = 3e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-10;
  double grad_clip_norm = 0.01;
  int warmup_steps = 50;
  LrSchedule lr_schedule = LrSchedule::cosine;
  double p_cfg = 0.1;
  int epochs = 3;
  uint64_t seed = 7;
  int threads = 1;

  void validate() const;
  static TrainConfig stage1_defaults();
  static TrainConfig stage2_defaults();
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Learning rate at 1-based optimizer step `step` of `total` steps.
double learning_rate(const TrainConfig& cfg, long step, long total);

// Scales grads (trainable entries only) so their global l2 norm is at most
// max_norm. Returns the norm before clipping.
double clip_grad_norm(ParamStore& grads, const std::vector<bool>& mask, double max_norm);
double grad_norm(const ParamStore& grads, const std::vector<bool>& mask);

// Decoupled-weight-decay Adam. Moment buffers exist only for trainable tensors.
class AdamW {
 public:
  AdamW(const ParamStore& params, std::vector<bool> mask);

  // Applies one update with learning rate lr_t; `grads` must be finite and already clipped.
  void step(ParamStore& params, const ParamStore& grads, const TrainConfig& cfg, double lr_t);

  long steps_taken() const { return t_; }
  const std::vector<bool>& mask() const { return mask_; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  void set_steps_taken(long t) { t_ = t; }

 private:
  std::vector<bool> mask_;
  std::vector<Tensor> m_, v_;  // empty data for frozen tensors
  long t_ = 0;
};

// One training example after noising: what the denoiser sees and must predict.
struct NoisedSample {
  int n = 0;
  Vec eps;
  Vec zn;
  bool drop_condition = false;
};

// Draws timestep, noise and condition-drop from the (seed, stage, step, sample) stream.
NoisedSample draw_noised_sample(const DiffusionSchedule& s, const Vec& z0, double p_cfg, uint64_t seed, int stage,
                                uint64_t step, uint64_t sample);

// ||eps - eps_hat||^2
double noise_prediction_loss(const Vec& eps, const Vec& eps_hat);

struct LossResult {
  double loss = 0.0;  // mean over the batch
  ParamStore grads;   // d loss / d params, full layout (frozen entries zeroed when a mask is given)
};

// Stage-1: text-conditioned noise prediction on (z0, c_T) pairs.
LossResult stage1_loss(const Denoiser& model, std::span<const PairRecord* const> batch, const DiffusionSchedule& s,
                       const TrainConfig& cfg, uint64_t step);
// Stage-2: composed model, conditioned on the query (control branch) and edit text.
// Gradients restricted to adapter tensors.
LossResult stage2_loss(const Denoiser& model, std::span<const TripletRecord* const> batch, const DiffusionSchedule& s,
                       const TrainConfig& cfg, uint64_t step);

struct TrainLogEntry {
  long step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  double wall_time = 0.0;
};

nlohmann::json to_json_line(const TrainLogEntry& e);

using StepCallback = std::function<void(const TrainLogEntry&)>;

// Stage-1 pre-training over the pair corpus; returns the per-step log.
std::vector<TrainLogEntry> train_stage1(Denoiser& model, const std::vector<PairRecord>& corpus,
                                        const DiffusionSchedule& s, const TrainConfig& cfg,
                                        const StepCallback& on_step = {});
// Stage-2: attaches a fresh adapter when none is present, freezes the backbone
// and trains the adapter on triplets.
std::vector<TrainLogEntry> train_stage2(Denoiser& model, const std::vector<TripletRecord>& triplets,
                                        const DiffusionSchedule& s, const TrainConfig& cfg,
                                        const StepCallback& on_step = {}, long max_steps = -1);

// ---------------------------------------------------------------------------
// gradient verification

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<std::string> groups;  // tensor names, in check order
  std::vector<double> rel_errors;   // per group
};

using LossFn = std::function<double(const ParamStore&)>;
using GradFn = std::function<ParamStore(const ParamStore&)>;

// Fourth-order central finite differences along `n_directions` random directions per
// parameter group (tensor), compared with the analytic directional derivative.
// Groups whose mask entry is false are skipped. Relative error is
// |fd - an| / max(|fd|, |an|), and 0 when both vanish.
GradCheckReport grad_check(const ParamStore& params, const LossFn& loss, const GradFn& grad,
                           const std::vector<bool>& mask, int n_directions, double fd_step, uint64_t seed);

// The standard check of the desk model: every zero-initialized tensor is
// perturbed so that all groups carry signal, an adapter is attached, and the
// loss is the noise-prediction loss on a small seeded batch with and without
// text. Returns the report over every parameter group.
GradCheckReport grad_check_denoiser(const DitConfig& cfg, int n_directions, double fd_step, uint64_t seed,
                                    double corrupt_scale = 1.0, const std::string& corrupt_group = {});

}  // namespace fusiondiff
