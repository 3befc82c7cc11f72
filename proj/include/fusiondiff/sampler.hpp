#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "fusiondiff/dit.hpp"
#include "fusiondiff/schedule.hpp"

namespace fusiondiff {

enum class SampleMethod { ancestral, solver2m };

// Solver timestep spacing: uniform in n, or uniform in half-log-SNR lambda.
enum class TimeGrid { uniform, logsnr };

// Which conditions the unconditional CFG branch drops.
enum class DropMode { joint, text_only };

struct SampleConfig {
  SampleMethod method = SampleMethod::solver2m;
  int steps = 14;              // solver model evaluations; ancestral always walks all N
  double guidance = 2.5;       // gamma
  double delta = 1.0;          // control scale
  int hypotheses = 1;          // K
  uint64_t seed = 0;
  bool deterministic = false;  // ancestral: zero-variance member of the ancestral family
  bool first_order = false;    // solver: skip the second-order correction
  TimeGrid grid = TimeGrid::logsnr;
  DropMode drop = DropMode::joint;

  void validate() const;
};

void to_json(nlohmann::json& j, const SampleConfig& c);
void from_json(const nlohmann::json& j, SampleConfig& c);

// Noise prediction for the conditional or unconditional branch.
class NoiseModel {
 public:
  virtual ~NoiseModel() = default;
  virtual int dim() const = 0;
  virtual Vec predict(const Vec& z, int n, bool conditional) const = 0;
};

// Binds a Denoiser to one query's conditions.
class DenoiserNoiseModel : public NoiseModel {
 public:
  DenoiserNoiseModel(const Denoiser& model, const TextCondition* text, const Vec* query, double delta,
                     DropMode drop = DropMode::joint);
  int dim() const override { return model_.config().d_vl; }
  Vec predict(const Vec& z, int n, bool conditional) const override;

 private:
  const Denoiser& model_;
  const TextCondition* text_;
  const Vec* query_;
  double delta_;
  DropMode drop_;
};

// (1 + gamma) * eps_cond - gamma * eps_uncond
Vec cfg_combine(const Vec& eps_cond, const Vec& eps_uncond, double gamma);

struct TraceEntry {
  int step = 0;
  int n = 0;
  double state_norm = 0.0;
  double eps_norm = 0.0;
  Vec eps_cond, eps_uncond, eps_tilde;  // filled when SampleTrace::keep_vectors
};

struct SampleTrace {
  bool keep_vectors = false;
  std::vector<TraceEntry> entries;
  nlohmann::json to_json_lines() const;  // array of {step, n, state_norm, eps_norm}
};

// Integer timestep grid, strictly decreasing from N to 1.
std::vector<int> solver_grid(int N, int steps);
// Same, with `steps` points placed nearest to equal lambda spacing.
std::vector<int> solver_grid(const DiffusionSchedule& s, int steps, TimeGrid kind);

Vec sample_ancestral(const NoiseModel& model, const DiffusionSchedule& s, const SampleConfig& cfg, uint64_t stream,
                     SampleTrace* trace = nullptr);
Vec sample_solver2m(const NoiseModel& model, const DiffusionSchedule& s, const SampleConfig& cfg, uint64_t stream,
                    SampleTrace* trace = nullptr);
// Dispatches on cfg.method.
Vec sample(const NoiseModel& model, const DiffusionSchedule& s, const SampleConfig& cfg, uint64_t stream,
           SampleTrace* trace = nullptr);

struct Hypotheses {
  std::vector<Vec> samples;  // in ascending stream order
  Vec ensemble;              // l2-normalized mean
};

// One sample per stream; the reduction order is canonical (sorted streams).
Hypotheses sample_hypotheses(const NoiseModel& model, const DiffusionSchedule& s, const SampleConfig& cfg,
                             std::vector<uint64_t> streams);
// K streams derived from (cfg.seed, query_id).
std::vector<uint64_t> hypothesis_streams(const SampleConfig& cfg, uint64_t query_id);

}  // namespace fusiondiff
