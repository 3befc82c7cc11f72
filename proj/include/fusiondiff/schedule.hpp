#pragma once

#include <vector>

#include <json.hpp>

#include "fusiondiff/linalg.hpp"

namespace fusiondiff {

enum class ScheduleKind { linear, cosine };
enum class PosteriorVariance { beta_tilde, beta };

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::linear;
  int steps = 100;  // N
  double beta_min = 1e-4;
  double beta_max = 0.02;
  PosteriorVariance variance = PosteriorVariance::beta_tilde;
};

void to_json(nlohmann::json& j, const ScheduleSpec& s);
void from_json(const nlohmann::json& j, ScheduleSpec& s);

// Tables are indexed by timestep n in [0, N]; entry 0 is the clean state
// (alpha_bar = 1, beta = 0, lambda = +inf) and exists only so that n = 1
// posterior formulas need no special case.
class DiffusionSchedule {
 public:
  explicit DiffusionSchedule(const ScheduleSpec& spec);

  const ScheduleSpec& spec() const { return spec_; }
  int steps() const { return spec_.steps; }

  double beta(int n) const { return betas_.at(n); }
  double alpha(int n) const { return 1.0 - betas_.at(n); }
  double alpha_bar(int n) const { return alpha_bars_.at(n); }
  // Ancestral noise std; sigma(1) == 0 so the last step is deterministic.
  double sigma(int n) const { return sigmas_.at(n); }
  double lambda(int n) const { return lambdas_.at(n); }
  // Data and noise coefficients of the closed-form marginal.
  double signal_scale(int n) const;
  double noise_scale(int n) const;

 private:
  ScheduleSpec spec_;
  std::vector<double> betas_, alpha_bars_, sigmas_, lambdas_;
};

DiffusionSchedule make_schedule(ScheduleKind kind, int steps, double beta_min, double beta_max,
                                PosteriorVariance variance = PosteriorVariance::beta_tilde);

// z_n = sqrt(abar_n) z0 + sqrt(1 - abar_n) eps
Vec forward_noise(const DiffusionSchedule& s, const Vec& z0, int n, const Vec& eps);
// Algebraic inverse of forward_noise for a noise estimate.
Vec predict_x0(const DiffusionSchedule& s, const Vec& zn, int n, const Vec& eps_hat);

}  // namespace fusiondiff
