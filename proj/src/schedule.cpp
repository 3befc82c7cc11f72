#include "fusiondiff/schedule.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "fusiondiff/errors.hpp"

namespace fusiondiff {

void to_json(nlohmann::json& j, const ScheduleSpec& s) {
  j = {{"kind", s.kind == ScheduleKind::linear ? "linear" : "cosine"},
       {"steps", s.steps},
       {"beta_min", s.beta_min},
       {"beta_max", s.beta_max},
       {"variance", s.variance == PosteriorVariance::beta_tilde ? "beta_tilde" : "beta"}};
}

void from_json(const nlohmann::json& j, ScheduleSpec& s) {
  ScheduleSpec d;
  std::string kind = j.value("kind", "linear");
  if (kind != "linear" && kind != "cosine") throw ConfigError("schedule kind must be linear or cosine");
  s.kind = kind == "linear" ? ScheduleKind::linear : ScheduleKind::cosine;
  s.steps = j.value("steps", d.steps);
  s.beta_min = j.value("beta_min", d.beta_min);
  s.beta_max = j.value("beta_max", d.beta_max);
  std::string var = j.value("variance", "beta_tilde");
  if (var != "beta_tilde" && var != "beta") throw ConfigError("schedule variance must be beta_tilde or beta");
  s.variance = var == "beta_tilde" ? PosteriorVariance::beta_tilde : PosteriorVariance::beta;
}

DiffusionSchedule::DiffusionSchedule(const ScheduleSpec& spec) : spec_(spec) {
  const int N = spec.steps;
  if (N < 1) throw ConfigError("schedule needs at least one step");
  if (!(spec.beta_min > 0.0 && spec.beta_min <= spec.beta_max && spec.beta_max < 1.0))
    throw ConfigError("schedule requires 0 < beta_min <= beta_max < 1");

  betas_.assign(N + 1, 0.0);
  if (spec.kind == ScheduleKind::linear) {
    for (int n = 1; n <= N; ++n)
      betas_[n] = N == 1 ? spec.beta_min : spec.beta_min + (spec.beta_max - spec.beta_min) * (n - 1) / (N - 1);
  } else {
    // Squared-cosine alpha_bar curve with offset 0.008; betas clipped into [beta_min, beta_max].
    constexpr double s = 0.008;
    auto f = [&](double t) {
      double c = std::cos((t / N + s) / (1.0 + s) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int n = 1; n <= N; ++n) {
      double b = 1.0 - f(n) / f(n - 1);
      betas_[n] = std::min(std::max(b, spec.beta_min), spec.beta_max);
    }
  }

  alpha_bars_.assign(N + 1, 1.0);
  sigmas_.assign(N + 1, 0.0);
  lambdas_.assign(N + 1, std::numeric_limits<double>::infinity());
  for (int n = 1; n <= N; ++n) {
    alpha_bars_[n] = alpha_bars_[n - 1] * (1.0 - betas_[n]);
    if (!(alpha_bars_[n] < alpha_bars_[n - 1]) || !(alpha_bars_[n] > 0.0))
      throw ConfigError("alpha_bar must be strictly decreasing and positive");
    lambdas_[n] = std::log(std::sqrt(alpha_bars_[n]) / std::sqrt(1.0 - alpha_bars_[n]));
    if (!(lambdas_[n] < lambdas_[n - 1])) throw ConfigError("half-log-SNR must be strictly decreasing");
    double var = spec.variance == PosteriorVariance::beta_tilde
                     ? (1.0 - alpha_bars_[n - 1]) / (1.0 - alpha_bars_[n]) * betas_[n]
                     : betas_[n];
    sigmas_[n] = n == 1 ? 0.0 : std::sqrt(var);
  }
}

double DiffusionSchedule::signal_scale(int n) const { return std::sqrt(alpha_bar(n)); }
double DiffusionSchedule::noise_scale(int n) const { return std::sqrt(1.0 - alpha_bar(n)); }

DiffusionSchedule make_schedule(ScheduleKind kind, int steps, double beta_min, double beta_max, PosteriorVariance variance) {
  return DiffusionSchedule(ScheduleSpec{kind, steps, beta_min, beta_max, variance});
}

namespace {

void check_timestep(const DiffusionSchedule& s, int n) {
  if (n < 1 || n > s.steps())
    throw InputError("timestep " + std::to_string(n) + " outside [1, " + std::to_string(s.steps()) + "]");
}

}  // namespace

Vec forward_noise(const DiffusionSchedule& s, const Vec& z0, int n, const Vec& eps) {
  check_timestep(s, n);
  if (z0.size() != eps.size()) throw InputError("forward_noise: noise length differs from data length");
  return s.signal_scale(n) * z0 + s.noise_scale(n) * eps;
}

Vec predict_x0(const DiffusionSchedule& s, const Vec& zn, int n, const Vec& eps_hat) {
  check_timestep(s, n);
  if (zn.size() != eps_hat.size()) throw InputError("predict_x0: noise length differs from state length");
  return (zn - s.noise_scale(n) * eps_hat) / s.signal_scale(n);
}

}  // namespace fusiondiff
