#include <doctest.h>

#include <cmath>

#include "fusiondiff/errors.hpp"
#include "fusiondiff/rng.hpp"
#include "fusiondiff/schedule.hpp"

using namespace fusiondiff;

namespace {

Vec randn(int n, Rng& rng) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

}  // namespace

TEST_CASE("single step linear schedule") {
  auto s = make_schedule(ScheduleKind::linear, 1, 0.1, 0.1);
  CHECK(s.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(s.alpha_bar(0) == 1.0);
  CHECK(s.sigma(1) == 0.0);
}

TEST_CASE("long linear schedule matches an extended-precision product") {
  auto s = make_schedule(ScheduleKind::linear, 1000, 1e-4, 0.02);
  long double p = 1.0L;
  for (int n = 1; n <= 1000; ++n) {
    long double b = 1e-4L + (0.02L - 1e-4L) * (n - 1) / 999.0L;
    p *= 1.0L - b;
  }
  // 50-digit reference: 4.0358297653756833148e-05
  const double golden = 4.0358297653756833148e-05;
  CHECK(std::abs(static_cast<double>(p) - golden) / golden < 1e-12);
  CHECK(std::abs(s.alpha_bar(1000) - golden) / golden < 1e-12);
  CHECK(s.beta(1) == doctest::Approx(1e-4));
  CHECK(s.beta(1000) == doctest::Approx(0.02));
}

TEST_CASE("tables are internally consistent") {
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    auto s = make_schedule(kind, 100, 1e-4, 0.02);
    double prod = 1.0;
    for (int n = 1; n <= 100; ++n) {
      prod *= 1.0 - s.beta(n);
      CHECK(std::abs(s.alpha_bar(n) - prod) / prod < 1e-12);
      CHECK(s.alpha_bar(n) < s.alpha_bar(n - 1));
      CHECK(s.lambda(n) < s.lambda(n - 1));
      CHECK(s.beta(n) > 0.0);
      CHECK(s.beta(n) < 1.0);
      CHECK(s.lambda(n) == doctest::Approx(0.5 * std::log(s.alpha_bar(n) / (1.0 - s.alpha_bar(n)))));
      if (n > 1) {
        double bt = (1.0 - s.alpha_bar(n - 1)) / (1.0 - s.alpha_bar(n)) * s.beta(n);
        CHECK(s.sigma(n) == doctest::Approx(std::sqrt(bt)));
      }
    }
    CHECK(s.sigma(1) == 0.0);
    CHECK(std::isinf(s.lambda(0)));
  }
  ScheduleSpec spec;
  spec.variance = PosteriorVariance::beta;
  DiffusionSchedule s(spec);
  CHECK(s.sigma(50) == doctest::Approx(std::sqrt(s.beta(50))));
  CHECK(s.sigma(1) == 0.0);
}

TEST_CASE("invalid schedules") {
  CHECK_THROWS_AS(make_schedule(ScheduleKind::linear, 0, 1e-4, 0.02), ConfigError);
  CHECK_THROWS_AS(make_schedule(ScheduleKind::linear, 10, 0.0, 0.02), ConfigError);
  CHECK_THROWS_AS(make_schedule(ScheduleKind::linear, 10, 0.03, 0.02), ConfigError);
  CHECK_THROWS_AS(make_schedule(ScheduleKind::linear, 10, 1e-4, 1.0), ConfigError);
}

TEST_CASE("forward noise edge cases and range") {
  auto s = make_schedule(ScheduleKind::linear, 100, 1e-4, 0.02);
  Rng rng(1);
  Vec z0 = randn(16, rng), eps = randn(16, rng);
  const Vec signal_only = std::sqrt(s.alpha_bar(40)) * z0;
  const Vec noise_only = std::sqrt(1.0 - s.alpha_bar(40)) * eps;
  CHECK(forward_noise(s, z0, 40, Vec::Zero(16)) == signal_only);
  CHECK(forward_noise(s, Vec::Zero(16), 40, eps) == noise_only);
  CHECK_THROWS_AS(forward_noise(s, z0, 0, eps), InputError);
  CHECK_THROWS_AS(forward_noise(s, z0, 101, eps), InputError);
  CHECK_THROWS_AS(forward_noise(s, z0, 5, Vec::Zero(3)), InputError);
}

TEST_CASE("closed form equals the stepwise chain") {
  auto s = make_schedule(ScheduleKind::linear, 10, 1e-4, 0.02);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(1000 + trial);
    Vec z0 = randn(16, rng);
    for (int n = 1; n <= 10; ++n) {
      // Chain: z_s = sqrt(1 - beta_s) z_{s-1} + sqrt(beta_s) e_s.
      Vec z = z0;
      Vec combined = Vec::Zero(16);  // sum of sqrt(beta_s) prod_{r>s} sqrt(alpha_r) e_s
      Rng noise(2000 + trial, {static_cast<uint64_t>(n)});
      for (int st = 1; st <= n; ++st) {
        Vec e = randn(16, noise);
        z = std::sqrt(1.0 - s.beta(st)) * z + std::sqrt(s.beta(st)) * e;
        combined = std::sqrt(1.0 - s.beta(st)) * combined + std::sqrt(s.beta(st)) * e;
      }
      Vec eps = combined / std::sqrt(1.0 - s.alpha_bar(n));
      worst = std::max(worst, (forward_noise(s, z0, n, eps) - z).lpNorm<Eigen::Infinity>());
    }
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("predict_x0 inverts forward noise") {
  auto s = make_schedule(ScheduleKind::linear, 100, 1e-4, 0.02);
  Rng rng(3);
  for (int n : {1, 2, 37, 100}) {
    Vec z0 = randn(16, rng), eps = randn(16, rng);
    Vec zn = forward_noise(s, z0, n, eps);
    CHECK((predict_x0(s, zn, n, eps) - z0).lpNorm<Eigen::Infinity>() < 1e-9);
    CHECK((predict_x0(s, std::sqrt(s.alpha_bar(n)) * z0, n, Vec::Zero(16)) - z0).lpNorm<Eigen::Infinity>() < 1e-12);
    Vec zr = randn(16, rng), eh = randn(16, rng);
    CHECK((forward_noise(s, predict_x0(s, zr, n, eh), n, eh) - zr).lpNorm<Eigen::Infinity>() < 1e-9);
  }
  CHECK_THROWS_AS(predict_x0(s, Vec::Zero(4), 0, Vec::Zero(4)), InputError);
}

TEST_CASE("noised variance follows one minus alpha bar") {
  auto s = make_schedule(ScheduleKind::linear, 100, 1e-4, 0.02);
  Rng rng(8);
  for (int n : {5, 50, 100}) {
    double sum = 0.0, sq = 0.0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
      double x = forward_noise(s, Vec::Zero(1), n, randn(1, rng))[0];
      sum += x;
      sq += x * x;
    }
    double var = sq / draws - (sum / draws) * (sum / draws);
    CHECK(std::abs(var / (1.0 - s.alpha_bar(n)) - 1.0) < 0.05);
  }
}

TEST_CASE("schedule spec json round trip") {
  ScheduleSpec a;
  a.kind = ScheduleKind::cosine;
  a.steps = 37;
  a.variance = PosteriorVariance::beta;
  nlohmann::json j = a;
  ScheduleSpec b = j.get<ScheduleSpec>();
  CHECK(b.kind == a.kind);
  CHECK(b.steps == 37);
  CHECK(b.variance == a.variance);
  CHECK_THROWS_AS(nlohmann::json({{"kind", "quadratic"}}).get<ScheduleSpec>(), ConfigError);
}
