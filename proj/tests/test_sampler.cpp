#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "fusiondiff/control_adapter.hpp"
#include "fusiondiff/errors.hpp"
#include "fusiondiff/rng.hpp"
#include "fusiondiff/sampler.hpp"
#include "toy_models.hpp"

using namespace fusiondiff;
using fusiondiff::testing::MixtureModel;
using fusiondiff::testing::reference_mixture;
using fusiondiff::testing::vec2;

namespace {

// Same prediction for both branches.
class CondOnly : public NoiseModel {
 public:
  explicit CondOnly(const NoiseModel& inner) : inner_(inner) {}
  int dim() const override { return inner_.dim(); }
  Vec predict(const Vec& z, int n, bool) const override { return inner_.predict(z, n, true); }

 private:
  const NoiseModel& inner_;
};

class ZeroModel : public NoiseModel {
 public:
  explicit ZeroModel(int d) : d_(d) {}
  int dim() const override { return d_; }
  Vec predict(const Vec&, int, bool) const override { return Vec::Zero(d_); }

 private:
  int d_;
};

// Data distribution concentrated on one point.
class PointMass : public NoiseModel {
 public:
  PointMass(const DiffusionSchedule& s, Vec mu) : s_(s), mu_(std::move(mu)) {}
  int dim() const override { return static_cast<int>(mu_.size()); }
  Vec predict(const Vec& z, int n, bool) const override {
    return (z - s_.signal_scale(n) * mu_) / s_.noise_scale(n);
  }

 private:
  const DiffusionSchedule& s_;
  Vec mu_;
};

Denoiser trained_like(uint64_t seed) {
  Denoiser m(DitConfig{}, seed);
  ParamStore& p = m.mutable_params();
  for (size_t i = 0; i < p.count(); ++i) {
    Rng rng(seed, {55, i});
    for (double& v : p[i].data) v += 0.05 * rng.normal();
  }
  return m;
}

}  // namespace

TEST_CASE("cfg_combine arithmetic") {
  Vec c = vec2(1.0, 0.0), u = vec2(0.0, 1.0);
  CHECK(cfg_combine(c, u, 0.0) == c);
  CHECK(cfg_combine(c, c, 2.5) == c);
  CHECK(cfg_combine(c, c, 7.0) == c);
  CHECK(cfg_combine(c, u, 2.5) == vec2(3.5, -2.5));
  CHECK_THROWS_AS(cfg_combine(c, Vec::Zero(3), 1.0), InputError);
}

TEST_CASE("sample config") {
  SampleConfig c;
  CHECK(c.steps == 14);
  CHECK(c.guidance == 2.5);
  CHECK(c.delta == 1.0);
  SampleConfig bad = c;
  bad.steps = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.hypotheses = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  c.method = SampleMethod::ancestral;
  c.drop = DropMode::text_only;
  nlohmann::json j = c;
  SampleConfig d = j.get<SampleConfig>();
  CHECK(d.method == SampleMethod::ancestral);
  CHECK(d.drop == DropMode::text_only);
}

TEST_CASE("solver grid") {
  for (int steps : {1, 2, 6, 10, 14, 18, 22, 99, 100}) {
    auto g = solver_grid(100, steps);
    CHECK(g.front() == 100);
    if (steps > 1) CHECK(g.back() == 1);
    CHECK(static_cast<int>(g.size()) == steps);
    for (size_t i = 1; i < g.size(); ++i) CHECK(g[i] < g[i - 1]);
  }
  CHECK(solver_grid(100, 14)[1] == 92);
  CHECK_THROWS_AS(solver_grid(100, 101), ConfigError);
  CHECK_THROWS_AS(solver_grid(100, 0), ConfigError);
}

TEST_CASE("log-SNR grid") {
  DiffusionSchedule s{ScheduleSpec{}};
  for (int steps : {1, 2, 6, 14, 50, 99, 100}) {
    auto g = solver_grid(s, steps, TimeGrid::logsnr);
    CHECK(g.front() == 100);
    if (steps > 1) CHECK(g.back() == 1);
    CHECK(static_cast<int>(g.size()) == steps);
    for (size_t i = 1; i < g.size(); ++i) CHECK(g[i] < g[i - 1]);
  }
  // Equal lambda spacing crowds the points near n = 1.
  auto g = solver_grid(s, 14, TimeGrid::logsnr);
  CHECK(g[12] - g[13] < g[0] - g[1]);
  CHECK(solver_grid(s, 14, TimeGrid::uniform) == solver_grid(100, 14));
  CHECK_THROWS_AS(solver_grid(s, 101, TimeGrid::logsnr), ConfigError);
}

TEST_CASE("zero guidance equals conditional-only sampling") {
  World w{WorldConfig{}};
  Denoiser m = trained_like(1);
  attach_adapter(m);
  for (size_t i = 0; i < m.params().count(); ++i)
    if (m.params().name(i).rfind(kAdapterPrefix, 0) == 0) {
      Rng rng(2, {i});
      for (double& v : m.mutable_params()[i].data) v += 0.05 * rng.normal();
    }
  DiffusionSchedule s{ScheduleSpec{}};
  Rng rng(3);
  TextCondition t = w.encode_text(w.caption(w.random_scene(rng)));
  Vec q = w.oracle_query(w.random_scene(rng), w.make_edit(1, 2)).values;
  for (auto method : {SampleMethod::ancestral, SampleMethod::solver2m}) {
    SampleConfig cfg;
    cfg.method = method;
    cfg.guidance = 0.0;
    cfg.seed = 4;
    DenoiserNoiseModel full(m, &t, &q, 1.0);
    CondOnly cond(full);
    SampleTrace ta, tb;
    Vec a = sample(full, s, cfg, 17, &ta);
    Vec b = sample(cond, s, cfg, 17, &tb);
    CHECK(a == b);
    REQUIRE(ta.entries.size() == tb.entries.size());
    for (size_t i = 0; i < ta.entries.size(); ++i) {
      CHECK(ta.entries[i].state_norm == tb.entries[i].state_norm);
      CHECK(ta.entries[i].eps_norm == tb.entries[i].eps_norm);
    }
  }
}

TEST_CASE("guidance inside the sampler is cfg_combine per evaluation") {
  DiffusionSchedule s = make_schedule(ScheduleKind::linear, 100, 1e-4, 0.02);
  MixtureModel toy(s, reference_mixture(), {{1.0, vec2(0.0, 1.0), 0.5}});
  for (auto method : {SampleMethod::ancestral, SampleMethod::solver2m}) {
    SampleConfig cfg;
    cfg.method = method;
    cfg.guidance = 1.7;
    SampleTrace trace;
    trace.keep_vectors = true;
    sample(toy, s, cfg, 5, &trace);
    CHECK(trace.entries.size() == (method == SampleMethod::ancestral ? 100u : 14u));
    for (const auto& e : trace.entries) {
      CHECK(e.eps_tilde == cfg_combine(e.eps_cond, e.eps_uncond, 1.7));
      CHECK(e.eps_norm == e.eps_tilde.norm());
    }
    CHECK(trace.to_json_lines().size() == trace.entries.size());
  }
}

TEST_CASE("fixed seed gives identical samples") {
  World w{WorldConfig{}};
  Denoiser m = trained_like(6);
  DiffusionSchedule s{ScheduleSpec{}};
  Rng rng(7);
  TextCondition t = w.encode_text(w.caption(w.random_scene(rng)));
  DenoiserNoiseModel nm(m, &t, nullptr, 1.0);
  for (auto method : {SampleMethod::ancestral, SampleMethod::solver2m}) {
    SampleConfig cfg;
    cfg.method = method;
    CHECK(sample(nm, s, cfg, 9) == sample(nm, s, cfg, 9));
    CHECK(sample(nm, s, cfg, 9) != sample(nm, s, cfg, 10));
  }
}

TEST_CASE("ancestral sampling recovers mixture weights") {
  // Long schedule so that the terminal marginal is standard normal.
  DiffusionSchedule s = make_schedule(ScheduleKind::linear, 1000, 1e-4, 0.02);
  MixtureModel toy(s, reference_mixture(), reference_mixture());
  SampleConfig cfg;
  cfg.method = SampleMethod::ancestral;
  cfg.guidance = 0.0;
  const int draws = 10000;
  int left = 0;
  double spread = 0.0;
  for (int i = 0; i < draws; ++i) {
    Vec z = sample_ancestral(toy, s, cfg, stream_key(1, {static_cast<uint64_t>(i)}));
    left += z[0] < 0.0;
    spread += z[1] * z[1];
  }
  const double frac = static_cast<double>(left) / draws;
  MESSAGE("left component fraction " << frac);
  CHECK(std::abs(frac - 0.3) < 0.03);
  CHECK(std::abs(std::sqrt(spread / draws) - 0.3) < 0.03);
}

TEST_CASE("first-order solver over the full grid matches deterministic ancestral") {
  DiffusionSchedule s = make_schedule(ScheduleKind::linear, 100, 1e-4, 0.02);
  MixtureModel toy(s, reference_mixture(), {{1.0, vec2(0.0, 0.0), 1.0}});
  SampleConfig anc;
  anc.method = SampleMethod::ancestral;
  anc.deterministic = true;
  SampleConfig sol;
  sol.steps = 100;
  sol.first_order = true;
  double worst = 0.0;
  for (uint64_t k = 0; k < 20; ++k) {
    Vec a = sample_ancestral(toy, s, anc, k);
    Vec b = sample_solver2m(toy, s, sol, k);
    worst = std::max(worst, (a - b).lpNorm<Eigen::Infinity>());
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("solver lands on a point mass") {
  DiffusionSchedule s{ScheduleSpec{}};
  Vec mu = Vec::LinSpaced(8, -1.0, 1.0);
  PointMass pm(s, mu);
  SampleConfig cfg;
  for (int steps : {2, 6, 14, 22}) {
    cfg.steps = steps;
    CHECK((sample_solver2m(pm, s, cfg, 3) - mu).lpNorm<Eigen::Infinity>() < 1e-9);
  }
}

TEST_CASE("zero denoiser gives the linear-Gaussian variance") {
  DiffusionSchedule s{ScheduleSpec{}};
  double v = 1.0;
  for (int n = s.steps(); n >= 1; --n) v = v / s.alpha(n) + s.sigma(n) * s.sigma(n);
  ZeroModel zero(8);
  SampleConfig cfg;
  cfg.method = SampleMethod::ancestral;
  double sq = 0.0, sum = 0.0;
  const int draws = 4000;
  for (int i = 0; i < draws; ++i) {
    Vec z = sample_ancestral(zero, s, cfg, stream_key(2, {static_cast<uint64_t>(i)}));
    sq += z.squaredNorm();
    sum += z.sum();
  }
  const double count = draws * 8.0;
  const double var = sq / count - (sum / count) * (sum / count);
  MESSAGE("empirical " << var << " analytic " << v);
  CHECK(std::abs(var / v - 1.0) < 0.05);
}

TEST_CASE("hypotheses") {
  DiffusionSchedule s = make_schedule(ScheduleKind::linear, 100, 1e-4, 0.02);
  MixtureModel toy(s, reference_mixture(), reference_mixture());
  SampleConfig cfg;
  cfg.hypotheses = 1;
  auto one = sample_hypotheses(toy, s, cfg, hypothesis_streams(cfg, 3));
  REQUIRE(one.samples.size() == 1);
  CHECK((one.ensemble - one.samples[0].normalized()).norm() < 1e-15);

  cfg.hypotheses = 4;
  auto streams = hypothesis_streams(cfg, 3);
  CHECK(streams.size() == 4);
  CHECK(streams[0] == hypothesis_streams(cfg, 3)[0]);
  CHECK(streams[0] != hypothesis_streams(cfg, 4)[0]);
  auto a = sample_hypotheses(toy, s, cfg, streams);
  std::reverse(streams.begin(), streams.end());
  auto b = sample_hypotheses(toy, s, cfg, streams);
  std::swap(streams[0], streams[2]);
  auto c = sample_hypotheses(toy, s, cfg, streams);
  CHECK(a.ensemble == b.ensemble);
  CHECK(a.ensemble == c.ensemble);
  CHECK(std::abs(a.ensemble.norm() - 1.0) < 1e-12);
  CHECK_THROWS_AS(sample_hypotheses(toy, s, cfg, {}), ConfigError);
}

TEST_CASE("non-finite predictions are reported with the step") {
  class Bad : public NoiseModel {
   public:
    int dim() const override { return 2; }
    Vec predict(const Vec& z, int n, bool) const override { return n < 50 ? Vec::Constant(2, NAN) : z; }
  } bad;
  DiffusionSchedule s{ScheduleSpec{}};
  SampleConfig cfg;
  cfg.method = SampleMethod::ancestral;
  try {
    sample(bad, s, cfg, 1);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step 51") != std::string::npos);
  }
}

TEST_CASE("text-only drop keeps the query in the unconditional branch") {
  World w{WorldConfig{}};
  Denoiser m = trained_like(8);
  attach_adapter(m);
  for (size_t i = 0; i < m.params().count(); ++i)
    if (m.params().name(i).rfind(kAdapterPrefix, 0) == 0) {
      Rng rng(9, {i});
      for (double& v : m.mutable_params()[i].data) v += 0.05 * rng.normal();
    }
  Rng rng(10);
  TextCondition t = w.encode_text(w.caption(w.random_scene(rng)));
  Vec q = w.oracle_query(w.random_scene(rng), w.make_edit(1, 2)).values;
  Vec z = Vec::LinSpaced(64, -1.0, 1.0);
  DenoiserNoiseModel joint(m, &t, &q, 1.0);
  DenoiserNoiseModel text_only(m, &t, &q, 1.0, DropMode::text_only);
  CHECK(joint.predict(z, 30, false) == m.denoise(z, 30, Conditioning{nullptr, nullptr, 1.0}));
  CHECK(text_only.predict(z, 30, false) == m.denoise(z, 30, Conditioning{nullptr, &q, 1.0}));
  CHECK(joint.predict(z, 30, true) == m.denoise(z, 30, Conditioning{&t, &q, 1.0}));
}
