#include <doctest.h>

#include "fusiondiff/control_adapter.hpp"
#include "fusiondiff/errors.hpp"
#include "fusiondiff/rng.hpp"
#include "fusiondiff/trainer.hpp"

using namespace fusiondiff;

namespace {

Vec randn(int n, Rng& rng) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

// A backbone that looks trained: every tensor carries signal.
Denoiser trained_like(uint64_t seed) {
  Denoiser m(DitConfig{}, seed);
  ParamStore& p = m.mutable_params();
  for (size_t i = 0; i < p.count(); ++i) {
    Rng rng(seed, {77, i});
    for (double& v : p[i].data) v += 0.05 * rng.normal();
  }
  return m;
}

}  // namespace

TEST_CASE("fresh adapter leaves the denoiser output unchanged") {
  World w{WorldConfig{}};
  Denoiser base = trained_like(1);
  Denoiser composed = base;
  attach_adapter(composed);
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    Vec z = randn(64, rng);
    int n = rng.uniform_int(1, 100);
    TextCondition t = w.encode_text(w.caption(w.random_scene(rng)));
    Vec q = w.oracle_query(w.random_scene(rng), w.make_edit(1 + i % 5, i % 8)).values;
    Conditioning cb{&t, nullptr, 1.0};
    Conditioning cc{&t, &q, 1.0};
    CHECK(composed.denoise(z, n, cc) == base.denoise(z, n, cb));
    Conditioning absent{nullptr, nullptr, 1.0};
    CHECK(composed.denoise(z, n, absent) == base.denoise(z, n, absent));
  }
}

TEST_CASE("control signal equals encoder outputs at init") {
  World w{WorldConfig{}};
  Denoiser m = trained_like(3);
  attach_adapter(m);
  Rng rng(4);
  Vec z = randn(64, rng), q = randn(64, rng);
  TextCondition t = w.encode_text(w.caption(w.random_scene(rng)));
  ControlSignal with = control_signal(m, z, 20, Conditioning{&t, &q, 1.0});
  REQUIRE(with.y.size() == 2);
  ParamStore& p = m.mutable_params();
  p.at("ctrl.z1.w").vec().setOnes();
  ControlSignal moved = control_signal(m, z, 20, Conditioning{&t, &q, 1.0});
  // Z2 still zero: the control branch is computed but contributes nothing.
  for (size_t l = 0; l < 2; ++l) CHECK(moved.y[l] == with.y[l]);
}

TEST_CASE("perturbing a Z2 weight changes the output") {
  World w{WorldConfig{}};
  Denoiser m = trained_like(5);
  attach_adapter(m);
  Rng rng(6);
  Vec z = randn(64, rng), q = randn(64, rng);
  TextCondition t = w.encode_text(w.caption(w.random_scene(rng)));
  Conditioning c{&t, &q, 1.0};
  Vec before = m.denoise(z, 30, c);
  m.mutable_params().at("ctrl.z2.1.w").data[5] += 1e-2;
  Vec after = m.denoise(z, 30, c);
  CHECK((after - before).lpNorm<Eigen::Infinity>() > 0.0);
}

TEST_CASE("delta zero removes every skip") {
  World w{WorldConfig{}};
  Denoiser m = trained_like(7);
  attach_adapter(m);
  ParamStore& p = m.mutable_params();
  for (size_t i = 0; i < p.count(); ++i) {
    if (p.name(i).rfind("ctrl.", 0) != 0) continue;
    Rng rng(8, {i});
    for (double& v : p[i].data) v += 0.1 * rng.normal();
  }
  Rng rng(9);
  Vec z = randn(64, rng), q = randn(64, rng);
  TextCondition t = w.encode_text(w.caption(w.random_scene(rng)));
  Vec out = m.denoise(z, 30, Conditioning{&t, &q, 0.0});
  for (size_t i = 0; i < p.count(); ++i)
    if (p.name(i).rfind("ctrl.", 0) == 0) p[i].vec() *= -3.0;
  CHECK(m.denoise(z, 30, Conditioning{&t, &q, 0.0}) == out);
}

TEST_CASE("output is continuous in delta") {
  World w{WorldConfig{}};
  Denoiser m = trained_like(10);
  attach_adapter(m);
  m.mutable_params().at("ctrl.z2.2.w").vec().setConstant(0.01);
  Rng rng(11);
  Vec z = randn(64, rng), q = randn(64, rng);
  Vec a = m.denoise(z, 30, Conditioning{nullptr, &q, 1.0});
  Vec b = m.denoise(z, 30, Conditioning{nullptr, &q, 1.0 + 1e-7});
  CHECK((a - b).norm() < 1e-4);
}

TEST_CASE("attach then detach restores the model") {
  Denoiser m = trained_like(12);
  uint64_t before = hash_tensors(m.params());
  size_t count = m.params().count();
  attach_adapter(m);
  CHECK(m.has_adapter());
  CHECK_THROWS_AS(attach_adapter(m), ConfigError);
  detach_adapter(m);
  CHECK(!m.has_adapter());
  CHECK(m.params().count() == count);
  CHECK(hash_tensors(m.params()) == before);
  CHECK_THROWS_AS(detach_adapter(m), ConfigError);
  CHECK_THROWS_AS(freeze_backbone_mask(m), ConfigError);
}

TEST_CASE("adapter parameter count") {
  DitConfig c;
  Denoiser m(c, 1);
  size_t backbone = m.params().scalar_count();
  attach_adapter(m);
  CHECK(m.params().scalar_count() - backbone == adapter_param_count(c));
  const size_t D = 64, L = 2;
  CHECK(adapter_param_count(c) == L * (22 * D * D + 22 * D) + (D * 64 + D) + L * (D * D + D));
  MESSAGE("full-scale adapter count from the closed form: " << adapter_param_count(DitConfig::full_scale()));
}

TEST_CASE("frozen backbone: gradients and one optimizer step") {
  World w{WorldConfig{}};
  Denoiser m = trained_like(13);
  attach_adapter(m);
  auto mask = freeze_backbone_mask(m);
  auto triplets = w.gen_triplets(8, 1);
  std::vector<const TripletRecord*> batch;
  for (const auto& t : triplets) batch.push_back(&t);
  DiffusionSchedule s{ScheduleSpec{}};
  TrainConfig cfg = TrainConfig::stage2_defaults();
  cfg.p_cfg = 0.0;
  LossResult r = stage2_loss(m, batch, s, cfg, 1);
  bool adapter_signal = false;
  for (size_t i = 0; i < r.grads.count(); ++i) {
    if (!mask[i]) CHECK(r.grads[i].vec().isZero());
    else adapter_signal = adapter_signal || !r.grads[i].vec().isZero();
  }
  CHECK(adapter_signal);

  uint64_t backbone = hash_tensors(m.params(), kAdapterPrefix, true);
  AdamW opt(m.params(), mask);
  opt.step(m.mutable_params(), r.grads, cfg, 1e-3);
  CHECK(hash_tensors(m.params(), kAdapterPrefix, true) == backbone);
}
