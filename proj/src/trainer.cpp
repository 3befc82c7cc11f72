#include "fusiondiff/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "fusiondiff/control_adapter.hpp"
#include "fusiondiff/errors.hpp"
#include "fusiondiff/parallel.hpp"
#include "fusiondiff/rng.hpp"

namespace fusiondiff {

namespace {

enum StreamTag : uint64_t { kTagNoise = 0x51, kTagShuffle, kTagGradCheck };

// Samples are reduced in fixed-size chunks, in order, so any thread count
// produces the same floating-point sums.
constexpr int kChunk = 8;

}  // namespace

void TrainConfig::validate() const {
  if (stage != 1 && stage != 2) throw ConfigError("train: stage must be 1 or 2");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("train: lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("train: eps must be positive");
  if (!(grad_clip_norm > 0.0)) throw ConfigError("train: grad_clip_norm must be positive");
  if (warmup_steps < 0) throw ConfigError("train: warmup_steps must be >= 0");
  if (!(p_cfg >= 0.0 && p_cfg < 1.0)) throw ConfigError("train: p_cfg must lie in [0, 1)");
  if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (threads < 1) throw ConfigError("train: threads must be >= 1");
}

TrainConfig TrainConfig::stage1_defaults() { return TrainConfig{}; }

TrainConfig TrainConfig::stage2_defaults() {
  TrainConfig c;
  c.stage = 2;
  c.batch_size = 64;
  c.weight_decay = 2e-2;
  c.eps = 1e-8;
  c.warmup_steps = 0;
  c.lr_schedule = LrSchedule::constant;
  c.epochs = 6;
  return c;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"stage", c.stage},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"grad_clip_norm", c.grad_clip_norm},
       {"warmup_steps", c.warmup_steps},
       {"lr_schedule", c.lr_schedule == LrSchedule::cosine ? "cosine" : "constant"},
       {"p_cfg", c.p_cfg},
       {"epochs", c.epochs},
       {"seed", c.seed},
       {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  int stage = j.value("stage", 1);
  TrainConfig d = stage == 2 ? TrainConfig::stage2_defaults() : TrainConfig::stage1_defaults();
  c.stage = stage;
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.grad_clip_norm = j.value("grad_clip_norm", d.grad_clip_norm);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  std::string sched = j.value("lr_schedule", d.lr_schedule == LrSchedule::cosine ? "cosine" : "constant");
  if (sched != "cosine" && sched != "constant") throw ConfigError("train: lr_schedule must be cosine or constant");
  c.lr_schedule = sched == "cosine" ? LrSchedule::cosine : LrSchedule::constant;
  c.p_cfg = j.value("p_cfg", d.p_cfg);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
  c.threads = j.value("threads", d.threads);
}

double learning_rate(const TrainConfig& cfg, long step, long total) {
  double warm = cfg.warmup_steps > 0 ? std::min(1.0, static_cast<double>(step) / cfg.warmup_steps) : 1.0;
  double decay = 1.0;
  if (cfg.lr_schedule == LrSchedule::cosine && total > cfg.warmup_steps) {
    double progress = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(total - cfg.warmup_steps);
    progress = std::clamp(progress, 0.0, 1.0);
    decay = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
  return cfg.lr * warm * decay;
}

double grad_norm(const ParamStore& grads, const std::vector<bool>& mask) {
  double sq = 0.0;
  for (size_t i = 0; i < grads.count(); ++i)
    if (mask[i]) sq += grads[i].vec().squaredNorm();
  return std::sqrt(sq);
}

double clip_grad_norm(ParamStore& grads, const std::vector<bool>& mask, double max_norm) {
  double norm = grad_norm(grads, mask);
  if (norm > max_norm) {
    double scale = max_norm / norm;
    for (size_t i = 0; i < grads.count(); ++i)
      if (mask[i]) grads[i].vec() *= scale;
  }
  return norm;
}

AdamW::AdamW(const ParamStore& params, std::vector<bool> mask) : mask_(std::move(mask)) {
  if (mask_.size() != params.count()) throw ConfigError("optimizer mask does not match parameter count");
  m_.resize(params.count());
  v_.resize(params.count());
  for (size_t i = 0; i < params.count(); ++i) {
    if (!mask_[i]) continue;
    m_[i] = Tensor{params[i].shape, TensorData(params[i].size(), 0.0)};
    v_[i] = m_[i];
  }
}

void AdamW::step(ParamStore& params, const ParamStore& grads, const TrainConfig& cfg, double lr_t) {
  for (size_t i = 0; i < grads.count(); ++i)
    if (mask_[i] && !grads[i].vec().allFinite())
      throw NumericError("optimizer: non-finite gradient in '" + grads.name(i) + "', step aborted");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params.count(); ++i) {
    if (!mask_[i]) continue;
    auto p = params[i].vec();
    auto g = grads[i].vec();
    auto m = m_[i].vec();
    auto v = v_[i].vec();
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    p *= 1.0 - lr_t * cfg.weight_decay;
    p.array() -= lr_t * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps);
  }
}

NoisedSample draw_noised_sample(const DiffusionSchedule& s, const Vec& z0, double p_cfg, uint64_t seed, int stage,
                                uint64_t step, uint64_t sample) {
  Rng rng(seed, {kTagNoise, static_cast<uint64_t>(stage), step, sample});
  NoisedSample ns;
  ns.n = rng.uniform_int(1, s.steps());
  ns.eps.resize(z0.size());
  for (Eigen::Index i = 0; i < z0.size(); ++i) ns.eps[i] = rng.normal();
  ns.drop_condition = rng.bernoulli(p_cfg);
  ns.zn = forward_noise(s, z0, ns.n, ns.eps);
  return ns;
}

double noise_prediction_loss(const Vec& eps, const Vec& eps_hat) { return (eps - eps_hat).squaredNorm(); }

namespace {

// Shared batch driver: per-sample forward/backward, reduction in chunk order.
template <typename Sample>
LossResult batch_loss(const Denoiser& model, size_t batch_size, const TrainConfig& cfg, const Sample& sample_fn) {
  if (batch_size == 0) throw InputError("loss: empty batch");
  const int chunks = static_cast<int>((batch_size + kChunk - 1) / kChunk);
  std::vector<ParamStore> chunk_grads(chunks);
  std::vector<double> chunk_loss(chunks, 0.0);
  const double inv_b = 1.0 / static_cast<double>(batch_size);
  parallel_for(chunks, cfg.threads, [&](int c) {
    chunk_grads[c] = model.params().zeros_like();
    size_t begin = static_cast<size_t>(c) * kChunk, end = std::min(batch_size, begin + kChunk);
    for (size_t i = begin; i < end; ++i) {
      DenoiseCache cache;
      Vec eps;
      Vec eps_hat = sample_fn(i, cache, eps);
      double l = noise_prediction_loss(eps, eps_hat);
      if (!std::isfinite(l)) {
        throw NumericError("non-finite loss at batch sample " + std::to_string(i));
      }
      chunk_loss[c] += l;
      model.backward(cache, (-2.0 * inv_b) * (eps - eps_hat), chunk_grads[c]);
    }
  });
  LossResult r;
  r.grads = std::move(chunk_grads[0]);
  r.loss = chunk_loss[0];
  for (int c = 1; c < chunks; ++c) {
    r.grads.accumulate(chunk_grads[c]);
    r.loss += chunk_loss[c];
  }
  r.loss *= inv_b;
  return r;
}

void zero_frozen(ParamStore& grads, const std::vector<bool>& mask) {
  for (size_t i = 0; i < grads.count(); ++i)
    if (!mask[i]) grads[i].vec().setZero();
}

}  // namespace

LossResult stage1_loss(const Denoiser& model, std::span<const PairRecord* const> batch, const DiffusionSchedule& s,
                       const TrainConfig& cfg, uint64_t step) {
  return batch_loss(model, batch.size(), cfg, [&](size_t i, DenoiseCache& cache, Vec& eps) {
    const PairRecord& rec = *batch[i];
    NoisedSample ns = draw_noised_sample(s, rec.z0.values, cfg.p_cfg, cfg.seed, 1, step, i);
    eps = ns.eps;
    Conditioning cond;
    cond.text = ns.drop_condition ? nullptr : &rec.cond;
    return model.denoise(ns.zn, ns.n, cond, &cache);
  });
}

LossResult stage2_loss(const Denoiser& model, std::span<const TripletRecord* const> batch, const DiffusionSchedule& s,
                       const TrainConfig& cfg, uint64_t step) {
  if (!model.has_adapter()) throw UsageError("stage2_loss: no adapter attached");
  const Vec null_query = Vec::Zero(model.config().d_vl);
  LossResult r = batch_loss(model, batch.size(), cfg, [&](size_t i, DenoiseCache& cache, Vec& eps) {
    const TripletRecord& rec = *batch[i];
    NoisedSample ns = draw_noised_sample(s, rec.z_target.values, cfg.p_cfg, cfg.seed, 2, step, i);
    eps = ns.eps;
    Conditioning cond;
    // Joint drop: text absent and the control branch sees the null query.
    cond.text = ns.drop_condition ? nullptr : &rec.c_delta;
    cond.query = ns.drop_condition ? &null_query : &rec.z_ref_delta.values;
    return model.denoise(ns.zn, ns.n, cond, &cache);
  });
  zero_frozen(r.grads, freeze_backbone_mask(model));
  return r;
}

nlohmann::json to_json_line(const TrainLogEntry& e) {
  return {{"step", e.step}, {"loss", e.loss}, {"lr", e.lr}, {"grad_norm", e.grad_norm}, {"wall_time", e.wall_time}};
}

namespace {

template <typename Record, typename LossFnT>
std::vector<TrainLogEntry> train_loop(Denoiser& model, const std::vector<Record>& data, const TrainConfig& cfg,
                                      const std::vector<bool>& mask, const LossFnT& loss_fn, const StepCallback& on_step,
                                      long max_steps) {
  cfg.validate();
  if (data.empty()) throw UsageError("training data is empty");
  const long per_epoch = static_cast<long>((data.size() + cfg.batch_size - 1) / cfg.batch_size);
  long total = per_epoch * cfg.epochs;
  if (max_steps >= 0) total = std::min(total, max_steps);
  AdamW opt(model.params(), mask);
  std::vector<TrainLogEntry> log;
  auto t0 = std::chrono::steady_clock::now();
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
    std::vector<size_t> order(data.size());
    std::iota(order.begin(), order.end(), size_t{0});
    Rng rng(cfg.seed, {kTagShuffle, static_cast<uint64_t>(cfg.stage), static_cast<uint64_t>(epoch)});
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (size_t b = 0; b < order.size() && step < total; b += static_cast<size_t>(cfg.batch_size)) {
      ++step;
      std::vector<const Record*> batch;
      for (size_t i = b; i < std::min(order.size(), b + static_cast<size_t>(cfg.batch_size)); ++i)
        batch.push_back(&data[order[i]]);
      LossResult r = loss_fn(std::span<const Record* const>(batch), static_cast<uint64_t>(step));
      double norm = clip_grad_norm(r.grads, mask, cfg.grad_clip_norm);
      double lr_t = learning_rate(cfg, step, total);
      opt.step(model.mutable_params(), r.grads, cfg, lr_t);
      TrainLogEntry e{step, r.loss, lr_t, norm,
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
      log.push_back(e);
      if (on_step) on_step(e);
    }
  }
  // Keep in-memory weights identical to what a checkpoint will hold.
  model.mutable_params().round_to_float();
  return log;
}

}  // namespace

std::vector<TrainLogEntry> train_stage1(Denoiser& model, const std::vector<PairRecord>& corpus,
                                        const DiffusionSchedule& s, const TrainConfig& cfg,
                                        const StepCallback& on_step) {
  if (model.has_adapter()) throw UsageError("stage-1 training expects a bare backbone");
  return train_loop(
      model, corpus, cfg, full_mask(model),
      [&](std::span<const PairRecord* const> batch, uint64_t step) { return stage1_loss(model, batch, s, cfg, step); },
      on_step, -1);
}

std::vector<TrainLogEntry> train_stage2(Denoiser& model, const std::vector<TripletRecord>& triplets,
                                        const DiffusionSchedule& s, const TrainConfig& cfg,
                                        const StepCallback& on_step, long max_steps) {
  if (!model.has_adapter()) attach_adapter(model, cfg.seed);
  return train_loop(
      model, triplets, cfg, freeze_backbone_mask(model),
      [&](std::span<const TripletRecord* const> batch, uint64_t step) { return stage2_loss(model, batch, s, cfg, step); },
      on_step, max_steps);
}

// ---------------------------------------------------------------------------

GradCheckReport grad_check(const ParamStore& params, const LossFn& loss, const GradFn& grad,
                           const std::vector<bool>& mask, int n_directions, double fd_step, uint64_t seed) {
  GradCheckReport rep;
  ParamStore g = grad(params);
  ParamStore probe = params;
  for (size_t i = 0; i < params.count(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    double worst = 0.0;
    for (int k = 0; k < n_directions; ++k) {
      Rng rng(seed, {kTagGradCheck, i, static_cast<uint64_t>(k)});
      Vec dir(params[i].size());
      for (Eigen::Index j = 0; j < dir.size(); ++j) dir[j] = rng.normal();
      dir.normalize();
      double analytic = g[i].vec().dot(dir);
      auto at = [&](double t) {
        probe[i].vec() = params[i].vec() + t * dir;
        return loss(probe);
      };
      // Fourth-order central stencil: truncation O(h^4) lets h stay large enough
      // that rounding in the loss does not swamp small directional derivatives.
      const double h = fd_step;
      double fd = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12.0 * h);
      probe[i].vec() = params[i].vec();
      double denom = std::max(std::abs(fd), std::abs(analytic));
      double err = denom == 0.0 ? 0.0 : std::abs(fd - analytic) / denom;
      worst = std::max(worst, err);
    }
    rep.groups.push_back(params.name(i));
    rep.rel_errors.push_back(worst);
    rep.max_rel_error = std::max(rep.max_rel_error, worst);
  }
  return rep;
}

GradCheckReport grad_check_denoiser(const DitConfig& cfg, int n_directions, double fd_step, uint64_t seed,
                                    double corrupt_scale, const std::string& corrupt_group) {
  Denoiser model(cfg, seed);
  attach_adapter(model, seed);
  // Give zero-initialized tensors (gates, AdaLN regressors, Z1/Z2, biases) signal.
  {
    ParamStore& p = model.mutable_params();
    for (size_t i = 0; i < p.count(); ++i) {
      Rng rng(seed, {kTagGradCheck, 0xfeed, i});
      // Unit-gain scale for matrices so every path (attention logits included) carries a
      // derivative well above finite-difference rounding noise.
      const double scale = p[i].shape.size() == 2 ? 0.5 / std::sqrt(static_cast<double>(p[i].cols())) : 0.1;
      for (double& v : p[i].data) v += scale * rng.normal();
    }
  }
  World world([&] {
    WorldConfig w;
    w.d_vl = cfg.d_vl;
    w.text_dim = cfg.text_dim;
    w.seed = seed;
    return w;
  }());
  auto triplets = world.gen_triplets(2, seed);
  auto sched = make_schedule(ScheduleKind::linear, 100, 1e-4, 0.02);

  struct Example {
    Vec zn, eps, query;
    int n;
    const TextCondition* text;
    bool control;
  };
  std::vector<Example> ex;
  for (size_t i = 0; i < triplets.size(); ++i) {
    NoisedSample ns = draw_noised_sample(sched, triplets[i].z_target.values, 0.0, seed, 2, 0, i);
    ex.push_back({ns.zn, ns.eps, triplets[i].z_ref_delta.values, ns.n, i == 0 ? &triplets[i].c_delta : nullptr, i == 0});
  }
  const double delta = 0.8;

  auto loss = [&](const ParamStore& params) {
    Denoiser m(cfg, params);
    double total = 0.0;
    for (const auto& e : ex) {
      Conditioning c{e.text, e.control ? &e.query : nullptr, delta};
      total += noise_prediction_loss(e.eps, m.denoise(e.zn, e.n, c));
    }
    return total / static_cast<double>(ex.size());
  };
  auto grad = [&](const ParamStore& params) {
    Denoiser m(cfg, params);
    ParamStore g = params.zeros_like();
    for (const auto& e : ex) {
      Conditioning c{e.text, e.control ? &e.query : nullptr, delta};
      DenoiseCache cache;
      Vec eps_hat = m.denoise(e.zn, e.n, c, &cache);
      m.backward(cache, (-2.0 / static_cast<double>(ex.size())) * (e.eps - eps_hat), g);
    }
    if (!corrupt_group.empty()) g.at(corrupt_group).vec() *= corrupt_scale;
    return g;
  };
  return grad_check(model.params(), loss, grad, {}, n_directions, fd_step, seed);
}

}  // namespace fusiondiff
