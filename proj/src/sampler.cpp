#include "fusiondiff/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fusiondiff/errors.hpp"
#include "fusiondiff/rng.hpp"

namespace fusiondiff {

void SampleConfig::validate() const {
  if (steps < 1) throw ConfigError("sample: steps must be >= 1");
  if (hypotheses < 1) throw ConfigError("sample: hypotheses must be >= 1");
  if (delta < 0.0) throw ConfigError("sample: delta must be >= 0");
}

void to_json(nlohmann::json& j, const SampleConfig& c) {
  j = {{"method", c.method == SampleMethod::ancestral ? "ancestral" : "solver2m"},
       {"steps", c.steps},
       {"guidance", c.guidance},
       {"delta", c.delta},
       {"hypotheses", c.hypotheses},
       {"seed", c.seed},
       {"deterministic", c.deterministic},
       {"first_order", c.first_order},
       {"grid", c.grid == TimeGrid::uniform ? "uniform" : "logsnr"},
       {"drop", c.drop == DropMode::joint ? "joint" : "text_only"}};
}

void from_json(const nlohmann::json& j, SampleConfig& c) {
  SampleConfig d;
  std::string method = j.value("method", "solver2m");
  if (method != "ancestral" && method != "solver2m") throw ConfigError("sample: method must be ancestral or solver2m");
  c.method = method == "ancestral" ? SampleMethod::ancestral : SampleMethod::solver2m;
  c.steps = j.value("steps", d.steps);
  c.guidance = j.value("guidance", d.guidance);
  c.delta = j.value("delta", d.delta);
  c.hypotheses = j.value("hypotheses", d.hypotheses);
  c.seed = j.value("seed", d.seed);
  c.deterministic = j.value("deterministic", d.deterministic);
  c.first_order = j.value("first_order", d.first_order);
  std::string grid = j.value("grid", "logsnr");
  if (grid != "uniform" && grid != "logsnr") throw ConfigError("sample: grid must be uniform or logsnr");
  c.grid = grid == "uniform" ? TimeGrid::uniform : TimeGrid::logsnr;
  std::string drop = j.value("drop", "joint");
  if (drop != "joint" && drop != "text_only") throw ConfigError("sample: drop must be joint or text_only");
  c.drop = drop == "joint" ? DropMode::joint : DropMode::text_only;
}

DenoiserNoiseModel::DenoiserNoiseModel(const Denoiser& model, const TextCondition* text, const Vec* query,
                                       double delta, DropMode drop)
    : model_(model), text_(text), query_(query), delta_(delta), drop_(drop) {}

Vec DenoiserNoiseModel::predict(const Vec& z, int n, bool conditional) const {
  Conditioning c;
  c.delta = delta_;
  if (conditional) {
    c.text = text_;
    c.query = query_;
  } else {
    c.text = nullptr;
    c.query = drop_ == DropMode::text_only ? query_ : nullptr;
  }
  return model_.denoise(z, n, c);
}

Vec cfg_combine(const Vec& eps_cond, const Vec& eps_uncond, double gamma) {
  if (eps_cond.size() != eps_uncond.size()) throw InputError("cfg_combine: length mismatch");
  return (1.0 + gamma) * eps_cond - gamma * eps_uncond;
}

nlohmann::json SampleTrace::to_json_lines() const {
  auto arr = nlohmann::json::array();
  for (const auto& e : entries)
    arr.push_back({{"step", e.step}, {"n", e.n}, {"state_norm", e.state_norm}, {"eps_norm", e.eps_norm}});
  return arr;
}

std::vector<int> solver_grid(int N, int steps) {
  if (steps < 1) throw ConfigError("solver grid: steps must be >= 1");
  if (steps > N) throw ConfigError("solver grid: steps (" + std::to_string(steps) + ") exceed N (" + std::to_string(N) + ")");
  std::vector<int> grid;
  if (steps == 1) return {N};
  for (int i = 0; i < steps; ++i) {
    int t = static_cast<int>(std::lround(N - static_cast<double>(i) * (N - 1) / (steps - 1)));
    if (grid.empty() || t < grid.back()) grid.push_back(t);
  }
  return grid;
}

std::vector<int> solver_grid(const DiffusionSchedule& s, int steps, TimeGrid kind) {
  const int N = s.steps();
  if (kind == TimeGrid::uniform || steps == 1) return solver_grid(N, steps);
  solver_grid(N, steps);  // range checks
  const double lo = s.lambda(N), hi = s.lambda(1);
  std::vector<int> grid;
  for (int i = 0; i < steps; ++i) {
    const double target = lo + (hi - lo) * i / (steps - 1);
    int best = N;
    for (int n = N; n >= 1; --n)
      if (std::abs(s.lambda(n) - target) < std::abs(s.lambda(best) - target)) best = n;
    // Keep the grid strictly decreasing with room for the remaining points.
    if (!grid.empty()) best = std::min(best, grid.back() - 1);
    grid.push_back(std::max(best, steps - i));
  }
  return grid;
}

namespace {

Vec guided_eps(const NoiseModel& model, const Vec& z, int n, double gamma, int step, SampleTrace* trace) {
  Vec cond = model.predict(z, n, true);
  Vec uncond = model.predict(z, n, false);
  Vec eps = cfg_combine(cond, uncond, gamma);
  if (!eps.allFinite()) throw NumericError("non-finite noise prediction at step " + std::to_string(step) + " (n=" + std::to_string(n) + ")");
  if (trace) {
    TraceEntry e;
    e.step = step;
    e.n = n;
    e.state_norm = z.norm();
    e.eps_norm = eps.norm();
    if (trace->keep_vectors) {
      e.eps_cond = cond;
      e.eps_uncond = uncond;
      e.eps_tilde = eps;
    }
    trace->entries.push_back(std::move(e));
  }
  return eps;
}

Vec initial_noise(int dim, Rng& rng) {
  Vec z(dim);
  for (int i = 0; i < dim; ++i) z[i] = rng.normal();
  return z;
}

}  // namespace

Vec sample_ancestral(const NoiseModel& model, const DiffusionSchedule& s, const SampleConfig& cfg, uint64_t stream,
                     SampleTrace* trace) {
  cfg.validate();
  Rng rng(stream);
  Vec z = initial_noise(model.dim(), rng);
  const int N = s.steps();
  for (int n = N, step = 0; n >= 1; --n, ++step) {
    Vec eps = guided_eps(model, z, n, cfg.guidance, step, trace);
    if (cfg.deterministic) {
      Vec x0 = predict_x0(s, z, n, eps);
      z = std::sqrt(s.alpha_bar(n - 1)) * x0 + std::sqrt(1.0 - s.alpha_bar(n - 1)) * eps;
    } else {
      z = (z - (s.beta(n) / s.noise_scale(n)) * eps) / std::sqrt(s.alpha(n));
      if (s.sigma(n) > 0.0) {
        for (Eigen::Index i = 0; i < z.size(); ++i) z[i] += s.sigma(n) * rng.normal();
      }
    }
    if (!z.allFinite()) throw NumericError("non-finite sampler state at step " + std::to_string(step));
  }
  return z;
}

Vec sample_solver2m(const NoiseModel& model, const DiffusionSchedule& s, const SampleConfig& cfg, uint64_t stream,
                    SampleTrace* trace) {
  cfg.validate();
  std::vector<int> grid = solver_grid(s, cfg.steps, cfg.grid);
  grid.push_back(0);
  Rng rng(stream);
  Vec x = initial_noise(model.dim(), rng);
  Vec x0_prev;
  double h_prev = 0.0;
  for (size_t i = 0; i + 1 < grid.size(); ++i) {
    const int t = grid[i], t_next = grid[i + 1];
    Vec eps = guided_eps(model, x, t, cfg.guidance, static_cast<int>(i), trace);
    Vec x0 = predict_x0(s, x, t, eps);
    if (t_next == 0) {
      // lambda(0) = +inf: the update collapses onto the data prediction.
      x = x0;
    } else {
      const double h = s.lambda(t_next) - s.lambda(t);
      const double ratio = s.noise_scale(t_next) / s.noise_scale(t);
      const double coef = s.signal_scale(t_next) * std::expm1(-h);
      if (i == 0 || cfg.first_order) {
        x = ratio * x - coef * x0;
      } else {
        const double r = h_prev / h;
        Vec d = (1.0 + 0.5 / r) * x0 - (0.5 / r) * x0_prev;
        x = ratio * x - coef * d;
      }
      h_prev = h;
    }
    x0_prev = std::move(x0);
    if (!x.allFinite()) throw NumericError("non-finite solver state at step " + std::to_string(i));
  }
  return x;
}

Vec sample(const NoiseModel& model, const DiffusionSchedule& s, const SampleConfig& cfg, uint64_t stream,
           SampleTrace* trace) {
  return cfg.method == SampleMethod::ancestral ? sample_ancestral(model, s, cfg, stream, trace)
                                               : sample_solver2m(model, s, cfg, stream, trace);
}

std::vector<uint64_t> hypothesis_streams(const SampleConfig& cfg, uint64_t query_id) {
  std::vector<uint64_t> out;
  for (int k = 0; k < cfg.hypotheses; ++k) out.push_back(stream_key(cfg.seed, {0x5a, query_id, static_cast<uint64_t>(k)}));
  return out;
}

Hypotheses sample_hypotheses(const NoiseModel& model, const DiffusionSchedule& s, const SampleConfig& cfg,
                             std::vector<uint64_t> streams) {
  if (streams.empty()) throw ConfigError("sample_hypotheses: need at least one stream");
  std::sort(streams.begin(), streams.end());
  Hypotheses h;
  Vec sum = Vec::Zero(model.dim());
  for (uint64_t st : streams) {
    h.samples.push_back(sample(model, s, cfg, st));
    sum += h.samples.back();
  }
  double norm = sum.norm();
  if (norm == 0.0) throw NumericError("sample_hypotheses: ensemble mean is zero");
  h.ensemble = sum / norm;
  return h;
}

}  // namespace fusiondiff
