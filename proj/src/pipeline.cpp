#include "fusiondiff/pipeline.hpp"

#include "fusiondiff/blob_store.hpp"
#include "fusiondiff/control_adapter.hpp"
#include "fusiondiff/errors.hpp"
#include "fusiondiff/parallel.hpp"
#include "fusiondiff/rng.hpp"

namespace fusiondiff {

uint64_t backbone_hash(const ParamStore& params) { return hash_tensors(params, kAdapterPrefix, true); }

namespace {

bool is_adapter(const std::string& name) { return name.rfind(kAdapterPrefix, 0) == 0; }

nlohmann::json checkpoint_header(const std::string& kind, const Denoiser& model, const ScheduleSpec& schedule,
                                 long step, uint64_t seed, const nlohmann::json& train_config) {
  nlohmann::json config = {{"dit", model.config()}, {"schedule", schedule}, {"train", train_config}};
  return {{"kind", kind},
          {"tool_version", kToolVersion},
          {"config_hash", hex64(json_hash(config))},
          {"seed", seed},
          {"dit", model.config()},
          {"schedule", schedule},
          {"train", train_config},
          {"step", step},
          // All training randomness is counter-based: (seed, stage, step) fully determines the stream.
          {"rng_state", {{"scheme", "splitmix64-counter"}, {"seed", seed}, {"next_step", step + 1}}},
          {"backbone_hash", hex64(backbone_hash(model.params()))}};
}

}  // namespace

void save_backbone(const std::filesystem::path& manifest, const Denoiser& model, const ScheduleSpec& schedule,
                   long step, uint64_t seed, const nlohmann::json& train_config) {
  BlobWriter bw;
  const ParamStore& p = model.params();
  for (size_t i = 0; i < p.count(); ++i)
    if (!is_adapter(p.name(i))) bw.add(p.name(i), p[i]);
  bw.write(manifest, checkpoint_header("backbone", model, schedule, step, seed, train_config));
}

Checkpoint load_backbone(const std::filesystem::path& manifest) {
  auto f = BlobFile::read(manifest);
  if (f.meta().value("kind", "") != "backbone") throw UsageError(manifest.string() + " is not a backbone checkpoint");
  Checkpoint c;
  c.meta = f.meta();
  c.dit = c.meta.at("dit").get<DitConfig>();
  c.schedule = c.meta.at("schedule").get<ScheduleSpec>();
  for (const auto& r : f.records()) {
    size_t i = c.params.add(r.name, r.shape);
    c.params[i] = f.tensor(r.name, r.shape);
  }
  if (c.meta.contains("backbone_hash") && c.meta["backbone_hash"] != hex64(backbone_hash(c.params)))
    throw UsageError(manifest.string() + ": tensor data does not match the recorded backbone hash");
  return c;
}

void save_adapter(const std::filesystem::path& manifest, const Denoiser& model, const ScheduleSpec& schedule,
                  long step, uint64_t seed, const nlohmann::json& train_config) {
  if (!model.has_adapter()) throw UsageError("save_adapter: model has no adapter");
  BlobWriter bw;
  const ParamStore& p = model.params();
  for (size_t i = 0; i < p.count(); ++i)
    if (is_adapter(p.name(i))) bw.add(p.name(i), p[i]);
  bw.write(manifest, checkpoint_header("adapter", model, schedule, step, seed, train_config));
}

void load_adapter(const std::filesystem::path& manifest, Denoiser& model) {
  auto f = BlobFile::read(manifest);
  if (f.meta().value("kind", "") != "adapter") throw UsageError(manifest.string() + " is not an adapter checkpoint");
  const std::string expect = f.meta().value("backbone_hash", "");
  const std::string have = hex64(backbone_hash(model.params()));
  if (expect != have)
    throw UsageError(manifest.string() + ": adapter was trained on backbone " + expect + ", but the loaded backbone is " + have);
  if (f.meta().at("dit").get<DitConfig>().hidden != model.config().hidden)
    throw UsageError(manifest.string() + ": adapter does not match the model configuration");
  if (model.has_adapter()) detach_adapter(model);
  attach_adapter(model);
  ParamStore& p = model.mutable_params();
  size_t loaded = 0;
  for (const auto& r : f.records()) {
    if (!is_adapter(r.name) || !p.contains(r.name)) throw UsageError(manifest.string() + ": unexpected tensor " + r.name);
    p.at(r.name) = f.tensor(r.name, p.at(r.name).shape);
    ++loaded;
  }
  size_t expected = 0;
  for (size_t i = 0; i < p.count(); ++i) expected += is_adapter(p.name(i)) ? 1 : 0;
  if (loaded != expected) throw UsageError(manifest.string() + ": adapter checkpoint is missing tensors");
}

nlohmann::json read_header(const std::filesystem::path& manifest) {
  auto f = BlobFile::read(manifest);
  nlohmann::json h = f.meta();
  auto tensors = nlohmann::json::array();
  size_t scalars = 0;
  for (const auto& r : f.records()) {
    size_t n = 1;
    for (int d : r.shape) n *= static_cast<size_t>(d);
    scalars += n;
    tensors.push_back({{"name", r.name}, {"shape", r.shape}});
  }
  return {{"meta", h}, {"tensor_count", tensors.size()}, {"scalar_count", scalars}, {"tensors", tensors}};
}

// ---------------------------------------------------------------------------

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::A: return "A";
    case Variant::B: return "B";
    case Variant::C: return "C";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "A" || s == "a") return Variant::A;
  if (s == "B" || s == "b") return Variant::B;
  if (s == "C" || s == "c") return Variant::C;
  throw UsageError("unknown variant '" + s + "' (expected A, B or C)");
}

std::vector<Vec> variant_queries(Variant v, const World& world, const Benchmark& bench, const Denoiser* backbone,
                                 const Denoiser* composed, const DiffusionSchedule* schedule,
                                 const VariantOptions& opt) {
  std::vector<Vec> out(bench.queries.size());
  if (v == Variant::A) {
    for (size_t i = 0; i < out.size(); ++i) out[i] = bench.queries[i].z_query.values;
    return out;
  }
  const Denoiser* model = v == Variant::B ? backbone : composed;
  if (!model) throw UsageError(v == Variant::B ? "variant B requires a Stage-1 checkpoint" : "variant C requires a Stage-2 adapter");
  if (v == Variant::B && model->has_adapter()) throw UsageError("variant B expects the bare Stage-1 backbone");
  if (v == Variant::C && !model->has_adapter()) throw UsageError("variant C requires a Stage-2 adapter");
  if (!schedule) throw UsageError("sampling variants need the checkpoint's schedule");
  opt.sample.validate();
  parallel_for(static_cast<int>(out.size()), opt.threads, [&](int i) {
    const BenchmarkQuery& q = bench.queries[static_cast<size_t>(i)];
    TextCondition text = world.encode_text(opt.use_edit_text ? world.edit_text(q.edit) : q.description);
    const Vec* query = v == Variant::C ? &q.z_query.values : nullptr;
    DenoiserNoiseModel nm(*model, &text, query, opt.sample.delta, opt.sample.drop);
    out[static_cast<size_t>(i)] = sample_hypotheses(nm, *schedule, opt.sample, hypothesis_streams(opt.sample, q.query_id)).ensemble;
  });
  return out;
}

MetricReport run_variant(Variant v, const World& world, const Benchmark& bench, const Denoiser* backbone,
                         const Denoiser* composed, const DiffusionSchedule* schedule, const VariantOptions& opt,
                         const MetricKs& ks) {
  std::vector<Vec> queries = variant_queries(v, world, bench, backbone, composed, schedule, opt);
  std::vector<uint64_t> ids;
  for (const auto& q : bench.queries) ids.push_back(q.query_id);
  return evaluate(variant_name(v), rank_all(queries, ids, bench.gallery, opt.threads), bench, ks);
}

// ---------------------------------------------------------------------------

void PipelineConfig::validate() const {
  world.validate();
  dit.validate();
  stage1.validate();
  stage2.validate();
  benchmark.validate(world);
  variant.sample.validate();
  if (dit.d_vl != world.d_vl || dit.text_dim != world.text_dim)
    throw ConfigError("pipeline: model widths (d_vl, text_dim) must match the world");
  if (n_pairs < 1 || n_triplets < 1) throw ConfigError("pipeline: corpora must be non-empty");
  if (benchmark_seeds.empty()) throw ConfigError("pipeline: need at least one benchmark seed");
}

void to_json(nlohmann::json& j, const PipelineConfig& c) {
  nlohmann::json sample = c.variant.sample;
  j = {{"world", c.world},
       {"schedule", c.schedule},
       {"dit", c.dit},
       {"stage1", c.stage1},
       {"stage2", c.stage2},
       {"n_pairs", c.n_pairs},
       {"n_triplets", c.n_triplets},
       {"data_seed", c.data_seed},
       {"benchmark", c.benchmark},
       {"benchmark_seeds", c.benchmark_seeds},
       {"sample", sample},
       {"use_edit_text", c.variant.use_edit_text},
       {"threads", c.variant.threads},
       {"init_seed", c.init_seed},
       {"stage2_max_steps", c.stage2_max_steps}};
}

void from_json(const nlohmann::json& j, PipelineConfig& c) {
  PipelineConfig d;
  c = d;
  if (j.contains("world")) c.world = j["world"].get<WorldConfig>();
  if (j.contains("schedule")) c.schedule = j["schedule"].get<ScheduleSpec>();
  if (j.contains("dit")) c.dit = j["dit"].get<DitConfig>();
  if (j.contains("stage1")) c.stage1 = j["stage1"].get<TrainConfig>();
  if (j.contains("stage2")) c.stage2 = j["stage2"].get<TrainConfig>();
  c.n_pairs = j.value("n_pairs", d.n_pairs);
  c.n_triplets = j.value("n_triplets", d.n_triplets);
  c.data_seed = j.value("data_seed", d.data_seed);
  if (j.contains("benchmark")) c.benchmark = j["benchmark"].get<BenchmarkConfig>();
  c.benchmark_seeds = j.value("benchmark_seeds", d.benchmark_seeds);
  if (j.contains("sample")) c.variant.sample = j["sample"].get<SampleConfig>();
  c.variant.use_edit_text = j.value("use_edit_text", d.variant.use_edit_text);
  c.variant.threads = j.value("threads", d.variant.threads);
  c.init_seed = j.value("init_seed", d.init_seed);
  c.stage2_max_steps = j.value("stage2_max_steps", d.stage2_max_steps);
}

nlohmann::json PipelineResult::metrics_json() const {
  auto seeds = nlohmann::json::array();
  for (const auto& reps : per_seed) {
    nlohmann::json row = nlohmann::json::object();
    for (const auto& r : reps) row[r.variant] = r.to_json()["metrics"];
    seeds.push_back(row);
  }
  nlohmann::json mean_j = nlohmann::json::object();
  for (const auto& r : mean) mean_j[r.variant] = r.to_json()["metrics"];
  return {{"per_seed", seeds}, {"mean", mean_j}};
}

PipelineResult run_pipeline(const PipelineConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  auto say = [&](const std::string& s) {
    if (progress) progress(s);
  };
  World world(cfg.world);
  DiffusionSchedule schedule(cfg.schedule);
  PipelineResult res;

  say("generating corpora");
  auto pairs = world.gen_pair_corpus(cfg.n_pairs, stream_key(cfg.data_seed, {1}));
  auto triplets = world.gen_triplets(cfg.n_triplets, stream_key(cfg.data_seed, {2}));

  say("stage 1");
  res.backbone.emplace(cfg.dit, cfg.init_seed);
  TrainConfig s1 = cfg.stage1;
  s1.stage = 1;
  res.stage1_log = train_stage1(*res.backbone, pairs, schedule, s1);

  say("stage 2");
  res.composed.emplace(*res.backbone);
  TrainConfig s2 = cfg.stage2;
  s2.stage = 2;
  res.stage2_log = train_stage2(*res.composed, triplets, schedule, s2, {}, cfg.stage2_max_steps);

  std::vector<std::vector<MetricReport>> by_variant(3);
  for (uint64_t seed : cfg.benchmark_seeds) {
    say("benchmark seed " + std::to_string(seed));
    Benchmark bench = world.gen_benchmark(cfg.benchmark, seed);
    std::vector<MetricReport> reps;
    for (Variant v : {Variant::A, Variant::B, Variant::C}) {
      reps.push_back(run_variant(v, world, bench, &*res.backbone, &*res.composed, &schedule, cfg.variant));
      by_variant[static_cast<size_t>(v)].push_back(reps.back());
    }
    res.per_seed.push_back(std::move(reps));
  }
  for (Variant v : {Variant::A, Variant::B, Variant::C})
    res.mean.push_back(average_reports(variant_name(v), by_variant[static_cast<size_t>(v)]));
  return res;
}

}  // namespace fusiondiff
