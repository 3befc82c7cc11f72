#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fusiondiff/blob_store.hpp"
#include "fusiondiff/control_adapter.hpp"
#include "fusiondiff/errors.hpp"
#include "fusiondiff/pipeline.hpp"
#include "fusiondiff/retrieval.hpp"
#include "fusiondiff/sampler.hpp"
#include "fusiondiff/schedule.hpp"
#include "fusiondiff/synth_world.hpp"
#include "fusiondiff/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fusiondiff;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kNumeric = 3 };

int verbosity = 0;

void log_event(const std::string& event, json fields = json::object()) {
  if (verbosity <= 0) return;
  fields["event"] = event;
  std::cerr << fields.dump() << '\n';
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw UsageError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw UsageError("cannot write " + p.string());
  out << s;
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

// Every artifact carries these three fields.
json stamp(const json& config, uint64_t seed) {
  return {{"tool_version", kToolVersion}, {"config_hash", hex64(json_hash(config))}, {"seed", seed}};
}

json merge(json base, const json& extra) {
  for (auto it = extra.begin(); it != extra.end(); ++it) base[it.key()] = it.value();
  return base;
}

// Loads an optional JSON config file into T, starting from `base`.
template <typename T>
T load_config(const std::string& path, T base) {
  if (path.empty()) return base;
  json j = read_json(path);
  json merged = base;
  for (auto it = j.begin(); it != j.end(); ++it) merged[it.key()] = it.value();
  return merged.get<T>();
}

World load_world(const fs::path& data) { return World(load_world_config(data / "world.json")); }

struct Models {
  Checkpoint ckpt;
  std::optional<Denoiser> backbone;
  std::optional<Denoiser> composed;
  std::optional<DiffusionSchedule> schedule;
};

Models load_models(const std::string& backbone_path, const std::string& adapter_path) {
  Models m;
  if (backbone_path.empty()) {
    if (!adapter_path.empty()) throw UsageError("--adapter needs --backbone");
    return m;
  }
  m.ckpt = load_backbone(backbone_path);
  m.backbone.emplace(m.ckpt.dit, m.ckpt.params);
  m.schedule.emplace(m.ckpt.schedule);
  if (!adapter_path.empty()) {
    m.composed.emplace(*m.backbone);
    load_adapter(adapter_path, *m.composed);
  }
  return m;
}

void check_world_matches(const World& world, const DitConfig& dit) {
  if (world.config().d_vl != dit.d_vl || world.config().text_dim != dit.text_dim)
    throw UsageError("checkpoint widths do not match the world (d_vl/text_dim)");
}

// Sampling flags shared by sample, ablate and sweep; unset flags keep the config value.
struct SampleFlags {
  std::string config;
  std::string method, grid;
  std::optional<int> steps, hypotheses;
  std::optional<double> guidance, delta;
  std::optional<uint64_t> seed;
  bool deterministic = false, first_order = false, text_only_drop = false;

  void add(CLI::App* app) {
    app->add_option("--sample-config", config, "JSON sampling config");
    app->add_option("--method", method, "ancestral | solver2m")->check(CLI::IsMember({"ancestral", "solver2m"}));
    app->add_option("--steps", steps, "solver steps");
    app->add_option("--grid", grid, "solver timestep spacing: logsnr | uniform")->check(CLI::IsMember({"logsnr", "uniform"}));
    app->add_option("--guidance", guidance, "CFG scale gamma");
    app->add_option("--delta", delta, "control scale delta");
    app->add_option("--hypotheses", hypotheses, "hypotheses K per query");
    app->add_option("--sample-seed", seed, "sampling seed");
    app->add_flag("--deterministic", deterministic, "ancestral: zero-variance update");
    app->add_flag("--first-order", first_order, "solver: first-order updates only");
    app->add_flag("--text-only-drop", text_only_drop, "unconditional branch keeps the query");
  }

  SampleConfig resolve() const {
    SampleConfig c = load_config(config, SampleConfig{});
    if (!method.empty()) c.method = method == "ancestral" ? SampleMethod::ancestral : SampleMethod::solver2m;
    if (steps) c.steps = *steps;
    if (!grid.empty()) c.grid = grid == "uniform" ? TimeGrid::uniform : TimeGrid::logsnr;
    if (guidance) c.guidance = *guidance;
    if (delta) c.delta = *delta;
    if (hypotheses) c.hypotheses = *hypotheses;
    if (seed) c.seed = *seed;
    if (deterministic) c.deterministic = true;
    if (first_order) c.first_order = true;
    if (text_only_drop) c.drop = DropMode::text_only;
    c.validate();
    return c;
  }
};

json train_log_lines(const std::vector<TrainLogEntry>& log, const fs::path& path) {
  std::string text;
  for (const auto& e : log) text += to_json_line(e).dump() + "\n";
  write_text(path, text);
  return log.empty() ? json() : to_json_line(log.back());
}

StepCallback step_printer() {
  return [](const TrainLogEntry& e) {
    if (verbosity > 0) std::cout << to_json_line(e).dump() << '\n' << std::flush;
  };
}

json report_json(const MetricReport& r, const json& stamp_fields) {
  return merge(r.to_json(), {{"stamp", stamp_fields}});
}

// ---------------------------------------------------------------------------

struct GenWorldArgs {
  std::string world_config, bench_config, out;
  int pairs = 20000, triplets = 2000;
  uint64_t seed = 11;
  std::vector<uint64_t> bench_seeds{101, 102, 103, 104, 105};
};

int cmd_gen_world(const GenWorldArgs& a) {
  WorldConfig wc = load_config(a.world_config, WorldConfig{});
  wc.validate();
  BenchmarkConfig bc = load_config(a.bench_config, BenchmarkConfig{});
  bc.validate(wc);
  World world(wc);
  fs::path out = a.out;
  fs::create_directories(out);
  json cfg = {{"world", wc}, {"benchmark", bc}, {"pairs", a.pairs}, {"triplets", a.triplets}};
  json st = stamp(cfg, a.seed);
  write_json(out / "world.json", merge(json(wc), {{"stamp", st}}));

  log_event("gen_pairs", {{"n", a.pairs}});
  auto pairs = world.gen_pair_corpus(a.pairs, stream_key(a.seed, {1}));
  save_pair_corpus(out / "pairs.json", world, pairs, merge(st, {{"world", wc}}));
  log_event("gen_triplets", {{"n", a.triplets}});
  auto triplets = world.gen_triplets(a.triplets, stream_key(a.seed, {2}));
  save_triplets(out / "triplets.json", world, triplets, merge(st, {{"world", wc}}));
  json bench_dirs = json::array();
  for (uint64_t s : a.bench_seeds) {
    fs::path dir = out / ("bench_" + std::to_string(s));
    log_event("gen_benchmark", {{"seed", s}});
    Benchmark b = world.gen_benchmark(bc, s);
    save_benchmark(dir, world, b, merge(stamp(cfg, s), {{"world", wc}}));
    bench_dirs.push_back(dir.filename().string());
  }
  json summary = {{"out", out.string()}, {"pairs", a.pairs}, {"triplets", a.triplets}, {"benchmarks", bench_dirs}};
  std::cout << summary.dump() << '\n';
  return kOk;
}

struct PretrainArgs {
  std::string data, out, train_config, dit_config, schedule_config;
  uint64_t init_seed = 7;
  std::optional<int> epochs, threads;
};

int cmd_pretrain(const PretrainArgs& a) {
  World world = load_world(a.data);
  auto pairs = load_pair_corpus(fs::path(a.data) / "pairs.json", world);
  TrainConfig tc = load_config(a.train_config, TrainConfig::stage1_defaults());
  tc.stage = 1;
  if (a.epochs) tc.epochs = *a.epochs;
  if (a.threads) tc.threads = *a.threads;
  DitConfig dc = load_config(a.dit_config, DitConfig{});
  ScheduleSpec sc = load_config(a.schedule_config, ScheduleSpec{});
  check_world_matches(world, dc);
  DiffusionSchedule sched(sc);
  Denoiser model(dc, a.init_seed);
  log_event("pretrain_start", {{"pairs", pairs.size()}, {"params", model.params().scalar_count()}});
  auto log = train_stage1(model, pairs, sched, tc, step_printer());
  fs::path out = a.out;
  json tj = tc;
  tj["init_seed"] = a.init_seed;
  save_backbone(out / "backbone.json", model, sc, static_cast<long>(log.size()), tc.seed, tj);
  json last = train_log_lines(log, out / "stage1_log.jsonl");
  std::cout << json({{"checkpoint", (out / "backbone.json").string()}, {"steps", log.size()}, {"final", last}}).dump()
            << '\n';
  return kOk;
}

struct FinetuneArgs {
  std::string data, backbone, out, train_config;
  std::optional<int> epochs, threads;
  long max_steps = -1;
};

int cmd_finetune(const FinetuneArgs& a) {
  World world = load_world(a.data);
  auto triplets = load_triplets(fs::path(a.data) / "triplets.json", world);
  Models m = load_models(a.backbone, "");
  check_world_matches(world, m.ckpt.dit);
  TrainConfig tc = load_config(a.train_config, TrainConfig::stage2_defaults());
  tc.stage = 2;
  if (a.epochs) tc.epochs = *a.epochs;
  if (a.threads) tc.threads = *a.threads;
  Denoiser model = *m.backbone;
  log_event("finetune_start", {{"triplets", triplets.size()}, {"backbone_hash", hex64(backbone_hash(model.params()))}});
  auto log = train_stage2(model, triplets, *m.schedule, tc, step_printer(), a.max_steps);
  if (backbone_hash(model.params()) != backbone_hash(m.backbone->params()))
    throw NumericError("stage 2 modified backbone tensors");
  fs::path out = a.out;
  save_adapter(out / "adapter.json", model, m.ckpt.schedule, static_cast<long>(log.size()), tc.seed, tc);
  json last = train_log_lines(log, out / "stage2_log.jsonl");
  std::cout << json({{"checkpoint", (out / "adapter.json").string()}, {"steps", log.size()}, {"final", last}}).dump()
            << '\n';
  return kOk;
}

struct SampleArgs {
  std::string data, backbone, adapter, benchmark, out, trace, variant = "C";
  bool use_edit_text = false;
  int threads = 1;
  SampleFlags flags;
};

int cmd_sample(const SampleArgs& a) {
  World world = load_world(a.data);
  Benchmark bench = load_benchmark(a.benchmark, world);
  Models m = load_models(a.backbone, a.adapter);
  Variant v = parse_variant(a.variant);
  VariantOptions opt{a.flags.resolve(), a.use_edit_text, a.threads};
  std::vector<Vec> z = variant_queries(v, world, bench, m.backbone ? &*m.backbone : nullptr,
                                       m.composed ? &*m.composed : nullptr, m.schedule ? &*m.schedule : nullptr, opt);
  BlobWriter bw;
  std::vector<double> flat;
  json ids = json::array();
  for (size_t i = 0; i < z.size(); ++i) {
    flat.insert(flat.end(), z[i].data(), z[i].data() + z[i].size());
    ids.push_back(bench.queries[i].query_id);
  }
  bw.add("z", {static_cast<int>(z.size()), world.config().d_vl}, flat);
  json cfg = {{"variant", a.variant}, {"sample", opt.sample}, {"use_edit_text", a.use_edit_text}};
  json meta = merge(stamp(cfg, opt.sample.seed), {{"kind", "samples"}, {"query_ids", ids}, {"config", cfg}});
  bw.write(a.out, meta);

  if (!a.trace.empty()) {
    if (v == Variant::A) throw UsageError("--trace needs a sampling variant (B or C)");
    const Denoiser& model = v == Variant::B ? *m.backbone : *m.composed;
    const BenchmarkQuery& q = bench.queries.front();
    TextCondition text = world.encode_text(a.use_edit_text ? world.edit_text(q.edit) : q.description);
    DenoiserNoiseModel nm(model, &text, v == Variant::C ? &q.z_query.values : nullptr, opt.sample.delta, opt.sample.drop);
    SampleTrace tr;
    sample(nm, *m.schedule, opt.sample, hypothesis_streams(opt.sample, q.query_id).front(), &tr);
    std::string lines;
    for (const auto& e : tr.to_json_lines()) lines += e.dump() + "\n";
    write_text(a.trace, lines);
  }
  std::cout << json({{"samples", a.out}, {"count", z.size()}}).dump() << '\n';
  return kOk;
}

std::vector<Vec> load_sample_blob(const fs::path& path, std::vector<uint64_t>& ids) {
  auto f = BlobFile::read(path);
  if (f.meta().value("kind", "") != "samples") throw UsageError(path.string() + " is not a samples file");
  ids = f.meta().at("query_ids").get<std::vector<uint64_t>>();
  Tensor t = f.tensor("z");
  if (t.shape.size() != 2 || static_cast<size_t>(t.shape[0]) != ids.size())
    throw UsageError(path.string() + ": sample count does not match query ids");
  std::vector<Vec> out;
  for (int i = 0; i < t.shape[0]; ++i)
    out.push_back(Eigen::Map<const Vec>(t.data.data() + static_cast<size_t>(i) * t.shape[1], t.shape[1]));
  return out;
}

// Query embeddings from a samples blob, or variant A from the benchmark itself.
std::vector<Vec> query_embeddings(const std::string& samples, const Benchmark& bench, std::vector<uint64_t>& ids) {
  if (samples.empty()) {
    ids.clear();
    std::vector<Vec> z;
    for (const auto& q : bench.queries) {
      ids.push_back(q.query_id);
      z.push_back(q.z_query.values);
    }
    return z;
  }
  auto z = load_sample_blob(samples, ids);
  if (ids.size() != bench.queries.size()) throw UsageError("samples do not match the benchmark's queries");
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] != bench.queries[i].query_id) throw UsageError("samples do not match the benchmark's queries");
  return z;
}

struct RetrieveArgs {
  std::string data, benchmark, samples, out;
  int k = kAll, threads = 1;
};

json results_json(const std::vector<QueryResult>& rs) {
  json arr = json::array();
  for (const auto& r : rs)
    arr.push_back({{"query_id", r.query_id}, {"ids", r.ids}, {"scores", r.scores}, {"complete", r.complete}});
  return arr;
}

int cmd_retrieve(const RetrieveArgs& a) {
  World world = load_world(a.data);
  Benchmark bench = load_benchmark(a.benchmark, world);
  std::vector<uint64_t> ids;
  auto z = query_embeddings(a.samples, bench, ids);
  std::vector<QueryResult> rs(z.size());
  for (size_t i = 0; i < z.size(); ++i) rs[i] = rank(z[i], bench.gallery, a.k, ids[i]);
  json cfg = {{"samples", a.samples}, {"k", a.k}};
  write_json(a.out, {{"kind", "results"}, {"stamp", stamp(cfg, bench.seed)}, {"results", results_json(rs)}});
  std::cout << json({{"results", a.out}, {"queries", rs.size()}}).dump() << '\n';
  return kOk;
}

struct EvalArgs {
  std::string data, benchmark, samples, results, out, name = "eval";
};

int cmd_eval(const EvalArgs& a) {
  World world = load_world(a.data);
  Benchmark bench = load_benchmark(a.benchmark, world);
  std::vector<QueryResult> rs;
  if (!a.results.empty()) {
    json j = read_json(a.results);
    if (j.value("kind", "") != "results") throw UsageError(a.results + " is not a results file");
    for (const auto& r : j.at("results")) {
      QueryResult q;
      q.query_id = r.at("query_id");
      q.ids = r.at("ids").get<std::vector<uint64_t>>();
      q.scores = r.at("scores").get<std::vector<double>>();
      q.complete = r.value("complete", true);
      rs.push_back(std::move(q));
    }
  } else {
    std::vector<uint64_t> ids;
    auto z = query_embeddings(a.samples, bench, ids);
    rs = rank_all(z, ids, bench.gallery);
  }
  MetricReport rep = evaluate(a.name, rs, bench);
  json cfg = {{"samples", a.samples}, {"results", a.results}};
  if (!a.out.empty()) write_json(a.out, report_json(rep, stamp(cfg, bench.seed)));
  std::cout << format_table({rep});
  return kOk;
}

struct AblateArgs {
  std::string data, backbone, adapter, out;
  std::vector<std::string> benchmarks;
  std::vector<std::string> variants{"A", "B", "C"};
  bool use_edit_text = false;
  int threads = 1;
  SampleFlags flags;
};

int cmd_ablate(const AblateArgs& a) {
  World world = load_world(a.data);
  Models m = load_models(a.backbone, a.adapter);
  if (m.backbone) check_world_matches(world, m.ckpt.dit);
  VariantOptions opt{a.flags.resolve(), a.use_edit_text, a.threads};
  std::vector<std::string> dirs = a.benchmarks;
  if (dirs.empty()) {
    for (const auto& e : fs::directory_iterator(a.data))
      if (e.is_directory() && e.path().filename().string().rfind("bench_", 0) == 0) dirs.push_back(e.path().string());
    std::sort(dirs.begin(), dirs.end());
  }
  if (dirs.empty()) throw UsageError("no benchmarks found");
  std::vector<Variant> vs;
  for (const auto& s : a.variants) vs.push_back(parse_variant(s));
  std::vector<std::vector<MetricReport>> by_variant(vs.size());
  json per_seed = json::array();
  for (const auto& d : dirs) {
    Benchmark bench = load_benchmark(d, world);
    log_event("ablate_benchmark", {{"dir", d}});
    json row = {{"benchmark", fs::path(d).filename().string()}, {"seed", bench.seed}};
    for (size_t i = 0; i < vs.size(); ++i) {
      MetricReport r = run_variant(vs[i], world, bench, m.backbone ? &*m.backbone : nullptr,
                                   m.composed ? &*m.composed : nullptr, m.schedule ? &*m.schedule : nullptr, opt);
      row[r.variant] = r.to_json()["metrics"];
      by_variant[i].push_back(std::move(r));
    }
    per_seed.push_back(row);
  }
  std::vector<MetricReport> mean;
  json mean_j = json::object();
  for (size_t i = 0; i < vs.size(); ++i) {
    mean.push_back(average_reports(variant_name(vs[i]), by_variant[i]));
    mean_j[mean.back().variant] = mean.back().to_json()["metrics"];
  }
  json cfg = {{"sample", opt.sample}, {"use_edit_text", a.use_edit_text}, {"variants", a.variants},
              {"backbone", m.backbone ? json(m.ckpt.meta.value("backbone_hash", "")) : json()}};
  json out = {{"kind", "ablation"}, {"stamp", stamp(cfg, opt.sample.seed)}, {"per_seed", per_seed}, {"mean", mean_j}};
  std::string table = format_table(mean);
  if (!a.out.empty()) {
    write_json(fs::path(a.out) / "ablation.json", out);
    write_text(fs::path(a.out) / "ablation.txt", table);
  }
  std::cout << table;
  return kOk;
}

struct SweepArgs {
  std::string data, backbone, adapter, benchmark, out, metric = "R@10";
  std::vector<double> guidance{0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5};
  std::vector<double> delta{0.5, 1.0, 1.5};
  std::vector<int> steps{6, 10, 14, 18, 22};
  int threads = 1;
  SampleFlags flags;
};

int cmd_sweep(const SweepArgs& a) {
  World world = load_world(a.data);
  Benchmark bench = load_benchmark(a.benchmark, world);
  Models m = load_models(a.backbone, a.adapter);
  if (!m.composed) throw UsageError("sweep needs --backbone and --adapter");
  SampleConfig base = a.flags.resolve();
  auto metric_at = [&](const SampleConfig& sc) {
    VariantOptions opt{sc, false, a.threads};
    return run_variant(Variant::C, world, bench, &*m.backbone, &*m.composed, &*m.schedule, opt).get(a.metric);
  };
  std::string gd = "gamma,delta," + a.metric + "\n";
  for (double g : a.guidance)
    for (double d : a.delta) {
      SampleConfig sc = base;
      sc.guidance = g;
      sc.delta = d;
      double v = metric_at(sc);
      log_event("sweep", {{"gamma", g}, {"delta", d}, {"metric", v}});
      char buf[96];
      std::snprintf(buf, sizeof buf, "%.3f,%.3f,%.6f\n", g, d, v);
      gd += buf;
    }
  std::string st = "steps," + a.metric + "\n";
  for (int s : a.steps) {
    SampleConfig sc = base;
    sc.steps = s;
    double v = metric_at(sc);
    log_event("sweep", {{"steps", s}, {"metric", v}});
    st += std::to_string(s) + "," + std::to_string(v) + "\n";
  }
  fs::path out = a.out;
  write_text(out / "sweep_gamma_delta.csv", gd);
  write_text(out / "sweep_steps.csv", st);
  json cfg = {{"sample", base}, {"guidance", a.guidance}, {"delta", a.delta}, {"steps", a.steps}, {"metric", a.metric}};
  write_json(out / "sweep.json", {{"kind", "sweep"}, {"stamp", stamp(cfg, base.seed)}});
  std::cout << gd << st;
  return kOk;
}

struct GradcheckArgs {
  std::string dit_config;
  int directions = 3;
  double step = 1e-3, threshold = 1e-4;
  uint64_t seed = 3;
  bool per_group = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  DitConfig dc = load_config(a.dit_config, DitConfig{});
  auto t0 = std::chrono::steady_clock::now();
  GradCheckReport rep = grad_check_denoiser(dc, a.directions, a.step, a.seed);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json out = {{"max_rel_error", rep.max_rel_error}, {"groups", rep.groups.size()}, {"threshold", a.threshold},
              {"seconds", secs}, {"pass", rep.max_rel_error < a.threshold}};
  if (a.per_group) {
    json g = json::object();
    for (size_t i = 0; i < rep.groups.size(); ++i) g[rep.groups[i]] = rep.rel_errors[i];
    out["per_group"] = g;
  }
  std::cout << out.dump() << '\n';
  return rep.max_rel_error < a.threshold ? kOk : kNumeric;
}

int cmd_inspect(const std::string& path) {
  json h = read_header(path);
  std::cout << h.dump(2) << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fusiondiff: diffusion-prior composed retrieval on a synthetic world"};
  app.require_subcommand(1);
  app.add_flag("-v,--verbose", verbosity, "progress events on stderr (repeat for more)");

  GenWorldArgs gw;
  auto* c_gw = app.add_subcommand("gen-world", "generate corpora and benchmarks");
  c_gw->add_option("--out", gw.out, "output directory")->required();
  c_gw->add_option("--world-config", gw.world_config, "JSON world config");
  c_gw->add_option("--bench-config", gw.bench_config, "JSON benchmark config");
  c_gw->add_option("--pairs", gw.pairs, "Stage-1 pair count");
  c_gw->add_option("--triplets", gw.triplets, "Stage-2 triplet count");
  c_gw->add_option("--seed", gw.seed, "data seed");
  c_gw->add_option("--bench-seeds", gw.bench_seeds, "benchmark seeds");

  PretrainArgs pt;
  auto* c_pt = app.add_subcommand("pretrain", "Stage-1 prior pre-training");
  c_pt->add_option("--data", pt.data, "gen-world directory")->required();
  c_pt->add_option("--out", pt.out, "output directory")->required();
  c_pt->add_option("--train-config", pt.train_config, "JSON training config");
  c_pt->add_option("--dit-config", pt.dit_config, "JSON model config");
  c_pt->add_option("--schedule-config", pt.schedule_config, "JSON schedule config");
  c_pt->add_option("--init-seed", pt.init_seed, "initialization seed");
  c_pt->add_option("--epochs", pt.epochs, "override epochs");
  c_pt->add_option("--threads", pt.threads, "worker threads");

  FinetuneArgs ft;
  auto* c_ft = app.add_subcommand("finetune", "Stage-2 adapter fine-tuning");
  c_ft->add_option("--data", ft.data, "gen-world directory")->required();
  c_ft->add_option("--backbone", ft.backbone, "Stage-1 checkpoint manifest")->required();
  c_ft->add_option("--out", ft.out, "output directory")->required();
  c_ft->add_option("--train-config", ft.train_config, "JSON training config");
  c_ft->add_option("--epochs", ft.epochs, "override epochs");
  c_ft->add_option("--threads", ft.threads, "worker threads");
  c_ft->add_option("--max-steps", ft.max_steps, "stop after this many steps");

  SampleArgs sa;
  auto* c_sa = app.add_subcommand("sample", "sample target embeddings for a benchmark");
  c_sa->add_option("--data", sa.data, "gen-world directory")->required();
  c_sa->add_option("--benchmark", sa.benchmark, "benchmark directory")->required();
  c_sa->add_option("--out", sa.out, "output samples manifest")->required();
  c_sa->add_option("--backbone", sa.backbone, "Stage-1 checkpoint");
  c_sa->add_option("--adapter", sa.adapter, "Stage-2 adapter checkpoint");
  c_sa->add_option("--variant", sa.variant, "A | B | C");
  c_sa->add_option("--trace", sa.trace, "JSON-lines trace of the first query");
  c_sa->add_flag("--use-edit-text", sa.use_edit_text, "condition on the edit text");
  c_sa->add_option("--threads", sa.threads, "worker threads");
  sa.flags.add(c_sa);

  RetrieveArgs ra;
  auto* c_ra = app.add_subcommand("retrieve", "rank the gallery for each query");
  c_ra->add_option("--data", ra.data, "gen-world directory")->required();
  c_ra->add_option("--benchmark", ra.benchmark, "benchmark directory")->required();
  c_ra->add_option("--samples", ra.samples, "samples manifest (omit for the fused query)");
  c_ra->add_option("--out", ra.out, "results JSON")->required();
  c_ra->add_option("--k", ra.k, "keep top-k (default: all)");

  EvalArgs ea;
  auto* c_ea = app.add_subcommand("eval", "metric report for samples or results");
  c_ea->add_option("--data", ea.data, "gen-world directory")->required();
  c_ea->add_option("--benchmark", ea.benchmark, "benchmark directory")->required();
  c_ea->add_option("--samples", ea.samples, "samples manifest (omit for the fused query)");
  c_ea->add_option("--results", ea.results, "results JSON from retrieve");
  c_ea->add_option("--out", ea.out, "report JSON");
  c_ea->add_option("--name", ea.name, "row label");

  AblateArgs ab;
  auto* c_ab = app.add_subcommand("ablate", "variants A/B/C over benchmarks");
  c_ab->add_option("--data", ab.data, "gen-world directory")->required();
  c_ab->add_option("--backbone", ab.backbone, "Stage-1 checkpoint");
  c_ab->add_option("--adapter", ab.adapter, "Stage-2 adapter checkpoint");
  c_ab->add_option("--benchmark", ab.benchmarks, "benchmark directories (default: all in --data)");
  c_ab->add_option("--variants", ab.variants, "subset of A B C");
  c_ab->add_option("--out", ab.out, "output directory");
  c_ab->add_flag("--use-edit-text", ab.use_edit_text, "condition on the edit text");
  c_ab->add_option("--threads", ab.threads, "worker threads");
  ab.flags.add(c_ab);

  SweepArgs sw;
  auto* c_sw = app.add_subcommand("sweep", "guidance/delta and step-count grids");
  c_sw->add_option("--data", sw.data, "gen-world directory")->required();
  c_sw->add_option("--backbone", sw.backbone, "Stage-1 checkpoint")->required();
  c_sw->add_option("--adapter", sw.adapter, "Stage-2 adapter checkpoint")->required();
  c_sw->add_option("--benchmark", sw.benchmark, "benchmark directory")->required();
  c_sw->add_option("--out", sw.out, "output directory")->required();
  c_sw->add_option("--metric", sw.metric, "metric column");
  c_sw->add_option("--gammas", sw.guidance, "guidance grid");
  c_sw->add_option("--deltas", sw.delta, "delta grid");
  c_sw->add_option("--step-grid", sw.steps, "solver step grid");
  c_sw->add_option("--threads", sw.threads, "worker threads");
  sw.flags.add(c_sw);

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "finite-difference check of every parameter group");
  c_gc->add_option("--dit-config", gc.dit_config, "JSON model config");
  c_gc->add_option("--directions", gc.directions, "random directions per group");
  c_gc->add_option("--step", gc.step, "finite-difference step");
  c_gc->add_option("--threshold", gc.threshold, "max relative error");
  c_gc->add_option("--seed", gc.seed, "seed");
  c_gc->add_flag("--per-group", gc.per_group, "print every group's error");

  std::string inspect_path;
  auto* c_in = app.add_subcommand("inspect", "print an artifact header");
  c_in->add_option("path", inspect_path, "manifest path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*c_gw) return cmd_gen_world(gw);
    if (*c_pt) return cmd_pretrain(pt);
    if (*c_ft) return cmd_finetune(ft);
    if (*c_sa) return cmd_sample(sa);
    if (*c_ra) return cmd_retrieve(ra);
    if (*c_ea) return cmd_eval(ea);
    if (*c_ab) return cmd_ablate(ab);
    if (*c_sw) return cmd_sweep(sw);
    if (*c_gc) return cmd_gradcheck(gc);
    if (*c_in) return cmd_inspect(inspect_path);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}
