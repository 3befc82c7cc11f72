#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusiondiff/dit.hpp"
#include "fusiondiff/retrieval.hpp"
#include "fusiondiff/sampler.hpp"
#include "fusiondiff/schedule.hpp"
#include "fusiondiff/synth_world.hpp"
#include "fusiondiff/trainer.hpp"

namespace fusiondiff {

// ---------------------------------------------------------------------------
// checkpoints

// Hash of every non-adapter tensor at float32 precision.
uint64_t backbone_hash(const ParamStore& params);

struct Checkpoint {
  DitConfig dit;
  ScheduleSpec schedule;
  nlohmann::json meta;  // header as stored
  ParamStore params;
};

// Backbone tensors only. The header records the model and schedule, training
// step, RNG state, seed, tool version and config hash.
void save_backbone(const std::filesystem::path& manifest, const Denoiser& model, const ScheduleSpec& schedule,
                   long step, uint64_t seed, const nlohmann::json& train_config);
Checkpoint load_backbone(const std::filesystem::path& manifest);

// Adapter tensors only, stamped with the hash of the backbone they extend.
void save_adapter(const std::filesystem::path& manifest, const Denoiser& model, const ScheduleSpec& schedule,
                  long step, uint64_t seed, const nlohmann::json& train_config);
// Attaches the stored adapter to `model`; a backbone hash mismatch is a usage error.
void load_adapter(const std::filesystem::path& manifest, Denoiser& model);

// Header of any fusiondiff artifact.
nlohmann::json read_header(const std::filesystem::path& manifest);

// ---------------------------------------------------------------------------
// ablation variants

enum class Variant { A, B, C };
std::string variant_name(Variant v);
Variant parse_variant(const std::string& s);

struct VariantOptions {
  SampleConfig sample;
  bool use_edit_text = false;  // condition on the edit text instead of the target description
  int threads = 1;
};

// Query embeddings a variant retrieves with, one per benchmark query. A needs
// no model; B needs `backbone`; C needs `composed` (with adapter).
std::vector<Vec> variant_queries(Variant v, const World& world, const Benchmark& bench, const Denoiser* backbone,
                                 const Denoiser* composed, const DiffusionSchedule* schedule,
                                 const VariantOptions& opt);

MetricReport run_variant(Variant v, const World& world, const Benchmark& bench, const Denoiser* backbone,
                         const Denoiser* composed, const DiffusionSchedule* schedule, const VariantOptions& opt,
                         const MetricKs& ks = {});

// ---------------------------------------------------------------------------
// end-to-end desk pipeline (gen-world -> pretrain -> finetune -> ablate)

struct PipelineConfig {
  WorldConfig world;
  ScheduleSpec schedule;
  DitConfig dit;
  TrainConfig stage1 = TrainConfig::stage1_defaults();
  TrainConfig stage2 = TrainConfig::stage2_defaults();
  int n_pairs = 20000;
  int n_triplets = 2000;
  uint64_t data_seed = 11;
  BenchmarkConfig benchmark;
  std::vector<uint64_t> benchmark_seeds{101, 102, 103, 104, 105};
  VariantOptions variant;
  uint64_t init_seed = 7;
  long stage2_max_steps = -1;

  void validate() const;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);

struct PipelineResult {
  std::optional<Denoiser> backbone;  // Stage-1 model
  std::optional<Denoiser> composed;  // Stage-2 model (backbone + adapter)
  std::vector<TrainLogEntry> stage1_log, stage2_log;
  std::vector<std::vector<MetricReport>> per_seed;  // [seed][A, B, C]
  std::vector<MetricReport> mean;                    // [A, B, C]
  nlohmann::json metrics_json() const;
};

using ProgressFn = std::function<void(const std::string&)>;

PipelineResult run_pipeline(const PipelineConfig& cfg, const ProgressFn& progress = {});

}  // namespace fusiondiff
