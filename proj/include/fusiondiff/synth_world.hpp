#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <json.hpp>

#include "fusiondiff/gallery.hpp"
#include "fusiondiff/linalg.hpp"
#include "fusiondiff/rng.hpp"

namespace fusiondiff {

struct WorldConfig {
  int attributes = 6;   // A
  int values = 8;       // V
  int d_vl = 64;        // joint-space width
  int text_dim = 32;    // per-token condition width
  double kappa = 0.2;   // text mixing weight in fused/query embeddings
  double rho = 0.5;     // coverage of unchanged attributes in target descriptions
  double short_caption_fraction = 5.0 / 33.0;
  uint64_t seed = 1;

  // A*V value tokens + A attribute-name tokens + 4 special tokens.
  int vocab_size() const { return attributes * values + attributes + kSpecialTokens; }
  void validate() const;

  static constexpr int kSpecialTokens = 4;
  static constexpr int kCaptionToken = 0;
  static constexpr int kEditToken = 1;
  static constexpr int kDescribeToken = 2;
  static constexpr int kSepToken = 3;
};

void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);

struct SceneSpec {
  std::vector<int> attrs;
  uint64_t id = 0;
};

struct EditSpec {
  int attr_index = 0;
  int new_value = 0;
  std::vector<int> tokens;
};

enum class TextKind { caption, edit, target_description };

struct TextSpec {
  std::vector<int> tokens;
  TextKind kind = TextKind::caption;
};

// A unit vector in the joint space when produced by an oracle encoder.
struct Embedding {
  Vec values;
};

struct TextCondition {
  Mat token_embs;  // K x text_dim
  Vec pooled;      // text_dim, unit norm
};

struct PairRecord {
  SceneSpec scene;
  TextSpec caption;
  Embedding z0;
  TextCondition cond;
};

struct TripletRecord {
  SceneSpec ref;
  EditSpec edit;
  SceneSpec target;
  TextSpec target_caption;
  Embedding z_ref_delta;
  Embedding z_target;
  TextCondition c_delta;
};

struct BenchmarkConfig {
  int n_queries = 100;
  int gallery_size = 3000;
  int subset_size = 6;
  int visual_negatives = 16;  // reference look-alikes with a different single-attribute change
  int text_negatives = 8;      // scenes consistent with the target description only
  int pattern_size = 5;       // attributes a gallery scene must share with the target to count as a valid target
  void validate(const WorldConfig& w) const;
};

void to_json(nlohmann::json& j, const BenchmarkConfig& c);
void from_json(const nlohmann::json& j, BenchmarkConfig& c);

struct BenchmarkQuery {
  uint64_t query_id = 0;
  SceneSpec ref;
  EditSpec edit;
  SceneSpec target;
  TextSpec description;  // oracle stand-in for the inferred target description
  Embedding z_query;
  std::vector<uint64_t> subset;   // candidate ids for subset recall, includes target.id
  std::vector<uint64_t> targets;  // all valid targets in the gallery, includes target.id
};

struct Benchmark {
  BenchmarkConfig config;
  uint64_t seed = 0;
  std::vector<BenchmarkQuery> queries;
  GalleryIndex gallery;
};

// Deterministic stand-in for the frozen multimodal and text encoders, plus
// data generators. Every method is a pure function of (config, inputs).
class World {
 public:
  explicit World(WorldConfig config);

  const WorldConfig& config() const { return config_; }

  SceneSpec make_scene(std::vector<int> attrs) const;
  SceneSpec random_scene(Rng& rng) const;
  EditSpec make_edit(int attr_index, int new_value) const;
  SceneSpec apply(const SceneSpec& scene, const EditSpec& edit) const;

  int attr_token(int attr) const { return WorldConfig::kSpecialTokens + attr; }
  int value_token(int attr, int value) const {
    return WorldConfig::kSpecialTokens + config_.attributes + attr * config_.values + value;
  }

  // Mentions the listed attributes (all when omitted) in index order.
  TextSpec caption(const SceneSpec& scene, const std::vector<int>& mentioned = {}) const;
  // Edited attribute with its new value, then each unchanged attribute with probability rho.
  TextSpec target_description(const SceneSpec& target, const EditSpec& edit, Rng& rng) const;
  TextSpec edit_text(const EditSpec& edit) const;

  Embedding oracle_image(const SceneSpec& scene) const;
  Embedding oracle_fused(const SceneSpec& scene, const TextSpec& text) const;
  Embedding oracle_query(const SceneSpec& ref, const EditSpec& edit) const;
  TextCondition encode_text(const TextSpec& text) const;

  std::vector<PairRecord> gen_pair_corpus(int n, uint64_t seed) const;
  std::vector<TripletRecord> gen_triplets(int n, uint64_t seed) const;
  Benchmark gen_benchmark(const BenchmarkConfig& cfg, uint64_t seed) const;

  // Raw (unnormalized) pieces, exposed for oracles in tests.
  const Mat& semantic_projection() const { return p_sem_; }
  const Mat& text_projection() const { return p_txt_; }
  const Mat& token_table() const { return e_tok_; }

 private:
  void check_scene(const SceneSpec& s) const;
  void check_tokens(const std::vector<int>& tokens) const;
  Vec semantic_vector(const SceneSpec& s) const;
  Vec text_vector(const std::vector<int>& tokens) const;

  WorldConfig config_;
  Mat p_sem_;  // d_vl x (A*V)
  Mat p_txt_;  // d_vl x vocab
  Mat e_tok_;  // vocab x text_dim
};

// Persistence: JSON manifest + float32 blob (see blob_store.hpp).
void save_pair_corpus(const std::filesystem::path& manifest, const World& world, const std::vector<PairRecord>& pairs,
                      const nlohmann::json& meta);
std::vector<PairRecord> load_pair_corpus(const std::filesystem::path& manifest, const World& world);
void save_triplets(const std::filesystem::path& manifest, const World& world, const std::vector<TripletRecord>& triplets,
                   const nlohmann::json& meta);
std::vector<TripletRecord> load_triplets(const std::filesystem::path& manifest, const World& world);
// Writes <dir>/benchmark.json (+.bin) and <dir>/gallery.json (+.bin).
void save_benchmark(const std::filesystem::path& dir, const World& world, const Benchmark& bench, const nlohmann::json& meta);
Benchmark load_benchmark(const std::filesystem::path& dir, const World& world);

WorldConfig load_world_config(const std::filesystem::path& path);

}  // namespace fusiondiff
