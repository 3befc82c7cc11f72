#include "fusiondiff/synth_world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <unordered_set>

#include "fusiondiff/blob_store.hpp"
#include "fusiondiff/errors.hpp"

namespace fusiondiff {

namespace {

// Stream tags keep every generator on its own counter-based stream.
enum StreamTag : uint64_t {
  kTagSem = 1,
  kTagTxt,
  kTagTok,
  kTagPair,
  kTagTriplet,
  kTagBenchQuery,
  kTagBenchFill,
  kTagSceneId,
};

Mat gaussian_matrix(int rows, int cols, uint64_t seed, uint64_t tag) {
  Rng rng(seed, {tag});
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = rng.normal();
  return m;
}

Vec normalized(const Vec& v) {
  double n = v.norm();
  if (n == 0.0) throw NumericError("cannot normalize a zero vector");
  return v / n;
}

}  // namespace

void WorldConfig::validate() const {
  if (attributes < 2) throw ConfigError("world: need at least 2 attributes");
  if (values < 2) throw ConfigError("world: need at least 2 values per attribute");
  if (d_vl < 1 || text_dim < 1) throw ConfigError("world: embedding widths must be positive");
  if (kappa < 0.0) throw ConfigError("world: kappa must be non-negative");
  if (rho < 0.0 || rho > 1.0) throw ConfigError("world: rho must lie in [0, 1]");
  if (short_caption_fraction < 0.0 || short_caption_fraction > 1.0)
    throw ConfigError("world: short_caption_fraction must lie in [0, 1]");
}

void to_json(nlohmann::json& j, const WorldConfig& c) {
  j = {{"attributes", c.attributes}, {"values", c.values},       {"d_vl", c.d_vl},
       {"text_dim", c.text_dim},     {"kappa", c.kappa},         {"rho", c.rho},
       {"short_caption_fraction", c.short_caption_fraction},     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, WorldConfig& c) {
  WorldConfig d;
  c.attributes = j.value("attributes", d.attributes);
  c.values = j.value("values", d.values);
  c.d_vl = j.value("d_vl", d.d_vl);
  c.text_dim = j.value("text_dim", d.text_dim);
  c.kappa = j.value("kappa", d.kappa);
  c.rho = j.value("rho", d.rho);
  c.short_caption_fraction = j.value("short_caption_fraction", d.short_caption_fraction);
  c.seed = j.value("seed", d.seed);
}

void BenchmarkConfig::validate(const WorldConfig& w) const {
  if (n_queries < 1) throw ConfigError("benchmark: need at least one query");
  if (subset_size < 2) throw ConfigError("benchmark: subset_size must be >= 2");
  if (gallery_size < subset_size) throw ConfigError("benchmark: gallery_size must be >= subset_size");
  if (visual_negatives < 0 || text_negatives < 0) throw ConfigError("benchmark: negative counts must be >= 0");
  if (pattern_size < 2 || pattern_size > w.attributes)
    throw ConfigError("benchmark: pattern_size must lie in [2, attributes]");
}

void to_json(nlohmann::json& j, const BenchmarkConfig& c) {
  j = {{"n_queries", c.n_queries},         {"gallery_size", c.gallery_size},     {"subset_size", c.subset_size},
       {"visual_negatives", c.visual_negatives}, {"text_negatives", c.text_negatives}, {"pattern_size", c.pattern_size}};
}

void from_json(const nlohmann::json& j, BenchmarkConfig& c) {
  BenchmarkConfig d;
  c.n_queries = j.value("n_queries", d.n_queries);
  c.gallery_size = j.value("gallery_size", d.gallery_size);
  c.subset_size = j.value("subset_size", d.subset_size);
  c.visual_negatives = j.value("visual_negatives", d.visual_negatives);
  c.text_negatives = j.value("text_negatives", d.text_negatives);
  c.pattern_size = j.value("pattern_size", d.pattern_size);
}

World::World(WorldConfig config) : config_(config) {
  config_.validate();
  const int av = config_.attributes * config_.values;
  p_sem_ = gaussian_matrix(config_.d_vl, av, config_.seed, kTagSem);
  p_txt_ = gaussian_matrix(config_.d_vl, config_.vocab_size(), config_.seed, kTagTxt);
  e_tok_ = gaussian_matrix(config_.vocab_size(), config_.text_dim, config_.seed, kTagTok);
  for (int j = 0; j < p_sem_.cols(); ++j) p_sem_.col(j).normalize();
  for (int j = 0; j < p_txt_.cols(); ++j) p_txt_.col(j).normalize();
  for (int i = 0; i < e_tok_.rows(); ++i) e_tok_.row(i).normalize();
}

void World::check_scene(const SceneSpec& s) const {
  if (static_cast<int>(s.attrs.size()) != config_.attributes) throw ConfigError("scene has wrong attribute count");
  for (int v : s.attrs)
    if (v < 0 || v >= config_.values) throw InputError("scene attribute value out of range");
}

void World::check_tokens(const std::vector<int>& tokens) const {
  for (int t : tokens)
    if (t < 0 || t >= config_.vocab_size()) throw InputError("token id " + std::to_string(t) + " out of vocabulary");
}

SceneSpec World::make_scene(std::vector<int> attrs) const {
  SceneSpec s{std::move(attrs), 0};
  check_scene(s);
  uint64_t h = stream_key(config_.seed, {kTagSceneId});
  for (int v : s.attrs) h = splitmix64(h ^ static_cast<uint64_t>(v + 1));
  s.id = h;
  return s;
}

SceneSpec World::random_scene(Rng& rng) const {
  std::vector<int> attrs(config_.attributes);
  for (int& v : attrs) v = rng.uniform_int(0, config_.values - 1);
  return make_scene(std::move(attrs));
}

EditSpec World::make_edit(int attr_index, int new_value) const {
  if (attr_index < 0 || attr_index >= config_.attributes) throw InputError("edit attribute out of range");
  if (new_value < 0 || new_value >= config_.values) throw InputError("edit value out of range");
  return EditSpec{attr_index, new_value,
                  {WorldConfig::kEditToken, attr_token(attr_index), value_token(attr_index, new_value)}};
}

SceneSpec World::apply(const SceneSpec& scene, const EditSpec& edit) const {
  auto attrs = scene.attrs;
  attrs.at(edit.attr_index) = edit.new_value;
  return make_scene(std::move(attrs));
}

TextSpec World::caption(const SceneSpec& scene, const std::vector<int>& mentioned) const {
  check_scene(scene);
  TextSpec t{{WorldConfig::kCaptionToken}, TextKind::caption};
  auto emit = [&](int a) {
    t.tokens.push_back(attr_token(a));
    t.tokens.push_back(value_token(a, scene.attrs[a]));
  };
  if (mentioned.empty()) {
    for (int a = 0; a < config_.attributes; ++a) emit(a);
  } else {
    std::set<int> sorted(mentioned.begin(), mentioned.end());
    for (int a : sorted) emit(a);
  }
  return t;
}

TextSpec World::edit_text(const EditSpec& edit) const { return TextSpec{edit.tokens, TextKind::edit}; }

TextSpec World::target_description(const SceneSpec& target, const EditSpec& edit, Rng& rng) const {
  check_scene(target);
  TextSpec t{{WorldConfig::kDescribeToken, attr_token(edit.attr_index), value_token(edit.attr_index, edit.new_value)},
             TextKind::target_description};
  for (int a = 0; a < config_.attributes; ++a) {
    if (a == edit.attr_index) continue;
    if (rng.bernoulli(config_.rho)) {
      t.tokens.push_back(attr_token(a));
      t.tokens.push_back(value_token(a, target.attrs[a]));
    }
  }
  return t;
}

Vec World::semantic_vector(const SceneSpec& s) const {
  check_scene(s);
  Vec v = Vec::Zero(config_.d_vl);
  for (int a = 0; a < config_.attributes; ++a) v += p_sem_.col(a * config_.values + s.attrs[a]);
  return v;
}

Vec World::text_vector(const std::vector<int>& tokens) const {
  check_tokens(tokens);
  Vec v = Vec::Zero(config_.d_vl);
  for (int t : tokens) v += p_txt_.col(t);
  return v;
}

Embedding World::oracle_image(const SceneSpec& scene) const { return {normalized(semantic_vector(scene))}; }

Embedding World::oracle_fused(const SceneSpec& scene, const TextSpec& text) const {
  return {normalized(semantic_vector(scene) + config_.kappa * text_vector(text.tokens))};
}

Embedding World::oracle_query(const SceneSpec& ref, const EditSpec& edit) const {
  return {normalized(semantic_vector(ref) + config_.kappa * text_vector(edit.tokens))};
}

TextCondition World::encode_text(const TextSpec& text) const {
  if (text.tokens.empty()) throw InputError("encode_text: empty token sequence");
  check_tokens(text.tokens);
  TextCondition c;
  c.token_embs.resize(static_cast<Eigen::Index>(text.tokens.size()), config_.text_dim);
  for (size_t i = 0; i < text.tokens.size(); ++i) c.token_embs.row(static_cast<Eigen::Index>(i)) = e_tok_.row(text.tokens[i]);
  c.pooled = normalized(c.token_embs.colwise().mean().transpose());
  return c;
}

std::vector<PairRecord> World::gen_pair_corpus(int n, uint64_t seed) const {
  std::vector<PairRecord> out;
  out.reserve(static_cast<size_t>(std::max(n, 0)));
  for (int i = 0; i < n; ++i) {
    Rng rng(seed, {kTagPair, static_cast<uint64_t>(i)});
    PairRecord r;
    r.scene = random_scene(rng);
    if (rng.bernoulli(config_.short_caption_fraction)) {
      // Short caption: a random proper, nonempty subset of attributes.
      int k = rng.uniform_int(1, config_.attributes - 1);
      std::vector<int> order(config_.attributes);
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng.engine());
      order.resize(k);
      r.caption = caption(r.scene, order);
    } else {
      r.caption = caption(r.scene);
    }
    r.z0 = oracle_fused(r.scene, r.caption);
    r.cond = encode_text(r.caption);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<TripletRecord> World::gen_triplets(int n, uint64_t seed) const {
  std::vector<TripletRecord> out;
  out.reserve(static_cast<size_t>(std::max(n, 0)));
  for (int i = 0; i < n; ++i) {
    Rng rng(seed, {kTagTriplet, static_cast<uint64_t>(i)});
    TripletRecord t;
    t.ref = random_scene(rng);
    // Attribute 0 is the shared concept and is never edited.
    int attr = rng.uniform_int(1, config_.attributes - 1);
    int value = rng.uniform_int(0, config_.values - 2);
    if (value >= t.ref.attrs[attr]) ++value;
    t.edit = make_edit(attr, value);
    t.target = apply(t.ref, t.edit);
    t.target_caption = caption(t.target);
    t.z_ref_delta = oracle_query(t.ref, t.edit);
    t.z_target = oracle_fused(t.target, t.target_caption);
    t.c_delta = encode_text(edit_text(t.edit));
    out.push_back(std::move(t));
  }
  return out;
}

Benchmark World::gen_benchmark(const BenchmarkConfig& cfg, uint64_t seed) const {
  cfg.validate(config_);
  const int A = config_.attributes;
  const int V = config_.values;

  Benchmark bench;
  bench.config = cfg;
  bench.seed = seed;

  std::vector<SceneSpec> gallery;
  std::unordered_set<uint64_t> in_gallery;
  auto add = [&](const SceneSpec& s) {
    if (in_gallery.insert(s.id).second) gallery.push_back(s);
  };

  std::vector<std::vector<uint64_t>> visual_ids(cfg.n_queries), text_ids(cfg.n_queries);
  for (int q = 0; q < cfg.n_queries; ++q) {
    Rng rng(seed, {kTagBenchQuery, static_cast<uint64_t>(q)});
    BenchmarkQuery bq;
    bq.query_id = static_cast<uint64_t>(q);
    bq.ref = random_scene(rng);
    int attr = rng.uniform_int(1, A - 1);
    int value = rng.uniform_int(0, V - 2);
    if (value >= bq.ref.attrs[attr]) ++value;
    bq.edit = make_edit(attr, value);
    bq.target = apply(bq.ref, bq.edit);
    bq.description = target_description(bq.target, bq.edit, rng);
    bq.z_query = oracle_query(bq.ref, bq.edit);
    add(bq.target);

    // Look-alikes of the reference: one attribute changed, but not the requested change.
    for (int k = 0; k < cfg.visual_negatives; ++k) {
      for (int tries = 0; tries < 64; ++tries) {
        int a = rng.uniform_int(1, A - 1);
        int v = rng.uniform_int(0, V - 2);
        if (v >= bq.ref.attrs[a]) ++v;
        if (a == attr && v == value) continue;
        auto attrs = bq.ref.attrs;
        attrs[a] = v;
        SceneSpec s = make_scene(attrs);
        if (s.id == bq.target.id) continue;
        add(s);
        visual_ids[q].push_back(s.id);
        break;
      }
    }

    // Scenes that satisfy everything the description says, free elsewhere.
    std::vector<bool> described(A, false);
    for (size_t i = 1; i + 1 < bq.description.tokens.size(); i += 2)
      described[bq.description.tokens[i] - WorldConfig::kSpecialTokens] = true;
    for (int k = 0; k < cfg.text_negatives; ++k) {
      for (int tries = 0; tries < 64; ++tries) {
        auto attrs = bq.target.attrs;
        for (int a = 0; a < A; ++a)
          if (!described[a]) attrs[a] = rng.uniform_int(0, V - 1);
        SceneSpec s = make_scene(attrs);
        if (s.id == bq.target.id) continue;
        add(s);
        text_ids[q].push_back(s.id);
        break;
      }
    }
    bench.queries.push_back(std::move(bq));
  }

  if (static_cast<int>(gallery.size()) > cfg.gallery_size)
    throw ConfigError("benchmark: gallery_size " + std::to_string(cfg.gallery_size) + " cannot hold the " +
                      std::to_string(gallery.size()) + " required scenes");
  for (uint64_t i = 0; static_cast<int>(gallery.size()) < cfg.gallery_size; ++i) {
    Rng rng(seed, {kTagBenchFill, i});
    add(random_scene(rng));
  }

  for (int q = 0; q < cfg.n_queries; ++q) {
    auto& bq = bench.queries[q];
    Rng rng(seed, {kTagBenchQuery, static_cast<uint64_t>(q), 1});
    bq.subset = {bq.target.id};
    std::vector<uint64_t> pool = visual_ids[q];
    std::shuffle(pool.begin(), pool.end(), rng.engine());
    std::vector<uint64_t> extra = text_ids[q];
    std::shuffle(extra.begin(), extra.end(), rng.engine());
    pool.insert(pool.end(), extra.begin(), extra.end());
    for (uint64_t id : pool) {
      if (static_cast<int>(bq.subset.size()) >= cfg.subset_size) break;
      if (std::find(bq.subset.begin(), bq.subset.end(), id) == bq.subset.end()) bq.subset.push_back(id);
    }
    for (size_t i = 0; static_cast<int>(bq.subset.size()) < cfg.subset_size && i < gallery.size(); ++i) {
      uint64_t id = gallery[(q * 7919 + i) % gallery.size()].id;
      if (std::find(bq.subset.begin(), bq.subset.end(), id) == bq.subset.end()) bq.subset.push_back(id);
    }

    // Match pattern: shared concept, edited attribute, then unchanged attributes in index order.
    std::vector<int> pattern = {0, bq.edit.attr_index};
    for (int a = 1; a < A && static_cast<int>(pattern.size()) < cfg.pattern_size; ++a)
      if (a != bq.edit.attr_index) pattern.push_back(a);
    bq.targets = {bq.target.id};
    for (const auto& s : gallery) {
      if (s.id == bq.target.id) continue;
      bool match = std::all_of(pattern.begin(), pattern.end(), [&](int a) { return s.attrs[a] == bq.target.attrs[a]; });
      if (match) bq.targets.push_back(s.id);
    }
  }

  bench.gallery.ids.reserve(gallery.size());
  bench.gallery.embs.resize(static_cast<Eigen::Index>(gallery.size()), config_.d_vl);
  for (size_t i = 0; i < gallery.size(); ++i) {
    bench.gallery.ids.push_back(gallery[i].id);
    bench.gallery.embs.row(static_cast<Eigen::Index>(i)) = oracle_image(gallery[i]).values.transpose();
  }
  return bench;
}

// ---------------------------------------------------------------------------
// persistence

namespace {

nlohmann::json scene_json(const SceneSpec& s) { return {{"attrs", s.attrs}, {"id", s.id}}; }

SceneSpec scene_from_json(const World& w, const nlohmann::json& j) {
  SceneSpec s = w.make_scene(j.at("attrs").get<std::vector<int>>());
  if (j.contains("id") && j["id"].get<uint64_t>() != s.id)
    throw ConfigError("scene id does not match this world's seed");
  return s;
}

void put_rows(BlobWriter& bw, const std::string& name, const std::vector<const Vec*>& rows, int width) {
  std::vector<double> flat;
  flat.reserve(rows.size() * static_cast<size_t>(width));
  for (const Vec* r : rows) flat.insert(flat.end(), r->data(), r->data() + r->size());
  bw.add(name, {static_cast<int>(rows.size()), width}, flat);
}

Vec row_of(const Tensor& t, size_t i) {
  Vec v(t.cols());
  for (int j = 0; j < t.cols(); ++j) v[j] = t.data[i * static_cast<size_t>(t.cols()) + static_cast<size_t>(j)];
  return v;
}

void check_world(const World& w, const nlohmann::json& meta) {
  if (meta.contains("world") && json_hash(meta["world"]) != json_hash(nlohmann::json(w.config())))
    throw ConfigError("artifact was generated with a different world configuration");
}

}  // namespace

void save_pair_corpus(const std::filesystem::path& manifest, const World& world, const std::vector<PairRecord>& pairs,
                      const nlohmann::json& meta) {
  nlohmann::json m = meta;
  m["kind"] = "pair_corpus";
  m["world"] = world.config();
  m["records"] = nlohmann::json::array();
  std::vector<const Vec*> rows;
  for (const auto& p : pairs) {
    m["records"].push_back({{"scene", scene_json(p.scene)}, {"caption", p.caption.tokens}});
    rows.push_back(&p.z0.values);
  }
  BlobWriter bw;
  if (!pairs.empty()) put_rows(bw, "z0", rows, world.config().d_vl);
  bw.write(manifest, m);
}

std::vector<PairRecord> load_pair_corpus(const std::filesystem::path& manifest, const World& world) {
  auto f = BlobFile::read(manifest);
  if (f.meta().value("kind", "") != "pair_corpus") throw UsageError(manifest.string() + " is not a pair corpus");
  check_world(world, f.meta());
  const auto& recs = f.meta()["records"];
  std::vector<PairRecord> out;
  if (recs.empty()) return out;
  Tensor z = f.tensor("z0", {static_cast<int>(recs.size()), world.config().d_vl});
  for (size_t i = 0; i < recs.size(); ++i) {
    PairRecord p;
    p.scene = scene_from_json(world, recs[i]["scene"]);
    p.caption = TextSpec{recs[i]["caption"].get<std::vector<int>>(), TextKind::caption};
    p.z0.values = row_of(z, i);
    p.cond = world.encode_text(p.caption);
    out.push_back(std::move(p));
  }
  return out;
}

void save_triplets(const std::filesystem::path& manifest, const World& world, const std::vector<TripletRecord>& triplets,
                   const nlohmann::json& meta) {
  nlohmann::json m = meta;
  m["kind"] = "triplets";
  m["world"] = world.config();
  m["records"] = nlohmann::json::array();
  std::vector<const Vec*> zq, zt;
  for (const auto& t : triplets) {
    m["records"].push_back({{"ref", scene_json(t.ref)},
                            {"edit", {{"attr", t.edit.attr_index}, {"value", t.edit.new_value}}},
                            {"target", scene_json(t.target)},
                            {"target_caption", t.target_caption.tokens}});
    zq.push_back(&t.z_ref_delta.values);
    zt.push_back(&t.z_target.values);
  }
  BlobWriter bw;
  if (!triplets.empty()) {
    put_rows(bw, "z_ref_delta", zq, world.config().d_vl);
    put_rows(bw, "z_target", zt, world.config().d_vl);
  }
  bw.write(manifest, m);
}

std::vector<TripletRecord> load_triplets(const std::filesystem::path& manifest, const World& world) {
  auto f = BlobFile::read(manifest);
  if (f.meta().value("kind", "") != "triplets") throw UsageError(manifest.string() + " is not a triplet set");
  check_world(world, f.meta());
  const auto& recs = f.meta()["records"];
  std::vector<TripletRecord> out;
  if (recs.empty()) return out;
  const int n = static_cast<int>(recs.size());
  Tensor zq = f.tensor("z_ref_delta", {n, world.config().d_vl});
  Tensor zt = f.tensor("z_target", {n, world.config().d_vl});
  for (size_t i = 0; i < recs.size(); ++i) {
    TripletRecord t;
    t.ref = scene_from_json(world, recs[i]["ref"]);
    t.edit = world.make_edit(recs[i]["edit"]["attr"], recs[i]["edit"]["value"]);
    t.target = scene_from_json(world, recs[i]["target"]);
    if (t.target.attrs != world.apply(t.ref, t.edit).attrs) throw ConfigError("triplet target does not match its edit");
    t.target_caption = TextSpec{recs[i]["target_caption"].get<std::vector<int>>(), TextKind::caption};
    t.z_ref_delta.values = row_of(zq, i);
    t.z_target.values = row_of(zt, i);
    t.c_delta = world.encode_text(world.edit_text(t.edit));
    out.push_back(std::move(t));
  }
  return out;
}

void save_benchmark(const std::filesystem::path& dir, const World& world, const Benchmark& bench, const nlohmann::json& meta) {
  nlohmann::json m = meta;
  m["kind"] = "benchmark";
  m["world"] = world.config();
  m["benchmark"] = bench.config;
  m["benchmark_seed"] = bench.seed;
  m["queries"] = nlohmann::json::array();
  std::vector<const Vec*> zq;
  for (const auto& q : bench.queries) {
    m["queries"].push_back({{"query_id", q.query_id},
                            {"ref", scene_json(q.ref)},
                            {"edit", {{"attr", q.edit.attr_index}, {"value", q.edit.new_value}}},
                            {"target", scene_json(q.target)},
                            {"description", q.description.tokens},
                            {"subset", q.subset},
                            {"targets", q.targets}});
    zq.push_back(&q.z_query.values);
  }
  BlobWriter bw;
  put_rows(bw, "z_query", zq, world.config().d_vl);
  bw.write(dir / "benchmark.json", m);

  nlohmann::json gm = meta;
  gm["kind"] = "gallery";
  gm["world"] = world.config();
  bench.gallery.save(dir / "gallery.json", gm);
}

Benchmark load_benchmark(const std::filesystem::path& dir, const World& world) {
  auto f = BlobFile::read(dir / "benchmark.json");
  if (f.meta().value("kind", "") != "benchmark") throw UsageError((dir / "benchmark.json").string() + " is not a benchmark");
  check_world(world, f.meta());
  Benchmark b;
  b.config = f.meta()["benchmark"].get<BenchmarkConfig>();
  b.seed = f.meta()["benchmark_seed"];
  const auto& qs = f.meta()["queries"];
  Tensor zq = f.tensor("z_query", {static_cast<int>(qs.size()), world.config().d_vl});
  for (size_t i = 0; i < qs.size(); ++i) {
    BenchmarkQuery q;
    q.query_id = qs[i]["query_id"];
    q.ref = scene_from_json(world, qs[i]["ref"]);
    q.edit = world.make_edit(qs[i]["edit"]["attr"], qs[i]["edit"]["value"]);
    q.target = scene_from_json(world, qs[i]["target"]);
    q.description = TextSpec{qs[i]["description"].get<std::vector<int>>(), TextKind::target_description};
    q.z_query.values = row_of(zq, i);
    q.subset = qs[i]["subset"].get<std::vector<uint64_t>>();
    q.targets = qs[i]["targets"].get<std::vector<uint64_t>>();
    b.queries.push_back(std::move(q));
  }
  b.gallery = GalleryIndex::load(dir / "gallery.json");
  return b;
}

WorldConfig load_world_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open world config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("malformed world config " + path.string() + ": " + e.what());
  }
  WorldConfig c = j.contains("world") ? j["world"].get<WorldConfig>() : j.get<WorldConfig>();
  c.validate();
  return c;
}

}  // namespace fusiondiff
