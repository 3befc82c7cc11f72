#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>

#include "fusiondiff/errors.hpp"
#include "fusiondiff/rng.hpp"
#include "fusiondiff/synth_world.hpp"

using namespace fusiondiff;

namespace {

World default_world() { return World(WorldConfig{}); }

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("fusiondiff_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("vocabulary layout") {
  WorldConfig c;
  CHECK(c.vocab_size() == 6 * 8 + 6 + 4);
  World w(c);
  CHECK(w.semantic_projection().rows() == 64);
  CHECK(w.semantic_projection().cols() == 48);
  CHECK(w.text_projection().cols() == c.vocab_size());
  CHECK(w.token_table().rows() == c.vocab_size());
  CHECK(w.token_table().cols() == 32);
}

TEST_CASE("oracle outputs are unit norm") {
  World w = default_world();
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    SceneSpec s = w.random_scene(rng);
    CHECK(std::abs(w.oracle_image(s).values.norm() - 1.0) < 1e-12);
    CHECK(std::abs(w.oracle_fused(s, w.caption(s)).values.norm() - 1.0) < 1e-12);
    EditSpec e = w.make_edit(1 + i % 5, i % 8);
    CHECK(std::abs(w.oracle_query(s, e).values.norm() - 1.0) < 1e-12);
    CHECK(std::abs(w.encode_text(w.caption(s)).pooled.norm() - 1.0) < 1e-12);
  }
}

TEST_CASE("oracle fused embedding matches the mixing formula") {
  World w = default_world();
  SceneSpec s = w.make_scene({0, 1, 2, 3, 4, 5});
  TextSpec t = w.caption(s, {2});
  Vec sem = Vec::Zero(64);
  for (int a = 0; a < 6; ++a) sem += w.semantic_projection().col(a * 8 + s.attrs[a]);
  Vec txt = Vec::Zero(64);
  for (int tok : t.tokens) txt += w.text_projection().col(tok);
  Vec expect = (sem + 0.2 * txt).normalized();
  CHECK((w.oracle_fused(s, t).values - expect).lpNorm<Eigen::Infinity>() < 1e-14);
  CHECK((w.oracle_image(s).values - sem.normalized()).lpNorm<Eigen::Infinity>() < 1e-14);
}

TEST_CASE("encoder errors") {
  World w = default_world();
  CHECK_THROWS_AS(w.encode_text(TextSpec{}), InputError);
  CHECK_THROWS_AS(w.encode_text(TextSpec{{999}, TextKind::caption}), InputError);
  CHECK_THROWS_AS(w.make_scene({0, 1, 2}), ConfigError);
  CHECK_THROWS_AS(w.make_scene({0, 1, 2, 3, 4, 8}), InputError);
  CHECK_THROWS_AS(w.make_edit(6, 0), InputError);
}

TEST_CASE("pair corpus") {
  World w = default_world();
  CHECK(w.gen_pair_corpus(0, 1).empty());

  auto a = w.gen_pair_corpus(1000, 42);
  auto b = w.gen_pair_corpus(1000, 42);
  REQUIRE(a.size() == 1000);
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].scene.attrs == b[i].scene.attrs);
    CHECK(a[i].caption.tokens == b[i].caption.tokens);
    CHECK(a[i].z0.values == b[i].z0.values);
    CHECK(a[i].cond.token_embs == b[i].cond.token_embs);
  }

  auto big = w.gen_pair_corpus(10000, 3);
  int shorts = 0;
  for (const auto& r : big) {
    int mentioned = static_cast<int>(r.caption.tokens.size() - 1) / 2;
    CHECK(mentioned >= 1);
    if (mentioned < 6) ++shorts;
  }
  CHECK(std::abs(shorts / 10000.0 - 5.0 / 33.0) <= 0.02);
}

TEST_CASE("triplets satisfy the edit invariant") {
  World w = default_world();
  for (const auto& t : w.gen_triplets(500, 9)) {
    CHECK(t.target.attrs == w.apply(t.ref, t.edit).attrs);
    CHECK(t.edit.attr_index != 0);
    CHECK(t.ref.attrs[t.edit.attr_index] != t.edit.new_value);
    CHECK(w.apply(t.target, t.edit).id == t.target.id);
    CHECK(t.c_delta.token_embs.rows() == 3);
  }
}

TEST_CASE("fused and image embeddings of one scene are separated from other scenes") {
  World w = default_world();
  Rng rng(77);
  double same = 0.0, diff = 0.0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    SceneSpec s = w.random_scene(rng), o = w.random_scene(rng);
    Vec f = w.oracle_fused(s, w.caption(s)).values;
    same += f.dot(w.oracle_image(s).values);
    diff += f.dot(w.oracle_image(o).values);
  }
  same /= n;
  diff /= n;
  MESSAGE("same-scene cosine " << same << ", different-scene cosine " << diff);
  CHECK(same - diff >= 0.2);
  CHECK(same >= 0.9);
}

TEST_CASE("benchmark structure") {
  World w = default_world();
  BenchmarkConfig c;
  c.n_queries = 40;
  c.gallery_size = 1200;
  Benchmark b = w.gen_benchmark(c, 5);
  b.gallery.validate();
  CHECK(b.gallery.size() == 1200);
  for (const auto& q : b.queries) {
    CHECK(b.gallery.find(q.target.id) >= 0);
    CHECK(q.subset.size() == 6);
    CHECK(std::count(q.subset.begin(), q.subset.end(), q.target.id) == 1);
    CHECK(std::set<uint64_t>(q.subset.begin(), q.subset.end()).size() == q.subset.size());
    CHECK(q.targets.front() == q.target.id);
    CHECK(q.description.tokens.front() == WorldConfig::kDescribeToken);
    CHECK(q.description.tokens[2] == w.value_token(q.edit.attr_index, q.edit.new_value));
    for (uint64_t id : q.targets) CHECK(b.gallery.find(id) >= 0);
  }
  c.gallery_size = 100;
  CHECK_THROWS_AS(w.gen_benchmark(c, 5), ConfigError);
  c.subset_size = 1;
  CHECK_THROWS_AS(w.gen_benchmark(c, 5), ConfigError);
}

TEST_CASE("multi-target sets match an exhaustive enumeration") {
  World w = default_world();
  BenchmarkConfig c;
  c.n_queries = 30;
  c.gallery_size = 3000;
  c.pattern_size = 2;
  Benchmark b = w.gen_benchmark(c, 8);

  // Attribute vectors of the gallery, recovered by enumerating the scene universe.
  std::map<uint64_t, std::vector<int>> attrs_of;
  std::set<uint64_t> gallery_ids(b.gallery.ids.begin(), b.gallery.ids.end());
  std::vector<int> attrs(6, 0);
  for (int code = 0; code < 262144; ++code) {
    int x = code;
    for (int a = 5; a >= 0; --a) {
      attrs[a] = x % 8;
      x /= 8;
    }
    SceneSpec s = w.make_scene(attrs);
    if (gallery_ids.count(s.id)) attrs_of[s.id] = attrs;
  }
  REQUIRE(attrs_of.size() == b.gallery.size());

  double total = 0.0;
  for (const auto& q : b.queries) {
    std::set<uint64_t> expect;
    for (const auto& [id, at] : attrs_of)
      if (at[0] == q.target.attrs[0] && at[q.edit.attr_index] == q.target.attrs[q.edit.attr_index]) expect.insert(id);
    CHECK(std::set<uint64_t>(q.targets.begin(), q.targets.end()) == expect);
    total += static_cast<double>(q.targets.size());
  }
  CHECK(total / static_cast<double>(b.queries.size()) > 1.0);
}

TEST_CASE("subset of size two has chance level one half") {
  World w = default_world();
  BenchmarkConfig c;
  c.n_queries = 100;
  c.gallery_size = 3000;
  c.subset_size = 2;
  Benchmark b = w.gen_benchmark(c, 4);
  Rng rng(1);
  int hits = 0, trials = 0;
  for (int rep = 0; rep < 100; ++rep)
    for (const auto& q : b.queries) {
      REQUIRE(q.subset.size() == 2);
      // A random ranking puts either member first with equal probability.
      uint64_t first = q.subset[static_cast<size_t>(rng.uniform_int(0, 1))];
      hits += first == q.target.id;
      ++trials;
    }
  CHECK(std::abs(hits / static_cast<double>(trials) - 0.5) < 0.02);
}

TEST_CASE("persistence round trips") {
  World w = default_world();
  auto dir = temp_dir("world");
  auto pairs = w.gen_pair_corpus(20, 1);
  save_pair_corpus(dir / "pairs.json", w, pairs, {{"seed", 1}});
  auto pairs2 = load_pair_corpus(dir / "pairs.json", w);
  REQUIRE(pairs2.size() == pairs.size());
  for (size_t i = 0; i < pairs.size(); ++i) {
    CHECK(pairs2[i].scene.id == pairs[i].scene.id);
    CHECK(pairs2[i].caption.tokens == pairs[i].caption.tokens);
    CHECK((pairs2[i].z0.values - pairs[i].z0.values).lpNorm<Eigen::Infinity>() < 1e-7);
  }

  auto trip = w.gen_triplets(10, 2);
  save_triplets(dir / "trip.json", w, trip, {});
  auto trip2 = load_triplets(dir / "trip.json", w);
  REQUIRE(trip2.size() == trip.size());
  CHECK(trip2[3].edit.tokens == trip[3].edit.tokens);

  BenchmarkConfig c;
  c.n_queries = 5;
  c.gallery_size = 200;
  Benchmark b = w.gen_benchmark(c, 3);
  save_benchmark(dir / "bench", w, b, {});
  Benchmark b2 = load_benchmark(dir / "bench", w);
  CHECK(b2.gallery.ids == b.gallery.ids);
  CHECK(b2.queries[2].subset == b.queries[2].subset);
  CHECK(b2.queries[2].description.tokens == b.queries[2].description.tokens);

  WorldConfig other;
  other.seed = 99;
  CHECK_THROWS(load_pair_corpus(dir / "pairs.json", World(other)));
}
