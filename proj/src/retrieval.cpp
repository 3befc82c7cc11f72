#include "fusiondiff/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "fusiondiff/blob_store.hpp"
#include "fusiondiff/errors.hpp"
#include "fusiondiff/parallel.hpp"

namespace fusiondiff {

void GalleryIndex::validate(double tol) const {
  if (static_cast<size_t>(embs.rows()) != ids.size())
    throw InputError("gallery: " + std::to_string(embs.rows()) + " rows but " + std::to_string(ids.size()) + " ids");
  std::unordered_set<uint64_t> seen;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (!seen.insert(ids[i]).second) throw InputError("gallery: duplicate id " + std::to_string(ids[i]));
    double norm = embs.row(static_cast<Eigen::Index>(i)).norm();
    if (std::abs(norm - 1.0) > tol) throw InputError("gallery: row " + std::to_string(i) + " is not unit norm");
  }
}

long GalleryIndex::find(uint64_t id) const {
  auto it = std::find(ids.begin(), ids.end(), id);
  return it == ids.end() ? -1 : static_cast<long>(it - ids.begin());
}

void GalleryIndex::save(const std::filesystem::path& manifest, const nlohmann::json& meta) const {
  validate();
  nlohmann::json m = meta;
  m["kind"] = "gallery";
  m["ids"] = ids;
  BlobWriter bw;
  std::vector<double> flat(embs.data(), embs.data() + embs.size());
  bw.add("embs", {static_cast<int>(embs.rows()), static_cast<int>(embs.cols())}, flat);
  bw.write(manifest, m);
}

GalleryIndex GalleryIndex::load(const std::filesystem::path& manifest) {
  auto f = BlobFile::read(manifest);
  if (f.meta().value("kind", "") != "gallery") throw UsageError(manifest.string() + " is not a gallery");
  GalleryIndex g;
  g.ids = f.meta().at("ids").get<std::vector<uint64_t>>();
  Tensor t = f.tensor("embs");
  if (t.shape.size() != 2 || static_cast<size_t>(t.shape[0]) != g.ids.size())
    throw InputError(manifest.string() + ": embedding shape does not match id count");
  g.embs = Eigen::Map<const Mat>(t.data.data(), t.shape[0], t.shape[1]);
  // float32 storage: renormalize so rows are unit norm again in double.
  for (Eigen::Index i = 0; i < g.embs.rows(); ++i) g.embs.row(i).normalize();
  g.validate();
  return g;
}

QueryResult rank(const Vec& query, const GalleryIndex& gallery, int k, uint64_t query_id) {
  if (query.size() != gallery.embs.cols())
    throw InputError("rank: query length " + std::to_string(query.size()) + " != gallery width " +
                     std::to_string(gallery.embs.cols()));
  const double qn = query.norm();
  if (!(qn > 0.0)) throw InputError("rank: zero-norm query");
  if (!query.allFinite()) throw InputError("rank: non-finite query");
  Vec scores = gallery.embs * (query / qn);
  std::vector<size_t> order(gallery.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    double sa = scores[static_cast<Eigen::Index>(a)], sb = scores[static_cast<Eigen::Index>(b)];
    if (sa != sb) return sa > sb;
    return gallery.ids[a] < gallery.ids[b];
  });
  QueryResult r;
  r.query_id = query_id;
  size_t n = order.size();
  if (k != kAll) {
    if (k < 0) throw InputError("rank: k must be positive or ALL");
    if (static_cast<size_t>(k) < n) {
      n = static_cast<size_t>(k);
      r.complete = false;
    }
  }
  r.ids.reserve(n);
  r.scores.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    r.ids.push_back(gallery.ids[order[i]]);
    r.scores.push_back(scores[static_cast<Eigen::Index>(order[i])]);
  }
  return r;
}

std::vector<QueryResult> rank_all(const std::vector<Vec>& queries, const std::vector<uint64_t>& query_ids,
                                  const GalleryIndex& gallery, int threads) {
  if (queries.size() != query_ids.size()) throw InputError("rank_all: query/id count mismatch");
  std::vector<QueryResult> out(queries.size());
  parallel_for(static_cast<int>(queries.size()), threads, [&](int i) { out[i] = rank(queries[i], gallery, kAll, query_ids[i]); });
  return out;
}

int rank_of(const QueryResult& result, uint64_t id) {
  auto it = std::find(result.ids.begin(), result.ids.end(), id);
  return it == result.ids.end() ? 0 : static_cast<int>(it - result.ids.begin()) + 1;
}

namespace {

void check_k(int k) {
  if (k < 1) throw InputError("metric cutoff k must be >= 1");
}

void require_present(const QueryResult& r, uint64_t id) {
  if (r.complete && rank_of(r, id) == 0)
    throw InputError("truth id " + std::to_string(id) + " missing from gallery (query " + std::to_string(r.query_id) + ")");
}

}  // namespace

double recall_at_k(const std::vector<QueryResult>& results, const std::vector<uint64_t>& truth, int k) {
  check_k(k);
  if (results.size() != truth.size()) throw InputError("recall: result/truth count mismatch");
  if (results.empty()) throw InputError("recall: no queries");
  long hits = 0;
  for (size_t q = 0; q < results.size(); ++q) {
    require_present(results[q], truth[q]);
    int r = rank_of(results[q], truth[q]);
    if (r != 0 && r <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

double recall_subset_at_k(const std::vector<QueryResult>& results, const std::vector<std::vector<uint64_t>>& subsets,
                          const std::vector<uint64_t>& truth, int k) {
  check_k(k);
  if (results.size() != truth.size() || results.size() != subsets.size())
    throw InputError("recall_subset: result/subset/truth count mismatch");
  if (results.empty()) throw InputError("recall_subset: no queries");
  long hits = 0;
  for (size_t q = 0; q < results.size(); ++q) {
    const auto& sub = subsets[q];
    if (std::find(sub.begin(), sub.end(), truth[q]) == sub.end())
      throw InputError("recall_subset: subset of query " + std::to_string(results[q].query_id) + " lacks its target");
    for (uint64_t id : sub) require_present(results[q], id);
    std::unordered_set<uint64_t> members(sub.begin(), sub.end());
    int pos = 0;
    for (uint64_t id : results[q].ids) {
      if (!members.count(id)) continue;
      if (++pos > k) break;
      if (id == truth[q]) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

double average_precision_at_k(const QueryResult& result, const std::vector<uint64_t>& targets, int k) {
  check_k(k);
  if (targets.empty()) throw InputError("average precision: empty target set");
  for (uint64_t id : targets) require_present(result, id);
  std::unordered_set<uint64_t> t(targets.begin(), targets.end());
  double sum = 0.0;
  int hits = 0;
  const size_t n = std::min(result.ids.size(), static_cast<size_t>(k));
  for (size_t i = 0; i < n; ++i) {
    if (t.count(result.ids[i])) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
  }
  return sum / static_cast<double>(std::min<size_t>(static_cast<size_t>(k), t.size()));
}

double map_at_k(const std::vector<QueryResult>& results, const std::vector<std::vector<uint64_t>>& targets, int k) {
  if (results.size() != targets.size()) throw InputError("map: result/target count mismatch");
  if (results.empty()) throw InputError("map: no queries");
  double sum = 0.0;
  for (size_t q = 0; q < results.size(); ++q) sum += average_precision_at_k(results[q], targets[q], k);
  return sum / static_cast<double>(results.size());
}

double MetricReport::get(const std::string& name) const {
  for (const auto& [n, v] : metrics)
    if (n == name) return v;
  throw InputError("metric report has no metric " + name);
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json agg = nlohmann::json::object();
  auto names = nlohmann::json::array();
  for (const auto& [n, v] : metrics) {
    agg[n] = v;
    names.push_back(n);
  }
  return {{"variant", variant}, {"metrics", agg}, {"order", names}, {"per_query", per_query}};
}

MetricReport evaluate(const std::string& variant, const std::vector<QueryResult>& results, const Benchmark& bench,
                      const MetricKs& ks) {
  if (results.size() != bench.queries.size()) throw InputError("evaluate: result count != benchmark queries");
  std::vector<uint64_t> truth;
  std::vector<std::vector<uint64_t>> subsets, targets;
  for (const auto& q : bench.queries) {
    truth.push_back(q.target.id);
    subsets.push_back(q.subset);
    targets.push_back(q.targets);
  }
  MetricReport rep;
  rep.variant = variant;
  for (int k : ks.recall) rep.metrics.emplace_back("R@" + std::to_string(k), recall_at_k(results, truth, k));
  for (int k : ks.subset)
    rep.metrics.emplace_back("Rs@" + std::to_string(k), recall_subset_at_k(results, subsets, truth, k));
  for (int k : ks.map) rep.metrics.emplace_back("mAP@" + std::to_string(k), map_at_k(results, targets, k));
  for (size_t q = 0; q < results.size(); ++q) {
    nlohmann::json row = {{"query_id", results[q].query_id}, {"target", truth[q]},
                          {"target_rank", rank_of(results[q], truth[q])}};
    for (int k : ks.map) row["AP@" + std::to_string(k)] = average_precision_at_k(results[q], targets[q], k);
    rep.per_query.push_back(std::move(row));
  }
  return rep;
}

MetricReport average_reports(const std::string& variant, const std::vector<MetricReport>& reports) {
  if (reports.empty()) throw InputError("average_reports: nothing to average");
  MetricReport out;
  out.variant = variant;
  out.metrics = reports.front().metrics;
  for (auto& m : out.metrics) m.second = 0.0;
  for (const auto& r : reports) {
    if (r.metrics.size() != out.metrics.size()) throw InputError("average_reports: metric lists differ");
    for (size_t i = 0; i < r.metrics.size(); ++i) {
      if (r.metrics[i].first != out.metrics[i].first) throw InputError("average_reports: metric lists differ");
      out.metrics[i].second += r.metrics[i].second;
    }
  }
  for (auto& m : out.metrics) m.second /= static_cast<double>(reports.size());
  return out;
}

std::string format_table(const std::vector<MetricReport>& reports) {
  if (reports.empty()) return {};
  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-10s", "Variant");
  os << buf;
  for (const auto& m : reports.front().metrics) {
    std::snprintf(buf, sizeof buf, " %8s", m.first.c_str());
    os << buf;
  }
  os << '\n';
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%-10s", r.variant.c_str());
    os << buf;
    for (const auto& m : r.metrics) {
      std::snprintf(buf, sizeof buf, " %8.2f", 100.0 * m.second);
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace fusiondiff
