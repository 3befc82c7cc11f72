#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "fusiondiff/gallery.hpp"
#include "fusiondiff/linalg.hpp"
#include "fusiondiff/synth_world.hpp"

namespace fusiondiff {

struct QueryResult {
  uint64_t query_id = 0;
  std::vector<uint64_t> ids;   // descending score, ties by ascending id
  std::vector<double> scores;  // aligned with ids
  bool complete = true;        // false when truncated to top-k
};

inline constexpr int kAll = -1;

// Exact cosine ranking against every gallery row.
QueryResult rank(const Vec& query, const GalleryIndex& gallery, int k = kAll, uint64_t query_id = 0);
// One ranking per row of `queries`, computed in parallel, returned in row order.
std::vector<QueryResult> rank_all(const std::vector<Vec>& queries, const std::vector<uint64_t>& query_ids,
                                  const GalleryIndex& gallery, int threads = 1);

// A truth id absent from a complete ranking is an input error.
double recall_at_k(const std::vector<QueryResult>& results, const std::vector<uint64_t>& truth, int k);
double recall_subset_at_k(const std::vector<QueryResult>& results, const std::vector<std::vector<uint64_t>>& subsets,
                          const std::vector<uint64_t>& truth, int k);
// (1 / min(k, #targets)) * sum over hits at rank i <= k of (hits so far / i)
double average_precision_at_k(const QueryResult& result, const std::vector<uint64_t>& targets, int k);
double map_at_k(const std::vector<QueryResult>& results, const std::vector<std::vector<uint64_t>>& targets, int k);

// 1-based rank of `id`, or 0 when absent.
int rank_of(const QueryResult& result, uint64_t id);

struct MetricReport {
  std::string variant;
  std::vector<std::pair<std::string, double>> metrics;  // in table order
  nlohmann::json per_query = nlohmann::json::array();

  double get(const std::string& name) const;
  nlohmann::json to_json() const;
};

struct MetricKs {
  std::vector<int> recall{1, 5, 10, 50};
  std::vector<int> subset{1, 2, 3};
  std::vector<int> map{5, 10, 25, 50};
};

MetricReport evaluate(const std::string& variant, const std::vector<QueryResult>& results, const Benchmark& bench,
                      const MetricKs& ks = {});

// Element-wise mean of reports with identical metric lists.
MetricReport average_reports(const std::string& variant, const std::vector<MetricReport>& reports);

// Rows = variants, columns = metrics.
std::string format_table(const std::vector<MetricReport>& reports);

}  // namespace fusiondiff
