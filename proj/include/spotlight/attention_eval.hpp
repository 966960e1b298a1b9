#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spotlight/hashers.hpp"
#include "spotlight/matrix.hpp"

namespace spotlight {

// One single-head decode workload: q queries against an n-entry KV cache.
// causal_offsets[i] is the number of cache rows query i may attend to; the
// most recent of those rows is treated as the query's own token.
struct AttentionInstance {
    Matrix<float> queries;  // q x d
    Matrix<float> keys;     // n x d
    Matrix<float> values;   // n x d
    float scale = 0.0f;     // typically 1/sqrt(d)
    std::vector<std::uint32_t> causal_offsets;

    std::size_t num_queries() const { return queries.rows(); }
    std::size_t cache_size() const { return keys.rows(); }
    void validate() const;
};

// Offsets i+1 per query; requires equally many queries and cache rows.
AttentionInstance make_causal_instance(Matrix<float> queries, Matrix<float> keys,
                                       Matrix<float> values);

// softmax(Q K^T * scale, causally masked) V with row-max stabilization.
Matrix<float> full_attention(const AttentionInstance& inst);

enum class RetrievalMethod { oracle, lsh, mlp, downproj };

const char* retrieval_method_name(RetrievalMethod m);

struct RetrievalResult {
    RetrievalMethod method = RetrievalMethod::oracle;
    std::uint32_t budget = 0;
    std::vector<std::vector<std::uint32_t>> indices;  // per query, sorted ascending
};

// Top-k by exact attention logits, ties toward the lower index.
RetrievalResult oracle_topk(const AttentionInstance& inst, std::uint32_t k);

// Codes for the whole cache once, then per-query NXOR scoring over the causal
// range. Accepts linear and mlp hashers.
RetrievalResult hash_topk(const AttentionInstance& inst, const AnyHasher& hasher,
                          std::uint32_t k);

// Reduced-space inner-product retrieval for the down-projection baseline.
RetrievalResult downproj_topk(const AttentionInstance& inst, const DownProjEstimator& est,
                              std::uint32_t k);

// Dispatches on the hasher kind.
RetrievalResult retrieval_topk(const AttentionInstance& inst, const AnyHasher& hasher,
                               std::uint32_t k);

// |a intersect b| / |a union b| over sorted index sets; 1.0 when both empty.
double iou(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b);

// Attention over the gathered subset only. The query's own cache row is
// always included.
Matrix<float> sparse_attention(const AttentionInstance& inst, const RetrievalResult& result);

// floor(rate * n) with the 20-token floor, clamped to n.
std::uint32_t budget_from_rate(double rate, std::size_t n);

struct MethodReport {
    std::string name;
    RetrievalMethod kind = RetrievalMethod::oracle;
    std::uint32_t budget = 0;
    bool frozen = false;
    double mean_iou = 0.0;
    double p10_iou = 0.0;
    double p50_iou = 0.0;
    double p90_iou = 0.0;
    double mean_rel_err = 0.0;
    double max_rel_err = 0.0;
    std::vector<double> per_query_iou;
};

struct EvalReport {
    std::uint32_t budget = 0;
    double budget_rate = 0.0;
    std::vector<MethodReport> methods;
};

struct EvalMethodSpec {
    std::string name;
    RetrievalMethod kind = RetrievalMethod::oracle;
    const AnyHasher* hasher = nullptr;  // null for oracle
    // Frozen streams are exempt from pruning and retrieve every valid index.
    bool frozen = false;
};

// Runs every method at the rate-derived budget; IoU is measured per query
// against the oracle top-k set, output error against full attention.
EvalReport evaluate(const AttentionInstance& inst, std::span<const EvalMethodSpec> methods,
                    double budget_rate);

// One text record per method. header_lines are prepended verbatim (provenance
// comments). Deterministic for identical inputs.
std::string format_eval_report(const EvalReport& report,
                               std::span<const std::string> header_lines);

// Per-query IoU as CSV, one column per method.
std::string eval_report_csv(const EvalReport& report);

}  // namespace spotlight
