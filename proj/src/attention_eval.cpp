#include "spotlight/attention_eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "spotlight/bitcodes.hpp"
#include "spotlight/errors.hpp"

namespace spotlight {

void AttentionInstance::validate() const {
    const std::size_t n = keys.rows();
    if (n == 0) throw DimensionError("attention: empty KV cache");
    if (values.rows() != n) throw DimensionError("attention: key/value row counts differ");
    if (queries.cols() != keys.cols() || values.cols() != keys.cols()) {
        throw DimensionError("attention: embedding dimensions differ");
    }
    if (!(scale > 0.0f)) throw DimensionError("attention: scale must be positive");
    if (causal_offsets.size() != queries.rows()) {
        throw DimensionError("attention: need one causal offset per query");
    }
    for (std::uint32_t off : causal_offsets) {
        if (off == 0 || off > n) {
            throw DimensionError("attention: causal offset " + std::to_string(off) +
                                 " outside [1, " + std::to_string(n) + "]");
        }
    }
}

AttentionInstance make_causal_instance(Matrix<float> queries, Matrix<float> keys,
                                       Matrix<float> values) {
    if (queries.rows() != keys.rows()) {
        throw DimensionError("make_causal_instance: query count must equal cache size");
    }
    AttentionInstance inst;
    inst.scale = 1.0f / std::sqrt(static_cast<float>(keys.cols()));
    inst.causal_offsets.resize(queries.rows());
    for (std::size_t i = 0; i < queries.rows(); ++i) {
        inst.causal_offsets[i] = static_cast<std::uint32_t>(i + 1);
    }
    inst.queries = std::move(queries);
    inst.keys = std::move(keys);
    inst.values = std::move(values);
    inst.validate();
    return inst;
}

namespace {

// Shared by full and sparse attention so that identical index sets produce
// identical floating-point results.
void attend_subset(const AttentionInstance& inst, std::size_t row,
                   std::span<const std::uint32_t> idxs, float* out) {
    const std::size_t d = inst.keys.cols();
    const float* q = inst.queries.row(row).data();

    float max_logit = -std::numeric_limits<float>::infinity();
    std::vector<float> logits(idxs.size());
    for (std::size_t j = 0; j < idxs.size(); ++j) {
        const float* krow = inst.keys.row(idxs[j]).data();
        float acc = 0.0f;
        for (std::size_t p = 0; p < d; ++p) acc += q[p] * krow[p];
        logits[j] = acc * inst.scale;
        max_logit = std::max(max_logit, logits[j]);
    }
    std::fill(out, out + d, 0.0f);
    float denom = 0.0f;
    for (std::size_t j = 0; j < idxs.size(); ++j) {
        const float w = std::exp(logits[j] - max_logit);
        denom += w;
        const float* vrow = inst.values.row(idxs[j]).data();
        for (std::size_t p = 0; p < d; ++p) out[p] += w * vrow[p];
    }
    const float inv = 1.0f / denom;
    for (std::size_t p = 0; p < d; ++p) out[p] *= inv;
}

void causal_logits(const AttentionInstance& inst, std::size_t row, std::vector<float>& logits) {
    const std::size_t d = inst.keys.cols();
    const std::uint32_t valid = inst.causal_offsets[row];
    const float* q = inst.queries.row(row).data();
    logits.resize(valid);
    for (std::uint32_t j = 0; j < valid; ++j) {
        const float* krow = inst.keys.row(j).data();
        float acc = 0.0f;
        for (std::size_t p = 0; p < d; ++p) acc += q[p] * krow[p];
        logits[j] = acc * inst.scale;
    }
}

std::vector<std::uint32_t> all_valid_indices(std::uint32_t valid) {
    std::vector<std::uint32_t> idx(valid);
    std::iota(idx.begin(), idx.end(), 0u);
    return idx;
}

}  // namespace

Matrix<float> full_attention(const AttentionInstance& inst) {
    inst.validate();
    Matrix<float> out(inst.queries.rows(), inst.values.cols());
    for (std::size_t row = 0; row < inst.queries.rows(); ++row) {
        const auto idxs = all_valid_indices(inst.causal_offsets[row]);
        attend_subset(inst, row, idxs, out.row(row).data());
    }
    return out;
}

const char* retrieval_method_name(RetrievalMethod m) {
    switch (m) {
        case RetrievalMethod::oracle: return "oracle";
        case RetrievalMethod::lsh: return "lsh";
        case RetrievalMethod::mlp: return "mlp";
        case RetrievalMethod::downproj: return "downproj";
    }
    return "?";
}

RetrievalResult oracle_topk(const AttentionInstance& inst, std::uint32_t k) {
    inst.validate();
    if (k == 0) throw DimensionError("oracle_topk: k must be >= 1");
    RetrievalResult res;
    res.method = RetrievalMethod::oracle;
    res.budget = k;
    res.indices.resize(inst.num_queries());
    std::vector<float> logits;
    for (std::size_t row = 0; row < inst.num_queries(); ++row) {
        causal_logits(inst, row, logits);
        const auto kk = std::min<std::uint32_t>(k, static_cast<std::uint32_t>(logits.size()));
        res.indices[row] = top_k_indices<float>({logits.data(), logits.size()}, kk);
    }
    return res;
}

RetrievalResult hash_topk(const AttentionInstance& inst, const AnyHasher& hasher,
                          std::uint32_t k) {
    inst.validate();
    if (k == 0) throw DimensionError("hash_topk: k must be >= 1");
    if (std::holds_alternative<DownProjEstimator>(hasher)) {
        throw DimensionError("hash_topk: down-projection estimator is not a hash; use "
                             "downproj_topk");
    }
    const bool is_mlp = std::holds_alternative<MlpHasher>(hasher);
    std::uint32_t hasher_dim = 0;
    BitMatrix key_bits, query_bits;
    if (is_mlp) {
        const auto& mlp = std::get<MlpHasher>(hasher);
        hasher_dim = mlp.input_dim();
        if (inst.keys.cols() != hasher_dim) {
            throw DimensionError("hash_topk: hasher dimension mismatch");
        }
        key_bits = mlp_hash(mlp, inst.keys);
        query_bits = mlp_hash(mlp, inst.queries);
    } else {
        const auto& lin = std::get<LinearHasher>(hasher);
        hasher_dim = lin.input_dim();
        if (inst.keys.cols() != hasher_dim) {
            throw DimensionError("hash_topk: hasher dimension mismatch");
        }
        key_bits = linear_hash(lin, inst.keys);
        query_bits = linear_hash(lin, inst.queries);
    }
    const CodeMatrix key_codes = pack_bits(key_bits);
    const CodeMatrix query_codes = pack_bits(query_bits);

    RetrievalResult res;
    res.method = is_mlp ? RetrievalMethod::mlp : RetrievalMethod::lsh;
    res.budget = k;
    res.indices.resize(inst.num_queries());
    std::vector<std::int32_t> scores(inst.cache_size());
    for (std::size_t row = 0; row < inst.num_queries(); ++row) {
        const std::uint32_t valid = inst.causal_offsets[row];
        nxor_scores_into(query_codes.row(static_cast<std::uint32_t>(row)), key_codes, valid,
                         scores.data());
        const auto kk = std::min<std::uint32_t>(k, valid);
        res.indices[row] = top_k_indices<std::int32_t>({scores.data(), valid}, kk);
    }
    return res;
}

RetrievalResult downproj_topk(const AttentionInstance& inst, const DownProjEstimator& est,
                              std::uint32_t k) {
    inst.validate();
    if (k == 0) throw DimensionError("downproj_topk: k must be >= 1");
    if (inst.keys.cols() != est.input_dim()) {
        throw DimensionError("downproj_topk: estimator dimension mismatch");
    }
    const Matrix<float> kp = matmul(inst.keys, est.projection);
    const Matrix<float> qp = matmul(inst.queries, est.projection);
    RetrievalResult res;
    res.method = RetrievalMethod::downproj;
    res.budget = k;
    res.indices.resize(inst.num_queries());
    std::vector<float> scores(inst.cache_size());
    for (std::size_t row = 0; row < inst.num_queries(); ++row) {
        const std::uint32_t valid = inst.causal_offsets[row];
        for (std::uint32_t j = 0; j < valid; ++j) {
            scores[j] = dot<float>(qp.row(row), kp.row(j));
        }
        const auto kk = std::min<std::uint32_t>(k, valid);
        res.indices[row] = top_k_indices<float>({scores.data(), valid}, kk);
    }
    return res;
}

RetrievalResult retrieval_topk(const AttentionInstance& inst, const AnyHasher& hasher,
                               std::uint32_t k) {
    if (const auto* dp = std::get_if<DownProjEstimator>(&hasher)) {
        return downproj_topk(inst, *dp, k);
    }
    return hash_topk(inst, hasher, k);
}

double iou(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
    if (a.empty() && b.empty()) return 1.0;
    std::size_t inter = 0, ia = 0, ib = 0;
    while (ia < a.size() && ib < b.size()) {
        if (a[ia] == b[ib]) {
            ++inter;
            ++ia;
            ++ib;
        } else if (a[ia] < b[ib]) {
            ++ia;
        } else {
            ++ib;
        }
    }
    const std::size_t uni = a.size() + b.size() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

Matrix<float> sparse_attention(const AttentionInstance& inst, const RetrievalResult& result) {
    inst.validate();
    if (result.indices.size() != inst.num_queries()) {
        throw DimensionError("sparse_attention: result has " +
                             std::to_string(result.indices.size()) + " index sets for " +
                             std::to_string(inst.num_queries()) + " queries");
    }
    Matrix<float> out(inst.queries.rows(), inst.values.cols());
    std::vector<std::uint32_t> subset;
    for (std::size_t row = 0; row < inst.num_queries(); ++row) {
        const auto& picked = result.indices[row];
        if (picked.empty()) {
            throw DimensionError("sparse_attention: empty index set for query " +
                                 std::to_string(row));
        }
        const std::uint32_t valid = inst.causal_offsets[row];
        const std::uint32_t own = valid - 1;
        subset.assign(picked.begin(), picked.end());
        for (std::uint32_t idx : subset) {
            if (idx >= valid) {
                throw DimensionError("sparse_attention: index " + std::to_string(idx) +
                                     " outside causal range for query " + std::to_string(row));
            }
        }
        if (!std::binary_search(subset.begin(), subset.end(), own)) {
            subset.insert(std::upper_bound(subset.begin(), subset.end(), own), own);
        }
        attend_subset(inst, row, subset, out.row(row).data());
    }
    return out;
}

std::uint32_t budget_from_rate(double rate, std::size_t n) {
    if (!(rate > 0.0 && rate <= 1.0)) {
        throw DimensionError("budget_from_rate: rate must lie in (0, 1]");
    }
    const auto raw = static_cast<std::uint32_t>(rate * static_cast<double>(n));
    return static_cast<std::uint32_t>(std::min<std::size_t>(std::max<std::uint32_t>(raw, 20), n));
}

namespace {

double percentile(std::vector<double> sorted_values, double p) {
    if (sorted_values.empty()) return 0.0;
    const auto rank = static_cast<std::size_t>(
        p * static_cast<double>(sorted_values.size() - 1) + 0.5);
    return sorted_values[std::min(rank, sorted_values.size() - 1)];
}

}  // namespace

EvalReport evaluate(const AttentionInstance& inst, std::span<const EvalMethodSpec> methods,
                    double budget_rate) {
    inst.validate();
    const std::uint32_t k = budget_from_rate(budget_rate, inst.cache_size());
    const RetrievalResult oracle = oracle_topk(inst, k);
    const Matrix<float> full = full_attention(inst);

    std::vector<double> full_norms(inst.num_queries());
    for (std::size_t row = 0; row < inst.num_queries(); ++row) {
        full_norms[row] = norm2<float>(full.row(row));
    }

    EvalReport report;
    report.budget = k;
    report.budget_rate = budget_rate;
    for (const EvalMethodSpec& spec : methods) {
        RetrievalResult res;
        if (spec.frozen) {
            res.method = spec.kind;
            res.budget = k;
            res.indices.resize(inst.num_queries());
            for (std::size_t row = 0; row < inst.num_queries(); ++row) {
                res.indices[row] = all_valid_indices(inst.causal_offsets[row]);
            }
        } else if (spec.kind == RetrievalMethod::oracle) {
            res = oracle;
        } else {
            if (spec.hasher == nullptr) {
                throw DimensionError("evaluate: method \"" + spec.name + "\" needs a hasher");
            }
            res = retrieval_topk(inst, *spec.hasher, k);
        }

        MethodReport mr;
        mr.name = spec.name;
        mr.kind = spec.kind;
        mr.budget = k;
        mr.frozen = spec.frozen;
        mr.per_query_iou.resize(inst.num_queries());
        const Matrix<float> sparse = sparse_attention(inst, res);
        double iou_sum = 0.0, err_sum = 0.0, err_max = 0.0;
        for (std::size_t row = 0; row < inst.num_queries(); ++row) {
            const double v = iou(res.indices[row], oracle.indices[row]);
            mr.per_query_iou[row] = v;
            iou_sum += v;
            double diff2 = 0.0;
            for (std::size_t p = 0; p < full.cols(); ++p) {
                const double dlt = static_cast<double>(sparse(row, p)) -
                                   static_cast<double>(full(row, p));
                diff2 += dlt * dlt;
            }
            const double rel = full_norms[row] > 0.0 ? std::sqrt(diff2) / full_norms[row]
                                                     : std::sqrt(diff2);
            err_sum += rel;
            err_max = std::max(err_max, rel);
        }
        const auto nq = static_cast<double>(inst.num_queries());
        mr.mean_iou = iou_sum / nq;
        mr.mean_rel_err = err_sum / nq;
        mr.max_rel_err = err_max;
        std::vector<double> sorted = mr.per_query_iou;
        std::sort(sorted.begin(), sorted.end());
        mr.p10_iou = percentile(sorted, 0.10);
        mr.p50_iou = percentile(sorted, 0.50);
        mr.p90_iou = percentile(sorted, 0.90);
        report.methods.push_back(std::move(mr));
    }
    return report;
}

std::string format_eval_report(const EvalReport& report,
                               std::span<const std::string> header_lines) {
    std::ostringstream os;
    for (const std::string& line : header_lines) os << "# " << line << "\n";
    os << "budget " << report.budget << "\n";
    os << "budget_rate " << report.budget_rate << "\n";
    char buf[256];
    for (const MethodReport& m : report.methods) {
        std::snprintf(buf, sizeof(buf),
                      "method %s kind=%s budget=%u frozen=%d mean_iou=%.6f p10=%.6f p50=%.6f "
                      "p90=%.6f mean_rel_err=%.6e max_rel_err=%.6e",
                      m.name.c_str(), retrieval_method_name(m.kind), m.budget,
                      m.frozen ? 1 : 0, m.mean_iou, m.p10_iou, m.p50_iou, m.p90_iou,
                      m.mean_rel_err, m.max_rel_err);
        os << buf << "\n";
    }
    return os.str();
}

std::string eval_report_csv(const EvalReport& report) {
    std::ostringstream os;
    os << "query";
    for (const MethodReport& m : report.methods) os << "," << m.name;
    os << "\n";
    if (report.methods.empty()) return os.str();
    const std::size_t nq = report.methods.front().per_query_iou.size();
    char buf[64];
    for (std::size_t row = 0; row < nq; ++row) {
        os << row;
        for (const MethodReport& m : report.methods) {
            std::snprintf(buf, sizeof(buf), ",%.6f", m.per_query_iou[row]);
            os << buf;
        }
        os << "\n";
    }
    return os.str();
}

}  // namespace spotlight
