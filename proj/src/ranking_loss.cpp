#include "spotlight/ranking_loss.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "spotlight/errors.hpp"
#include "spotlight/rng.hpp"

namespace spotlight {

void RankingLossConfig::validate(std::size_t n_keys) const {
    if (beta <= 0.0) throw DimensionError("ranking loss: beta must be positive");
    if (!(maskout > 0.0 && maskout < 1.0)) {
        throw DimensionError("ranking loss: maskout must lie in (0, 1)");
    }
    const auto k = static_cast<std::uint32_t>(static_cast<double>(n_keys) * (1.0 - maskout));
    if (k == 0) {
        throw DimensionError("ranking loss: top count floored to zero for n=" +
                             std::to_string(n_keys));
    }
    if (max_top && *max_top == 0) throw DimensionError("ranking loss: max_top must be >= 1");
    if (max_oth && *max_oth == 0) throw DimensionError("ranking loss: max_oth must be >= 1");
    if (query_subsample && *query_subsample == 0) {
        throw DimensionError("ranking loss: query_subsample must be >= 1");
    }
}

template <typename T>
TopkOrder build_topk_order(const Matrix<T>& true_attn,
                           std::span<const std::uint32_t> causal_offsets) {
    const std::size_t q = true_attn.rows();
    const std::size_t n = true_attn.cols();
    if (causal_offsets.size() != q) {
        throw DimensionError("build_topk_order: need one causal offset per query");
    }
    TopkOrder out;
    out.n_keys = static_cast<std::uint32_t>(n);
    out.n_queries = static_cast<std::uint32_t>(q);
    out.causal_offsets.assign(causal_offsets.begin(), causal_offsets.end());
    out.order.resize(q * n);
    std::vector<std::uint32_t> idx(n);
    for (std::size_t row = 0; row < q; ++row) {
        const std::uint32_t valid = std::min<std::uint32_t>(out.causal_offsets[row],
                                                            static_cast<std::uint32_t>(n));
        const T* scores = true_attn.row(row).data();
        std::iota(idx.begin(), idx.end(), 0u);
        // Masked positions rank below every valid one; ties go to lower index.
        std::sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) {
            const bool va = a < valid, vb = b < valid;
            if (va != vb) return va;
            if (va && scores[a] != scores[b]) return scores[a] > scores[b];
            return a < b;
        });
        std::copy(idx.begin(), idx.end(), out.order.begin() + row * n);
    }
    return out;
}

namespace {

// Fisher-Yates prefix: the first `take` entries of a random permutation of
// [0, n), returned in draw order to mirror index-gather semantics.
std::vector<std::uint32_t> randperm_take(std::uint32_t n, std::uint32_t take,
                                         std::mt19937_64& eng) {
    std::vector<std::uint32_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0u);
    const std::uint32_t m = std::min(take, n);
    for (std::uint32_t i = 0; i < m; ++i) {
        std::uniform_int_distribution<std::uint32_t> pick(i, n - 1);
        std::swap(perm[i], perm[pick(eng)]);
    }
    perm.resize(m);
    return perm;
}

}  // namespace

PairPartition partition_topk(const TopkOrder& order, const RankingLossConfig& cfg,
                             std::uint64_t seed) {
    const std::uint32_t n = order.n_keys;
    if (n < 2) throw DimensionError("partition_topk: need at least two key positions");
    cfg.validate(n);
    const auto k_full = static_cast<std::uint32_t>(static_cast<double>(n) * (1.0 - cfg.maskout));
    const std::uint32_t oth_full = n - k_full;

    auto eng = make_engine(seed);

    PairPartition part;
    part.k_full = k_full;

    part.query_rows.resize(order.n_queries);
    std::iota(part.query_rows.begin(), part.query_rows.end(), 0u);
    if (cfg.query_subsample && *cfg.query_subsample < order.n_queries) {
        part.query_rows = randperm_take(order.n_queries, *cfg.query_subsample, eng);
        std::sort(part.query_rows.begin(), part.query_rows.end());
    }

    // One positional draw shared across all selected queries.
    std::vector<std::uint32_t> top_pos(k_full);
    std::iota(top_pos.begin(), top_pos.end(), 0u);
    if (cfg.max_top && *cfg.max_top < k_full) {
        top_pos = randperm_take(k_full, *cfg.max_top, eng);
    }
    std::vector<std::uint32_t> oth_pos(oth_full);
    std::iota(oth_pos.begin(), oth_pos.end(), 0u);
    if (cfg.max_oth && *cfg.max_oth < oth_full) {
        oth_pos = randperm_take(oth_full, *cfg.max_oth, eng);
    }

    part.top_count = static_cast<std::uint32_t>(top_pos.size());
    part.oth_count = static_cast<std::uint32_t>(oth_pos.size());
    const std::size_t nq = part.query_rows.size();
    part.top_indices.resize(nq * part.top_count);
    part.oth_indices.resize(nq * part.oth_count);
    part.top_valid.resize(nq * part.top_count);
    part.oth_valid.resize(nq * part.oth_count);

    std::size_t valid_top_total = 0;
    for (std::size_t qi = 0; qi < nq; ++qi) {
        const std::uint32_t row = part.query_rows[qi];
        const std::uint32_t* row_order = order.order.data() + static_cast<std::size_t>(row) * n;
        const std::uint32_t valid = std::min<std::uint32_t>(order.causal_offsets[row], n);
        std::size_t row_valid_top = 0, row_valid_oth = 0;
        for (std::uint32_t i = 0; i < part.top_count; ++i) {
            const std::uint32_t key = row_order[top_pos[i]];
            part.top_indices[qi * part.top_count + i] = key;
            const bool ok = key < valid;
            part.top_valid[qi * part.top_count + i] = ok ? 1 : 0;
            row_valid_top += ok ? 1 : 0;
        }
        for (std::uint32_t j = 0; j < part.oth_count; ++j) {
            const std::uint32_t key = row_order[k_full + oth_pos[j]];
            part.oth_indices[qi * part.oth_count + j] = key;
            const bool ok = key < valid;
            part.oth_valid[qi * part.oth_count + j] = ok ? 1 : 0;
            row_valid_oth += ok ? 1 : 0;
        }
        part.valid_pairs += row_valid_top * row_valid_oth;
        valid_top_total += row_valid_top;
    }
    (void)valid_top_total;
    return part;
}

template <typename T>
PairPartition partition_topk(const Matrix<T>& true_attn, const RankingLossConfig& cfg,
                             std::span<const std::uint32_t> causal_offsets, std::uint64_t seed) {
    return partition_topk(build_topk_order(true_attn, causal_offsets), cfg, seed);
}

namespace {

inline double log_sigmoid(double x) {
    // -softplus(-x), stable on both tails.
    return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

}  // namespace

template <typename T>
RankingLossResult ranking_pair_loss(const Matrix<T>& draft_attn, const PairPartition& part,
                                    double beta, double alpha, Matrix<double>* grad_out) {
    if (part.valid_pairs == 0) {
        throw EmptyPairError("ranking loss: no causally valid pairs to rank");
    }
    if (grad_out != nullptr &&
        (grad_out->rows() != draft_attn.rows() || grad_out->cols() != draft_attn.cols())) {
        throw DimensionError("ranking loss: gradient buffer shape mismatch");
    }
    const double inv_pairs = 1.0 / static_cast<double>(part.valid_pairs);
    double loss_sum = 0.0;
    std::size_t violations = 0;
    const std::size_t nq = part.query_rows.size();
    for (std::size_t qi = 0; qi < nq; ++qi) {
        const std::uint32_t row = part.query_rows[qi];
        const T* draft = draft_attn.row(row).data();
        double* grow = grad_out ? grad_out->row(row).data() : nullptr;
        for (std::uint32_t i = 0; i < part.top_count; ++i) {
            if (!part.top_valid[qi * part.top_count + i]) continue;
            const std::uint32_t bi = part.top_indices[qi * part.top_count + i];
            const double b = static_cast<double>(draft[bi]);
            for (std::uint32_t j = 0; j < part.oth_count; ++j) {
                if (!part.oth_valid[qi * part.oth_count + j]) continue;
                const std::uint32_t cj = part.oth_indices[qi * part.oth_count + j];
                const double z = b - static_cast<double>(draft[cj]);
                const double logit = beta * z - alpha;
                loss_sum -= log_sigmoid(logit);
                if (z < 0.0) ++violations;
                if (grow != nullptr) {
                    const double s = 1.0 / (1.0 + std::exp(-logit));
                    const double g = beta * (1.0 - s) * inv_pairs;
                    grow[bi] -= g;
                    grow[cj] += g;
                }
            }
        }
    }
    RankingLossResult res;
    res.loss = loss_sum * inv_pairs;
    res.violation_rate = static_cast<double>(violations) * inv_pairs;
    res.pair_count = part.valid_pairs;
    return res;
}

template <typename T>
RankingLossResult ranking_loss(const Matrix<T>& draft_attn, const Matrix<T>& true_attn,
                               const RankingLossConfig& cfg,
                               std::span<const std::uint32_t> causal_offsets,
                               std::uint64_t seed) {
    if (draft_attn.rows() != true_attn.rows() || draft_attn.cols() != true_attn.cols()) {
        throw DimensionError("ranking_loss: draft and true score shapes differ");
    }
    const PairPartition part = partition_topk(true_attn, cfg, causal_offsets, seed);
    return ranking_pair_loss(draft_attn, part, cfg.beta, cfg.alpha, nullptr);
}

template <typename T>
Matrix<T> ranking_loss_grad(const Matrix<T>& draft_attn, const Matrix<T>& true_attn,
                            const RankingLossConfig& cfg,
                            std::span<const std::uint32_t> causal_offsets, std::uint64_t seed) {
    if (draft_attn.rows() != true_attn.rows() || draft_attn.cols() != true_attn.cols()) {
        throw DimensionError("ranking_loss_grad: draft and true score shapes differ");
    }
    const PairPartition part = partition_topk(true_attn, cfg, causal_offsets, seed);
    Matrix<double> grad(draft_attn.rows(), draft_attn.cols());
    ranking_pair_loss(draft_attn, part, cfg.beta, cfg.alpha, &grad);
    return matrix_cast<T>(grad);
}

template <typename T>
double reconstruction_loss(const Matrix<T>& draft_attn, const Matrix<T>& true_attn,
                           std::span<const std::uint32_t> causal_offsets) {
    if (draft_attn.rows() != true_attn.rows() || draft_attn.cols() != true_attn.cols()) {
        throw DimensionError("reconstruction_loss: shapes differ");
    }
    if (causal_offsets.size() != draft_attn.rows()) {
        throw DimensionError("reconstruction_loss: need one causal offset per query");
    }
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t row = 0; row < draft_attn.rows(); ++row) {
        const std::size_t valid =
            std::min<std::size_t>(causal_offsets[row], draft_attn.cols());
        const T* d = draft_attn.row(row).data();
        const T* t = true_attn.row(row).data();
        for (std::size_t j = 0; j < valid; ++j) {
            const double diff = static_cast<double>(d[j]) - static_cast<double>(t[j]);
            sum += diff * diff;
        }
        count += valid;
    }
    if (count == 0) throw EmptyPairError("reconstruction_loss: no causally valid entries");
    return sum / static_cast<double>(count);
}

template <typename T>
Matrix<double> reconstruction_loss_grad(const Matrix<T>& draft_attn, const Matrix<T>& true_attn,
                                        std::span<const std::uint32_t> causal_offsets) {
    if (draft_attn.rows() != true_attn.rows() || draft_attn.cols() != true_attn.cols()) {
        throw DimensionError("reconstruction_loss_grad: shapes differ");
    }
    if (causal_offsets.size() != draft_attn.rows()) {
        throw DimensionError("reconstruction_loss_grad: need one causal offset per query");
    }
    std::size_t count = 0;
    for (std::size_t row = 0; row < draft_attn.rows(); ++row) {
        count += std::min<std::size_t>(causal_offsets[row], draft_attn.cols());
    }
    if (count == 0) throw EmptyPairError("reconstruction_loss_grad: no causally valid entries");
    Matrix<double> grad(draft_attn.rows(), draft_attn.cols());
    const double scale = 2.0 / static_cast<double>(count);
    for (std::size_t row = 0; row < draft_attn.rows(); ++row) {
        const std::size_t valid =
            std::min<std::size_t>(causal_offsets[row], draft_attn.cols());
        const T* d = draft_attn.row(row).data();
        const T* t = true_attn.row(row).data();
        double* g = grad.row(row).data();
        for (std::size_t j = 0; j < valid; ++j) {
            g[j] = scale * (static_cast<double>(d[j]) - static_cast<double>(t[j]));
        }
    }
    return grad;
}

#define SPOTLIGHT_INSTANTIATE_RANKING(T)                                                        \
    template TopkOrder build_topk_order<T>(const Matrix<T>&, std::span<const std::uint32_t>);  \
    template PairPartition partition_topk<T>(const Matrix<T>&, const RankingLossConfig&,       \
                                             std::span<const std::uint32_t>, std::uint64_t);   \
    template RankingLossResult ranking_pair_loss<T>(const Matrix<T>&, const PairPartition&,    \
                                                    double, double, Matrix<double>*);          \
    template RankingLossResult ranking_loss<T>(const Matrix<T>&, const Matrix<T>&,             \
                                               const RankingLossConfig&,                       \
                                               std::span<const std::uint32_t>, std::uint64_t); \
    template Matrix<T> ranking_loss_grad<T>(const Matrix<T>&, const Matrix<T>&,                \
                                            const RankingLossConfig&,                          \
                                            std::span<const std::uint32_t>, std::uint64_t);    \
    template double reconstruction_loss<T>(const Matrix<T>&, const Matrix<T>&,                 \
                                           std::span<const std::uint32_t>);                    \
    template Matrix<double> reconstruction_loss_grad<T>(const Matrix<T>&, const Matrix<T>&,    \
                                                        std::span<const std::uint32_t>);

SPOTLIGHT_INSTANTIATE_RANKING(float)
SPOTLIGHT_INSTANTIATE_RANKING(double)

#undef SPOTLIGHT_INSTANTIATE_RANKING

}  // namespace spotlight
