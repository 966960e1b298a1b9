#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "spotlight/matrix.hpp"

namespace spotlight {

// Pairwise ranking objective configuration. k = floor(n * (1 - maskout)) is
// the per-query count of reference top scores; max_top / max_oth /
// query_subsample bound the sampled pair set for long sequences.
struct RankingLossConfig {
    double beta = 1.0;
    double alpha = 3.0;
    double maskout = 0.98;
    std::optional<std::uint32_t> max_top;
    std::optional<std::uint32_t> max_oth;
    std::optional<std::uint32_t> query_subsample;

    void validate(std::size_t n_keys) const;
};

// Descending argsort of causally masked reference scores, one row per query.
// Masked positions sort last. Computed once per (scores, offsets) pair and
// reused across subsampling draws.
struct TopkOrder {
    std::vector<std::uint32_t> order;           // q x n, row-major
    std::vector<std::uint32_t> causal_offsets;  // per-query valid length
    std::uint32_t n_keys = 0;
    std::uint32_t n_queries = 0;
};

template <typename T>
TopkOrder build_topk_order(const Matrix<T>& true_attn,
                           std::span<const std::uint32_t> causal_offsets);

// Index structure of the sampled (B, C) pair set. top/oth index matrices are
// row-major over the selected query rows; validity flags mark entries inside
// the causal range. A pair contributes iff both its entries are valid.
struct PairPartition {
    std::vector<std::uint32_t> query_rows;
    std::vector<std::uint32_t> top_indices;
    std::vector<std::uint32_t> oth_indices;
    std::vector<std::uint8_t> top_valid;
    std::vector<std::uint8_t> oth_valid;
    std::uint32_t top_count = 0;
    std::uint32_t oth_count = 0;
    std::uint32_t k_full = 0;  // floor(n * (1 - maskout)), before subsampling
    std::size_t valid_pairs = 0;
};

PairPartition partition_topk(const TopkOrder& order, const RankingLossConfig& cfg,
                             std::uint64_t seed);

template <typename T>
PairPartition partition_topk(const Matrix<T>& true_attn, const RankingLossConfig& cfg,
                             std::span<const std::uint32_t> causal_offsets, std::uint64_t seed);

struct RankingLossResult {
    double loss = 0.0;
    double violation_rate = 0.0;
    std::size_t pair_count = 0;
};

// Mean over valid pairs of -log sigmoid(beta * (B_i - C_j) - alpha).
// violation_rate is the fraction of valid pairs with B_i - C_j < 0.
template <typename T>
RankingLossResult ranking_loss(const Matrix<T>& draft_attn, const Matrix<T>& true_attn,
                               const RankingLossConfig& cfg,
                               std::span<const std::uint32_t> causal_offsets,
                               std::uint64_t seed);

// d loss / d draft_attn. Zero outside the sampled valid pairs.
template <typename T>
Matrix<T> ranking_loss_grad(const Matrix<T>& draft_attn, const Matrix<T>& true_attn,
                            const RankingLossConfig& cfg,
                            std::span<const std::uint32_t> causal_offsets, std::uint64_t seed);

// Loss over a fixed partition; fills grad_out (same shape as draft_attn,
// accumulated in double) when non-null. Shared by the trainer so the value
// and gradient reuse one pass.
template <typename T>
RankingLossResult ranking_pair_loss(const Matrix<T>& draft_attn, const PairPartition& part,
                                    double beta, double alpha, Matrix<double>* grad_out);

// Mean squared error over causally valid entries. Ablation baseline.
template <typename T>
double reconstruction_loss(const Matrix<T>& draft_attn, const Matrix<T>& true_attn,
                           std::span<const std::uint32_t> causal_offsets);

template <typename T>
Matrix<double> reconstruction_loss_grad(const Matrix<T>& draft_attn, const Matrix<T>& true_attn,
                                        std::span<const std::uint32_t> causal_offsets);

}  // namespace spotlight
