#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "spotlight/hashers.hpp"
#include "spotlight/matrix.hpp"
#include "spotlight/ranking_loss.hpp"
#include "spotlight/synthkv.hpp"

namespace spotlight {

// Optimization schedule and optimizer settings. Linear warmup to max_lr, then
// cosine annealing to min_lr; AdamW with decoupled weight decay on the weight
// matrices only.
struct TrainConfig {
    std::uint32_t num_iters = 8192;
    double max_lr = 1e-3;
    double min_lr = 0.0;
    std::uint32_t warmup_iters = 81;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.98;
    double adam_eps = 1e-8;
    double weight_decay = 0.1;
    double grad_clip = 1.0;  // global L2 norm; <= 0 disables clipping
    std::uint32_t batch = 1;
    std::uint64_t seed = 0;
    // Soft-sign smoothing for hashers that do not carry their own gamma.
    double soft_gamma = 64.0;
    // Query rows excluded from training and used for the final IoU estimate.
    std::uint32_t holdout_queries = 128;
    double holdout_budget_rate = 0.02;

    void validate() const;
};

// Warmup ramp 0 -> max_lr over warmup_iters, cosine max_lr -> min_lr over the
// remaining iterations.
double lr_at(std::uint32_t iter, const TrainConfig& cfg);

template <typename T>
struct ParamRef {
    T* data = nullptr;
    std::size_t size = 0;
    bool decay = false;
};

template <typename T>
std::vector<ParamRef<T>> collect_params(MlpHasherT<T>& h);
template <typename T>
std::vector<ParamRef<T>> collect_params(LinearHasherT<T>& h);
template <typename T>
std::vector<ParamRef<T>> collect_params(DownProjEstimatorT<T>& h);

struct AdamState {
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    std::uint64_t step = 0;

    void reset(std::size_t total_params);
};

// Scales gradients in place so the global L2 norm never exceeds max_norm.
// Returns the pre-clip norm.
template <typename T>
double clip_gradient_norm(std::span<const ParamRef<T>> grads, double max_norm);

// One decoupled-weight-decay Adam update with bias correction. Returns false
// (and leaves parameters and state untouched) when any gradient entry is
// non-finite.
template <typename T>
bool adamw_step(std::span<const ParamRef<T>> params, std::span<const ParamRef<T>> grads,
                AdamState& state, double lr, const TrainConfig& cfg);

// One causally aligned training sequence; row i of queries decodes against
// key rows [0, i].
struct QkSequence {
    Matrix<float> queries;
    Matrix<float> keys;
};

struct TrainDataset {
    std::vector<QkSequence> sequences;
};

TrainDataset dataset_from_dump(QkDump dump);

enum class TrainLoss { ranking, reconstruction };

struct IterRecord {
    std::uint32_t iter = 0;
    double loss = 0.0;
    double violation_rate = 0.0;
    double lr = 0.0;
};

struct TrainReport {
    std::vector<IterRecord> records;
    double wall_seconds = 0.0;
    double final_holdout_iou = 0.0;
    std::uint32_t skipped_steps = 0;
};

// Line-delimited records (iter, loss, violation_rate, lr) plus the final
// holdout IoU. header_lines are prepended as comments. Wall-clock time is
// deliberately absent so identical runs serialize identically.
std::string format_train_report(const TrainReport& report,
                                std::span<const std::string> header_lines);

// Optimizes the hasher in place against the dataset. Per iteration: sample a
// sequence, partition oracle scores, rank soft-code inner products, backprop,
// clip, AdamW step. Deterministic given cfg.seed.
TrainReport train_hasher(AnyHasher& hasher, const TrainDataset& dataset,
                         const RankingLossConfig& loss_cfg, const TrainConfig& cfg,
                         TrainLoss loss_kind = TrainLoss::ranking);

// Central finite differences of the end-to-end ranking loss against the
// analytic gradient, in f64, over every MLP parameter. Returns the worst
// relative error; entries are normalized by at least 1% of the gradient
// infinity norm.
double finite_diff_check(const MlpHasherT<double>& hasher, const Matrix<double>& queries,
                         const Matrix<double>& keys, const RankingLossConfig& loss_cfg,
                         double step, std::uint64_t seed = 0);

}  // namespace spotlight
