#include "spotlight/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>

#include "spotlight/attention_eval.hpp"
#include "spotlight/bitcodes.hpp"
#include "spotlight/errors.hpp"
#include "spotlight/rng.hpp"

namespace spotlight {

void TrainConfig::validate() const {
    if (max_lr < 0.0 || min_lr < 0.0 || min_lr > max_lr) {
        throw DimensionError("TrainConfig: need 0 <= min_lr <= max_lr");
    }
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
        throw DimensionError("TrainConfig: adam betas must lie in [0, 1)");
    }
    if (adam_eps <= 0.0) throw DimensionError("TrainConfig: adam_eps must be positive");
    if (weight_decay < 0.0) throw DimensionError("TrainConfig: weight_decay must be >= 0");
    if (batch < 1) throw DimensionError("TrainConfig: batch must be >= 1");
    if (soft_gamma <= 0.0) throw DimensionError("TrainConfig: soft_gamma must be positive");
    if (!(holdout_budget_rate > 0.0 && holdout_budget_rate <= 1.0)) {
        throw DimensionError("TrainConfig: holdout_budget_rate must lie in (0, 1]");
    }
}

double lr_at(std::uint32_t iter, const TrainConfig& cfg) {
    if (cfg.num_iters == 0) return cfg.max_lr;
    const std::uint32_t warmup = std::min(cfg.warmup_iters, cfg.num_iters);
    if (iter < warmup) {
        return cfg.max_lr * static_cast<double>(iter) / static_cast<double>(warmup);
    }
    const std::uint32_t last = cfg.num_iters - 1;
    if (last <= warmup) return cfg.max_lr;
    const double progress =
        static_cast<double>(iter - warmup) / static_cast<double>(last - warmup);
    return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + std::cos(M_PI * progress));
}

template <typename T>
std::vector<ParamRef<T>> collect_params(MlpHasherT<T>& h) {
    return {{h.w1.data(), h.w1.size(), true},
            {h.b1.data(), h.b1.size(), false},
            {h.w2.data(), h.w2.size(), true}};
}

template <typename T>
std::vector<ParamRef<T>> collect_params(LinearHasherT<T>& h) {
    return {{h.projection.data(), h.projection.size(), true}};
}

template <typename T>
std::vector<ParamRef<T>> collect_params(DownProjEstimatorT<T>& h) {
    return {{h.projection.data(), h.projection.size(), true}};
}

template std::vector<ParamRef<float>> collect_params(MlpHasherT<float>&);
template std::vector<ParamRef<double>> collect_params(MlpHasherT<double>&);
template std::vector<ParamRef<float>> collect_params(LinearHasherT<float>&);
template std::vector<ParamRef<double>> collect_params(LinearHasherT<double>&);
template std::vector<ParamRef<float>> collect_params(DownProjEstimatorT<float>&);
template std::vector<ParamRef<double>> collect_params(DownProjEstimatorT<double>&);

void AdamState::reset(std::size_t total_params) {
    first_moment.assign(total_params, 0.0);
    second_moment.assign(total_params, 0.0);
    step = 0;
}

template <typename T>
double clip_gradient_norm(std::span<const ParamRef<T>> grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads) {
        for (std::size_t i = 0; i < g.size; ++i) {
            const double v = static_cast<double>(g.data[i]);
            sq += v * v;
        }
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T scale = static_cast<T>(max_norm / norm);
        for (const auto& g : grads) {
            for (std::size_t i = 0; i < g.size; ++i) g.data[i] *= scale;
        }
    }
    return norm;
}

template double clip_gradient_norm<float>(std::span<const ParamRef<float>>, double);
template double clip_gradient_norm<double>(std::span<const ParamRef<double>>, double);

template <typename T>
bool adamw_step(std::span<const ParamRef<T>> params, std::span<const ParamRef<T>> grads,
                AdamState& state, double lr, const TrainConfig& cfg) {
    if (params.size() != grads.size()) throw DimensionError("adamw_step: ref count mismatch");
    std::size_t total = 0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (params[p].size != grads[p].size) {
            throw DimensionError("adamw_step: parameter/gradient shape mismatch");
        }
        total += params[p].size;
    }
    if (state.first_moment.size() != total) state.reset(total);
    if (lr < 0.0) throw DimensionError("adamw_step: lr must be >= 0");

    for (const auto& g : grads) {
        for (std::size_t i = 0; i < g.size; ++i) {
            if (!std::isfinite(static_cast<double>(g.data[i]))) return false;
        }
    }

    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.step));
    std::size_t flat = 0;
    for (std::size_t p = 0; p < params.size(); ++p) {
        T* w = params[p].data;
        const T* g = grads[p].data;
        const bool decay = params[p].decay && cfg.weight_decay > 0.0;
        for (std::size_t i = 0; i < params[p].size; ++i, ++flat) {
            const double gv = static_cast<double>(g[i]);
            double& m = state.first_moment[flat];
            double& v = state.second_moment[flat];
            m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * gv;
            v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * gv * gv;
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            const double w_old = static_cast<double>(w[i]);
            double w_new = w_old - lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
            if (decay) w_new -= lr * cfg.weight_decay * w_old;
            w[i] = static_cast<T>(w_new);
        }
    }
    return true;
}

template bool adamw_step<float>(std::span<const ParamRef<float>>,
                                std::span<const ParamRef<float>>, AdamState&, double,
                                const TrainConfig&);
template bool adamw_step<double>(std::span<const ParamRef<double>>,
                                 std::span<const ParamRef<double>>, AdamState&, double,
                                 const TrainConfig&);

TrainDataset dataset_from_dump(QkDump dump) {
    TrainDataset data;
    data.sequences.push_back(QkSequence{std::move(dump.queries), std::move(dump.keys)});
    return data;
}

std::string format_train_report(const TrainReport& report,
                                std::span<const std::string> header_lines) {
    std::ostringstream os;
    for (const std::string& line : header_lines) os << "# " << line << "\n";
    os << "# columns: iter loss violation_rate lr\n";
    char buf[160];
    for (const IterRecord& rec : report.records) {
        std::snprintf(buf, sizeof(buf), "%u %.9g %.9g %.9g", rec.iter, rec.loss,
                      rec.violation_rate, rec.lr);
        os << buf << "\n";
    }
    std::snprintf(buf, sizeof(buf), "# final_holdout_iou %.6f", report.final_holdout_iou);
    os << buf << "\n";
    os << "# skipped_steps " << report.skipped_steps << "\n";
    return os.str();
}

// --------------------------------------------------------------------------
// Soft-code forward/backward per hasher kind
// --------------------------------------------------------------------------

namespace {

template <typename T>
T sigmoid(T z) {
    return T(1) / (T(1) + std::exp(-z));
}

// d SiLU(z) / dz = sigmoid(z) * (1 + z * (1 - sigmoid(z)))
template <typename T>
T silu_grad(T z) {
    const T s = sigmoid(z);
    return s * (T(1) + z * (T(1) - s));
}

template <typename T>
struct MlpCoder {
    using HasherType = MlpHasherT<T>;
    struct Cache {
        Matrix<T> z1, a1, z2, soft;
    };

    static Cache forward(const HasherType& h, const Matrix<T>& x, double /*gamma*/) {
        Cache c;
        c.z1 = matmul(x, h.w1);
        c.a1 = Matrix<T>(c.z1.rows(), c.z1.cols());
        for (std::size_t i = 0; i < c.z1.rows(); ++i) {
            T* zrow = c.z1.row(i).data();
            T* arow = c.a1.row(i).data();
            for (std::size_t j = 0; j < c.z1.cols(); ++j) {
                zrow[j] += h.b1[j];
                arow[j] = zrow[j] * sigmoid(zrow[j]);
            }
        }
        c.z2 = matmul(c.a1, h.w2);
        c.soft = soft_sign(c.z2, h.gamma);
        return c;
    }

    static void backward(const HasherType& h, const Matrix<T>& x, const Cache& c,
                         const Matrix<T>& d_soft, HasherType& grads) {
        Matrix<T> dz2(d_soft.rows(), d_soft.cols());
        for (std::size_t i = 0; i < d_soft.size(); ++i) {
            dz2.data()[i] = d_soft.data()[i] * soft_sign_grad(c.z2.data()[i], h.gamma);
        }
        add_matmul_at(c.a1, dz2, grads.w2);
        Matrix<T> da1 = matmul_bt(dz2, h.w2);
        for (std::size_t i = 0; i < da1.size(); ++i) {
            da1.data()[i] *= silu_grad(c.z1.data()[i]);
        }
        for (std::size_t i = 0; i < da1.rows(); ++i) {
            const T* row = da1.row(i).data();
            for (std::size_t j = 0; j < da1.cols(); ++j) grads.b1[j] += row[j];
        }
        add_matmul_at(x, da1, grads.w1);
    }

    static HasherType zeros_like(const HasherType& h) {
        HasherType g;
        g.w1 = Matrix<T>(h.w1.rows(), h.w1.cols());
        g.b1.assign(h.b1.size(), T(0));
        g.w2 = Matrix<T>(h.w2.rows(), h.w2.cols());
        g.gamma = h.gamma;
        return g;
    }
};

template <typename T>
struct LinearCoder {
    using HasherType = LinearHasherT<T>;
    struct Cache {
        Matrix<T> z, soft;
    };

    static Cache forward(const HasherType& h, const Matrix<T>& x, double gamma) {
        Cache c;
        c.z = matmul(x, h.projection);
        c.soft = soft_sign(c.z, static_cast<T>(gamma));
        return c;
    }

    static void backward(const HasherType& /*h*/, const Matrix<T>& x, const Cache& c,
                         const Matrix<T>& d_soft, HasherType& grads, double gamma) {
        Matrix<T> dz(d_soft.rows(), d_soft.cols());
        for (std::size_t i = 0; i < d_soft.size(); ++i) {
            dz.data()[i] = d_soft.data()[i] * soft_sign_grad(c.z.data()[i],
                                                             static_cast<T>(gamma));
        }
        add_matmul_at(x, dz, grads.projection);
    }

    static HasherType zeros_like(const HasherType& h) {
        return {Matrix<T>(h.projection.rows(), h.projection.cols())};
    }
};

template <typename T>
struct DownProjCoder {
    using HasherType = DownProjEstimatorT<T>;
    struct Cache {
        Matrix<T> soft;  // reduced-space vectors, no nonlinearity
    };

    static Cache forward(const HasherType& h, const Matrix<T>& x, double /*gamma*/) {
        return {matmul(x, h.projection)};
    }

    static void backward(const HasherType& /*h*/, const Matrix<T>& x, const Cache& /*c*/,
                         const Matrix<T>& d_soft, HasherType& grads) {
        add_matmul_at(x, d_soft, grads.projection);
    }

    static HasherType zeros_like(const HasherType& h) {
        return {Matrix<T>(h.projection.rows(), h.projection.cols())};
    }
};

inline double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Ranking loss straight from soft codes, touching only the sampled pair set.
// soft_q rows follow part.query_rows order. Accumulates d loss / d soft into
// the optional buffers.
template <typename T>
RankingLossResult ranking_soft_loss(const Matrix<T>& soft_q, const Matrix<T>& soft_k,
                                    const PairPartition& part, double beta, double alpha,
                                    Matrix<T>* d_soft_q, Matrix<T>* d_soft_k) {
    if (part.valid_pairs == 0) {
        throw EmptyPairError("ranking loss: no causally valid pairs to rank");
    }
    const std::size_t code_len = soft_q.cols();
    const double inv_pairs = 1.0 / static_cast<double>(part.valid_pairs);
    double loss_sum = 0.0;
    std::size_t violations = 0;
    std::vector<double> b_vals(part.top_count), c_vals(part.oth_count);
    std::vector<double> gb(part.top_count), gc(part.oth_count);
    for (std::size_t qi = 0; qi < part.query_rows.size(); ++qi) {
        const T* sq = soft_q.row(qi).data();
        for (std::uint32_t i = 0; i < part.top_count; ++i) {
            if (!part.top_valid[qi * part.top_count + i]) continue;
            const std::uint32_t key = part.top_indices[qi * part.top_count + i];
            const T* sk = soft_k.row(key).data();
            double acc = 0.0;
            for (std::size_t p = 0; p < code_len; ++p) {
                acc += static_cast<double>(sq[p]) * static_cast<double>(sk[p]);
            }
            b_vals[i] = acc;
        }
        for (std::uint32_t j = 0; j < part.oth_count; ++j) {
            if (!part.oth_valid[qi * part.oth_count + j]) continue;
            const std::uint32_t key = part.oth_indices[qi * part.oth_count + j];
            const T* sk = soft_k.row(key).data();
            double acc = 0.0;
            for (std::size_t p = 0; p < code_len; ++p) {
                acc += static_cast<double>(sq[p]) * static_cast<double>(sk[p]);
            }
            c_vals[j] = acc;
        }
        std::fill(gb.begin(), gb.end(), 0.0);
        std::fill(gc.begin(), gc.end(), 0.0);
        for (std::uint32_t i = 0; i < part.top_count; ++i) {
            if (!part.top_valid[qi * part.top_count + i]) continue;
            for (std::uint32_t j = 0; j < part.oth_count; ++j) {
                if (!part.oth_valid[qi * part.oth_count + j]) continue;
                const double z = b_vals[i] - c_vals[j];
                const double logit = beta * z - alpha;
                loss_sum += softplus(-logit);
                if (z < 0.0) ++violations;
                if (d_soft_q != nullptr) {
                    const double g = beta * (1.0 - 1.0 / (1.0 + std::exp(-logit))) * inv_pairs;
                    gb[i] -= g;
                    gc[j] += g;
                }
            }
        }
        if (d_soft_q != nullptr) {
            T* dq = d_soft_q->row(qi).data();
            for (std::uint32_t i = 0; i < part.top_count; ++i) {
                if (gb[i] == 0.0) continue;
                const std::uint32_t key = part.top_indices[qi * part.top_count + i];
                const T g = static_cast<T>(gb[i]);
                const T* sk = soft_k.row(key).data();
                T* dk = d_soft_k->row(key).data();
                for (std::size_t p = 0; p < code_len; ++p) {
                    dq[p] += g * sk[p];
                    dk[p] += g * sq[p];
                }
            }
            for (std::uint32_t j = 0; j < part.oth_count; ++j) {
                if (gc[j] == 0.0) continue;
                const std::uint32_t key = part.oth_indices[qi * part.oth_count + j];
                const T g = static_cast<T>(gc[j]);
                const T* sk = soft_k.row(key).data();
                T* dk = d_soft_k->row(key).data();
                for (std::size_t p = 0; p < code_len; ++p) {
                    dq[p] += g * sk[p];
                    dk[p] += g * sq[p];
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

// MSE over causally valid entries of the selected query rows.
template <typename T>
double recon_soft_loss(const Matrix<T>& soft_q, const Matrix<T>& soft_k,
                       const Matrix<T>& true_logits, const PairPartition& part,
                       std::span<const std::uint32_t> causal_offsets, Matrix<T>* d_soft_q,
                       Matrix<T>* d_soft_k) {
    const std::size_t n = soft_k.rows();
    Matrix<T> draft = matmul_bt(soft_q, soft_k);
    std::size_t count = 0;
    for (std::uint32_t row : part.query_rows) {
        count += std::min<std::size_t>(causal_offsets[row], n);
    }
    if (count == 0) throw EmptyPairError("reconstruction loss: no causally valid entries");
    double loss = 0.0;
    Matrix<T> g(draft.rows(), draft.cols());
    const double scale = 2.0 / static_cast<double>(count);
    for (std::size_t qi = 0; qi < part.query_rows.size(); ++qi) {
        const std::uint32_t row = part.query_rows[qi];
        const std::size_t valid = std::min<std::size_t>(causal_offsets[row], n);
        const T* drow = draft.row(qi).data();
        const T* trow = true_logits.row(row).data();
        T* grow = g.row(qi).data();
        for (std::size_t j = 0; j < valid; ++j) {
            const double diff = static_cast<double>(drow[j]) - static_cast<double>(trow[j]);
            loss += diff * diff;
            grow[j] = static_cast<T>(scale * diff);
        }
    }
    if (d_soft_q != nullptr) {
        *d_soft_q = matmul(g, soft_k);
        add_matmul_at(g, soft_q, *d_soft_k);
    }
    return loss / static_cast<double>(count);
}

// --------------------------------------------------------------------------
// Training loop
// --------------------------------------------------------------------------

struct PreparedSequence {
    Matrix<float> true_logits;  // q x n
    TopkOrder order;            // over training rows only
    std::uint32_t q_train = 0;
    std::vector<std::uint32_t> offsets;  // per query row, min(i+1, n)
};

PreparedSequence prepare_sequence(const QkSequence& seq, const TrainConfig& cfg) {
    const std::size_t q = seq.queries.rows();
    const std::size_t n = seq.keys.rows();
    PreparedSequence prep;
    prep.true_logits = matmul_bt(seq.queries, seq.keys);
    const float scale = 1.0f / std::sqrt(static_cast<float>(seq.keys.cols()));
    for (std::size_t i = 0; i < prep.true_logits.size(); ++i) {
        prep.true_logits.data()[i] *= scale;
    }
    prep.offsets.resize(q);
    for (std::size_t i = 0; i < q; ++i) {
        prep.offsets[i] = static_cast<std::uint32_t>(std::min(i + 1, n));
    }
    std::uint32_t holdout = std::min<std::uint32_t>(cfg.holdout_queries,
                                                    static_cast<std::uint32_t>(q / 4));
    prep.q_train = static_cast<std::uint32_t>(q) - holdout;
    if (prep.q_train < 2) {
        prep.q_train = static_cast<std::uint32_t>(q);
    }
    Matrix<float> train_view(prep.q_train, static_cast<std::uint32_t>(n));
    std::copy(prep.true_logits.data(), prep.true_logits.data() + train_view.size(),
              train_view.data());
    prep.order = build_topk_order(train_view,
                                  {prep.offsets.data(), prep.q_train});
    return prep;
}

template <typename T>
Matrix<T> gather_rows(const Matrix<float>& src, std::span<const std::uint32_t> rows) {
    Matrix<T> out(rows.size(), src.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const float* s = src.row(rows[i]).data();
        T* d = out.row(i).data();
        for (std::size_t j = 0; j < src.cols(); ++j) d[j] = static_cast<T>(s[j]);
    }
    return out;
}

// Hard-code retrieval IoU against oracle logits on the held-out query rows.
template <typename H>
double holdout_iou(const H& hasher, const QkSequence& seq, const PreparedSequence& prep,
                   const TrainConfig& cfg) {
    const std::size_t q = seq.queries.rows();
    const std::size_t n = seq.keys.rows();
    const std::uint32_t first = prep.q_train < q ? prep.q_train : 0;
    const std::uint32_t budget = budget_from_rate(cfg.holdout_budget_rate, n);

    std::vector<std::int32_t> hash_scores(n);
    std::vector<float> dp_scores(n);

    CodeMatrix key_codes, query_codes;
    Matrix<float> kp, qp;
    if constexpr (std::is_same_v<H, DownProjEstimatorT<float>>) {
        kp = matmul(seq.keys, hasher.projection);
        qp = matmul(seq.queries, hasher.projection);
    } else if constexpr (std::is_same_v<H, MlpHasherT<float>>) {
        key_codes = pack_bits(mlp_hash(hasher, seq.keys));
        query_codes = pack_bits(mlp_hash(hasher, seq.queries));
    } else {
        key_codes = pack_bits(linear_hash(hasher, seq.keys));
        query_codes = pack_bits(linear_hash(hasher, seq.queries));
    }

    double iou_sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t row = first; row < q; ++row) {
        const std::uint32_t valid = prep.offsets[row];
        const std::uint32_t k = std::min(budget, valid);
        const float* logits = prep.true_logits.row(row).data();
        const auto oracle = top_k_indices<float>({logits, valid}, k);
        std::vector<std::uint32_t> pred;
        if constexpr (std::is_same_v<H, DownProjEstimatorT<float>>) {
            for (std::uint32_t j = 0; j < valid; ++j) {
                dp_scores[j] = dot<float>(qp.row(row), kp.row(j));
            }
            pred = top_k_indices<float>({dp_scores.data(), valid}, k);
        } else {
            nxor_scores_into(query_codes.row(static_cast<std::uint32_t>(row)), key_codes, valid,
                             hash_scores.data());
            pred = top_k_indices<std::int32_t>({hash_scores.data(), valid}, k);
        }
        iou_sum += iou(pred, oracle);
        ++counted;
    }
    return counted > 0 ? iou_sum / static_cast<double>(counted) : 0.0;
}

template <typename Coder>
TrainReport train_loop(typename Coder::HasherType& hasher, const TrainDataset& dataset,
                       const RankingLossConfig& loss_cfg, const TrainConfig& cfg,
                       TrainLoss loss_kind) {
    using T = float;
    const auto t0 = std::chrono::steady_clock::now();
    cfg.validate();
    if (dataset.sequences.empty()) throw DimensionError("train_hasher: dataset is empty");
    for (const QkSequence& seq : dataset.sequences) {
        if (seq.queries.rows() != seq.keys.rows()) {
            throw DimensionError("train_hasher: queries and keys must be causally aligned");
        }
        if (seq.queries.rows() < 2) {
            throw DimensionError("train_hasher: sequences need at least two positions");
        }
    }

    auto params = collect_params(hasher);
    auto grads_holder = Coder::zeros_like(hasher);
    auto grads = collect_params(grads_holder);
    AdamState state;
    std::size_t total = 0;
    for (const auto& p : params) total += p.size;
    state.reset(total);

    std::vector<std::unique_ptr<PreparedSequence>> cache(dataset.sequences.size());
    auto prepared = [&](std::size_t idx) -> PreparedSequence& {
        if (!cache[idx]) {
            const QkSequence& seq = dataset.sequences[idx];
            if (seq.queries.cols() != hasher.input_dim()) {
                throw DimensionError("train_hasher: data dimension " +
                                     std::to_string(seq.queries.cols()) +
                                     " does not match hasher dimension " +
                                     std::to_string(hasher.input_dim()));
            }
            cache[idx] = std::make_unique<PreparedSequence>(prepare_sequence(seq, cfg));
        }
        return *cache[idx];
    };

    TrainReport report;
    report.records.reserve(cfg.num_iters);

    for (std::uint32_t iter = 0; iter < cfg.num_iters; ++iter) {
        const double lr = lr_at(iter, cfg);
        for (const auto& g : grads) std::fill(g.data, g.data + g.size, T(0));

        auto eng = make_engine(derive_seed(cfg.seed, iter));
        double loss_acc = 0.0, viol_acc = 0.0;
        for (std::uint32_t b = 0; b < cfg.batch; ++b) {
            std::uniform_int_distribution<std::size_t> pick(0, dataset.sequences.size() - 1);
            const std::size_t seq_idx = pick(eng);
            const std::uint64_t part_seed = eng();
            const QkSequence& seq = dataset.sequences[seq_idx];
            PreparedSequence& prep = prepared(seq_idx);

            const PairPartition part = partition_topk(prep.order, loss_cfg, part_seed);
            const Matrix<T> xq = gather_rows<T>(seq.queries, part.query_rows);
            const Matrix<T>& xk = seq.keys;

            auto fq = Coder::forward(hasher, xq, cfg.soft_gamma);
            auto fk = Coder::forward(hasher, xk, cfg.soft_gamma);

            Matrix<T> dsq(fq.soft.rows(), fq.soft.cols());
            Matrix<T> dsk(fk.soft.rows(), fk.soft.cols());
            double loss_val = 0.0, viol_val = 0.0;
            if (loss_kind == TrainLoss::ranking) {
                const auto res = ranking_soft_loss(fq.soft, fk.soft, part, loss_cfg.beta,
                                                   loss_cfg.alpha, &dsq, &dsk);
                loss_val = res.loss;
                viol_val = res.violation_rate;
            } else {
                loss_val = recon_soft_loss(fq.soft, fk.soft, prep.true_logits, part,
                                           {prep.offsets.data(), prep.offsets.size()}, &dsq,
                                           &dsk);
            }
            if (!std::isfinite(loss_val)) {
                throw NumericError("train_hasher: loss became non-finite at iteration " +
                                   std::to_string(iter));
            }
            if (cfg.batch > 1) {
                const T inv = static_cast<T>(1.0 / cfg.batch);
                for (std::size_t i = 0; i < dsq.size(); ++i) dsq.data()[i] *= inv;
                for (std::size_t i = 0; i < dsk.size(); ++i) dsk.data()[i] *= inv;
            }
            if constexpr (std::is_same_v<Coder, LinearCoder<float>>) {
                Coder::backward(hasher, xq, fq, dsq, grads_holder, cfg.soft_gamma);
                Coder::backward(hasher, xk, fk, dsk, grads_holder, cfg.soft_gamma);
            } else {
                Coder::backward(hasher, xq, fq, dsq, grads_holder);
                Coder::backward(hasher, xk, fk, dsk, grads_holder);
            }
            loss_acc += loss_val;
            viol_acc += viol_val;
        }

        clip_gradient_norm<T>(grads, cfg.grad_clip);
        if (!adamw_step<T>(params, grads, state, lr, cfg)) {
            report.skipped_steps += 1;
        }
        report.records.push_back(IterRecord{iter, loss_acc / cfg.batch, viol_acc / cfg.batch,
                                            lr});
    }

    const std::size_t eval_seq = 0;
    report.final_holdout_iou =
        holdout_iou(hasher, dataset.sequences[eval_seq], prepared(eval_seq), cfg);
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace

TrainReport train_hasher(AnyHasher& hasher, const TrainDataset& dataset,
                         const RankingLossConfig& loss_cfg, const TrainConfig& cfg,
                         TrainLoss loss_kind) {
    if (auto* mlp = std::get_if<MlpHasher>(&hasher)) {
        return train_loop<MlpCoder<float>>(*mlp, dataset, loss_cfg, cfg, loss_kind);
    }
    if (auto* lin = std::get_if<LinearHasher>(&hasher)) {
        return train_loop<LinearCoder<float>>(*lin, dataset, loss_cfg, cfg, loss_kind);
    }
    auto& dp = std::get<DownProjEstimator>(hasher);
    return train_loop<DownProjCoder<float>>(dp, dataset, loss_cfg, cfg, loss_kind);
}

// --------------------------------------------------------------------------
// Finite-difference gradient validation (f64)
// --------------------------------------------------------------------------

double finite_diff_check(const MlpHasherT<double>& hasher, const Matrix<double>& queries,
                         const Matrix<double>& keys, const RankingLossConfig& loss_cfg,
                         double step, std::uint64_t seed) {
    if (step <= 0.0) throw DimensionError("finite_diff_check: step must be positive");
    const std::size_t q = queries.rows();
    const std::size_t n = keys.rows();
    Matrix<double> true_logits = matmul_bt(queries, keys);
    const double scale = 1.0 / std::sqrt(static_cast<double>(keys.cols()));
    for (std::size_t i = 0; i < true_logits.size(); ++i) true_logits.data()[i] *= scale;
    std::vector<std::uint32_t> offsets(q);
    for (std::size_t i = 0; i < q; ++i) {
        offsets[i] = static_cast<std::uint32_t>(std::min(i + 1, n));
    }
    const TopkOrder order = build_topk_order(true_logits, offsets);
    const PairPartition part = partition_topk(order, loss_cfg, seed);

    MlpHasherT<double> work = hasher;
    const Matrix<double> xq = [&] {
        Matrix<double> out(part.query_rows.size(), queries.cols());
        for (std::size_t i = 0; i < part.query_rows.size(); ++i) {
            const auto src = queries.row(part.query_rows[i]);
            std::copy(src.begin(), src.end(), out.row(i).begin());
        }
        return out;
    }();

    const auto loss_value = [&]() {
        auto fq = MlpCoder<double>::forward(work, xq, 0.0);
        auto fk = MlpCoder<double>::forward(work, keys, 0.0);
        return ranking_soft_loss<double>(fq.soft, fk.soft, part, loss_cfg.beta, loss_cfg.alpha,
                                         nullptr, nullptr)
            .loss;
    };

    // Analytic gradient through the same path.
    MlpHasherT<double> grads = MlpCoder<double>::zeros_like(work);
    {
        auto fq = MlpCoder<double>::forward(work, xq, 0.0);
        auto fk = MlpCoder<double>::forward(work, keys, 0.0);
        Matrix<double> dsq(fq.soft.rows(), fq.soft.cols());
        Matrix<double> dsk(fk.soft.rows(), fk.soft.cols());
        ranking_soft_loss<double>(fq.soft, fk.soft, part, loss_cfg.beta, loss_cfg.alpha, &dsq,
                                  &dsk);
        MlpCoder<double>::backward(work, xq, fq, dsq, grads);
        MlpCoder<double>::backward(work, keys, fk, dsk, grads);
    }

    auto work_params = collect_params(work);
    auto grad_params = collect_params(grads);
    double grad_scale = 0.0;
    for (const auto& g : grad_params) {
        for (std::size_t i = 0; i < g.size; ++i) {
            grad_scale = std::max(grad_scale, std::abs(g.data[i]));
        }
    }
    const double floor = std::max(1e-2 * grad_scale, 1e-12);

    double worst = 0.0;
    for (std::size_t p = 0; p < work_params.size(); ++p) {
        double* data = work_params[p].data;
        const double* analytic = grad_params[p].data;
        for (std::size_t i = 0; i < work_params[p].size; ++i) {
            const double saved = data[i];
            data[i] = saved + step;
            const double up = loss_value();
            data[i] = saved - step;
            const double down = loss_value();
            data[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
            worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace spotlight
