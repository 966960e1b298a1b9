#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "spotlight/errors.hpp"
#include "spotlight/ranking_loss.hpp"

using namespace spotlight;

namespace {

Matrix<double> random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& eng,
                             double scale = 1.0) {
    std::normal_distribution<double> gauss(0.0, scale);
    Matrix<double> m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = gauss(eng);
    return m;
}

// Multiples of 2^-20 in [-8, 8]; sums and shifts of these are exact doubles.
Matrix<double> dyadic_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& eng) {
    std::uniform_int_distribution<int> grid(-(8 << 20), 8 << 20);
    Matrix<double> m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<double>(grid(eng)) / (1 << 20);
    }
    return m;
}

std::vector<std::uint32_t> full_offsets(std::size_t q, std::uint32_t n) {
    return std::vector<std::uint32_t>(q, n);
}

// Loop-based oracle: enumerate every (query, top, oth) pair from scratch and
// aggregate loss, violations, and gradients.
struct PairOracle {
    double loss = 0.0;
    double violation_rate = 0.0;
    std::size_t pairs = 0;
    Matrix<double> grad;
};

PairOracle pair_oracle(const Matrix<double>& draft, const PairPartition& part, double beta,
                       double alpha) {
    PairOracle out;
    out.grad = Matrix<double>(draft.rows(), draft.cols());
    double loss_sum = 0.0;
    std::size_t violations = 0;
    for (std::size_t qi = 0; qi < part.query_rows.size(); ++qi) {
        for (std::uint32_t i = 0; i < part.top_count; ++i) {
            if (!part.top_valid[qi * part.top_count + i]) continue;
            for (std::uint32_t j = 0; j < part.oth_count; ++j) {
                if (!part.oth_valid[qi * part.oth_count + j]) continue;
                ++out.pairs;
            }
        }
    }
    if (out.pairs == 0) return out;
    for (std::size_t qi = 0; qi < part.query_rows.size(); ++qi) {
        const std::uint32_t row = part.query_rows[qi];
        for (std::uint32_t i = 0; i < part.top_count; ++i) {
            if (!part.top_valid[qi * part.top_count + i]) continue;
            const std::uint32_t bi = part.top_indices[qi * part.top_count + i];
            for (std::uint32_t j = 0; j < part.oth_count; ++j) {
                if (!part.oth_valid[qi * part.oth_count + j]) continue;
                const std::uint32_t cj = part.oth_indices[qi * part.oth_count + j];
                const double z = draft(row, bi) - draft(row, cj);
                loss_sum += -std::log(1.0 / (1.0 + std::exp(-(beta * z - alpha))));
                if (z < 0.0) ++violations;
                const double s = 1.0 / (1.0 + std::exp(-(beta * z - alpha)));
                const double g = beta * (1.0 - s) / static_cast<double>(out.pairs);
                out.grad(row, bi) -= g;
                out.grad(row, cj) += g;
            }
        }
    }
    out.loss = loss_sum / static_cast<double>(out.pairs);
    out.violation_rate = static_cast<double>(violations) / static_cast<double>(out.pairs);
    return out;
}

}  // namespace

TEST_CASE("partition_topk splits by reference score") {
    Matrix<double> true_attn(1, 4, {0.3, 0.9, 0.1, 0.7});
    RankingLossConfig cfg;
    cfg.maskout = 0.5;  // k = 2
    const auto offsets = full_offsets(1, 4);
    const PairPartition part = partition_topk(true_attn, cfg, offsets, 0);
    CHECK(part.k_full == 2);
    REQUIRE(part.top_count == 2);
    CHECK(part.top_indices[0] == 1);
    CHECK(part.top_indices[1] == 3);
    REQUIRE(part.oth_count == 2);
    CHECK(part.oth_indices[0] == 0);
    CHECK(part.oth_indices[1] == 2);
    CHECK(part.valid_pairs == 4);
}

TEST_CASE("partition_topk floors the top count") {
    Matrix<double> scores(1, 10);
    RankingLossConfig cfg;
    cfg.maskout = 0.98;  // floor(10 * 0.02) == 0
    CHECK_THROWS_AS(partition_topk(scores, cfg, full_offsets(1, 10), 0), DimensionError);
}

TEST_CASE("fully masked queries contribute no pairs") {
    std::mt19937_64 eng(3);
    const Matrix<double> true_attn = random_matrix(4, 8, eng);
    RankingLossConfig cfg;
    cfg.maskout = 0.75;  // k = 2
    // Query 0 sees a single position; queries 2,3 see everything.
    const std::vector<std::uint32_t> offsets{1, 4, 8, 8};
    const PairPartition part = partition_topk(true_attn, cfg, offsets, 7);

    // Loop oracle: valid pair count = valid_top * valid_oth per query.
    std::size_t expect = 0;
    for (std::size_t qi = 0; qi < part.query_rows.size(); ++qi) {
        std::size_t vt = 0, vo = 0;
        for (std::uint32_t i = 0; i < part.top_count; ++i) {
            vt += part.top_valid[qi * part.top_count + i];
        }
        for (std::uint32_t j = 0; j < part.oth_count; ++j) {
            vo += part.oth_valid[qi * part.oth_count + j];
        }
        expect += vt * vo;
    }
    CHECK(part.valid_pairs == expect);

    // Query 0 has one valid position; it lands in B, so C is fully masked and
    // the query adds nothing.
    std::size_t vt0 = 0, vo0 = 0;
    for (std::uint32_t i = 0; i < part.top_count; ++i) vt0 += part.top_valid[i];
    for (std::uint32_t j = 0; j < part.oth_count; ++j) vo0 += part.oth_valid[j];
    CHECK(vt0 * vo0 == 0);
}

TEST_CASE("max_top and max_oth cut to one pair per query") {
    std::mt19937_64 eng(5);
    const Matrix<double> true_attn = random_matrix(3, 16, eng);
    RankingLossConfig cfg;
    cfg.maskout = 0.75;
    cfg.max_top = 1;
    cfg.max_oth = 1;
    const PairPartition part = partition_topk(true_attn, cfg, full_offsets(3, 16), 11);
    CHECK(part.top_count == 1);
    CHECK(part.oth_count == 1);
    CHECK(part.valid_pairs == 3);
}

TEST_CASE("single-pair loss equals -ln sigmoid(beta*delta - alpha)") {
    Matrix<double> draft(1, 2, {2.0, 0.0});
    Matrix<double> true_attn(1, 2, {1.0, 0.0});
    RankingLossConfig cfg;
    cfg.beta = 1.0;
    cfg.alpha = 0.0;
    cfg.maskout = 0.5;
    const auto res = ranking_loss(draft, true_attn, cfg, full_offsets(1, 2), 0);
    CHECK(res.pair_count == 1);
    CHECK(res.loss == doctest::Approx(0.1269280110429726).epsilon(1e-12));
    CHECK(res.violation_rate == 0.0);
}

TEST_CASE("equal scores cost ln 2 per pair") {
    std::mt19937_64 eng(7);
    const Matrix<double> true_attn = random_matrix(2, 8, eng);
    Matrix<double> draft(2, 8);
    draft.fill(1.25);
    RankingLossConfig cfg;
    cfg.beta = 1.0;
    cfg.alpha = 0.0;
    cfg.maskout = 0.75;
    const auto res = ranking_loss(draft, true_attn, cfg, full_offsets(2, 8), 0);
    CHECK(res.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("loss is exactly shift invariant") {
    std::mt19937_64 eng(11);
    for (int iter = 0; iter < 20; ++iter) {
        const Matrix<double> true_attn = dyadic_matrix(4, 16, eng);
        const Matrix<double> draft = dyadic_matrix(4, 16, eng);
        Matrix<double> shifted = draft;
        const double c = 3.25;
        for (std::size_t i = 0; i < shifted.size(); ++i) shifted.data()[i] += c;
        RankingLossConfig cfg;
        cfg.maskout = 0.75;
        const auto offsets = full_offsets(4, 16);
        const auto a = ranking_loss(draft, true_attn, cfg, offsets, 5);
        const auto b = ranking_loss(shifted, true_attn, cfg, offsets, 5);
        CHECK(a.loss == b.loss);
        CHECK(a.violation_rate == b.violation_rate);
    }
}

TEST_CASE("violation rate agrees with a brute-force pair scan") {
    std::mt19937_64 eng(13);
    for (int iter = 0; iter < 100; ++iter) {
        const std::size_t q = 1 + eng() % 4;
        const std::size_t n = 6 + eng() % 10;
        const Matrix<double> true_attn = random_matrix(q, n, eng);
        const Matrix<double> draft = random_matrix(q, n, eng);
        RankingLossConfig cfg;
        cfg.maskout = 0.6;
        std::vector<std::uint32_t> offsets(q);
        for (auto& o : offsets) o = 2 + eng() % (n - 1);
        const std::uint64_t seed = eng();
        const PairPartition part = partition_topk(true_attn, cfg, offsets, seed);
        if (part.valid_pairs == 0) continue;
        const auto res = ranking_loss(draft, true_attn, cfg, offsets, seed);
        const PairOracle oracle = pair_oracle(draft, part, cfg.beta, cfg.alpha);
        CHECK(res.violation_rate == doctest::Approx(oracle.violation_rate).epsilon(1e-12));
        CHECK(res.loss == doctest::Approx(oracle.loss).epsilon(1e-12));
        if (res.violation_rate == 0.0) {
            // Every pairwise difference must be non-negative.
            for (std::size_t qi = 0; qi < part.query_rows.size(); ++qi) {
                const std::uint32_t row = part.query_rows[qi];
                for (std::uint32_t i = 0; i < part.top_count; ++i) {
                    if (!part.top_valid[qi * part.top_count + i]) continue;
                    for (std::uint32_t j = 0; j < part.oth_count; ++j) {
                        if (!part.oth_valid[qi * part.oth_count + j]) continue;
                        CHECK(draft(row, part.top_indices[qi * part.top_count + i]) >=
                              draft(row, part.oth_indices[qi * part.oth_count + j]));
                    }
                }
            }
        }
    }
}

TEST_CASE("gradient matches central finite differences") {
    std::mt19937_64 eng(17);
    const double step = 1e-5;
    double worst = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
        const std::size_t q = 4, n = 16;
        const Matrix<double> true_attn = random_matrix(q, n, eng);
        Matrix<double> draft = random_matrix(q, n, eng);
        RankingLossConfig cfg;
        cfg.beta = 0.5 + (iter % 4) * 0.5;
        cfg.alpha = (iter % 3) * 1.5;
        cfg.maskout = 0.75;
        if (iter % 2 == 1) {
            cfg.max_top = 2;
            cfg.max_oth = 5;
            cfg.query_subsample = 3;
        }
        std::vector<std::uint32_t> offsets(q, n);
        if (iter % 3 == 0) {
            for (auto& o : offsets) o = 8 + eng() % 9;
        }
        const std::uint64_t seed = eng();
        const PairPartition part = partition_topk(true_attn, cfg, offsets, seed);
        if (part.valid_pairs == 0) continue;
        const Matrix<double> grad = ranking_loss_grad(draft, true_attn, cfg, offsets, seed);

        double total = 0.0;
        for (std::size_t i = 0; i < grad.size(); ++i) total += grad.data()[i];
        CHECK(std::abs(total) < 1e-12);  // differences only

        for (std::size_t i = 0; i < draft.size(); ++i) {
            const double saved = draft.data()[i];
            draft.data()[i] = saved + step;
            const double up = ranking_pair_loss(draft, part, cfg.beta, cfg.alpha, nullptr).loss;
            draft.data()[i] = saved - step;
            const double down =
                ranking_pair_loss(draft, part, cfg.beta, cfg.alpha, nullptr).loss;
            draft.data()[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double denom = std::max({std::abs(grad.data()[i]), std::abs(numeric), 1e-8});
            if (grad.data()[i] == 0.0 && std::abs(numeric) < 1e-12) continue;
            worst = std::max(worst, std::abs(grad.data()[i] - numeric) / denom);
        }
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("masked entries receive exactly zero gradient") {
    std::mt19937_64 eng(19);
    const std::size_t q = 3, n = 12;
    const Matrix<double> true_attn = random_matrix(q, n, eng);
    const Matrix<double> draft = random_matrix(q, n, eng);
    RankingLossConfig cfg;
    cfg.maskout = 0.75;
    const std::vector<std::uint32_t> offsets{4, 6, 12};
    const Matrix<double> grad = ranking_loss_grad(draft, true_attn, cfg, offsets, 3);
    for (std::size_t row = 0; row < q; ++row) {
        for (std::size_t j = offsets[row]; j < n; ++j) CHECK(grad(row, j) == 0.0);
    }
}

TEST_CASE("raising a top score never raises the loss") {
    std::mt19937_64 eng(23);
    for (int iter = 0; iter < 50; ++iter) {
        const std::size_t q = 2, n = 10;
        const Matrix<double> true_attn = random_matrix(q, n, eng);
        Matrix<double> draft = random_matrix(q, n, eng);
        RankingLossConfig cfg;
        cfg.maskout = 0.7;
        const auto offsets = full_offsets(q, n);
        const std::uint64_t seed = eng();
        const PairPartition part = partition_topk(true_attn, cfg, offsets, seed);
        const double before = ranking_pair_loss(draft, part, cfg.beta, cfg.alpha, nullptr).loss;

        Matrix<double> up = draft;
        up(0, part.top_indices[0]) += 0.5;
        CHECK(ranking_pair_loss(up, part, cfg.beta, cfg.alpha, nullptr).loss <= before + 1e-15);

        Matrix<double> worse = draft;
        worse(0, part.oth_indices[0]) += 0.5;
        CHECK(ranking_pair_loss(worse, part, cfg.beta, cfg.alpha, nullptr).loss >=
              before - 1e-15);
    }
}

TEST_CASE("empty pair set is rejected") {
    Matrix<double> draft(1, 4);
    Matrix<double> true_attn(1, 4);
    RankingLossConfig cfg;
    cfg.maskout = 0.5;
    // Single valid position lands in B, so C is empty.
    const std::vector<std::uint32_t> offsets{1};
    CHECK_THROWS_AS(ranking_loss(draft, true_attn, cfg, offsets, 0), EmptyPairError);
}

TEST_CASE("reconstruction loss") {
    std::mt19937_64 eng(29);
    const Matrix<double> truth = random_matrix(3, 8, eng);

    SUBCASE("perfect reconstruction is zero") {
        CHECK(reconstruction_loss(truth, truth, full_offsets(3, 8)) == 0.0);
    }

    SUBCASE("constant offset of one costs exactly one") {
        Matrix<double> off = truth;
        for (std::size_t i = 0; i < off.size(); ++i) off.data()[i] += 1.0;
        CHECK(reconstruction_loss(off, truth, full_offsets(3, 8)) ==
              doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("matches a scalar loop oracle") {
        const Matrix<double> draft = random_matrix(3, 8, eng);
        const std::vector<std::uint32_t> offsets{2, 8, 5};
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t r = 0; r < 3; ++r) {
            for (std::size_t j = 0; j < offsets[r]; ++j) {
                const double d = draft(r, j) - truth(r, j);
                sum += d * d;
                ++count;
            }
        }
        CHECK(reconstruction_loss(draft, truth, offsets) ==
              doctest::Approx(sum / count).epsilon(1e-12));
    }

    SUBCASE("gradient matches finite differences") {
        Matrix<double> draft = random_matrix(3, 8, eng);
        const std::vector<std::uint32_t> offsets{2, 8, 5};
        const Matrix<double> grad = reconstruction_loss_grad(draft, truth, offsets);
        const double step = 1e-6;
        for (std::size_t i = 0; i < draft.size(); ++i) {
            const double saved = draft.data()[i];
            draft.data()[i] = saved + step;
            const double up = reconstruction_loss(draft, truth, offsets);
            draft.data()[i] = saved - step;
            const double down = reconstruction_loss(draft, truth, offsets);
            draft.data()[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            CHECK(grad.data()[i] == doctest::Approx(numeric).epsilon(1e-6));
        }
    }
}
