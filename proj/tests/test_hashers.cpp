#include <cmath>
#include <cstdio>
#include <random>

#include "doctest.h"
#include "spotlight/bitcodes.hpp"
#include "spotlight/errors.hpp"
#include "spotlight/hashers.hpp"
#include "spotlight/linalg.hpp"

using namespace spotlight;

namespace {

template <typename T>
Matrix<T> random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& eng,
                        double scale = 1.0) {
    std::normal_distribution<double> gauss(0.0, scale);
    Matrix<T> m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(gauss(eng));
    return m;
}

// Straightforward dense oracle for the two-layer forward pass.
Matrix<double> mlp_forward_oracle(const MlpHasherT<double>& h, const Matrix<double>& x) {
    Matrix<double> out(x.rows(), h.w2.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        std::vector<double> hidden(h.w1.cols(), 0.0);
        for (std::size_t j = 0; j < h.w1.cols(); ++j) {
            double z = h.b1[j];
            for (std::size_t p = 0; p < h.w1.rows(); ++p) z += x(i, p) * h.w1(p, j);
            hidden[j] = z / (1.0 + std::exp(-z));
        }
        for (std::size_t j = 0; j < h.w2.cols(); ++j) {
            double z = 0.0;
            for (std::size_t p = 0; p < h.w2.rows(); ++p) z += hidden[p] * h.w2(p, j);
            out(i, j) = z;
        }
    }
    return out;
}

double max_orthogonality_error(const Matrix<double>& q) {
    const std::size_t d = q.rows();
    double worst = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < d; ++p) acc += q(p, i) * q(p, j);
            worst = std::max(worst, std::abs(acc - (i == j ? 1.0 : 0.0)));
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("random_rotation is orthogonal with determinant +1 (f64 path)") {
    for (const std::uint32_t d : {2u, 8u, 64u}) {
        const Matrix<double> q = random_rotation(d, 1234 + d);
        CHECK(max_orthogonality_error(q) < 1e-10);
        CHECK(std::abs(lu_determinant(q) - 1.0) < 1e-10);
    }
}

TEST_CASE("qr_rotation_init d=1 forces +1") {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        const LinearHasher h = qr_rotation_init(1, seed);
        CHECK(h.projection(0, 0) == doctest::Approx(1.0f));
    }
}

TEST_CASE("qr_rotation_init stays orthogonal through f32 storage") {
    for (const std::uint32_t d : {2u, 8u, 64u, 128u}) {
        const LinearHasher h = qr_rotation_init(d, 99 + d);
        const Matrix<double> q = matrix_cast<double>(h.projection);
        CHECK(max_orthogonality_error(q) < 1e-6);
        CHECK(std::abs(lu_determinant(q) - 1.0) < 1e-6);
    }
}

TEST_CASE("linear_hash sign conventions") {
    std::mt19937_64 eng(5);

    SUBCASE("zero input maps every bit to 1") {
        const LinearHasher h = qr_rotation_init(16, 3);
        const BitMatrix bits = linear_hash(h, Matrix<float>(1, 16));
        for (std::size_t j = 0; j < 16; ++j) CHECK(bits.get(0, j));
    }

    SUBCASE("identity projection reads off input signs") {
        LinearHasher h;
        h.projection = Matrix<float>(4, 4);
        for (int i = 0; i < 4; ++i) h.projection(i, i) = 1.0f;
        Matrix<float> x(1, 4, {1.0f, -1.0f, 2.0f, -0.5f});
        const BitMatrix bits = linear_hash(h, x);
        CHECK(bits.get(0, 0));
        CHECK(!bits.get(0, 1));
        CHECK(bits.get(0, 2));
        CHECK(!bits.get(0, 3));
    }

    SUBCASE("negating the input flips all non-zero bits") {
        const LinearHasher h = qr_rotation_init(32, 8);
        const Matrix<float> x = random_matrix<float>(6, 32, eng);
        Matrix<float> neg = x;
        for (std::size_t i = 0; i < neg.size(); ++i) neg.data()[i] = -neg.data()[i];
        const BitMatrix a = linear_hash(h, x);
        const BitMatrix b = linear_hash(h, neg);
        for (std::size_t i = 0; i < a.rows(); ++i) {
            for (std::size_t j = 0; j < a.cols(); ++j) CHECK(a.get(i, j) != b.get(i, j));
        }
    }

    SUBCASE("dimension mismatch is rejected") {
        const LinearHasher h = qr_rotation_init(8, 1);
        CHECK_THROWS_AS(linear_hash(h, Matrix<float>(1, 9)), DimensionError);
    }
}

TEST_CASE("mlp_forward matches a dense oracle") {
    std::mt19937_64 eng(31);

    SUBCASE("zero network maps to zero") {
        MlpHasherT<double> h;
        h.w1 = Matrix<double>(8, 8);
        h.b1.assign(8, 0.0);
        h.w2 = Matrix<double>(8, 8);
        const Matrix<double> out = mlp_forward(h, random_matrix<double>(3, 8, eng));
        for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.data()[i] == 0.0);
    }

    SUBCASE("identity layers fix zero input") {
        MlpHasherT<double> h;
        h.w1 = Matrix<double>(4, 4);
        h.w2 = Matrix<double>(4, 4);
        for (int i = 0; i < 4; ++i) h.w1(i, i) = h.w2(i, i) = 1.0;
        h.b1.assign(4, 0.0);
        const Matrix<double> out = mlp_forward(h, Matrix<double>(1, 4));
        for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.data()[i] == 0.0);
    }

    SUBCASE("random instances agree to 1e-12") {
        for (int iter = 0; iter < 20; ++iter) {
            MlpHasherT<double> h;
            h.w1 = random_matrix<double>(12, 10, eng);
            h.b1.resize(10);
            std::normal_distribution<double> gauss;
            for (auto& b : h.b1) b = gauss(eng);
            h.w2 = random_matrix<double>(10, 6, eng);
            const Matrix<double> x = random_matrix<double>(5, 12, eng);
            const Matrix<double> got = mlp_forward(h, x);
            const Matrix<double> want = mlp_forward_oracle(h, x);
            for (std::size_t i = 0; i < got.size(); ++i) {
                CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));
            }
        }
    }

    SUBCASE("non-finite input is rejected") {
        MlpHasher h = mlp_gaussian_init(4, 4, 4, 64.0f, 3);
        Matrix<float> x(1, 4);
        x(0, 2) = std::numeric_limits<float>::quiet_NaN();
        CHECK_THROWS_AS(mlp_forward(h, x), NumericError);
    }
}

TEST_CASE("mlp_hash sign behaviour") {
    std::mt19937_64 eng(37);

    SUBCASE("zero network gives all-ones code") {
        MlpHasher h;
        h.w1 = Matrix<float>(8, 8);
        h.b1.assign(8, 0.0f);
        h.w2 = Matrix<float>(8, 8);
        const BitMatrix bits = mlp_hash(h, random_matrix<float>(2, 8, eng));
        for (std::size_t i = 0; i < bits.rows(); ++i) {
            for (std::size_t j = 0; j < bits.cols(); ++j) CHECK(bits.get(i, j));
        }
    }

    SUBCASE("bits equal sign of the pre-activation") {
        const MlpHasher h = mlp_gaussian_init(16, 16, 32, 64.0f, 5);
        const Matrix<float> x = random_matrix<float>(7, 16, eng, 3.0);
        const Matrix<float> pre = mlp_forward(h, x);
        const BitMatrix bits = mlp_hash(h, x);
        for (std::size_t i = 0; i < pre.rows(); ++i) {
            for (std::size_t j = 0; j < pre.cols(); ++j) {
                CHECK(bits.get(i, j) == (pre(i, j) >= 0.0f));
            }
        }
    }

    SUBCASE("positive scaling of W2 keeps every bit") {
        MlpHasher h = mlp_gaussian_init(16, 16, 32, 64.0f, 9);
        const Matrix<float> x = random_matrix<float>(7, 16, eng, 3.0);
        const BitMatrix before = mlp_hash(h, x);
        for (std::size_t i = 0; i < h.w2.size(); ++i) h.w2.data()[i] *= 7.5f;
        CHECK(mlp_hash(h, x) == before);
    }
}

TEST_CASE("soft_sign values and range") {
    CHECK(soft_sign(0.0, 1.0) == 0.0);
    CHECK(soft_sign(0.0, 64.0) == 0.0);
    CHECK(soft_sign(1.0, 1.0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(soft_sign(1.0, 64.0) == doctest::Approx(64.0 / 65.0).epsilon(1e-15));

    std::mt19937_64 eng(41);
    std::normal_distribution<double> gauss(0.0, 10.0);
    for (int i = 0; i < 1000; ++i) {
        const double z = gauss(eng);
        const double s = soft_sign(z, 64.0);
        CHECK(s > -1.0);
        CHECK(s < 1.0);
        if (z != 0.0) CHECK((s > 0) == (z > 0));
    }
}

TEST_CASE("soft codes agree with hard bits away from zero") {
    std::mt19937_64 eng(43);
    const MlpHasher h = mlp_gaussian_init(32, 32, 64, 64.0f, 11);
    const Matrix<float> x = random_matrix<float>(16, 32, eng, 2.0);
    const Matrix<float> soft = soft_codes(h, x);
    const Matrix<float> pre = mlp_forward(h, x);
    const BitMatrix hard = mlp_hash(h, x);
    for (std::size_t i = 0; i < pre.rows(); ++i) {
        for (std::size_t j = 0; j < pre.cols(); ++j) {
            CHECK(std::abs(soft(i, j)) < 1.0f);
            if (std::abs(pre(i, j)) > 1e-9f) {
                CHECK((soft(i, j) >= 0.0f) == hard.get(i, j));
            }
        }
    }
}

TEST_CASE("hamming score equals (signed dot + L) / 2") {
    std::mt19937_64 eng(47);
    const MlpHasher h = mlp_gaussian_init(16, 16, 32, 64.0f, 13);
    const Matrix<float> x = random_matrix<float>(10, 16, eng, 2.0);
    const BitMatrix bits = mlp_hash(h, x);
    const CodeMatrix codes = pack_bits(bits);
    const ScoreVector scores = nxor_scores(codes.code(0), codes);
    for (std::size_t r = 0; r < bits.rows(); ++r) {
        int dot = 0;
        for (std::size_t j = 0; j < bits.cols(); ++j) {
            dot += (bits.get(0, j) ? 1 : -1) * (bits.get(r, j) ? 1 : -1);
        }
        CHECK(scores[r] == (dot + 32) / 2);
    }
}

TEST_CASE("downproj_scores") {
    std::mt19937_64 eng(53);

    SUBCASE("identity projection reproduces exact logits") {
        DownProjEstimatorT<double> e;
        e.projection = Matrix<double>(8, 8);
        for (int i = 0; i < 8; ++i) e.projection(i, i) = 1.0;
        const Matrix<double> keys = random_matrix<double>(12, 8, eng);
        const Matrix<double> q = random_matrix<double>(1, 8, eng);
        const auto scores = downproj_scores(e, q.row(0), keys);
        for (std::size_t i = 0; i < keys.rows(); ++i) {
            CHECK(scores[i] == doctest::Approx(dot<double>(q.row(0), keys.row(i)))
                                   .epsilon(1e-12));
        }
    }

    SUBCASE("key equal to query under orthonormal projection gives |qP|^2") {
        const DownProjEstimator ef = downproj_init(16, 4, 7);
        DownProjEstimatorT<double> e{matrix_cast<double>(ef.projection)};
        const Matrix<double> q = random_matrix<double>(1, 16, eng);
        Matrix<double> keys = q;
        const auto scores = downproj_scores(e, q.row(0), keys);
        const Matrix<double> qp = matmul(q, e.projection);
        CHECK(scores[0] == doctest::Approx(dot<double>(qp.row(0), qp.row(0))).epsilon(1e-12));
        CHECK(scores[0] >= 0.0);
    }

    SUBCASE("zero query gives zero scores") {
        const DownProjEstimator e = downproj_init(16, 4, 7);
        const Matrix<float> keys = random_matrix<float>(5, 16, eng);
        const Matrix<float> q(1, 16);
        for (float s : downproj_scores(e, q.row(0), keys)) CHECK(s == 0.0f);
    }

    SUBCASE("shape mismatch rejected") {
        const DownProjEstimator e = downproj_init(16, 4, 7);
        const Matrix<float> keys = random_matrix<float>(5, 8, eng);
        const Matrix<float> q(1, 8);
        CHECK_THROWS_AS(downproj_scores(e, q.row(0), keys), DimensionError);
    }
}

TEST_CASE("hashing is deterministic across repeated calls") {
    std::mt19937_64 eng(59);
    const MlpHasher h = mlp_gaussian_init(32, 32, 32, 64.0f, 17);
    const Matrix<float> x = random_matrix<float>(64, 32, eng, 2.0);
    const BitMatrix first = mlp_hash(h, x);
    for (int i = 0; i < 3; ++i) CHECK(mlp_hash(h, x) == first);
}

TEST_CASE("SPLH checkpoint round trips") {
    const std::string path = "test_hasher.splh";

    SUBCASE("linear") {
        const LinearHasher h = qr_rotation_init(16, 21);
        write_hasher(path, h);
        const AnyHasher back = read_hasher(path);
        REQUIRE(std::holds_alternative<LinearHasher>(back));
        CHECK(std::get<LinearHasher>(back).projection == h.projection);
    }

    SUBCASE("mlp") {
        const MlpHasher h = mlp_gaussian_init(8, 12, 32, 48.0f, 23);
        write_hasher(path, h);
        const AnyHasher back = read_hasher(path);
        REQUIRE(std::holds_alternative<MlpHasher>(back));
        const auto& m = std::get<MlpHasher>(back);
        CHECK(m.w1 == h.w1);
        CHECK(m.b1 == h.b1);
        CHECK(m.w2 == h.w2);
        CHECK(m.gamma == h.gamma);
    }

    SUBCASE("downproj") {
        const DownProjEstimator h = downproj_init(32, 2, 29);
        write_hasher(path, h);
        const AnyHasher back = read_hasher(path);
        REQUIRE(std::holds_alternative<DownProjEstimator>(back));
        CHECK(std::get<DownProjEstimator>(back).projection == h.projection);
    }

    SUBCASE("bad magic is rejected") {
        write_hasher(path, qr_rotation_init(4, 1));
        FILE* f = std::fopen(path.c_str(), "r+b");
        REQUIRE(f != nullptr);
        std::fputc('Q', f);
        std::fclose(f);
        CHECK_THROWS_AS(read_hasher(path), FormatError);
    }
    std::remove(path.c_str());
}
