#include <cmath>
#include <cstdio>
#include <random>
#ifndef _WIN32
#include <unistd.h>
#endif

#include "doctest.h"
#include "spotlight/errors.hpp"
#include "spotlight/synthkv.hpp"

using namespace spotlight;

namespace {

double cosine(std::span<const float> a, std::span<const float> b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += static_cast<double>(a[i]) * b[i];
        aa += static_cast<double>(a[i]) * a[i];
        bb += static_cast<double>(b[i]) * b[i];
    }
    return ab / std::sqrt(aa * bb);
}

// Exact mean pairwise cosine of unit-normalized rows via the Gram identity:
// sum_{i != j} u_i . u_j == |sum u|^2 - n.
double mean_pairwise_cosine(const Matrix<float>& m) {
    const std::size_t n = m.rows(), d = m.cols();
    std::vector<double> sum(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double norm = 0.0;
        for (std::size_t j = 0; j < d; ++j) norm += static_cast<double>(m(i, j)) * m(i, j);
        norm = std::sqrt(norm);
        for (std::size_t j = 0; j < d; ++j) sum[j] += m(i, j) / norm;
    }
    double s2 = 0.0;
    for (double v : sum) s2 += v * v;
    return (s2 - static_cast<double>(n)) / (static_cast<double>(n) * (n - 1));
}

}  // namespace

TEST_CASE("cone samples respect the angular bound exactly") {
    ConeSpec spec;
    spec.dim = 32;
    spec.angular_spread = 0.3;
    spec.seed = 5;
    const Matrix<float> keys = sample_cone(spec, 500, ConeSide::key);
    std::vector<float> axis(spec.dim, 0.0f);
    axis[0] = static_cast<float>(spec.axis_cos);
    axis[1] = std::sqrt(1.0f - axis[0] * axis[0]);
    const double bound = std::cos(spec.angular_spread);
    for (std::size_t i = 0; i < keys.rows(); ++i) {
        CHECK(cosine(keys.row(i), {axis.data(), axis.size()}) >= bound - 1e-6);
    }
}

TEST_CASE("degenerate cone collapses onto the axis") {
    ConeSpec spec;
    spec.dim = 16;
    spec.angular_spread = 1e-4;
    spec.seed = 9;
    const Matrix<float> q = sample_cone(spec, 200, ConeSide::query);
    std::vector<float> axis(spec.dim, 0.0f);
    axis[0] = 1.0f;
    for (std::size_t i = 0; i < q.rows(); ++i) {
        CHECK(cosine(q.row(i), {axis.data(), axis.size()}) >= 0.9999);
    }
}

TEST_CASE("default geometry separates intra- and cross-cone cosines") {
    ConeSpec spec;  // d=128, spread 0.3, orthogonal axes
    spec.seed = 11;
    const std::uint32_t n = 10000;
    const Matrix<float> queries = sample_cone(spec, n, ConeSide::query);
    const Matrix<float> keys = sample_cone(spec, n, ConeSide::key);

    const double intra_q = mean_pairwise_cosine(queries);
    const double intra_k = mean_pairwise_cosine(keys);
    CHECK(intra_q > 0.9);
    CHECK(intra_k > 0.9);

    std::mt19937_64 eng(3);
    std::uniform_int_distribution<std::uint32_t> pick(0, n - 1);
    double cross_abs = 0.0;
    const int pairs = 20000;
    for (int i = 0; i < pairs; ++i) {
        cross_abs += std::abs(cosine(queries.row(pick(eng)), keys.row(pick(eng))));
    }
    cross_abs /= pairs;
    CHECK(cross_abs < 0.1);
    CHECK(std::min(intra_q, intra_k) - cross_abs >= 0.5);
}

TEST_CASE("generation is reproducible per seed") {
    ConeSpec spec;
    spec.dim = 64;
    spec.seed = 77;
    const Matrix<float> a = sample_cone(spec, 32, ConeSide::key);
    const Matrix<float> b = sample_cone(spec, 32, ConeSide::key);
    CHECK(a == b);
    spec.seed = 78;
    CHECK(!(sample_cone(spec, 32, ConeSide::key) == a));
}

TEST_CASE("invalid cone specs are rejected") {
    ConeSpec spec;
    spec.dim = 1;
    CHECK_THROWS_AS(spec.validate(), DimensionError);
    spec = ConeSpec{};
    spec.angular_spread = 2.0;
    CHECK_THROWS_AS(spec.validate(), DimensionError);
    spec = ConeSpec{};
    spec.query_axis.assign(128, 1.0);  // not unit norm
    CHECK_THROWS_AS(spec.validate(), DimensionError);
}

TEST_CASE("SPLQ dump round trips bitwise") {
    ConeSpec spec;
    spec.dim = 32;
    spec.seed = 13;
    const Matrix<float> q = sample_cone(spec, 20, ConeSide::query);
    const Matrix<float> k = sample_cone(spec, 24, ConeSide::key);
    const std::string path = "test_dump.splq";
    write_dump(path, q, k);
    const QkDump dump = read_dump(path);
    CHECK(dump.queries == q);
    CHECK(dump.keys == k);

    SUBCASE("corrupted magic names the offset") {
        FILE* f = std::fopen(path.c_str(), "r+b");
        REQUIRE(f != nullptr);
        std::fputc('Z', f);
        std::fclose(f);
        CHECK_THROWS_WITH_AS(read_dump(path), doctest::Contains("offset 0"), FormatError);
    }

    SUBCASE("header larger than payload is a truncation error") {
        write_dump(path, q, k);
        FILE* f = std::fopen(path.c_str(), "r+b");
        REQUIRE(f != nullptr);
#ifndef _WIN32
        REQUIRE(ftruncate(fileno(f), 64) == 0);
#endif
        std::fclose(f);
        CHECK_THROWS_WITH_AS(read_dump(path), doctest::Contains("truncated"), FormatError);
    }

    SUBCASE("NaN payload is rejected on both ends") {
        Matrix<float> bad = q;
        bad(0, 0) = std::numeric_limits<float>::quiet_NaN();
        CHECK_THROWS_AS(write_dump(path, bad, k), NumericError);
    }
    std::remove(path.c_str());
}
