#include "spotlight/synthkv.hpp"

#include <cmath>
#include <random>

#include "spotlight/binary_io.hpp"
#include "spotlight/rng.hpp"

namespace spotlight {

double ConeSpec::resolved_norm_mean() const {
    return norm_mean > 0.0 ? norm_mean : std::sqrt(static_cast<double>(dim));
}

double ConeSpec::resolved_norm_std() const {
    return norm_std > 0.0 ? norm_std : resolved_norm_mean() / 10.0;
}

void ConeSpec::validate() const {
    if (dim < 2) throw DimensionError("ConeSpec: dim must be >= 2");
    if (!(angular_spread > 0.0 && angular_spread < M_PI / 2.0)) {
        throw DimensionError("ConeSpec: angular_spread must lie in (0, pi/2)");
    }
    if (std::abs(axis_cos) > 1.0) throw DimensionError("ConeSpec: |axis_cos| must be <= 1");
    if (resolved_norm_mean() <= 0.0) throw DimensionError("ConeSpec: norm_mean must be positive");
    if (!(outlier_prob >= 0.0 && outlier_prob < 1.0)) {
        throw DimensionError("ConeSpec: outlier_prob must lie in [0, 1)");
    }
    for (const auto* axis : {&query_axis, &key_axis}) {
        if (axis->empty()) continue;
        if (axis->size() != dim) throw DimensionError("ConeSpec: axis dimension mismatch");
        double n2 = 0.0;
        for (double v : *axis) n2 += v * v;
        if (std::abs(std::sqrt(n2) - 1.0) > 1e-6) {
            throw DimensionError("ConeSpec: axes must be unit-norm");
        }
    }
}

namespace {

std::vector<double> default_axis(const ConeSpec& spec, ConeSide side) {
    std::vector<double> axis(spec.dim, 0.0);
    if (side == ConeSide::query) {
        axis[0] = 1.0;
    } else {
        axis[0] = spec.axis_cos;
        axis[1] = std::sqrt(std::max(0.0, 1.0 - spec.axis_cos * spec.axis_cos));
    }
    return axis;
}

}  // namespace

Matrix<float> sample_cone(const ConeSpec& spec, std::uint32_t count, ConeSide side) {
    spec.validate();
    const std::vector<double>& chosen =
        (side == ConeSide::query) ? spec.query_axis : spec.key_axis;
    const std::vector<double> axis = chosen.empty() ? default_axis(spec, side) : chosen;

    const std::uint64_t stream = (side == ConeSide::query) ? 1 : 2;
    auto eng = make_engine(derive_seed(spec.seed, stream));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);

    const double norm_mean = spec.resolved_norm_mean();
    const double norm_std = spec.resolved_norm_std();
    const std::uint32_t d = spec.dim;

    Matrix<float> out(count, d);
    std::vector<double> tangent(d);
    for (std::uint32_t row = 0; row < count; ++row) {
        // Tangential direction: Gaussian draw orthogonalized against the axis.
        double tnorm = 0.0;
        while (tnorm == 0.0) {
            double proj = 0.0;
            for (std::uint32_t i = 0; i < d; ++i) {
                tangent[i] = gauss(eng);
                proj += tangent[i] * axis[i];
            }
            tnorm = 0.0;
            for (std::uint32_t i = 0; i < d; ++i) {
                tangent[i] -= proj * axis[i];
                tnorm += tangent[i] * tangent[i];
            }
            tnorm = std::sqrt(tnorm);
        }
        const double theta = uniform(eng) * spec.angular_spread;
        double magnitude = norm_mean + norm_std * gauss(eng);
        if (spec.outlier_prob > 0.0 && uniform(eng) < spec.outlier_prob) {
            magnitude *= spec.outlier_scale;
        }
        magnitude = std::max(magnitude, 1e-6);
        const double along = magnitude * std::cos(theta);
        const double across = magnitude * std::sin(theta) / tnorm;
        float* orow = out.row(row).data();
        for (std::uint32_t i = 0; i < d; ++i) {
            orow[i] = static_cast<float>(along * axis[i] + across * tangent[i]);
        }
    }
    return out;
}

void write_dump(const std::string& path, const Matrix<float>& queries,
                const Matrix<float>& keys) {
    if (queries.cols() != keys.cols()) {
        throw DimensionError("write_dump: query and key dimensions differ");
    }
    if (!queries.all_finite() || !keys.all_finite()) {
        throw NumericError("write_dump: tensors contain non-finite values");
    }
    auto os = binio::open_out(path);
    os.write("SPLQ", 4);
    binio::put_u32(os, 1);
    binio::put_u32(os, static_cast<std::uint32_t>(queries.rows()));
    binio::put_u32(os, static_cast<std::uint32_t>(keys.rows()));
    binio::put_u32(os, static_cast<std::uint32_t>(queries.cols()));
    binio::put_block<float>(os, {queries.data(), queries.size()});
    binio::put_block<float>(os, {keys.data(), keys.size()});
    if (!os) throw IoError("write failed: " + path);
}

QkDump read_dump(const std::string& path) {
    auto is = binio::open_in(path);
    binio::expect_magic(is, "SPLQ", path);
    const std::uint32_t version = binio::get_u32(is, path, "version");
    if (version != 1) {
        throw FormatError(path + ": unsupported SPLQ version " + std::to_string(version));
    }
    const std::uint32_t nq = binio::get_u32(is, path, "n_queries");
    const std::uint32_t nk = binio::get_u32(is, path, "n_keys");
    const std::uint32_t d = binio::get_u32(is, path, "d");
    QkDump dump;
    dump.queries = Matrix<float>(nq, d);
    dump.keys = Matrix<float>(nk, d);
    binio::get_block<float>(is, {dump.queries.data(), dump.queries.size()}, path, "query block");
    binio::get_block<float>(is, {dump.keys.data(), dump.keys.size()}, path, "key block");
    if (!dump.queries.all_finite() || !dump.keys.all_finite()) {
        throw FormatError(path + ": payload contains non-finite values");
    }
    return dump;
}

}  // namespace spotlight
