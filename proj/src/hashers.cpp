#include "spotlight/hashers.hpp"

#include <cmath>
#include <random>

#include "spotlight/binary_io.hpp"
#include "spotlight/linalg.hpp"
#include "spotlight/rng.hpp"

namespace spotlight {

namespace {

template <typename T>
void require_finite(const Matrix<T>& m, const char* what) {
    if (!m.all_finite()) throw NumericError(std::string(what) + " contains non-finite values");
}

template <typename T>
BitMatrix sign_bits(const Matrix<T>& pre) {
    BitMatrix bits(pre.rows(), pre.cols());
    for (std::size_t i = 0; i < pre.rows(); ++i) {
        for (std::size_t j = 0; j < pre.cols(); ++j) {
            bits.set(i, j, pre(i, j) >= T(0));
        }
    }
    return bits;
}

template <typename T>
T silu(T z) {
    return z / (T(1) + std::exp(-z));
}

}  // namespace

LinearHasher qr_rotation_init(std::uint32_t d, std::uint64_t seed) {
    return {matrix_cast<float>(random_rotation(d, seed))};
}

MlpHasher mlp_gaussian_init(std::uint32_t d, std::uint32_t h, std::uint32_t code_bits,
                            float gamma, std::uint64_t seed) {
    if (d < 1 || h < 1 || code_bits < 1) {
        throw DimensionError("mlp_gaussian_init: dimensions must be >= 1");
    }
    if (gamma <= 0.0f) throw DimensionError("mlp_gaussian_init: gamma must be positive");
    auto eng = make_engine(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    MlpHasher out;
    out.w1 = Matrix<float>(d, h);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t i = 0; i < out.w1.size(); ++i) {
        out.w1.data()[i] = static_cast<float>(gauss(eng) * s1);
    }
    out.b1.assign(h, 0.0f);
    out.w2 = Matrix<float>(h, code_bits);
    const double s2 = 1.0 / std::sqrt(static_cast<double>(h));
    for (std::size_t i = 0; i < out.w2.size(); ++i) {
        out.w2.data()[i] = static_cast<float>(gauss(eng) * s2);
    }
    out.gamma = gamma;
    return out;
}

DownProjEstimator downproj_init(std::uint32_t d, std::uint32_t r, std::uint64_t seed) {
    if (r < 1 || r > d) throw DimensionError("downproj_init: need 1 <= r <= d");
    const Matrix<double> rot = random_rotation(d, seed);
    Matrix<float> proj(d, r);
    for (std::uint32_t i = 0; i < d; ++i) {
        for (std::uint32_t j = 0; j < r; ++j) proj(i, j) = static_cast<float>(rot(i, j));
    }
    return {std::move(proj)};
}

template <typename T>
BitMatrix linear_hash(const LinearHasherT<T>& h, const Matrix<T>& x) {
    if (x.cols() != h.projection.rows()) {
        throw DimensionError("linear_hash: input dim " + std::to_string(x.cols()) +
                             " != hasher dim " + std::to_string(h.projection.rows()));
    }
    return sign_bits(matmul(x, h.projection));
}

template <typename T>
Matrix<T> mlp_forward(const MlpHasherT<T>& h, const Matrix<T>& x) {
    if (x.cols() != h.w1.rows()) {
        throw DimensionError("mlp_forward: input dim " + std::to_string(x.cols()) +
                             " != hasher dim " + std::to_string(h.w1.rows()));
    }
    require_finite(h.w1, "mlp w1");
    require_finite(h.w2, "mlp w2");
    for (const T& v : h.b1) {
        if (!std::isfinite(static_cast<double>(v))) throw NumericError("mlp b1 is non-finite");
    }
    require_finite(x, "mlp input");

    Matrix<T> z1 = matmul(x, h.w1);
    for (std::size_t i = 0; i < z1.rows(); ++i) {
        T* row = z1.row(i).data();
        for (std::size_t j = 0; j < z1.cols(); ++j) row[j] = silu(row[j] + h.b1[j]);
    }
    return matmul(z1, h.w2);
}

template <typename T>
BitMatrix mlp_hash(const MlpHasherT<T>& h, const Matrix<T>& x) {
    return sign_bits(mlp_forward(h, x));
}

template <typename T>
Matrix<T> soft_sign(const Matrix<T>& z, T gamma) {
    if (gamma <= T(0)) throw DimensionError("soft_sign: gamma must be positive");
    Matrix<T> out(z.rows(), z.cols());
    for (std::size_t i = 0; i < z.size(); ++i) out.data()[i] = soft_sign(z.data()[i], gamma);
    return out;
}

template <typename T>
Matrix<T> soft_codes(const MlpHasherT<T>& h, const Matrix<T>& x) {
    return soft_sign(mlp_forward(h, x), h.gamma);
}

template <typename T>
std::vector<T> downproj_scores(const DownProjEstimatorT<T>& e, std::span<const T> q,
                               const Matrix<T>& keys) {
    const std::size_t d = e.projection.rows();
    const std::size_t r = e.projection.cols();
    if (q.size() != d || keys.cols() != d) {
        throw DimensionError("downproj_scores: shape mismatch");
    }
    std::vector<T> qp(r, T(0));
    for (std::size_t i = 0; i < d; ++i) {
        const T qv = q[i];
        const T* prow = e.projection.row(i).data();
        for (std::size_t j = 0; j < r; ++j) qp[j] += qv * prow[j];
    }
    Matrix<T> kp = matmul(keys, e.projection);
    std::vector<T> scores(keys.rows());
    for (std::size_t i = 0; i < keys.rows(); ++i) {
        scores[i] = dot<T>({qp.data(), r}, kp.row(i));
    }
    return scores;
}

template BitMatrix linear_hash<float>(const LinearHasherT<float>&, const Matrix<float>&);
template BitMatrix linear_hash<double>(const LinearHasherT<double>&, const Matrix<double>&);
template Matrix<float> mlp_forward<float>(const MlpHasherT<float>&, const Matrix<float>&);
template Matrix<double> mlp_forward<double>(const MlpHasherT<double>&, const Matrix<double>&);
template BitMatrix mlp_hash<float>(const MlpHasherT<float>&, const Matrix<float>&);
template BitMatrix mlp_hash<double>(const MlpHasherT<double>&, const Matrix<double>&);
template Matrix<float> soft_sign<float>(const Matrix<float>&, float);
template Matrix<double> soft_sign<double>(const Matrix<double>&, double);
template Matrix<float> soft_codes<float>(const MlpHasherT<float>&, const Matrix<float>&);
template Matrix<double> soft_codes<double>(const MlpHasherT<double>&, const Matrix<double>&);
template std::vector<float> downproj_scores<float>(const DownProjEstimatorT<float>&,
                                                   std::span<const float>, const Matrix<float>&);
template std::vector<double> downproj_scores<double>(const DownProjEstimatorT<double>&,
                                                     std::span<const double>,
                                                     const Matrix<double>&);

// --------------------------------------------------------------------------
// SPLH checkpoints
// --------------------------------------------------------------------------

namespace {

constexpr std::uint8_t kKindLinear = 0;
constexpr std::uint8_t kKindMlp = 1;
constexpr std::uint8_t kKindDownProj = 2;

void put_matrix(std::ostream& os, const Matrix<float>& m) {
    binio::put_block<float>(os, {m.data(), m.size()});
}

Matrix<float> get_matrix(std::istream& is, std::size_t rows, std::size_t cols,
                         const std::string& path, const char* field) {
    Matrix<float> m(rows, cols);
    binio::get_block<float>(is, {m.data(), m.size()}, path, field);
    return m;
}

}  // namespace

void write_hasher(const std::string& path, const AnyHasher& hasher) {
    auto os = binio::open_out(path);
    os.write("SPLH", 4);
    binio::put_u32(os, 1);
    if (const auto* lin = std::get_if<LinearHasher>(&hasher)) {
        binio::put_u8(os, kKindLinear);
        binio::put_u32(os, lin->input_dim());
        binio::put_u32(os, 0);
        binio::put_u32(os, lin->code_bits());
        binio::put_f32(os, 0.0f);
        put_matrix(os, lin->projection);
    } else if (const auto* mlp = std::get_if<MlpHasher>(&hasher)) {
        binio::put_u8(os, kKindMlp);
        binio::put_u32(os, mlp->input_dim());
        binio::put_u32(os, mlp->hidden_dim());
        binio::put_u32(os, mlp->code_bits());
        binio::put_f32(os, mlp->gamma);
        put_matrix(os, mlp->w1);
        binio::put_block<float>(os, {mlp->b1.data(), mlp->b1.size()});
        put_matrix(os, mlp->w2);
    } else {
        const auto& dp = std::get<DownProjEstimator>(hasher);
        binio::put_u8(os, kKindDownProj);
        binio::put_u32(os, dp.input_dim());
        binio::put_u32(os, 0);
        binio::put_u32(os, dp.reduced_dim());
        binio::put_f32(os, 0.0f);
        put_matrix(os, dp.projection);
    }
    if (!os) throw IoError("write failed: " + path);
}

AnyHasher read_hasher(const std::string& path) {
    auto is = binio::open_in(path);
    binio::expect_magic(is, "SPLH", path);
    const std::uint32_t version = binio::get_u32(is, path, "version");
    if (version != 1) {
        throw FormatError(path + ": unsupported SPLH version " + std::to_string(version));
    }
    const std::uint8_t kind = binio::get_u8(is, path, "kind");
    const std::uint32_t d = binio::get_u32(is, path, "d");
    const std::uint32_t h = binio::get_u32(is, path, "h");
    const std::uint32_t bits = binio::get_u32(is, path, "L");
    const float gamma = binio::get_f32(is, path, "gamma");
    switch (kind) {
        case kKindLinear:
            return LinearHasher{get_matrix(is, d, bits, path, "projection")};
        case kKindMlp: {
            MlpHasher mlp;
            mlp.w1 = get_matrix(is, d, h, path, "w1");
            mlp.b1.assign(h, 0.0f);
            binio::get_block<float>(is, {mlp.b1.data(), mlp.b1.size()}, path, "b1");
            mlp.w2 = get_matrix(is, h, bits, path, "w2");
            mlp.gamma = gamma;
            if (mlp.gamma <= 0.0f) throw FormatError(path + ": mlp gamma must be positive");
            return mlp;
        }
        case kKindDownProj:
            return DownProjEstimator{get_matrix(is, d, bits, path, "projection")};
        default:
            throw FormatError(path + ": unknown hasher kind " + std::to_string(kind));
    }
}

const char* hasher_kind_name(const AnyHasher& hasher) {
    if (std::holds_alternative<LinearHasher>(hasher)) return "linear";
    if (std::holds_alternative<MlpHasher>(hasher)) return "mlp";
    return "downproj";
}

}  // namespace spotlight
