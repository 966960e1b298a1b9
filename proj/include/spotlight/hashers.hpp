#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "spotlight/bitcodes.hpp"
#include "spotlight/matrix.hpp"

namespace spotlight {

// Sign-of-projection hasher. Rotation-initialized, optionally trained.
template <typename T>
struct LinearHasherT {
    Matrix<T> projection;  // d x code_bits

    std::uint32_t input_dim() const { return static_cast<std::uint32_t>(projection.rows()); }
    std::uint32_t code_bits() const { return static_cast<std::uint32_t>(projection.cols()); }
};

// Two-layer MLP hasher: sign(SiLU(x W1 + b1) W2). gamma is the soft-sign
// smoothing used by the training-time surrogate.
template <typename T>
struct MlpHasherT {
    Matrix<T> w1;        // d x h
    std::vector<T> b1;   // h
    Matrix<T> w2;        // h x code_bits
    T gamma = T(64);

    std::uint32_t input_dim() const { return static_cast<std::uint32_t>(w1.rows()); }
    std::uint32_t hidden_dim() const { return static_cast<std::uint32_t>(w1.cols()); }
    std::uint32_t code_bits() const { return static_cast<std::uint32_t>(w2.cols()); }
};

// Low-rank inner-product estimator, the non-hashing baseline.
template <typename T>
struct DownProjEstimatorT {
    Matrix<T> projection;  // d x r

    std::uint32_t input_dim() const { return static_cast<std::uint32_t>(projection.rows()); }
    std::uint32_t reduced_dim() const { return static_cast<std::uint32_t>(projection.cols()); }
};

using LinearHasher = LinearHasherT<float>;
using MlpHasher = MlpHasherT<float>;
using DownProjEstimator = DownProjEstimatorT<float>;

using AnyHasher = std::variant<LinearHasher, MlpHasher, DownProjEstimator>;

// --------------------------------------------------------------------------
// Construction
// --------------------------------------------------------------------------

// d x d rotation from QR of a Gaussian draw, determinant forced to +1.
LinearHasher qr_rotation_init(std::uint32_t d, std::uint64_t seed);

// Gaussian init, W1 ~ N(0, 1/sqrt(d)), W2 ~ N(0, 1/sqrt(h)), b1 = 0.
MlpHasher mlp_gaussian_init(std::uint32_t d, std::uint32_t h, std::uint32_t code_bits,
                            float gamma, std::uint64_t seed);

// First r columns of a random rotation, so columns are orthonormal.
DownProjEstimator downproj_init(std::uint32_t d, std::uint32_t r, std::uint64_t seed);

// --------------------------------------------------------------------------
// Forward operations (pure, thread-safe once the hasher is built)
// --------------------------------------------------------------------------

// bit[i][j] = (x_i . projection_col_j >= 0). sign(0) maps to bit 1.
template <typename T>
BitMatrix linear_hash(const LinearHasherT<T>& h, const Matrix<T>& x);

// Pre-activation codes: SiLU(x W1 + b1) W2.
template <typename T>
Matrix<T> mlp_forward(const MlpHasherT<T>& h, const Matrix<T>& x);

// Hard sign of mlp_forward, sign(0) -> bit 1. Inference path.
template <typename T>
BitMatrix mlp_hash(const MlpHasherT<T>& h, const Matrix<T>& x);

// gamma*z / (1 + gamma*|z|), strictly inside (-1, 1).
template <typename T>
T soft_sign(T z, T gamma);
template <typename T>
Matrix<T> soft_sign(const Matrix<T>& z, T gamma);

// Derivative gamma / (1 + gamma*|z|)^2.
template <typename T>
T soft_sign_grad(T z, T gamma);

// Training-time surrogate codes, soft_sign(mlp_forward(x), gamma).
template <typename T>
Matrix<T> soft_codes(const MlpHasherT<T>& h, const Matrix<T>& x);

// Per-row reduced-space inner products (q P) . (K_i P).
template <typename T>
std::vector<T> downproj_scores(const DownProjEstimatorT<T>& e, std::span<const T> q,
                               const Matrix<T>& keys);

template <typename To, typename From>
LinearHasherT<To> hasher_cast(const LinearHasherT<From>& h) {
    return {matrix_cast<To>(h.projection)};
}
template <typename To, typename From>
MlpHasherT<To> hasher_cast(const MlpHasherT<From>& h) {
    MlpHasherT<To> out;
    out.w1 = matrix_cast<To>(h.w1);
    out.b1.assign(h.b1.begin(), h.b1.end());
    out.w2 = matrix_cast<To>(h.w2);
    out.gamma = static_cast<To>(h.gamma);
    return out;
}
template <typename To, typename From>
DownProjEstimatorT<To> hasher_cast(const DownProjEstimatorT<From>& h) {
    return {matrix_cast<To>(h.projection)};
}

// --------------------------------------------------------------------------
// Checkpoints
// --------------------------------------------------------------------------

// Hasher checkpoint file, magic "SPLH": u32 version=1, u8 kind (0=linear,
// 1=mlp, 2=downproj), u32 d, u32 h, u32 L, f32 gamma, then row-major
// little-endian f32 parameter blocks in declaration order.
void write_hasher(const std::string& path, const AnyHasher& hasher);
AnyHasher read_hasher(const std::string& path);

const char* hasher_kind_name(const AnyHasher& hasher);

extern template BitMatrix linear_hash<float>(const LinearHasherT<float>&, const Matrix<float>&);
extern template BitMatrix linear_hash<double>(const LinearHasherT<double>&,
                                              const Matrix<double>&);
extern template Matrix<float> mlp_forward<float>(const MlpHasherT<float>&, const Matrix<float>&);
extern template Matrix<double> mlp_forward<double>(const MlpHasherT<double>&,
                                                   const Matrix<double>&);
extern template BitMatrix mlp_hash<float>(const MlpHasherT<float>&, const Matrix<float>&);
extern template BitMatrix mlp_hash<double>(const MlpHasherT<double>&, const Matrix<double>&);
extern template Matrix<float> soft_sign<float>(const Matrix<float>&, float);
extern template Matrix<double> soft_sign<double>(const Matrix<double>&, double);
extern template Matrix<float> soft_codes<float>(const MlpHasherT<float>&, const Matrix<float>&);
extern template Matrix<double> soft_codes<double>(const MlpHasherT<double>&,
                                                  const Matrix<double>&);
extern template std::vector<float> downproj_scores<float>(const DownProjEstimatorT<float>&,
                                                          std::span<const float>,
                                                          const Matrix<float>&);
extern template std::vector<double> downproj_scores<double>(const DownProjEstimatorT<double>&,
                                                            std::span<const double>,
                                                            const Matrix<double>&);

template <typename T>
T soft_sign(T z, T gamma) {
    return gamma * z / (T(1) + gamma * std::abs(z));
}

template <typename T>
T soft_sign_grad(T z, T gamma) {
    const T denom = T(1) + gamma * std::abs(z);
    return gamma / (denom * denom);
}

}  // namespace spotlight
