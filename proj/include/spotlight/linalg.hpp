#pragma once

#include <cstdint>

#include "spotlight/matrix.hpp"

namespace spotlight {

// Orthogonal factor of a Householder QR of a square matrix, returned as an
// explicit dense matrix.
Matrix<double> qr_orthogonal_factor(const Matrix<double>& a);

// Determinant via LU with partial pivoting.
double lu_determinant(Matrix<double> a);

// Random rotation: QR of an i.i.d. standard-normal square matrix, with the
// first column sign-flipped when the determinant comes out negative, so the
// result always lands in SO(d).
Matrix<double> random_rotation(std::uint32_t d, std::uint64_t seed);

}  // namespace spotlight
