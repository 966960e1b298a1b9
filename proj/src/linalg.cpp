#include "spotlight/linalg.hpp"

#include <cmath>
#include <random>

#include "spotlight/rng.hpp"

namespace spotlight {

Matrix<double> qr_orthogonal_factor(const Matrix<double>& a) {
    if (a.rows() != a.cols()) throw DimensionError("qr_orthogonal_factor: matrix must be square");
    const std::size_t n = a.rows();
    Matrix<double> r = a;
    Matrix<double> q(n, n);
    for (std::size_t i = 0; i < n; ++i) q(i, i) = 1.0;

    std::vector<double> v(n);
    for (std::size_t k = 0; k + 1 < n; ++k) {
        double norm = 0.0;
        for (std::size_t i = k; i < n; ++i) norm += r(i, k) * r(i, k);
        norm = std::sqrt(norm);
        if (norm == 0.0) continue;
        const double alpha = r(k, k) >= 0.0 ? -norm : norm;
        double vnorm2 = 0.0;
        for (std::size_t i = k; i < n; ++i) {
            v[i] = r(i, k);
            if (i == k) v[i] -= alpha;
            vnorm2 += v[i] * v[i];
        }
        if (vnorm2 == 0.0) continue;
        const double beta = 2.0 / vnorm2;
        // R <- (I - beta v v^T) R
        for (std::size_t j = k; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = k; i < n; ++i) s += v[i] * r(i, j);
            s *= beta;
            for (std::size_t i = k; i < n; ++i) r(i, j) -= s * v[i];
        }
        // Q <- Q (I - beta v v^T)
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = k; j < n; ++j) s += q(i, j) * v[j];
            s *= beta;
            for (std::size_t j = k; j < n; ++j) q(i, j) -= s * v[j];
        }
    }
    return q;
}

double lu_determinant(Matrix<double> a) {
    if (a.rows() != a.cols()) throw DimensionError("lu_determinant: matrix must be square");
    const std::size_t n = a.rows();
    double det = 1.0;
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t pivot = k;
        double best = std::abs(a(k, k));
        for (std::size_t i = k + 1; i < n; ++i) {
            const double mag = std::abs(a(i, k));
            if (mag > best) {
                best = mag;
                pivot = i;
            }
        }
        if (best == 0.0) return 0.0;
        if (pivot != k) {
            for (std::size_t j = 0; j < n; ++j) std::swap(a(k, j), a(pivot, j));
            det = -det;
        }
        det *= a(k, k);
        const double inv = 1.0 / a(k, k);
        for (std::size_t i = k + 1; i < n; ++i) {
            const double factor = a(i, k) * inv;
            for (std::size_t j = k + 1; j < n; ++j) a(i, j) -= factor * a(k, j);
        }
    }
    return det;
}

Matrix<double> random_rotation(std::uint32_t d, std::uint64_t seed) {
    if (d < 1) throw DimensionError("random_rotation: d must be >= 1");
    for (std::uint64_t attempt = 0;; ++attempt) {
        auto eng = make_engine(derive_seed(seed, attempt));
        std::normal_distribution<double> gauss(0.0, 1.0);
        Matrix<double> a(d, d);
        for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] = gauss(eng);
        Matrix<double> q = qr_orthogonal_factor(a);
        if (lu_determinant(q) < 0.0) {
            for (std::uint32_t i = 0; i < d; ++i) q(i, 0) = -q(i, 0);
        }
        // A degenerate Gaussian draw has measure zero; resample if it happens.
        if (q.all_finite() && std::abs(lu_determinant(q) - 1.0) < 1e-8) return q;
    }
}

}  // namespace spotlight
