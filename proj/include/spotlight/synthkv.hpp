#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spotlight/matrix.hpp"

namespace spotlight {

// Geometry for synthetic query/key clouds: two narrow cones around
// near-orthogonal axes, the regime where hyperplane hashing collapses.
struct ConeSpec {
    std::uint32_t dim = 128;
    std::vector<double> query_axis;  // unit vectors; derived from axis_cos when empty
    std::vector<double> key_axis;
    double angular_spread = 0.3;  // radians, per cone
    double axis_cos = 0.0;        // target cosine between the two axes
    double norm_mean = 0.0;       // 0 selects sqrt(dim)
    double norm_std = 0.0;        // 0 selects norm_mean / 10
    double outlier_prob = 0.0;    // heavy-tail magnitude injection, off by default
    double outlier_scale = 4.0;
    std::uint64_t seed = 0;

    double resolved_norm_mean() const;
    double resolved_norm_std() const;
    void validate() const;
};

enum class ConeSide { query, key };

// count samples with angle to the cone axis uniform in [0, angular_spread]
// and magnitude ~ Normal(norm_mean, norm_std) clipped positive. Every sample
// satisfies cos(angle to axis) >= cos(angular_spread).
Matrix<float> sample_cone(const ConeSpec& spec, std::uint32_t count, ConeSide side);

// In-memory form of a query/key dump.
struct QkDump {
    Matrix<float> queries;
    Matrix<float> keys;
};

// Dump file, magic "SPLQ": u32 version=1, u32 n_queries, u32 n_keys, u32 d,
// then the query block and key block, row-major little-endian f32.
void write_dump(const std::string& path, const Matrix<float>& queries,
                const Matrix<float>& keys);
QkDump read_dump(const std::string& path);

}  // namespace spotlight
