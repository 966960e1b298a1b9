#pragma once

#include <bit>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "spotlight/errors.hpp"

namespace spotlight {

// Row-major boolean matrix, one byte per bit. The unpacked form of hash codes
// and the direct output of the hashing functions.
class BitMatrix {
public:
    BitMatrix() = default;
    BitMatrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), bits_(rows * cols, 0) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    bool get(std::size_t r, std::size_t c) const { return bits_[r * cols_ + c] != 0; }
    void set(std::size_t r, std::size_t c, bool v) { bits_[r * cols_ + c] = v ? 1 : 0; }

    std::span<const std::uint8_t> row(std::size_t r) const {
        return {bits_.data() + r * cols_, cols_};
    }
    std::span<std::uint8_t> row(std::size_t r) { return {bits_.data() + r * cols_, cols_}; }

    bool operator==(const BitMatrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_ && bits_ == other.bits_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<std::uint8_t> bits_;
};

// One bit-packed hash code of length_bits bits (multiple of 32).
struct HashCode {
    std::vector<std::uint32_t> words;
    std::uint32_t length_bits = 0;
};

// n bit-packed codes of L bits each, row-major. Row i is the code of input
// vector i, index-aligned with the KV cache.
class CodeMatrix {
public:
    // L is capped so agreement counts always fit 32-bit score accumulators.
    static constexpr std::uint32_t kMaxBits = 1u << 15;

    CodeMatrix() = default;
    CodeMatrix(std::uint32_t rows, std::uint32_t length_bits);

    std::uint32_t rows() const { return rows_; }
    std::uint32_t length_bits() const { return length_bits_; }
    std::uint32_t words_per_row() const { return length_bits_ / 32; }

    std::span<const std::uint32_t> row(std::uint32_t r) const {
        return {data_.data() + static_cast<std::size_t>(r) * words_per_row(), words_per_row()};
    }
    std::span<std::uint32_t> row(std::uint32_t r) {
        return {data_.data() + static_cast<std::size_t>(r) * words_per_row(), words_per_row()};
    }

    HashCode code(std::uint32_t r) const {
        const auto rw = row(r);
        return HashCode{{rw.begin(), rw.end()}, length_bits_};
    }

    std::span<const std::uint32_t> raw() const { return data_; }
    std::span<std::uint32_t> raw() { return data_; }

    bool operator==(const CodeMatrix& other) const {
        return rows_ == other.rows_ && length_bits_ == other.length_bits_ && data_ == other.data_;
    }

private:
    std::uint32_t rows_ = 0;
    std::uint32_t length_bits_ = 0;
    std::vector<std::uint32_t> data_;
};

// Per-row agreement counts, each in [0, L].
using ScoreVector = std::vector<std::int32_t>;

// Packs an n x d boolean matrix into 32-bit words. The d columns are split
// into 32 contiguous chunks of d/32 columns; chunk c lands in bit (31 - c) of
// each output word, so word w holds source columns {c*(d/32) + w : c = 0..31}.
CodeMatrix pack_bits(const BitMatrix& bits);

// Exact inverse of pack_bits.
BitMatrix unpack_bits(const CodeMatrix& codes);

// scores[i] = number of bit positions where query and row i agree,
// popcount(NOT(query XOR row)) summed over words.
ScoreVector nxor_scores(const HashCode& query, const CodeMatrix& index);

// Agreement count against rows [0, n_valid) only, written into out[0..n_valid).
void nxor_scores_into(std::span<const std::uint32_t> query_words, const CodeMatrix& index,
                      std::uint32_t n_valid, std::int32_t* out);

// Indices of the k largest scores, ties broken toward the lower index.
// Returned sorted ascending. Works for integer agreement scores and for
// floating-point logits alike, with the identical tie rule.
template <typename S>
std::vector<std::uint32_t> top_k_indices(std::span<const S> scores, std::uint32_t k);

extern template std::vector<std::uint32_t> top_k_indices<std::int32_t>(
    std::span<const std::int32_t>, std::uint32_t);
extern template std::vector<std::uint32_t> top_k_indices<float>(std::span<const float>,
                                                                std::uint32_t);
extern template std::vector<std::uint32_t> top_k_indices<double>(std::span<const double>,
                                                                 std::uint32_t);

inline std::vector<std::uint32_t> top_k_indices(const ScoreVector& scores, std::uint32_t k) {
    return top_k_indices<std::int32_t>({scores.data(), scores.size()}, k);
}

// Code index file, magic "SPLC": u32 version=1, u32 n, u32 L, then n*L/32
// little-endian u32 words, row-major.
void write_code_index(const std::string& path, const CodeMatrix& codes);
CodeMatrix read_code_index(const std::string& path);

}  // namespace spotlight
