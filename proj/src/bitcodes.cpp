#include "spotlight/bitcodes.hpp"

#include <algorithm>

#include "spotlight/binary_io.hpp"

namespace spotlight {

CodeMatrix::CodeMatrix(std::uint32_t rows, std::uint32_t length_bits)
    : rows_(rows), length_bits_(length_bits) {
    if (length_bits == 0 || length_bits % 32 != 0) {
        throw DimensionError("CodeMatrix: length_bits " + std::to_string(length_bits) +
                             " must be a positive multiple of 32");
    }
    if (length_bits > kMaxBits) {
        throw DimensionError("CodeMatrix: length_bits " + std::to_string(length_bits) +
                             " exceeds the " + std::to_string(kMaxBits) + "-bit limit");
    }
    data_.assign(static_cast<std::size_t>(rows) * (length_bits / 32), 0);
}

CodeMatrix pack_bits(const BitMatrix& bits) {
    const std::size_t d = bits.cols();
    if (d == 0 || d % 32 != 0) {
        throw DimensionError("pack_bits: column count " + std::to_string(d) +
                             " must be a positive multiple of 32");
    }
    CodeMatrix out(static_cast<std::uint32_t>(bits.rows()), static_cast<std::uint32_t>(d));
    const std::size_t chunk_cols = d / 32;
    for (std::size_t i = 0; i < bits.rows(); ++i) {
        const std::uint8_t* brow = bits.row(i).data();
        std::uint32_t* orow = out.row(static_cast<std::uint32_t>(i)).data();
        for (std::size_t c = 0; c < 32; ++c) {
            const std::uint8_t* chunk = brow + c * chunk_cols;
            for (std::size_t w = 0; w < chunk_cols; ++w) {
                orow[w] = (orow[w] << 1) | static_cast<std::uint32_t>(chunk[w] & 1u);
            }
        }
    }
    return out;
}

BitMatrix unpack_bits(const CodeMatrix& codes) {
    const std::size_t chunk_cols = codes.words_per_row();
    BitMatrix out(codes.rows(), codes.length_bits());
    for (std::uint32_t i = 0; i < codes.rows(); ++i) {
        const std::uint32_t* crow = codes.row(i).data();
        std::uint8_t* brow = out.row(i).data();
        for (std::size_t w = 0; w < chunk_cols; ++w) {
            const std::uint32_t word = crow[w];
            for (std::size_t c = 0; c < 32; ++c) {
                brow[c * chunk_cols + w] = static_cast<std::uint8_t>((word >> (31 - c)) & 1u);
            }
        }
    }
    return out;
}

void nxor_scores_into(std::span<const std::uint32_t> query_words, const CodeMatrix& index,
                      std::uint32_t n_valid, std::int32_t* out) {
    const std::size_t wpr = index.words_per_row();
    if (query_words.size() != wpr) {
        throw DimensionError("nxor_scores: query has " + std::to_string(query_words.size() * 32) +
                             " bits, index has " + std::to_string(index.length_bits()));
    }
    const std::uint32_t* q = query_words.data();
    const std::uint32_t* rows = index.raw().data();
    for (std::uint32_t i = 0; i < n_valid; ++i) {
        const std::uint32_t* r = rows + static_cast<std::size_t>(i) * wpr;
        std::int32_t agree = 0;
        for (std::size_t w = 0; w < wpr; ++w) {
            agree += std::popcount(~(q[w] ^ r[w]));
        }
        out[i] = agree;
    }
}

ScoreVector nxor_scores(const HashCode& query, const CodeMatrix& index) {
    if (query.length_bits != index.length_bits()) {
        throw DimensionError("nxor_scores: query length " + std::to_string(query.length_bits) +
                             " != index length " + std::to_string(index.length_bits()));
    }
    ScoreVector scores(index.rows());
    nxor_scores_into({query.words.data(), query.words.size()}, index, index.rows(),
                     scores.data());
    return scores;
}

namespace {

template <typename S>
struct Entry {
    S score;
    std::uint32_t idx;
};

// "a ranks ahead of b": higher score, lower index on ties. Used as the heap
// comparator so the heap top is always the current worst of the kept k.
template <typename S>
bool ranks_ahead(const Entry<S>& a, const Entry<S>& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.idx < b.idx;
}

}  // namespace

template <typename S>
std::vector<std::uint32_t> top_k_indices(std::span<const S> scores, std::uint32_t k) {
    const std::size_t n = scores.size();
    if (k == 0 || k > n) {
        throw DimensionError("top_k_indices: k=" + std::to_string(k) + " out of range for n=" +
                             std::to_string(n));
    }
    std::vector<Entry<S>> heap;
    heap.reserve(k);
    for (std::uint32_t i = 0; i < n; ++i) {
        const Entry<S> cand{scores[i], i};
        if (heap.size() < k) {
            heap.push_back(cand);
            std::push_heap(heap.begin(), heap.end(), ranks_ahead<S>);
        } else if (ranks_ahead(cand, heap.front())) {
            std::pop_heap(heap.begin(), heap.end(), ranks_ahead<S>);
            heap.back() = cand;
            std::push_heap(heap.begin(), heap.end(), ranks_ahead<S>);
        }
    }
    std::vector<std::uint32_t> out(heap.size());
    for (std::size_t i = 0; i < heap.size(); ++i) out[i] = heap[i].idx;
    std::sort(out.begin(), out.end());
    return out;
}

template std::vector<std::uint32_t> top_k_indices<std::int32_t>(std::span<const std::int32_t>,
                                                                std::uint32_t);
template std::vector<std::uint32_t> top_k_indices<float>(std::span<const float>, std::uint32_t);
template std::vector<std::uint32_t> top_k_indices<double>(std::span<const double>, std::uint32_t);

void write_code_index(const std::string& path, const CodeMatrix& codes) {
    auto os = binio::open_out(path);
    os.write("SPLC", 4);
    binio::put_u32(os, 1);
    binio::put_u32(os, codes.rows());
    binio::put_u32(os, codes.length_bits());
    binio::put_block<std::uint32_t>(os, codes.raw());
    if (!os) throw IoError("write failed: " + path);
}

CodeMatrix read_code_index(const std::string& path) {
    auto is = binio::open_in(path);
    binio::expect_magic(is, "SPLC", path);
    const std::uint32_t version = binio::get_u32(is, path, "version");
    if (version != 1) {
        throw FormatError(path + ": unsupported SPLC version " + std::to_string(version));
    }
    const std::uint32_t n = binio::get_u32(is, path, "row count");
    const std::uint32_t bits = binio::get_u32(is, path, "code length");
    CodeMatrix codes(n, bits);
    binio::get_block<std::uint32_t>(is, codes.raw(), path, "code words");
    return codes;
}

}  // namespace spotlight
