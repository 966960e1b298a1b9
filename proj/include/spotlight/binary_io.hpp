#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "spotlight/errors.hpp"

// Little-endian primitives shared by the SPLC / SPLH / SPLQ file formats.

namespace spotlight::binio {

static_assert(sizeof(float) == 4, "f32 storage requires 4-byte float");

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                          static_cast<unsigned char>((v >> 8) & 0xFF),
                          static_cast<unsigned char>((v >> 16) & 0xFF),
                          static_cast<unsigned char>((v >> 24) & 0xFF)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u8(std::ostream& os, std::uint8_t v) {
    os.write(reinterpret_cast<const char*>(&v), 1);
}

inline void put_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

inline std::uint32_t get_u32(std::istream& is, const std::string& file, const char* field) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) {
        throw FormatError(file + ": truncated while reading " + field + " at offset " +
                          std::to_string(static_cast<long long>(is.tellg())));
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint8_t get_u8(std::istream& is, const std::string& file, const char* field) {
    char c;
    if (!is.read(&c, 1)) {
        throw FormatError(file + ": truncated while reading " + field);
    }
    return static_cast<std::uint8_t>(c);
}

inline float get_f32(std::istream& is, const std::string& file, const char* field) {
    const std::uint32_t bits = get_u32(is, file, field);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

// Bulk payload blocks. On little-endian hosts these are raw copies.
template <typename T>
void put_block(std::ostream& os, std::span<const T> data) {
    static_assert(sizeof(T) == 4);
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * 4));
    } else {
        for (const T& v : data) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_u32(os, bits);
        }
    }
}

template <typename T>
void get_block(std::istream& is, std::span<T> out, const std::string& file, const char* field) {
    static_assert(sizeof(T) == 4);
    if constexpr (std::endian::native == std::endian::little) {
        if (!is.read(reinterpret_cast<char*>(out.data()),
                     static_cast<std::streamsize>(out.size() * 4))) {
            throw FormatError(file + ": truncated payload while reading " + field + " (expected " +
                              std::to_string(out.size() * 4) + " bytes)");
        }
    } else {
        for (T& v : out) {
            const std::uint32_t bits = get_u32(is, file, field);
            std::memcpy(&v, &bits, 4);
        }
    }
}

// Reads a 4-byte magic and reports the offset on mismatch.
inline void expect_magic(std::istream& is, const char expected[4], const std::string& file) {
    char got[4];
    if (!is.read(got, 4)) {
        throw FormatError(file + ": truncated while reading magic at offset 0");
    }
    if (std::memcmp(got, expected, 4) != 0) {
        throw FormatError(file + ": bad magic at offset 0, expected \"" +
                          std::string(expected, 4) + "\" got \"" + std::string(got, 4) + "\"");
    }
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    return os;
}

inline std::ifstream open_in(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path);
    return is;
}

}  // namespace spotlight::binio
