#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "msb/tensor.hpp"

namespace msb {

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t x) {
    const std::array<unsigned char, 4> b{static_cast<unsigned char>(x & 0xff),
                                         static_cast<unsigned char>((x >> 8) & 0xff),
                                         static_cast<unsigned char>((x >> 16) & 0xff),
                                         static_cast<unsigned char>((x >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b.data()), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    std::array<unsigned char, 4> b{};
    is.read(reinterpret_cast<char*>(b.data()), 4);
    if (!is) throw IoError("unexpected end of stream reading u32");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f32(std::ostream& os, float x) {
    std::uint32_t bits;
    std::memcpy(&bits, &x, 4);
    write_u32(os, bits);
}

inline float read_f32(std::istream& is) {
    const std::uint32_t bits = read_u32(is);
    float x;
    std::memcpy(&x, &bits, 4);
    return x;
}

}  // namespace detail

inline constexpr char kSnapshotMagic[4] = {'M', 'S', 'B', 'T'};

// Snapshot format: magic "MSBT", 4 x u32 dims (n, c, h, w) little-endian,
// then n*c*h*w IEEE-754 binary32 values row-major with w fastest.
template <typename T>
void write_tensor_snapshot(std::ostream& os, const Tensor<T>& t) {
    os.write(kSnapshotMagic, 4);
    detail::write_u32(os, static_cast<std::uint32_t>(t.n));
    detail::write_u32(os, static_cast<std::uint32_t>(t.c));
    detail::write_u32(os, static_cast<std::uint32_t>(t.h));
    detail::write_u32(os, static_cast<std::uint32_t>(t.w));
    for (const T& x : t.v) detail::write_f32(os, static_cast<float>(x));
    if (!os) throw IoError("failed writing tensor snapshot");
}

template <typename T = float>
Tensor<T> read_tensor_snapshot(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kSnapshotMagic, 4) != 0) {
        throw IoError("bad tensor snapshot magic (expected MSBT)");
    }
    const int n = static_cast<int>(detail::read_u32(is));
    const int c = static_cast<int>(detail::read_u32(is));
    const int h = static_cast<int>(detail::read_u32(is));
    const int w = static_cast<int>(detail::read_u32(is));
    Tensor<T> t(n, c, h, w);
    for (T& x : t.v) x = static_cast<T>(detail::read_f32(is));
    return t;
}

template <typename T>
void write_tensor_snapshot(const std::string& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    write_tensor_snapshot(os, t);
}

template <typename T = float>
Tensor<T> read_tensor_snapshot(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    return read_tensor_snapshot<T>(is);
}

// Checkpoints are a plain sequence of named tensor snapshots:
// u32 name length, UTF-8 name bytes, then the snapshot.
template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
void write_checkpoint(std::ostream& os, const std::vector<NamedTensor<T>>& entries) {
    for (const NamedTensor<T>& e : entries) {
        detail::write_u32(os, static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        write_tensor_snapshot(os, e.tensor);
    }
    if (!os) throw IoError("failed writing checkpoint");
}

template <typename T = float>
std::vector<NamedTensor<T>> read_checkpoint(std::istream& is) {
    std::vector<NamedTensor<T>> entries;
    while (true) {
        is.peek();
        if (is.eof()) break;
        const std::uint32_t len = detail::read_u32(is);
        std::string name(len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(len));
        if (!is) throw IoError("unexpected end of checkpoint reading entry name");
        entries.push_back({std::move(name), read_tensor_snapshot<T>(is)});
    }
    return entries;
}

template <typename T>
void write_checkpoint(const std::string& path, const std::vector<NamedTensor<T>>& entries) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    write_checkpoint(os, entries);
}

template <typename T = float>
std::vector<NamedTensor<T>> read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    return read_checkpoint<T>(is);
}

}  // namespace msb
