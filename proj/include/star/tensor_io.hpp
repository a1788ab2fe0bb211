#pragma once

// STAR binary tensor files.
//
//   offset  size        field
//   0       4           magic "STAR"
//   4       2           u16 version (= 1)
//   6       1           u8 dtype (0 = f32, 1 = f64)
//   7       1           u8 rank (1..3)
//   8       8 * rank    u64 dims
//   ...                 row-major payload
//
// All integers and floats are little-endian. Interchange files default to
// f32; checkpoints are written as f64 so that save/load round-trips exactly.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "star/tensor.hpp"

namespace star::io {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

inline constexpr std::array<char, 4> kMagic{'S', 'T', 'A', 'R'};
inline constexpr std::uint16_t kVersion = 1;

namespace detail {

template <class U>
void put_le(std::vector<unsigned char>& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

template <class U>
U get_le(const unsigned char* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline std::vector<unsigned char> encode(const Tensor& t, DType dtype = DType::f32) {
    std::vector<unsigned char> out;
    const std::size_t width = dtype == DType::f32 ? 4 : 8;
    out.reserve(8 + 8 * t.rank() + width * t.size());
    out.insert(out.end(), kMagic.begin(), kMagic.end());
    detail::put_le<std::uint16_t>(out, kVersion);
    out.push_back(static_cast<unsigned char>(dtype));
    out.push_back(static_cast<unsigned char>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(out, d);
    for (double v : t.data()) {
        if (dtype == DType::f32)
            detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        else
            detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

inline Tensor decode(const std::vector<unsigned char>& bytes, const std::string& origin = "<memory>") {
    auto fail = [&](const std::string& why) { return IoError(origin + ": " + why); };
    if (bytes.size() < 8) throw fail("truncated header");
    if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) throw fail("bad magic");
    const auto version = detail::get_le<std::uint16_t>(bytes.data() + 4);
    if (version != kVersion) throw fail("unsupported version " + std::to_string(version));
    const auto dtype = bytes[6];
    if (dtype > 1) throw fail("unsupported dtype " + std::to_string(dtype));
    const std::size_t rank = bytes[7];
    if (rank < 1 || rank > 3) throw fail("rank " + std::to_string(rank) + " outside 1..3");
    if (bytes.size() < 8 + 8 * rank) throw fail("truncated dims");
    Shape shape(rank);
    std::uint64_t count = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        shape[i] = detail::get_le<std::uint64_t>(bytes.data() + 8 + 8 * i);
        if (shape[i] != 0 && count > bytes.size() / shape[i]) throw fail("dims exceed payload");
        count *= shape[i];
    }
    const std::size_t width = dtype == 0 ? 4 : 8;
    const std::size_t offset = 8 + 8 * rank;
    if (bytes.size() != offset + width * count)
        throw fail("payload is " + std::to_string(bytes.size() - offset) + " bytes, expected " +
                   std::to_string(width * count));
    std::vector<double> data(count);
    const unsigned char* p = bytes.data() + offset;
    for (std::size_t i = 0; i < count; ++i) {
        if (dtype == 0)
            data[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(p + 4 * i));
        else
            data[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(p + 8 * i));
    }
    try {
        return Tensor::from_external(std::move(shape), std::move(data));
    } catch (const DimensionError& e) {
        throw fail(e.what());
    }
}

inline void save(const std::filesystem::path& path, const Tensor& t, DType dtype = DType::f32) {
    const auto bytes = encode(t, dtype);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

inline Tensor load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode(bytes, path.string());
}

}  // namespace star::io
