#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>

namespace stgnn {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent sub-generator seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return mix_seed(mix_seed(seed) ^ mix_seed(stream + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << v;
    return s.str();
}

inline std::string file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return hex64(fnv1a64(ss.str()));
}

namespace io {

template <typename T>
void put(std::ostream& out, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.write(buf, sizeof(T));
}

template <typename T>
T get(std::istream& in) {
    static_assert(std::is_trivially_copyable_v<T>);
    char buf[sizeof(T)];
    if (!in.read(buf, sizeof(T))) throw std::runtime_error("unexpected end of binary stream");
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

inline void put_string(std::ostream& out, std::string_view s) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in) {
    const auto n = get<std::uint32_t>(in);
    if (n > (1u << 28)) throw std::runtime_error("corrupt string length in binary stream");
    std::string s(n, '\0');
    if (n && !in.read(s.data(), n)) throw std::runtime_error("unexpected end of binary stream");
    return s;
}

template <typename T>
void put_array(std::ostream& out, const T* data, std::size_t n) {
    static_assert(std::is_trivially_copyable_v<T>);
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
}

template <typename T>
void get_array(std::istream& in, T* data, std::size_t n) {
    static_assert(std::is_trivially_copyable_v<T>);
    if (n && !in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(T))))
        throw std::runtime_error("unexpected end of binary stream");
}

} // namespace io
} // namespace stgnn
