#ifndef FEDRIR_CHECKPOINT_HPP
#define FEDRIR_CHECKPOINT_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "fedrir/tensor.hpp"

namespace fedrir {

class CheckpointError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// ParameterSet checkpoint file, little-endian throughout:
//   magic "FRIR", version u32, entry count u32,
//   per entry: name length u32, UTF-8 name, dtype u8 (1=f64, 2=f32),
//              rank u32, extents u64 each, row-major payload.
namespace detail {

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <class T>
void put_le(std::ostream& os, T v) {
    static_assert(std::is_integral_v<T>);
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i)
        buf[i] = static_cast<unsigned char>((static_cast<std::make_unsigned_t<T>>(v) >> (8 * i)) & 0xff);
    put_bytes(os, buf, sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw CheckpointError("checkpoint truncated");
    std::make_unsigned_t<T> v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
        v |= static_cast<std::make_unsigned_t<T>>(buf[i]) << (8 * i);
    return static_cast<T>(v);
}

template <class F>
void put_float_le(std::ostream& os, F v) {
    static_assert(sizeof(F) == 4 || sizeof(F) == 8);
    std::conditional_t<sizeof(F) == 4, uint32_t, uint64_t> bits;
    std::memcpy(&bits, &v, sizeof(F));
    put_le(os, bits);
}

template <class F>
F get_float_le(std::istream& is) {
    auto bits = get_le<std::conditional_t<sizeof(F) == 4, uint32_t, uint64_t>>(is);
    F v;
    std::memcpy(&v, &bits, sizeof(F));
    return v;
}

}  // namespace detail

inline constexpr uint32_t kCheckpointVersion = 1;

template <class S>
void save_checkpoint(std::ostream& os, const ParameterSet<S>& params) {
    os.write("FRIR", 4);
    detail::put_le<uint32_t>(os, kCheckpointVersion);
    detail::put_le<uint32_t>(os, static_cast<uint32_t>(params.size()));
    const uint8_t dtype = sizeof(S) == 8 ? 1 : 2;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::string& name = params.names()[i];
        const Mat<S>& m = params.value(i);
        detail::put_le<uint32_t>(os, static_cast<uint32_t>(name.size()));
        detail::put_bytes(os, name.data(), name.size());
        detail::put_le<uint8_t>(os, dtype);
        detail::put_le<uint32_t>(os, 2);  // always rank-2 (rows x cols)
        detail::put_le<uint64_t>(os, static_cast<uint64_t>(m.rows()));
        detail::put_le<uint64_t>(os, static_cast<uint64_t>(m.cols()));
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c)
                detail::put_float_le<S>(os, m(r, c));
    }
    if (!os) throw CheckpointError("checkpoint write failed");
}

template <class S>
void save_checkpoint(const std::string& path, const ParameterSet<S>& params) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint for write: " + path);
    save_checkpoint(f, params);
}

// Payload is converted to S when the stored dtype differs.
template <class S>
ParameterSet<S> load_checkpoint(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "FRIR", 4) != 0)
        throw CheckpointError("bad checkpoint magic (expected FRIR)");
    const auto version = detail::get_le<uint32_t>(is);
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " +
                              std::to_string(version));
    const auto count = detail::get_le<uint32_t>(is);
    ParameterSet<S> params;
    for (uint32_t i = 0; i < count; ++i) {
        const auto name_len = detail::get_le<uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw CheckpointError("checkpoint truncated in name");
        const auto dtype = detail::get_le<uint8_t>(is);
        if (dtype != 1 && dtype != 2)
            throw CheckpointError("unknown dtype tag " + std::to_string(dtype));
        const auto rank = detail::get_le<uint32_t>(is);
        if (rank != 2)
            throw CheckpointError("unsupported rank " + std::to_string(rank));
        const auto rows = detail::get_le<uint64_t>(is);
        const auto cols = detail::get_le<uint64_t>(is);
        Mat<S> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        for (uint64_t r = 0; r < rows; ++r)
            for (uint64_t c = 0; c < cols; ++c) {
                m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                    dtype == 1
                        ? static_cast<S>(detail::get_float_le<double>(is))
                        : static_cast<S>(detail::get_float_le<float>(is));
            }
        params.add(name, std::move(m));
    }
    return params;
}

template <class S>
ParameterSet<S> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint: " + path);
    return load_checkpoint<S>(f);
}

}  // namespace fedrir

#endif  // FEDRIR_CHECKPOINT_HPP
