#include "mmvit/serialize.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

namespace mmvit {

namespace {

void put_bytes(std::ostream& out, uint64_t v, int n) {
    char buf[8];
    for (int i = 0; i < n; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(buf, n);
}

uint64_t take_bytes(std::istream& in, size_t& offset, int n, const char* what) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), n);
    if (in.gcount() != n)
        throw FormatError(std::string("truncated input while reading ") + what,
                          offset + static_cast<size_t>(in.gcount()));
    uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
    offset += static_cast<size_t>(n);
    return v;
}

}  // namespace

void write_u32(std::ostream& out, uint32_t v) { put_bytes(out, v, 4); }
void write_u64(std::ostream& out, uint64_t v) { put_bytes(out, v, 8); }
void write_f64(std::ostream& out, double v) { put_bytes(out, std::bit_cast<uint64_t>(v), 8); }

void write_tensor(std::ostream& out, const Tensor& t) {
    write_u32(out, static_cast<uint32_t>(t.rank()));
    for (int e : t.shape) write_u32(out, static_cast<uint32_t>(e));
    for (double x : t.data) write_f64(out, x);
}

uint32_t read_u32(std::istream& in, size_t& offset, const char* what) {
    return static_cast<uint32_t>(take_bytes(in, offset, 4, what));
}

uint64_t read_u64(std::istream& in, size_t& offset, const char* what) {
    return take_bytes(in, offset, 8, what);
}

double read_f64(std::istream& in, size_t& offset, const char* what) {
    return std::bit_cast<double>(take_bytes(in, offset, 8, what));
}

Tensor read_tensor(std::istream& in, size_t& offset, const char* what) {
    const size_t rank_at = offset;
    const uint32_t rank = read_u32(in, offset, what);
    if (rank == 0 || rank > 8)
        throw FormatError(std::string("implausible tensor rank ") + std::to_string(rank) +
                              " while reading " + what,
                          rank_at);
    std::vector<int> shape(rank);
    for (uint32_t i = 0; i < rank; ++i) {
        const size_t extent_at = offset;
        const uint32_t e = read_u32(in, offset, what);
        if (e == 0 || e > (1u << 24))
            throw FormatError(std::string("implausible tensor extent ") + std::to_string(e) +
                                  " while reading " + what,
                              extent_at);
        shape[i] = static_cast<int>(e);
    }
    Tensor t(shape);
    for (double& x : t.data) x = read_f64(in, offset, what);
    return t;
}

}  // namespace mmvit
