#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "mmvit/tensor.hpp"

namespace mmvit {

// Binary tensor layout: rank as unsigned 32-bit little-endian, then one
// unsigned 32-bit little-endian extent per axis, then the payload as 64-bit
// little-endian IEEE-754 floats in row-major order. All readers report the
// absolute byte offset of the first missing or malformed byte.

void write_u32(std::ostream& out, uint32_t v);
void write_u64(std::ostream& out, uint64_t v);
void write_f64(std::ostream& out, double v);
void write_tensor(std::ostream& out, const Tensor& t);

// `offset` tracks the running byte position inside the stream and is advanced
// by every read; pass 0 when the tensor starts the file.
uint32_t read_u32(std::istream& in, size_t& offset, const char* what);
uint64_t read_u64(std::istream& in, size_t& offset, const char* what);
double read_f64(std::istream& in, size_t& offset, const char* what);
Tensor read_tensor(std::istream& in, size_t& offset, const char* what);

}  // namespace mmvit
