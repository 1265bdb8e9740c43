#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "mvaf/tensor.hpp"

namespace mvaf {

// Little-endian binary helpers shared by tensor blobs, clips and checkpoints.
namespace binary {

void write_u8(std::ostream& os, std::uint8_t v);
void write_u16(std::ostream& os, std::uint16_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_magic(std::ostream& os, const char (&magic)[5]);

std::uint8_t read_u8(std::istream& is);
std::uint16_t read_u16(std::istream& is);
std::uint32_t read_u32(std::istream& is);
// Throws FormatError naming `what` if the next four bytes differ.
void expect_magic(std::istream& is, const char (&magic)[5], const std::string& what);

}  // namespace binary

inline constexpr std::uint32_t kTensorBlobVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

// "MVTF" | version u32 | rank u32 | dims u32... | dtype u8 | raw values.
template <typename Real>
void write_tensor(std::ostream& os, const Tensor<Real>& t);

// Reads a blob of either dtype, converting to Real.
template <typename Real>
Tensor<Real> read_tensor(std::istream& is);

extern template void write_tensor<float>(std::ostream&, const Tensor<float>&);
extern template void write_tensor<double>(std::ostream&, const Tensor<double>&);
extern template Tensor<float> read_tensor<float>(std::istream&);
extern template Tensor<double> read_tensor<double>(std::istream&);

}  // namespace mvaf
