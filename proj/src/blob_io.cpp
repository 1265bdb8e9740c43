#include "mvaf/blob_io.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>
#include <type_traits>

namespace mvaf {

static_assert(std::endian::native == std::endian::little,
              "binary formats are written with native little-endian layout");

namespace binary {

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("unexpected end of file");
  return v;
}

}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { put(os, v); }
void write_u16(std::ostream& os, std::uint16_t v) { put(os, v); }
void write_u32(std::ostream& os, std::uint32_t v) { put(os, v); }
void write_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

std::uint8_t read_u8(std::istream& is) { return get<std::uint8_t>(is); }
std::uint16_t read_u16(std::istream& is) { return get<std::uint16_t>(is); }
std::uint32_t read_u32(std::istream& is) { return get<std::uint32_t>(is); }

void expect_magic(std::istream& is, const char (&magic)[5], const std::string& what) {
  char buf[4];
  if (!is.read(buf, 4) || std::memcmp(buf, magic, 4) != 0)
    throw FormatError(what + ": bad magic, expected \"" + std::string(magic, 4) + "\"");
}

}  // namespace binary

template <typename Real>
void write_tensor(std::ostream& os, const Tensor<Real>& t) {
  binary::write_magic(os, "MVTF");
  binary::write_u32(os, kTensorBlobVersion);
  binary::write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) binary::write_u32(os, static_cast<std::uint32_t>(d));
  binary::write_u8(os, static_cast<std::uint8_t>(std::is_same_v<Real, float> ? DType::F32 : DType::F64));
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.size() * sizeof(Real)));
  if (!os) throw FormatError("tensor blob: write failed");
}

namespace {

template <typename Stored, typename Real>
std::vector<Real> read_values(std::istream& is, std::size_t n) {
  std::vector<Stored> raw(n);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(Stored))))
    throw FormatError("tensor blob: truncated data");
  if constexpr (std::is_same_v<Stored, Real>) {
    return raw;
  } else {
    return std::vector<Real>(raw.begin(), raw.end());
  }
}

}  // namespace

template <typename Real>
Tensor<Real> read_tensor(std::istream& is) {
  binary::expect_magic(is, "MVTF", "tensor blob");
  const auto version = binary::read_u32(is);
  if (version != kTensorBlobVersion)
    throw FormatError("tensor blob: unsupported version " + std::to_string(version));
  const auto rank = binary::read_u32(is);
  if (rank == 0 || rank > 16) throw FormatError("tensor blob: invalid rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = binary::read_u32(is);
  const auto dtype = binary::read_u8(is);
  const std::size_t n = numel(shape);
  if (dtype == static_cast<std::uint8_t>(DType::F32))
    return Tensor<Real>(std::move(shape), read_values<float, Real>(is, n));
  if (dtype == static_cast<std::uint8_t>(DType::F64))
    return Tensor<Real>(std::move(shape), read_values<double, Real>(is, n));
  throw FormatError("tensor blob: unknown dtype tag " + std::to_string(dtype));
}

template void write_tensor<float>(std::ostream&, const Tensor<float>&);
template void write_tensor<double>(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor<float>(std::istream&);
template Tensor<double> read_tensor<double>(std::istream&);

}  // namespace mvaf
