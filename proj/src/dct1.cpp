#include "denseclip/dct1.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace denseclip::dct1 {
namespace {

constexpr std::array<char, 4> kMagic{'D', 'C', 'T', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 4)) throw ValidationError("DCT1: truncated header");
  return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) | (std::uint32_t{b[3]} << 24);
}

void put_f64(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((bits >> (8 * i)) & 0xff);
  out.write(b.data(), 8);
}

double get_f64(std::istream& in) {
  std::array<unsigned char, 8> b{};
  if (!in.read(reinterpret_cast<char*>(b.data()), 8)) throw ValidationError("DCT1: truncated payload");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t{b[static_cast<std::size_t>(i)]} << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void write(std::ostream& out, const Tensor& t) {
  out.write(kMagic.data(), 4);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (Index d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (Index i = 0; i < t.size(); ++i) put_f64(out, t.data()[i]);
}

Tensor read(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kMagic) throw ValidationError("DCT1: bad magic");
  const std::uint32_t rank = get_u32(in);
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<Index>(get_u32(in));
  std::vector<double> data(static_cast<std::size_t>(numel(shape)));
  for (auto& v : data) v = get_f64(in);
  return Tensor::from_data(std::move(shape), data);
}

void save(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write(out, t);
}

Tensor load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read(in);
}

}  // namespace denseclip::dct1
