#pragma once

// "DCT1" tensor dump: magic "DCT1", u32 LE rank, rank x u32 LE dims, then
// product(dims) x f64 LE payload in row-major order.

#include <filesystem>
#include <iosfwd>

#include "denseclip/tensor.hpp"

namespace denseclip::dct1 {

void write(std::ostream& out, const Tensor& t);
Tensor read(std::istream& in);

void save(const std::filesystem::path& path, const Tensor& t);
Tensor load(const std::filesystem::path& path);

}  // namespace denseclip::dct1
