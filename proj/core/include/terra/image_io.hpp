#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "terra/metrics.hpp"
#include "terra/tensor.hpp"

namespace terra {

// Binary PPM (P6) / PGM (P5), maxval 255. Lossless for 8-bit data; masks
// round-trip exactly.

// image: [3,H,W] in [0,1]; values are quantized to 8 bits on write.
void write_ppm(const std::string& path, const Tensor& image);
Tensor read_ppm(const std::string& path);  // back to [3,H,W] in [0,1]

void write_pgm(const std::string& path, const LabelMask& mask);
LabelMask read_pgm(const std::string& path);

}  // namespace terra
