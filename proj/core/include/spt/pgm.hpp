#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace spt {

// Binary PGM (P5, maxval 255).
void write_pgm(const std::string& path, int64_t w, int64_t h, const std::vector<uint8_t>& bytes);
std::vector<uint8_t> read_pgm(const std::string& path, int64_t& w, int64_t& h);

// Grayscale [0,1] <-> byte quantization used for dataset images.
std::vector<uint8_t> quantize_image(const std::vector<double>& values);
std::vector<double> dequantize_image(const std::vector<uint8_t>& bytes);

// Binary masks are stored as 0/255 and read back as 0/1.
void write_mask_pgm(const std::string& path, int64_t w, int64_t h,
                    const std::vector<uint8_t>& mask01);
std::vector<uint8_t> read_mask_pgm(const std::string& path, int64_t& w, int64_t& h);

}  // namespace spt
