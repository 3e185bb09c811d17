#pragma once

#include <string>

#include "cbff/tensor.hpp"

namespace cbff {

// PNG I/O. Images on disk are 8-bit; in memory they are float (C,H,W) in
// [0,1] for imagery and uint8 (H,W) in {0,1} for masks. Mask pixels binarize
// as value > 127 -> 1 and store as 0/255.

// Returns (3,H,W); grayscale and RGBA files are expanded/flattened to RGB.
Tensor<float> read_image_png(const std::string& path);
void write_image_png(const std::string& path, const Tensor<float>& img);

Tensor<uint8_t> read_mask_png(const std::string& path);
void write_mask_png(const std::string& path, const Tensor<uint8_t>& mask);

}  // namespace cbff
