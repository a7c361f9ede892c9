#pragma once

#include <string>

#include "qseg/tensor.hpp"

namespace qseg {

/// 8-bit grayscale; values clamped to [0,1] then scaled to 0..255.
void write_png_gray8(const std::string& path, const Tensor& map);

/// 1-bit grayscale for binary masks (nonzero = white).
void write_png_mask1(const std::string& path, const Tensor& mask);

/// Reads 1/2/4/8-bit grayscale PNG into H x W x 1 values in [0,1].
Tensor read_png_gray(const std::string& path);

/// Query image with the predicted boundary in red and, when given, the
/// ground-truth boundary in green.
void write_png_overlay(const std::string& path, const Tensor& image, const Tensor& predicted,
                       const Tensor* truth = nullptr);

}  // namespace qseg
