#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "insetopt/tensor.hpp"

namespace insetopt {

// 8-bit PNG, values round(255 * clamp(x, 0, 1)). Accepts [1,h,w] (grayscale)
// or [3,h,w] (RGB). The encoder uses stored deflate blocks, so output bytes
// depend only on the pixel values.
void write_png(const std::string& path, const Tensor& img);

// Raw f64 dump for exact regression comparisons: magic, rank, dims,
// little-endian doubles.
void write_raw_tensor(const std::string& path, const Tensor& t);
Tensor read_raw_tensor(const std::string& path);

void write_csv(const std::string& path, const std::vector<std::string>& columns,
               const std::vector<std::vector<double>>& rows,
               const std::vector<std::string>& header_comments = {});

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

std::string format_double(double v);  // shortest round-trippable form

std::uint64_t fnv1a64(const std::string& s);
std::string hex64(std::uint64_t v);

}  // namespace insetopt
