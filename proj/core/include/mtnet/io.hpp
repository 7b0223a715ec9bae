#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtnet/tensor.hpp"

namespace mtnet {

/// Binary P5 portable graymap.
void write_pgm(const std::string& path, const std::vector<uint8_t>& pixels, int64_t width,
               int64_t height);

/// Channel-mean of batch element 0, min-max normalized to [0,255]
/// (constant maps come out all zero). Row-major height x width bytes.
std::vector<uint8_t> heatmap_bytes(const Tensor& feature);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

}  // namespace mtnet
