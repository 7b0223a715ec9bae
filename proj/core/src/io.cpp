#include "mtnet/io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace mtnet {

void write_pgm(const std::string& path, const std::vector<uint8_t>& pixels, int64_t width,
               int64_t height) {
  if (static_cast<int64_t>(pixels.size()) != width * height)
    throw ShapeError("write_pgm: pixel count does not match " + std::to_string(width) + "x" +
                     std::to_string(height));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "P5\n" << width << " " << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(pixels.data()),
           static_cast<std::streamsize>(pixels.size()));
  if (!os) throw IoError("short write: " + path);
}

std::vector<uint8_t> heatmap_bytes(const Tensor& feature) {
  if (feature.rank() != 4)
    throw ShapeError("heatmap_bytes: expected 4-D feature, got " + feature.shape_string());
  int64_t c = feature.extent(1), h = feature.extent(2), w = feature.extent(3);
  std::vector<double> mean(static_cast<size_t>(h * w), 0.0);
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < h * w; ++i) mean[static_cast<size_t>(i)] += feature[ch * h * w + i];
  for (auto& v : mean) v /= static_cast<double>(c);
  double lo = mean[0], hi = mean[0];
  for (double v : mean) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<uint8_t> out(mean.size(), 0);
  if (hi > lo) {
    for (size_t i = 0; i < mean.size(); ++i) {
      double n = 255.0 * (mean[i] - lo) / (hi - lo);
      out[i] = static_cast<uint8_t>(std::clamp(std::llround(n), 0LL, 255LL));
    }
  }
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << content;
  if (!os) throw IoError("short write: " + path);
}

}  // namespace mtnet
