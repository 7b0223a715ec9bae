#include "mtnet/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mtnet {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << ")";
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) {
    if (e < 0) throw ShapeError("negative extent in shape " + shape_str(s));
    n *= e;
  }
  return n;
}

Tensor Tensor::zeros(Shape shape) {
  Tensor t;
  int64_t n = shape_numel(shape);
  t.shape_ = std::move(shape);
  t.data_.assign(static_cast<size_t>(n), 0.0);
  return t;
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t = zeros(std::move(shape));
  for (auto& v : t.data_) v = value;
  return t;
}

Tensor Tensor::scalar(double value) {
  Tensor t;
  t.data_[0] = value;
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(data.size()))
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(data);
  return t;
}

double Tensor::item() const {
  if (numel() != 1)
    throw ShapeError("item() requires a single-element tensor, got shape " + shape_string());
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

namespace {

constexpr char kMagic[8] = {'T', 'N', 'S', 'R', '0', '0', '0', '1'};

static_assert(std::endian::native == std::endian::little,
              "tensor container I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

void write_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(kMagic, sizeof(kMagic));
  put<uint32_t>(os, static_cast<uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) put<uint64_t>(os, static_cast<uint64_t>(t.extent(i)));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(sizeof(double)) * t.numel());
  if (!os) throw IoError("short write: " + path);
}

Tensor read_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("bad tensor magic in " + path);
  uint32_t rank = get<uint32_t>(is);
  if (rank > 8) throw IoError("implausible tensor rank in " + path);
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int64_t>(get<uint64_t>(is));
  Tensor t = Tensor::zeros(shape);
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(sizeof(double)) * t.numel());
  if (!is) throw IoError("short read: " + path);
  return t;
}

}  // namespace mtnet
