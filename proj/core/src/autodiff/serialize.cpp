#include "schedlab/autodiff/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <vector>

#include <nlohmann/json.hpp>

namespace schedlab::ad {

void write_f32(std::ostream& os, const float* values, std::size_t count) {
  std::vector<char> buf(count * 4);
  for (std::size_t i = 0; i < count; ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) buf[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("failed to write float32 block");
}

void read_f32(std::istream& is, float* values, std::size_t count) {
  std::vector<char> buf(count * 4);
  is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) throw IoError("truncated float32 block");
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[i * 4 + b])) << (8 * b);
    values[i] = std::bit_cast<float>(bits);
  }
}

template <typename T>
void write_tensor(std::ostream& os, const std::string& name, const Tensor<T>& tensor) {
  nlohmann::json header{{"name", name}, {"shape", tensor.shape()}};
  os << header.dump() << '\n';
  std::vector<float> f(tensor.values().begin(), tensor.values().end());
  write_f32(os, f.data(), f.size());
}

template <typename T>
std::pair<std::string, Tensor<T>> read_tensor(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("missing tensor header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed tensor header: ") + e.what());
  }
  if (!header.contains("name") || !header.contains("shape")) throw IoError("tensor header lacks name/shape");
  auto shape = header.at("shape").get<Shape>();
  std::vector<float> f(shape_size(shape));
  read_f32(is, f.data(), f.size());
  std::vector<T> values(f.begin(), f.end());
  return {header.at("name").get<std::string>(), Tensor<T>::from(std::move(shape), std::move(values))};
}

template void write_tensor<float>(std::ostream&, const std::string&, const Tensor<float>&);
template void write_tensor<double>(std::ostream&, const std::string&, const Tensor<double>&);
template std::pair<std::string, Tensor<float>> read_tensor<float>(std::istream&);
template std::pair<std::string, Tensor<double>> read_tensor<double>(std::istream&);

}  // namespace schedlab::ad
