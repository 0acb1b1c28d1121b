#pragma once

#include <iosfwd>
#include <string>
#include <utility>

#include "schedlab/autodiff/tensor.hpp"

namespace schedlab::ad {

/// Writes one named tensor: a JSON header line {"name":..,"shape":[..]}
/// followed by little-endian float32 values in row-major order.
template <typename T>
void write_tensor(std::ostream& os, const std::string& name, const Tensor<T>& tensor);

/// Reads the next named tensor; throws IoError on malformed input.
template <typename T>
std::pair<std::string, Tensor<T>> read_tensor(std::istream& is);

/// Little-endian float32 encoding helpers shared with the corpus blobs.
void write_f32(std::ostream& os, const float* values, std::size_t count);
void read_f32(std::istream& is, float* values, std::size_t count);

}  // namespace schedlab::ad
