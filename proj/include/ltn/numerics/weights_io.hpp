#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ltn/numerics/tensor.hpp"

// "LTNW" parameter container:
//   magic "LTNW" | u32 version | u32 count |
//   count x (u32 name length, name bytes, u32 rank, rank x u32 extent, f32 values)
// All integers and floats little-endian.
namespace ltn {

inline constexpr char kWeightsMagic[] = "LTNW";
inline constexpr std::uint32_t kWeightsVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

std::vector<char> encode_weights(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_weights(std::vector<char> bytes);

void save_weights(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_weights(const std::filesystem::path& path);

template <typename T>
std::vector<NamedTensor> snapshot(const ParameterList<T>& params) {
  std::vector<NamedTensor> out;
  out.reserve(params.size());
  for (const auto* p : params) out.push_back({p->name, p->value.template cast<float>()});
  return out;
}

/// Copy stored values into `params`, matching by name; every parameter must be
/// present with an identical shape.
template <typename T>
void restore(const std::vector<NamedTensor>& stored, const ParameterList<T>& params) {
  for (auto* p : params) {
    const NamedTensor* hit = nullptr;
    for (const auto& s : stored) {
      if (s.name == p->name) hit = &s;
    }
    if (hit == nullptr) throw FormatError("checkpoint has no parameter named '" + p->name + "'");
    if (hit->value.shape() != p->value.shape()) {
      throw FormatError("checkpoint parameter '" + p->name + "' has shape " + to_string(hit->value.shape()) +
                        ", model expects " + to_string(p->value.shape()));
    }
    p->value = hit->value.template cast<T>();
    p->grad = Tensor<T>::zeros_like(p->value);
  }
}

}  // namespace ltn
