#include "ltn/numerics/weights_io.hpp"

#include <fstream>

#include "ltn/io/binary.hpp"

namespace ltn {

std::vector<char> encode_weights(const std::vector<NamedTensor>& tensors) {
  io::BinaryWriter w;
  w.bytes(std::string_view(kWeightsMagic, 4));
  w.u32(kWeightsVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.value.rank()));
    for (int d : t.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.value.data()) w.f32(v);
  }
  return w.buffer();
}

std::vector<NamedTensor> decode_weights(std::vector<char> bytes) {
  io::BinaryReader r(std::move(bytes));
  if (r.remaining() < 4 || r.bytes(4) != std::string_view(kWeightsMagic, 4)) {
    throw FormatError("not an LTNW weights file (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kWeightsVersion) {
    throw VersionError("LTNW version " + std::to_string(version) + " unsupported (expected " +
                       std::to_string(kWeightsVersion) + ")");
  }
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str(4096);
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError("parameter '" + t.name + "' has invalid rank " + std::to_string(rank));
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint32_t d = r.u32();
      if (d == 0 || d > (1u << 24)) throw FormatError("parameter '" + t.name + "' has invalid extent");
      shape.push_back(static_cast<int>(d));
      n *= d;
    }
    if (n * 4 > r.remaining()) throw TruncatedError("parameter '" + t.name + "' values truncated");
    std::vector<float> values(n);
    for (auto& v : values) v = r.f32();
    t.value = Tensor<float>(std::move(shape), std::move(values));
    out.push_back(std::move(t));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after LTNW payload");
  return out;
}

void save_weights(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  const auto bytes = encode_weights(tensors);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

std::vector<NamedTensor> load_weights(const std::filesystem::path& path) {
  return decode_weights(io::read_file(path));
}

}  // namespace ltn
