#include "ltn/io/binary.hpp"

#include <fstream>
#include <iterator>

namespace ltn::io {

void BinaryWriter::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace ltn::io
