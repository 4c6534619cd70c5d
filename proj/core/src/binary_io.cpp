#include "gear/binary_io.hpp"

#include <fstream>
#include <iterator>

namespace gear {

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ArtifactError("cannot open " + path.string());
  }
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw ArtifactError("cannot write " + path.string());
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw ArtifactError("short write to " + path.string());
  }
}

std::vector<std::uint8_t> seal_with_checksum(ByteWriter writer) {
  const std::uint64_t sum = fnv1a64(writer.bytes());
  writer.u64(sum);
  return writer.take();
}

void read_checksum_trailer(ByteReader& reader, std::span<const std::uint8_t> all) {
  const std::size_t body = reader.offset();
  const std::uint64_t stored = reader.u64();
  if (stored != fnv1a64(all.first(body))) {
    throw FormatError(body, "checksum mismatch");
  }
  if (reader.remaining() != 0) {
    throw FormatError(reader.offset(), "trailing bytes after checksum");
  }
}

}  // namespace gear
