#include "pmedit/weights_io.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>

#include "pmedit/errors.hpp"
#include "pmedit/rng.hpp"

namespace pmedit {

namespace {

void put_bytes(std::ostream& out, std::uint64_t value, int n_bytes) {
  for (int b = 0; b < n_bytes; ++b) {
    out.put(static_cast<char>((value >> (8 * b)) & 0xFF));
  }
}

std::uint64_t get_bytes(std::istream& in, int n_bytes) {
  std::uint64_t value = 0;
  for (int b = 0; b < n_bytes; ++b) {
    int c = in.get();
    if (c == std::char_traits<char>::eof()) {
      throw CorruptionError("unexpected end of weight file");
    }
    value |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * b);
  }
  return value;
}

}  // namespace

void write_matrices(const std::filesystem::path& path,
                    const std::vector<Matrix>& matrices) {
  if (matrices.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw InputError("too many matrices for the weight format");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  out.write("PMED", 4);
  put_bytes(out, kWeightFormatVersion, 2);
  put_bytes(out, matrices.size(), 2);
  for (const Matrix& m : matrices) {
    put_bytes(out, static_cast<std::uint64_t>(m.rows()), 4);
    put_bytes(out, static_cast<std::uint64_t>(m.cols()), 4);
    for (Index i = 0; i < m.rows(); ++i) {
      for (Index j = 0; j < m.cols(); ++j) {
        put_bytes(out, std::bit_cast<std::uint64_t>(m(i, j)), 8);
      }
    }
  }
  if (!out) throw InputError("write failed for " + path.string());
}

std::vector<Matrix> read_matrices(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::string(magic, 4) != "PMED") {
    throw CorruptionError(path.string() + " is not a PMED weight file");
  }
  const auto version = get_bytes(in, 2);
  if (version != kWeightFormatVersion) {
    throw CorruptionError("unsupported weight format version " + std::to_string(version));
  }
  const auto count = get_bytes(in, 2);
  std::vector<Matrix> matrices;
  matrices.reserve(count);
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto rows = static_cast<Index>(get_bytes(in, 4));
    const auto cols = static_cast<Index>(get_bytes(in, 4));
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i) {
      for (Index j = 0; j < cols; ++j) {
        m(i, j) = std::bit_cast<double>(get_bytes(in, 8));
      }
    }
    matrices.push_back(std::move(m));
  }
  return matrices;
}

void write_snapshot(const std::filesystem::path& path, const Snapshot& snap) {
  write_matrices(path, snap.layers);
}

Snapshot read_snapshot(const std::filesystem::path& path) {
  Snapshot snap;
  snap.layers = read_matrices(path);
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const Matrix& m : snap.layers) h = hash_matrix(h, m);
  snap.hash = h;
  return snap;
}

}  // namespace pmedit
