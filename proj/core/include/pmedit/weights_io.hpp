#pragma once

#include <filesystem>
#include <vector>

#include "pmedit/toymodel.hpp"
#include "pmedit/types.hpp"

namespace pmedit {

// Binary weight container:
//   magic "PMED" (4 bytes)
//   format version  u16 LE   (currently 1)
//   matrix count    u16 LE
//   per matrix: rows u32 LE, cols u32 LE, entries row-major f64 LE
// Doubles round-trip bit-exactly.
inline constexpr std::uint16_t kWeightFormatVersion = 1;

void write_matrices(const std::filesystem::path& path,
                    const std::vector<Matrix>& matrices);
std::vector<Matrix> read_matrices(const std::filesystem::path& path);

void write_snapshot(const std::filesystem::path& path, const Snapshot& snap);
Snapshot read_snapshot(const std::filesystem::path& path);

}  // namespace pmedit
