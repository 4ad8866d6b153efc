#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace gist {

enum class MatrixDtype : std::uint32_t { float32 = 1, float64 = 2 };

// Versioned binary matrix block (little-endian):
//   magic (8) | version u32 | dtype u32 | rows u64 | cols u64 | row-major data
// Several blocks may be concatenated in one file.
inline constexpr std::uint32_t kMatrixBlockVersion = 1;

void append_matrix(std::string& out, const char (&magic)[9], const Eigen::MatrixXd& m,
                   MatrixDtype dtype);

/// Reads one block from the front of `in` and advances it. Throws parse on a
/// magic/version mismatch or truncated data.
Eigen::MatrixXd read_matrix(std::string_view& in, const char (&magic)[9]);

}  // namespace gist
