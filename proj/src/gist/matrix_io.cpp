#include "gist/matrix_io.hpp"

#include <cstring>

#include "gist/error.hpp"

namespace gist {

namespace {
template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(std::string_view& in) {
  if (in.size() < sizeof(T)) throw Error(ErrorCode::parse, "truncated matrix block");
  T value;
  std::memcpy(&value, in.data(), sizeof(T));
  in.remove_prefix(sizeof(T));
  return value;
}
}  // namespace

void append_matrix(std::string& out, const char (&magic)[9], const Eigen::MatrixXd& m,
                   MatrixDtype dtype) {
  out.append(magic, 8);
  put<std::uint32_t>(out, kMatrixBlockVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(dtype));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (dtype == MatrixDtype::float32) {
        put<float>(out, static_cast<float>(m(r, c)));
      } else {
        put<double>(out, m(r, c));
      }
    }
  }
}

Eigen::MatrixXd read_matrix(std::string_view& in, const char (&magic)[9]) {
  if (in.size() < 8 || std::memcmp(in.data(), magic, 8) != 0) {
    throw Error(ErrorCode::parse, std::string("expected a '") + magic + "' matrix block");
  }
  in.remove_prefix(8);
  if (take<std::uint32_t>(in) != kMatrixBlockVersion) {
    throw Error(ErrorCode::parse, "unsupported matrix block version");
  }
  const auto dtype = static_cast<MatrixDtype>(take<std::uint32_t>(in));
  if (dtype != MatrixDtype::float32 && dtype != MatrixDtype::float64) {
    throw Error(ErrorCode::parse, "unknown matrix dtype");
  }
  const auto rows = take<std::uint64_t>(in);
  const auto cols = take<std::uint64_t>(in);
  const std::size_t elem = dtype == MatrixDtype::float32 ? 4 : 8;
  if (cols != 0 && rows > in.size() / elem / cols) throw Error(ErrorCode::parse, "truncated matrix block");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      m(r, c) = dtype == MatrixDtype::float32 ? static_cast<double>(take<float>(in)) : take<double>(in);
    }
  }
  return m;
}

}  // namespace gist
