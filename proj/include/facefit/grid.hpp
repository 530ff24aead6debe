#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace facefit {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Thrown when array dimensions of two operands disagree.
struct shape_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Thrown when an argument lies outside the domain of an operation.
struct domain_error : std::domain_error {
  using std::domain_error::domain_error;
};

// Thrown for continuous coordinates outside a sampled grid.
struct range_error : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Dense row-major multi-channel grid of doubles. Used both for images
// (rows = height, cols = width) and for UV-space maps (rows = U, cols = V).
struct Grid {
  int rows = 0;
  int cols = 0;
  int channels = 0;
  std::vector<double> data;

  Grid() = default;
  Grid(int rows_, int cols_, int channels_, double fill = 0.0)
      : rows(rows_), cols(cols_), channels(channels_),
        data(static_cast<std::size_t>(rows_) * cols_ * channels_, fill) {
    if (rows_ < 0 || cols_ < 0 || channels_ <= 0)
      throw shape_error("grid dimensions must be non-negative");
  }

  std::size_t index(int r, int c, int ch = 0) const {
    return (static_cast<std::size_t>(r) * cols + c) * channels + ch;
  }
  double& operator()(int r, int c, int ch = 0) { return data[index(r, c, ch)]; }
  double operator()(int r, int c, int ch = 0) const {
    return data[index(r, c, ch)];
  }
  std::size_t pixels() const { return static_cast<std::size_t>(rows) * cols; }
  bool same_shape(const Grid& o) const {
    return rows == o.rows && cols == o.cols && channels == o.channels;
  }

  Vec3 rgb(int r, int c) const {
    auto i = index(r, c);
    return {data[i], data[i + 1], data[i + 2]};
  }
  void set_rgb(int r, int c, const Vec3& v) {
    auto i = index(r, c);
    data[i] = v.x();
    data[i + 1] = v.y();
    data[i + 2] = v.z();
  }

  friend bool operator==(const Grid&, const Grid&) = default;
};

using Image = Grid;

// Per-cell boolean flags with the same row/col layout as a Grid.
struct Mask {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(int rows_, int cols_, bool fill = false)
      : rows(rows_), cols(cols_),
        data(static_cast<std::size_t>(rows_) * cols_, fill ? 1 : 0) {}

  bool operator()(int r, int c) const {
    return data[static_cast<std::size_t>(r) * cols + c] != 0;
  }
  void set(int r, int c, bool v) {
    data[static_cast<std::size_t>(r) * cols + c] = v ? 1 : 0;
  }
  bool inside(int r, int c) const {
    return r >= 0 && c >= 0 && r < rows && c < cols;
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data) n += v != 0;
    return n;
  }

  friend bool operator==(const Mask&, const Mask&) = default;
};

// UV-space map with a validity mask over the unwrapped face region.
// Channels are (x,y,z) for shape maps, RGB for albedo/texture maps and
// unit normals for normal maps.
struct UVMap {
  Grid grid;
  Mask mask;

  UVMap() = default;
  UVMap(int u_size, int v_size, int channels = 3)
      : grid(u_size, v_size, channels), mask(u_size, v_size, false) {}

  int u_size() const { return grid.rows; }
  int v_size() const { return grid.cols; }
};

using UVShapeMap = UVMap;
using UVAlbedoMap = UVMap;
using UVTextureMap = UVMap;
using UVShadingMap = UVMap;

inline void require_same_shape(const Grid& a, const Grid& b, const char* what) {
  if (!a.same_shape(b))
    throw shape_error(std::string(what) + ": dimension mismatch (" +
                      std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                      "x" + std::to_string(a.channels) + " vs " +
                      std::to_string(b.rows) + "x" + std::to_string(b.cols) +
                      "x" + std::to_string(b.channels) + ")");
}

}  // namespace facefit
