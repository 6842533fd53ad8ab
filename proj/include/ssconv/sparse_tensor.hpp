#pragma once

#include "ssconv/repr_theory.hpp"

#include <Eigen/Dense>

#include <array>
#include <compare>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ssconv {

using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Extent = std::array<int, 3>;

/// Integer grid site. Ordering is lexicographic with z most significant.
struct Coord {
  int x = 0;
  int y = 0;
  int z = 0;

  friend bool operator==(const Coord&, const Coord&) = default;
  friend std::strong_ordering operator<=>(const Coord& a, const Coord& b) {
    if (auto c = a.z <=> b.z; c != 0) return c;
    if (auto c = a.y <=> b.y; c != 0) return c;
    return a.x <=> b.x;
  }
  Coord operator+(const Coord& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Coord operator-(const Coord& o) const { return {x - o.x, y - o.y, z - o.z}; }
};

struct CoordHash {
  std::size_t operator()(const Coord& c) const noexcept {
    std::uint64_t h = (static_cast<std::uint64_t>(static_cast<std::uint32_t>(c.x)) << 42) ^
                      (static_cast<std::uint64_t>(static_cast<std::uint32_t>(c.y)) << 21) ^
                      static_cast<std::uint64_t>(static_cast<std::uint32_t>(c.z));
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdULL;
    h ^= h >> 33;
    h *= 0xc4ceb9fe1a85ec53ULL;
    h ^= h >> 33;
    return static_cast<std::size_t>(h);
  }
};

/// Hash table of active sites in canonical (sorted) row order.
class SiteTable {
 public:
  SiteTable() = default;
  /// `sorted_unique` must already be in canonical order without duplicates.
  explicit SiteTable(std::vector<Coord> sorted_unique);

  /// Sorts `sites`; returns the table and, for each new row, the index of
  /// the source element. Throws on duplicates.
  static std::pair<SiteTable, std::vector<int>> canonicalize(std::vector<Coord> sites);

  int size() const { return static_cast<int>(coords_.size()); }
  const Coord& operator[](int row) const { return coords_[row]; }
  const std::vector<Coord>& coords() const { return coords_; }
  /// Row of `c`, or -1 if inactive.
  int find(const Coord& c) const {
    if (slots_.empty()) return -1;
    for (std::size_t i = CoordHash{}(c) & mask_;; i = (i + 1) & mask_) {
      const Slot& s = slots_[i];
      if (s.row < 0) return -1;
      if (s.site == c) return s.row;
    }
  }
  bool contains(const Coord& c) const { return find(c) >= 0; }

 private:
  // Open addressing with linear probing; row -1 marks an empty slot.
  struct Slot {
    Coord site;
    int row = -1;
  };
  std::vector<Coord> coords_;
  std::vector<Slot> slots_;
  std::size_t mask_ = 0;
};

/// Placement of the integer lattice in world space: site c sits at
/// origin + voxel_size * c. `extent` is the nominal grid size (metadata).
struct GridFrame {
  double voxel_size = 1.0;
  Vec3 origin = Vec3::Zero();
  Extent extent{0, 0, 0};

  Vec3 world(const Coord& c) const {
    return origin + voxel_size * Vec3(c.x, c.y, c.z);
  }
  /// Nearest site; cells are half-open [c - 1/2, c + 1/2).
  Coord cell(const Vec3& p) const;
};

class SparseTensor {
 public:
  SparseTensor() : sites_(std::make_shared<SiteTable>()) {}
  /// Rows of `features` follow `sites`; both are reordered canonically.
  SparseTensor(FieldType ft, std::vector<Coord> sites, FeatureMatrix features,
               GridFrame frame = {});
  /// Rows of `features` already follow the table.
  SparseTensor(FieldType ft, std::shared_ptr<const SiteTable> sites,
               FeatureMatrix features, GridFrame frame = {});

  static SparseTensor empty(FieldType ft, GridFrame frame = {}) {
    const int k = ft.dim();
    return SparseTensor(std::move(ft), std::make_shared<const SiteTable>(), FeatureMatrix(0, k), frame);
  }

  const FieldType& field_type() const { return field_; }
  const SiteTable& sites() const { return *sites_; }
  const std::shared_ptr<const SiteTable>& site_table() const { return sites_; }
  const FeatureMatrix& features() const { return features_; }
  const GridFrame& frame() const { return frame_; }
  int num_sites() const { return sites_->size(); }

  /// Feature row at `site`; nullopt stands for the zero ground state.
  std::optional<Eigen::VectorXd> lookup(const Coord& site) const;

  SparseTensor with_features(FeatureMatrix f) const {
    return SparseTensor(field_, sites_, std::move(f), frame_);
  }

 private:
  FieldType field_;
  std::shared_ptr<const SiteTable> sites_;
  FeatureMatrix features_;
  GridFrame frame_;
};

struct PointCloud {
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> points;
  FeatureMatrix attributes;

  int size() const { return static_cast<int>(points.rows()); }
};

/// "x y z [a1 ... aC]" per line; '#' lines and blank lines skipped.
PointCloud read_point_cloud(std::istream& in);
PointCloud read_point_cloud_file(const std::string& path);
void write_point_cloud(std::ostream& out, const PointCloud& pc);

/// Mean attributes per occupied cell plus a trailing constant channel.
/// With `normalize`, the cloud is centered at its centroid and scaled so its
/// centroid-centered bounding cube spans 90% of a `resolution`^3 grid.
SparseTensor voxelize(const PointCloud& pc, int resolution, bool normalize);
/// Same averaging rule on an explicit frame.
SparseTensor voxelize(const PointCloud& pc, const GridFrame& frame);

/// Dense z-major array, index ((z * dy + y) * dx + x) * channels + c.
struct DenseGrid {
  Extent dims{0, 0, 0};
  int channels = 0;
  std::vector<double> data;

  DenseGrid() = default;
  DenseGrid(Extent d, int c)
      : dims(d), channels(c), data(static_cast<std::size_t>(d[0]) * d[1] * d[2] * c, 0.0) {}

  std::size_t index(int x, int y, int z, int c) const {
    return ((static_cast<std::size_t>(z) * dims[1] + y) * dims[0] + x) * channels + c;
  }
  double& at(int x, int y, int z, int c) { return data[index(x, y, z, c)]; }
  double at(int x, int y, int z, int c) const { return data[index(x, y, z, c)]; }
  bool inside(const Coord& p) const {
    return p.x >= 0 && p.y >= 0 && p.z >= 0 && p.x < dims[0] && p.y < dims[1] &&
           p.z < dims[2];
  }
};

/// Throws kShapeMismatch for sites outside `dims`.
DenseGrid to_dense(const SparseTensor& t, const Extent& dims);
/// Cells with any nonzero channel become active.
SparseTensor from_dense(const DenseGrid& grid, const FieldType& ft, GridFrame frame = {});

/// SSTF binary format (little-endian).
std::vector<std::uint8_t> serialize(const SparseTensor& t);
/// The file stores only K; without `ft` the field is read as K scalars.
SparseTensor deserialize(std::span<const std::uint8_t> bytes,
                         const std::optional<FieldType>& ft = std::nullopt);
void write_sstf(const std::string& path, const SparseTensor& t);
SparseTensor read_sstf(const std::string& path,
                       const std::optional<FieldType>& ft = std::nullopt);

}  // namespace ssconv
