#include "ssconv/sparse_tensor.hpp"

#include "ssconv/byte_io.hpp"
#include "ssconv/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

namespace ssconv {

SiteTable::SiteTable(std::vector<Coord> sorted_unique) : coords_(std::move(sorted_unique)) {
  if (coords_.empty()) return;
  std::size_t cap = 16;
  while (cap < 2 * coords_.size()) cap *= 2;
  slots_.resize(cap);
  mask_ = cap - 1;
  for (int i = 0; i < size(); ++i) {
    if (i > 0 && !(coords_[i - 1] < coords_[i])) {
      fail(ErrorCode::kInvalidArgument, "site table must be sorted and unique");
    }
    std::size_t k = CoordHash{}(coords_[i]) & mask_;
    while (slots_[k].row >= 0) k = (k + 1) & mask_;
    slots_[k] = {coords_[i], i};
  }
}

std::pair<SiteTable, std::vector<int>> SiteTable::canonicalize(std::vector<Coord> sites) {
  std::vector<int> order(sites.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return sites[a] < sites[b]; });
  std::vector<Coord> sorted;
  sorted.reserve(sites.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i > 0 && sites[order[i]] == sites[order[i - 1]]) {
      const Coord& c = sites[order[i]];
      fail(ErrorCode::kInvalidArgument, "duplicate site (" + std::to_string(c.x) + "," +
                                            std::to_string(c.y) + "," +
                                            std::to_string(c.z) + ")");
    }
    sorted.push_back(sites[order[i]]);
  }
  return {SiteTable(std::move(sorted)), std::move(order)};
}

Coord GridFrame::cell(const Vec3& p) const {
  const Vec3 g = (p - origin) / voxel_size;
  return {static_cast<int>(std::floor(g.x() + 0.5)), static_cast<int>(std::floor(g.y() + 0.5)),
          static_cast<int>(std::floor(g.z() + 0.5))};
}

SparseTensor::SparseTensor(FieldType ft, std::vector<Coord> sites, FeatureMatrix features,
                           GridFrame frame)
    : field_(std::move(ft)), frame_(frame) {
  if (features.rows() != static_cast<Eigen::Index>(sites.size()) ||
      features.cols() != field_.dim()) {
    fail(ErrorCode::kShapeMismatch, "feature matrix is " + std::to_string(features.rows()) +
                                        "x" + std::to_string(features.cols()) + ", expected " +
                                        std::to_string(sites.size()) + "x" +
                                        std::to_string(field_.dim()));
  }
  auto [table, order] = SiteTable::canonicalize(std::move(sites));
  features_.resize(features.rows(), features.cols());
  for (std::size_t i = 0; i < order.size(); ++i) features_.row(i) = features.row(order[i]);
  sites_ = std::make_shared<SiteTable>(std::move(table));
}

SparseTensor::SparseTensor(FieldType ft, std::shared_ptr<const SiteTable> sites,
                           FeatureMatrix features, GridFrame frame)
    : field_(std::move(ft)), sites_(std::move(sites)), features_(std::move(features)),
      frame_(frame) {
  if (features_.rows() != sites_->size() || features_.cols() != field_.dim()) {
    fail(ErrorCode::kShapeMismatch, "feature matrix does not match site table/field type");
  }
}

std::optional<Eigen::VectorXd> SparseTensor::lookup(const Coord& site) const {
  const int row = sites_->find(site);
  if (row < 0) return std::nullopt;
  return Eigen::VectorXd(features_.row(row).transpose());
}

PointCloud read_point_cloud(std::istream& in) {
  std::vector<std::vector<double>> rows;
  std::string line;
  int line_no = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    std::vector<double> vals;
    std::string tok;
    while (ls >> tok) {
      try {
        std::size_t used = 0;
        vals.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::logic_error&) {
        fail(ErrorCode::kFormat,
             "line " + std::to_string(line_no) + ": not a number '" + tok + "'");
      }
    }
    if (vals.size() < 3) {
      fail(ErrorCode::kFormat, "line " + std::to_string(line_no) + ": need at least x y z");
    }
    if (rows.empty()) {
      width = vals.size();
    } else if (vals.size() != width) {
      fail(ErrorCode::kFormat, "line " + std::to_string(line_no) + ": expected " +
                                   std::to_string(width) + " columns, got " +
                                   std::to_string(vals.size()));
    }
    rows.push_back(std::move(vals));
  }
  PointCloud pc;
  const int n = static_cast<int>(rows.size());
  const int c = n == 0 ? 0 : static_cast<int>(width) - 3;
  pc.points.resize(n, 3);
  pc.attributes.resize(n, c);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) pc.points(i, j) = rows[i][j];
    for (int j = 0; j < c; ++j) pc.attributes(i, j) = rows[i][3 + j];
  }
  return pc;
}

PointCloud read_point_cloud_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path);
  return read_point_cloud(in);
}

void write_point_cloud(std::ostream& out, const PointCloud& pc) {
  out.precision(17);
  for (int i = 0; i < pc.size(); ++i) {
    out << pc.points(i, 0) << ' ' << pc.points(i, 1) << ' ' << pc.points(i, 2);
    for (int j = 0; j < pc.attributes.cols(); ++j) out << ' ' << pc.attributes(i, j);
    out << '\n';
  }
}

SparseTensor voxelize(const PointCloud& pc, const GridFrame& frame) {
  const int c = static_cast<int>(pc.attributes.cols());
  if (pc.attributes.rows() != pc.points.rows()) {
    fail(ErrorCode::kShapeMismatch, "attribute rows do not match points");
  }
  // std::map keeps the accumulation order independent of hashing.
  std::map<Coord, std::pair<Eigen::VectorXd, int>> cells;
  for (int i = 0; i < pc.size(); ++i) {
    const Coord cell = frame.cell(pc.points.row(i).transpose());
    auto [it, inserted] = cells.try_emplace(cell, Eigen::VectorXd::Zero(c), 0);
    it->second.first += pc.attributes.row(i).transpose();
    it->second.second += 1;
  }
  std::vector<Coord> sites;
  FeatureMatrix features(static_cast<Eigen::Index>(cells.size()), c + 1);
  sites.reserve(cells.size());
  int row = 0;
  for (const auto& [cell, acc] : cells) {
    sites.push_back(cell);
    features.row(row).head(c) = (acc.first / acc.second).transpose();
    features(row, c) = 1.0;
    ++row;
  }
  return SparseTensor(FieldType::scalars(c + 1), std::move(sites), std::move(features), frame);
}

SparseTensor voxelize(const PointCloud& pc, int resolution, bool normalize) {
  if (resolution < 2) fail(ErrorCode::kInvalidArgument, "resolution must be >= 2");
  GridFrame frame;
  frame.extent = {resolution, resolution, resolution};
  if (normalize) {
    if (pc.size() == 0) fail(ErrorCode::kInvalidArgument, "cannot normalize an empty cloud");
    const Vec3 centroid = pc.points.colwise().mean().transpose();
    double half = 0.0;
    for (int i = 0; i < pc.size(); ++i) {
      half = std::max(half, (pc.points.row(i).transpose() - centroid).cwiseAbs().maxCoeff());
    }
    frame.voxel_size = half > 0 ? 2.0 * half / (0.9 * resolution) : 1.0;
    const double center = (resolution - 1) / 2.0;
    frame.origin = centroid - frame.voxel_size * Vec3::Constant(center);
  }
  return voxelize(pc, frame);
}

DenseGrid to_dense(const SparseTensor& t, const Extent& dims) {
  DenseGrid grid(dims, t.field_type().dim());
  for (int row = 0; row < t.num_sites(); ++row) {
    const Coord& c = t.sites()[row];
    if (!grid.inside(c)) {
      fail(ErrorCode::kShapeMismatch, "site (" + std::to_string(c.x) + "," +
                                          std::to_string(c.y) + "," + std::to_string(c.z) +
                                          ") outside dense extent");
    }
    for (int k = 0; k < grid.channels; ++k) grid.at(c.x, c.y, c.z, k) = t.features()(row, k);
  }
  return grid;
}

SparseTensor from_dense(const DenseGrid& grid, const FieldType& ft, GridFrame frame) {
  if (ft.dim() != grid.channels) {
    fail(ErrorCode::kFieldMismatch, "field dimension does not match dense channels");
  }
  std::vector<Coord> sites;
  std::vector<double> values;
  for (int z = 0; z < grid.dims[2]; ++z)
    for (int y = 0; y < grid.dims[1]; ++y)
      for (int x = 0; x < grid.dims[0]; ++x) {
        bool active = false;
        for (int k = 0; k < grid.channels; ++k) active |= grid.at(x, y, z, k) != 0.0;
        if (!active) continue;
        sites.push_back({x, y, z});
        for (int k = 0; k < grid.channels; ++k) values.push_back(grid.at(x, y, z, k));
      }
  FeatureMatrix f = Eigen::Map<FeatureMatrix>(values.data(),
                                              static_cast<Eigen::Index>(sites.size()),
                                              grid.channels);
  frame.extent = grid.dims;
  return SparseTensor(ft, std::move(sites), std::move(f), frame);
}

namespace {
constexpr char kMagic[4] = {'S', 'S', 'T', 'F'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

std::vector<std::uint8_t> serialize(const SparseTensor& t) {
  ByteWriter w;
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(t.field_type().dim()));
  w.u32(static_cast<std::uint32_t>(t.num_sites()));
  for (int e : t.frame().extent) w.u32(static_cast<std::uint32_t>(e));
  w.f64(t.frame().voxel_size);
  for (int i = 0; i < 3; ++i) w.f64(t.frame().origin[i]);
  for (int row = 0; row < t.num_sites(); ++row) {
    const Coord& c = t.sites()[row];
    w.i32(c.x);
    w.i32(c.y);
    w.i32(c.z);
    for (int k = 0; k < t.field_type().dim(); ++k) w.f64(t.features()(row, k));
  }
  return w.take();
}

SparseTensor deserialize(std::span<const std::uint8_t> bytes, const std::optional<FieldType>& ft) {
  ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kMagic)) fail(ErrorCode::kFormat, "not an SSTF stream (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    fail(ErrorCode::kFormat, "unsupported SSTF version " + std::to_string(version));
  }
  const int k = static_cast<int>(r.u32());
  const std::uint32_t n = r.u32();
  GridFrame frame;
  for (int& e : frame.extent) e = static_cast<int>(r.u32());
  frame.voxel_size = r.f64();
  for (int i = 0; i < 3; ++i) frame.origin[i] = r.f64();
  const FieldType field = ft ? *ft : FieldType::scalars(k);
  if (field.dim() != k) fail(ErrorCode::kFieldMismatch, "SSTF width does not match field type");
  const std::size_t record = 12 + 8 * static_cast<std::size_t>(k);
  if (r.remaining() < record * n) fail(ErrorCode::kFormat, "truncated SSTF stream");
  std::vector<Coord> sites(n);
  FeatureMatrix f(n, k);
  for (std::uint32_t i = 0; i < n; ++i) {
    sites[i].x = r.i32();
    sites[i].y = r.i32();
    sites[i].z = r.i32();
    for (int c = 0; c < k; ++c) f(i, c) = r.f64();
  }
  return SparseTensor(field, std::move(sites), std::move(f), frame);
}

void write_sstf(const std::string& path, const SparseTensor& t) {
  write_file(path, serialize(t));
}

SparseTensor read_sstf(const std::string& path, const std::optional<FieldType>& ft) {
  const auto bytes = read_file(path);
  return deserialize(bytes, ft);
}

}  // namespace ssconv
