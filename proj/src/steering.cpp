#include "ssconv/steering.hpp"

#include "ssconv/error.hpp"

#include <cmath>
#include <map>

namespace ssconv {

Pose compose_pose(const Pose& p1, const Pose& p2) {
  return {p1.rotation * p2.rotation, p1.translation + p1.rotation.apply(p2.translation)};
}

LatticeMotion rotate_lattice(const SparseTensor& t, const RigidMotion& g) {
  const GridFrame& frame = t.frame();
  std::map<Coord, std::vector<int>> cells;
  for (int r = 0; r < t.num_sites(); ++r) {
    cells[frame.cell(g.apply(frame.world(t.sites()[r])))].push_back(r);
  }
  const FieldType& ft = t.field_type();
  const Eigen::MatrixXd rho = field_repr(ft, g.rotation, std::max(kDefaultMaxOrder, ft.max_order()));
  LatticeMotion out;
  out.target.assign(t.num_sites(), -1);
  std::vector<Coord> coords;
  coords.reserve(cells.size());
  FeatureMatrix avg = FeatureMatrix::Zero(static_cast<Eigen::Index>(cells.size()), ft.dim());
  int row = 0;
  for (const auto& [cell, members] : cells) {
    coords.push_back(cell);
    for (int r : members) {
      avg.row(row) += t.features().row(r);
      out.target[r] = row;
    }
    avg.row(row) /= static_cast<double>(members.size());
    out.counts.push_back(static_cast<int>(members.size()));
    ++row;
  }
  FeatureMatrix rotated = avg * rho.transpose();
  out.output = SparseTensor(ft, std::make_shared<SiteTable>(std::move(coords)), std::move(rotated), frame);
  return out;
}

NetworkConfig enrichment_config(const FieldType& ft, int size) {
  NetworkConfig cfg;
  cfg.input = ft;
  for (int i = 0; i < 2; ++i) {
    LayerSpec conv;
    conv.kind = LayerKind::kConv;
    conv.conv = {ft, ft, size, ConvMode::kSubmanifold};
    LayerSpec norm;
    norm.kind = LayerKind::kNorm;
    LayerSpec act;
    act.kind = LayerKind::kActivation;
    cfg.layers.insert(cfg.layers.end(), {conv, norm, act});
  }
  return cfg;
}

SparseTensor steer_tensor(const SparseTensor& t, const RigidMotion& g, const Network& enrichment,
                          Tape* tape, NormMode mode) {
  SparseTensor moved = rotate_lattice(t, g).output;
  return enrichment.forward(moved, mode, tape);
}

InterpolationPlan plan_interpolation(const SparseTensor& t, const PointMatrix& queries) {
  InterpolationPlan plan;
  plan.num_sites = t.num_sites();
  const auto n = static_cast<std::size_t>(queries.rows());
  plan.rows.resize(n);
  plan.weights.resize(n);
  const GridFrame& frame = t.frame();
  for (std::size_t q = 0; q < n; ++q) {
    const Vec3 u = (queries.row(static_cast<Eigen::Index>(q)).transpose() - frame.origin) / frame.voxel_size;
    const Vec3 base = u.array().floor();
    const Vec3 frac = u - base;
    const Coord b{static_cast<int>(base.x()), static_cast<int>(base.y()), static_cast<int>(base.z())};
    for (int corner = 0; corner < 8; ++corner) {
      const int dx = corner & 1, dy = (corner >> 1) & 1, dz = (corner >> 2) & 1;
      const double w = (dx ? frac.x() : 1 - frac.x()) * (dy ? frac.y() : 1 - frac.y()) *
                       (dz ? frac.z() : 1 - frac.z());
      const int row = t.sites().find(b + Coord{dx, dy, dz});
      plan.rows[q][corner] = w == 0.0 ? -1 : row;
      plan.weights[q][corner] = row < 0 ? 0.0 : w;
    }
  }
  return plan;
}

FeatureMatrix interpolate(const InterpolationPlan& plan, const FeatureMatrix& features) {
  const auto n = static_cast<Eigen::Index>(plan.rows.size());
  FeatureMatrix out = FeatureMatrix::Zero(n, features.cols());
  for (Eigen::Index q = 0; q < n; ++q) {
    for (int c = 0; c < 8; ++c) {
      const int row = plan.rows[q][c];
      if (row >= 0) out.row(q) += plan.weights[q][c] * features.row(row);
    }
  }
  return out;
}

FeatureMatrix interpolate_transpose(const InterpolationPlan& plan, const FeatureMatrix& grad) {
  FeatureMatrix out = FeatureMatrix::Zero(plan.num_sites, grad.cols());
  for (Eigen::Index q = 0; q < static_cast<Eigen::Index>(plan.rows.size()); ++q) {
    for (int c = 0; c < 8; ++c) {
      const int row = plan.rows[q][c];
      if (row >= 0) out.row(row) += plan.weights[q][c] * grad.row(q);
    }
  }
  return out;
}

FeatureMatrix tensor_to_point(const std::vector<SparseTensor>& levels, const PointMatrix& queries) {
  Eigen::Index cols = 0;
  for (const auto& t : levels) cols += t.field_type().dim();
  FeatureMatrix out(queries.rows(), cols);
  Eigen::Index at = 0;
  for (const auto& t : levels) {
    const int k = t.field_type().dim();
    out.middleCols(at, k) = interpolate(plan_interpolation(t, queries), t.features());
    at += k;
  }
  return out;
}

}  // namespace ssconv
