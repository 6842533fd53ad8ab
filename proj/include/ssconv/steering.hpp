#pragma once

#include "ssconv/layers.hpp"

#include <array>
#include <vector>

namespace ssconv {

using Pose = RigidMotion;

/// (r1 r2, t1 + r1 t2): apply p2 first, then p1.
Pose compose_pose(const Pose& p1, const Pose& p2);

/// Result of moving a tensor's sites through a rigid motion.
struct LatticeMotion {
  SparseTensor output;
  /// Output row receiving each input row.
  std::vector<int> target;
  /// Input rows merged into each output row.
  std::vector<int> counts;
};

/// Site centers are moved by `g` in world space and snapped back to the same
/// lattice; rows landing in one cell are averaged and every row is rotated by
/// the field representation of g's rotation.
LatticeMotion rotate_lattice(const SparseTensor& t, const RigidMotion& g);

/// Two submanifold convs, each followed by norm and activation, preserving
/// the field type.
NetworkConfig enrichment_config(const FieldType& ft, int size = 3);

/// Lattice motion followed by the enrichment network. An empty network skips
/// enrichment.
SparseTensor steer_tensor(const SparseTensor& t, const RigidMotion& g, const Network& enrichment,
                          Tape* tape = nullptr, NormMode mode = NormMode::kBatch);

using PointMatrix = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// Trilinear weights of the 8 lattice corners around each query; inactive
/// corners carry row -1 and contribute the ground state.
struct InterpolationPlan {
  int num_sites = 0;
  std::vector<std::array<int, 8>> rows;
  std::vector<std::array<double, 8>> weights;
};

InterpolationPlan plan_interpolation(const SparseTensor& t, const PointMatrix& queries);
FeatureMatrix interpolate(const InterpolationPlan& plan, const FeatureMatrix& features);
/// Adjoint of interpolate: per-site gradient from per-query gradients.
FeatureMatrix interpolate_transpose(const InterpolationPlan& plan, const FeatureMatrix& grad);

/// Per-level interpolation, concatenated along columns.
FeatureMatrix tensor_to_point(const std::vector<SparseTensor>& levels, const PointMatrix& queries);

}  // namespace ssconv
