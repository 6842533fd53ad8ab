#pragma once

// SO(3) representation machinery in a single real basis.
//
// Convention (shared by harmonics, Wigner-D and Clebsch-Gordan):
//   * real spherical harmonics indexed m = -l..l (slot m + l), no
//     Condon-Shortley phase; for l = 1 the slots hold (y, z, x) up to the
//     common factor sqrt(3 / 4pi).
//   * D^l(r) is defined by Y^l(r u) = D^l(r) Y^l(u).
//   * Euler angles are intrinsic ZYZ: r = Rz(alpha) Ry(beta) Rz(gamma).

#include <Eigen/Dense>

#include <random>
#include <string>
#include <vector>

namespace ssconv {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr int kDefaultMaxOrder = 3;

class Rotation {
 public:
  Rotation() : m_(Mat3::Identity()) {}

  /// Throws kInvalidArgument unless `m` is orthogonal with det +1 (1e-9).
  static Rotation from_matrix(const Mat3& m);
  /// Nearest rotation to `m` in the Frobenius sense (SVD projection).
  static Rotation project(const Mat3& m);
  static Rotation from_euler_zyz(double alpha, double beta, double gamma);
  static Rotation about_axis(const Vec3& axis, double angle);

  const Mat3& matrix() const { return m_; }
  Rotation inverse() const { return Rotation(m_.transpose(), 0); }
  Vec3 apply(const Vec3& v) const { return m_ * v; }
  Rotation operator*(const Rotation& o) const { return Rotation(m_ * o.m_, 0); }

  /// Geodesic angle to `o` in radians.
  double angle_to(const Rotation& o) const;

 private:
  Rotation(const Mat3& m, int) : m_(m) {}
  Mat3 m_;
};

/// g = t r, acting as x -> r x + t.
struct RigidMotion {
  Rotation rotation;
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& x) const { return rotation.apply(x) + translation; }
  RigidMotion inverse() const;
  RigidMotion operator*(const RigidMotion& o) const;
};

/// Uniform over SO(3) (normalized Gaussian quaternion).
Rotation random_rotation(std::mt19937_64& rng);

/// The 24 rotations that map the integer lattice onto itself; element 0 is
/// the identity.
const std::vector<Rotation>& octahedral_group();

/// Ordered list of irreducible orders; repeats allowed.
class FieldType {
 public:
  FieldType() = default;
  explicit FieldType(std::vector<int> orders);

  /// Parses "[0x4,1x2]" (order x multiplicity, comma separated).
  static FieldType parse(const std::string& text);
  static FieldType scalars(int count);

  const std::vector<int>& orders() const { return orders_; }
  int size() const { return static_cast<int>(orders_.size()); }
  int order(int i) const { return orders_[i]; }
  /// First feature channel of irreducible i.
  int offset(int i) const { return offsets_[i]; }
  int width(int i) const { return 2 * orders_[i] + 1; }
  int dim() const { return dim_; }
  int max_order() const;
  bool empty() const { return orders_.empty(); }

  std::string to_string() const;

  bool operator==(const FieldType& o) const { return orders_ == o.orders_; }
  bool operator!=(const FieldType& o) const { return !(*this == o); }

 private:
  std::vector<int> orders_;
  std::vector<int> offsets_;
  int dim_ = 0;
};

Eigen::MatrixXd wigner_d_real(int l, const Rotation& r,
                              int max_order = kDefaultMaxOrder);

/// Requires |u| = 1 within 1e-9.
Eigen::VectorXd real_spherical_harmonics(int l, const Vec3& u,
                                         int max_order = kDefaultMaxOrder);

/// Real coupling coefficients: slices[j] is the (2k+1) x (2l+1) matrix Q_j.
/// Each slice has unit Frobenius norm and
///   sum_j D^J(r)_{j j'} Q_j = D^k(r) Q_{j'} D^l(r)^T.
struct ClebschGordan {
  int k = 0;
  int l = 0;
  int J = 0;
  std::vector<Eigen::MatrixXd> slices;
};

ClebschGordan clebsch_gordan_real(int k, int l, int J,
                                  int max_order = kDefaultMaxOrder);

/// Block-diagonal representation of a stacked field, blocks in field order.
Eigen::MatrixXd field_repr(const FieldType& ft, const Rotation& r,
                           int max_order = kDefaultMaxOrder);

}  // namespace ssconv
