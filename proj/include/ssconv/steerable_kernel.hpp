#pragma once

#include "ssconv/repr_theory.hpp"
#include "ssconv/sparse_tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

namespace ssconv {

/// Gaussian radial profile exp(-(|x| - m)^2 / (2 eps^2)) for each center m.
struct RadialProfile {
  std::vector<double> centers{0.0, 1.0};
  double epsilon = 0.6;

  int size() const { return static_cast<int>(centers.size()); }
  double operator()(int m, double r) const {
    const double d = r - centers[m];
    return std::exp(-0.5 * d * d / (epsilon * epsilon));
  }
  bool operator==(const RadialProfile&) const = default;
};

/// Offsets of an s^3 kernel in z-major order; index of (dx,dy,dz) is
/// ((dz + h) * s + (dy + h)) * s + (dx + h) with h = (s - 1) / 2.
std::vector<Coord> kernel_offsets(int size);
int offset_index(const Coord& s, int size);

/// Sampled basis kernels kappa^{kl,Jm}(s) for one (k, l) pair. Function
/// index f = (J - |k-l|) * M + m.
class KernelBasis {
 public:
  int k() const { return k_; }
  int l() const { return l_; }
  int size() const { return size_; }
  const RadialProfile& profile() const { return profile_; }
  int num_j() const { return 2 * std::min(k_, l_) + 1; }
  int num_functions() const { return num_j() * profile_.size(); }
  int function_j(int f) const { return std::abs(k_ - l_) + f / profile_.size(); }
  int function_m(int f) const { return f % profile_.size(); }
  int num_offsets() const { return size_ * size_ * size_; }

  /// (2k+1) x (2l+1) sample of function f at offset index o.
  const Eigen::MatrixXd& at(int f, int o) const {
    return samples_[static_cast<std::size_t>(f) * num_offsets() + o];
  }

  friend std::shared_ptr<const KernelBasis> build_basis(int, int, int, const RadialProfile&, int);

 private:
  int k_ = 0, l_ = 0, size_ = 1;
  RadialProfile profile_;
  std::vector<Eigen::MatrixXd> samples_;
};

/// Samples every basis function on the s^3 offsets. At the origin only J = 0
/// survives (value phi^m(0) Y^0 Q); J > 0 entries are zero there.
std::shared_ptr<const KernelBasis> build_basis(int k, int l, int size,
                                               const RadialProfile& profile = {},
                                               int max_order = kDefaultMaxOrder);
/// Memoized build_basis, shared by all kernels with the same signature.
std::shared_ptr<const KernelBasis> cached_basis(int k, int l, int size,
                                                const RadialProfile& profile = {},
                                                int max_order = kDefaultMaxOrder);

/// Continuous basis function at an arbitrary point.
Eigen::MatrixXd basis_function(int k, int l, int J, double center, double epsilon,
                               const Vec3& x, int max_order = kDefaultMaxOrder);

/// Sum over (output, input) irreducible pairs of M (2 min(k, l) + 1).
long param_count(const FieldType& field_in, const FieldType& field_out, int num_centers);

/// Per-offset kernel matrices kappa(s), each K_out x K_in.
using KernelTensor = std::vector<Eigen::MatrixXd>;

class SteerableKernel {
 public:
  SteerableKernel() = default;
  SteerableKernel(FieldType field_in, FieldType field_out, int size,
                  RadialProfile profile = {}, int max_order = kDefaultMaxOrder);

  const FieldType& field_in() const { return in_; }
  const FieldType& field_out() const { return out_; }
  int size() const { return size_; }
  const RadialProfile& profile() const { return profile_; }

  const Eigen::VectorXd& weights() const { return weights_; }
  Eigen::VectorXd& weights() { return weights_; }
  void set_weights(const Eigen::VectorXd& w);
  long num_weights() const { return static_cast<long>(weights_.size()); }

  /// Zero-mean normal, variance 1 / (basis functions feeding each output
  /// irreducible). Deterministic in `seed`.
  void init_weights(std::uint64_t seed);

  KernelTensor materialize() const;
  /// Adjoint of materialize: weight gradient from per-offset kernel gradients.
  Eigen::VectorXd project_gradient(const KernelTensor& kernel_grad) const;
  /// Continuous kernel at x (origin handled as in the sampled basis).
  Eigen::MatrixXd evaluate(const Vec3& x) const;

  /// Weight index of function f for pair (i_out, j_in).
  long weight_index(int i_out, int j_in, int f) const;

 private:
  struct Block {
    int out_irrep;
    int in_irrep;
    long weight_offset;
    std::shared_ptr<const KernelBasis> basis;
  };

  FieldType in_, out_;
  int size_ = 1;
  RadialProfile profile_;
  int max_order_ = kDefaultMaxOrder;
  std::vector<Block> blocks_;
  Eigen::VectorXd weights_;
};

}  // namespace ssconv
