#include "ssconv/steerable_kernel.hpp"

#include "ssconv/error.hpp"

#include <map>
#include <mutex>
#include <random>
#include <tuple>

namespace ssconv {

std::vector<Coord> kernel_offsets(int size) {
  const int h = (size - 1) / 2;
  std::vector<Coord> out;
  out.reserve(static_cast<std::size_t>(size) * size * size);
  for (int dz = -h; dz <= h; ++dz)
    for (int dy = -h; dy <= h; ++dy)
      for (int dx = -h; dx <= h; ++dx) out.push_back({dx, dy, dz});
  return out;
}

int offset_index(const Coord& s, int size) {
  const int h = (size - 1) / 2;
  return ((s.z + h) * size + (s.y + h)) * size + (s.x + h);
}

Eigen::MatrixXd basis_function(int k, int l, int J, double center, double epsilon,
                               const Vec3& x, int max_order) {
  const ClebschGordan cg = clebsch_gordan_real(k, l, J, max_order);
  const double r = x.norm();
  const double d = r - center;
  const double radial = std::exp(-0.5 * d * d / (epsilon * epsilon));
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(2 * k + 1, 2 * l + 1);
  if (r == 0.0) {
    // Direction undefined; only the rotation-invariant J = 0 term survives.
    if (J == 0) out = radial * real_spherical_harmonics(0, Vec3::UnitZ())(0) * cg.slices[0];
    return out;
  }
  const Eigen::VectorXd y = real_spherical_harmonics(J, x / r, 2 * max_order);
  for (int j = 0; j < 2 * J + 1; ++j) out += radial * y(j) * cg.slices[j];
  return out;
}

std::shared_ptr<const KernelBasis> build_basis(int k, int l, int size,
                                               const RadialProfile& profile, int max_order) {
  if (size < 1 || size % 2 == 0) fail(ErrorCode::kInvalidArgument, "kernel size must be odd");
  if (!(profile.epsilon > 0)) fail(ErrorCode::kInvalidArgument, "radial width must be positive");
  if (profile.centers.empty()) fail(ErrorCode::kInvalidArgument, "no radial centers");
  if (k > max_order || l > max_order) {
    fail(ErrorCode::kOrderExceedsMax, "kernel order exceeds L_max");
  }
  auto basis = std::make_shared<KernelBasis>();
  basis->k_ = k;
  basis->l_ = l;
  basis->size_ = size;
  basis->profile_ = profile;
  const auto offsets = kernel_offsets(size);
  basis->samples_.reserve(static_cast<std::size_t>(basis->num_functions()) * offsets.size());

  const int j_min = std::abs(k - l);
  std::vector<ClebschGordan> cgs;
  for (int J = j_min; J <= k + l; ++J) cgs.push_back(clebsch_gordan_real(k, l, J, max_order));
  for (int f = 0; f < basis->num_functions(); ++f) {
    const int J = basis->function_j(f);
    const int m = basis->function_m(f);
    const ClebschGordan& cg = cgs[J - j_min];
    for (const Coord& s : offsets) {
      const Vec3 x(s.x, s.y, s.z);
      const double r = x.norm();
      Eigen::MatrixXd v = Eigen::MatrixXd::Zero(2 * k + 1, 2 * l + 1);
      if (r == 0.0) {
        if (J == 0) v = profile(m, 0.0) * real_spherical_harmonics(0, Vec3::UnitZ())(0) * cg.slices[0];
      } else {
        const Eigen::VectorXd y = real_spherical_harmonics(J, x / r, 2 * max_order);
        const double radial = profile(m, r);
        for (int j = 0; j < 2 * J + 1; ++j) v += radial * y(j) * cg.slices[j];
      }
      basis->samples_.push_back(std::move(v));
    }
  }
  return basis;
}

std::shared_ptr<const KernelBasis> cached_basis(int k, int l, int size,
                                                const RadialProfile& profile, int max_order) {
  using Key = std::tuple<int, int, int, std::vector<double>, double, int>;
  static std::mutex mutex;
  static std::map<Key, std::shared_ptr<const KernelBasis>> cache;
  Key key{k, l, size, profile.centers, profile.epsilon, max_order};
  std::lock_guard<std::mutex> lock(mutex);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto basis = build_basis(k, l, size, profile, max_order);
  cache.emplace(std::move(key), basis);
  return basis;
}

long param_count(const FieldType& field_in, const FieldType& field_out, int num_centers) {
  long total = 0;
  for (int k : field_out.orders())
    for (int l : field_in.orders()) total += static_cast<long>(num_centers) * (2 * std::min(k, l) + 1);
  return total;
}

SteerableKernel::SteerableKernel(FieldType field_in, FieldType field_out, int size,
                                 RadialProfile profile, int max_order)
    : in_(std::move(field_in)),
      out_(std::move(field_out)),
      size_(size),
      profile_(std::move(profile)),
      max_order_(max_order) {
  long offset = 0;
  for (int i = 0; i < out_.size(); ++i) {
    for (int j = 0; j < in_.size(); ++j) {
      auto basis = cached_basis(out_.order(i), in_.order(j), size_, profile_, max_order_);
      blocks_.push_back({i, j, offset, basis});
      offset += basis->num_functions();
    }
  }
  weights_ = Eigen::VectorXd::Zero(offset);
}

void SteerableKernel::set_weights(const Eigen::VectorXd& w) {
  if (w.size() != weights_.size()) {
    fail(ErrorCode::kShapeMismatch, "weight vector has " + std::to_string(w.size()) +
                                        " entries, kernel needs " +
                                        std::to_string(weights_.size()));
  }
  weights_ = w;
}

long SteerableKernel::weight_index(int i_out, int j_in, int f) const {
  return blocks_[static_cast<std::size_t>(i_out) * in_.size() + j_in].weight_offset + f;
}

void SteerableKernel::init_weights(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<double> fan_in(out_.size(), 0.0);
  for (const Block& b : blocks_) fan_in[b.out_irrep] += b.basis->num_functions();
  for (const Block& b : blocks_) {
    const double scale = 1.0 / std::sqrt(fan_in[b.out_irrep]);
    for (int f = 0; f < b.basis->num_functions(); ++f) {
      weights_(b.weight_offset + f) = scale * n01(rng);
    }
  }
}

KernelTensor SteerableKernel::materialize() const {
  const int n = size_ * size_ * size_;
  KernelTensor out(n, Eigen::MatrixXd::Zero(out_.dim(), in_.dim()));
  for (const Block& b : blocks_) {
    const int r0 = out_.offset(b.out_irrep);
    const int c0 = in_.offset(b.in_irrep);
    const int rows = out_.width(b.out_irrep);
    const int cols = in_.width(b.in_irrep);
    for (int f = 0; f < b.basis->num_functions(); ++f) {
      const double w = weights_(b.weight_offset + f);
      if (w == 0.0) continue;
      for (int o = 0; o < n; ++o) out[o].block(r0, c0, rows, cols) += w * b.basis->at(f, o);
    }
  }
  return out;
}

Eigen::VectorXd SteerableKernel::project_gradient(const KernelTensor& kernel_grad) const {
  const int n = size_ * size_ * size_;
  if (static_cast<int>(kernel_grad.size()) != n) {
    fail(ErrorCode::kShapeMismatch, "kernel gradient has wrong offset count");
  }
  Eigen::VectorXd g = Eigen::VectorXd::Zero(weights_.size());
  for (const Block& b : blocks_) {
    const int r0 = out_.offset(b.out_irrep);
    const int c0 = in_.offset(b.in_irrep);
    const int rows = out_.width(b.out_irrep);
    const int cols = in_.width(b.in_irrep);
    for (int f = 0; f < b.basis->num_functions(); ++f) {
      double acc = 0.0;
      for (int o = 0; o < n; ++o) {
        acc += kernel_grad[o].block(r0, c0, rows, cols).cwiseProduct(b.basis->at(f, o)).sum();
      }
      g(b.weight_offset + f) = acc;
    }
  }
  return g;
}

Eigen::MatrixXd SteerableKernel::evaluate(const Vec3& x) const {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(out_.dim(), in_.dim());
  for (const Block& b : blocks_) {
    const int k = out_.order(b.out_irrep);
    const int l = in_.order(b.in_irrep);
    for (int f = 0; f < b.basis->num_functions(); ++f) {
      const double w = weights_(b.weight_offset + f);
      out.block(out_.offset(b.out_irrep), in_.offset(b.in_irrep), 2 * k + 1, 2 * l + 1) +=
          w * basis_function(k, l, b.basis->function_j(f),
                             profile_.centers[b.basis->function_m(f)], profile_.epsilon, x,
                             max_order_);
    }
  }
  return out;
}

}  // namespace ssconv
