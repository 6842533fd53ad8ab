#include "ssconv/repr_theory.hpp"

#include "ssconv/error.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <sstream>

namespace ssconv {

namespace {

using Complex = std::complex<double>;
using CMatrix = Eigen::MatrixXcd;

double factorial(int n) {
  static const std::vector<double> table = [] {
    std::vector<double> t(33, 1.0);
    for (int i = 1; i < 33; ++i) t[i] = t[i - 1] * i;
    return t;
  }();
  if (n < 0 || n >= static_cast<int>(table.size())) {
    fail(ErrorCode::kInvalidArgument, "factorial argument out of range");
  }
  return table[n];
}

void check_order(int l, int max_order) {
  if (l < 0) fail(ErrorCode::kInvalidArgument, "negative order");
  if (l > max_order) {
    fail(ErrorCode::kOrderExceedsMax,
         "order " + std::to_string(l) + " exceeds L_max " +
             std::to_string(max_order));
  }
}

// Real = U * complex, complex harmonics carrying the Condon-Shortley phase.
CMatrix complex_to_real(int l) {
  const int n = 2 * l + 1;
  const double s = 1.0 / std::sqrt(2.0);
  CMatrix u = CMatrix::Zero(n, n);
  for (int m = -l; m <= l; ++m) {
    const int row = m + l;
    const double sign = (m % 2 == 0) ? 1.0 : -1.0;
    if (m > 0) {
      u(row, m + l) = sign * s;
      u(row, -m + l) = s;
    } else if (m == 0) {
      u(row, l) = 1.0;
    } else {
      u(row, m + l) = Complex(0.0, s);
      u(row, -m + l) = Complex(0.0, -sign * s);
    }
  }
  return u;
}

// Wigner small-d, explicit sum.
double little_d(int j, int mp, int m, double beta) {
  const double c = std::cos(beta / 2);
  const double s = std::sin(beta / 2);
  const double pre = std::sqrt(factorial(j + mp) * factorial(j - mp) *
                               factorial(j + m) * factorial(j - m));
  double sum = 0.0;
  for (int k = 0; k <= 2 * j; ++k) {
    const int a = j + m - k;
    const int b = j - k - mp;
    const int d = k - m + mp;
    if (a < 0 || b < 0 || d < 0) continue;
    const double sign = (d % 2 == 0) ? 1.0 : -1.0;
    sum += sign / (factorial(a) * factorial(k) * factorial(b) * factorial(d)) *
           std::pow(c, 2 * j - 2 * k + m - mp) * std::pow(s, 2 * k - m + mp);
  }
  return pre * sum;
}

struct Euler {
  double alpha, beta, gamma;
};

// Only accurate away from beta = 0, pi; callers precondition.
Euler euler_zyz(const Mat3& r) {
  Euler e;
  e.beta = std::atan2(std::hypot(r(0, 2), r(1, 2)), r(2, 2));
  e.alpha = std::atan2(r(1, 2), r(0, 2));
  e.gamma = std::atan2(r(2, 1), -r(2, 0));
  return e;
}

Eigen::MatrixXd wigner_from_euler(int l, const Euler& e) {
  const int n = 2 * l + 1;
  // Complex matrix acting on harmonics as Y(r u) = M Y(u) is conj(D).
  CMatrix m(n, n);
  for (int mp = -l; mp <= l; ++mp) {
    for (int mm = -l; mm <= l; ++mm) {
      const Complex d = std::exp(Complex(0, -mp * e.alpha)) *
                        little_d(l, mp, mm, e.beta) *
                        std::exp(Complex(0, -mm * e.gamma));
      m(mp + l, mm + l) = std::conj(d);
    }
  }
  const CMatrix u = complex_to_real(l);
  return (u * m * u.adjoint()).real();
}

Mat3 basis_rotation(int which) {
  Mat3 q = Mat3::Identity();
  if (which == 1) {
    q << 0, 0, 1, 0, 1, 0, -1, 0, 0;  // Ry(pi/2)
  } else if (which == 2) {
    q << 1, 0, 0, 0, 0, -1, 0, 1, 0;  // Rx(pi/2)
  }
  return q;
}

// Legendre polynomial P_l as coefficients of z^0..z^l.
std::vector<double> legendre_coefficients(int l) {
  std::vector<double> c(l + 1, 0.0);
  for (int k = 0; 2 * k <= l; ++k) {
    const double sign = (k % 2 == 0) ? 1.0 : -1.0;
    c[l - 2 * k] = sign * factorial(2 * l - 2 * k) /
                   (factorial(k) * factorial(l - k) * factorial(l - 2 * k)) /
                   std::pow(2.0, l);
  }
  return c;
}

double racah_cg(int j1, int m1, int j2, int m2, int J, int M) {
  if (m1 + m2 != M || std::abs(m1) > j1 || std::abs(m2) > j2 ||
      std::abs(M) > J || J < std::abs(j1 - j2) || J > j1 + j2) {
    return 0.0;
  }
  double pre = std::sqrt((2 * J + 1) * factorial(J + j1 - j2) *
                         factorial(J - j1 + j2) * factorial(j1 + j2 - J) /
                         factorial(j1 + j2 + J + 1));
  pre *= std::sqrt(factorial(J + M) * factorial(J - M) * factorial(j1 - m1) *
                   factorial(j1 + m1) * factorial(j2 - m2) * factorial(j2 + m2));
  double sum = 0.0;
  for (int k = 0; k <= j1 + j2 + J; ++k) {
    const int a[6] = {k,          j1 + j2 - J - k, j1 - m1 - k,
                      j2 + m2 - k, J - j2 + m1 + k, J - j1 - m2 + k};
    if (*std::min_element(a, a + 6) < 0) continue;
    double den = 1.0;
    for (int x : a) den *= factorial(x);
    sum += ((k % 2 == 0) ? 1.0 : -1.0) / den;
  }
  return pre * sum;
}

}  // namespace

Rotation Rotation::from_matrix(const Mat3& m) {
  const double orth = (m * m.transpose() - Mat3::Identity()).norm();
  const double det = m.determinant();
  if (!(orth < 1e-9) || !(std::abs(det - 1.0) < 1e-9)) {
    fail(ErrorCode::kInvalidArgument, "matrix is not a proper rotation");
  }
  return Rotation(m, 0);
}

Rotation Rotation::project(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1 : 1;
  return Rotation(svd.matrixU() * d * svd.matrixV().transpose(), 0);
}

Rotation Rotation::from_euler_zyz(double alpha, double beta, double gamma) {
  const Mat3 r = (Eigen::AngleAxisd(alpha, Vec3::UnitZ()) *
                  Eigen::AngleAxisd(beta, Vec3::UnitY()) *
                  Eigen::AngleAxisd(gamma, Vec3::UnitZ()))
                     .toRotationMatrix();
  return Rotation(r, 0);
}

Rotation Rotation::about_axis(const Vec3& axis, double angle) {
  const double n = axis.norm();
  if (!(n > 0)) fail(ErrorCode::kInvalidArgument, "zero rotation axis");
  return Rotation(Eigen::AngleAxisd(angle, axis / n).toRotationMatrix(), 0);
}

double Rotation::angle_to(const Rotation& o) const {
  // atan2 stays accurate for angles near 0 and pi.
  const Mat3 d = m_.transpose() * o.m_;
  const Vec3 s(d(2, 1) - d(1, 2), d(0, 2) - d(2, 0), d(1, 0) - d(0, 1));
  return std::atan2(0.5 * s.norm(), 0.5 * (d.trace() - 1.0));
}

RigidMotion RigidMotion::inverse() const {
  const Rotation inv = rotation.inverse();
  return {inv, -inv.apply(translation)};
}

RigidMotion RigidMotion::operator*(const RigidMotion& o) const {
  return {rotation * o.rotation, translation + rotation.apply(o.translation)};
}

Rotation random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::Quaterniond q;
  double norm = 0.0;
  do {
    q = Eigen::Quaterniond(n01(rng), n01(rng), n01(rng), n01(rng));
    norm = q.norm();
  } while (norm < 1e-9);
  q.normalize();
  return Rotation::project(q.toRotationMatrix());
}

const std::vector<Rotation>& octahedral_group() {
  static const std::vector<Rotation> group = [] {
    std::vector<Rotation> out;
    int perm[3] = {0, 1, 2};
    std::vector<Mat3> mats;
    do {
      for (int signs = 0; signs < 8; ++signs) {
        Mat3 m = Mat3::Zero();
        for (int row = 0; row < 3; ++row) {
          m(row, perm[row]) = (signs >> row & 1) ? -1.0 : 1.0;
        }
        if (m.determinant() > 0) mats.push_back(m);
      }
    } while (std::next_permutation(perm, perm + 3));
    // Identity first.
    std::stable_partition(mats.begin(), mats.end(),
                          [](const Mat3& m) { return m.isIdentity(); });
    for (const Mat3& m : mats) out.push_back(Rotation::from_matrix(m));
    return out;
  }();
  return group;
}

FieldType::FieldType(std::vector<int> orders) : orders_(std::move(orders)) {
  offsets_.reserve(orders_.size());
  for (int l : orders_) {
    if (l < 0) fail(ErrorCode::kInvalidArgument, "negative field order");
    offsets_.push_back(dim_);
    dim_ += 2 * l + 1;
  }
}

FieldType FieldType::scalars(int count) {
  return FieldType(std::vector<int>(count, 0));
}

FieldType FieldType::parse(const std::string& text) {
  std::string s;
  for (char c : text) {
    if (!std::isspace(static_cast<unsigned char>(c))) s += c;
  }
  if (s.size() < 2 || s.front() != '[' || s.back() != ']') {
    fail(ErrorCode::kFormat, "field type must be bracketed: '" + text + "'");
  }
  std::vector<int> orders;
  std::stringstream items(s.substr(1, s.size() - 2));
  std::string item;
  while (std::getline(items, item, ',')) {
    const auto x = item.find('x');
    try {
      std::size_t used = 0;
      const int order = std::stoi(item.substr(0, x), &used);
      if (used != (x == std::string::npos ? item.size() : x)) throw std::invalid_argument("");
      int mult = 1;
      if (x != std::string::npos) {
        const std::string tail = item.substr(x + 1);
        mult = std::stoi(tail, &used);
        if (used != tail.size()) throw std::invalid_argument("");
      }
      if (order < 0 || mult < 0) throw std::invalid_argument("");
      orders.insert(orders.end(), mult, order);
    } catch (const std::logic_error&) {
      fail(ErrorCode::kFormat, "bad field entry '" + item + "' in '" + text + "'");
    }
  }
  return FieldType(std::move(orders));
}

int FieldType::max_order() const {
  return orders_.empty() ? 0 : *std::max_element(orders_.begin(), orders_.end());
}

std::string FieldType::to_string() const {
  std::string out = "[";
  for (std::size_t i = 0; i < orders_.size();) {
    std::size_t j = i;
    while (j < orders_.size() && orders_[j] == orders_[i]) ++j;
    if (i > 0) out += ",";
    out += std::to_string(orders_[i]) + "x" + std::to_string(j - i);
    i = j;
  }
  return out + "]";
}

Eigen::MatrixXd wigner_d_real(int l, const Rotation& r, int max_order) {
  check_order(l, max_order);
  if (l == 0) return Eigen::MatrixXd::Ones(1, 1);
  // Euler extraction is ill-conditioned near beta = 0, pi. Factor
  // r = (r q^T) q with q chosen so r q^T has |(2,2)| <= 1/sqrt(3).
  const Mat3& m = r.matrix();
  const double cand[3] = {std::abs(m(2, 2)), std::abs(m(2, 0)), std::abs(m(2, 1))};
  const int which = static_cast<int>(std::min_element(cand, cand + 3) - cand);
  if (which == 0) return wigner_from_euler(l, euler_zyz(m));
  const Mat3 q = basis_rotation(which);
  return wigner_from_euler(l, euler_zyz(m * q.transpose())) *
         wigner_from_euler(l, euler_zyz(q));
}

Eigen::VectorXd real_spherical_harmonics(int l, const Vec3& u, int max_order) {
  check_order(l, max_order);
  if (!(std::abs(u.norm() - 1.0) <= 1e-9)) {
    fail(ErrorCode::kNonUnitVector, "spherical harmonics need a unit vector");
  }
  const double x = u.x(), y = u.y(), z = u.z();
  std::vector<double> poly = legendre_coefficients(l);
  Eigen::VectorXd out(2 * l + 1);
  // (x + i y)^m accumulated incrementally; derivative of P_l taken in place.
  Complex xy_pow(1.0, 0.0);
  for (int m = 0; m <= l; ++m) {
    double deriv = 0.0;
    for (int p = static_cast<int>(poly.size()) - 1; p >= 0; --p) {
      deriv = deriv * z + poly[p];
    }
    const double norm = std::sqrt((2 * l + 1) / (4 * std::numbers::pi) *
                                  factorial(l - m) / factorial(l + m));
    if (m == 0) {
      out(l) = norm * deriv;
    } else {
      out(l + m) = std::sqrt(2.0) * norm * deriv * xy_pow.real();
      out(l - m) = std::sqrt(2.0) * norm * deriv * xy_pow.imag();
    }
    xy_pow *= Complex(x, y);
    std::vector<double> next(poly.size() > 1 ? poly.size() - 1 : 1, 0.0);
    for (std::size_t p = 1; p < poly.size(); ++p) next[p - 1] = poly[p] * p;
    poly = std::move(next);
  }
  return out;
}

ClebschGordan clebsch_gordan_real(int k, int l, int J, int max_order) {
  check_order(k, max_order);
  check_order(l, max_order);
  if (J < std::abs(k - l) || J > k + l) {
    fail(ErrorCode::kSelectionRule,
         "coupling (" + std::to_string(k) + "," + std::to_string(l) + ") -> " +
             std::to_string(J) + " violates |k-l| <= J <= k+l");
  }
  const int nj = 2 * J + 1, nk = 2 * k + 1, nl = 2 * l + 1;
  const CMatrix uj = complex_to_real(J).conjugate();
  const CMatrix uk = complex_to_real(k);
  const CMatrix ul = complex_to_real(l);

  std::vector<CMatrix> complex_slices(nj, CMatrix::Zero(nk, nl));
  for (int mj = -J; mj <= J; ++mj) {
    for (int a = -k; a <= k; ++a) {
      for (int b = -l; b <= l; ++b) {
        complex_slices[mj + J](a + k, b + l) = racah_cg(k, a, l, b, J, mj);
      }
    }
  }
  std::vector<CMatrix> real_slices(nj);
  for (int j = 0; j < nj; ++j) {
    CMatrix acc = CMatrix::Zero(nk, nl);
    for (int mj = 0; mj < nj; ++mj) acc += uj(j, mj) * complex_slices[mj];
    real_slices[j] = uk * acc * ul.transpose();
  }
  // The real intertwiner is unique up to a complex phase; fix it by making
  // the first dominant entry real and positive.
  double max_abs = 0.0;
  for (const auto& s : real_slices) max_abs = std::max(max_abs, s.cwiseAbs().maxCoeff());
  Complex phase(1.0, 0.0);
  bool found = false;
  for (int j = 0; j < nj && !found; ++j) {
    for (int a = 0; a < nk && !found; ++a) {
      for (int b = 0; b < nl && !found; ++b) {
        const Complex v = real_slices[j](a, b);
        if (std::abs(v) > 0.5 * max_abs) {
          phase = v / std::abs(v);
          found = true;
        }
      }
    }
  }
  ClebschGordan out{k, l, J, {}};
  out.slices.reserve(nj);
  for (int j = 0; j < nj; ++j) {
    Eigen::MatrixXd s = (real_slices[j] / phase).real();
    const double n = s.norm();
    if (n > 0) s /= n;
    out.slices.push_back(std::move(s));
  }
  return out;
}

Eigen::MatrixXd field_repr(const FieldType& ft, const Rotation& r, int max_order) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(ft.dim(), ft.dim());
  std::vector<Eigen::MatrixXd> cache(ft.max_order() + 1);
  for (int i = 0; i < ft.size(); ++i) {
    const int l = ft.order(i);
    if (cache[l].size() == 0) cache[l] = wigner_d_real(l, r, max_order);
    out.block(ft.offset(i), ft.offset(i), 2 * l + 1, 2 * l + 1) = cache[l];
  }
  return out;
}

}  // namespace ssconv
