#include "ssconv/error.hpp"
#include "ssconv/steering.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <numbers>

using namespace ssconv;
using namespace ssconv::testing;

namespace {

GridFrame centered_frame(int grid, double voxel = 1.0) {
  GridFrame f;
  f.voxel_size = voxel;
  f.origin = Vec3::Constant(-voxel * (grid - 1) / 2.0);
  f.extent = {grid, grid, grid};
  return f;
}

SparseTensor in_frame(const SparseTensor& t, const GridFrame& f) {
  return SparseTensor(t.field_type(), t.site_table(), t.features(), f);
}

Pose random_pose(std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  return {random_rotation(rng), Vec3(n01(rng), n01(rng), n01(rng))};
}

double pose_diff(const Pose& a, const Pose& b) {
  return std::max((a.rotation.matrix() - b.rotation.matrix()).cwiseAbs().maxCoeff(),
                  (a.translation - b.translation).cwiseAbs().maxCoeff());
}

}  // namespace

TEST_CASE("lattice motion by lattice symmetries is exact") {
  std::mt19937_64 rng(1);
  const FieldType ft = FieldType::parse("[0x1,1x1,2x1]");
  const int grid = 6;
  const SparseTensor t = in_frame(random_tensor(ft, grid, 0.3, rng), centered_frame(grid, 0.7));
  for (const Rotation& r : octahedral_group()) {
    const LatticeMotion m = rotate_lattice(t, {r, Vec3::Zero()});
    CHECK(tensor_diff(m.output, rotate_sites(t, r, (grid - 1) / 2.0)) < 1e-12);
    for (int c : m.counts) CHECK(c == 1);
  }
  const LatticeMotion id = rotate_lattice(t, {});
  CHECK(tensor_diff(id.output, t) < 1e-14);

  // Whole-voxel translations shift the sites.
  const LatticeMotion shift = rotate_lattice(t, {Rotation(), Vec3(1.4, 0, -2.1)});
  std::vector<Coord> moved;
  for (const Coord& c : t.sites().coords()) moved.push_back(c + Coord{2, 0, -3});
  CHECK(shift.output.sites().coords() == SiteTable::canonicalize(moved).first.coords());
}

TEST_CASE("lattice motion averages rows that share a cell") {
  const FieldType ft = FieldType::parse("[0x1,1x1]");
  FeatureMatrix f(2, 4);
  f << 1, 1, 0, 0,
       3, 0, 1, 0;
  const SparseTensor t(ft, std::vector<Coord>{{0, 0, 0}, {1, 0, 0}}, f);
  const Rotation r = Rotation::about_axis(Vec3(0, 0, 1), std::numbers::pi / 3);
  // (0,0,0) -> (-0.25,-0.45) -> cell 0; (1,0,0) -> (0.25, 0.416) -> cell 0.
  const LatticeMotion m = rotate_lattice(t, {r, Vec3(-0.25, -0.45, 0)});
  REQUIRE(m.output.num_sites() == 1);
  CHECK(m.counts == std::vector<int>{2});
  CHECK(m.target == std::vector<int>{0, 0});
  const Eigen::MatrixXd rho = field_repr(ft, r);
  const Eigen::RowVectorXd expected = (0.5 * (f.row(0) + f.row(1))) * rho.transpose();
  CHECK(max_abs_diff(m.output.features(), expected) < 1e-14);
}

TEST_CASE("interpolation examples") {
  const FieldType ft = FieldType::parse("[0x2]");
  FeatureMatrix f(2, 2);
  f << 1, 4, 3, 8;
  const SparseTensor t(ft, std::vector<Coord>{{0, 0, 0}, {1, 0, 0}}, f);
  PointMatrix q(4, 3);
  q << 0, 0, 0,
       0.5, 0, 0,
       1, 0, 0,
       50, 50, 50;
  const FeatureMatrix y = interpolate(plan_interpolation(t, q), t.features());
  CHECK(max_abs_diff(y.row(0), f.row(0)) == 0.0);
  CHECK(max_abs_diff(y.row(1), 0.5 * (f.row(0) + f.row(1))) < 1e-15);
  CHECK(max_abs_diff(y.row(2), f.row(1)) == 0.0);
  CHECK(y.row(3).cwiseAbs().maxCoeff() == 0.0);

  // Fully dense cell against the textbook trilinear formula.
  std::mt19937_64 rng(3);
  std::vector<Coord> corners;
  for (int z = 0; z < 2; ++z)
    for (int y0 = 0; y0 < 2; ++y0)
      for (int x = 0; x < 2; ++x) corners.push_back({x, y0, z});
  GridFrame frame;
  frame.voxel_size = 0.5;
  frame.origin = Vec3(1, -1, 2);
  const FieldType one = FieldType::parse("[0x1]");
  const SparseTensor cell(one, corners, random_matrix(8, 1, rng), frame);
  std::uniform_real_distribution<double> u01;
  for (int trial = 0; trial < 20; ++trial) {
    const Vec3 a(u01(rng), u01(rng), u01(rng));
    PointMatrix p(1, 3);
    p.row(0) = (frame.origin + frame.voxel_size * a).transpose();
    double expected = 0;
    for (const Coord& c : corners) {
      const double w = (c.x ? a.x() : 1 - a.x()) * (c.y ? a.y() : 1 - a.y()) * (c.z ? a.z() : 1 - a.z());
      expected += w * cell.lookup(c).value()(0);
    }
    CHECK(interpolate(plan_interpolation(cell, p), cell.features())(0, 0) == doctest::Approx(expected).epsilon(1e-13));
  }
}

TEST_CASE("interpolate_transpose is the adjoint") {
  std::mt19937_64 rng(5);
  const FieldType ft = FieldType::parse("[0x1,1x1]");
  const SparseTensor t = random_tensor(ft, 5, 0.4, rng);
  PointMatrix q(30, 3);
  std::uniform_real_distribution<double> u(-1, 6);
  for (int i = 0; i < 30; ++i) q.row(i) << u(rng), u(rng), u(rng);
  const InterpolationPlan plan = plan_interpolation(t, q);
  const FeatureMatrix g = random_matrix(30, ft.dim(), rng);
  const double lhs = (interpolate(plan, t.features()).array() * g.array()).sum();
  const double rhs = (t.features().array() * interpolate_transpose(plan, g).array()).sum();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("tensor_to_point concatenates levels") {
  std::mt19937_64 rng(6);
  const SparseTensor a = random_tensor(FieldType::parse("[0x2]"), 4, 0.5, rng);
  const SparseTensor b = random_tensor(FieldType::parse("[1x1]"), 4, 0.5, rng);
  PointMatrix q(5, 3);
  q.setRandom();
  q = (q.array() + 1.0) * 1.5;
  const FeatureMatrix y = tensor_to_point({a, b}, q);
  CHECK(y.cols() == 5);
  CHECK(max_abs_diff(y.leftCols(2), interpolate(plan_interpolation(a, q), a.features())) == 0.0);
  CHECK(max_abs_diff(y.rightCols(3), interpolate(plan_interpolation(b, q), b.features())) == 0.0);
}

TEST_CASE("compose_pose") {
  std::mt19937_64 rng(8);
  const Pose p1 = random_pose(rng), p2 = random_pose(rng), p3 = random_pose(rng);
  const Pose c = compose_pose(p1, p2);
  CHECK((c.rotation.matrix() - p1.rotation.matrix() * p2.rotation.matrix()).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((c.translation - (p1.translation + p1.rotation.apply(p2.translation))).norm() < 1e-15);
  CHECK(pose_diff(compose_pose(compose_pose(p1, p2), p3), compose_pose(p1, compose_pose(p2, p3))) < 1e-12);
  CHECK(pose_diff(compose_pose(p1, Pose{}), p1) == 0.0);
  CHECK(pose_diff(compose_pose(p1, p1.inverse()), Pose{}) < 1e-12);
  const Vec3 x(0.3, -2, 1);
  CHECK((c.apply(x) - p1.apply(p2.apply(x))).norm() < 1e-12);
}

TEST_CASE("steering keeps the field and is exact for lattice symmetries") {
  std::mt19937_64 rng(9);
  const FieldType ft = FieldType::parse("[0x2,1x1]");
  const int grid = 6;
  const SparseTensor t = in_frame(random_tensor(ft, grid, 0.3, rng), centered_frame(grid));
  Network enrich(enrichment_config(ft));
  enrich.init(3);
  CHECK(enrich.output_field() == ft);
  const Network none(NetworkConfig{ft, {}});
  const Rotation& r = octahedral_group()[7];
  CHECK(tensor_diff(steer_tensor(t, {r, Vec3::Zero()}, none), rotate_lattice(t, {r, Vec3::Zero()}).output) == 0.0);
  // Enrichment commutes with lattice symmetries.
  const SparseTensor base = steer_tensor(t, {}, enrich);
  for (const Rotation& g : octahedral_group()) {
    CHECK(tensor_diff(steer_tensor(t, {g, Vec3::Zero()}, enrich), rotate_lattice(base, {g, Vec3::Zero()}).output) < 1e-9);
  }
}

TEST_CASE("steering a small rotation approximates re-running the backbone") {
  // Dense blob of smoothly varying scalars; rotate the underlying cloud by a
  // few degrees, re-voxelize and compare against steering the features.
  const int grid = 16;
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(-4, 4);
  PointCloud pc;
  const int n = 4000;
  pc.points.resize(n, 3);
  pc.attributes.resize(n, 3);
  for (int i = 0; i < n; ++i) {
    Vec3 p;
    do {
      p = Vec3(u(rng), u(rng), u(rng) * 0.6);
    } while (p.norm() > 4);
    pc.points.row(i) = p.transpose();
    pc.attributes.row(i) << 0.5 + 0.1 * p.x(), 0.5 - 0.1 * p.y(), 0.5 + 0.05 * p.z();
  }
  const GridFrame frame = centered_frame(grid, 0.55);
  Network net(NetworkConfig::parse_string(
      "conv in=[0x4] out=[0x4,1x2] size=3 mode=submanifold\nnorm\nact\n"
      "conv in=[0x4,1x2] out=[0x4,1x2] size=3 mode=submanifold\n"));
  net.init(4);
  const SparseTensor y = net.forward(voxelize(pc, frame), NormMode::kBatch);
  for (double deg : {3.0, 8.0}) {
    const Rotation r = Rotation::about_axis(Vec3(1, 2, 3).normalized(), deg * std::numbers::pi / 180);
    PointCloud moved = pc;
    for (int i = 0; i < n; ++i) moved.points.row(i) = r.apply(pc.points.row(i).transpose()).transpose();
    const SparseTensor direct = net.forward(voxelize(moved, frame), NormMode::kBatch);
    const SparseTensor steered = rotate_lattice(y, {r, Vec3::Zero()}).output;
    double num = 0, den = 0;
    int shared = 0;
    for (int row = 0; row < direct.num_sites(); ++row) {
      const auto s = steered.lookup(direct.sites()[row]);
      if (!s) continue;
      ++shared;
      num += (direct.features().row(row).transpose() - *s).norm();
      den += direct.features().row(row).norm();
    }
    CAPTURE(deg);
    CHECK(shared > direct.num_sites() * 8 / 10);
    CHECK(num / den < 0.35);
  }
}
