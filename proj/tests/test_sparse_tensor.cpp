#include "ssconv/error.hpp"
#include "ssconv/sparse_tensor.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

using namespace ssconv;

namespace {

PointCloud make_cloud(std::vector<std::array<double, 6>> rows) {
  PointCloud pc;
  pc.points.resize(static_cast<Eigen::Index>(rows.size()), 3);
  pc.attributes.resize(static_cast<Eigen::Index>(rows.size()), 3);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int j = 0; j < 3; ++j) {
      pc.points(i, j) = rows[i][j];
      pc.attributes(i, j) = rows[i][3 + j];
    }
  }
  return pc;
}

}  // namespace

TEST_CASE("voxelize averages attributes per cell") {
  const auto one = voxelize(make_cloud({{0.2, 0.1, 0.3, 0.1, 0.2, 0.3}}), 8, false);
  REQUIRE(one.num_sites() == 1);
  CHECK(one.field_type() == FieldType::scalars(4));
  Eigen::VectorXd expected(4);
  expected << 0.1, 0.2, 0.3, 1.0;
  CHECK(one.features().row(0).transpose().isApprox(expected));

  const auto two = voxelize(make_cloud({{0.1, 0.1, 0.1, 0, 0, 0}, {0.2, 0.2, 0.2, 1, 1, 1}}), 8, false);
  REQUIRE(two.num_sites() == 1);
  expected << 0.5, 0.5, 0.5, 1.0;
  CHECK(two.features().row(0).transpose().isApprox(expected));

  const auto empty = voxelize(PointCloud{}, 8, false);
  CHECK(empty.num_sites() == 0);
  CHECK_THROWS_AS(voxelize(PointCloud{}, 8, true), Error);
  CHECK_THROWS_AS(voxelize(PointCloud{}, 1, false), Error);
}

TEST_CASE("voxel cells are half-open") {
  GridFrame frame;
  CHECK(frame.cell(Vec3(0.4999, 0, 0)).x == 0);
  CHECK(frame.cell(Vec3(0.5, 0, 0)).x == 1);
  CHECK(frame.cell(Vec3(-0.5, 0, 0)).x == 0);
  CHECK(frame.cell(Vec3(-0.5001, 0, 0)).x == -1);
}

TEST_CASE("normalized voxelization fits 90 percent of the grid") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n01;
  PointCloud pc;
  pc.points.resize(300, 3);
  pc.attributes.resize(300, 0);
  for (int i = 0; i < 300; ++i)
    for (int j = 0; j < 3; ++j) pc.points(i, j) = 10 + 3 * n01(rng);
  const auto t = voxelize(pc, 32, true);
  int lo = 1000, hi = -1000;
  for (const Coord& c : t.sites().coords()) {
    lo = std::min({lo, c.x, c.y, c.z});
    hi = std::max({hi, c.x, c.y, c.z});
  }
  CHECK(lo >= 1);
  CHECK(hi <= 30);
  CHECK(t.field_type().dim() == 1);
}

TEST_CASE("voxelize is invariant to point order") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 5);
  PointCloud pc;
  pc.points.resize(200, 3);
  pc.attributes.resize(200, 2);
  for (int i = 0; i < 200; ++i) {
    for (int j = 0; j < 3; ++j) pc.points(i, j) = u(rng);
    for (int j = 0; j < 2; ++j) pc.attributes(i, j) = u(rng);
  }
  std::vector<int> perm(200);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  PointCloud shuffled = pc;
  for (int i = 0; i < 200; ++i) {
    shuffled.points.row(i) = pc.points.row(perm[i]);
    shuffled.attributes.row(i) = pc.attributes.row(perm[i]);
  }
  const auto a = voxelize(pc, 8, false);
  const auto b = voxelize(shuffled, 8, false);
  CHECK(a.sites().coords() == b.sites().coords());
  CHECK((a.features() - b.features()).cwiseAbs().maxCoeff() < 1e-14);

  // One nonzero dense cell per occupied voxel (constant channel is 1).
  const auto dense = to_dense(a, {6, 6, 6});
  int nonzero = 0;
  for (int z = 0; z < 6; ++z)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) nonzero += dense.at(x, y, z, 2) != 0.0;
  CHECK(nonzero == a.num_sites());
}

TEST_CASE("lookup returns features or the ground state") {
  FeatureMatrix f(2, 2);
  f << 1, 2, 3, 4;
  SparseTensor t(FieldType::scalars(2), {{5, 0, 0}, {0, 0, 1}}, f);
  // Canonical order is z-major: (5,0,0) sorts before (0,0,1).
  CHECK(t.sites()[0] == Coord{5, 0, 0});
  CHECK(t.lookup({0, 0, 1})->isApprox(Eigen::Vector2d(3, 4)));
  CHECK_FALSE(t.lookup({1, 1, 1}).has_value());
  CHECK_THROWS_AS(SparseTensor(FieldType::scalars(2), {{1, 1, 1}, {1, 1, 1}}, f), Error);

  const auto v = voxelize(make_cloud({{2.2, 3.1, 0.9, 0.5, 0.25, 0.125}}), 8, false);
  const auto hit = v.lookup({2, 3, 1});
  REQUIRE(hit.has_value());
  CHECK((*hit)(1) == 0.25);
  CHECK((*hit)(3) == 1.0);
}

TEST_CASE("to_dense and from_dense") {
  const auto empty = to_dense(SparseTensor::empty(FieldType::scalars(2)), {3, 3, 3});
  CHECK(std::all_of(empty.data.begin(), empty.data.end(), [](double v) { return v == 0.0; }));

  FeatureMatrix f(1, 2);
  f << 7, -1;
  SparseTensor one(FieldType::scalars(2), {{1, 2, 3}}, f);
  const auto dense = to_dense(one, {4, 4, 4});
  CHECK(dense.at(1, 2, 3, 0) == 7);
  CHECK(dense.at(1, 2, 3, 1) == -1);
  double sum = 0;
  for (double v : dense.data) sum += std::abs(v);
  CHECK(sum == 8);
  CHECK_THROWS_AS(to_dense(one, {3, 3, 3}), Error);

  std::mt19937_64 rng(1);
  const auto t = ssconv::testing::random_tensor(FieldType::parse("[0x1,1x1]"), 5, 0.3, rng);
  const auto back = from_dense(to_dense(t, {5, 5, 5}), t.field_type());
  CHECK(back.sites().coords() == t.sites().coords());
  CHECK(back.features() == t.features());
}

TEST_CASE("SSTF serialization") {
  std::mt19937_64 rng(3);
  GridFrame frame{0.25, Vec3(1, -2, 3), {8, 8, 8}};
  auto base = ssconv::testing::random_tensor(FieldType::scalars(3), 6, 0.2, rng);
  SparseTensor t(base.field_type(), base.site_table(), base.features(), frame);
  const auto bytes = serialize(t);
  CHECK(bytes.size() == 4 + 4 * 6 + 8 * 4 + static_cast<std::size_t>(t.num_sites()) * (12 + 24));
  const auto back = deserialize(bytes);
  CHECK(back.sites().coords() == t.sites().coords());
  CHECK(back.features() == t.features());
  CHECK(back.frame().voxel_size == 0.25);
  CHECK(back.frame().origin == frame.origin);
  CHECK(back.frame().extent == frame.extent);

  const auto header_only = serialize(SparseTensor::empty(FieldType::scalars(3)));
  CHECK(header_only.size() == 60);
  CHECK(deserialize(header_only).num_sites() == 0);

  auto corrupted = bytes;
  corrupted[0] = 'X';
  CHECK_THROWS_AS(deserialize(corrupted), Error);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 5);
  CHECK_THROWS_AS(deserialize(truncated), Error);
  CHECK_THROWS_AS(deserialize(bytes, FieldType::parse("[1x2]")), Error);
  CHECK(deserialize(bytes, FieldType::parse("[1x1]")).field_type() == FieldType::parse("[1x1]"));
}

TEST_CASE("point cloud text format") {
  std::istringstream ok("# comment\n0 0 0 1 2 3\n\n  # indented comment\n1 1 1 4 5 6\n");
  const auto pc = read_point_cloud(ok);
  CHECK(pc.size() == 2);
  CHECK(pc.attributes(1, 2) == 6);

  std::istringstream bad("0 0 0 1\n1 1 x 2\n");
  try {
    read_point_cloud(bad);
    FAIL("expected a parse error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  std::istringstream ragged("0 0 0 1\n1 1 1\n");
  CHECK_THROWS_AS(read_point_cloud(ragged), Error);
}
