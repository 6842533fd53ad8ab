#include "ssconv/error.hpp"
#include "ssconv/sparse_conv.hpp"

#include "oracles.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <set>

using namespace ssconv;
using namespace ssconv::testing;

namespace {

SiteTable table_of(std::vector<Coord> coords) {
  return SiteTable::canonicalize(std::move(coords)).first;
}

SparseTensor shifted(const SparseTensor& t, const Coord& by) {
  std::vector<Coord> sites;
  for (const Coord& c : t.sites().coords()) sites.push_back(c + by);
  return SparseTensor(t.field_type(), std::move(sites), t.features(), t.frame());
}

}  // namespace

TEST_CASE("output site definitions") {
  CHECK(output_sites_general(SiteTable(), 3).empty());
  const auto cube = output_sites_general(table_of({{0, 0, 0}}), 3);
  CHECK(cube.size() == 27);
  CHECK(cube.front() == Coord{-1, -1, -1});
  CHECK(cube.back() == Coord{1, 1, 1});

  // Brute-force union of the two receptive cubes.
  std::set<Coord> expected;
  for (const Coord& c : {Coord{0, 0, 0}, Coord{4, 0, 0}})
    for (const Coord& s : kernel_offsets(3)) expected.insert(c + s);
  const auto two = output_sites_general(table_of({{0, 0, 0}, {4, 0, 0}}), 3);
  CHECK(two.size() == 54);
  CHECK(std::vector<Coord>(expected.begin(), expected.end()) == two);

  const auto t = table_of({{1, 2, 3}, {0, 0, 0}});
  CHECK(output_sites_submanifold(t) == t.coords());
  CHECK(output_sites_submanifold(table_of(output_sites_submanifold(t))) == t.coords());
  CHECK(output_sites_submanifold(SiteTable()).empty());
}

TEST_CASE("rule book construction") {
  const SiteTable single = table_of({{0, 0, 0}});
  const SiteTable out = table_of(output_sites_general(single, 3));
  const RuleBook rb = build_rulebook(single, out, 3);
  for (const auto& list : rb.pairs) CHECK(list.size() == 1);

  const RuleBook sub = build_rulebook(single, single, 3);
  for (int o = 0; o < 27; ++o) CHECK(sub.pairs[o].size() == (o == 13 ? 1u : 0u));

  std::vector<Coord> dense;
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) dense.push_back({x, y, z});
  const SiteTable in = table_of(dense);
  const SiteTable gen_out = table_of(output_sites_general(in, 3));
  const RuleBook full = build_rulebook(in, gen_out, 3);
  CHECK(full.pairs[13].size() == 64);
  const auto literal = oracle::literal_rulebook(in, gen_out, 3);
  long literal_total = 0;
  for (int o = 0; o < 27; ++o) {
    literal_total += static_cast<long>(literal[o].size());
    CHECK(std::vector<std::pair<int, int>>(literal[o].begin(), literal[o].end()) == full.pairs[o]);
  }
  CHECK(full.total_pairs() == literal_total);

  // Submanifold on the same block: boundary offsets have fewer pairs.
  const RuleBook subm = build_rulebook(in, in, 3);
  CHECK(subm.pairs[13].size() == 64);
  CHECK(subm.pairs[0].size() == 27);
}

TEST_CASE("rule book completeness on random instances") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 10; ++trial) {
    const SiteTable in = table_of(random_sites(6, 0.2, rng));
    for (int size : {1, 3, 5}) {
      const SiteTable out = table_of(output_sites_general(in, size));
      const RuleBook rb = build_rulebook(in, out, size);
      const auto literal = oracle::literal_rulebook(in, out, size);
      for (std::size_t o = 0; o < literal.size(); ++o) {
        CHECK(std::vector<std::pair<int, int>>(literal[o].begin(), literal[o].end()) == rb.pairs[o]);
      }
    }
  }
}

TEST_CASE("widely spread sites take the same result") {
  // Spans past the packed-key range, a sparse moderate span and a compact
  // block exercise every site-generation and lookup strategy.
  std::mt19937_64 rng(78);
  std::uniform_int_distribution<int> far(-3000000, 3000000), mid(-500, 500);
  for (auto* dist : {&far, &mid}) {
    std::vector<Coord> coords{{0, 0, 0}, {1, 0, 0}};
    for (int i = 0; i < 12; ++i) coords.push_back({(*dist)(rng), (*dist)(rng), (*dist)(rng)});
    const SiteTable in = table_of(coords);
    std::set<Coord> expected;
    for (const Coord& c : in.coords())
      for (const Coord& s : kernel_offsets(3)) expected.insert(c + s);
    const SiteTable out = table_of(output_sites_general(in, 3));
    CHECK(std::vector<Coord>(expected.begin(), expected.end()) == out.coords());
    const RuleBook rb = build_rulebook(in, out, 3);
    const auto literal = oracle::literal_rulebook(in, out, 3);
    for (std::size_t o = 0; o < literal.size(); ++o) {
      CHECK(std::vector<std::pair<int, int>>(literal[o].begin(), literal[o].end()) == rb.pairs[o]);
    }
    for (const Coord& c : in.coords()) CHECK(in[in.find(c)] == c);
    CHECK(in.find(Coord{7, 7, 7}) == -1);
  }
}

TEST_CASE("conv_forward matches the dense oracle") {
  std::mt19937_64 rng(5);
  const FieldType fin = FieldType::parse("[0x1,1x1]");
  const FieldType fout = FieldType::parse("[0x2,1x1]");
  SteerableKernel kern(fin, fout, 3);
  kern.init_weights(3);
  const auto kt = kern.materialize();

  SUBCASE("empty input") {
    const SparseTensor empty = SparseTensor::empty(fin);
    CHECK(conv_forward(empty, kern, {fin, fout, 3, ConvMode::kGeneral}).num_sites() == 0);
    CHECK(conv_forward(empty, kern, {fin, fout, 3, ConvMode::kSubmanifold}).num_sites() == 0);
  }
  SUBCASE("fully dense 8^3 input, general mode") {
    // Shift by one so every dilated output site lies in a 10^3 box.
    const SparseTensor in = shifted(random_tensor(fin, 8, 1.0, rng), {1, 1, 1});
    const SparseTensor out = conv_forward(in, kern, {fin, fout, 3, ConvMode::kGeneral});
    CHECK(out.num_sites() == 1000);
    const DenseGrid expected = oracle::naive_dense_conv(to_dense(in, {10, 10, 10}), kt, 3);
    const DenseGrid got = to_dense(out, {10, 10, 10});
    double err = 0;
    for (std::size_t i = 0; i < got.data.size(); ++i)
      err = std::max(err, std::abs(got.data[i] - expected.data[i]));
    CHECK(err < 1e-10);
  }
  SUBCASE("sparse input, submanifold mode equals masked dense conv") {
    const SparseTensor in = random_tensor(fin, 7, 0.3, rng);
    const SparseTensor out = conv_forward(in, kern, {fin, fout, 3, ConvMode::kSubmanifold});
    CHECK(out.sites().coords() == in.sites().coords());
    const DenseGrid expected = oracle::naive_dense_conv(to_dense(in, {7, 7, 7}), kt, 3);
    double err = 0;
    for (int r = 0; r < out.num_sites(); ++r) {
      const Coord& c = out.sites()[r];
      for (int a = 0; a < fout.dim(); ++a)
        err = std::max(err, std::abs(out.features()(r, a) - expected.at(c.x, c.y, c.z, a)));
    }
    CHECK(err < 1e-10);
  }
  SUBCASE("field mismatch") {
    const SparseTensor wrong = SparseTensor::empty(fout);
    CHECK_THROWS_AS(conv_forward(wrong, kern, {fin, fout, 3, ConvMode::kGeneral}), Error);
  }
}

TEST_CASE("dense reference path matches the naive oracle") {
  std::mt19937_64 rng(6);
  const FieldType fin = FieldType::parse("[0x2,1x1]");
  SteerableKernel kern(fin, FieldType::parse("[0x1,1x1]"), 3);
  kern.init_weights(9);
  const auto kt = kern.materialize();
  const DenseGrid in = to_dense(random_tensor(fin, 6, 0.5, rng), {6, 6, 6});
  const DenseGrid a = dense_conv_reference(in, kt, 3);
  const DenseGrid b = oracle::naive_dense_conv(in, kt, 3);
  double err = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) err = std::max(err, std::abs(a.data[i] - b.data[i]));
  CHECK(err < 1e-12);
}

TEST_CASE("conv_forward is equivariant under octahedral rotations") {
  std::mt19937_64 rng(8);
  const FieldType fin = FieldType::parse("[0x2]");
  const FieldType fout = FieldType::parse("[0x1,1x2,2x1]");
  SteerableKernel kern(fin, fout, 3);
  kern.init_weights(4);
  const SparseTensor in = random_tensor(fin, 5, 0.4, rng);
  for (ConvMode mode : {ConvMode::kGeneral, ConvMode::kSubmanifold}) {
    const ConvSpec spec{fin, fout, 3, mode};
    const SparseTensor out = conv_forward(in, kern, spec);
    for (const Rotation& r : octahedral_group()) {
      const SparseTensor lhs = conv_forward(rotate_sites(in, r), kern, spec);
      CHECK(tensor_diff(lhs, rotate_sites(out, r)) < 1e-9);
    }
  }
}

TEST_CASE("conv_forward is deterministic") {
  std::mt19937_64 rng(10);
  const FieldType ft = FieldType::parse("[0x2,1x1]");
  SteerableKernel kern(ft, ft, 3);
  kern.init_weights(1);
  const SparseTensor in = random_tensor(ft, 6, 0.3, rng);
  const ConvSpec spec{ft, ft, 3, ConvMode::kGeneral};
  const auto a = conv_forward(in, kern, spec);
  const auto b = conv_forward(in, kern, spec);
  CHECK(a.features() == b.features());
}

TEST_CASE("conv_backward matches finite differences") {
  std::mt19937_64 rng(14);
  const FieldType fin = FieldType::parse("[0x1,1x1]");
  const FieldType fout = FieldType::parse("[0x1,1x1]");
  SteerableKernel kern(fin, fout, 3);
  kern.init_weights(2);
  const SparseTensor in = random_tensor(fin, 4, 0.25, rng);
  REQUIRE(in.num_sites() <= 20);
  for (ConvMode mode : {ConvMode::kGeneral, ConvMode::kSubmanifold}) {
    const ConvSpec spec{fin, fout, 3, mode};
    const ConvOutput fwd = conv_forward_with_rules(in, kern.materialize(), spec);
    const FeatureMatrix probe = random_matrix(fwd.output.num_sites(), fout.dim(), rng);
    const ConvGradients g = conv_backward(probe, in, kern, fwd.rules);

    auto loss_w = [&](const Eigen::VectorXd& w) {
      SteerableKernel k2 = kern;
      k2.set_weights(w);
      return conv_forward(in, k2, spec).features().cwiseProduct(probe).sum();
    };
    CHECK(oracle::relative_error(g.weights, oracle::central_difference(loss_w, kern.weights())) < 1e-4);

    const Eigen::VectorXd x0 = Eigen::Map<const Eigen::VectorXd>(in.features().data(), in.features().size());
    auto loss_x = [&](const Eigen::VectorXd& x) {
      FeatureMatrix f = Eigen::Map<const FeatureMatrix>(x.data(), in.num_sites(), fin.dim());
      return conv_forward(in.with_features(f), kern, spec).features().cwiseProduct(probe).sum();
    };
    const Eigen::VectorXd gx = Eigen::Map<const Eigen::VectorXd>(g.input.data(), g.input.size());
    CHECK(oracle::relative_error(gx, oracle::central_difference(loss_x, x0)) < 1e-4);

    const ConvGradients zero =
        conv_backward(FeatureMatrix::Zero(fwd.output.num_sites(), fout.dim()), in, kern, fwd.rules);
    CHECK(zero.weights.norm() == 0.0);
    CHECK(zero.input.norm() == 0.0);
  }
}

TEST_CASE("average pooling") {
  FeatureMatrix one(1, 2);
  one << 3, -4;
  const SparseTensor single(FieldType::scalars(2), {{5, 5, 5}}, one);
  const auto p1 = avg_pool_downsample(single, 2);
  REQUIRE(p1.num_sites() == 1);
  CHECK(p1.sites()[0] == Coord{2, 2, 2});
  CHECK(p1.features() == one);
  CHECK(p1.frame().voxel_size == 2.0);
  CHECK(p1.frame().origin.isApprox(Vec3::Constant(0.5)));

  FeatureMatrix two(2, 2);
  two << 1, 2, 3, 6;
  const auto p2 = avg_pool_downsample(SparseTensor(FieldType::scalars(2), {{0, 0, 0}, {1, 1, 0}}, two), 2);
  REQUIRE(p2.num_sites() == 1);
  CHECK(p2.features()(0, 0) == 2);
  CHECK(p2.features()(0, 1) == 4);

  // Negative coordinates floor towards -inf.
  const auto p3 = avg_pool_downsample(SparseTensor(FieldType::scalars(2), {{-1, 0, 0}}, one), 2);
  CHECK(p3.sites()[0] == Coord{-1, 0, 0});
  CHECK_THROWS_AS(avg_pool_downsample(single, 1), Error);

  // Equivariance about the block-corner center (f - 1) / 2 on the fine grid.
  std::mt19937_64 rng(3);
  const FieldType ft = FieldType::parse("[0x1,1x1,2x1]");
  const SparseTensor t = random_tensor(ft, 8, 0.3, rng);
  const SparseTensor pooled = avg_pool_downsample(t, 2);
  for (const Rotation& r : octahedral_group()) {
    const SparseTensor lhs = avg_pool_downsample(rotate_sites(t, r, 0.5), 2);
    CHECK(tensor_diff(lhs, rotate_sites(pooled, r, 0.0)) < 1e-12);
  }
}
