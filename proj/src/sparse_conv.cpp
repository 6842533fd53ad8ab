#include "ssconv/sparse_conv.hpp"

#include "ssconv/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>

namespace ssconv {

namespace {

int floor_div(int a, int b) { return (a >= 0) ? a / b : -((-a + b - 1) / b); }

// Row-major gather of selected rows.
FeatureMatrix gather(const FeatureMatrix& src, const std::vector<std::pair<int, int>>& pairs,
                     bool second) {
  FeatureMatrix out(static_cast<Eigen::Index>(pairs.size()), src.cols());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    out.row(i) = src.row(second ? pairs[i].second : pairs[i].first);
  }
  return out;
}

void check_kernel(const KernelTensor& kernel, int size) {
  if (static_cast<int>(kernel.size()) != size * size * size) {
    fail(ErrorCode::kShapeMismatch, "kernel tensor does not match the rule book size");
  }
}

}  // namespace

std::vector<Coord> output_sites_general(const SiteTable& in, int size) {
  if (size < 1 || size % 2 == 0) fail(ErrorCode::kInvalidArgument, "kernel size must be odd");
  const auto offsets = kernel_offsets(size);
  std::vector<Coord> out;
  if (in.size() == 0) return out;
  // Pack candidates into 64-bit keys whose order matches Coord ordering,
  // relative to the bounding box; fall back to sorting Coords if it is huge.
  const int h = (size - 1) / 2;
  Coord lo = in[0], hi = in[0];
  for (const Coord& c : in.coords()) {
    lo = {std::min(lo.x, c.x), std::min(lo.y, c.y), std::min(lo.z, c.z)};
    hi = {std::max(hi.x, c.x), std::max(hi.y, c.y), std::max(hi.z, c.z)};
  }
  lo = lo - Coord{h, h, h};
  const std::int64_t span = std::max({hi.x - lo.x, hi.y - lo.y, hi.z - lo.z}) + std::int64_t{h} + 1;
  const std::size_t candidates = static_cast<std::size_t>(in.size()) * offsets.size();
  if (std::pow(static_cast<double>(span), 3) <= 8.0 * static_cast<double>(candidates)) {
    // Small bounding box: mark a bitmap and scan it in canonical order.
    const std::int64_t e = span;
    std::vector<char> mark(static_cast<std::size_t>(e * e * e), 0);
    for (const Coord& y : in.coords())
      for (const Coord& s : offsets) {
        const Coord c = y + s - lo;
        mark[static_cast<std::size_t>((c.z * e + c.y) * e + c.x)] = 1;
      }
    for (std::int64_t i = 0; i < e * e * e; ++i) {
      if (mark[static_cast<std::size_t>(i)]) {
        out.push_back({static_cast<int>(i % e) + lo.x, static_cast<int>(i / e % e) + lo.y,
                       static_cast<int>(i / (e * e)) + lo.z});
      }
    }
    return out;
  }
  if (span >= (std::int64_t{1} << 21)) {
    out.reserve(static_cast<std::size_t>(in.size()) * offsets.size());
    for (const Coord& y : in.coords())
      for (const Coord& s : offsets) out.push_back(y + s);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }
  auto pack = [&](const Coord& c) {
    return (static_cast<std::uint64_t>(c.z - lo.z) << 42) | (static_cast<std::uint64_t>(c.y - lo.y) << 21) |
           static_cast<std::uint64_t>(c.x - lo.x);
  };
  std::vector<std::uint64_t> keys;
  keys.reserve(static_cast<std::size_t>(in.size()) * offsets.size());
  for (const Coord& y : in.coords())
    for (const Coord& s : offsets) keys.push_back(pack(y + s));
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  const std::uint64_t m = (std::uint64_t{1} << 21) - 1;
  out.reserve(keys.size());
  for (std::uint64_t k : keys) {
    out.push_back({static_cast<int>(k & m) + lo.x, static_cast<int>((k >> 21) & m) + lo.y,
                   static_cast<int>(k >> 42) + lo.z});
  }
  return out;
}

std::vector<Coord> output_sites_submanifold(const SiteTable& in) { return in.coords(); }

long RuleBook::total_pairs() const {
  long n = 0;
  for (const auto& p : pairs) n += static_cast<long>(p.size());
  return n;
}

RuleBook build_rulebook(const SiteTable& in, const SiteTable& out, int size) {
  if (size < 1 || size % 2 == 0) fail(ErrorCode::kInvalidArgument, "kernel size must be odd");
  RuleBook rb;
  rb.size = size;
  const auto offsets = kernel_offsets(size);
  rb.pairs.resize(offsets.size());
  for (auto& list : rb.pairs) list.reserve(in.size());
  if (in.size() == 0 || out.size() == 0) return rb;
  // A row-index grid over the output bounding box is much cheaper to probe
  // than the hash table when the box is not mostly empty.
  Coord lo = out[0], hi = out[0];
  for (const Coord& c : out.coords()) {
    lo = {std::min(lo.x, c.x), std::min(lo.y, c.y), std::min(lo.z, c.z)};
    hi = {std::max(hi.x, c.x), std::max(hi.y, c.y), std::max(hi.z, c.z)};
  }
  const std::int64_t ex = std::int64_t{hi.x} - lo.x + 1, ey = std::int64_t{hi.y} - lo.y + 1,
                     ez = std::int64_t{hi.z} - lo.z + 1;
  if (static_cast<double>(ex) * static_cast<double>(ey) * static_cast<double>(ez) <= 8.0 * out.size()) {
    std::vector<int> row(static_cast<std::size_t>(ex * ey * ez), -1);
    for (int r = 0; r < out.size(); ++r) {
      const Coord& c = out[r];
      row[static_cast<std::size_t>(((c.z - lo.z) * ey + (c.y - lo.y)) * ex + (c.x - lo.x))] = r;
    }
    for (int r_in = 0; r_in < in.size(); ++r_in) {
      const Coord& y = in[r_in];
      for (std::size_t o = 0; o < offsets.size(); ++o) {
        const Coord c = y + offsets[o];
        if (c.x < lo.x || c.x > hi.x || c.y < lo.y || c.y > hi.y || c.z < lo.z || c.z > hi.z) continue;
        const int r_out = row[static_cast<std::size_t>(((c.z - lo.z) * ey + (c.y - lo.y)) * ex + (c.x - lo.x))];
        if (r_out >= 0) rb.pairs[o].emplace_back(r_out, r_in);
      }
    }
    return rb;
  }
  // Input-major probing. A fixed shift preserves site order, so each list
  // comes out already sorted by (output, input).
  for (int r_in = 0; r_in < in.size(); ++r_in) {
    const Coord& y = in[r_in];
    for (std::size_t o = 0; o < offsets.size(); ++o) {
      const int r_out = out.find(y + offsets[o]);
      if (r_out >= 0) rb.pairs[o].emplace_back(r_out, r_in);
    }
  }
  return rb;
}

FeatureMatrix apply_rulebook(const RuleBook& rules, const KernelTensor& kernel,
                             const FeatureMatrix& in, int out_rows) {
  check_kernel(kernel, rules.size);
  const Eigen::Index k_out = kernel.empty() ? 0 : kernel.front().rows();
  FeatureMatrix out = FeatureMatrix::Zero(out_rows, k_out);
  const int n = static_cast<int>(rules.pairs.size());
  if (k_out == 0 || in.rows() == 0) return out;
  // Scatter-adds always run in (offset, pair) order so results are bitwise
  // reproducible.
  if (2 * rules.total_pairs() >= static_cast<long>(n) * in.rows()) {
    // Dense rule book: one product of every input row with all kernels
    // stacked side by side beats per-offset gathers.
    // Input rows go in cache-sized chunks; each list is sorted by input row
    // too, so a cursor per offset walks its pairs chunk by chunk.
    FeatureMatrix stacked(in.cols(), n * k_out);
    for (int o = 0; o < n; ++o) stacked.middleCols(o * k_out, k_out) = kernel[o].transpose();
    const Eigen::Index stride = stacked.cols();
    const Eigen::Index chunk = std::max<Eigen::Index>(16, (1 << 17) / stride);
    std::vector<std::size_t> cursor(n, 0);
    FeatureMatrix prod;
    for (Eigen::Index begin = 0; begin < in.rows(); begin += chunk) {
      const Eigen::Index rows = std::min(chunk, in.rows() - begin);
      prod.noalias() = in.middleRows(begin, rows) * stacked;
      const int end = static_cast<int>(begin + rows);
      for (int o = 0; o < n; ++o) {
        const auto& list = rules.pairs[o];
        std::size_t& i = cursor[o];
        for (; i < list.size() && list[i].second < end; ++i) {
          double* y = out.data() + list[i].first * k_out;
          const double* p = prod.data() + (list[i].second - begin) * stride + o * k_out;
          for (Eigen::Index a = 0; a < k_out; ++a) y[a] += p[a];
        }
      }
    }
    return out;
  }
  // Gather-multiply per offset may run concurrently.
  std::vector<FeatureMatrix> products(n);
#pragma omp parallel for schedule(dynamic)
  for (int o = 0; o < n; ++o) {
    if (rules.pairs[o].empty()) continue;
    products[o] = gather(in, rules.pairs[o], true) * kernel[o].transpose();
  }
  for (int o = 0; o < n; ++o) {
    const auto& list = rules.pairs[o];
    for (std::size_t i = 0; i < list.size(); ++i) out.row(list[i].first) += products[o].row(i);
  }
  return out;
}

ConvOutput conv_forward_with_rules(const SparseTensor& in, const KernelTensor& kernel,
                                   const ConvSpec& spec) {
  if (in.field_type() != spec.field_in) {
    fail(ErrorCode::kFieldMismatch, "input field " + in.field_type().to_string() +
                                        " does not match conv input " +
                                        spec.field_in.to_string());
  }
  check_kernel(kernel, spec.size);
  std::shared_ptr<const SiteTable> out_sites;
  if (spec.mode == ConvMode::kSubmanifold) {
    out_sites = in.site_table();
  } else {
    out_sites = std::make_shared<SiteTable>(output_sites_general(in.sites(), spec.size));
  }
  RuleBook rules = build_rulebook(in.sites(), *out_sites, spec.size);
  FeatureMatrix f = apply_rulebook(rules, kernel, in.features(), out_sites->size());
  if (f.cols() != spec.field_out.dim()) {
    fail(ErrorCode::kFieldMismatch, "kernel output width does not match conv output field");
  }
  return {SparseTensor(spec.field_out, out_sites, std::move(f), in.frame()), std::move(rules)};
}

SparseTensor conv_forward(const SparseTensor& in, const SteerableKernel& kern,
                          const ConvSpec& spec) {
  if (kern.field_in() != spec.field_in || kern.field_out() != spec.field_out ||
      kern.size() != spec.size) {
    fail(ErrorCode::kFieldMismatch, "kernel does not match conv spec");
  }
  return conv_forward_with_rules(in, kern.materialize(), spec).output;
}

KernelGradients rulebook_backward(const FeatureMatrix& grad_out, const FeatureMatrix& in,
                                  const KernelTensor& kernel, const RuleBook& rules) {
  check_kernel(kernel, rules.size);
  const Eigen::Index k_out = kernel.empty() ? 0 : kernel.front().rows();
  const Eigen::Index k_in = kernel.empty() ? 0 : kernel.front().cols();
  if (grad_out.cols() != k_out || in.cols() != k_in) {
    fail(ErrorCode::kShapeMismatch, "gradient shape does not match kernel");
  }
  const int n = static_cast<int>(rules.pairs.size());
  KernelGradients g;
  g.input = FeatureMatrix::Zero(in.rows(), k_in);
  g.kernel.assign(n, Eigen::MatrixXd::Zero(k_out, k_in));
  std::vector<FeatureMatrix> products(n);
#pragma omp parallel for schedule(dynamic)
  for (int o = 0; o < n; ++o) {
    const auto& list = rules.pairs[o];
    if (list.empty()) continue;
    const FeatureMatrix go = gather(grad_out, list, false);
    const FeatureMatrix x = gather(in, list, true);
    products[o] = go * kernel[o];
    g.kernel[o] = go.transpose() * x;
  }
  for (int o = 0; o < n; ++o) {
    const auto& list = rules.pairs[o];
    for (std::size_t i = 0; i < list.size(); ++i) g.input.row(list[i].second) += products[o].row(i);
  }
  return g;
}

ConvGradients conv_backward(const FeatureMatrix& grad_out, const SparseTensor& in,
                            const SteerableKernel& kern, const RuleBook& rules) {
  if (in.field_type() != kern.field_in()) {
    fail(ErrorCode::kFieldMismatch, "input does not match kernel");
  }
  KernelGradients kg = rulebook_backward(grad_out, in.features(), kern.materialize(), rules);
  return {std::move(kg.input), kern.project_gradient(kg.kernel)};
}

PoolOutput avg_pool(const SparseTensor& t, int factor) {
  if (factor < 2) fail(ErrorCode::kInvalidArgument, "pool factor must be >= 2");
  std::map<Coord, std::vector<int>> blocks;
  for (int r = 0; r < t.num_sites(); ++r) {
    const Coord& c = t.sites()[r];
    blocks[{floor_div(c.x, factor), floor_div(c.y, factor), floor_div(c.z, factor)}].push_back(r);
  }
  PoolOutput out;
  out.parent.assign(t.num_sites(), -1);
  std::vector<Coord> coords;
  coords.reserve(blocks.size());
  FeatureMatrix f = FeatureMatrix::Zero(static_cast<Eigen::Index>(blocks.size()),
                                        t.field_type().dim());
  int row = 0;
  for (const auto& [block, members] : blocks) {
    coords.push_back(block);
    for (int r : members) {
      f.row(row) += t.features().row(r);
      out.parent[r] = row;
    }
    f.row(row) /= static_cast<double>(members.size());
    out.counts.push_back(static_cast<int>(members.size()));
    ++row;
  }
  GridFrame frame = t.frame();
  frame.origin = frame.origin + frame.voxel_size * Vec3::Constant((factor - 1) / 2.0);
  frame.voxel_size *= factor;
  for (int& e : frame.extent) e = (e + factor - 1) / factor;
  out.output = SparseTensor(t.field_type(), std::make_shared<SiteTable>(std::move(coords)),
                            std::move(f), frame);
  return out;
}

SparseTensor avg_pool_downsample(const SparseTensor& t, int factor) {
  return avg_pool(t, factor).output;
}

FeatureMatrix avg_pool_backward(const PoolOutput& pool, const FeatureMatrix& grad_out) {
  FeatureMatrix g(static_cast<Eigen::Index>(pool.parent.size()), grad_out.cols());
  for (std::size_t r = 0; r < pool.parent.size(); ++r) {
    const int p = pool.parent[r];
    g.row(r) = grad_out.row(p) / static_cast<double>(pool.counts[p]);
  }
  return g;
}

DenseGrid dense_conv_reference(const DenseGrid& in, const KernelTensor& kernel, int size) {
  check_kernel(kernel, size);
  const int k_out = static_cast<int>(kernel.front().rows());
  const int k_in = static_cast<int>(kernel.front().cols());
  if (k_in != in.channels) fail(ErrorCode::kShapeMismatch, "dense input channels mismatch");
  DenseGrid out(in.dims, k_out);
  const auto offsets = kernel_offsets(size);
  const int dx = in.dims[0], dy = in.dims[1], dz = in.dims[2];
  using RowMap = Eigen::Map<FeatureMatrix>;
  using ConstRowMap = Eigen::Map<const FeatureMatrix>;
  for (std::size_t o = 0; o < offsets.size(); ++o) {
    const Coord s = offsets[o];
    const Eigen::MatrixXd kt = kernel[o].transpose();
    const int x0 = std::max(0, s.x), x1 = std::min(dx, dx + s.x);
    if (x1 <= x0) continue;
    for (int z = std::max(0, s.z); z < std::min(dz, dz + s.z); ++z) {
      for (int y = std::max(0, s.y); y < std::min(dy, dy + s.y); ++y) {
        ConstRowMap src(&in.data[in.index(x0 - s.x, y - s.y, z - s.z, 0)], x1 - x0, k_in);
        RowMap dst(&out.data[out.index(x0, y, z, 0)], x1 - x0, k_out);
        dst.noalias() += src * kt;
      }
    }
  }
  return out;
}

}  // namespace ssconv
