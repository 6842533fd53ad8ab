#pragma once

#include "ssconv/sparse_tensor.hpp"
#include "ssconv/steerable_kernel.hpp"

#include <utility>
#include <vector>

namespace ssconv {

enum class ConvMode { kGeneral, kSubmanifold };

struct ConvSpec {
  FieldType field_in;
  FieldType field_out;
  int size = 3;
  ConvMode mode = ConvMode::kSubmanifold;
};

/// Sites x with some active y such that x - y lies in the s^3 cube; sorted.
std::vector<Coord> output_sites_general(const SiteTable& in, int size);
std::vector<Coord> output_sites_submanifold(const SiteTable& in);

/// pairs[o] lists (output row, input row) with out_site - in_site equal to
/// offset o, sorted by output row then input row.
struct RuleBook {
  int size = 1;
  std::vector<std::vector<std::pair<int, int>>> pairs;

  long total_pairs() const;
};

RuleBook build_rulebook(const SiteTable& in, const SiteTable& out, int size);

/// F_out[r_out] += kappa(s) F_in[r_in] over every rule; offsets in order.
FeatureMatrix apply_rulebook(const RuleBook& rules, const KernelTensor& kernel,
                             const FeatureMatrix& in, int out_rows);

struct ConvOutput {
  SparseTensor output;
  RuleBook rules;
};

ConvOutput conv_forward_with_rules(const SparseTensor& in, const KernelTensor& kernel,
                                   const ConvSpec& spec);
SparseTensor conv_forward(const SparseTensor& in, const SteerableKernel& kern,
                          const ConvSpec& spec);

struct KernelGradients {
  FeatureMatrix input;
  KernelTensor kernel;
};

/// Reverse mode of apply_rulebook for a fixed kernel tensor.
KernelGradients rulebook_backward(const FeatureMatrix& grad_out, const FeatureMatrix& in,
                                  const KernelTensor& kernel, const RuleBook& rules);

struct ConvGradients {
  FeatureMatrix input;
  Eigen::VectorXd weights;
};

ConvGradients conv_backward(const FeatureMatrix& grad_out, const SparseTensor& in,
                            const SteerableKernel& kern, const RuleBook& rules);

struct PoolOutput {
  SparseTensor output;
  /// Output row of each input row.
  std::vector<int> parent;
  /// Active inputs per output row.
  std::vector<int> counts;
};

/// Mean over active sites of each factor^3 block; voxel size scales by
/// `factor` and the origin moves to the first block center.
PoolOutput avg_pool(const SparseTensor& t, int factor);
SparseTensor avg_pool_downsample(const SparseTensor& t, int factor);
FeatureMatrix avg_pool_backward(const PoolOutput& pool, const FeatureMatrix& grad_out);

/// Dense zero-padded same-size convolution out[x] = sum_s kappa(s) in[x - s],
/// evaluated over the whole volume. Reference path for benchmarking.
DenseGrid dense_conv_reference(const DenseGrid& in, const KernelTensor& kernel, int size);

}  // namespace ssconv
