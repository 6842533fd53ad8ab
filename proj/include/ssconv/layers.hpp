#pragma once

#include "ssconv/sparse_conv.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace ssconv {

// ---------------------------------------------------------------------------
// Equivariant normalization

/// Running statistics, one slot per irreducible. Order-0 slots track mean and
/// variance; order > 0 slots track the mean squared norm only.
struct NormState {
  FieldType field;
  Eigen::VectorXd running_mean;
  Eigen::VectorXd running_var;
  double momentum = 0.9;
  double epsilon = 1e-5;

  NormState() = default;
  explicit NormState(FieldType ft);
};

/// What the backward pass needs from one normalization call.
struct NormCache {
  bool batch_stats = true;
  int num_sites = 0;
  Eigen::VectorXd mean;   // per irreducible (zero for order > 0)
  Eigen::VectorXd second; // variance or mean squared norm
  Eigen::VectorXd scale;  // sqrt(second + epsilon)
  FeatureMatrix input;
  FeatureMatrix output;
};

/// Standardizes scalars and rescales higher-order irreducibles by the root
/// mean squared norm. `batch_stats` uses statistics of the active sites of
/// `t`; otherwise the running averages in `state`.
SparseTensor equivariant_norm(const SparseTensor& t, const NormState& state, bool batch_stats,
                              NormCache* cache = nullptr);
FeatureMatrix equivariant_norm_backward(const FieldType& ft, const NormCache& cache,
                                        const FeatureMatrix& grad_out);
/// Folds the batch statistics of `cache` into the running averages.
void update_running_stats(NormState& state, const NormCache& cache);

// ---------------------------------------------------------------------------
// Gated activation

/// One scalar gate per order > 0 irreducible, produced by a submanifold
/// kernel of type (0, l) applied to that irreducible, plus a bias.
class GateParams {
 public:
  GateParams() = default;
  GateParams(FieldType ft, int size = 3, RadialProfile profile = {});

  const FieldType& field() const { return field_; }
  int size() const { return size_; }
  /// Irreducible index of each gate.
  const std::vector<int>& gated() const { return gated_; }
  const std::vector<SteerableKernel>& kernels() const { return kernels_; }
  const Eigen::VectorXd& bias() const { return bias_; }

  long num_parameters() const;
  /// Kernel weights gate by gate, then the biases.
  Eigen::VectorXd parameters() const;
  void set_parameters(const Eigen::VectorXd& p);
  void init(std::uint64_t seed);

 private:
  FieldType field_;
  int size_ = 3;
  std::vector<int> gated_;
  std::vector<SteerableKernel> kernels_;
  Eigen::VectorXd bias_;
};

struct GateCache {
  RuleBook rules;
  KernelTensor kernel;   // gates x K, block structured
  FeatureMatrix logits;  // sites x gates
  FeatureMatrix input;
};

SparseTensor gated_activation(const SparseTensor& t, const GateParams& gates,
                              GateCache* cache = nullptr);

struct GateGradients {
  FeatureMatrix input;
  Eigen::VectorXd params;
};

GateGradients gated_activation_backward(const GateParams& gates, const GateCache& cache,
                                        const FeatureMatrix& grad_out);

// ---------------------------------------------------------------------------
// Sequential network

enum class LayerKind { kConv, kNorm, kActivation, kPool };

struct LayerSpec {
  LayerKind kind = LayerKind::kConv;
  ConvSpec conv;             // kConv
  RadialProfile profile;     // kConv and kActivation gates
  int gate_size = 3;         // kActivation
  int pool_factor = 2;       // kPool

  std::string to_string() const;
};

/// Parses "conv in=[..] out=[..] size=3 mode=submanifold", "norm",
/// "act [gate_size=3]", "pool factor=2". Optional extra conv keys:
/// centers=0,1 eps=0.6.
LayerSpec parse_layer_spec(const std::string& line);

struct NetworkConfig {
  FieldType input;
  std::vector<LayerSpec> layers;

  /// One layer per line; '#' comments; an optional leading
  /// "input field=[..]" line, otherwise the first conv fixes the input.
  static NetworkConfig parse(std::istream& in);
  static NetworkConfig parse_string(const std::string& text);
  static NetworkConfig load(const std::string& path);
  std::string to_string() const;
};

enum class NormMode { kBatch, kRunning };

class Network;

struct LayerRecord {
  SparseTensor input;
  SparseTensor output;
  RuleBook rules;        // conv
  KernelTensor kernel;   // conv
  NormCache norm;        // norm
  GateCache gate;        // activation
  std::vector<int> pool_parent;  // pool
  std::vector<int> pool_counts;
};

struct Tape {
  const Network* owner = nullptr;
  std::uint64_t generation = 0;
  NormMode mode = NormMode::kBatch;
  SparseTensor input;
  std::vector<LayerRecord> records;

  const SparseTensor& output() const { return records.empty() ? input : records.back().output; }
  const SparseTensor& output_of(int layer) const { return records[layer].output; }
};

struct NetworkGradients {
  Eigen::VectorXd params;
  FeatureMatrix input;
};

class Network {
 public:
  Network() = default;
  /// Throws kFieldMismatch naming the first layer whose input does not chain.
  explicit Network(NetworkConfig config);

  const NetworkConfig& config() const { return config_; }
  int num_layers() const { return static_cast<int>(layers_.size()); }
  const LayerSpec& spec(int i) const { return config_.layers[i]; }
  const FieldType& input_field() const { return config_.input; }
  const FieldType& output_field() const;
  const FieldType& field_after(int layer) const { return layers_[layer].out; }

  void init(std::uint64_t seed);
  long num_parameters() const;
  /// Parameters of layer i live in [offset(i), offset(i) + count(i)).
  long parameter_offset(int layer) const { return layers_[layer].param_offset; }
  long parameter_count(int layer) const;
  Eigen::VectorXd parameters() const;
  void set_parameters(const Eigen::VectorXd& p);

  const NormState& norm_state(int layer) const { return layers_[layer].norm; }
  void commit_stats(const Tape& tape);

  /// Replaces the sampled kernel of a conv layer by an arbitrary tensor
  /// (used to demonstrate that unconstrained kernels break equivariance).
  void override_kernel(int layer, KernelTensor kernel);

  SparseTensor forward(const SparseTensor& in, NormMode mode, Tape* tape = nullptr) const;
  NetworkGradients backward(const Tape& tape, const FeatureMatrix& grad_out) const;
  /// `grad_at[i]` (empty to skip) is added to the gradient of layer i's output.
  NetworkGradients backward(const Tape& tape, const std::vector<FeatureMatrix>& grad_at) const;

 private:
  struct Layer {
    FieldType in, out;
    SteerableKernel kernel;
    std::optional<KernelTensor> kernel_override;
    GateParams gates;
    NormState norm;
    long param_offset = 0;
  };

  void touch() { ++generation_; }

  NetworkConfig config_;
  std::vector<Layer> layers_;
  std::uint64_t generation_ = 0;
};

}  // namespace ssconv
