#pragma once

#include "ssconv/error.hpp"
#include "ssconv/pipeline.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssconv::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitTolerance = 1,
  kExitUsage = 2,
  kExitIo = 3,
};

/// Bad flags, unparsable configs, checkpoint/config disagreement.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Maps a library failure onto an exit status: unreadable or malformed data
/// files are I/O failures, everything else is a usage problem.
int exit_code_for(const Error& e);

/// Shared flag values. Optional fields fall back to per-command defaults.
struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> tolerance;
  std::optional<double> occupancy;
  std::optional<int> grid;
  std::optional<int> batch;
  std::optional<int> repeats;
  std::string out;
  std::optional<int> refine_iters;
  std::string checkpoint;
  bool debug_break_kernel = false;
  std::vector<std::string> args;  // positional arguments
};

/// Loads a config and reports parse problems as UsageError (a missing file
/// stays an I/O error).
NetworkConfig load_network_config(const std::string& path);
TrainConfig load_train_config(const std::string& path);

// ---------------------------------------------------------------------------
// Equivariance check

struct EquivarianceReport {
  int inputs = 0;
  long sites = 0;                 // active input sites over all inputs
  double octahedral_max = 0;      // max relative error over the 24 rotations
  std::vector<double> continuous; // one relative error per random rotation
};

/// Random network (weights from `seed`) and random inputs on a grid^3
/// lattice centered at the world origin. Octahedral rotations permute the
/// lattice exactly; continuous rotations go through rotate_lattice and are
/// expected to show discretization error.
EquivarianceReport check_equivariance(const NetworkConfig& config, std::uint64_t seed, int grid,
                                      double occupancy, int inputs, int continuous_rotations,
                                      bool break_kernel);

/// Relative error max|a - b| / max|b| between tensors on the same sites;
/// infinity when the site sets differ, zero for two empty tensors.
double relative_tensor_error(const SparseTensor& a, const SparseTensor& b);

// ---------------------------------------------------------------------------
// Benchmark

struct BenchReport {
  int grid = 0;
  double occupancy = 0;
  int batch = 0;
  int repeats = 0;
  long input_sites = 0;
  long output_sites = 0;
  long rule_pairs = 0;       // sum over offsets of |R_s|
  long counted_macs = 0;     // from a direct neighbor count
  long dense_macs = 0;
  int k_in = 0, k_out = 0;
  double sparse_seconds = 0; // best of repeats, whole batch
  double dense_seconds = 0;
  double sparse_bytes = 0;   // peak working-set estimates
  double dense_bytes = 0;
  double max_deviation = 0;  // sparse vs dense on the output sites

  double speedup() const { return sparse_seconds > 0 ? dense_seconds / sparse_seconds : 0; }
  bool accounting_holds() const { return counted_macs == rule_pairs * k_in * k_out; }
};

/// General-mode conv from the first conv layer of `config`.
BenchReport bench(const ConvSpec& conv, const RadialProfile& profile, std::uint64_t seed, int grid,
                  double occupancy, int batch, int repeats);

// ---------------------------------------------------------------------------
// Kernel dump

struct KernelDumpSpec {
  int k = 0;
  int l = 0;
  int size = 3;
  RadialProfile profile;
};

/// "k=1 l=2 size=3 centers=0,1 eps=0.6" style tokens.
KernelDumpSpec parse_kernel_dump_spec(const std::vector<std::string>& tokens);

/// One CSV per (J, m, offset): kernel_J{J}_m{m}_o{index}.csv. Returns the
/// paths written, in (J, m, offset) order.
std::vector<std::string> kernel_dump(const KernelDumpSpec& spec, const std::string& dir);

struct KernelBlock {
  int k = 0, l = 0, J = 0, m = 0, offset_index = 0;
  Coord offset;
  double center = 0, epsilon = 0;
  Eigen::MatrixXd values;
};

KernelBlock read_kernel_block(const std::string& path);

// ---------------------------------------------------------------------------
// Subcommands. Each writes key=value lines to `out` and returns an exit code;
// library errors propagate as exceptions.

int cmd_check_equivariance(const Options& opt, std::ostream& out);
int cmd_bench(const Options& opt, std::ostream& out);
int cmd_kernel_dump(const Options& opt, std::ostream& out);
int cmd_train(const Options& opt, std::ostream& out);
int cmd_eval(const Options& opt, std::ostream& out);
int cmd_convert(const Options& opt, std::ostream& out);

/// Full command line: parses flags, dispatches, maps failures to exit codes
/// and prints diagnostics to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ssconv::cli
