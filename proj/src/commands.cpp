#include "ssconv/commands.hpp"

#include "ssconv/error.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace ssconv::cli {

namespace {

// Plain alternating submanifold/general stack without pooling.
constexpr const char* kDefaultCheckConfig = R"(input field=[0x2,1x1]
conv in=[0x2,1x1] out=[0x4,1x2] size=3 mode=submanifold
norm
act
conv in=[0x4,1x2] out=[0x4,1x2] size=3 mode=general
norm
act
conv in=[0x4,1x2] out=[0x2,1x1,2x1] size=3 mode=submanifold
)";

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return mix(mix(mix(seed) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

template <class T>
void kv(std::ostream& out, const std::string& key, const T& value) {
  if constexpr (std::is_floating_point_v<T>) {
    out << key << '=' << fmt(value) << '\n';
  } else {
    out << key << '=' << value << '\n';
  }
}

SparseTensor random_input(const FieldType& ft, int grid, double occupancy, std::mt19937_64& rng) {
  GridFrame frame;
  frame.origin = Vec3::Constant(-(grid - 1) / 2.0);
  frame.extent = {grid, grid, grid};
  std::uniform_real_distribution<double> u01;
  std::normal_distribution<double> n01;
  std::vector<Coord> sites;
  for (int z = 0; z < grid; ++z)
    for (int y = 0; y < grid; ++y)
      for (int x = 0; x < grid; ++x)
        if (u01(rng) < occupancy) sites.push_back({x, y, z});
  FeatureMatrix f(static_cast<Eigen::Index>(sites.size()), ft.dim());
  for (Eigen::Index i = 0; i < f.rows(); ++i)
    for (Eigen::Index j = 0; j < f.cols(); ++j) f(i, j) = n01(rng);
  return SparseTensor(ft, std::move(sites), std::move(f), frame);
}

// Frobenius error over the sites both tensors share, relative to b.
double shared_site_error(const SparseTensor& a, const SparseTensor& b) {
  double num = 0, den = 0;
  for (int r = 0; r < b.num_sites(); ++r) {
    const int ra = a.sites().find(b.sites()[r]);
    if (ra < 0) continue;
    num += (a.features().row(ra) - b.features().row(r)).squaredNorm();
    den += b.features().row(r).squaredNorm();
  }
  return den > 0 ? std::sqrt(num / den) : 0.0;
}

int positive(const std::optional<int>& v, int fallback, const char* name) {
  const int x = v.value_or(fallback);
  if (x < 1) throw UsageError(std::string("--") + name + " must be positive");
  return x;
}

}  // namespace

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::kIo:
    case ErrorCode::kFormat:
      return kExitIo;
    case ErrorCode::kDivergence:
      return kExitTolerance;
    default:
      return kExitUsage;
  }
}

NetworkConfig load_network_config(const std::string& path) {
  try {
    return NetworkConfig::load(path);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kIo) throw;
    throw UsageError(path + ": " + e.what());
  }
}

TrainConfig load_train_config(const std::string& path) {
  try {
    return TrainConfig::load(path);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kIo) throw;
    throw UsageError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

double relative_tensor_error(const SparseTensor& a, const SparseTensor& b) {
  if (a.sites().coords() != b.sites().coords()) return std::numeric_limits<double>::infinity();
  if (a.num_sites() == 0) return 0.0;
  const double scale = b.features().cwiseAbs().maxCoeff();
  const double diff = (a.features() - b.features()).cwiseAbs().maxCoeff();
  if (scale == 0) return diff == 0 ? 0.0 : std::numeric_limits<double>::infinity();
  return diff / scale;
}

EquivarianceReport check_equivariance(const NetworkConfig& config, std::uint64_t seed, int grid,
                                      double occupancy, int inputs, int continuous_rotations,
                                      bool break_kernel) {
  Network net(config);
  net.init(sub_seed(seed, 1));
  if (break_kernel) {
    std::mt19937_64 rng(sub_seed(seed, 2));
    std::normal_distribution<double> n01;
    for (int i = 0; i < net.num_layers(); ++i) {
      if (net.spec(i).kind != LayerKind::kConv) continue;
      const ConvSpec& c = net.spec(i).conv;
      KernelTensor k(static_cast<std::size_t>(c.size * c.size * c.size));
      for (auto& m : k) {
        m.resize(c.field_out.dim(), c.field_in.dim());
        for (Eigen::Index r = 0; r < m.rows(); ++r)
          for (Eigen::Index q = 0; q < m.cols(); ++q) m(r, q) = n01(rng);
      }
      net.override_kernel(i, std::move(k));
      break;
    }
  }
  EquivarianceReport rep;
  rep.inputs = inputs;
  for (int n = 0; n < inputs; ++n) {
    std::mt19937_64 rng(sub_seed(seed, 3, n));
    const SparseTensor x = random_input(net.input_field(), grid, occupancy, rng);
    rep.sites += x.num_sites();
    const SparseTensor y = net.forward(x, NormMode::kBatch);
    for (const Rotation& r : octahedral_group()) {
      const RigidMotion g{r, Vec3::Zero()};
      const SparseTensor moved = net.forward(rotate_lattice(x, g).output, NormMode::kBatch);
      rep.octahedral_max = std::max(rep.octahedral_max, relative_tensor_error(moved, rotate_lattice(y, g).output));
    }
    for (int c = 0; c < continuous_rotations; ++c) {
      const RigidMotion g{random_rotation(rng), Vec3::Zero()};
      const SparseTensor moved = net.forward(rotate_lattice(x, g).output, NormMode::kBatch);
      rep.continuous.push_back(shared_site_error(moved, rotate_lattice(y, g).output));
    }
  }
  return rep;
}

int cmd_check_equivariance(const Options& opt, std::ostream& out) {
  const NetworkConfig cfg = opt.config.empty() ? NetworkConfig::parse_string(kDefaultCheckConfig)
                                               : load_network_config(opt.config);
  const double tol = opt.tolerance.value_or(1e-7);
  const double occupancy = opt.occupancy.value_or(0.1);
  if (occupancy < 0 || occupancy > 1) throw UsageError("--occupancy must lie in [0, 1]");
  const int grid = positive(opt.grid, 16, "grid");
  const int inputs = positive(opt.batch, 20, "batch");
  const int continuous = positive(opt.repeats, 4, "repeats");
  const EquivarianceReport rep =
      check_equivariance(cfg, opt.seed.value_or(1), grid, occupancy, inputs, continuous, opt.debug_break_kernel);
  const bool pass = rep.octahedral_max <= tol;
  kv(out, "command", "check-equivariance");
  kv(out, "inputs", rep.inputs);
  kv(out, "grid", grid);
  kv(out, "occupancy", occupancy);
  kv(out, "input_sites", rep.sites);
  kv(out, "broken_kernel", opt.debug_break_kernel ? 1 : 0);
  kv(out, "octahedral_rotations", octahedral_group().size());
  kv(out, "octahedral_max_rel_error", rep.octahedral_max);
  if (!rep.continuous.empty()) {
    std::vector<double> c = rep.continuous;
    std::sort(c.begin(), c.end());
    kv(out, "continuous_rotations", c.size());
    kv(out, "continuous_min_rel_error", c.front());
    kv(out, "continuous_median_rel_error", c[c.size() / 2]);
    kv(out, "continuous_mean_rel_error", std::accumulate(c.begin(), c.end(), 0.0) / static_cast<double>(c.size()));
    kv(out, "continuous_max_rel_error", c.back());
  }
  kv(out, "tolerance", tol);
  kv(out, "status", pass ? "pass" : "fail");
  return pass ? kExitOk : kExitTolerance;
}

// ---------------------------------------------------------------------------

BenchReport bench(const ConvSpec& conv, const RadialProfile& profile, std::uint64_t seed, int grid,
                  double occupancy, int batch, int repeats) {
  ConvSpec spec = conv;
  spec.mode = ConvMode::kGeneral;
  SteerableKernel kern(spec.field_in, spec.field_out, spec.size, profile);
  kern.init_weights(sub_seed(seed, 1));
  const KernelTensor kernel = kern.materialize();

  BenchReport rep;
  rep.grid = grid;
  rep.occupancy = occupancy;
  rep.batch = batch;
  rep.repeats = repeats;
  rep.k_in = spec.field_in.dim();
  rep.k_out = spec.field_out.dim();
  std::vector<SparseTensor> inputs;
  for (int b = 0; b < batch; ++b) {
    std::mt19937_64 rng(sub_seed(seed, 2, b));
    inputs.push_back(random_input(spec.field_in, grid, occupancy, rng));
    if (inputs.back().num_sites() == 0) {
      // Keep at least one site so the sparse path has work to do.
      FeatureMatrix f = FeatureMatrix::Ones(1, rep.k_in);
      inputs.back() = SparseTensor(spec.field_in, std::vector<Coord>{{0, 0, 0}}, f, inputs.back().frame());
    }
  }

  using clock = std::chrono::steady_clock;
  const Extent dims{grid, grid, grid};
  std::vector<ConvOutput> sparse(batch);
  std::vector<DenseGrid> dense(batch);
  rep.sparse_seconds = rep.dense_seconds = std::numeric_limits<double>::infinity();
  for (int r = 0; r < repeats; ++r) {
    auto t0 = clock::now();
    for (int b = 0; b < batch; ++b) sparse[b] = conv_forward_with_rules(inputs[b], kernel, spec);
    auto t1 = clock::now();
    for (int b = 0; b < batch; ++b) dense[b] = dense_conv_reference(to_dense(inputs[b], dims), kernel, spec.size);
    auto t2 = clock::now();
    rep.sparse_seconds = std::min(rep.sparse_seconds, std::chrono::duration<double>(t1 - t0).count());
    rep.dense_seconds = std::min(rep.dense_seconds, std::chrono::duration<double>(t2 - t1).count());
  }

  const int h = (spec.size - 1) / 2;
  for (int b = 0; b < batch; ++b) {
    const SiteTable& in = inputs[b].sites();
    const SparseTensor& y = sparse[b].output;
    rep.input_sites += in.size();
    rep.output_sites += y.num_sites();
    rep.rule_pairs += sparse[b].rules.total_pairs();
    for (int o = 0; o < y.num_sites(); ++o) {
      const Coord& c = y.sites()[o];
      long neighbors = 0;
      for (int dz = -h; dz <= h; ++dz)
        for (int dy = -h; dy <= h; ++dy)
          for (int dx = -h; dx <= h; ++dx) neighbors += in.contains(c + Coord{dx, dy, dz}) ? 1 : 0;
      rep.counted_macs += neighbors * rep.k_in * rep.k_out;
      if (dense[b].inside(c)) {
        for (int ch = 0; ch < rep.k_out; ++ch) {
          rep.max_deviation =
              std::max(rep.max_deviation, std::abs(dense[b].at(c.x, c.y, c.z, ch) - y.features()(o, ch)));
        }
      }
    }
  }
  const double volume = static_cast<double>(grid) * grid * grid;
  rep.dense_macs = static_cast<long>(volume) * spec.size * spec.size * spec.size * rep.k_in * rep.k_out * batch;
  // Features in and out plus rule pairs (two ints each) for the sparse path;
  // both full volumes for the dense one.
  rep.sparse_bytes = 8.0 * (static_cast<double>(rep.input_sites) * rep.k_in +
                            static_cast<double>(rep.output_sites) * rep.k_out) +
                     8.0 * static_cast<double>(rep.rule_pairs);
  rep.dense_bytes = 8.0 * volume * (rep.k_in + rep.k_out) * batch;
  return rep;
}

int cmd_bench(const Options& opt, std::ostream& out) {
  ConvSpec conv{FieldType::parse("[0x4,1x2]"), FieldType::parse("[0x4,1x2]"), 3, ConvMode::kGeneral};
  RadialProfile profile;
  if (!opt.config.empty()) {
    const NetworkConfig cfg = load_network_config(opt.config);
    const auto it = std::find_if(cfg.layers.begin(), cfg.layers.end(),
                                 [](const LayerSpec& s) { return s.kind == LayerKind::kConv; });
    if (it == cfg.layers.end()) throw UsageError(opt.config + ": no conv layer to benchmark");
    conv = it->conv;
    profile = it->profile;
  }
  const double occupancy = opt.occupancy.value_or(0.05);
  if (!(occupancy > 0 && occupancy <= 1)) throw UsageError("--occupancy must lie in (0, 1]");
  const double tol = opt.tolerance.value_or(1e-9);
  const BenchReport rep = bench(conv, profile, opt.seed.value_or(1), positive(opt.grid, 64, "grid"), occupancy,
                                positive(opt.batch, 1, "batch"), positive(opt.repeats, 3, "repeats"));
  const bool pass = rep.accounting_holds() && rep.max_deviation <= tol;
  kv(out, "command", "bench");
  kv(out, "grid", rep.grid);
  kv(out, "occupancy", rep.occupancy);
  kv(out, "batch", rep.batch);
  kv(out, "repeats", rep.repeats);
  kv(out, "k_in", rep.k_in);
  kv(out, "k_out", rep.k_out);
  kv(out, "input_sites", rep.input_sites);
  kv(out, "output_sites", rep.output_sites);
  kv(out, "rule_pairs", rep.rule_pairs);
  kv(out, "sparse_macs", rep.counted_macs);
  kv(out, "sparse_macs_per_pair", rep.rule_pairs > 0 ? rep.counted_macs / rep.rule_pairs : 0);
  kv(out, "dense_macs", rep.dense_macs);
  kv(out, "accounting", rep.accounting_holds() ? "ok" : "mismatch");
  kv(out, "max_deviation", rep.max_deviation);
  kv(out, "sparse_peak_bytes", rep.sparse_bytes);
  kv(out, "dense_peak_bytes", rep.dense_bytes);
  kv(out, "sparse_seconds", rep.sparse_seconds);
  kv(out, "dense_seconds", rep.dense_seconds);
  kv(out, "speedup", rep.speedup());
  kv(out, "status", pass ? "pass" : "fail");
  return pass ? kExitOk : kExitTolerance;
}

// ---------------------------------------------------------------------------

KernelDumpSpec parse_kernel_dump_spec(const std::vector<std::string>& tokens) {
  KernelDumpSpec spec;
  std::map<std::string, std::string> keys;
  for (const auto& tok : tokens) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("expected key=value, got '" + tok + "'");
    if (!keys.emplace(tok.substr(0, eq), tok.substr(eq + 1)).second) {
      throw UsageError("duplicate key '" + tok.substr(0, eq) + "'");
    }
  }
  auto take_int = [&](const char* key, int& dst) {
    const auto it = keys.find(key);
    if (it == keys.end()) return;
    std::size_t used = 0;
    try {
      dst = std::stoi(it->second, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used == 0 || used != it->second.size()) throw UsageError(std::string("bad integer for ") + key);
    keys.erase(it);
  };
  take_int("k", spec.k);
  take_int("l", spec.l);
  take_int("size", spec.size);
  // The profile keys share the layer-config syntax.
  std::string profile_line = "act";
  for (const char* key : {"centers", "eps"}) {
    if (auto it = keys.find(key); it != keys.end()) {
      profile_line += std::string(" ") + key + "=" + it->second;
      keys.erase(it);
    }
  }
  if (!keys.empty()) throw UsageError("unknown key '" + keys.begin()->first + "'");
  try {
    spec.profile = parse_layer_spec(profile_line).profile;
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  if (spec.k < 0 || spec.l < 0 || spec.k > kDefaultMaxOrder || spec.l > kDefaultMaxOrder) {
    throw UsageError("orders must lie in [0, " + std::to_string(kDefaultMaxOrder) + "]");
  }
  if (spec.size < 1 || spec.size % 2 == 0) throw UsageError("size must be odd");
  return spec;
}

std::vector<std::string> kernel_dump(const KernelDumpSpec& spec, const std::string& dir) {
  const auto basis = build_basis(spec.k, spec.l, spec.size, spec.profile);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCode::kIo, "cannot create " + dir + ": " + ec.message());
  const std::vector<Coord> offsets = kernel_offsets(spec.size);
  std::vector<std::string> paths;
  for (int f = 0; f < basis->num_functions(); ++f) {
    const int J = basis->function_j(f), m = basis->function_m(f);
    for (int o = 0; o < basis->num_offsets(); ++o) {
      const std::string path = (std::filesystem::path(dir) / ("kernel_J" + std::to_string(J) + "_m" +
                                                              std::to_string(m) + "_o" + std::to_string(o) +
                                                              ".csv")).string();
      std::ofstream file(path);
      if (!file) fail(ErrorCode::kIo, "cannot open " + path + " for writing");
      const Coord& s = offsets[o];
      file << "# k=" << spec.k << " l=" << spec.l << " J=" << J << " m=" << m
           << " center=" << std::setprecision(17) << spec.profile.centers[m] << " eps=" << spec.profile.epsilon
           << " size=" << spec.size << " offset=" << s.x << ',' << s.y << ',' << s.z << " index=" << o << '\n';
      file << "# rows: output components -k..k; columns: input components -l..l; real harmonics without"
              " Condon-Shortley phase; offset index ((dz+h)*s+(dy+h))*s+(dx+h)\n";
      const Eigen::MatrixXd& v = basis->at(f, o);
      for (Eigen::Index r = 0; r < v.rows(); ++r) {
        for (Eigen::Index c = 0; c < v.cols(); ++c) file << (c ? "," : "") << v(r, c);
        file << '\n';
      }
      if (!file) fail(ErrorCode::kIo, "write failed: " + path);
      paths.push_back(path);
    }
  }
  return paths;
}

KernelBlock read_kernel_block(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path);
  KernelBlock block;
  std::string line;
  if (!std::getline(in, line) || line.rfind("# ", 0) != 0) fail(ErrorCode::kFormat, path + ": missing header");
  std::istringstream header(line.substr(2));
  std::map<std::string, std::string> keys;
  for (std::string tok; header >> tok;) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) fail(ErrorCode::kFormat, path + ": bad header token '" + tok + "'");
    keys[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  try {
    block.k = std::stoi(keys.at("k"));
    block.l = std::stoi(keys.at("l"));
    block.J = std::stoi(keys.at("J"));
    block.m = std::stoi(keys.at("m"));
    block.center = std::stod(keys.at("center"));
    block.epsilon = std::stod(keys.at("eps"));
    block.offset_index = std::stoi(keys.at("index"));
    char c1 = 0, c2 = 0;
    std::istringstream off(keys.at("offset"));
    if (!(off >> block.offset.x >> c1 >> block.offset.y >> c2 >> block.offset.z) || c1 != ',' || c2 != ',') {
      throw std::invalid_argument("offset");
    }
  } catch (const std::exception&) {
    fail(ErrorCode::kFormat, path + ": incomplete header");
  }
  std::vector<std::vector<double>> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> row;
    std::istringstream cells(line);
    for (std::string cell; std::getline(cells, cell, ',');) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::logic_error&) {
        fail(ErrorCode::kFormat, path + ": line " + std::to_string(lineno) + ": bad number");
      }
    }
    rows.push_back(std::move(row));
  }
  const auto nr = static_cast<Eigen::Index>(2 * block.k + 1), nc = static_cast<Eigen::Index>(2 * block.l + 1);
  if (static_cast<Eigen::Index>(rows.size()) != nr) fail(ErrorCode::kFormat, path + ": wrong row count");
  block.values.resize(nr, nc);
  for (Eigen::Index r = 0; r < nr; ++r) {
    if (static_cast<Eigen::Index>(rows[r].size()) != nc) fail(ErrorCode::kFormat, path + ": wrong column count");
    for (Eigen::Index c = 0; c < nc; ++c) block.values(r, c) = rows[r][c];
  }
  return block;
}

int cmd_kernel_dump(const Options& opt, std::ostream& out) {
  if (opt.out.empty()) throw UsageError("kernel-dump needs --out <directory>");
  const KernelDumpSpec spec = parse_kernel_dump_spec(opt.args);
  const auto paths = kernel_dump(spec, opt.out);
  // Round-trip every block through the parser.
  const auto basis = build_basis(spec.k, spec.l, spec.size, spec.profile);
  double worst = 0;
  std::size_t i = 0;
  for (int f = 0; f < basis->num_functions(); ++f)
    for (int o = 0; o < basis->num_offsets(); ++o, ++i) {
      worst = std::max(worst, (read_kernel_block(paths[i]).values - basis->at(f, o)).cwiseAbs().maxCoeff());
    }
  kv(out, "command", "kernel-dump");
  kv(out, "k", spec.k);
  kv(out, "l", spec.l);
  kv(out, "size", spec.size);
  kv(out, "centers", spec.profile.size());
  kv(out, "orders_J", basis->num_j());
  kv(out, "files", paths.size());
  kv(out, "roundtrip_max_error", worst);
  kv(out, "directory", opt.out);
  return worst == 0 ? kExitOk : kExitTolerance;
}

// ---------------------------------------------------------------------------

int cmd_train(const Options& opt, std::ostream& out) {
  if (opt.config.empty()) throw UsageError("train needs --config <train.cfg>");
  if (opt.checkpoint.empty()) throw UsageError("train needs --checkpoint <output path>");
  TrainConfig cfg = load_train_config(opt.config);
  if (opt.seed) cfg.seed = *opt.seed;
  const NetworkConfig net = load_network_config(cfg.layers);
  TrainReport report;
  const PoseModel model = train(net, cfg, &report);
  save_checkpoint(opt.checkpoint, model);
  if (!opt.out.empty()) {
    std::ofstream csv(opt.out);
    if (!csv) fail(ErrorCode::kIo, "cannot open " + opt.out + " for writing");
    csv << "iter,loss\n" << std::setprecision(17);
    for (std::size_t i = 0; i < report.losses.size(); ++i) csv << i << ',' << report.losses[i] << '\n';
    if (!csv) fail(ErrorCode::kIo, "write failed: " + opt.out);
  }
  kv(out, "command", "train");
  kv(out, "seed", cfg.seed);
  kv(out, "iters", cfg.iters);
  kv(out, "parameters", model.num_parameters());
  if (!report.losses.empty()) {
    kv(out, "first_loss", report.losses.front());
    kv(out, "last_loss", report.losses.back());
  }
  kv(out, "checkpoint", opt.checkpoint);
  return kExitOk;
}

int cmd_eval(const Options& opt, std::ostream& out) {
  if (opt.config.empty()) throw UsageError("eval needs --config <train.cfg>");
  if (opt.checkpoint.empty()) throw UsageError("eval needs --checkpoint <path>");
  const TrainConfig cfg = load_train_config(opt.config);
  const NetworkConfig net = load_network_config(cfg.layers);
  const PoseModel model = load_checkpoint(opt.checkpoint);
  const TrainConfig& mc = model.config();
  if (model.backbone().config().to_string() != net.to_string() || mc.grid != cfg.grid || mc.shape != cfg.shape ||
      mc.hidden != cfg.hidden) {
    throw UsageError("checkpoint " + opt.checkpoint + " was trained with a different architecture than " +
                     opt.config);
  }
  const int refine = opt.refine_iters.value_or(cfg.refine_iters);
  if (refine < 0) throw UsageError("--refine-iters must be >= 0");
  const std::uint64_t seed = opt.seed.value_or(cfg.eval_seed);
  const int scenes = opt.batch.value_or(cfg.eval_scenes);
  if (scenes < 1) throw UsageError("--batch (scene count) must be positive");
  const Metrics m = evaluate(model, scenes, seed, refine);
  const Metrics base = evaluate_identity_baseline(cfg, scenes, seed);
  kv(out, "command", "eval");
  kv(out, "scenes", m.scenes);
  kv(out, "seed", seed);
  kv(out, "refine_iters", refine);
  kv(out, "rotation_error_deg", m.rotation_error_deg);
  kv(out, "translation_error", m.translation_error);
  kv(out, "translation_error_rel", m.translation_error / m.diameter);
  kv(out, "add_accuracy", m.add_accuracy);
  kv(out, "diameter", m.diameter);
  kv(out, "baseline_rotation_error_deg", base.rotation_error_deg);
  kv(out, "baseline_translation_error", base.translation_error);
  if (!opt.out.empty()) {
    std::ofstream csv(opt.out);
    if (!csv) fail(ErrorCode::kIo, "cannot open " + opt.out + " for writing");
    csv << "refine_iters,scenes,rotation_error_deg,translation_error,translation_error_rel,add_accuracy\n"
        << std::setprecision(17) << refine << ',' << m.scenes << ',' << m.rotation_error_deg << ','
        << m.translation_error << ',' << m.translation_error / m.diameter << ',' << m.add_accuracy << '\n';
    if (!csv) fail(ErrorCode::kIo, "write failed: " + opt.out);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

int cmd_convert(const Options& opt, std::ostream& out) {
  if (opt.args.size() != 2) throw UsageError("convert needs <input> <output>");
  const std::string& src = opt.args[0];
  const std::string& dst = opt.args[1];
  std::ifstream probe(src, std::ios::binary);
  if (!probe) fail(ErrorCode::kIo, "cannot open " + src);
  char magic[4] = {};
  probe.read(magic, 4);
  const bool is_sstf = probe.gcount() == 4 && std::string(magic, 4) == "SSTF";
  probe.close();
  kv(out, "command", "convert");
  if (is_sstf) {
    // Site centers in world coordinates, features as attributes.
    const SparseTensor t = read_sstf(src);
    PointCloud pc;
    pc.points.resize(t.num_sites(), 3);
    for (int r = 0; r < t.num_sites(); ++r) pc.points.row(r) = t.frame().world(t.sites()[r]).transpose();
    pc.attributes = t.features();
    std::ofstream file(dst);
    if (!file) fail(ErrorCode::kIo, "cannot open " + dst + " for writing");
    write_point_cloud(file, pc);
    if (!file) fail(ErrorCode::kIo, "write failed: " + dst);
    kv(out, "direction", "sstf-to-points");
    kv(out, "sites", t.num_sites());
    kv(out, "channels", t.field_type().dim());
  } else {
    const int grid = opt.grid.value_or(32);
    if (grid < 2) throw UsageError("--grid must be >= 2");
    const PointCloud pc = read_point_cloud_file(src);
    const SparseTensor t = voxelize(pc, grid, true);
    write_sstf(dst, t);
    kv(out, "direction", "points-to-sstf");
    kv(out, "points", pc.size());
    kv(out, "grid", grid);
    kv(out, "sites", t.num_sites());
    kv(out, "channels", t.field_type().dim());
  }
  kv(out, "output", dst);
  return kExitOk;
}

// ---------------------------------------------------------------------------

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse steerable convolution toolkit"};
  app.require_subcommand(1);
  Options opt;
  std::uint64_t seed = 1;
  double tolerance = 0, occupancy = 0;
  int grid = 0, batch = 0, repeats = 0, refine = 0;

  struct Flags {
    CLI::Option *seed = nullptr, *tolerance = nullptr, *occupancy = nullptr, *grid = nullptr, *batch = nullptr,
                *repeats = nullptr, *refine = nullptr;
  };
  std::map<CLI::App*, Flags> flags;
  auto common = [&](CLI::App* sub) {
    Flags& f = flags[sub];
    sub->add_option("--config", opt.config, "configuration file");
    f.seed = sub->add_option("--seed", seed, "random seed");
    return &f;
  };

  auto* check = app.add_subcommand("check-equivariance", "octahedral and continuous equivariance of a random network");
  {
    Flags* f = common(check);
    f->tolerance = check->add_option("--tolerance", tolerance, "max octahedral relative error (default 1e-7)");
    f->occupancy = check->add_option("--occupancy", occupancy, "input occupancy (default 0.1)");
    f->grid = check->add_option("--grid", grid, "input grid extent (default 16)");
    f->batch = check->add_option("--batch", batch, "random inputs (default 20)");
    f->repeats = check->add_option("--repeats", repeats, "continuous rotations per input (default 4)");
    check->add_flag("--debug-break-kernel", opt.debug_break_kernel, "inject a non-steerable kernel");
  }
  auto* bench_cmd = app.add_subcommand("bench", "sparse conv versus the dense reference");
  {
    Flags* f = common(bench_cmd);
    f->tolerance = bench_cmd->add_option("--tolerance", tolerance, "max sparse/dense deviation (default 1e-9)");
    f->occupancy = bench_cmd->add_option("--occupancy", occupancy, "input occupancy (default 0.05)");
    f->grid = bench_cmd->add_option("--grid", grid, "grid extent (default 64)");
    f->batch = bench_cmd->add_option("--batch", batch, "inputs per timing (default 1)");
    f->repeats = bench_cmd->add_option("--repeats", repeats, "timing repeats, best kept (default 3)");
  }
  auto* dump = app.add_subcommand("kernel-dump", "write sampled basis kernels as CSV");
  dump->add_option("spec", opt.args, "k=.. l=.. size=.. centers=.. eps=..");
  dump->add_option("--out", opt.out, "output directory")->required();
  auto* train_cmd = app.add_subcommand("train", "train the toy pose model");
  common(train_cmd);
  train_cmd->add_option("--checkpoint", opt.checkpoint, "checkpoint to write");
  train_cmd->add_option("--out", opt.out, "optional loss CSV");
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on held-out scenes");
  {
    Flags* f = common(eval_cmd);
    eval_cmd->add_option("--checkpoint", opt.checkpoint, "checkpoint to read");
    f->refine = eval_cmd->add_option("--refine-iters", refine, "steering rounds (default from config)");
    f->batch = eval_cmd->add_option("--batch", batch, "scene count (default from config)");
    eval_cmd->add_option("--out", opt.out, "optional metrics CSV");
  }
  auto* convert_cmd = app.add_subcommand("convert", "ASCII point cloud <-> SSTF voxelization");
  {
    Flags& f = flags[convert_cmd];
    convert_cmd->add_option("paths", opt.args, "<input> <output>");
    f.grid = convert_cmd->add_option("--grid", grid, "voxel resolution (default 32)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  const Flags& f = flags[sub];
  if (f.seed && f.seed->count()) opt.seed = seed;
  if (f.tolerance && f.tolerance->count()) opt.tolerance = tolerance;
  if (f.occupancy && f.occupancy->count()) opt.occupancy = occupancy;
  if (f.grid && f.grid->count()) opt.grid = grid;
  if (f.batch && f.batch->count()) opt.batch = batch;
  if (f.repeats && f.repeats->count()) opt.repeats = repeats;
  if (f.refine && f.refine->count()) opt.refine_iters = refine;

  try {
    if (sub == check) return cmd_check_equivariance(opt, out);
    if (sub == bench_cmd) return cmd_bench(opt, out);
    if (sub == dump) return cmd_kernel_dump(opt, out);
    if (sub == train_cmd) return cmd_train(opt, out);
    if (sub == eval_cmd) return cmd_eval(opt, out);
    return cmd_convert(opt, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}

}  // namespace ssconv::cli
