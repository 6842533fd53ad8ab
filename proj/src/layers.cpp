#include "ssconv/layers.hpp"

#include "ssconv/error.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace ssconv {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void check_field(const SparseTensor& t, const FieldType& ft, const char* what) {
  if (t.field_type() != ft) {
    fail(ErrorCode::kFieldMismatch, std::string(what) + ": tensor field " +
                                        t.field_type().to_string() + " expected " +
                                        ft.to_string());
  }
}

}  // namespace

// ---------------------------------------------------------------------------

NormState::NormState(FieldType ft)
    : field(std::move(ft)),
      running_mean(Eigen::VectorXd::Zero(field.size())),
      running_var(Eigen::VectorXd::Ones(field.size())) {}

SparseTensor equivariant_norm(const SparseTensor& t, const NormState& state, bool batch_stats,
                              NormCache* cache) {
  check_field(t, state.field, "norm");
  const FieldType& ft = state.field;
  const int n = t.num_sites();
  const FeatureMatrix& x = t.features();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(ft.size());
  Eigen::VectorXd second(ft.size());
  Eigen::VectorXd scale(ft.size());
  FeatureMatrix y(n, ft.dim());
  for (int i = 0; i < ft.size(); ++i) {
    const int c0 = ft.offset(i), w = ft.width(i);
    const auto block = x.middleCols(c0, w);
    if (!batch_stats) {
      mean(i) = ft.order(i) == 0 ? state.running_mean(i) : 0.0;
      second(i) = state.running_var(i);
    } else if (n > 0) {
      if (ft.order(i) == 0) {
        mean(i) = block.col(0).mean();
        second(i) = (block.col(0).array() - mean(i)).square().mean();
      } else {
        second(i) = block.squaredNorm() / n;
      }
    } else {
      second(i) = 0.0;
    }
    scale(i) = std::sqrt(second(i) + state.epsilon);
    if (ft.order(i) == 0) {
      y.col(c0) = (block.col(0).array() - mean(i)) / scale(i);
    } else {
      y.middleCols(c0, w) = block / scale(i);
    }
  }
  if (cache) {
    cache->batch_stats = batch_stats;
    cache->num_sites = n;
    cache->mean = mean;
    cache->second = second;
    cache->scale = scale;
    cache->input = x;
    cache->output = y;
  }
  return t.with_features(std::move(y));
}

FeatureMatrix equivariant_norm_backward(const FieldType& ft, const NormCache& cache,
                                        const FeatureMatrix& grad_out) {
  const int n = cache.num_sites;
  FeatureMatrix dx(n, ft.dim());
  if (n == 0) return dx;
  for (int i = 0; i < ft.size(); ++i) {
    const int c0 = ft.offset(i), w = ft.width(i);
    const double s = cache.scale(i);
    const auto g = grad_out.middleCols(c0, w);
    if (!cache.batch_stats) {
      dx.middleCols(c0, w) = g / s;
    } else if (ft.order(i) == 0) {
      const auto yhat = cache.output.col(c0).array();
      const double gm = g.col(0).mean();
      const double gy = (g.col(0).array() * yhat).mean();
      dx.col(c0) = (g.col(0).array() - gm - yhat * gy) / s;
    } else {
      const auto f = cache.input.middleCols(c0, w);
      const double gf = g.cwiseProduct(f).sum();
      dx.middleCols(c0, w) = g / s - f * (gf / (n * s * s * s));
    }
  }
  return dx;
}

void update_running_stats(NormState& state, const NormCache& cache) {
  if (!cache.batch_stats || cache.num_sites == 0) return;
  const double m = state.momentum;
  state.running_mean = m * state.running_mean + (1 - m) * cache.mean;
  state.running_var = m * state.running_var + (1 - m) * cache.second;
}

// ---------------------------------------------------------------------------

GateParams::GateParams(FieldType ft, int size, RadialProfile profile)
    : field_(std::move(ft)), size_(size) {
  for (int i = 0; i < field_.size(); ++i) {
    if (field_.order(i) == 0) continue;
    gated_.push_back(i);
    kernels_.emplace_back(FieldType({field_.order(i)}), FieldType({0}), size, profile,
                          std::max(kDefaultMaxOrder, field_.order(i)));
  }
  bias_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(gated_.size()));
}

long GateParams::num_parameters() const {
  long total = bias_.size();
  for (const auto& k : kernels_) total += k.num_weights();
  return total;
}

Eigen::VectorXd GateParams::parameters() const {
  Eigen::VectorXd p(num_parameters());
  long at = 0;
  for (const auto& k : kernels_) {
    p.segment(at, k.num_weights()) = k.weights();
    at += k.num_weights();
  }
  p.tail(bias_.size()) = bias_;
  return p;
}

void GateParams::set_parameters(const Eigen::VectorXd& p) {
  if (p.size() != num_parameters()) fail(ErrorCode::kShapeMismatch, "gate parameter count");
  long at = 0;
  for (auto& k : kernels_) {
    k.set_weights(p.segment(at, k.num_weights()));
    at += k.num_weights();
  }
  bias_ = p.tail(bias_.size());
}

void GateParams::init(std::uint64_t seed) {
  for (std::size_t g = 0; g < kernels_.size(); ++g) kernels_[g].init_weights(splitmix(seed + g));
  bias_.setZero();
}

namespace {

// All gate kernels stacked into one (gates x K) tensor so a single rule-book
// pass produces every logit.
KernelTensor stacked_gate_kernel(const GateParams& gates) {
  const FieldType& ft = gates.field();
  const int n_off = gates.size() * gates.size() * gates.size();
  const int num_gates = static_cast<int>(gates.gated().size());
  KernelTensor stacked(n_off, Eigen::MatrixXd::Zero(num_gates, ft.dim()));
  for (int g = 0; g < num_gates; ++g) {
    const int i = gates.gated()[g];
    const KernelTensor kt = gates.kernels()[g].materialize();
    for (int o = 0; o < n_off; ++o) stacked[o].block(g, ft.offset(i), 1, ft.width(i)) = kt[o];
  }
  return stacked;
}

}  // namespace

SparseTensor gated_activation(const SparseTensor& t, const GateParams& gates, GateCache* cache) {
  check_field(t, gates.field(), "activation");
  const FieldType& ft = gates.field();
  const int n = t.num_sites();
  const FeatureMatrix& x = t.features();
  FeatureMatrix y = x;
  for (int i = 0; i < ft.size(); ++i) {
    if (ft.order(i) == 0) y.col(ft.offset(i)) = x.col(ft.offset(i)).cwiseMax(0.0);
  }
  const int num_gates = static_cast<int>(gates.gated().size());
  FeatureMatrix logits(n, num_gates);
  RuleBook rules;
  KernelTensor stacked;
  if (num_gates > 0) {
    rules = build_rulebook(t.sites(), t.sites(), gates.size());
    stacked = stacked_gate_kernel(gates);
    logits = apply_rulebook(rules, stacked, x, n);
    logits.rowwise() += gates.bias().transpose();
    for (int g = 0; g < num_gates; ++g) {
      const int i = gates.gated()[g];
      for (int r = 0; r < n; ++r) {
        y.row(r).segment(ft.offset(i), ft.width(i)) *= sigmoid(logits(r, g));
      }
    }
  }
  if (cache) {
    cache->rules = std::move(rules);
    cache->kernel = std::move(stacked);
    cache->logits = std::move(logits);
    cache->input = x;
  }
  return t.with_features(std::move(y));
}

GateGradients gated_activation_backward(const GateParams& gates, const GateCache& cache,
                                        const FeatureMatrix& grad_out) {
  const FieldType& ft = gates.field();
  const FeatureMatrix& x = cache.input;
  const int n = static_cast<int>(x.rows());
  const int num_gates = static_cast<int>(gates.gated().size());
  GateGradients out{FeatureMatrix::Zero(n, ft.dim()), Eigen::VectorXd::Zero(gates.num_parameters())};
  for (int i = 0; i < ft.size(); ++i) {
    if (ft.order(i) != 0) continue;
    const int c = ft.offset(i);
    for (int r = 0; r < n; ++r) out.input(r, c) = x(r, c) > 0 ? grad_out(r, c) : 0.0;
  }
  if (num_gates == 0) return out;
  FeatureMatrix dz(n, num_gates);
  for (int g = 0; g < num_gates; ++g) {
    const int i = gates.gated()[g];
    const int c0 = ft.offset(i), w = ft.width(i);
    for (int r = 0; r < n; ++r) {
      const double s = sigmoid(cache.logits(r, g));
      out.input.row(r).segment(c0, w) = grad_out.row(r).segment(c0, w) * s;
      dz(r, g) = grad_out.row(r).segment(c0, w).dot(x.row(r).segment(c0, w)) * s * (1 - s);
    }
  }
  KernelGradients kg = rulebook_backward(dz, x, cache.kernel, cache.rules);
  out.input += kg.input;
  long at = 0;
  const int n_off = static_cast<int>(kg.kernel.size());
  for (int g = 0; g < num_gates; ++g) {
    const int i = gates.gated()[g];
    KernelTensor block(n_off);
    for (int o = 0; o < n_off; ++o) block[o] = kg.kernel[o].block(g, ft.offset(i), 1, ft.width(i));
    const SteerableKernel& kern = gates.kernels()[g];
    out.params.segment(at, kern.num_weights()) = kern.project_gradient(block);
    at += kern.num_weights();
  }
  out.params.tail(num_gates) = dz.colwise().sum().transpose();
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::map<std::string, std::string> parse_keys(std::istringstream& tokens) {
  std::map<std::string, std::string> keys;
  std::string tok;
  while (tokens >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos || eq == 0) fail(ErrorCode::kFormat, "expected key=value, got '" + tok + "'");
    if (!keys.emplace(tok.substr(0, eq), tok.substr(eq + 1)).second) {
      fail(ErrorCode::kFormat, "duplicate key '" + tok.substr(0, eq) + "'");
    }
  }
  return keys;
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const int x = std::stoi(v, &used);
    if (used == v.size()) return x;
  } catch (const std::logic_error&) {
  }
  fail(ErrorCode::kFormat, "bad integer for " + key + ": '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::logic_error&) {
  }
  fail(ErrorCode::kFormat, "bad number for " + key + ": '" + v + "'");
}

void take_profile(std::map<std::string, std::string>& keys, RadialProfile& profile) {
  if (auto it = keys.find("centers"); it != keys.end()) {
    profile.centers.clear();
    std::stringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) profile.centers.push_back(parse_double("centers", item));
    if (profile.centers.empty()) fail(ErrorCode::kFormat, "centers list is empty");
    keys.erase(it);
  }
  if (auto it = keys.find("eps"); it != keys.end()) {
    profile.epsilon = parse_double("eps", it->second);
    keys.erase(it);
  }
}

void reject_rest(const std::map<std::string, std::string>& keys, const std::string& kind) {
  if (!keys.empty()) fail(ErrorCode::kFormat, "unknown key '" + keys.begin()->first + "' for " + kind);
}

std::string profile_suffix(const RadialProfile& p) {
  if (p == RadialProfile{}) return "";
  std::ostringstream os;
  os.precision(17);
  os << " centers=";
  for (std::size_t i = 0; i < p.centers.size(); ++i) os << (i ? "," : "") << p.centers[i];
  os << " eps=" << p.epsilon;
  return os.str();
}

}  // namespace

LayerSpec parse_layer_spec(const std::string& line) {
  std::istringstream tokens(line);
  std::string kind;
  tokens >> kind;
  auto keys = parse_keys(tokens);
  LayerSpec spec;
  if (kind == "conv") {
    spec.kind = LayerKind::kConv;
    if (!keys.count("in") || !keys.count("out")) fail(ErrorCode::kFormat, "conv needs in= and out=");
    spec.conv.field_in = FieldType::parse(keys["in"]);
    spec.conv.field_out = FieldType::parse(keys["out"]);
    keys.erase("in");
    keys.erase("out");
    if (keys.count("size")) {
      spec.conv.size = parse_int("size", keys["size"]);
      keys.erase("size");
    }
    if (spec.conv.size < 1 || spec.conv.size % 2 == 0) fail(ErrorCode::kFormat, "conv size must be odd");
    if (keys.count("mode")) {
      const std::string mode = keys["mode"];
      if (mode == "submanifold") spec.conv.mode = ConvMode::kSubmanifold;
      else if (mode == "general") spec.conv.mode = ConvMode::kGeneral;
      else fail(ErrorCode::kFormat, "unknown conv mode '" + mode + "'");
      keys.erase("mode");
    }
    take_profile(keys, spec.profile);
  } else if (kind == "norm") {
    spec.kind = LayerKind::kNorm;
  } else if (kind == "act") {
    spec.kind = LayerKind::kActivation;
    if (keys.count("gate_size")) {
      spec.gate_size = parse_int("gate_size", keys["gate_size"]);
      keys.erase("gate_size");
    }
    if (spec.gate_size < 1 || spec.gate_size % 2 == 0) fail(ErrorCode::kFormat, "gate_size must be odd");
    take_profile(keys, spec.profile);
  } else if (kind == "pool") {
    spec.kind = LayerKind::kPool;
    if (keys.count("factor")) {
      spec.pool_factor = parse_int("factor", keys["factor"]);
      keys.erase("factor");
    }
    if (spec.pool_factor < 2) fail(ErrorCode::kFormat, "pool factor must be >= 2");
  } else {
    fail(ErrorCode::kFormat, "unknown layer kind '" + kind + "'");
  }
  reject_rest(keys, kind);
  return spec;
}

std::string LayerSpec::to_string() const {
  std::ostringstream os;
  switch (kind) {
    case LayerKind::kConv:
      os << "conv in=" << conv.field_in.to_string() << " out=" << conv.field_out.to_string()
         << " size=" << conv.size
         << " mode=" << (conv.mode == ConvMode::kSubmanifold ? "submanifold" : "general")
         << profile_suffix(profile);
      break;
    case LayerKind::kNorm:
      os << "norm";
      break;
    case LayerKind::kActivation:
      os << "act gate_size=" << gate_size << profile_suffix(profile);
      break;
    case LayerKind::kPool:
      os << "pool factor=" << pool_factor;
      break;
  }
  return os.str();
}

NetworkConfig NetworkConfig::parse(std::istream& in) {
  NetworkConfig cfg;
  bool have_input = false;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream probe(line);
    std::string first;
    if (!(probe >> first)) continue;
    try {
      if (first == "input") {
        if (have_input || !cfg.layers.empty()) fail(ErrorCode::kFormat, "input must come first");
        auto keys = parse_keys(probe);
        if (!keys.count("field")) fail(ErrorCode::kFormat, "input needs field=");
        cfg.input = FieldType::parse(keys["field"]);
        keys.erase("field");
        reject_rest(keys, "input");
        have_input = true;
        continue;
      }
      cfg.layers.push_back(parse_layer_spec(line));
    } catch (const Error& e) {
      fail(ErrorCode::kFormat, "line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!have_input && cfg.layers.size() == 1 && cfg.layers[0].kind == LayerKind::kConv) {
      cfg.input = cfg.layers[0].conv.field_in;
      have_input = true;
    }
  }
  if (!have_input && !cfg.layers.empty()) {
    fail(ErrorCode::kFormat, "input field unknown: add an 'input field=[..]' line");
  }
  return cfg;
}

NetworkConfig NetworkConfig::parse_string(const std::string& text) {
  std::istringstream in(text);
  return parse(in);
}

NetworkConfig NetworkConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path);
  return parse(in);
}

std::string NetworkConfig::to_string() const {
  std::string s = "input field=" + input.to_string() + "\n";
  for (const auto& l : layers) s += l.to_string() + "\n";
  return s;
}

// ---------------------------------------------------------------------------

Network::Network(NetworkConfig config) : config_(std::move(config)) {
  FieldType current = config_.input;
  long offset = 0;
  for (std::size_t i = 0; i < config_.layers.size(); ++i) {
    const LayerSpec& s = config_.layers[i];
    Layer layer;
    layer.in = current;
    layer.param_offset = offset;
    switch (s.kind) {
      case LayerKind::kConv:
        if (s.conv.field_in != current) {
          fail(ErrorCode::kFieldMismatch, "layer " + std::to_string(i) + ": conv expects " +
                                              s.conv.field_in.to_string() + " but receives " +
                                              current.to_string());
        }
        layer.kernel = SteerableKernel(s.conv.field_in, s.conv.field_out, s.conv.size, s.profile,
                                       std::max(kDefaultMaxOrder, std::max(s.conv.field_in.max_order(),
                                                                           s.conv.field_out.max_order())));
        current = s.conv.field_out;
        offset += layer.kernel.num_weights();
        break;
      case LayerKind::kNorm:
        layer.norm = NormState(current);
        break;
      case LayerKind::kActivation:
        layer.gates = GateParams(current, s.gate_size, s.profile);
        offset += layer.gates.num_parameters();
        break;
      case LayerKind::kPool:
        break;
    }
    layer.out = current;
    layers_.push_back(std::move(layer));
  }
}

const FieldType& Network::output_field() const {
  return layers_.empty() ? config_.input : layers_.back().out;
}

void Network::init(std::uint64_t seed) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::uint64_t s = splitmix(seed ^ splitmix(i + 1));
    if (config_.layers[i].kind == LayerKind::kConv) layers_[i].kernel.init_weights(s);
    if (config_.layers[i].kind == LayerKind::kActivation) layers_[i].gates.init(s);
  }
  touch();
}

long Network::parameter_count(int layer) const {
  switch (config_.layers[layer].kind) {
    case LayerKind::kConv:
      return layers_[layer].kernel.num_weights();
    case LayerKind::kActivation:
      return layers_[layer].gates.num_parameters();
    default:
      return 0;
  }
}

long Network::num_parameters() const {
  return layers_.empty() ? 0 : layers_.back().param_offset + parameter_count(num_layers() - 1);
}

Eigen::VectorXd Network::parameters() const {
  Eigen::VectorXd p(num_parameters());
  for (int i = 0; i < num_layers(); ++i) {
    const long n = parameter_count(i);
    if (n == 0) continue;
    if (config_.layers[i].kind == LayerKind::kConv) p.segment(layers_[i].param_offset, n) = layers_[i].kernel.weights();
    else p.segment(layers_[i].param_offset, n) = layers_[i].gates.parameters();
  }
  return p;
}

void Network::set_parameters(const Eigen::VectorXd& p) {
  if (p.size() != num_parameters()) {
    fail(ErrorCode::kShapeMismatch, "expected " + std::to_string(num_parameters()) +
                                        " parameters, got " + std::to_string(p.size()));
  }
  for (int i = 0; i < num_layers(); ++i) {
    const long n = parameter_count(i);
    if (n == 0) continue;
    if (config_.layers[i].kind == LayerKind::kConv) layers_[i].kernel.set_weights(p.segment(layers_[i].param_offset, n));
    else layers_[i].gates.set_parameters(p.segment(layers_[i].param_offset, n));
  }
  touch();
}

void Network::commit_stats(const Tape& tape) {
  if (tape.owner != this || tape.generation != generation_) {
    fail(ErrorCode::kStaleTape, "tape does not belong to the current network state");
  }
  for (int i = 0; i < num_layers(); ++i) {
    if (config_.layers[i].kind == LayerKind::kNorm) update_running_stats(layers_[i].norm, tape.records[i].norm);
  }
  touch();
}

void Network::override_kernel(int layer, KernelTensor kernel) {
  if (layer < 0 || layer >= num_layers() || config_.layers[layer].kind != LayerKind::kConv) {
    fail(ErrorCode::kInvalidArgument, "layer " + std::to_string(layer) + " is not a conv layer");
  }
  const auto& s = config_.layers[layer].conv;
  if (static_cast<int>(kernel.size()) != s.size * s.size * s.size) {
    fail(ErrorCode::kShapeMismatch, "override kernel has the wrong number of offsets");
  }
  for (const auto& m : kernel) {
    if (m.rows() != s.field_out.dim() || m.cols() != s.field_in.dim()) {
      fail(ErrorCode::kShapeMismatch, "override kernel block has the wrong shape");
    }
  }
  layers_[layer].kernel_override = std::move(kernel);
  touch();
}

SparseTensor Network::forward(const SparseTensor& in, NormMode mode, Tape* tape) const {
  if (in.field_type() != config_.input) {
    fail(ErrorCode::kFieldMismatch, "network input field " + config_.input.to_string() +
                                        " does not match tensor field " + in.field_type().to_string());
  }
  if (tape) {
    tape->owner = this;
    tape->generation = generation_;
    tape->mode = mode;
    tape->input = in;
    tape->records.assign(layers_.size(), {});
  }
  SparseTensor x = in;
  for (int i = 0; i < num_layers(); ++i) {
    const LayerSpec& s = config_.layers[i];
    const Layer& layer = layers_[i];
    LayerRecord local;
    LayerRecord& rec = tape ? tape->records[i] : local;
    rec.input = x;
    switch (s.kind) {
      case LayerKind::kConv: {
        rec.kernel = layer.kernel_override ? *layer.kernel_override : layer.kernel.materialize();
        ConvOutput co = conv_forward_with_rules(x, rec.kernel, s.conv);
        x = std::move(co.output);
        rec.rules = std::move(co.rules);
        break;
      }
      case LayerKind::kNorm:
        x = equivariant_norm(x, layer.norm, mode == NormMode::kBatch, &rec.norm);
        break;
      case LayerKind::kActivation:
        x = gated_activation(x, layer.gates, &rec.gate);
        break;
      case LayerKind::kPool: {
        PoolOutput po = avg_pool(x, s.pool_factor);
        x = std::move(po.output);
        rec.pool_parent = std::move(po.parent);
        rec.pool_counts = std::move(po.counts);
        break;
      }
    }
    rec.output = x;
  }
  return x;
}

NetworkGradients Network::backward(const Tape& tape, const FeatureMatrix& grad_out) const {
  std::vector<FeatureMatrix> at(layers_.size());
  if (layers_.empty()) return {Eigen::VectorXd(0), grad_out};
  at.back() = grad_out;
  return backward(tape, at);
}

NetworkGradients Network::backward(const Tape& tape, const std::vector<FeatureMatrix>& grad_at) const {
  if (tape.owner != this || tape.generation != generation_) {
    fail(ErrorCode::kStaleTape, "tape does not belong to the current network state");
  }
  if (grad_at.size() != layers_.size()) fail(ErrorCode::kShapeMismatch, "one gradient slot per layer");
  NetworkGradients out{Eigen::VectorXd::Zero(num_parameters()), {}};
  FeatureMatrix g = FeatureMatrix::Zero(tape.output().num_sites(), output_field().dim());
  for (int i = num_layers() - 1; i >= 0; --i) {
    const LayerRecord& rec = tape.records[i];
    if (grad_at[i].size() > 0) {
      if (grad_at[i].rows() != g.rows() || grad_at[i].cols() != g.cols()) {
        fail(ErrorCode::kShapeMismatch, "injected gradient for layer " + std::to_string(i) + " has the wrong shape");
      }
      g += grad_at[i];
    }
    const Layer& layer = layers_[i];
    const LayerSpec& s = config_.layers[i];
    switch (s.kind) {
      case LayerKind::kConv: {
        KernelGradients kg = rulebook_backward(g, rec.input.features(), rec.kernel, rec.rules);
        out.params.segment(layer.param_offset, layer.kernel.num_weights()) =
            layer.kernel.project_gradient(kg.kernel);
        g = std::move(kg.input);
        break;
      }
      case LayerKind::kNorm:
        g = equivariant_norm_backward(layer.in, rec.norm, g);
        break;
      case LayerKind::kActivation: {
        GateGradients gg = gated_activation_backward(layer.gates, rec.gate, g);
        out.params.segment(layer.param_offset, layer.gates.num_parameters()) = gg.params;
        g = std::move(gg.input);
        break;
      }
      case LayerKind::kPool: {
        FeatureMatrix gi(rec.input.num_sites(), layer.in.dim());
        for (int r = 0; r < gi.rows(); ++r) {
          const int p = rec.pool_parent[r];
          gi.row(r) = g.row(p) / static_cast<double>(rec.pool_counts[p]);
        }
        g = std::move(gi);
        break;
      }
    }
  }
  out.input = std::move(g);
  return out;
}

}  // namespace ssconv
