#include "ssconv/pipeline.hpp"

#include "ssconv/byte_io.hpp"
#include "ssconv/error.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

namespace ssconv {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return splitmix(splitmix(splitmix(seed) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

Vec3 to_vec(const Coord& c) { return Vec3(c.x, c.y, c.z); }

}  // namespace

// ---------------------------------------------------------------------------
// Shapes

Vec3 Shape::center() const {
  Vec3 lo = Vec3::Constant(1e9), hi = Vec3::Constant(-1e9);
  for (const Coord& c : cubes) {
    lo = lo.cwiseMin(to_vec(c));
    hi = hi.cwiseMax(to_vec(c) + Vec3::Ones());
  }
  return 0.5 * (lo + hi);
}

std::vector<Vec3> Shape::vertices() const {
  std::set<Coord> corners;
  for (const Coord& c : cubes)
    for (int k = 0; k < 8; ++k) corners.insert(c + Coord{k & 1, (k >> 1) & 1, (k >> 2) & 1});
  const Vec3 mid = center();
  std::vector<Vec3> out;
  for (const Coord& c : corners) out.push_back(to_vec(c) - mid);
  return out;
}

double Shape::diameter() const {
  const auto v = vertices();
  double d = 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    for (std::size_t j = i + 1; j < v.size(); ++j) d = std::max(d, (v[i] - v[j]).norm());
  return d;
}

double Shape::radius() const {
  double r = 0;
  for (const Vec3& v : vertices()) r = std::max(r, v.norm());
  return r;
}

const std::vector<Shape>& shape_library() {
  static const std::vector<Shape> lib = {
      {"hook",
       {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {2, 1, 0}, {0, 0, 1}},
       {{0.9, 0.1, 0.1}, {0.1, 0.8, 0.2}, {0.15, 0.25, 0.9}, {0.95, 0.85, 0.1}, {0.8, 0.2, 0.85}}},
      {"twist",
       {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {1, 1, 1}, {2, 1, 1}},
       {{0.2, 0.7, 0.9}, {0.9, 0.5, 0.1}, {0.3, 0.9, 0.3}, {0.7, 0.1, 0.6}, {0.95, 0.95, 0.95}}},
  };
  return lib;
}

const Shape& shape_by_id(int id) {
  const auto& lib = shape_library();
  if (id < 0 || id >= static_cast<int>(lib.size())) {
    fail(ErrorCode::kInvalidArgument, "unknown shape id " + std::to_string(id));
  }
  return lib[id];
}

SyntheticScene gen_scene(std::uint64_t seed, int shape_id, int num_points, double noise_sigma,
                         const std::optional<Pose>& forced_pose) {
  const Shape& shape = shape_by_id(shape_id);
  if (num_points < 32) fail(ErrorCode::kInvalidArgument, "num_points must be at least 32");
  if (!(noise_sigma >= 0)) fail(ErrorCode::kInvalidArgument, "noise_sigma must be >= 0");

  struct Face {
    int cube, axis, side;
  };
  std::set<Coord> occupied(shape.cubes.begin(), shape.cubes.end());
  std::vector<Face> faces;
  for (int c = 0; c < static_cast<int>(shape.cubes.size()); ++c) {
    for (int axis = 0; axis < 3; ++axis) {
      for (int side = 0; side < 2; ++side) {
        Coord n = shape.cubes[c];
        int* comp = axis == 0 ? &n.x : axis == 1 ? &n.y : &n.z;
        *comp += side ? 1 : -1;
        if (!occupied.count(n)) faces.push_back({c, axis, side});
      }
    }
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const Rotation r = random_rotation(rng);
  const Vec3 t(2 * u01(rng) - 1, 2 * u01(rng) - 1, 2 * u01(rng) - 1);
  SyntheticScene scene;
  scene.pose = forced_pose ? *forced_pose : Pose{r, t};
  scene.shape_id = shape_id;
  scene.noise_sigma = noise_sigma;

  std::uniform_int_distribution<int> pick(0, static_cast<int>(faces.size()) - 1);
  std::normal_distribution<double> noise(0.0, 1.0);
  const Vec3 mid = shape.center();
  scene.model_points.resize(num_points, 3);
  scene.cloud.points.resize(num_points, 3);
  scene.cloud.attributes.resize(num_points, 3);
  for (int i = 0; i < num_points; ++i) {
    const Face& f = faces[pick(rng)];
    Vec3 p = to_vec(shape.cubes[f.cube]);
    const int a1 = (f.axis + 1) % 3, a2 = (f.axis + 2) % 3;
    p(f.axis) += f.side;
    p(a1) += u01(rng);
    p(a2) += u01(rng);
    const Vec3 model = p - mid;
    Vec3 world = scene.pose.apply(model);
    if (noise_sigma > 0) world += noise_sigma * Vec3(noise(rng), noise(rng), noise(rng));
    scene.model_points.row(i) = model.transpose();
    scene.cloud.points.row(i) = world.transpose();
    scene.cloud.attributes.row(i) = shape.colors[f.cube].transpose();
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Config

TrainConfig TrainConfig::parse(std::istream& in, const std::string& base_dir) {
  TrainConfig cfg;
  std::string line;
  int lineno = 0;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    std::string key = line.substr(0, eq);
    key.erase(std::remove_if(key.begin(), key.end(), ::isspace), key.end());
    if (eq == std::string::npos) {
      if (key.empty()) continue;
      fail(ErrorCode::kFormat, "line " + std::to_string(lineno) + ": expected key=value");
    }
    std::string value = line.substr(eq + 1);
    value.erase(0, value.find_first_not_of(" \t"));
    value.erase(value.find_last_not_of(" \t\r") + 1);
    if (!seen.insert(key).second) fail(ErrorCode::kFormat, "line " + std::to_string(lineno) + ": duplicate key " + key);
    try {
      std::size_t used = 0;
      auto as_int = [&] {
        const long v = std::stol(value, &used);
        if (used != value.size()) throw std::invalid_argument(key);
        return v;
      };
      auto as_double = [&] {
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(key);
        return v;
      };
      if (key == "grid") cfg.grid = static_cast<int>(as_int());
      else if (key == "layers") cfg.layers = value;
      else if (key == "lr") cfg.lr = as_double();
      else if (key == "lr_halve_every") cfg.lr_halve_every = static_cast<int>(as_int());
      else if (key == "iters") cfg.iters = static_cast<int>(as_int());
      else if (key == "batch") cfg.batch = static_cast<int>(as_int());
      else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(as_int());
      else if (key == "refine_iters") cfg.refine_iters = static_cast<int>(as_int());
      else if (key == "noise_sigma") cfg.noise_sigma = as_double();
      else if (key == "num_points") cfg.num_points = static_cast<int>(as_int());
      else if (key == "shape") cfg.shape = static_cast<int>(as_int());
      else if (key == "hidden") cfg.hidden = static_cast<int>(as_int());
      else if (key == "eval_scenes") cfg.eval_scenes = static_cast<int>(as_int());
      else if (key == "eval_seed") cfg.eval_seed = static_cast<std::uint64_t>(as_int());
      else fail(ErrorCode::kFormat, "unknown key '" + key + "'");
    } catch (const std::logic_error&) {
      fail(ErrorCode::kFormat, "line " + std::to_string(lineno) + ": bad value for " + key);
    } catch (const Error& e) {
      fail(ErrorCode::kFormat, "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (cfg.grid < 4 || cfg.iters < 0 || cfg.batch < 1 || cfg.lr <= 0 || cfg.lr_halve_every < 1 ||
      cfg.refine_iters < 0 || cfg.num_points < 32 || cfg.hidden < 1 || cfg.eval_scenes < 0 ||
      cfg.noise_sigma < 0) {
    fail(ErrorCode::kFormat, "training config value out of range");
  }
  shape_by_id(cfg.shape);
  if (!cfg.layers.empty() && !base_dir.empty() && std::filesystem::path(cfg.layers).is_relative()) {
    cfg.layers = (std::filesystem::path(base_dir) / cfg.layers).string();
  }
  return cfg;
}

TrainConfig TrainConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path);
  return parse(in, std::filesystem::path(path).parent_path().string());
}

std::string TrainConfig::to_string() const {
  std::ostringstream os;
  os.precision(17);
  os << "grid=" << grid << "\nlayers=" << layers << "\nlr=" << lr << "\nlr_halve_every=" << lr_halve_every
     << "\niters=" << iters << "\nbatch=" << batch << "\nseed=" << seed << "\nrefine_iters=" << refine_iters
     << "\nnoise_sigma=" << noise_sigma << "\nnum_points=" << num_points << "\nshape=" << shape
     << "\nhidden=" << hidden << "\neval_scenes=" << eval_scenes << "\neval_seed=" << eval_seed << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// MLP

Mlp::Mlp(int in, int hidden, int out)
    : w1(Eigen::MatrixXd::Zero(hidden, in)),
      w2(Eigen::MatrixXd::Zero(out, hidden)),
      skip(Eigen::MatrixXd::Zero(out, in)),
      b1(Eigen::VectorXd::Zero(hidden)),
      b2(Eigen::VectorXd::Zero(out)) {}

void Mlp::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  const double s = std::sqrt(2.0 / std::max<Eigen::Index>(1, w1.cols()));
  for (Eigen::Index j = 0; j < w1.cols(); ++j)
    for (Eigen::Index i = 0; i < w1.rows(); ++i) w1(i, j) = s * n01(rng);
  b1.setZero();
  w2.setZero();
  b2.setZero();
  skip.setZero();
}

long Mlp::num_parameters() const {
  return static_cast<long>(w1.size() + b1.size() + w2.size() + b2.size() + skip.size());
}

Eigen::VectorXd Mlp::parameters() const {
  Eigen::VectorXd p(num_parameters());
  long at = 0;
  for (const Eigen::MatrixXd* m : {&w1, &w2, &skip}) {
    p.segment(at, m->size()) = Eigen::Map<const Eigen::VectorXd>(m->data(), m->size());
    at += m->size();
  }
  p.segment(at, b1.size()) = b1;
  at += b1.size();
  p.segment(at, b2.size()) = b2;
  return p;
}

void Mlp::set_parameters(const Eigen::VectorXd& p) {
  if (p.size() != num_parameters()) fail(ErrorCode::kShapeMismatch, "mlp parameter count");
  long at = 0;
  for (Eigen::MatrixXd* m : {&w1, &w2, &skip}) {
    Eigen::Map<Eigen::VectorXd>(m->data(), m->size()) = p.segment(at, m->size());
    at += m->size();
  }
  b1 = p.segment(at, b1.size());
  at += b1.size();
  b2 = p.segment(at, b2.size());
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x, Cache* cache) const {
  Eigen::MatrixXd pre = (x * w1.transpose()).rowwise() + b1.transpose();
  Eigen::MatrixXd y = (pre.cwiseMax(0.0) * w2.transpose() + x * skip.transpose()).rowwise() + b2.transpose();
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
  }
  return y;
}

Eigen::MatrixXd Mlp::backward(const Cache& cache, const Eigen::MatrixXd& grad_out,
                              Eigen::VectorXd& grad) const {
  const Eigen::MatrixXd h = cache.pre.cwiseMax(0.0);
  const Eigen::MatrixXd dw2 = grad_out.transpose() * h;
  const Eigen::MatrixXd dskip = grad_out.transpose() * cache.x;
  const Eigen::VectorXd db2 = grad_out.colwise().sum().transpose();
  Eigen::MatrixXd dpre = grad_out * w2;
  dpre = dpre.cwiseProduct((cache.pre.array() > 0).cast<double>().matrix());
  const Eigen::MatrixXd dw1 = dpre.transpose() * cache.x;
  const Eigen::VectorXd db1 = dpre.colwise().sum().transpose();
  grad.resize(num_parameters());
  long at = 0;
  for (const Eigen::MatrixXd* m : {&dw1, &dw2, &dskip}) {
    grad.segment(at, m->size()) = Eigen::Map<const Eigen::VectorXd>(m->data(), m->size());
    at += m->size();
  }
  grad.segment(at, db1.size()) = db1;
  at += db1.size();
  grad.segment(at, db2.size()) = db2;
  return dpre * w1 + grad_out * skip;
}

Rotation rotation_from_6d(const Vec3& a, const Vec3& b) {
  // Stable norms: heads can produce huge values before a loss overflows.
  Vec3 e1 = a.stableNorm() > 1e-12 ? Vec3(a.stableNormalized()) : Vec3::UnitX();
  Vec3 v = b - e1.dot(b) * e1;
  if (v.stableNorm() <= 1e-12) {
    // Axis least aligned with e1.
    Eigen::Index k;
    e1.cwiseAbs().minCoeff(&k);
    v = Vec3::Unit(k) - e1(k) * e1;
  }
  const Vec3 e2 = v.stableNormalized();
  Mat3 m;
  m.col(0) = e1;
  m.col(1) = e2;
  m.col(2) = e1.cross(e2);
  return Rotation::from_matrix(m);
}

// ---------------------------------------------------------------------------
// Model

namespace {

// Columns of the tapped feature levels feeding the stage-1 head.
struct HeadLayout {
  std::vector<std::pair<int, int>> scalars;  // (level, column)
  std::vector<std::pair<int, int>> vectors;  // (level, first column)
};

HeadLayout head_layout(const Network& backbone, const std::vector<int>& levels) {
  HeadLayout h;
  for (int k = 0; k < static_cast<int>(levels.size()); ++k) {
    const FieldType& ft = backbone.field_after(levels[k]);
    for (int i = 0; i < ft.size(); ++i) {
      if (ft.order(i) == 0) h.scalars.push_back({k, ft.offset(i)});
      if (ft.order(i) == 1) h.vectors.push_back({k, ft.offset(i)});
    }
  }
  return h;
}

}  // namespace

PoseModel::PoseModel(const NetworkConfig& backbone, const TrainConfig& cfg)
    : config_(cfg), backbone_(backbone) {
  if (backbone_.num_layers() == 0) fail(ErrorCode::kInvalidArgument, "backbone has no layers");
  if (backbone_.input_field() != FieldType::scalars(4)) {
    fail(ErrorCode::kFieldMismatch, "backbone input must be [0x4] (RGB plus occupancy)");
  }
  for (int i = 0; i + 1 < backbone_.num_layers(); ++i) {
    if (backbone_.spec(i).kind == LayerKind::kPool) levels_.push_back(i);
  }
  levels_.push_back(backbone_.num_layers() - 1);
  const HeadLayout h = head_layout(backbone_, levels_);
  if (h.vectors.empty()) fail(ErrorCode::kFieldMismatch, "backbone levels carry no order-1 features");
  head1 = Eigen::MatrixXd::Zero(3 * static_cast<Eigen::Index>(h.vectors.size()),
                                static_cast<Eigen::Index>(h.scalars.size()) + 1);
  for (int k : levels_) enrich_.emplace_back(enrichment_config(backbone_.field_after(k)));
  offset2 = Mlp(stage2_inputs(), cfg.hidden, 3);
  rot2 = Mlp(stage2_inputs(), cfg.hidden, 6);
}

int PoseModel::stage2_inputs() const {
  int d = 3;
  for (int k : levels_) d += backbone_.field_after(k).dim();
  return d;
}

void PoseModel::init(std::uint64_t seed) {
  backbone_.init(stream_seed(seed, 1));
  for (std::size_t k = 0; k < enrich_.size(); ++k) enrich_[k].init(stream_seed(seed, 2, k));
  head1.setZero();
  offset2.init(stream_seed(seed, 3));
  rot2.init(stream_seed(seed, 4));
}

long PoseModel::num_parameters() const {
  long n = backbone_.num_parameters() + static_cast<long>(head1.size());
  for (const auto& e : enrich_) n += e.num_parameters();
  return n + offset2.num_parameters() + rot2.num_parameters();
}

Eigen::VectorXd PoseModel::parameters() const {
  Eigen::VectorXd p(num_parameters());
  long at = 0;
  auto put = [&](const Eigen::VectorXd& v) {
    p.segment(at, v.size()) = v;
    at += v.size();
  };
  put(backbone_.parameters());
  put(Eigen::Map<const Eigen::VectorXd>(head1.data(), head1.size()));
  for (const auto& e : enrich_) put(e.parameters());
  put(offset2.parameters());
  put(rot2.parameters());
  return p;
}

void PoseModel::set_parameters(const Eigen::VectorXd& p) {
  if (p.size() != num_parameters()) fail(ErrorCode::kShapeMismatch, "model parameter count");
  long at = 0;
  auto take = [&](long n) {
    Eigen::VectorXd v = p.segment(at, n);
    at += n;
    return v;
  };
  backbone_.set_parameters(take(backbone_.num_parameters()));
  Eigen::Map<Eigen::VectorXd>(head1.data(), head1.size()) = take(head1.size());
  for (auto& e : enrich_) e.set_parameters(take(e.num_parameters()));
  offset2.set_parameters(take(offset2.num_parameters()));
  rot2.set_parameters(take(rot2.num_parameters()));
}

std::vector<std::pair<std::string, Eigen::MatrixXd>> PoseModel::named_tensors() const {
  std::vector<std::pair<std::string, Eigen::MatrixXd>> out;
  auto column = [](const Eigen::VectorXd& v) { return Eigen::MatrixXd(v); };
  auto add_net = [&](const std::string& prefix, const Network& net) {
    const Eigen::VectorXd p = net.parameters();
    for (int i = 0; i < net.num_layers(); ++i) {
      const long n = net.parameter_count(i);
      if (n == 0) continue;
      const char* kind = net.spec(i).kind == LayerKind::kConv ? "kernel" : "gate";
      out.emplace_back(prefix + ".layer" + std::to_string(i) + "." + kind,
                       column(p.segment(net.parameter_offset(i), n)));
    }
  };
  add_net("backbone", backbone_);
  out.emplace_back("head1", head1);
  for (std::size_t k = 0; k < enrich_.size(); ++k) add_net("enrich" + std::to_string(k), enrich_[k]);
  for (const auto& [name, mlp] : {std::pair<std::string, const Mlp*>{"offset2", &offset2}, {"rot2", &rot2}}) {
    out.emplace_back(name + ".w1", mlp->w1);
    out.emplace_back(name + ".b1", column(mlp->b1));
    out.emplace_back(name + ".w2", mlp->w2);
    out.emplace_back(name + ".b2", column(mlp->b2));
    out.emplace_back(name + ".skip", mlp->skip);
  }
  out.emplace_back("meta.oracle", Eigen::MatrixXd::Constant(1, 1, oracle_ ? 1.0 : 0.0));
  return out;
}

void PoseModel::load_named_tensors(const std::vector<std::pair<std::string, Eigen::MatrixXd>>& tensors) {
  auto expected = named_tensors();
  if (tensors.size() != expected.size()) {
    fail(ErrorCode::kShapeMismatch, "checkpoint holds " + std::to_string(tensors.size()) +
                                        " tensors, model expects " + std::to_string(expected.size()));
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].first != expected[i].first || tensors[i].second.rows() != expected[i].second.rows() ||
        tensors[i].second.cols() != expected[i].second.cols()) {
      fail(ErrorCode::kShapeMismatch, "checkpoint tensor '" + tensors[i].first + "' does not match '" +
                                          expected[i].first + "'");
    }
  }
  // named_tensors lists parameters in layout order, so concatenation
  // rebuilds the flat vector.
  Eigen::VectorXd flat(num_parameters());
  long at = 0;
  auto put = [&](const Eigen::MatrixXd& m) {
    flat.segment(at, m.size()) = Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
    at += m.size();
  };
  std::size_t i = 0;
  for (; i < tensors.size() && tensors[i].first.rfind("offset2", 0) != 0; ++i) put(tensors[i].second);
  for (const char* prefix : {"offset2", "rot2"}) {
    std::map<std::string, const Eigen::MatrixXd*> parts;
    for (; i < tensors.size() && tensors[i].first.rfind(prefix, 0) == 0; ++i) {
      parts[tensors[i].first.substr(std::string(prefix).size() + 1)] = &tensors[i].second;
    }
    for (const char* part : {"w1", "w2", "skip", "b1", "b2"}) put(*parts.at(part));
  }
  set_parameters(flat);
  oracle_ = tensors.back().second(0, 0) != 0.0;
}

GridFrame scene_frame(const PointCloud& cloud, double shape_radius, int grid) {
  if (cloud.size() == 0) fail(ErrorCode::kInvalidArgument, "empty scene");
  GridFrame frame;
  frame.voxel_size = 2.0 * shape_radius / (0.9 * grid);
  const Vec3 centroid = cloud.points.colwise().mean().transpose();
  frame.origin = centroid - frame.voxel_size * Vec3::Constant((grid - 1) / 2.0);
  frame.extent = {grid, grid, grid};
  return frame;
}

// ---------------------------------------------------------------------------
// Forward passes

namespace {

struct Stage1Pass {
  Tape tape;
  std::vector<InterpolationPlan> plans;
  std::vector<FeatureMatrix> point_features;  // per level, N x K
  Eigen::MatrixXd scalars;                    // N x (S + 1)
  Eigen::MatrixXd coeffs;                     // N x 3V
  std::vector<Eigen::MatrixXd> vectors;       // V of N x 3
  Eigen::MatrixXd out[3];                     // offset, a, b; N x 3
  Pose pose;
};

Pose pose_from_heads(const PointMatrix& points, const Eigen::MatrixXd& offset, const Eigen::MatrixXd& a,
                     const Eigen::MatrixXd& b) {
  const Vec3 t = (points + offset).colwise().mean().transpose();
  if (!t.allFinite() || !a.allFinite() || !b.allFinite()) fail(ErrorCode::kDivergence, "pose heads are not finite");
  return {rotation_from_6d(a.colwise().mean().transpose(), b.colwise().mean().transpose()), t};
}

Stage1Pass run_stage1(const PoseModel& model, const SyntheticScene& scene) {
  const PointCloud& cloud = scene.cloud;
  if (cloud.size() == 0) fail(ErrorCode::kInvalidArgument, "empty scene");
  const TrainConfig& cfg = model.config();
  const GridFrame frame = scene_frame(cloud, shape_by_id(cfg.shape).radius(), cfg.grid);
  Stage1Pass s;
  model.backbone().forward(voxelize(cloud, frame), NormMode::kBatch, &s.tape);
  const auto& levels = model.levels();
  const HeadLayout h = head_layout(model.backbone(), levels);
  const PointMatrix& pts = cloud.points;
  const Eigen::Index n = pts.rows();
  for (int layer : levels) {
    const SparseTensor& t = s.tape.output_of(layer);
    s.plans.push_back(plan_interpolation(t, pts));
    s.point_features.push_back(interpolate(s.plans.back(), t.features()));
  }
  s.scalars.resize(n, static_cast<Eigen::Index>(h.scalars.size()) + 1);
  for (std::size_t j = 0; j < h.scalars.size(); ++j) {
    s.scalars.col(j) = s.point_features[h.scalars[j].first].col(h.scalars[j].second);
  }
  s.scalars.col(s.scalars.cols() - 1).setOnes();
  // Order-1 slots hold (y, z, x).
  for (const auto& [k, c] : h.vectors) {
    const FeatureMatrix& f = s.point_features[k];
    Eigen::MatrixXd v(n, 3);
    v << f.col(c + 2), f.col(c), f.col(c + 1);
    s.vectors.push_back(v);
  }
  const int nv = static_cast<int>(h.vectors.size());
  s.coeffs = s.scalars * model.head1.transpose();
  for (int j = 0; j < 3; ++j) {
    s.out[j] = Eigen::MatrixXd::Zero(n, 3);
    for (int i = 0; i < nv; ++i) {
      s.out[j] += (s.vectors[i].array().colwise() * s.coeffs.col(j * nv + i).array()).matrix();
    }
  }
  s.pose = pose_from_heads(pts, s.out[0], s.out[1], s.out[2]);
  return s;
}

struct Stage2Pass {
  std::vector<Tape> tapes;
  std::vector<InterpolationPlan> plans;
  PointMatrix queries;
  Mlp::Cache off_cache, rot_cache;
  Eigen::MatrixXd offset, rot;
  Pose residual;
};

Stage2Pass run_stage2(const PoseModel& model, const Stage1Pass& s1, const PointMatrix& points,
                      const Pose& current) {
  Stage2Pass s;
  const Pose inv = current.inverse();
  const auto& levels = model.levels();
  const Eigen::Index n = points.rows();
  s.queries.resize(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) s.queries.row(i) = inv.apply(points.row(i).transpose()).transpose();
  const double radius = shape_by_id(model.config().shape).radius();
  Eigen::MatrixXd x(n, model.stage2_inputs());
  Eigen::Index at = 0;
  s.tapes.resize(levels.size());
  for (std::size_t k = 0; k < levels.size(); ++k) {
    const SparseTensor steered = steer_tensor(s1.tape.output_of(levels[k]), inv, model.enrichment()[k],
                                              &s.tapes[k], NormMode::kBatch);
    s.plans.push_back(plan_interpolation(steered, s.queries));
    const int d = steered.field_type().dim();
    x.middleCols(at, d) = interpolate(s.plans.back(), steered.features());
    at += d;
  }
  x.rightCols(3) = s.queries / radius;
  s.offset = model.offset2.forward(x, &s.off_cache);
  s.rot = model.rot2.forward(x, &s.rot_cache);
  s.residual = pose_from_heads(s.queries, s.offset, s.rot.leftCols(3), s.rot.rightCols(3));
  return s;
}

}  // namespace

Prediction predict(const PoseModel& model, const SyntheticScene& scene, int refine_iters) {
  if (scene.cloud.size() == 0) fail(ErrorCode::kInvalidArgument, "empty scene");
  if (refine_iters < 0) fail(ErrorCode::kInvalidArgument, "refine_iters must be >= 0");
  Prediction p;
  if (model.oracle()) {
    p.stage1 = scene.pose;
    p.refined.assign(refine_iters, scene.pose);
    return p;
  }
  const Stage1Pass s1 = run_stage1(model, scene);
  p.stage1 = s1.pose;
  Pose current = s1.pose;
  for (int it = 0; it < refine_iters; ++it) {
    const Stage2Pass s2 = run_stage2(model, s1, scene.cloud.points, current);
    current = compose_pose(current, s2.residual);
    p.refined.push_back(current);
  }
  return p;
}

Pose predict_pose(const PoseModel& model, const SyntheticScene& scene, int refine_iters) {
  return predict(model, scene, refine_iters).final_pose();
}

namespace {

// Mean over points of |offset - (t - p)|^2 / radius^2 + |a - r e_x|^2 + |b - r e_y|^2;
// fills the per-point output gradients.
double head_loss(const PointMatrix& points, const Pose& target, double radius, const Eigen::MatrixXd& offset,
                 const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, Eigen::MatrixXd grads[3]) {
  const Eigen::Index n = points.rows();
  const Mat3& r = target.rotation.matrix();
  Eigen::MatrixXd d_off = offset - ((-points).rowwise() + target.translation.transpose());
  Eigen::MatrixXd d_a = a.rowwise() - r.col(0).transpose();
  Eigen::MatrixXd d_b = b.rowwise() - r.col(1).transpose();
  const double w = 1.0 / (radius * radius);
  const double loss = (w * d_off.squaredNorm() + d_a.squaredNorm() + d_b.squaredNorm()) / n;
  grads[0] = (2.0 * w / n) * d_off;
  grads[1] = (2.0 / n) * d_a;
  grads[2] = (2.0 / n) * d_b;
  return loss;
}

}  // namespace

StepLoss loss_and_gradient(const PoseModel& model, const SyntheticScene& scene, Eigen::VectorXd& grad) {
  grad = Eigen::VectorXd::Zero(model.num_parameters());
  const double radius = shape_by_id(model.config().shape).radius();
  const PointMatrix& pts = scene.cloud.points;
  const Eigen::Index n = pts.rows();
  StepLoss loss;

  // Stage 1: heads and backbone.
  const Stage1Pass s1 = run_stage1(model, scene);
  Eigen::MatrixXd g[3];
  loss.stage1 = head_loss(pts, scene.pose, radius, s1.out[0], s1.out[1], s1.out[2], g);
  const HeadLayout h = head_layout(model.backbone(), model.levels());
  const int nv = static_cast<int>(h.vectors.size());
  Eigen::MatrixXd dcoeffs(n, 3 * nv);
  std::vector<FeatureMatrix> dpoint;
  for (const auto& f : s1.point_features) dpoint.push_back(FeatureMatrix::Zero(n, f.cols()));
  for (int i = 0; i < nv; ++i) {
    Eigen::MatrixXd dv = Eigen::MatrixXd::Zero(n, 3);
    for (int j = 0; j < 3; ++j) {
      dcoeffs.col(j * nv + i) = g[j].cwiseProduct(s1.vectors[i]).rowwise().sum();
      dv += (g[j].array().colwise() * s1.coeffs.col(j * nv + i).array()).matrix();
    }
    auto slots = dpoint[h.vectors[i].first].middleCols(h.vectors[i].second, 3);
    slots.col(0) += dv.col(1);
    slots.col(1) += dv.col(2);
    slots.col(2) += dv.col(0);
  }
  const Eigen::MatrixXd dhead = dcoeffs.transpose() * s1.scalars;
  const Eigen::MatrixXd dscalars = dcoeffs * model.head1;
  for (std::size_t j = 0; j < h.scalars.size(); ++j) {
    dpoint[h.scalars[j].first].col(h.scalars[j].second) += dscalars.col(j);
  }
  const Network& bb = model.backbone();
  std::vector<FeatureMatrix> grad_at(bb.num_layers());
  for (std::size_t k = 0; k < model.levels().size(); ++k) {
    grad_at[model.levels()[k]] = interpolate_transpose(s1.plans[k], dpoint[k]);
  }
  long at = 0;
  grad.segment(at, bb.num_parameters()) = bb.backward(s1.tape, grad_at).params;
  at += bb.num_parameters();
  grad.segment(at, dhead.size()) = Eigen::Map<const Eigen::VectorXd>(dhead.data(), dhead.size());
  at += dhead.size();

  // Stage 2, one supervised round per refinement step (at least one), each
  // starting from the detached pose of the previous round. No gradient
  // reaches the backbone.
  const long stage2_at = at;
  const int rounds = std::max(1, model.config().refine_iters);
  Pose current = s1.pose;
  for (int round = 0; round < rounds; ++round) {
    const Stage2Pass s2 = run_stage2(model, s1, pts, current);
    const Pose residual_target = compose_pose(current.inverse(), scene.pose);
    Eigen::MatrixXd g2[3];
    loss.stage2 += head_loss(s2.queries, residual_target, radius, s2.offset, s2.rot.leftCols(3),
                             s2.rot.rightCols(3), g2) / rounds;
    for (auto& m : g2) m /= rounds;
    Eigen::MatrixXd drot(n, 6);
    drot << g2[1], g2[2];
    Eigen::VectorXd g_off, g_rot;
    const Eigen::MatrixXd dx = model.offset2.backward(s2.off_cache, g2[0], g_off) +
                               model.rot2.backward(s2.rot_cache, drot, g_rot);
    at = stage2_at;
    Eigen::Index col = 0;
    for (std::size_t k = 0; k < model.levels().size(); ++k) {
      const Network& net = model.enrichment()[k];
      const int d = net.output_field().dim();
      const FeatureMatrix dsteered = interpolate_transpose(s2.plans[k], dx.middleCols(col, d));
      col += d;
      grad.segment(at, net.num_parameters()) += net.backward(s2.tapes[k], dsteered).params;
      at += net.num_parameters();
    }
    grad.segment(at, g_off.size()) += g_off;
    at += g_off.size();
    grad.segment(at, g_rot.size()) += g_rot;
    current = compose_pose(current, s2.residual);
  }
  return loss;
}

PoseModel train(const NetworkConfig& backbone, const TrainConfig& cfg, TrainReport* report,
                const TrainLogger& log) {
  PoseModel model(backbone, cfg);
  model.init(cfg.seed);
  Eigen::VectorXd params = model.parameters();
  Eigen::VectorXd m = Eigen::VectorXd::Zero(params.size());
  Eigen::VectorXd v = Eigen::VectorXd::Zero(params.size());
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  Eigen::VectorXd grad, step_grad;
  for (int it = 0; it < cfg.iters; ++it) {
    step_grad = Eigen::VectorXd::Zero(params.size());
    StepLoss mean;
    for (int b = 0; b < cfg.batch; ++b) {
      const SyntheticScene scene =
          gen_scene(stream_seed(cfg.seed, 100 + static_cast<std::uint64_t>(it), b), cfg.shape, cfg.num_points,
                    cfg.noise_sigma);
      const StepLoss l = loss_and_gradient(model, scene, grad);
      mean.stage1 += l.stage1 / cfg.batch;
      mean.stage2 += l.stage2 / cfg.batch;
      step_grad += grad / cfg.batch;
    }
    if (!std::isfinite(mean.total()) || !step_grad.allFinite()) {
      fail(ErrorCode::kDivergence, "iteration " + std::to_string(it) + ": loss is not finite");
    }
    if (report) report->losses.push_back(mean.total());
    if (log) log(it, mean);
    const double lr = cfg.lr * std::pow(0.5, it / cfg.lr_halve_every);
    m = beta1 * m + (1 - beta1) * step_grad;
    v = beta2 * v + (1 - beta2) * step_grad.cwiseAbs2();
    const double c1 = 1 - std::pow(beta1, it + 1), c2 = 1 - std::pow(beta2, it + 1);
    params.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    model.set_parameters(params);
  }
  return model;
}

namespace {

Metrics accumulate(const TrainConfig& cfg, int num_scenes, std::uint64_t seed,
                   const std::function<Pose(const SyntheticScene&)>& predictor) {
  const Shape& shape = shape_by_id(cfg.shape);
  const auto verts = shape.vertices();
  Metrics m;
  m.scenes = num_scenes;
  m.diameter = shape.diameter();
  if (num_scenes == 0) return m;
  int hits = 0;
  for (int i = 0; i < num_scenes; ++i) {
    const SyntheticScene scene = gen_scene(stream_seed(seed, 7, i), cfg.shape, cfg.num_points, cfg.noise_sigma);
    const Pose pred = predictor(scene);
    m.rotation_error_deg += pred.rotation.angle_to(scene.pose.rotation) * 180.0 / std::numbers::pi;
    m.translation_error += (pred.translation - scene.pose.translation).norm();
    double add = 0;
    for (const Vec3& v : verts) add += (pred.apply(v) - scene.pose.apply(v)).norm();
    add /= static_cast<double>(verts.size());
    hits += add < 0.1 * m.diameter;
  }
  m.rotation_error_deg /= num_scenes;
  m.translation_error /= num_scenes;
  m.add_accuracy = 100.0 * hits / num_scenes;
  return m;
}

}  // namespace

Metrics evaluate(const PoseModel& model, int num_scenes, std::uint64_t seed, int refine_iters) {
  return accumulate(model.config(), num_scenes, seed,
                    [&](const SyntheticScene& s) { return predict_pose(model, s, refine_iters); });
}

Metrics evaluate_identity_baseline(const TrainConfig& cfg, int num_scenes, std::uint64_t seed) {
  return accumulate(cfg, num_scenes, seed, [](const SyntheticScene& s) {
    return Pose{Rotation(), s.cloud.points.colwise().mean().transpose()};
  });
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kCheckpointMagic[4] = {'S', 'S', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr const char* kBackboneMarker = "[backbone]\n";
}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const PoseModel& model) {
  ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.str("[train]\n" + model.config().to_string() + kBackboneMarker + model.backbone().config().to_string());
  const auto tensors = model.named_tensors();
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    w.str(name);
    w.u32(2);
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) w.f64(m(i, j));
  }
  return w.take();
}

PoseModel deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kCheckpointMagic)) fail(ErrorCode::kFormat, "not a checkpoint (bad magic)");
  if (r.u32() != kCheckpointVersion) fail(ErrorCode::kFormat, "unsupported checkpoint version");
  const std::string echo = r.str();
  const auto split = echo.find(kBackboneMarker);
  if (echo.rfind("[train]\n", 0) != 0 || split == std::string::npos) {
    fail(ErrorCode::kFormat, "checkpoint configuration echo is malformed");
  }
  std::istringstream train_text(echo.substr(8, split - 8));
  const TrainConfig cfg = TrainConfig::parse(train_text);
  const NetworkConfig net = NetworkConfig::parse_string(echo.substr(split + std::string(kBackboneMarker).size()));
  PoseModel model(net, cfg);
  const std::uint32_t count = r.u32();
  std::vector<std::pair<std::string, Eigen::MatrixXd>> tensors;
  for (std::uint32_t t = 0; t < count; ++t) {
    std::string name = r.str();
    if (r.u32() != 2) fail(ErrorCode::kFormat, "tensor " + name + " is not two-dimensional");
    const std::uint32_t rows = r.u32(), cols = r.u32();
    if (static_cast<std::size_t>(rows) * cols * 8 > r.remaining()) fail(ErrorCode::kFormat, "truncated stream");
    Eigen::MatrixXd m(rows, cols);
    for (std::uint32_t i = 0; i < rows; ++i)
      for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = r.f64();
    tensors.emplace_back(std::move(name), std::move(m));
  }
  if (r.remaining() != 0) fail(ErrorCode::kFormat, "trailing bytes after checkpoint");
  model.load_named_tensors(tensors);
  return model;
}

void save_checkpoint(const std::string& path, const PoseModel& model) {
  write_file(path, serialize_checkpoint(model));
}

PoseModel load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace ssconv
