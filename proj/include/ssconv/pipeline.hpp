#pragma once

#include "ssconv/steering.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ssconv {

// ---------------------------------------------------------------------------
// Synthetic data

/// Rigid shape made of unit cubes, each with its own color. Model
/// coordinates put the bounding-box center at the origin.
struct Shape {
  std::string name;
  std::vector<Coord> cubes;
  std::vector<Vec3> colors;

  Vec3 center() const;
  /// Distinct cube corners in model coordinates.
  std::vector<Vec3> vertices() const;
  double diameter() const;
  /// Largest vertex distance from the model origin.
  double radius() const;
};

const std::vector<Shape>& shape_library();
const Shape& shape_by_id(int id);

struct SyntheticScene {
  PointCloud cloud;  // attributes are RGB
  PointMatrix model_points;  // noiseless samples in model coordinates
  Pose pose;         // model -> scene
  int shape_id = 0;
  double noise_sigma = 0;
};

/// Samples the shape's exposed faces uniformly, moves the samples by a
/// random pose (uniform rotation, translation uniform in [-1, 1]^3) unless
/// `forced_pose` is given, then adds isotropic Gaussian noise.
SyntheticScene gen_scene(std::uint64_t seed, int shape_id, int num_points, double noise_sigma,
                         const std::optional<Pose>& forced_pose = std::nullopt);

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  int grid = 32;
  std::string layers;  // backbone config path
  double lr = 0.01;
  int lr_halve_every = 1500;
  int iters = 2000;
  int batch = 4;
  std::uint64_t seed = 1;
  int refine_iters = 1;
  double noise_sigma = 0.01;
  int num_points = 256;
  int shape = 0;
  int hidden = 64;
  int eval_scenes = 200;
  std::uint64_t eval_seed = 1000;

  /// key=value lines, '#' comments. `base_dir` resolves a relative layers path.
  static TrainConfig parse(std::istream& in, const std::string& base_dir = "");
  static TrainConfig load(const std::string& path);
  std::string to_string() const;
};

// ---------------------------------------------------------------------------
// Model

/// Per-point two-layer perceptron with a linear skip path:
/// y = W2 relu(W1 x + b1) + b2 + S x.
struct Mlp {
  Eigen::MatrixXd w1, w2, skip;
  Eigen::VectorXd b1, b2;

  Mlp() = default;
  Mlp(int in, int hidden, int out);
  void init(std::uint64_t seed);
  long num_parameters() const;
  Eigen::VectorXd parameters() const;
  void set_parameters(const Eigen::VectorXd& p);

  struct Cache {
    Eigen::MatrixXd x, pre;
  };
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, Cache* cache = nullptr) const;
  /// Returns the input gradient; parameter gradient goes to `grad`.
  Eigen::MatrixXd backward(const Cache& cache, const Eigen::MatrixXd& grad_out,
                           Eigen::VectorXd& grad) const;
};

/// Guarded Gram-Schmidt of the 6D representation (two columns). A vanishing
/// first column falls back to e_x, a second column parallel to the first to
/// the nearest axis.
Rotation rotation_from_6d(const Vec3& a, const Vec3& b);

class PoseModel {
 public:
  PoseModel() = default;
  PoseModel(const NetworkConfig& backbone, const TrainConfig& cfg);

  /// Random backbone and enrichment weights; zero pose heads.
  void init(std::uint64_t seed);

  const TrainConfig& config() const { return config_; }
  const Network& backbone() const { return backbone_; }
  Network& backbone() { return backbone_; }
  const std::vector<int>& levels() const { return levels_; }
  const std::vector<Network>& enrichment() const { return enrich_; }
  std::vector<Network>& enrichment() { return enrich_; }

  bool oracle() const { return oracle_; }
  void set_oracle(bool on) { oracle_ = on; }

  long num_parameters() const;
  Eigen::VectorXd parameters() const;
  void set_parameters(const Eigen::VectorXd& p);

  /// Named tensors in a fixed order (checkpoint layout).
  std::vector<std::pair<std::string, Eigen::MatrixXd>> named_tensors() const;
  void load_named_tensors(const std::vector<std::pair<std::string, Eigen::MatrixXd>>& tensors);

  // Internals used by prediction and training.
  Eigen::MatrixXd head1;  // (3 * vectors) x (scalars + 1)
  Mlp offset2;
  Mlp rot2;

  int stage2_inputs() const;

 private:
  TrainConfig config_;
  Network backbone_;
  std::vector<int> levels_;
  std::vector<Network> enrich_;
  bool oracle_ = false;
};

/// Frame of the scene voxel grid: voxel size from the shape radius so the
/// shape spans 90% of the grid, centroid at the grid center.
GridFrame scene_frame(const PointCloud& cloud, double shape_radius, int grid);

struct Prediction {
  Pose stage1;
  /// Pose after each refinement round (stage1 composed with residuals).
  std::vector<Pose> refined;
  const Pose& final_pose() const { return refined.empty() ? stage1 : refined.back(); }
};

Prediction predict(const PoseModel& model, const SyntheticScene& scene, int refine_iters);
Pose predict_pose(const PoseModel& model, const SyntheticScene& scene, int refine_iters);

struct StepLoss {
  double stage1 = 0;
  double stage2 = 0;
  double total() const { return stage1 + stage2; }
};

/// Loss and parameter gradient (layout of PoseModel::parameters) for one scene.
/// Stage 2 is supervised over max(1, refine_iters) rounds and its loss is the
/// mean over rounds.
StepLoss loss_and_gradient(const PoseModel& model, const SyntheticScene& scene,
                           Eigen::VectorXd& grad);

struct TrainReport {
  std::vector<double> losses;  // mean batch loss per iteration
};

using TrainLogger = std::function<void(int iter, const StepLoss& loss)>;

/// ADAM on the summed stage losses. Deterministic in cfg.seed. Throws
/// kDivergence when the loss stops being finite.
PoseModel train(const NetworkConfig& backbone, const TrainConfig& cfg, TrainReport* report = nullptr,
                const TrainLogger& log = nullptr);

struct Metrics {
  int scenes = 0;
  double rotation_error_deg = 0;
  double translation_error = 0;
  double add_accuracy = 0;  // percent of scenes under the ADD threshold
  double diameter = 0;
};

/// Pose error statistics over scenes drawn from `seed`. ADD uses the shape
/// vertices and a threshold of 10% of the diameter.
Metrics evaluate(const PoseModel& model, int num_scenes, std::uint64_t seed, int refine_iters);
/// Same protocol with the identity rotation and the cloud centroid.
Metrics evaluate_identity_baseline(const TrainConfig& cfg, int num_scenes, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoints

std::vector<std::uint8_t> serialize_checkpoint(const PoseModel& model);
/// Rebuilds the model from the echoed configuration.
PoseModel deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::string& path, const PoseModel& model);
PoseModel load_checkpoint(const std::string& path);

}  // namespace ssconv
