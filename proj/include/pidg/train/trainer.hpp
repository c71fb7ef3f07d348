#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <json.hpp>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "pidg/deform/deformation.hpp"
#include "pidg/flow/flow_field.hpp"
#include "pidg/material/material_field.hpp"
#include "pidg/render/rasterize.hpp"
#include "pidg/scene/gaussian_cloud.hpp"
#include "pidg/scenegen/scenegen.hpp"
#include "pidg/train/adam.hpp"
#include "pidg/train/losses.hpp"

namespace pidg::train {

enum class Ablation { kNone, kNoLpfm, kNoPhysics };

Ablation ablation_from_string(const std::string& s);
std::string to_string(Ablation a);

struct LearningRates {
  // Position rates are multiplied by the scene extent and decay log-linearly.
  double position = 1.6e-3;
  double position_final = 1.6e-5;
  double rotation = 1e-3;
  double scale = 5e-3;
  double sh = 2.5e-3;
  double opacity = 5e-2;
  double decoder = 2e-3;
  double material = 2e-3;
  double grid_multiplier = 20.0;
  // Network rates drop by 10x every this fraction of the budget.
  double decay_fraction = 0.4;
};

struct RunConfig {
  std::string scene;
  std::string out;
  std::uint64_t seed = 42;
  int width = 0;  // 0 takes the scene's size; otherwise must match it
  int height = 0;
  int iterations = 2000;
  double stage_fraction = 0.6;
  // Frames become eligible for sampling one by one over this fraction of the
  // budget, starting from the first frame.
  double time_curriculum = 0.25;
  LossWeights weights;
  Ablation ablation = Ablation::kNone;
  std::size_t top_k = 8;
  std::size_t cmr_samples = 4096;
  std::size_t cmr_block = 1024;
  int densify_from = 100;
  int densify_every = 100;
  double densify_threshold = 2e-4;  // normalized device units
  double percent_dense = 0.01;
  double prune_scale = 0.015;
  double dynamic_fraction = 0.3;
  std::size_t max_gaussians = 300;
  double init_opacity = 0.1;
  deform::DeformationConfig deformation{.spatial_levels = 8,
                                        .spatial_base = 8,
                                        .spatial_max = 128,
                                        .temporal_levels = 4,
                                        .time_resolution = 8,
                                        .table_size_log2 = 12,
                                        .feature_dim = 2,
                                        .attention_width = 32,
                                        .decoder_width = 64};
  material::MaterialConfig material{.plane_levels = 3,
                                    .plane_base = 8,
                                    .plane_max = 32,
                                    .plane_table_log2 = 12,
                                    .plane_init = 0.1,
                                    .fourier_frequencies = 4,
                                    .embedding_dim = 8,
                                    .embedding_init = 0.1,
                                    .hidden_width = 64};
  LearningRates rates;
  int log_every = 10;
  int checkpoint_every = 0;  // 0: final checkpoint only
  bool identity_deformation = false;
};

// Every problem with the config, empty when it is usable.
std::vector<std::string> config_errors(const RunConfig& c);
// Throws ConfigError listing every problem.
void validate(const RunConfig& c);
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& c);
// Weights after applying the ablation switch.
LossWeights effective_weights(const RunConfig& c);

struct StepMetrics {
  int iteration = 0;
  double loss_total = 0;
  double loss_renders = 0;
  double loss_cmr = 0;
  double loss_lpfm = 0;
  double psnr = 0;
  std::size_t num_gaussians = 0;
};

inline constexpr const char* kMetricsHeader = "iter,loss_total,loss_renders,loss_cmr,loss_lpfm,psnr,num_gaussians";
std::string metrics_row(const StepMetrics& m);

struct PredictedFlows {
  flow::FlowField gaussian;
  flow::FlowField velocity;
};

struct Evaluation {
  double psnr = 0;
  double ssim = 0;
  double flow_epe = 0;        // flow_g vs analytic motion flow, masked
  std::size_t flow_pixels = 0;
  double mean_residual = 0;   // mean |r| at particle positions over all frames
};

class Trainer {
 public:
  Trainer(RunConfig config, scenegen::SyntheticScene scene);
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const RunConfig& config() const { return config_; }
  const scenegen::SyntheticScene& scene() const { return scene_; }
  int iteration() const { return iteration_; }
  int stage_switch() const;
  bool dynamic_stage() const { return dynamic_stage_; }
  double extent() const { return extent_; }

  // One optimizer step; throws NonFiniteError naming the offending term.
  StepMetrics step();

  scene::GaussianCloud& cloud() { return cloud_; }
  const scene::GaussianCloud& cloud() const { return cloud_; }
  deform::DeformationField& deformation() { return *deformation_; }
  material::MaterialField& material() { return *material_; }
  Adam& optimizer() { return adam_; }

  // Deformed particle centers at time t.
  std::vector<Eigen::Vector3d> positions(double t);
  Image render(const render::Camera& camera, double t, DepthMap* depth = nullptr);
  // flow_g and flow_v on frame f toward f + 1, seen from camera f.
  PredictedFlows predict_flows(int f);
  // Same from time t to t_next through an arbitrary camera.
  PredictedFlows predict_flows(const render::Camera& camera, double t, double t_next);
  // Per-particle screen velocity (pixels per unit time) and projected centers at t.
  struct ScreenMotion {
    ad::Tensor centers;   // N x 2
    ad::Tensor velocity;  // N x 2
    std::vector<bool> visible;
  };
  ScreenMotion screen_motion(const render::Camera& camera, double t);
  double mean_residual();
  Evaluation evaluate();

  // Named tensors, optimizer state, RNG and counters; the config is embedded.
  void save(const std::filesystem::path& path) const;
  static std::unique_ptr<Trainer> load(const std::filesystem::path& path, scenegen::SyntheticScene scene);

 private:
  deform::DeformedPose pose_at(ad::Binder& bind, double t);
  std::vector<ad::Parameter*> named_parameters();
  void setup_optimizer();
  void update_rates();
  void densify_and_prune();
  void switch_stage();
  ad::Tensor normalized_points(double t) const;
  ad::Tensor view_directions(const render::Camera& camera) const;
  render::RasterSettings raster_settings() const;

  RunConfig config_;
  scenegen::SyntheticScene scene_;
  double extent_ = 1.0;
  scene::GaussianCloud cloud_{0};
  std::unique_ptr<deform::DeformationField> deformation_;
  std::unique_ptr<material::MaterialField> material_;
  Adam adam_;
  std::mt19937_64 rng_;
  int iteration_ = 0;
  bool dynamic_stage_ = false;
  std::vector<double> grad_accum_;
  std::vector<double> grad_count_;
  std::vector<ad::Tensor> targets_;
  std::vector<flow::FlowField> gt_motion_;
  std::vector<Mask> gt_mask_;
};

// Steps `trainer` to its iteration budget, appending metric rows to
// <out>/metrics.csv (rows past the resume point are dropped first) and
// writing checkpoints to <out>/ckpt_<iter>.bin and <out>/final.bin.
void run(Trainer& trainer, std::ostream* log = nullptr);

}  // namespace pidg::train
