#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <memory>
#include <string>
#include <vector>

#include "pidg/common/image.hpp"
#include "pidg/flow/flow_field.hpp"
#include "pidg/material/material_field.hpp"
#include "pidg/physics/analytic_fields.hpp"
#include "pidg/render/camera.hpp"
#include "pidg/scene/gaussian_cloud.hpp"

namespace pidg::scenegen {

enum class MotionKind { kRigid, kShear, kElasticWave, kAdvect };

struct MotionSpec {
  MotionKind kind = MotionKind::kRigid;
  // rigid: x(t) = R(omega t)(x0 - center) + center + velocity t
  Eigen::Vector3d velocity = Eigen::Vector3d::Zero();  // also the advect velocity
  Eigen::Vector3d omega = Eigen::Vector3d::Zero();
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  // shear: x(t) = x0 + (gamma t y0, 0, 0)
  double gamma = 0.0;
  // longitudinal elastic wave along x, displacement of the canonical point
  double amplitude = 0.0;
  double wavenumber = 1.0;
  physics::Elastic law{1.0, 1.0};
  double density = 1.0;
};

struct OrbitSpec {
  Eigen::Vector3d target = Eigen::Vector3d::Zero();
  double radius = 4.0;
  double height = 0.0;
  double arc_degrees = 20.0;  // total sweep over the sequence
};

struct SceneSpec {
  int width = 64;
  int height = 64;
  double focal = 70.0;
  int frames = 8;
  std::uint64_t seed = 42;
  MotionSpec motion;
  OrbitSpec orbit;
  std::size_t particles = 120;
  double blob_radius = 0.6;
  double scale_min = 0.05;
  double scale_max = 0.12;
  double opacity_min = 0.6;
  double opacity_max = 0.95;
  // Sparse jittered points at t = 0 handed to the trainer as its initial cloud.
  std::size_t init_points = 100;
  double init_jitter = 0.05;
};

SceneSpec spec_from_json(const nlohmann::json& j);
nlohmann::json spec_to_json(const SceneSpec& s);

// Closed-form continuum motion mapping canonical (t = 0) points to time t.
class Motion {
 public:
  explicit Motion(const MotionSpec& spec);
  Eigen::Vector3d position(const Eigen::Vector3d& x0, double t) const;
  // Canonical point that sits at x at time t.
  Eigen::Vector3d inverse(const Eigen::Vector3d& x, double t) const;
  // Velocity of the material point that started at x0.
  Eigen::Vector3d velocity(const Eigen::Vector3d& x0, double t) const;
  Eigen::Matrix3d strain(const Eigen::Vector3d& x0, double t) const;
  Eigen::Matrix3d stress(const Eigen::Vector3d& x0, double t) const;
  Eigen::Quaterniond rotation(double t) const;
  // Eulerian velocity/stress field in physical (x, y, z, t).
  physics::AnalyticField& field() const { return *field_; }
  // True when the field balances momentum only without the advection term.
  bool linearized() const { return spec_.kind == MotionKind::kElasticWave; }
  const MotionSpec& spec() const { return spec_; }

 private:
  MotionSpec spec_;
  std::unique_ptr<physics::AnalyticField> field_;
};

struct ParticleTruth {
  Eigen::Vector3d position;
  Eigen::Vector3d velocity;
  Eigen::Matrix3d stress;
  Eigen::Matrix3d strain;
};

struct SyntheticScene {
  SceneSpec spec;
  scene::GaussianCloud cloud{0};
  std::vector<render::Camera> cameras;
  std::vector<double> times;
  std::vector<Image> frames;
  std::vector<DepthMap> depths;
  std::vector<Mask> masks;
  std::vector<flow::FlowField> backward;  // on frame f + 1, pointing into frame f
  std::vector<flow::FlowField> forward;   // on frame f, pointing into frame f + 1
  std::vector<flow::FlowField> motion;    // object motion f -> f + 1 on frame f, camera held at f
  material::SpaceTimeBounds bounds;
  std::vector<Eigen::Vector3d> init_points;
};

// Validates the spec (>= 2 frames, >= 1 particle, positive orbit radius,
// focal and image size) and builds every asset.
SyntheticScene generate(const SceneSpec& spec);

// Ground-truth state of every particle at time t in [0,1].
std::vector<ParticleTruth> analytic_truth(const SyntheticScene& scene, double t);

// Ground-truth cloud posed at time t.
scene::GaussianCloud posed_cloud(const SyntheticScene& scene, double t);

// Renders a degree-0 cloud on a black background. Depth, when requested, is
// the coverage-normalized expected depth where coverage >= 0.5 and 0 elsewhere.
Image render_cloud(const scene::GaussianCloud& cloud, const render::Camera& camera, DepthMap* depth = nullptr);

// Pixels of frame f whose object motion exceeds this many pixels.
inline constexpr double kMotionThreshold = 0.1;

// Asset file names inside a scene directory.
std::string frame_name(int f);
std::string depth_name(int f);
std::string mask_name(int f);
std::string backward_name(int f);  // f >= 1
std::string forward_name(int f);   // f <= frames - 2
std::string motion_name(int f);    // f <= frames - 2

void write_scene(const SyntheticScene& scene, const std::filesystem::path& dir);
SyntheticScene read_scene(const std::filesystem::path& dir);

}  // namespace pidg::scenegen
