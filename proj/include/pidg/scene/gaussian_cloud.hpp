#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "pidg/ad/tape.hpp"

namespace pidg::scene {

// Spherical-harmonics coefficient count per particle for degree 0 or 1.
std::size_t sh_coefficients(int degree);

struct GaussianParticle {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Eigen::Vector4d rotation{1, 0, 0, 0};  // (w, x, y, z)
  Eigen::Vector3d log_scale = Eigen::Vector3d::Zero();
  std::vector<double> sh;  // (degree+1)^2 basis functions, three channels each
  double opacity_logit = 0.0;
  std::int64_t id = -1;
  bool dynamic = true;
};

// Row mapping produced by densify/prune: new row i copies old row source[i].
// Rows with fresh = true carry new optimizer state.
struct RowRemap {
  std::vector<std::size_t> source;
  std::vector<bool> fresh;
  bool identity(std::size_t old_rows) const;
};

// Canonical Gaussians in struct-of-arrays form. Each attribute is a learnable
// Parameter with one row per particle.
class GaussianCloud {
 public:
  explicit GaussianCloud(int sh_degree = 0);

  std::size_t size() const { return ids_.size(); }
  int sh_degree() const { return sh_degree_; }
  std::size_t sh_size() const { return sh_coefficients(sh_degree_); }

  // Appends a particle. A negative id takes the next free id.
  std::int64_t add(const GaussianParticle& p);
  GaussianParticle particle(std::size_t i) const;

  ad::Parameter& means() { return means_; }
  ad::Parameter& quats() { return quats_; }
  ad::Parameter& log_scales() { return log_scales_; }
  ad::Parameter& sh() { return sh_; }
  ad::Parameter& opacity() { return opacity_; }
  const ad::Parameter& means() const { return means_; }
  const ad::Parameter& quats() const { return quats_; }
  const ad::Parameter& log_scales() const { return log_scales_; }
  const ad::Parameter& sh() const { return sh_; }
  const ad::Parameter& opacity() const { return opacity_; }
  std::vector<ad::Parameter*> parameters();

  const std::vector<std::int64_t>& ids() const { return ids_; }
  const std::vector<bool>& dynamic() const { return dynamic_; }
  void set_dynamic(std::vector<bool> flags);
  std::int64_t next_id() const { return next_id_; }
  void set_next_id(std::int64_t id) { next_id_ = id; }
  void set_ids(std::vector<std::int64_t> ids);

  // Rebuilds every attribute from `remap`; rows are copied verbatim.
  void apply(const RowRemap& remap);
  void normalize_quaternions();

 private:
  int sh_degree_;
  ad::Parameter means_, quats_, log_scales_, sh_, opacity_;
  std::vector<std::int64_t> ids_;
  std::vector<bool> dynamic_;
  std::int64_t next_id_ = 0;
};

// Sigma = R diag(exp(s))^2 R^T.
Eigen::Matrix3d covariance(const Eigen::Vector4d& unit_q, const Eigen::Vector3d& log_scale);

struct DensifyConfig {
  double grad_threshold = 2e-4;
  // Particles whose largest scale exceeds percent_dense * extent are split,
  // smaller ones cloned.
  double percent_dense = 0.01;
  double extent = 1.0;
  double split_factor = 1.6;
  std::size_t max_particles = 100000;
};

// Clones small and splits large particles whose mean accumulated screen-space
// positional gradient reaches the threshold. Children keep the parent id.
RowRemap densify(GaussianCloud& cloud, std::span<const double> mean_grad_norm,
                 const DensifyConfig& config, std::mt19937_64& rng);

inline constexpr double kOpacityFloor = 0.005;

// Drops particles with max world-space scale > threshold * extent or opacity
// below the floor.
RowRemap prune_by_scale(GaussianCloud& cloud, double threshold, double extent,
                        double opacity_floor = kOpacityFloor);

}  // namespace pidg::scene
