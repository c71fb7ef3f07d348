#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "pidg/grid/hash_grid.hpp"
#include "pidg/nn/linear.hpp"
#include "pidg/physics/field.hpp"

namespace pidg::material {

struct MaterialConfig {
  std::size_t plane_levels = 4;
  double plane_base = 16;
  double plane_max = 256;
  unsigned plane_table_log2 = 16;  // 256^2 planes stay dense
  double plane_init = 0.1;
  std::size_t fourier_frequencies = 6;
  std::size_t embedding_dim = 64;
  double embedding_init = 0.1;
  std::size_t hidden_width = 256;
};

// Axis-aligned box mapping physical (x, y, z, t) onto [0,1]^4.
struct SpaceTimeBounds {
  Eigen::Vector3d lo = Eigen::Vector3d::Zero();
  Eigen::Vector3d hi = Eigen::Vector3d::Ones();
  double t0 = 0.0;
  double t1 = 1.0;

  Eigen::Vector4d extent() const { return {hi.x() - lo.x(), hi.y() - lo.y(), hi.z() - lo.z(), t1 - t0}; }
  Eigen::Vector4d normalize(const Eigen::Vector4d& p) const;
  // Clamps a physical point into the box.
  Eigen::Vector4d clamp(const Eigen::Vector4d& p) const;
};

// Axis pairs of the six feature planes: XZ, XY, YZ, XT, YT, ZT.
inline constexpr std::array<std::array<std::size_t, 2>, 6> kPlaneAxes{
    {{0, 2}, {0, 1}, {1, 2}, {0, 3}, {1, 3}, {2, 3}}};

// (sin(w_k t), cos(w_k t)) pairs with w_k = 2^(k-1) pi, k = 1..n, for an M x 1 input.
ad::Var fourier_encode(const ad::Var& t, std::size_t n);
std::vector<double> fourier_encode(double t, std::size_t n);

struct MaterialOutput {
  ad::Var velocity;  // M x 3
  ad::Var stress;    // M x 6, packed (xx, yy, zz, xy, xz, yz)
};

// Velocity and stress per particle from six plane features, a Fourier time
// code and a per-id embedding.
class MaterialField final : public physics::JetField {
 public:
  MaterialField(const MaterialConfig& config, const SpaceTimeBounds& bounds, std::size_t id_capacity,
                std::uint64_t seed);

  const MaterialConfig& config() const { return config_; }
  const SpaceTimeBounds& bounds() const { return bounds_; }
  void set_bounds(const SpaceTimeBounds& b) { bounds_ = b; }
  std::size_t feature_dim() const { return 6 + 2 * config_.fourier_frequencies + config_.embedding_dim; }
  std::size_t id_capacity() const { return embedding_.value.rows(); }
  // Grows the embedding table so ids below `capacity` are valid.
  void ensure_ids(std::size_t capacity);

  // `points` is M x 4 normalized; coordinates take gradients if `points` does.
  ad::Var featurize(ad::Binder& bind, const ad::Var& points, std::span<const std::int64_t> ids);
  MaterialOutput predict(ad::Binder& bind, const ad::Var& features);

  // Predictions at physical points.
  MaterialOutput predict_at(ad::Binder& bind, const ad::Tensor& points, std::span<const std::int64_t> ids);
  physics::FieldJet evaluate(ad::Binder& bind, const ad::Tensor& points,
                             std::span<const std::int64_t> ids) override;

  std::vector<ad::Parameter*> plane_parameters();
  std::vector<ad::Parameter*> network_parameters();  // hidden W, b, out W, b
  ad::Parameter& embedding() { return embedding_; }
  const std::vector<grid::MultiResGrid>& planes() const { return planes_; }
  void reset_output();

 private:
  ad::Tensor normalized(const ad::Tensor& points) const;
  ad::Var embed(ad::Binder& bind, std::span<const std::int64_t> ids, std::size_t rows);

  MaterialConfig config_;
  SpaceTimeBounds bounds_;
  std::mt19937_64 rng_;
  std::vector<grid::MultiResGrid> planes_;
  ad::Parameter embedding_;
  nn::Linear hidden_;
  nn::Linear output_;
};

}  // namespace pidg::material
