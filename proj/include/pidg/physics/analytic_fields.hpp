#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "pidg/physics/constitutive.hpp"
#include "pidg/physics/field.hpp"

namespace pidg::physics {

// Closed-form velocity/stress pairs that satisfy momentum balance exactly.
class AnalyticField : public JetField {
 public:
  virtual Eigen::Vector3d velocity(const Eigen::Vector4d& p) const = 0;
  virtual Eigen::Matrix3d stress(const Eigen::Vector4d& p) const = 0;
};

// Uniform velocity and uniform stress.
class ConstantAdvection final : public AnalyticField {
 public:
  ConstantAdvection(Eigen::Vector3d v, Eigen::Matrix3d sigma) : v_(v), sigma_(sigma) {}
  FieldJet evaluate(ad::Binder& bind, const ad::Tensor& points, std::span<const std::int64_t> ids) override;
  Eigen::Vector3d velocity(const Eigen::Vector4d&) const override { return v_; }
  Eigen::Matrix3d stress(const Eigen::Vector4d&) const override { return sigma_; }

 private:
  Eigen::Vector3d v_;
  Eigen::Matrix3d sigma_;
};

// v = (gamma y, 0, 0) with uniform stress.
class ShearFlow final : public AnalyticField {
 public:
  ShearFlow(double gamma, Eigen::Matrix3d sigma) : gamma_(gamma), sigma_(sigma) {}
  FieldJet evaluate(ad::Binder& bind, const ad::Tensor& points, std::span<const std::int64_t> ids) override;
  Eigen::Vector3d velocity(const Eigen::Vector4d& p) const override { return {gamma_ * p[1], 0.0, 0.0}; }
  Eigen::Matrix3d stress(const Eigen::Vector4d&) const override { return sigma_; }

 private:
  double gamma_;
  Eigen::Matrix3d sigma_;
};

// Fluid at rest under sigma = -p I with p = p0 + g . x. Balanced only when
// g = 0; a nonzero g gives residual +g.
class Hydrostatic final : public AnalyticField {
 public:
  explicit Hydrostatic(double p0, Eigen::Vector3d gradient = Eigen::Vector3d::Zero())
      : p0_(p0), gradient_(gradient) {}
  FieldJet evaluate(ad::Binder& bind, const ad::Tensor& points, std::span<const std::int64_t> ids) override;
  Eigen::Vector3d velocity(const Eigen::Vector4d&) const override { return Eigen::Vector3d::Zero(); }
  Eigen::Matrix3d stress(const Eigen::Vector4d& p) const override {
    return -(p0_ + gradient_.dot(p.head<3>())) * Eigen::Matrix3d::Identity();
  }

 private:
  double p0_;
  Eigen::Vector3d gradient_;
};

// Rigid body spinning at omega about a center moving with v0, held together by
// the centripetal pressure sigma = -rho/2 |omega x r|^2 I.
class RigidRotation final : public AnalyticField {
 public:
  RigidRotation(Eigen::Vector3d omega, Eigen::Vector3d center, Eigen::Vector3d v0, double density = 1.0)
      : omega_(omega), center_(center), v0_(v0), density_(density) {}
  FieldJet evaluate(ad::Binder& bind, const ad::Tensor& points, std::span<const std::int64_t> ids) override;
  Eigen::Vector3d velocity(const Eigen::Vector4d& p) const override;
  Eigen::Matrix3d stress(const Eigen::Vector4d& p) const override;

 private:
  Eigen::Vector3d omega_, center_, v0_;
  double density_;
};

// Longitudinal plane wave along x in a linear elastic solid:
// v = A cos(k (x - c t)) e_x with c^2 = (lambda + 2 mu) / rho and the stress
// of the elastic law applied to the matching displacement. Satisfies the
// linearized balance (no advection term).
class ElasticWave final : public AnalyticField {
 public:
  ElasticWave(double amplitude, double wavenumber, Elastic law, double density = 1.0);
  FieldJet evaluate(ad::Binder& bind, const ad::Tensor& points, std::span<const std::int64_t> ids) override;
  Eigen::Vector3d velocity(const Eigen::Vector4d& p) const override;
  Eigen::Matrix3d stress(const Eigen::Vector4d& p) const override;
  double wave_speed() const { return speed_; }
  // Displacement whose time derivative is velocity().
  Eigen::Vector3d displacement(const Eigen::Vector4d& p) const;

 private:
  double amplitude_, k_;
  Elastic law_;
  double density_, speed_;
};

}  // namespace pidg::physics
