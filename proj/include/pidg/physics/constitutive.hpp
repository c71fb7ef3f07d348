#pragma once

#include <Eigen/Core>
#include <variant>

namespace pidg::physics {

struct Elastic {
  double lambda = 1.0;
  double mu = 1.0;
};
struct IdealFluid {
  double pressure = 0.0;
};
struct ViscousFluid {
  double pressure = 0.0;
  double eta = 0.0;   // shear viscosity
  double zeta = 0.0;  // bulk viscosity
};
struct Rigid {};

using ConstitutiveLaw = std::variant<Elastic, IdealFluid, ViscousFluid, Rigid>;

struct OracleStress {
  Eigen::Matrix3d stress = Eigen::Matrix3d::Zero();
  // Frobenius norm of the strain for the rigid law, zero otherwise.
  double constraint_violation = 0.0;
};

// `state` is the strain for elastic and rigid laws, the strain rate for a
// viscous fluid, and is ignored by an ideal fluid. It must be symmetric.
OracleStress oracle_stress(const ConstitutiveLaw& law, const Eigen::Matrix3d& state);

struct DeviatoricSplit {
  Eigen::Matrix3d isotropic;
  Eigen::Matrix3d deviatoric;
};

// sigma = tr(sigma)/3 I + (sigma - tr(sigma)/3 I). Diagnostic only.
DeviatoricSplit deviatoric_split(const Eigen::Matrix3d& sigma);

}  // namespace pidg::physics
