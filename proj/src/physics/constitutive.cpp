#include "pidg/physics/constitutive.hpp"

#include "pidg/common/error.hpp"

namespace pidg::physics {
namespace {

template <class... Ts>
struct Overload : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overload(Ts...) -> Overload<Ts...>;

void require_symmetric(const Eigen::Matrix3d& m) {
  if (!m.allFinite()) throw NonFiniteError("constitutive state is not finite");
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + m.cwiseAbs().maxCoeff())) {
    throw DomainError("constitutive state must be symmetric");
  }
}

}  // namespace

OracleStress oracle_stress(const ConstitutiveLaw& law, const Eigen::Matrix3d& state) {
  const Eigen::Matrix3d I = Eigen::Matrix3d::Identity();
  return std::visit(
      Overload{
          [&](const Elastic& e) {
            require_symmetric(state);
            return OracleStress{e.lambda * state.trace() * I + 2.0 * e.mu * state, 0.0};
          },
          [&](const IdealFluid& f) { return OracleStress{-f.pressure * I, 0.0}; },
          [&](const ViscousFluid& f) {
            require_symmetric(state);
            return OracleStress{-f.pressure * I + 2.0 * f.eta * state + f.zeta * state.trace() * I, 0.0};
          },
          [&](const Rigid&) {
            require_symmetric(state);
            // Stress is a Lagrange multiplier for the constraint and is not
            // determined by the state.
            return OracleStress{Eigen::Matrix3d::Zero(), state.norm()};
          },
      },
      law);
}

DeviatoricSplit deviatoric_split(const Eigen::Matrix3d& sigma) {
  const Eigen::Matrix3d iso = sigma.trace() / 3.0 * Eigen::Matrix3d::Identity();
  return {iso, sigma - iso};
}

}  // namespace pidg::physics
