#include "pidg/physics/analytic_fields.hpp"

#include <cmath>
#include <vector>

#include "pidg/ad/ops.hpp"
#include "pidg/common/error.hpp"

namespace pidg::physics {
namespace {

ad::Jet constant_columns(ad::Tape& tape, std::size_t rows, std::span<const double> values) {
  ad::Tensor t({rows, values.size()});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < values.size(); ++c) t.at(r, c) = values[c];
  return ad::jet_constant(tape.constant(std::move(t)));
}

ad::Jet zeros(ad::Tape& tape, std::size_t rows, std::size_t cols) {
  return ad::jet_constant(tape.constant(ad::Tensor({rows, cols}, 0.0)));
}

ad::Var matrix(ad::Tape& tape, const Eigen::MatrixXd& m) {
  ad::Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.at(r, c) = m(r, c);
  return tape.constant(std::move(t));
}

void check_points(const ad::Tensor& points) {
  if (points.rank() != 2 || points.cols() != 4) throw ShapeError("field points must be M x 4");
}

Eigen::Matrix3d cross_matrix(const Eigen::Vector3d& w) {
  Eigen::Matrix3d m;
  m << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  return m;
}

}  // namespace

FieldJet ConstantAdvection::evaluate(ad::Binder& bind, const ad::Tensor& points, std::span<const std::int64_t>) {
  check_points(points);
  const auto s = matrix_to_stress(sigma_);
  const double v[] = {v_.x(), v_.y(), v_.z()};
  return {constant_columns(bind.tape(), points.rows(), v), constant_columns(bind.tape(), points.rows(), s)};
}

FieldJet ShearFlow::evaluate(ad::Binder& bind, const ad::Tensor& points, std::span<const std::int64_t>) {
  check_points(points);
  ad::Tape& tape = bind.tape();
  const std::size_t m = points.rows();
  const ad::Jet x = ad::jet_coordinates(tape, points);
  const ad::Jet parts[] = {ad::jet_scale(ad::jet_slice_cols(x, 1, 2), gamma_), zeros(tape, m, 2)};
  const auto s = matrix_to_stress(sigma_);
  return {ad::jet_concat_cols(parts), constant_columns(tape, m, s)};
}

FieldJet Hydrostatic::evaluate(ad::Binder& bind, const ad::Tensor& points, std::span<const std::int64_t>) {
  check_points(points);
  ad::Tape& tape = bind.tape();
  const std::size_t m = points.rows();
  const ad::Jet x = ad::jet_coordinates(tape, points);
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(4, 1);
  w.block<3, 1>(0, 0) = -gradient_;
  const ad::Jet neg_p = ad::jet_affine(x, matrix(tape, w), matrix(tape, Eigen::MatrixXd::Constant(1, 1, -p0_)));
  const ad::Jet parts[] = {neg_p, neg_p, neg_p, zeros(tape, m, 3)};
  return {zeros(tape, m, 3), ad::jet_concat_cols(parts)};
}

Eigen::Vector3d RigidRotation::velocity(const Eigen::Vector4d& p) const {
  const Eigen::Vector3d r = p.head<3>() - center_ - v0_ * p[3];
  return v0_ + omega_.cross(r);
}

Eigen::Matrix3d RigidRotation::stress(const Eigen::Vector4d& p) const {
  const Eigen::Vector3d r = p.head<3>() - center_ - v0_ * p[3];
  return -0.5 * density_ * omega_.cross(r).squaredNorm() * Eigen::Matrix3d::Identity();
}

FieldJet RigidRotation::evaluate(ad::Binder& bind, const ad::Tensor& points, std::span<const std::int64_t>) {
  check_points(points);
  ad::Tape& tape = bind.tape();
  const std::size_t m = points.rows();
  const ad::Jet x = ad::jet_coordinates(tape, points);
  // Row vectors: r = x - c0 - v0 t, (omega x r)^T = r^T [omega]x^T.
  Eigen::MatrixXd wr(4, 3);
  wr.topRows<3>() = Eigen::Matrix3d::Identity();
  wr.row(3) = -v0_.transpose();
  const ad::Jet r = ad::jet_affine(x, matrix(tape, wr), matrix(tape, -center_.transpose()));
  const ad::Var cross_t = matrix(tape, cross_matrix(omega_).transpose());
  const ad::Jet w = ad::jet_affine(r, cross_t, matrix(tape, Eigen::MatrixXd::Zero(1, 3)));
  const ad::Jet v = ad::jet_affine(r, cross_t, matrix(tape, v0_.transpose()));
  const ad::Jet neg_p = ad::jet_affine(ad::jet_mul(w, w), matrix(tape, Eigen::MatrixXd::Constant(3, 1, -0.5 * density_)),
                                       matrix(tape, Eigen::MatrixXd::Zero(1, 1)));
  const ad::Jet parts[] = {neg_p, neg_p, neg_p, zeros(tape, m, 3)};
  return {v, ad::jet_concat_cols(parts)};
}

ElasticWave::ElasticWave(double amplitude, double wavenumber, Elastic law, double density)
    : amplitude_(amplitude), k_(wavenumber), law_(law), density_(density) {
  if (!(density > 0.0) || !(law.lambda + 2.0 * law.mu > 0.0) || wavenumber == 0.0) {
    throw DomainError("elastic wave needs positive density, modulus and a nonzero wavenumber");
  }
  speed_ = std::sqrt((law.lambda + 2.0 * law.mu) / density);
}

Eigen::Vector3d ElasticWave::velocity(const Eigen::Vector4d& p) const {
  return {amplitude_ * std::cos(k_ * (p[0] - speed_ * p[3])), 0.0, 0.0};
}

Eigen::Vector3d ElasticWave::displacement(const Eigen::Vector4d& p) const {
  return {-amplitude_ / (k_ * speed_) * std::sin(k_ * (p[0] - speed_ * p[3])), 0.0, 0.0};
}

Eigen::Matrix3d ElasticWave::stress(const Eigen::Vector4d& p) const {
  const double exx = -amplitude_ / speed_ * std::cos(k_ * (p[0] - speed_ * p[3]));
  Eigen::Matrix3d e = Eigen::Matrix3d::Zero();
  e(0, 0) = exx;
  return oracle_stress(law_, e).stress;
}

FieldJet ElasticWave::evaluate(ad::Binder& bind, const ad::Tensor& points, std::span<const std::int64_t>) {
  check_points(points);
  ad::Tape& tape = bind.tape();
  const std::size_t m = points.rows();
  const ad::Jet x = ad::jet_coordinates(tape, points);
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(4, 1);
  w(0, 0) = k_;
  w(3, 0) = -k_ * speed_;
  const ad::Jet c = ad::jet_cos(ad::jet_affine(x, matrix(tape, w), matrix(tape, Eigen::MatrixXd::Zero(1, 1))));
  const ad::Jet exx = ad::jet_scale(c, -amplitude_ / speed_);
  const ad::Jet vparts[] = {ad::jet_scale(c, amplitude_), zeros(tape, m, 2)};
  const ad::Jet sparts[] = {ad::jet_scale(exx, law_.lambda + 2.0 * law_.mu), ad::jet_scale(exx, law_.lambda),
                            ad::jet_scale(exx, law_.lambda), zeros(tape, m, 3)};
  return {ad::jet_concat_cols(vparts), ad::jet_concat_cols(sparts)};
}

}  // namespace pidg::physics
