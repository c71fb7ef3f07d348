#include "pidg/physics/residual.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "pidg/ad/ops.hpp"
#include "pidg/common/error.hpp"

namespace pidg::physics {

Eigen::Matrix3d stress_to_matrix(std::span<const double> s) {
  if (s.size() != kStressComponents) throw ShapeError("packed stress needs six components");
  Eigen::Matrix3d m;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = s[stress_index(i, j)];
  return m;
}

std::array<double, kStressComponents> matrix_to_stress(const Eigen::Matrix3d& m) {
  return {m(0, 0), m(1, 1), m(2, 2), m(0, 1), m(0, 2), m(1, 2)};
}

MomentumResidual momentum_residual(const FieldJet& jet, const ResidualOptions& options) {
  const ad::Jet& v = jet.velocity;
  const ad::Jet& s = jet.stress;
  if (v.cols() != 3 || s.cols() != kStressComponents || v.rows() != s.rows()) {
    throw ShapeError("momentum_residual: velocity must be M x 3 and stress M x 6");
  }
  ad::Var accel = v.tangent(3);
  if (options.advection) {
    for (std::size_t i = 0; i < 3; ++i) {
      accel = ad::add(accel, ad::mul_col(v.tangent(i), ad::slice_cols(v.value, i, i + 1)));
    }
  }
  MomentumResidual r;
  r.inertial = options.density == 1.0 ? accel : ad::scale(accel, options.density);
  std::array<ad::Var, 3> ds;
  for (std::size_t i = 0; i < 3; ++i) ds[i] = s.tangent(i);
  std::vector<ad::Var> cols;
  for (std::size_t j = 0; j < 3; ++j) {
    ad::Var c = ad::slice_cols(ds[0], stress_index(0, j), stress_index(0, j) + 1);
    for (std::size_t i = 1; i < 3; ++i) c = ad::add(c, ad::slice_cols(ds[i], stress_index(i, j), stress_index(i, j) + 1));
    cols.push_back(c);
  }
  r.divergence = ad::concat_cols(cols);
  r.residual = ad::sub(r.inertial, r.divergence);
  return r;
}

Eigen::Vector3d momentum_residual(JetField& field, const Eigen::Vector4d& point, std::int64_t id,
                                  const ResidualOptions& options) {
  ad::Tape tape;
  ad::Binder bind(tape);
  const std::int64_t ids[] = {id};
  const FieldJet jet = field.evaluate(bind, ad::Tensor({1, 4}, {point[0], point[1], point[2], point[3]}), ids);
  const ad::Tensor& r = momentum_residual(jet, options).residual.value();
  return Eigen::Vector3d(r[0], r[1], r[2]);
}

ad::Var cmr_loss(const MomentumResidual& r) {
  if (r.residual.rows() == 0) throw ShapeError("cmr_loss needs at least one sample");
  return ad::mean(ad::sum_cols(ad::square(r.residual)));
}

double cmr_loss(JetField& field, const CmrSamples& samples, const ResidualOptions& options) {
  if (samples.points.rows() == 0) throw ShapeError("cmr_loss needs at least one sample");
  ad::Tape tape;
  ad::Binder bind(tape);
  return cmr_loss(momentum_residual(field.evaluate(bind, samples.points, samples.ids), options)).value().item();
}

BlockCmrResult block_sampled_cmr(JetField& field, const CmrSamples& samples, const BlockCmrOptions& options,
                                 std::mt19937_64* rng) {
  const std::size_t m = samples.points.rows();
  if (m == 0) throw ShapeError("block_sampled_cmr needs at least one sample");
  if (samples.ids.size() != m) throw ShapeError("block_sampled_cmr: one id per sample");
  if (options.block_size < 1) throw ConfigError("block_size must be at least 1");
  if (!(options.sample_fraction > 0.0 && options.sample_fraction <= 1.0)) {
    throw ConfigError("sample_fraction must be in (0, 1]");
  }
  std::vector<std::size_t> chosen(m);
  std::iota(chosen.begin(), chosen.end(), 0);
  if (options.sample_fraction < 1.0) {
    if (!rng) throw ConfigError("subsampling needs a random generator");
    const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(options.sample_fraction * m)));
    for (std::size_t i = 0; i < keep; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, m - 1);
      std::swap(chosen[i], chosen[pick(*rng)]);
    }
    chosen.resize(keep);
    std::sort(chosen.begin(), chosen.end());
  }
  std::vector<std::size_t> by_id = chosen;
  std::stable_sort(by_id.begin(), by_id.end(),
                   [&](std::size_t a, std::size_t b) { return samples.ids[a] < samples.ids[b]; });
  const std::size_t total = by_id.size();
  BlockCmrResult result;
  result.samples = total;
  for (std::size_t begin = 0; begin < total; begin += options.block_size) {
    const std::size_t end = std::min(total, begin + options.block_size);
    // Contiguous in id; rows keep their original relative order.
    std::vector<std::size_t> rows(by_id.begin() + static_cast<std::ptrdiff_t>(begin),
                                  by_id.begin() + static_cast<std::ptrdiff_t>(end));
    std::sort(rows.begin(), rows.end());
    ad::Tensor pts({rows.size(), 4});
    std::vector<std::int64_t> ids;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t k = 0; k < 4; ++k) pts.at(r, k) = samples.points.at(rows[r], k);
      ids.push_back(samples.ids[rows[r]]);
    }
    const double weight = static_cast<double>(rows.size()) / static_cast<double>(total);
    ad::Tape tape;
    ad::Binder bind(tape);
    ad::Var loss = cmr_loss(momentum_residual(field.evaluate(bind, pts, ids), options.residual));
    result.loss += weight * loss.value().item();
    if (options.grad_scale != 0.0) tape.backward(loss, options.grad_scale * weight);
    ++result.blocks;
  }
  return result;
}

}  // namespace pidg::physics
