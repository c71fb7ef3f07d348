#include "pidg/deform/deformation.hpp"

#include <random>

#include "pidg/ad/ops.hpp"
#include "pidg/common/error.hpp"
#include "pidg/geometry/quaternion.hpp"

namespace pidg::deform {
namespace {

constexpr std::size_t kHeadWidth = 14;

grid::GridConfig grid_config(const DeformationConfig& c, bool temporal) {
  grid::GridConfig g;
  g.dims = 3;
  g.levels = temporal ? c.temporal_levels : c.spatial_levels;
  g.base_resolution = {c.spatial_base, c.spatial_base, c.spatial_base};
  g.max_resolution = {c.spatial_max, c.spatial_max, c.spatial_max};
  if (temporal) {
    g.base_resolution[2] = c.time_resolution;
    g.max_resolution[2] = c.time_resolution;
  }
  g.table_size_log2 = c.table_size_log2;
  g.feature_dim = c.feature_dim;
  return g;
}

ad::Tensor columns(const ad::Tensor& points, std::array<std::size_t, 3> cols) {
  ad::Tensor out({points.rows(), 3});
  for (std::size_t i = 0; i < points.rows(); ++i)
    for (std::size_t k = 0; k < 3; ++k) out.at(i, k) = points.at(i, cols[k]);
  return out;
}

}  // namespace

DeformationField::DeformationField(const DeformationConfig& config, std::uint64_t seed)
    : config_(config) {
  if (config_.time_resolution < 2) throw ConfigError("time_resolution must be at least 2");
  std::mt19937_64 rng(seed);
  grids_.emplace_back("deform.g_xyz", grid_config(config_, false), rng);
  grids_.emplace_back("deform.g_xyt", grid_config(config_, true), rng);
  grids_.emplace_back("deform.g_yzt", grid_config(config_, true), rng);
  grids_.emplace_back("deform.g_xzt", grid_config(config_, true), rng);
  const std::size_t spatial_in = grids_[0].output_dim(grid::LevelReduce::kConcat);
  const std::size_t temporal_in = 3 * grids_[1].output_dim(grid::LevelReduce::kConcat);
  spatial_net_ = nn::Linear("deform.f_s", spatial_in, config_.attention_width, nn::Init::kUniform, rng);
  temporal_net_ = nn::Linear("deform.f_t", temporal_in, config_.attention_width, nn::Init::kUniform, rng);
  hidden_ = nn::Linear("deform.hidden", config_.attention_width, config_.decoder_width, nn::Init::kUniform, rng);
  output_ = nn::Linear("deform.out", config_.decoder_width, kHeadWidth, nn::Init::kZero, rng);
}

Encoding DeformationField::encode4d(ad::Binder& bind, const ad::Tensor& points) {
  if (points.rank() != 2 || points.cols() != 4) {
    throw ShapeError("encode4d expects M x 4 points, got " + points.shape_string());
  }
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!(points[i] >= 0.0 && points[i] <= 1.0)) {
      throw DomainError("encode4d: coordinate " + std::to_string(points[i]) + " in row " +
                        std::to_string(i / 4) + " outside [0,1]");
    }
  }
  ad::Tape& tape = bind.tape();
  static constexpr std::array<std::array<std::size_t, 3>, 4> kAxes = {
      {{0, 1, 2}, {0, 1, 3}, {1, 2, 3}, {0, 2, 3}}};
  std::array<ad::Var, 4> feats;
  for (std::size_t g = 0; g < 4; ++g) {
    feats[g] = grid::encode(grids_[g], bind(grids_[g].table()), tape.constant(columns(points, kAxes[g])),
                            grid::LevelReduce::kConcat);
  }
  return Encoding{feats[0], {feats[1], feats[2], feats[3]}};
}

ad::Var DeformationField::attention_weight(ad::Binder& bind, const ad::Var& spatial) {
  ad::Var logits = ad::relu(spatial_net_.forward(bind, spatial));
  return ad::add_scalar(ad::scale(ad::sigmoid(logits), 2.0), -1.0);
}

ad::Var DeformationField::attention_modulate(ad::Binder& bind, const Encoding& enc) {
  ad::Var a = attention_weight(bind, enc.spatial);
  ad::Var ft = ad::relu(temporal_net_.forward(bind, ad::concat_cols(enc.temporal)));
  return ad::mul(a, ft);
}

DeformationHeads DeformationField::decode(ad::Binder& bind, const ad::Var& h) {
  ad::Var hidden = ad::relu(hidden_.forward(bind, h));
  ad::Var out = output_.forward(bind, hidden);
  ad::Tape& tape = bind.tape();
  ad::Tensor identity({out.rows(), 4}, 0.0);
  for (std::size_t i = 0; i < out.rows(); ++i) identity.at(i, 0) = 1.0;
  DeformationHeads heads;
  heads.rotation = ad::add(ad::slice_cols(out, 0, 4), tape.constant(std::move(identity)));
  heads.translation = ad::slice_cols(out, 4, 7);
  heads.delta_rotation = ad::slice_cols(out, 7, 11);
  heads.delta_scale = ad::slice_cols(out, 11, 14);
  return heads;
}

DeformedPose apply_heads(const DeformationHeads& heads, const ad::Var& means, const ad::Var& quats,
                         const ad::Var& log_scales) {
  DeformedPose pose;
  pose.means = ad::add(geometry::rotate_points(heads.rotation, means), heads.translation);
  pose.quats = geometry::normalize_quaternions(ad::add(quats, heads.delta_rotation));
  pose.log_scales = ad::add(log_scales, heads.delta_scale);
  return pose;
}

DeformedPose DeformationField::deform(ad::Binder& bind, const ad::Var& means, const ad::Var& quats,
                                      const ad::Var& log_scales, const ad::Tensor& points,
                                      const std::vector<bool>& active) {
  const std::size_t n = means.rows();
  if (points.rows() != n || active.size() != n) throw ShapeError("deform: row counts differ");
  bool any = false;
  for (bool a : active) any = any || a;
  if (!any) return DeformedPose{means, geometry::normalize_quaternions(quats), log_scales};
  const Encoding enc = encode4d(bind, points);
  const DeformationHeads heads = decode(bind, attention_modulate(bind, enc));
  DeformedPose moved = apply_heads(heads, means, quats, log_scales);
  return DeformedPose{ad::select_rows(active, moved.means, means),
                      ad::select_rows(active, moved.quats, geometry::normalize_quaternions(quats)),
                      ad::select_rows(active, moved.log_scales, log_scales)};
}

std::vector<ad::Parameter*> DeformationField::grid_parameters() {
  std::vector<ad::Parameter*> out;
  for (auto& g : grids_) out.push_back(&g.table());
  return out;
}

std::vector<ad::Parameter*> DeformationField::network_parameters() {
  return {&spatial_net_.weight(), &spatial_net_.bias(), &temporal_net_.weight(),
          &temporal_net_.bias(),  &hidden_.weight(),    &hidden_.bias(),
          &output_.weight(),      &output_.bias()};
}

std::vector<const grid::MultiResGrid*> DeformationField::grids() const {
  std::vector<const grid::MultiResGrid*> out;
  for (const auto& g : grids_) out.push_back(&g);
  return out;
}

void DeformationField::reset_decoder_output() {
  output_.weight().value.fill(0.0);
  output_.bias().value.fill(0.0);
}

}  // namespace pidg::deform
