#include "pidg/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

#include "pidg/ad/ops.hpp"
#include "pidg/common/error.hpp"
#include "pidg/flow/gaussian_flow.hpp"
#include "pidg/io/formats.hpp"
#include "pidg/physics/residual.hpp"
#include "pidg/scene/partition.hpp"

namespace pidg::train {
namespace {

constexpr char kMagic[8] = {'P', 'I', 'D', 'G', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void read_into(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where,
                std::vector<std::string>& errors) {
  if (!j.is_object()) {
    errors.push_back(where + " must be an object");
    return;
  }
  for (const auto& [k, v] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; }) == allowed.end())
      errors.push_back("unknown key '" + where + k + "'");
  }
}

bool positive(double v) { return std::isfinite(v) && v > 0; }

double logit(double p) { return std::log(p / (1 - p)); }

void write_tensor(io::ByteWriter& w, const ad::Tensor& t) {
  w.u64(t.rank());
  for (auto d : t.shape()) w.u64(d);
  for (double v : t.values()) w.f64(v);
}

ad::Tensor read_tensor(io::ByteReader& r) {
  const std::uint64_t rank = r.u64();
  if (rank > 8) throw FormatError("checkpoint tensor rank " + std::to_string(rank));
  std::vector<std::size_t> shape(rank);
  std::size_t n = rank == 0 ? 0 : 1;
  for (auto& d : shape) {
    d = r.u64();
    n *= d;
  }
  std::vector<double> values(n);
  for (double& v : values) v = r.f64();
  return rank == 0 ? ad::Tensor() : ad::Tensor(shape, std::move(values));
}

}  // namespace

Ablation ablation_from_string(const std::string& s) {
  if (s == "none") return Ablation::kNone;
  if (s == "no-lpfm") return Ablation::kNoLpfm;
  if (s == "no-physics") return Ablation::kNoPhysics;
  throw ConfigError("unknown ablation '" + s + "' (expected none, no-lpfm or no-physics)");
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::kNone: return "none";
    case Ablation::kNoLpfm: return "no-lpfm";
    case Ablation::kNoPhysics: return "no-physics";
  }
  return "none";
}

std::vector<std::string> config_errors(const RunConfig& c) {
  std::vector<std::string> e;
  if (c.iterations < 1) e.push_back("iterations must be at least 1");
  if (!(c.stage_fraction > 0 && c.stage_fraction <= 1)) e.push_back("stage_fraction must lie in (0, 1]");
  if (!(c.time_curriculum >= 0 && c.time_curriculum <= 1)) e.push_back("time_curriculum must lie in [0, 1]");
  if (c.width < 0 || c.height < 0) e.push_back("image size must not be negative");
  const auto& w = c.weights;
  for (auto [name, v] : {std::pair{"dssim", w.dssim}, {"cmr", w.cmr}, {"lpfm", w.lpfm},
                         {"flow_gaussian", w.flow_gaussian}, {"flow_velocity", w.flow_velocity}}) {
    if (!std::isfinite(v) || v < 0) e.push_back(std::string("weight ") + name + " must be finite and >= 0");
  }
  if (w.dssim > 1) e.push_back("weight dssim must not exceed 1");
  if (c.top_k < 1 || c.top_k > 64) e.push_back("top_k must lie in [1, 64]");
  if (c.cmr_samples < 1) e.push_back("cmr_samples must be at least 1");
  if (c.cmr_block < 1) e.push_back("cmr_block must be at least 1");
  if (c.densify_every < 1) e.push_back("densify_every must be at least 1");
  if (c.densify_from < 0) e.push_back("densify_from must not be negative");
  if (!positive(c.densify_threshold)) e.push_back("densify_threshold must be positive");
  if (!positive(c.percent_dense)) e.push_back("percent_dense must be positive");
  if (!positive(c.prune_scale)) e.push_back("prune_scale must be positive");
  if (!(c.dynamic_fraction >= 0 && c.dynamic_fraction <= 1)) e.push_back("dynamic_fraction must lie in [0, 1]");
  if (c.max_gaussians < 1) e.push_back("max_gaussians must be at least 1");
  if (!(c.init_opacity > 0 && c.init_opacity < 1)) e.push_back("init_opacity must lie in (0, 1)");
  const auto& r = c.rates;
  for (auto [name, v] : {std::pair{"position", r.position}, {"position_final", r.position_final},
                         {"rotation", r.rotation}, {"scale", r.scale}, {"sh", r.sh}, {"opacity", r.opacity},
                         {"decoder", r.decoder}, {"material", r.material}, {"grid_multiplier", r.grid_multiplier},
                         {"decay_fraction", r.decay_fraction}}) {
    if (!positive(v)) e.push_back(std::string("rate ") + name + " must be positive");
  }
  const auto& d = c.deformation;
  if (d.spatial_levels < 1 || d.temporal_levels < 1) e.push_back("deformation grids need at least one level");
  if (d.spatial_base < 2 || d.spatial_max < d.spatial_base) e.push_back("deformation resolutions must satisfy 2 <= base <= max");
  if (d.time_resolution < 2) e.push_back("deformation time_resolution must be at least 2");
  if (d.table_size_log2 < 4 || d.table_size_log2 > 24) e.push_back("deformation table_size_log2 must lie in [4, 24]");
  if (d.feature_dim < 1 || d.attention_width < 1 || d.decoder_width < 1) e.push_back("deformation widths must be positive");
  const auto& m = c.material;
  if (m.plane_levels < 1) e.push_back("material plane_levels must be at least 1");
  if (m.plane_base < 2 || m.plane_max < m.plane_base) e.push_back("material resolutions must satisfy 2 <= base <= max");
  if (m.plane_table_log2 < 4 || m.plane_table_log2 > 24) e.push_back("material plane_table_log2 must lie in [4, 24]");
  if (m.embedding_dim < 1 || m.hidden_width < 1) e.push_back("material widths must be positive");
  if (c.log_every < 1) e.push_back("log_every must be at least 1");
  if (c.checkpoint_every < 0) e.push_back("checkpoint_every must not be negative");
  return e;
}

void validate(const RunConfig& c) {
  const auto errors = config_errors(c);
  if (errors.empty()) return;
  std::string msg = "invalid run config:";
  for (const auto& e : errors) msg += "\n  - " + e;
  throw ConfigError(msg);
}

RunConfig config_from_json(const nlohmann::json& j) {
  std::vector<std::string> errors;
  check_keys(j,
             {"scene", "out", "seed", "width", "height", "iterations", "stage_fraction", "time_curriculum", "weights", "ablation",
              "top_k", "cmr_samples", "cmr_block", "densify_from", "densify_every", "densify_threshold",
              "percent_dense", "prune_scale", "dynamic_fraction", "max_gaussians", "init_opacity", "deformation",
              "material", "rates", "log_every", "checkpoint_every", "identity_deformation"},
             "", errors);
  if (j.contains("weights"))
    check_keys(j["weights"], {"dssim", "cmr", "lpfm", "flow_gaussian", "flow_velocity"}, "weights.", errors);
  if (j.contains("rates"))
    check_keys(j["rates"],
               {"position", "position_final", "rotation", "scale", "sh", "opacity", "decoder", "material",
                "grid_multiplier", "decay_fraction"},
               "rates.", errors);
  if (j.contains("deformation"))
    check_keys(j["deformation"],
               {"spatial_levels", "spatial_base", "spatial_max", "temporal_levels", "time_resolution",
                "table_size_log2", "feature_dim", "attention_width", "decoder_width"},
               "deformation.", errors);
  if (j.contains("material"))
    check_keys(j["material"],
               {"plane_levels", "plane_base", "plane_max", "plane_table_log2", "plane_init", "fourier_frequencies",
                "embedding_dim", "embedding_init", "hidden_width"},
               "material.", errors);
  RunConfig c;
  if (errors.empty()) {
    try {
      read_into(j, "scene", c.scene);
      read_into(j, "out", c.out);
      read_into(j, "seed", c.seed);
      read_into(j, "width", c.width);
      read_into(j, "height", c.height);
      read_into(j, "iterations", c.iterations);
      read_into(j, "stage_fraction", c.stage_fraction);
      read_into(j, "time_curriculum", c.time_curriculum);
      if (j.contains("ablation")) c.ablation = ablation_from_string(j.at("ablation").get<std::string>());
      read_into(j, "top_k", c.top_k);
      read_into(j, "cmr_samples", c.cmr_samples);
      read_into(j, "cmr_block", c.cmr_block);
      read_into(j, "densify_from", c.densify_from);
      read_into(j, "densify_every", c.densify_every);
      read_into(j, "densify_threshold", c.densify_threshold);
      read_into(j, "percent_dense", c.percent_dense);
      read_into(j, "prune_scale", c.prune_scale);
      read_into(j, "dynamic_fraction", c.dynamic_fraction);
      read_into(j, "max_gaussians", c.max_gaussians);
      read_into(j, "init_opacity", c.init_opacity);
      read_into(j, "log_every", c.log_every);
      read_into(j, "checkpoint_every", c.checkpoint_every);
      read_into(j, "identity_deformation", c.identity_deformation);
      if (j.contains("weights")) {
        const auto& w = j["weights"];
        read_into(w, "dssim", c.weights.dssim);
        read_into(w, "cmr", c.weights.cmr);
        read_into(w, "lpfm", c.weights.lpfm);
        read_into(w, "flow_gaussian", c.weights.flow_gaussian);
        read_into(w, "flow_velocity", c.weights.flow_velocity);
      }
      if (j.contains("rates")) {
        const auto& r = j["rates"];
        read_into(r, "position", c.rates.position);
        read_into(r, "position_final", c.rates.position_final);
        read_into(r, "rotation", c.rates.rotation);
        read_into(r, "scale", c.rates.scale);
        read_into(r, "sh", c.rates.sh);
        read_into(r, "opacity", c.rates.opacity);
        read_into(r, "decoder", c.rates.decoder);
        read_into(r, "material", c.rates.material);
        read_into(r, "grid_multiplier", c.rates.grid_multiplier);
        read_into(r, "decay_fraction", c.rates.decay_fraction);
      }
      if (j.contains("deformation")) {
        const auto& d = j["deformation"];
        read_into(d, "spatial_levels", c.deformation.spatial_levels);
        read_into(d, "spatial_base", c.deformation.spatial_base);
        read_into(d, "spatial_max", c.deformation.spatial_max);
        read_into(d, "temporal_levels", c.deformation.temporal_levels);
        read_into(d, "time_resolution", c.deformation.time_resolution);
        read_into(d, "table_size_log2", c.deformation.table_size_log2);
        read_into(d, "feature_dim", c.deformation.feature_dim);
        read_into(d, "attention_width", c.deformation.attention_width);
        read_into(d, "decoder_width", c.deformation.decoder_width);
      }
      if (j.contains("material")) {
        const auto& m = j["material"];
        read_into(m, "plane_levels", c.material.plane_levels);
        read_into(m, "plane_base", c.material.plane_base);
        read_into(m, "plane_max", c.material.plane_max);
        read_into(m, "plane_table_log2", c.material.plane_table_log2);
        read_into(m, "plane_init", c.material.plane_init);
        read_into(m, "fourier_frequencies", c.material.fourier_frequencies);
        read_into(m, "embedding_dim", c.material.embedding_dim);
        read_into(m, "embedding_init", c.material.embedding_init);
        read_into(m, "hidden_width", c.material.hidden_width);
      }
    } catch (const nlohmann::json::exception& ex) {
      errors.push_back(ex.what());
    } catch (const ConfigError& ex) {
      errors.push_back(ex.what());
    }
  }
  if (errors.empty()) errors = config_errors(c);
  if (!errors.empty()) {
    std::string msg = "invalid run config:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  return c;
}

nlohmann::json config_to_json(const RunConfig& c) {
  const auto& w = c.weights;
  const auto& r = c.rates;
  const auto& d = c.deformation;
  const auto& m = c.material;
  return {{"scene", c.scene},
          {"out", c.out},
          {"seed", c.seed},
          {"width", c.width},
          {"height", c.height},
          {"iterations", c.iterations},
          {"stage_fraction", c.stage_fraction},
          {"time_curriculum", c.time_curriculum},
          {"weights",
           {{"dssim", w.dssim}, {"cmr", w.cmr}, {"lpfm", w.lpfm}, {"flow_gaussian", w.flow_gaussian},
            {"flow_velocity", w.flow_velocity}}},
          {"ablation", to_string(c.ablation)},
          {"top_k", c.top_k},
          {"cmr_samples", c.cmr_samples},
          {"cmr_block", c.cmr_block},
          {"densify_from", c.densify_from},
          {"densify_every", c.densify_every},
          {"densify_threshold", c.densify_threshold},
          {"percent_dense", c.percent_dense},
          {"prune_scale", c.prune_scale},
          {"dynamic_fraction", c.dynamic_fraction},
          {"max_gaussians", c.max_gaussians},
          {"init_opacity", c.init_opacity},
          {"deformation",
           {{"spatial_levels", d.spatial_levels}, {"spatial_base", d.spatial_base}, {"spatial_max", d.spatial_max},
            {"temporal_levels", d.temporal_levels}, {"time_resolution", d.time_resolution},
            {"table_size_log2", d.table_size_log2}, {"feature_dim", d.feature_dim},
            {"attention_width", d.attention_width}, {"decoder_width", d.decoder_width}}},
          {"material",
           {{"plane_levels", m.plane_levels}, {"plane_base", m.plane_base}, {"plane_max", m.plane_max},
            {"plane_table_log2", m.plane_table_log2}, {"plane_init", m.plane_init},
            {"fourier_frequencies", m.fourier_frequencies}, {"embedding_dim", m.embedding_dim},
            {"embedding_init", m.embedding_init}, {"hidden_width", m.hidden_width}}},
          {"rates",
           {{"position", r.position}, {"position_final", r.position_final}, {"rotation", r.rotation},
            {"scale", r.scale}, {"sh", r.sh}, {"opacity", r.opacity}, {"decoder", r.decoder},
            {"material", r.material}, {"grid_multiplier", r.grid_multiplier}, {"decay_fraction", r.decay_fraction}}},
          {"log_every", c.log_every},
          {"checkpoint_every", c.checkpoint_every},
          {"identity_deformation", c.identity_deformation}};
}

LossWeights effective_weights(const RunConfig& c) {
  LossWeights w = c.weights;
  if (c.ablation == Ablation::kNoLpfm) w.lpfm = 0;
  if (c.ablation == Ablation::kNoPhysics) w.lpfm = w.cmr = 0;
  return w;
}

std::string metrics_row(const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.6f,%zu", m.iteration, m.loss_total, m.loss_renders,
                m.loss_cmr, m.loss_lpfm, m.psnr, m.num_gaussians);
  return buf;
}

Trainer::Trainer(RunConfig config, scenegen::SyntheticScene scene)
    : config_(std::move(config)), scene_(std::move(scene)), rng_(config_.seed) {
  validate(config_);
  const int F = static_cast<int>(scene_.frames.size());
  if (F < 2 || scene_.cameras.size() != scene_.frames.size() || scene_.times.size() != scene_.frames.size())
    throw ConfigError("scene needs at least two frames with cameras and times");
  const int W = scene_.frames[0].width, H = scene_.frames[0].height;
  if ((config_.width && config_.width != W) || (config_.height && config_.height != H)) {
    throw ConfigError("config image size " + std::to_string(config_.width) + "x" + std::to_string(config_.height) +
                      " differs from the scene's " + std::to_string(W) + "x" + std::to_string(H));
  }
  if (scene_.init_points.empty()) throw ConfigError("scene has no initial points");

  // Camera-path bounding radius about the scene center.
  const Eigen::Vector3d center = 0.5 * (scene_.bounds.lo + scene_.bounds.hi);
  extent_ = 0;
  for (const auto& c : scene_.cameras) extent_ = std::max(extent_, (c.center() - center).norm());

  // Initial cloud: sparse points, colors sampled from the first frame, scales
  // from the three nearest neighbours.
  const std::size_t n = std::min(scene_.init_points.size(), config_.max_gaussians);
  const auto& cam0 = scene_.cameras[0];
  const Image& img0 = scene_.frames[0];
  constexpr double kC0 = 0.28209479177387814;
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d& x = scene_.init_points[i];
    std::vector<double> d2;
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) d2.push_back((scene_.init_points[k] - x).squaredNorm());
    std::sort(d2.begin(), d2.end());
    double mean = 0;
    const std::size_t nn = std::min<std::size_t>(3, d2.size());
    for (std::size_t k = 0; k < nn; ++k) mean += d2[k];
    double scale = nn ? std::sqrt(mean / static_cast<double>(nn)) : 0.01 * extent_;
    scale = std::clamp(scale, 1e-4 * extent_, 0.5 * config_.prune_scale * extent_);

    scene::GaussianParticle p;
    p.position = x;
    p.log_scale = Eigen::Vector3d::Constant(std::log(scale));
    p.opacity_logit = logit(config_.init_opacity);
    p.sh.assign(3, 0.0);
    const Eigen::Vector3d c = cam0.to_camera(x);
    if (c.z() > 0) {
      const Eigen::Vector2d px = cam0.project(c);
      const int u = static_cast<int>(std::lround(px.x())), v = static_cast<int>(std::lround(px.y()));
      if (u >= 0 && v >= 0 && u < W && v < H)
        for (int ch = 0; ch < 3; ++ch) p.sh[static_cast<std::size_t>(ch)] = (img0.at(u, v, ch) - 0.5) / kC0;
    }
    p.id = static_cast<std::int64_t>(i);
    cloud_.add(p);
  }

  deformation_ = std::make_unique<deform::DeformationField>(config_.deformation, config_.seed + 1);
  material_ = std::make_unique<material::MaterialField>(config_.material, scene_.bounds, n, config_.seed + 2);

  for (const Image& f : scene_.frames) targets_.push_back(image_tensor(f));
  for (int f = 0; f + 1 < F; ++f) {
    const auto dec =
        flow::decompose_backward(scene_.backward[f], scene_.depths[f + 1], scene_.cameras[f], scene_.cameras[f + 1]);
    flow::FlowField gt = flow::warp_flow_forward(dec.motion, scene_.forward[f]);
    Mask mask = flow::motion_mask(gt, scenegen::kMotionThreshold);
    for (std::size_t i = 0; i < mask.bits.size(); ++i) mask.bits[i] &= scene_.masks[f].bits[i];
    gt_motion_.push_back(std::move(gt));
    gt_mask_.push_back(std::move(mask));
  }
  grad_accum_.assign(cloud_.size(), 0.0);
  grad_count_.assign(cloud_.size(), 0.0);
  setup_optimizer();
}

int Trainer::stage_switch() const {
  return std::max(1, static_cast<int>(std::floor(config_.stage_fraction * config_.iterations)));
}

void Trainer::setup_optimizer() {
  const auto& r = config_.rates;
  adam_.add(&cloud_.means(), r.position * extent_);
  adam_.add(&cloud_.quats(), r.rotation);
  adam_.add(&cloud_.log_scales(), r.scale);
  adam_.add(&cloud_.sh(), r.sh);
  adam_.add(&cloud_.opacity(), r.opacity);
  if (!config_.identity_deformation) {
    for (auto* p : deformation_->grid_parameters()) adam_.add(p, r.decoder * r.grid_multiplier);
    for (auto* p : deformation_->network_parameters()) adam_.add(p, r.decoder);
  }
  for (auto* p : material_->plane_parameters()) adam_.add(p, r.material * r.grid_multiplier);
  adam_.add(&material_->embedding(), r.material);
  for (auto* p : material_->network_parameters()) adam_.add(p, r.material);
  update_rates();
}

void Trainer::update_rates() {
  const auto& r = config_.rates;
  const double total = config_.iterations;
  const double progress = std::clamp(iteration_ / total, 0.0, 1.0);
  adam_.set_rate(&cloud_.means(), extent_ * r.position * std::pow(r.position_final / r.position, progress));
  const double decay = std::pow(0.1, iteration_ / (r.decay_fraction * total));
  if (!config_.identity_deformation) {
    for (auto* p : deformation_->grid_parameters()) adam_.set_rate(p, decay * r.decoder * r.grid_multiplier);
    for (auto* p : deformation_->network_parameters()) adam_.set_rate(p, decay * r.decoder);
  }
  for (auto* p : material_->plane_parameters()) adam_.set_rate(p, decay * r.material * r.grid_multiplier);
  adam_.set_rate(&material_->embedding(), decay * r.material);
  for (auto* p : material_->network_parameters()) adam_.set_rate(p, decay * r.material);
}

ad::Tensor Trainer::normalized_points(double t) const {
  const std::size_t n = cloud_.size();
  ad::Tensor pts({n, 4});
  const auto& b = scene_.bounds;
  const ad::Tensor& m = cloud_.means().value;
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector4d u = b.normalize(b.clamp({m.at(i, 0), m.at(i, 1), m.at(i, 2), t}));
    for (int k = 0; k < 4; ++k) pts.at(i, static_cast<std::size_t>(k)) = std::clamp(u[k], 0.0, 1.0);
  }
  return pts;
}

deform::DeformedPose Trainer::pose_at(ad::Binder& bind, double t) {
  const ad::Var means = bind(cloud_.means()), quats = bind(cloud_.quats()), scales = bind(cloud_.log_scales());
  if (config_.identity_deformation) return {means, quats, scales};
  const std::vector<bool> active = dynamic_stage_ ? cloud_.dynamic() : std::vector<bool>(cloud_.size(), true);
  return deformation_->deform(bind, means, quats, scales, normalized_points(t), active);
}

ad::Tensor Trainer::view_directions(const render::Camera& camera) const {
  // Degree-0 colors ignore directions.
  (void)camera;
  return ad::Tensor({cloud_.size(), 3}, 0.0);
}

render::RasterSettings Trainer::raster_settings() const {
  render::RasterSettings s;
  s.top_k = config_.top_k;
  return s;
}

StepMetrics Trainer::step() {
  update_rates();
  const LossWeights w = effective_weights(config_);
  const int F = static_cast<int>(scene_.frames.size());
  int last = F - 1;
  if (config_.time_curriculum > 0) {
    const double ramp = iteration_ / (config_.time_curriculum * config_.iterations);
    last = std::min(F - 1, static_cast<int>(std::floor(ramp * (F - 1))));
  }
  const int f = std::uniform_int_distribution<int>(0, last)(rng_);
  const double t = scene_.times[f];
  const render::Camera& cam = scene_.cameras[f];

  ad::Tape tape;
  ad::Binder bind(tape);
  const deform::DeformedPose pose = pose_at(bind, t);
  const render::Projection proj = render::project(cam, pose.means, pose.quats, pose.log_scales);
  const ad::Var colors = render::sh_to_color(bind(cloud_.sh()), cloud_.sh_degree(), view_directions(cam));
  const ad::Var alpha = ad::sigmoid(bind(cloud_.opacity()));
  const render::RenderOutput out = render::rasterize(cam, proj, colors, alpha, cloud_.ids(), raster_settings());
  const ad::Var renders = renders_loss(out.color, targets_[f], w.dssim);
  ad::Var loss = renders;

  double lpfm = 0;
  if (dynamic_stage_ && w.lpfm > 0 && f + 1 < F) {
    const deform::DeformedPose next = pose_at(bind, scene_.times[f + 1]);
    const render::Projection pn = render::project(cam, next.means, next.quats, next.log_scales);
    const flow::FlowPrediction fg = flow::gaussian_flow(out.topk, proj.means2d, proj.cov2d, pn.means2d, pn.cov2d);
    const ad::Tensor& pos = pose.means.value();
    ad::Tensor pts({cloud_.size(), 4});
    for (std::size_t i = 0; i < cloud_.size(); ++i) {
      const Eigen::Vector4d p = scene_.bounds.clamp({pos.at(i, 0), pos.at(i, 1), pos.at(i, 2), t});
      for (int k = 0; k < 4; ++k) pts.at(i, static_cast<std::size_t>(k)) = p[k];
    }
    const material::MaterialOutput mat = material_->predict_at(bind, pts, cloud_.ids());
    const ad::Var v2d = flow::project_velocity(cam, pos, mat.velocity);
    const flow::FlowPrediction fv =
        flow::velocity_flow(out.topk, tape.constant(proj.means2d.value()), tape.constant(proj.cov2d.value()), v2d,
                            tape.constant(pn.cov2d.value()), scene_.times[f + 1] - t);
    const flow::LpfmResult res =
        flow::lpfm_loss(fg, fv, gt_motion_[f], gt_mask_[f], {w.flow_gaussian, w.flow_velocity});
    if (!res.empty) {
      lpfm = res.loss.value()[0];
      loss = ad::add(loss, ad::scale(res.loss, w.lpfm));
    }
  }

  double cmr = 0;
  if (w.cmr > 0) {
    const double half = 0.5 / (F - 1);
    std::uniform_real_distribution<double> jitter(-half, half);
    physics::CmrSamples samples;
    samples.points = ad::Tensor({cloud_.size(), 4});
    const ad::Tensor& pos = pose.means.value();
    for (std::size_t i = 0; i < cloud_.size(); ++i) {
      const Eigen::Vector4d p = scene_.bounds.clamp({pos.at(i, 0), pos.at(i, 1), pos.at(i, 2), t + jitter(rng_)});
      for (int k = 0; k < 4; ++k) samples.points.at(i, static_cast<std::size_t>(k)) = p[k];
    }
    samples.ids = cloud_.ids();
    physics::BlockCmrOptions opts;
    opts.block_size = config_.cmr_block;
    opts.sample_fraction = std::min(1.0, static_cast<double>(config_.cmr_samples) / static_cast<double>(cloud_.size()));
    opts.grad_scale = w.cmr;
    cmr = physics::block_sampled_cmr(*material_, samples, opts, &rng_).loss;
  }

  StepMetrics m;
  m.loss_renders = renders.value()[0];
  m.loss_cmr = cmr;
  m.loss_lpfm = lpfm;
  m.loss_total = total_loss(m.loss_renders, cmr, lpfm, w);
  m.psnr = psnr(out.color.value(), targets_[f]);

  tape.backward(loss);
  if (out.mean2d_grad) {
    const ad::Tensor& g = *out.mean2d_grad;
    for (std::size_t i = 0; i < cloud_.size(); ++i) {
      if (!proj.visible[i]) continue;
      grad_accum_[i] += std::hypot(g.at(i, 0), g.at(i, 1));
      grad_count_[i] += 1;
    }
  }
  adam_.step();
  // Frozen rows stay bit-identical.
  ad::Tensor& q = cloud_.quats().value;
  for (std::size_t i = 0; i < cloud_.size(); ++i) {
    if (dynamic_stage_ && !cloud_.dynamic()[i]) continue;
    const double norm = std::sqrt(q.at(i, 0) * q.at(i, 0) + q.at(i, 1) * q.at(i, 1) + q.at(i, 2) * q.at(i, 2) +
                                  q.at(i, 3) * q.at(i, 3));
    if (norm > 0)
      for (std::size_t k = 0; k < 4; ++k) q.at(i, k) /= norm;
  }
  ++iteration_;

  if (!dynamic_stage_ && iteration_ < stage_switch() && iteration_ >= config_.densify_from &&
      iteration_ % config_.densify_every == 0) {
    densify_and_prune();
  }
  if (!dynamic_stage_ && iteration_ >= stage_switch() && iteration_ < config_.iterations) switch_stage();

  m.iteration = iteration_;
  m.num_gaussians = cloud_.size();
  return m;
}

void Trainer::densify_and_prune() {
  const std::size_t n = cloud_.size();
  std::vector<double> mean_grad(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    if (grad_count_[i] > 0) mean_grad[i] = grad_accum_[i] / grad_count_[i];
  scene::DensifyConfig dc;
  // Threshold is given in normalized device units; the rasterizer reports pixels.
  dc.grad_threshold = config_.densify_threshold / (0.5 * scene_.frames[0].width);
  dc.percent_dense = config_.percent_dense;
  dc.extent = extent_;
  dc.max_particles = config_.max_gaussians;
  const scene::RowRemap grown = scene::densify(cloud_, mean_grad, dc, rng_);
  for (auto* p : cloud_.parameters()) adam_.remap(p, grown);
  const scene::RowRemap kept = scene::prune_by_scale(cloud_, config_.prune_scale, extent_);
  for (auto* p : cloud_.parameters()) adam_.remap(p, kept);
  grad_accum_.assign(cloud_.size(), 0.0);
  grad_count_.assign(cloud_.size(), 0.0);
}

std::vector<Eigen::Vector3d> Trainer::positions(double t) {
  ad::Tape tape;
  ad::Binder bind(tape);
  const ad::Tensor& m = pose_at(bind, t).means.value();
  std::vector<Eigen::Vector3d> out(cloud_.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {m.at(i, 0), m.at(i, 1), m.at(i, 2)};
  return out;
}

void Trainer::switch_stage() {
  const int F = static_cast<int>(scene_.frames.size());
  std::vector<std::vector<Eigen::Vector3d>> pos;
  for (int f = 0; f < F; ++f) pos.push_back(positions(scene_.times[f]));
  std::vector<bool> flags = scene::partition_dynamic(pos, scene_.masks, scene_.cameras, config_.dynamic_fraction);
  if (!config_.identity_deformation) {
    // Static particles keep the pose they had mid-sequence.
    ad::Tape tape;
    ad::Binder bind(tape);
    const deform::DeformedPose mid = pose_at(bind, 0.5 * (scene_.times.front() + scene_.times.back()));
    for (std::size_t i = 0; i < flags.size(); ++i) {
      if (flags[i]) continue;
      for (std::size_t k = 0; k < 3; ++k) {
        cloud_.means().value.at(i, k) = mid.means.value().at(i, k);
        cloud_.log_scales().value.at(i, k) = mid.log_scales.value().at(i, k);
      }
      for (std::size_t k = 0; k < 4; ++k) cloud_.quats().value.at(i, k) = mid.quats.value().at(i, k);
    }
  }
  cloud_.set_dynamic(flags);
  adam_.set_row_mask(&cloud_.means(), flags);
  adam_.set_row_mask(&cloud_.quats(), flags);
  adam_.set_row_mask(&cloud_.log_scales(), flags);
  dynamic_stage_ = true;
}

Image Trainer::render(const render::Camera& camera, double t, DepthMap* depth) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("render time " + std::to_string(t) + " outside [0,1]");
  ad::Tape tape;
  ad::Binder bind(tape);
  const deform::DeformedPose pose = pose_at(bind, t);
  const render::Projection proj = render::project(camera, pose.means, pose.quats, pose.log_scales);
  const ad::Var colors = render::sh_to_color(bind(cloud_.sh()), cloud_.sh_degree(), view_directions(camera));
  const render::RenderOutput out =
      render::rasterize(camera, proj, colors, ad::sigmoid(bind(cloud_.opacity())), cloud_.ids(), raster_settings());
  if (depth) {
    *depth = DepthMap(camera.width, camera.height);
    for (std::size_t i = 0; i < depth->depth.size(); ++i) {
      const double cov = out.coverage[i];
      depth->depth[i] = cov >= 0.5 ? out.depth.value()[i] / cov : 0.0;
    }
  }
  return tensor_image(out.color.value());
}

PredictedFlows Trainer::predict_flows(int f) {
  const int F = static_cast<int>(scene_.frames.size());
  if (f < 0 || f + 1 >= F) throw DomainError("flow prediction needs a frame with a successor");
  return predict_flows(scene_.cameras[f], scene_.times[f], scene_.times[f + 1]);
}

Trainer::ScreenMotion Trainer::screen_motion(const render::Camera& camera, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("time " + std::to_string(t) + " outside [0,1]");
  ad::Tape tape;
  ad::Binder bind(tape);
  const deform::DeformedPose pose = pose_at(bind, t);
  const render::Projection proj = render::project(camera, pose.means, pose.quats, pose.log_scales);
  const ad::Tensor& pos = pose.means.value();
  ad::Tensor pts({cloud_.size(), 4});
  for (std::size_t i = 0; i < cloud_.size(); ++i) {
    const Eigen::Vector4d p = scene_.bounds.clamp({pos.at(i, 0), pos.at(i, 1), pos.at(i, 2), t});
    for (int k = 0; k < 4; ++k) pts.at(i, static_cast<std::size_t>(k)) = p[k];
  }
  const material::MaterialOutput mat = material_->predict_at(bind, pts, cloud_.ids());
  return {proj.means2d.value(), flow::project_velocity(camera, pos, mat.velocity).value(), proj.visible};
}

PredictedFlows Trainer::predict_flows(const render::Camera& cam, double t, double t_next) {
  if (!(t >= 0.0 && t <= 1.0 && t_next >= 0.0 && t_next <= 1.0))
    throw DomainError("flow times outside [0,1]");
  const double dt = t_next - t;
  ad::Tape tape;
  ad::Binder bind(tape);
  const deform::DeformedPose pose = pose_at(bind, t);
  const deform::DeformedPose next = pose_at(bind, t_next);
  const render::Projection proj = render::project(cam, pose.means, pose.quats, pose.log_scales);
  const render::Projection pn = render::project(cam, next.means, next.quats, next.log_scales);
  const ad::Var colors = render::sh_to_color(bind(cloud_.sh()), cloud_.sh_degree(), view_directions(cam));
  const render::RenderOutput out =
      render::rasterize(cam, proj, colors, ad::sigmoid(bind(cloud_.opacity())), cloud_.ids(), raster_settings());
  const flow::FlowPrediction fg = flow::gaussian_flow(out.topk, proj.means2d, proj.cov2d, pn.means2d, pn.cov2d);
  const ad::Tensor& pos = pose.means.value();
  ad::Tensor pts({cloud_.size(), 4});
  for (std::size_t i = 0; i < cloud_.size(); ++i) {
    const Eigen::Vector4d p = scene_.bounds.clamp({pos.at(i, 0), pos.at(i, 1), pos.at(i, 2), t});
    for (int k = 0; k < 4; ++k) pts.at(i, static_cast<std::size_t>(k)) = p[k];
  }
  const material::MaterialOutput mat = material_->predict_at(bind, pts, cloud_.ids());
  const ad::Var v2d = flow::project_velocity(cam, pos, mat.velocity);
  const flow::FlowPrediction fv = flow::velocity_flow(out.topk, proj.means2d, proj.cov2d, v2d, pn.cov2d, dt);
  const int W = cam.width, H = cam.height;
  return {flow::to_flow_field(fg, W, H), flow::to_flow_field(fv, W, H)};
}

double Trainer::mean_residual() {
  double sum = 0;
  std::size_t count = 0;
  for (double t : scene_.times) {
    const auto pos = positions(t);
    ad::Tape tape;
    ad::Binder bind(tape);
    ad::Tensor pts({pos.size(), 4});
    for (std::size_t i = 0; i < pos.size(); ++i) {
      const Eigen::Vector4d p = scene_.bounds.clamp({pos[i].x(), pos[i].y(), pos[i].z(), t});
      for (int k = 0; k < 4; ++k) pts.at(i, static_cast<std::size_t>(k)) = p[k];
    }
    const physics::MomentumResidual r = physics::momentum_residual(material_->evaluate(bind, pts, cloud_.ids()));
    const ad::Tensor& v = r.residual.value();
    for (std::size_t i = 0; i < v.rows(); ++i) {
      sum += std::sqrt(v.at(i, 0) * v.at(i, 0) + v.at(i, 1) * v.at(i, 1) + v.at(i, 2) * v.at(i, 2));
      ++count;
    }
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

Evaluation Trainer::evaluate() {
  Evaluation e;
  const int F = static_cast<int>(scene_.frames.size());
  for (int f = 0; f < F; ++f) {
    const Image img = render(scene_.cameras[f], scene_.times[f]);
    e.psnr += psnr(img, scene_.frames[f]) / F;
    e.ssim += ssim(img, scene_.frames[f]) / F;
  }
  double epe = 0;
  for (int f = 0; f + 1 < F; ++f) {
    const flow::FlowField g = predict_flows(f).gaussian;
    const flow::FlowField& gt = scene_.motion[f];
    const Mask& mask = scene_.masks[f];
    for (int y = 0; y < g.height; ++y) {
      for (int x = 0; x < g.width; ++x) {
        if (!mask.at(x, y) || !g.is_valid(x, y) || !gt.is_valid(x, y)) continue;
        epe += (g.at(x, y) - gt.at(x, y)).norm();
        ++e.flow_pixels;
      }
    }
  }
  e.flow_epe = e.flow_pixels ? epe / static_cast<double>(e.flow_pixels) : 0.0;
  e.mean_residual = mean_residual();
  return e;
}

std::vector<ad::Parameter*> Trainer::named_parameters() {
  std::vector<ad::Parameter*> out = cloud_.parameters();
  for (auto* p : deformation_->grid_parameters()) out.push_back(p);
  for (auto* p : deformation_->network_parameters()) out.push_back(p);
  for (auto* p : material_->plane_parameters()) out.push_back(p);
  out.push_back(&material_->embedding());
  for (auto* p : material_->network_parameters()) out.push_back(p);
  return out;
}

void Trainer::save(const std::filesystem::path& path) const {
  auto& self = const_cast<Trainer&>(*this);
  io::ByteWriter w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kVersion);
  w.str(config_to_json(config_).dump());
  w.u64(static_cast<std::uint64_t>(iteration_));
  w.u8(dynamic_stage_ ? 1 : 0);

  w.u64(cloud_.size());
  for (std::size_t i = 0; i < cloud_.size(); ++i) {
    w.u64(static_cast<std::uint64_t>(cloud_.ids()[i]));
    w.u8(cloud_.dynamic()[i] ? 1 : 0);
  }
  w.u64(static_cast<std::uint64_t>(cloud_.next_id()));

  const auto params = self.named_parameters();
  w.u64(params.size());
  for (const auto* p : params) {
    w.str(p->name);
    write_tensor(w, p->value);
  }

  const auto& entries = adam_.entries();
  w.u64(entries.size());
  for (const auto& e : entries) {
    w.str(e.param->name);
    w.f64(e.rate);
    w.u64(e.state.step);
    write_tensor(w, e.state.m);
    write_tensor(w, e.state.v);
    w.u64(e.mask.size());
    for (bool b : e.mask) w.u8(b ? 1 : 0);
  }

  w.u64(grad_accum_.size());
  for (std::size_t i = 0; i < grad_accum_.size(); ++i) {
    w.f64(grad_accum_[i]);
    w.f64(grad_count_[i]);
  }
  std::ostringstream rng;
  rng << rng_;
  w.str(rng.str());
  w.save(path);
}

std::unique_ptr<Trainer> Trainer::load(const std::filesystem::path& path, scenegen::SyntheticScene scene) {
  io::ByteReader r = io::ByteReader::load(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (!std::equal(magic, magic + 8, kMagic)) throw FormatError(path.string() + " is not a checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw FormatError(path.string() + ": checkpoint format version " + std::to_string(version) +
                      " is not supported (expected " + std::to_string(kVersion) + ")");
  }
  RunConfig config;
  try {
    config = config_from_json(nlohmann::json::parse(r.str()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": embedded config: " + e.what());
  }
  auto t = std::make_unique<Trainer>(config, std::move(scene));
  t->iteration_ = static_cast<int>(r.u64());
  t->dynamic_stage_ = r.u8() != 0;

  const std::uint64_t n = r.u64();
  std::vector<std::int64_t> ids(n);
  std::vector<bool> dynamic(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    ids[i] = static_cast<std::int64_t>(r.u64());
    dynamic[i] = r.u8() != 0;
  }
  const auto next_id = static_cast<std::int64_t>(r.u64());

  std::map<std::string, ad::Tensor> tensors;
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    tensors[name] = read_tensor(r);
  }
  // Rebuild the cloud row by row, then overwrite every named tensor.
  scene::GaussianCloud cloud(t->cloud_.sh_degree());
  for (std::uint64_t i = 0; i < n; ++i) {
    scene::GaussianParticle p;
    p.sh.assign(cloud.sh_size(), 0.0);
    p.id = ids[i];
    cloud.add(p);
  }
  t->cloud_ = std::move(cloud);
  t->cloud_.set_dynamic(dynamic);
  t->cloud_.set_next_id(next_id);
  t->material_->ensure_ids(static_cast<std::size_t>(std::max<std::int64_t>(next_id, 1)));
  for (auto* p : t->named_parameters()) {
    auto it = tensors.find(p->name);
    if (it == tensors.end()) throw FormatError(path.string() + ": missing tensor " + p->name);
    if (it->second.shape() != p->value.shape() && !p->name.starts_with("gauss.") &&
        p->name != "material.embedding") {
      throw FormatError(path.string() + ": tensor " + p->name + " has shape " + it->second.shape_string() +
                        ", expected " + p->value.shape_string());
    }
    p->value = it->second;
    p->grad = ad::Tensor();
  }

  const std::uint64_t entries = r.u64();
  auto& adam = t->adam_.entries();
  if (entries != adam.size()) throw FormatError(path.string() + ": optimizer layout differs");
  for (auto& e : adam) {
    const std::string name = r.str();
    if (name != e.param->name) throw FormatError(path.string() + ": optimizer entry " + name + " out of order");
    e.rate = r.f64();
    e.state.step = r.u64();
    e.state.m = read_tensor(r);
    e.state.v = read_tensor(r);
    e.mask.assign(r.u64(), false);
    for (std::size_t i = 0; i < e.mask.size(); ++i) e.mask[i] = r.u8() != 0;
  }

  const std::uint64_t stats = r.u64();
  t->grad_accum_.assign(stats, 0.0);
  t->grad_count_.assign(stats, 0.0);
  for (std::uint64_t i = 0; i < stats; ++i) {
    t->grad_accum_[i] = r.f64();
    t->grad_count_[i] = r.f64();
  }
  std::istringstream rng(r.str());
  rng >> t->rng_;
  if (!rng || !r.done()) throw FormatError(path.string() + ": trailing or malformed data");
  return t;
}

void run(Trainer& trainer, std::ostream* log) {
  const RunConfig& c = trainer.config();
  const std::filesystem::path out = c.out.empty() ? std::filesystem::path(".") : std::filesystem::path(c.out);
  std::filesystem::create_directories(out);
  const auto csv_path = out / "metrics.csv";

  // Keep rows up to the resume point.
  std::vector<std::string> rows;
  if (trainer.iteration() > 0 && std::filesystem::exists(csv_path)) {
    std::ifstream in(csv_path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoi(line.substr(0, line.find(','))) <= trainer.iteration()) rows.push_back(line);
    }
  }
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw FormatError("cannot write " + csv_path.string());
  csv << kMetricsHeader << '\n';
  for (const auto& row : rows) csv << row << '\n';
  csv.flush();

  while (trainer.iteration() < c.iterations) {
    const StepMetrics m = trainer.step();
    if (m.iteration % c.log_every == 0 || m.iteration == c.iterations) {
      csv << metrics_row(m) << '\n';
      csv.flush();
      if (log) *log << metrics_row(m) << '\n';
    }
    if (c.checkpoint_every > 0 && m.iteration % c.checkpoint_every == 0 && m.iteration < c.iterations) {
      trainer.save(out / ("ckpt_" + std::to_string(m.iteration) + ".bin"));
    }
  }
  trainer.save(out / "final.bin");
}

}  // namespace pidg::train
