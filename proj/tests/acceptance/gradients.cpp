#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "criteria.hpp"
#include "pidg/ad/binder.hpp"
#include "pidg/ad/ops.hpp"
#include "pidg/deform/deformation.hpp"
#include "pidg/flow/gaussian_flow.hpp"
#include "pidg/grid/hash_grid.hpp"
#include "pidg/material/material_field.hpp"
#include "pidg/physics/residual.hpp"
#include "pidg/render/rasterize.hpp"
#include "pidg/train/losses.hpp"
#include "support/fd.hpp"

namespace pidg::acceptance {
namespace {

constexpr int kCases = 100;
constexpr double kTolerance = 1e-5;
constexpr double kStep = 1e-5;
// Denominator floor of the relative error, so entries whose true gradient is
// zero are compared in absolute terms.
constexpr double kFloor = 1e-3;

// Loss of a list of input tensors; fills reverse-mode gradients when asked.
using LossFn = std::function<double(const std::vector<ad::Tensor>&, std::vector<ad::Tensor>*)>;

double worst_error(const LossFn& f, const std::vector<ad::Tensor>& inputs) {
  std::vector<ad::Tensor> grads;
  f(inputs, &grads);
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<ad::Tensor> probe = inputs;
    const ad::Tensor fd = test::central_difference(
        [&](const ad::Tensor& x) {
          probe[k] = x;
          return f(probe, nullptr);
        },
        inputs[k], kStep);
    worst = std::max(worst, test::max_relative_error(grads[k], fd, kFloor));
  }
  return worst;
}

void randomize(const std::vector<ad::Parameter*>& params, std::mt19937_64& rng, double range = 0.5) {
  for (ad::Parameter* p : params) p->value = test::random_tensor(p->value.shape(), rng, -range, range);
}

std::vector<ad::Tensor> values_of(const std::vector<ad::Parameter*>& params) {
  std::vector<ad::Tensor> out;
  for (const ad::Parameter* p : params) out.push_back(p->value);
  return out;
}

// --- hash interpolation -----------------------------------------------------

// True when no coordinate lies within `margin` cells of a grid line on any
// level, so a finite-difference stencil stays inside one interpolation cell.
bool clear_of_cells(const grid::MultiResGrid& g, const ad::Tensor& coords, std::span<const std::size_t> axes,
                    double margin = 1e-3) {
  for (const grid::GridLevel& level : g.level_info()) {
    for (std::size_t i = 0; i < coords.rows(); ++i) {
      for (std::size_t a = 0; a < g.dims(); ++a) {
        const double pos = coords.at(i, axes[a]) * static_cast<double>(level.resolution[a] - 1);
        const double frac = pos - std::floor(pos);
        if (frac < margin || frac > 1 - margin) return false;
      }
    }
  }
  return true;
}

double hash_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  grid::GridConfig c;
  c.dims = 2 + seed % 3;
  c.levels = 3;
  c.base_resolution.assign(c.dims, 3);
  c.max_resolution.assign(c.dims, 12);
  c.table_size_log2 = 6;
  c.feature_dim = 2;
  c.init_range = 1.0;
  const grid::MultiResGrid g("g", c, rng);
  const auto reduce = seed % 2 ? grid::LevelReduce::kSum : grid::LevelReduce::kConcat;
  const std::size_t axes[] = {0, 1, 2, 3};
  ad::Tensor x;
  do {
    x = test::random_tensor({3, c.dims}, rng, 0.02, 0.98);
  } while (!clear_of_cells(g, x, axes));
  const ad::Tensor w = test::random_tensor({3, g.output_dim(reduce)}, rng);
  return worst_error(
      [&](const std::vector<ad::Tensor>& in, std::vector<ad::Tensor>* grads) {
        ad::Tape t;
        const std::vector<ad::Var> v{t.leaf(in[0]), t.leaf(in[1])};
        const ad::Var loss = ad::sum(ad::mul(grid::encode(g, v[0], v[1], reduce), t.constant(w)));
        if (grads) *grads = t.gradients(loss, v);
        return loss.value().item();
      },
      {g.table().value, x});
}

// --- deformation field ------------------------------------------------------

deform::DeformationConfig tiny_deformation() {
  deform::DeformationConfig c;
  c.spatial_levels = 3;
  c.spatial_base = 4;
  c.spatial_max = 16;
  c.temporal_levels = 3;
  c.time_resolution = 4;
  c.table_size_log2 = 10;
  c.attention_width = 8;
  c.decoder_width = 12;
  return c;
}

double attention_case(std::uint64_t seed) {
  deform::DeformationField field(tiny_deformation(), seed);
  std::mt19937_64 rng(seed + 1000);
  const auto net = field.network_parameters();
  const std::vector<ad::Parameter*> params(net.begin(), net.begin() + 4);  // f_s and f_t
  randomize(params, rng);
  const std::size_t m = 3, width = 6;
  std::vector<ad::Tensor> inputs = values_of(params);
  for (int k = 0; k < 4; ++k) inputs.push_back(test::random_tensor({m, width}, rng, -1, 1));
  const ad::Tensor w = test::random_tensor({m, tiny_deformation().attention_width}, rng);
  const std::size_t np = params.size();
  return worst_error(
      [&](const std::vector<ad::Tensor>& in, std::vector<ad::Tensor>* grads) {
        for (std::size_t k = 0; k < np; ++k) params[k]->value = in[k];
        ad::Tape t;
        ad::Binder bind(t);
        std::vector<ad::Var> v;
        for (ad::Parameter* p : params) v.push_back(bind(*p));
        for (std::size_t k = np; k < in.size(); ++k) v.push_back(t.leaf(in[k]));
        const deform::Encoding enc{v[np], {v[np + 1], v[np + 2], v[np + 3]}};
        const ad::Var loss = ad::sum(ad::mul(field.attention_modulate(bind, enc), t.constant(w)));
        if (grads) *grads = t.gradients(loss, v);
        return loss.value().item();
      },
      inputs);
}

// Decoder heads applied to canonical poses, differentiated in the attention
// feature, decoder weights and the canonical pose.
double decode_case(std::uint64_t seed) {
  deform::DeformationField field(tiny_deformation(), seed);
  std::mt19937_64 rng(seed + 2000);
  const auto net = field.network_parameters();
  const std::vector<ad::Parameter*> params(net.begin() + 4, net.end());  // hidden and output
  randomize(params, rng);
  const std::size_t m = 3, np = params.size();
  std::vector<ad::Tensor> inputs = values_of(params);
  inputs.push_back(test::random_tensor({m, tiny_deformation().attention_width}, rng, -1, 1));
  inputs.push_back(test::random_tensor({m, 3}, rng));
  inputs.push_back(test::random_tensor({m, 4}, rng));
  inputs.push_back(test::random_tensor({m, 3}, rng, -2, 0));
  const ad::Tensor wm = test::random_tensor({m, 3}, rng), wq = test::random_tensor({m, 4}, rng),
                   ws = test::random_tensor({m, 3}, rng);
  return worst_error(
      [&](const std::vector<ad::Tensor>& in, std::vector<ad::Tensor>* grads) {
        for (std::size_t k = 0; k < np; ++k) params[k]->value = in[k];
        ad::Tape t;
        ad::Binder bind(t);
        std::vector<ad::Var> v;
        for (ad::Parameter* p : params) v.push_back(bind(*p));
        for (std::size_t k = np; k < in.size(); ++k) v.push_back(t.leaf(in[k]));
        const deform::DeformedPose pose = deform::apply_heads(field.decode(bind, v[np]), v[np + 1], v[np + 2], v[np + 3]);
        const ad::Var loss = ad::add(ad::add(ad::sum(ad::mul(pose.means, t.constant(wm))),
                                             ad::sum(ad::mul(pose.quats, t.constant(wq)))),
                                     ad::sum(ad::mul(pose.log_scales, t.constant(ws))));
        if (grads) *grads = t.gradients(loss, v);
        return loss.value().item();
      },
      inputs);
}

// --- renderer ---------------------------------------------------------------

render::Camera random_camera(std::mt19937_64& rng, int size, double focal) {
  std::uniform_real_distribution<double> u(-1, 1);
  const Eigen::Vector3d eye(u(rng), u(rng), -4 + 0.5 * u(rng));
  return render::Camera::look_at(eye, {0.1 * u(rng), 0.1 * u(rng), 0}, {0, -1, 0}, size, size, focal);
}

double projection_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed + 3000);
  const render::Camera cam = random_camera(rng, 32, 40);
  const std::size_t n = 4;
  const std::vector<ad::Tensor> inputs{test::random_tensor({n, 3}, rng, -0.8, 0.8), test::random_tensor({n, 4}, rng),
                                       test::random_tensor({n, 3}, rng, -2.5, -1)};
  const ad::Tensor wm = test::random_tensor({n, 2}, rng), wc = test::random_tensor({n, 3}, rng),
                   wd = test::random_tensor({n, 1}, rng);
  return worst_error(
      [&](const std::vector<ad::Tensor>& in, std::vector<ad::Tensor>* grads) {
        ad::Tape t;
        const std::vector<ad::Var> v{t.leaf(in[0]), t.leaf(in[1]), t.leaf(in[2])};
        const render::Projection p = render::project(cam, v[0], v[1], v[2]);
        const ad::Var loss = ad::add(ad::add(ad::sum(ad::mul(p.means2d, t.constant(wm))),
                                             ad::sum(ad::mul(p.cov2d, t.constant(wc)))),
                                     ad::sum(ad::mul(p.depth, t.constant(wd))));
        if (grads) *grads = t.gradients(loss, v);
        return loss.value().item();
      },
      inputs);
}

// True when every splat-pixel pair sits clear of the footprint and alpha
// cutoffs, so a finite-difference stencil never crosses a branch.
bool clear_of_cutoffs(const ad::Tensor& means, const ad::Tensor& covs, const ad::Tensor& opacity, int w, int h,
                      const render::RasterSettings& s) {
  for (std::size_t i = 0; i < means.rows(); ++i) {
    const double a = covs.at(i, 0), b = covs.at(i, 1), c = covs.at(i, 2), det = a * c - b * b;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double dx = x - means.at(i, 0), dy = y - means.at(i, 1);
        const double maha = (c * dx * dx - 2 * b * dx * dy + a * dy * dy) / det;
        if (std::abs(maha - s.mahalanobis_cutoff) < 1e-2) return false;
        const double alpha = opacity[i] * std::exp(-0.5 * maha);
        if (maha < s.mahalanobis_cutoff && std::abs(alpha - s.alpha_min) < 1e-4) return false;
      }
    }
  }
  return true;
}

double compositing_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed + 4000);
  const int size = 12;
  const std::size_t n = 5;
  render::Camera cam;
  cam.width = cam.height = size;
  cam.fx = cam.fy = 15;
  cam.cx = cam.cy = size / 2.0;
  const render::RasterSettings settings;
  std::uniform_real_distribution<double> u(0, 1);
  ad::Tensor means, covs, depth, colors, opacity;
  do {
    means = test::random_tensor({n, 2}, rng, 1, size - 2);
    covs = ad::Tensor({n, 3});
    for (std::size_t i = 0; i < n; ++i) {
      const double a = 1 + 6 * u(rng), c = 1 + 6 * u(rng), r = 0.8 * (u(rng) - 0.5);
      covs.at(i, 0) = a;
      covs.at(i, 1) = r * std::sqrt(a * c);
      covs.at(i, 2) = c;
    }
    depth = test::random_tensor({n, 1}, rng, 1, 5);
    colors = test::random_tensor({n, 3}, rng, 0.05, 0.95);
    opacity = test::random_tensor({n, 1}, rng, 0.2, 0.9);
  } while (!clear_of_cutoffs(means, covs, opacity, size, size, settings));
  std::vector<std::int64_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<std::int64_t>(i);
  const ad::Tensor wc = test::random_tensor({static_cast<std::size_t>(size), static_cast<std::size_t>(size), 3}, rng);
  const ad::Tensor wd = test::random_tensor({static_cast<std::size_t>(size), static_cast<std::size_t>(size)}, rng);
  return worst_error(
      [&](const std::vector<ad::Tensor>& in, std::vector<ad::Tensor>* grads) {
        ad::Tape t;
        std::vector<ad::Var> v;
        for (const auto& x : in) v.push_back(t.leaf(x));
        const render::Projection p{v[0], v[1], v[2], std::vector<bool>(n, true)};
        const render::RenderOutput out = render::rasterize(cam, p, v[3], v[4], ids, settings);
        const ad::Var loss =
            ad::add(ad::sum(ad::mul(out.color, t.constant(wc))), ad::sum(ad::mul(out.depth, t.constant(wd))));
        if (grads) *grads = t.gradients(loss, v);
        return loss.value().item();
      },
      {means, covs, depth, colors, opacity});
}

// --- material field ---------------------------------------------------------

material::MaterialConfig tiny_material() {
  material::MaterialConfig c;
  c.plane_levels = 2;
  c.plane_base = 4;
  c.plane_max = 8;
  c.fourier_frequencies = 3;
  c.embedding_dim = 4;
  c.hidden_width = 8;
  return c;
}

std::vector<ad::Parameter*> material_params(material::MaterialField& f, std::size_t plane) {
  std::vector<ad::Parameter*> params = f.network_parameters();
  params.push_back(&f.embedding());
  params.push_back(f.plane_parameters()[plane]);
  return params;
}

double material_case(std::uint64_t seed) {
  material::MaterialField field(tiny_material(), {}, 4, seed);
  std::mt19937_64 rng(seed + 5000);
  randomize(field.network_parameters(), rng);
  const std::vector<ad::Parameter*> params = material_params(field, seed % 6);
  const std::size_t m = 3, np = params.size();
  std::vector<ad::Tensor> inputs = values_of(params);
  auto clear = [&](const ad::Tensor& pts) {
    for (std::size_t p = 0; p < field.planes().size(); ++p)
      if (!clear_of_cells(field.planes()[p], pts, material::kPlaneAxes[p])) return false;
    return true;
  };
  ad::Tensor points;
  do {
    points = test::random_tensor({m, 4}, rng, 0.05, 0.95);
  } while (!clear(points));
  inputs.push_back(points);
  const std::int64_t ids[] = {static_cast<std::int64_t>(seed % 4), 3, 1};
  const ad::Tensor wv = test::random_tensor({m, 3}, rng), ws = test::random_tensor({m, 6}, rng);
  return worst_error(
      [&](const std::vector<ad::Tensor>& in, std::vector<ad::Tensor>* grads) {
        for (std::size_t k = 0; k < np; ++k) params[k]->value = in[k];
        ad::Tape t;
        ad::Binder bind(t);
        std::vector<ad::Var> v;
        for (ad::Parameter* p : params) v.push_back(bind(*p));
        v.push_back(t.leaf(in[np]));
        const material::MaterialOutput out = field.predict(bind, field.featurize(bind, v[np], ids));
        const ad::Var loss =
            ad::add(ad::sum(ad::mul(out.velocity, t.constant(wv))), ad::sum(ad::mul(out.stress, t.constant(ws))));
        if (grads) *grads = t.gradients(loss, v);
        return loss.value().item();
      },
      inputs);
}

// --- losses -----------------------------------------------------------------

double renders_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed + 6000);
  const ad::Tensor x = test::random_tensor({7, 8, 3}, rng, 0.05, 0.95);
  const ad::Tensor y = test::random_tensor({7, 8, 3}, rng, 0.05, 0.95);
  return worst_error(
      [&](const std::vector<ad::Tensor>& in, std::vector<ad::Tensor>* grads) {
        ad::Tape t;
        const std::vector<ad::Var> v{t.leaf(in[0])};
        const ad::Var loss = train::renders_loss(v[0], y);
        if (grads) *grads = t.gradients(loss, v);
        return loss.value().item();
      },
      {x});
}

double cmr_case(std::uint64_t seed) {
  material::MaterialField field(tiny_material(), {}, 4, seed);
  std::mt19937_64 rng(seed + 7000);
  randomize(field.network_parameters(), rng);
  const std::vector<ad::Parameter*> params = material_params(field, seed % 6);
  physics::CmrSamples samples{test::random_tensor({4, 4}, rng, 0.05, 0.95), {0, 1, 2, 3}};
  physics::ResidualOptions opts;
  opts.density = 0.5 + std::uniform_real_distribution<double>(0, 1)(rng);
  return worst_error(
      [&](const std::vector<ad::Tensor>& in, std::vector<ad::Tensor>* grads) {
        for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = in[k];
        ad::Tape t;
        ad::Binder bind(t);
        std::vector<ad::Var> v;
        for (ad::Parameter* p : params) v.push_back(bind(*p));
        const ad::Var loss =
            physics::cmr_loss(physics::momentum_residual(field.evaluate(bind, samples.points, samples.ids), opts));
        if (grads) *grads = t.gradients(loss, v);
        return loss.value().item();
      },
      values_of(params));
}

// Flow matching through both flow predictions from a fixed top-K table.
double lpfm_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed + 8000);
  std::uniform_real_distribution<double> u(0, 1);
  const int w = 6, h = 5;
  const std::size_t n = 3;
  render::TopK tk;
  tk.width = w;
  tk.height = h;
  tk.k = 2;
  for (int px = 0; px < w * h; ++px) {
    tk.count.push_back(static_cast<std::uint8_t>(px % 4 == 0 ? 1 : 2));
    tk.index.push_back(static_cast<std::uint32_t>(px % n));
    tk.index.push_back(static_cast<std::uint32_t>((px + 1) % n));
    tk.weight.push_back(0.2 + u(rng));
    tk.weight.push_back(0.2 + u(rng));
  }
  auto random_cov = [&] {
    ad::Tensor c({n, 3});
    for (std::size_t i = 0; i < n; ++i) {
      const double a = 0.5 + 2 * u(rng), b = 0.5 + 2 * u(rng), r = 0.8 * (u(rng) - 0.5);
      c.at(i, 0) = a;
      c.at(i, 1) = r * std::sqrt(a * b);
      c.at(i, 2) = b;
    }
    return c;
  };
  const std::vector<ad::Tensor> inputs{test::random_tensor({n, 2}, rng, 0, 5), random_cov(),
                                       test::random_tensor({n, 2}, rng, 0, 5), random_cov(),
                                       test::random_tensor({n, 2}, rng, -3, 3)};
  flow::FlowField gt(w, h);
  Mask mask(w, h, true);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) gt.set(x, y, {4 * (u(rng) - 0.5), 4 * (u(rng) - 0.5)});
  gt.invalidate(2, 2);
  mask.set(0, 1, false);
  const double dt = 0.3 + u(rng);
  return worst_error(
      [&](const std::vector<ad::Tensor>& in, std::vector<ad::Tensor>* grads) {
        ad::Tape t;
        std::vector<ad::Var> v;
        for (const auto& x : in) v.push_back(t.leaf(x));
        const flow::FlowPrediction fg = flow::gaussian_flow(tk, v[0], v[1], v[2], v[3]);
        const flow::FlowPrediction fv = flow::velocity_flow(tk, v[0], v[1], v[4], v[3], dt);
        const ad::Var loss = flow::lpfm_loss(fg, fv, gt, mask).loss;
        if (grads) *grads = t.gradients(loss, v);
        return loss.value().item();
      },
      inputs);
}

}  // namespace

Outcome gradient_suite() {
  Stopwatch clock;
  struct Op {
    const char* name;
    double (*run)(std::uint64_t);
  };
  const Op ops[] = {{"hash", hash_case},         {"attention", attention_case}, {"decode", decode_case},
                    {"projection", projection_case}, {"compositing", compositing_case},
                    {"material", material_case}, {"renders", renders_case},   {"cmr", cmr_case},
                    {"lpfm", lpfm_case}};
  bool pass = true;
  std::string detail = "worst rel err:";
  for (const Op& op : ops) {
    double worst = 0;
    for (int seed = 0; seed < kCases; ++seed) worst = std::max(worst, op.run(static_cast<std::uint64_t>(seed)));
    pass = pass && worst < kTolerance;
    detail += std::string(" ") + op.name + fmt("=%.1e", worst);
  }
  const double elapsed = clock.seconds();
  pass = pass && elapsed < 120.0;
  detail += fmt(", %.0f cases per op", kCases);
  return {pass, detail};
}

}  // namespace pidg::acceptance
