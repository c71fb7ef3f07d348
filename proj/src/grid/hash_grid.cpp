#include "pidg/grid/hash_grid.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "pidg/common/error.hpp"

namespace pidg::grid {
namespace {

constexpr std::size_t kMaxDims = 4;

struct Corner {
  std::size_t row;
  double weight;
  double slope[kMaxDims];  // d weight / d coordinate
};

void validate(const GridConfig& c) {
  if (c.dims < 1 || c.dims > kMaxDims) throw ConfigError("grid dims must be in [1,4]");
  if (c.levels < 1) throw ConfigError("grid needs at least one level");
  if (c.feature_dim < 1) throw ConfigError("grid feature_dim must be positive");
  if (c.base_resolution.size() != c.dims || c.max_resolution.size() != c.dims) {
    throw ConfigError("grid resolution lists must have one entry per axis");
  }
  for (std::size_t a = 0; a < c.dims; ++a) {
    if (!(c.base_resolution[a] >= 2) || !(c.max_resolution[a] >= c.base_resolution[a])) {
      throw ConfigError("grid resolution must satisfy 2 <= base <= max");
    }
  }
  if (c.table_size_log2 < 1 || c.table_size_log2 > 30) {
    throw ConfigError("table_size_log2 must be in [1,30]");
  }
}

// Visits the 2^dims corners of the cell containing `point` on one level.
template <class Fn>
void for_each_corner(const MultiResGrid& grid, std::size_t level, const double* point,
                     bool with_slope, Fn&& fn) {
  const GridLevel& info = grid.level_info()[level];
  const std::size_t d = grid.dims();
  std::uint32_t cell[kMaxDims];
  double frac[kMaxDims];
  double cells[kMaxDims];
  for (std::size_t a = 0; a < d; ++a) {
    cells[a] = static_cast<double>(info.resolution[a] - 1);
    const double pos = point[a] * cells[a];
    const double c = std::min(std::floor(pos), cells[a] - 1.0);
    cell[a] = static_cast<std::uint32_t>(c);
    frac[a] = pos - c;
  }
  std::uint32_t vertex[kMaxDims];
  for (std::uint32_t mask = 0; mask < (1u << d); ++mask) {
    Corner corner{};
    corner.weight = 1.0;
    for (std::size_t a = 0; a < d; ++a) {
      const bool hi = (mask >> a) & 1u;
      vertex[a] = cell[a] + (hi ? 1u : 0u);
      corner.weight *= hi ? frac[a] : 1.0 - frac[a];
    }
    if (with_slope) {
      for (std::size_t a = 0; a < d; ++a) {
        double s = cells[a] * (((mask >> a) & 1u) ? 1.0 : -1.0);
        for (std::size_t b = 0; b < d; ++b) {
          if (b == a) continue;
          s *= ((mask >> b) & 1u) ? frac[b] : 1.0 - frac[b];
        }
        corner.slope[a] = s;
      }
    }
    corner.row = grid.vertex_row(level, std::span<const std::uint32_t>(vertex, d));
    fn(corner);
  }
}

void check_coords(const MultiResGrid& grid, const ad::Tensor& coords) {
  if (coords.rank() != 2 || coords.cols() != grid.dims()) {
    throw ShapeError("grid expects M x " + std::to_string(grid.dims()) + " coordinates, got " +
                     coords.shape_string());
  }
  for (std::size_t i = 0; i < coords.size(); ++i) {
    if (!(coords[i] >= 0.0 && coords[i] <= 1.0)) {
      throw DomainError("grid coordinate " + std::to_string(coords[i]) + " in row " +
                        std::to_string(i / grid.dims()) + " outside [0,1]");
    }
  }
}

void check_table(const MultiResGrid& grid, const ad::Var& table) {
  const ad::Tensor& t = table.value();
  if (t.rank() != 2 || t.rows() != grid.entry_count() || t.cols() != grid.feature_dim()) {
    throw ShapeError("grid table has shape " + t.shape_string());
  }
}

std::size_t out_col(LevelReduce reduce, std::size_t level, std::size_t f, std::size_t fd) {
  return reduce == LevelReduce::kConcat ? level * fd + f : f;
}

}  // namespace

std::uint32_t level_resolution(double base, double max, std::size_t levels, std::size_t level) {
  const double growth = levels > 1 ? std::exp((std::log(max) - std::log(base)) /
                                              static_cast<double>(levels - 1))
                                   : 1.0;
  const double r = std::floor(base * std::pow(growth, static_cast<double>(level)) + 1e-6);
  return static_cast<std::uint32_t>(std::max(2.0, r));
}

std::uint32_t hash_vertex(std::span<const std::uint32_t> vertex, std::uint32_t table_size) {
  std::uint32_t h = 0;
  for (std::size_t a = 0; a < vertex.size(); ++a) h ^= vertex[a] * kHashPrimes[a];
  return h & (table_size - 1u);
}

MultiResGrid::MultiResGrid(std::string name, GridConfig config, std::mt19937_64& rng)
    : config_(std::move(config)) {
  validate(config_);
  const std::uint64_t table_size = 1ull << config_.table_size_log2;
  std::size_t offset = 0;
  for (std::size_t l = 0; l < config_.levels; ++l) {
    GridLevel info;
    std::uint64_t dense_count = 1;
    for (std::size_t a = 0; a < config_.dims; ++a) {
      const auto r = level_resolution(config_.base_resolution[a], config_.max_resolution[a],
                                      config_.levels, l);
      info.resolution.push_back(r);
      dense_count = std::min<std::uint64_t>(dense_count * r, table_size + 1);
    }
    info.dense = dense_count <= table_size;
    info.entries = info.dense ? dense_count : table_size;
    info.offset = offset;
    offset += info.entries;
    levels_.push_back(std::move(info));
  }
  ad::Tensor init({offset, config_.feature_dim});
  std::uniform_real_distribution<double> u(-config_.init_range, config_.init_range);
  for (double& v : init.values()) v = u(rng);
  table_ = ad::Parameter(std::move(name), std::move(init));
}

std::size_t MultiResGrid::vertex_row(std::size_t level,
                                     std::span<const std::uint32_t> vertex) const {
  const GridLevel& info = levels_.at(level);
  if (!info.dense) {
    return info.offset + hash_vertex(vertex, static_cast<std::uint32_t>(info.entries));
  }
  std::size_t index = 0;
  std::size_t stride = 1;
  for (std::size_t a = 0; a < vertex.size(); ++a) {
    index += vertex[a] * stride;
    stride *= info.resolution[a];
  }
  return info.offset + index;
}

std::vector<double> MultiResGrid::query(std::span<const double> point, LevelReduce reduce) const {
  if (point.size() != dims()) throw ShapeError("grid query has wrong dimension");
  for (double c : point) {
    if (!(c >= 0.0 && c <= 1.0)) throw DomainError("grid coordinate outside [0,1]");
  }
  const std::size_t fd = feature_dim();
  std::vector<double> out(output_dim(reduce), 0.0);
  const ad::Tensor& t = table_.value;
  for (std::size_t l = 0; l < levels(); ++l) {
    for_each_corner(*this, l, point.data(), false, [&](const Corner& c) {
      for (std::size_t f = 0; f < fd; ++f) out[out_col(reduce, l, f, fd)] += c.weight * t.at(c.row, f);
    });
  }
  return out;
}

ad::Var encode(const MultiResGrid& grid, const ad::Var& table, const ad::Var& coords,
               LevelReduce reduce) {
  const ad::Tensor& x = coords.value();
  check_coords(grid, x);
  check_table(grid, table);
  const std::size_t m = x.rows();
  const std::size_t d = grid.dims();
  const std::size_t fd = grid.feature_dim();
  const std::size_t levels = grid.levels();
  const std::size_t per_sample = levels << d;
  const bool coord_grad = coords.requires_grad();
  auto corners = std::make_shared<std::vector<Corner>>();
  corners->reserve(m * per_sample);
  const ad::Tensor& t = table.value();
  ad::Tensor y({m, grid.output_dim(reduce)}, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* p = x.data() + i * d;
    for (std::size_t l = 0; l < levels; ++l) {
      for_each_corner(grid, l, p, coord_grad, [&](const Corner& c) {
        for (std::size_t f = 0; f < fd; ++f) y.at(i, out_col(reduce, l, f, fd)) += c.weight * t.at(c.row, f);
        corners->push_back(c);
      });
    }
  }
  return table.tape().record(
      "grid_encode", std::move(y), {table, coords},
      [corners, table, coords, m, d, fd, levels, per_sample, reduce](ad::Tape& tape,
                                                                      const ad::Tensor& g) {
        ad::Tensor* gt = tape.grad_slot(table);
        ad::Tensor* gx = tape.grad_slot(coords);
        const ad::Tensor& t = table.value();
        const std::size_t nc = std::size_t{1} << d;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t l = 0; l < levels; ++l) {
            for (std::size_t k = 0; k < nc; ++k) {
              const Corner& c = (*corners)[i * per_sample + l * nc + k];
              for (std::size_t f = 0; f < fd; ++f) {
                const double go = g.at(i, out_col(reduce, l, f, fd));
                if (gt) gt->at(c.row, f) += go * c.weight;
                if (gx) {
                  for (std::size_t a = 0; a < d; ++a) gx->at(i, a) += go * c.slope[a] * t.at(c.row, f);
                }
              }
            }
          }
        }
      });
}

ad::Var encode_slope(const MultiResGrid& grid, const ad::Var& table, const ad::Tensor& coords,
                     std::size_t axis, LevelReduce reduce) {
  check_coords(grid, coords);
  check_table(grid, table);
  if (axis >= grid.dims()) throw ShapeError("slope axis out of range");
  const std::size_t m = coords.rows();
  const std::size_t d = grid.dims();
  const std::size_t fd = grid.feature_dim();
  const std::size_t levels = grid.levels();
  struct Tap {
    std::size_t row;
    double slope;
  };
  auto taps = std::make_shared<std::vector<Tap>>();
  taps->reserve(m * (levels << d));
  const ad::Tensor& t = table.value();
  ad::Tensor y({m, grid.output_dim(reduce)}, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* p = coords.data() + i * d;
    for (std::size_t l = 0; l < levels; ++l) {
      for_each_corner(grid, l, p, true, [&](const Corner& c) {
        for (std::size_t f = 0; f < fd; ++f) y.at(i, out_col(reduce, l, f, fd)) += c.slope[axis] * t.at(c.row, f);
        taps->push_back({c.row, c.slope[axis]});
      });
    }
  }
  return table.tape().record("grid_slope", std::move(y), {table},
                             [taps, table, m, d, fd, levels, reduce](ad::Tape& tape,
                                                                     const ad::Tensor& g) {
                               ad::Tensor* gt = tape.grad_slot(table);
                               if (!gt) return;
                               const std::size_t nc = std::size_t{1} << d;
                               std::size_t k = 0;
                               for (std::size_t i = 0; i < m; ++i) {
                                 for (std::size_t l = 0; l < levels; ++l) {
                                   for (std::size_t c = 0; c < nc; ++c, ++k) {
                                     const Tap& tap = (*taps)[k];
                                     for (std::size_t f = 0; f < fd; ++f) {
                                       gt->at(tap.row, f) += g.at(i, out_col(reduce, l, f, fd)) * tap.slope;
                                     }
                                   }
                                 }
                               }
                             });
}

std::size_t decomposed_entry_count(std::size_t n) { return 4 * n * n * n; }
std::size_t monolithic_entry_count(std::size_t n) { return n * n * n * n; }

}  // namespace pidg::grid
